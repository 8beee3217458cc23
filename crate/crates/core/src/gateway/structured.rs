use std::collections::BTreeMap;

use serde_json::Value;

use crate::model::normalize_enum_token;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldKind {
    /// Non-empty free text.
    Text,
    /// One of the listed slugs after enum normalization.
    OneOf(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn text(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Text,
        }
    }

    pub fn one_of(name: impl Into<String>, allowed: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::OneOf(allowed),
        }
    }
}

/// Validated field values; enum fields hold their normalized slug.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StructuredRecord(pub BTreeMap<String, String>);

impl StructuredRecord {
    pub fn get(&self, field: &str) -> Option<&str> {
        self.0.get(field).map(String::as_str)
    }
}

/// First well-formed JSON object embedded anywhere in `text` (surrounding
/// prose and code fences are skipped).
pub fn extract_first_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    for (idx, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[idx..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

pub(crate) fn parse_structured(
    text: &str,
    schema: &[FieldSpec],
) -> Result<StructuredRecord, String> {
    let object = extract_first_object(text).ok_or_else(|| "no JSON object found".to_string())?;
    let mut out = BTreeMap::new();
    for field in schema {
        let raw = match object.get(&field.name) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::Bool(b)) => b.to_string(),
            Some(other) => {
                return Err(format!(
                    "field `{}` must be a string, got {other}",
                    field.name
                ))
            }
            None => return Err(format!("missing field `{}`", field.name)),
        };
        let value = match &field.kind {
            FieldKind::Text => {
                let v = raw.split_whitespace().collect::<Vec<_>>().join(" ");
                if v.is_empty() {
                    return Err(format!("field `{}` is empty", field.name));
                }
                v
            }
            FieldKind::OneOf(allowed) => {
                let norm = normalize_enum_token(&raw);
                allowed
                    .iter()
                    .find(|a| normalize_enum_token(a) == norm)
                    .cloned()
                    .ok_or_else(|| format!("field `{}` has invalid value {raw:?}", field.name))?
            }
        };
        out.insert(field.name.clone(), value);
    }
    Ok(StructuredRecord(out))
}

pub(crate) fn retry_suffix(reason: &str, schema: &[FieldSpec]) -> String {
    let mut s = format!(
        "Your previous reply could not be used ({reason}). Reply with exactly one JSON object with these keys:"
    );
    for f in schema {
        match &f.kind {
            FieldKind::Text => s.push_str(&format!("\n- \"{}\": non-empty string", f.name)),
            FieldKind::OneOf(allowed) => s.push_str(&format!(
                "\n- \"{}\": one of {}",
                f.name,
                allowed.join(", ")
            )),
        }
    }
    s
}
