//! Answer normalization, numeric option mapping and judge verdict parsing.

use std::sync::OnceLock;

use regex::Regex;

use crate::model::AnswerOption;

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex")
    })
}

/// First number in an option body after stripping currency symbols,
/// thousands separators and percent signs.
pub fn parse_option_number(body: &str) -> Option<f64> {
    let mut cleaned = String::with_capacity(body.len());
    let chars: Vec<char> = body.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '$' | '€' | '£' | '%' => {}
            '\u{2212}' => cleaned.push('-'),
            ',' => {
                // thousands separator only between digits
                let prev = i > 0 && chars[i - 1].is_ascii_digit();
                let next = chars.get(i + 1).is_some_and(char::is_ascii_digit);
                if !(prev && next) {
                    cleaned.push(' ');
                }
            }
            c => cleaned.push(c),
        }
    }
    number_re()
        .find(&cleaned)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

/// Label of the option numerically closest to `value`; ties go to the earlier
/// option. `None` when no option body parses as a number.
pub fn map_to_option(value: f64, options: &[AnswerOption]) -> Option<String> {
    let mut best: Option<(f64, &str)> = None;
    for opt in options {
        let Some(v) = parse_option_number(&opt.body) else {
            continue;
        };
        let dist = (value - v).abs();
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, &opt.label));
        }
    }
    best.map(|(_, label)| label.to_string())
}

/// Canonical form of an option label: trimmed, uppercased, with surrounding
/// brackets, periods and emphasis removed.
pub fn normalize_label(raw: &str) -> String {
    let mut s = raw.trim();
    let lower = s.to_ascii_lowercase();
    for prefix in ["final answer:", "answer:", "option"] {
        if lower.starts_with(prefix) {
            s = s[prefix.len()..].trim();
            break;
        }
    }
    let strip: &[char] = &[
        '(', ')', '[', ']', '{', '}', '.', ':', '*', '`', '"', '\'', ' ',
    ];
    s.trim_matches(strip).to_uppercase()
}

fn normalize_body(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_lowercase()
}

/// Resolves a free-form prediction to an option label, if possible.
pub fn resolve_label(predicted: &str, options: &[AnswerOption]) -> Option<String> {
    let norm = normalize_label(predicted);
    if let Some(opt) = options.iter().find(|o| normalize_label(&o.label) == norm) {
        return Some(opt.label.clone());
    }
    let body = normalize_body(predicted);
    if let Some(opt) = options.iter().find(|o| normalize_body(&o.body) == body) {
        return Some(opt.label.clone());
    }
    // "B) 2.0", "(b). text", "C: ..."
    let t = predicted.trim().trim_start_matches(['(', '[']);
    let head: String = t.chars().take_while(|c| c.is_alphanumeric()).collect();
    let rest = &t[head.len()..];
    if !head.is_empty()
        && (rest.starts_with(')')
            || rest.starts_with('.')
            || rest.starts_with(':')
            || rest.starts_with(']'))
    {
        let head = head.to_uppercase();
        if let Some(opt) = options.iter().find(|o| normalize_label(&o.label) == head) {
            return Some(opt.label.clone());
        }
    }
    None
}

/// Rule-based exact match for multiple-choice answers.
pub fn grade_mc(predicted: &str, gold: &str, options: &[AnswerOption]) -> bool {
    let gold = normalize_label(gold);
    match resolve_label(predicted, options) {
        Some(label) => normalize_label(&label) == gold,
        None => !gold.is_empty() && normalize_label(predicted) == gold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// Reads the last `VERDICT:` line of a judge reply.
pub fn parse_verdict(reply: &str) -> Option<Verdict> {
    for line in reply.lines().rev() {
        let upper = line.to_uppercase();
        let Some(pos) = upper.find("VERDICT:") else {
            continue;
        };
        let tail = upper[pos + "VERDICT:".len()..]
            .trim()
            .trim_matches(['*', '`', '.', ' ']);
        if tail.starts_with("INCORRECT") {
            return Some(Verdict::Incorrect);
        }
        if tail.starts_with("CORRECT") {
            return Some(Verdict::Correct);
        }
    }
    None
}

pub const JUDGE_SYSTEM_PROMPT: &str =
    "You grade answers to finance exam questions against a reference answer.";

pub fn judge_prompt(question: &str, context: &str, gold: &str, predicted: &str) -> String {
    let mut out = String::new();
    if !context.trim().is_empty() {
        out.push_str(&format!("Context:\n{}\n\n", context.trim()));
    }
    out.push_str(&format!(
        "Question:\n{}\n\nReference answer:\n{}\n\nCandidate answer:\n{}\n\n",
        question.trim(),
        gold.trim(),
        predicted.trim()
    ));
    out.push_str(
        "Decide whether the candidate answer is equivalent to the reference answer. Accept small rounding differences and equivalent wording. End your reply with a final line that is exactly `VERDICT: CORRECT` or `VERDICT: INCORRECT`.",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(pairs: &[(&str, &str)]) -> Vec<AnswerOption> {
        pairs
            .iter()
            .map(|(l, b)| AnswerOption::new(*l, *b))
            .collect()
    }

    #[test]
    fn nearest_and_tie_break() {
        let o = opts(&[("A", "1.5"), ("B", "2.0"), ("C", "2.5")]);
        assert_eq!(map_to_option(2.04, &o).as_deref(), Some("B"));
        assert_eq!(map_to_option(2.25, &o).as_deref(), Some("B"));
    }

    #[test]
    fn currency_is_stripped() {
        let o = opts(&[("A", "$88.9"), ("B", "$91.2")]);
        assert_eq!(map_to_option(89.0, &o).as_deref(), Some("A"));
    }

    #[test]
    fn no_numeric_options() {
        let o = opts(&[("A", "increase"), ("B", "decrease")]);
        assert_eq!(map_to_option(1.0, &o), None);
    }

    #[test]
    fn option_number_parsing() {
        assert_eq!(parse_option_number("$1,234.50"), Some(1234.5));
        assert_eq!(parse_option_number("12.5%"), Some(12.5));
        assert_eq!(
            parse_option_number("approximately €-3.2 million"),
            Some(-3.2)
        );
        assert_eq!(parse_option_number("\u{2212}7"), Some(-7.0));
        assert_eq!(parse_option_number("1, 2 and 3"), Some(1.0));
        assert_eq!(parse_option_number("none"), None);
    }

    #[test]
    fn verdicts() {
        assert_eq!(
            parse_verdict("ok\nVERDICT: CORRECT"),
            Some(Verdict::Correct)
        );
        assert_eq!(
            parse_verdict("VERDICT: INCORRECT\n"),
            Some(Verdict::Incorrect)
        );
        assert_eq!(
            parse_verdict("**Verdict: correct**"),
            Some(Verdict::Correct)
        );
        assert_eq!(
            parse_verdict("VERDICT: CORRECT\nVERDICT: INCORRECT"),
            Some(Verdict::Incorrect)
        );
        assert_eq!(parse_verdict("looks right to me"), None);
    }

    #[test]
    fn basic_mc_grading() {
        let o = opts(&[("A", "1"), ("B", "2"), ("C", "3")]);
        assert!(grade_mc("(B)", "B", &o));
        assert!(grade_mc("b.", "B", &o));
        assert!(!grade_mc("B", "C", &o));
    }

    proptest::proptest! {
        #[test]
        fn mapping_picks_first_nearest(
            values in proptest::collection::vec(-500i32..500, 1..6),
            x in -600i32..600,
        ) {
            let labels = ["A", "B", "C", "D", "E", "F"];
            let options: Vec<AnswerOption> = values
                .iter()
                .zip(labels)
                .map(|(v, l)| AnswerOption::new(l, format!("${v}")))
                .collect();
            let best = values.iter().map(|v| (v - x).abs()).min().unwrap();
            let first = values.iter().position(|v| (v - x).abs() == best).unwrap();
            proptest::prop_assert_eq!(map_to_option(x as f64, &options), Some(labels[first].to_string()));
        }
    }
}
