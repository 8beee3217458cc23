//! QA corpus loading, language filtering, group-context propagation and
//! stratified train/test splitting.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::model::{digest_hex, AnswerOption, Difficulty, Question, QuestionType};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub questions: Vec<Question>,
    pub source_digest: String,
}

impl Corpus {
    pub fn new(questions: Vec<Question>) -> Self {
        let digest = digest_hex(to_jsonl(&questions));
        Self {
            questions,
            source_digest: digest,
        }
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.questions.iter().map(|q| q.id.as_str()).collect()
    }

    fn derived(&self, questions: Vec<Question>) -> Self {
        Self {
            questions,
            source_digest: self.source_digest.clone(),
        }
    }
}

/// One line of the newline-delimited JSON corpus format.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_id: Option<String>,
    question: String,
    #[serde(default)]
    context: String,
    subfield: String,
    difficulty: Difficulty,
    qtype: QuestionType,
    #[serde(default)]
    options: Vec<AnswerOption>,
    gold: String,
    is_arithmetic: bool,
    language: String,
}

impl From<Record> for Question {
    fn from(r: Record) -> Self {
        Question {
            group_id: r.group_id.unwrap_or_else(|| r.id.clone()),
            id: r.id,
            text: r.question,
            context: r.context,
            subfield: r.subfield,
            difficulty: r.difficulty,
            qtype: r.qtype,
            options: r.options,
            gold: r.gold,
            is_arithmetic: r.is_arithmetic,
            language_tag: r.language,
        }
    }
}

impl From<&Question> for Record {
    fn from(q: &Question) -> Self {
        Record {
            id: q.id.clone(),
            group_id: Some(q.group_id.clone()),
            question: q.text.clone(),
            context: q.context.clone(),
            subfield: q.subfield.clone(),
            difficulty: q.difficulty,
            qtype: q.qtype,
            options: q.options.clone(),
            gold: q.gold.clone(),
            is_arithmetic: q.is_arithmetic,
            language: q.language_tag.clone(),
        }
    }
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus, CorpusError> {
    let mut questions = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let q = Question::from(record);
        q.check().map_err(|message| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        if let Some(&first_line) = seen.get(&q.id) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                first_line,
                id: q.id,
            });
        }
        seen.insert(q.id.clone(), lineno);
        questions.push(q);
    }
    Ok(Corpus {
        questions,
        source_digest: digest_hex(text),
    })
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text, path)
}

pub fn to_jsonl(questions: &[Question]) -> String {
    let mut out = String::new();
    for q in questions {
        out.push_str(&serde_json::to_string(&Record::from(q)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(questions: &[Question], path: &Path) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(questions).as_bytes())
}

pub fn filter_language(c: &Corpus, tag: &str) -> Corpus {
    c.derived(
        c.questions
            .iter()
            .filter(|q| q.language_tag == tag)
            .cloned()
            .collect(),
    )
}

/// Copies each group's first-member context into members whose own context is
/// empty.
pub fn propagate_context(c: &Corpus) -> Corpus {
    let mut first: HashMap<&str, &str> = HashMap::new();
    for q in &c.questions {
        first
            .entry(q.group_id.as_str())
            .or_insert(q.context.as_str());
    }
    let questions = c
        .questions
        .iter()
        .map(|q| {
            let mut q = q.clone();
            if q.context.trim().is_empty() {
                if let Some(ctx) = first.get(q.group_id.as_str()) {
                    q.context = ctx.to_string();
                }
            }
            q
        })
        .collect();
    c.derived(questions)
}

pub fn partition_arithmetic(c: &Corpus) -> (Corpus, Corpus) {
    let (arith, non): (Vec<_>, Vec<_>) = c.questions.iter().cloned().partition(|q| q.is_arithmetic);
    (c.derived(arith), c.derived(non))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKey {
    Difficulty,
    Qtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub strata_keys: Vec<StratumKey>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            strata_keys: vec![StratumKey::Difficulty, StratumKey::Qtype],
            seed: 0,
        }
    }
}

fn stratum_label(q: &Question, keys: &[StratumKey]) -> String {
    let parts: Vec<&str> = keys
        .iter()
        .map(|k| match k {
            StratumKey::Difficulty => q.difficulty.as_str(),
            StratumKey::Qtype => q.qtype.as_str(),
        })
        .collect();
    if parts.is_empty() {
        "all".to_string()
    } else {
        parts.join("/")
    }
}

/// Round-half-up of `fraction * n`.
pub fn train_count(fraction: f64, n: usize) -> usize {
    // tolerance absorbs binary representation error in products like 0.6 * 5
    ((fraction * n as f64) + 0.5 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub stratum: String,
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub strata: Vec<StratumCount>,
    pub train_total: usize,
    pub test_total: usize,
    /// Items moved at the largest stratum's boundary to bring the global train
    /// count within one of `round(fraction * N)`. Positive means more train.
    pub drift_correction: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Corpus,
    pub test: Corpus,
    pub manifest: SplitManifest,
}

pub fn stratified_split(c: &Corpus, spec: &SplitSpec) -> Split {
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, q) in c.questions.iter().enumerate() {
        strata
            .entry(stratum_label(q, &spec.strata_keys))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shuffled: Vec<(String, Vec<usize>, usize)> = strata
        .into_iter()
        .map(|(label, mut idx)| {
            idx.shuffle(&mut rng);
            let take = train_count(spec.train_fraction, idx.len());
            (label, idx, take)
        })
        .collect();

    let target = train_count(spec.train_fraction, c.len()) as i64;
    let mut total: i64 = shuffled.iter().map(|s| s.2 as i64).sum();
    let mut correction = 0i64;
    if (total - target).abs() > 1 {
        if let Some(largest) = shuffled
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.len().cmp(&b.1 .1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
        {
            let s = &mut shuffled[largest];
            while (total - target).abs() > 1 {
                if total > target && s.2 > 0 {
                    s.2 -= 1;
                    total -= 1;
                    correction -= 1;
                } else if total < target && s.2 < s.1.len() {
                    s.2 += 1;
                    total += 1;
                    correction += 1;
                } else {
                    break;
                }
            }
        }
    }

    let mut in_train = vec![false; c.len()];
    let mut counts = Vec::new();
    for (label, idx, take) in &shuffled {
        for &i in &idx[..*take] {
            in_train[i] = true;
        }
        counts.push(StratumCount {
            stratum: label.clone(),
            total: idx.len(),
            train: *take,
            test: idx.len() - take,
        });
    }
    let (train, test): (Vec<_>, Vec<_>) = c
        .questions
        .iter()
        .zip(&in_train)
        .map(|(q, t)| (q.clone(), *t))
        .partition(|(_, t)| *t);
    let train: Vec<Question> = train.into_iter().map(|(q, _)| q).collect();
    let test: Vec<Question> = test.into_iter().map(|(q, _)| q).collect();
    let manifest = SplitManifest {
        spec: spec.clone(),
        strata: counts,
        train_total: train.len(),
        test_total: test.len(),
        drift_correction: correction,
    };
    Split {
        train: c.derived(train),
        test: c.derived(test),
        manifest,
    }
}
