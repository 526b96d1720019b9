//! Factoid and cloze records: JSON loaders and synthetic generators.
//!
//! Factoid files are JSON arrays of `{id, question, context, answer}`; cloze
//! files are JSON arrays of `{id, passage, query, candidates, answer_index}`.

use std::collections::HashSet;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

pub const PLACEHOLDER: &str = "XXXX";
pub const MAX_CANDIDATES: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactoidInstance {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeInstance {
    pub id: String,
    pub passage: String,
    pub query: String,
    pub candidates: Vec<String>,
    pub answer_index: usize,
}

impl ClozeInstance {
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Record {
            id: self.id.clone(),
            message,
        };
        let holes = self.query.matches(PLACEHOLDER).count();
        if holes != 1 {
            return Err(err(format!("query has {holes} placeholders, expected exactly one")));
        }
        if self.candidates.is_empty() || self.candidates.len() > MAX_CANDIDATES {
            return Err(err(format!(
                "{} candidates, expected between 1 and {MAX_CANDIDATES}",
                self.candidates.len()
            )));
        }
        if self.answer_index >= self.candidates.len() {
            return Err(err(format!(
                "answer_index {} outside {} candidates",
                self.answer_index,
                self.candidates.len()
            )));
        }
        let mut seen = HashSet::new();
        let words = normalize(&self.passage);
        for c in &self.candidates {
            if !seen.insert(c) {
                return Err(err(format!("duplicate candidate {c}")));
            }
            let pattern = normalize(c);
            if pattern.is_empty() || find_word_spans(&words, &pattern).is_empty() {
                return Err(err(format!("candidate {c} does not occur in the passage")));
            }
        }
        Ok(())
    }
}

/// Start indices of every occurrence of `pattern` in `words`.
pub fn find_word_spans(words: &[String], pattern: &[String]) -> Vec<usize> {
    if pattern.is_empty() || pattern.len() > words.len() {
        return Vec::new();
    }
    (0..=words.len() - pattern.len())
        .filter(|&i| words[i..i + pattern.len()] == *pattern)
        .collect()
}

/// Loaded factoid records plus one message per skipped record.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoidSet {
    pub instances: Vec<FactoidInstance>,
    pub warnings: Vec<String>,
}

fn parse_array(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    match value {
        Value::Array(items) => Ok(items),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "top-level value must be an array of records".into(),
        }),
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

fn record_id(v: &Value, index: usize) -> String {
    match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("#{index}"),
    }
}

fn text_field(v: &Value, key: &str) -> Option<String> {
    v.get(key).and_then(Value::as_str).map(str::to_string)
}

/// Reads a factoid file, skipping records without a question or answer.
pub fn load_factoid(path: impl AsRef<Path>) -> Result<FactoidSet> {
    let path = path.as_ref();
    let mut instances = Vec::new();
    let mut warnings = Vec::new();
    for (i, rec) in parse_array(path)?.iter().enumerate() {
        let id = record_id(rec, i);
        let question = text_field(rec, "question").filter(|s| !s.trim().is_empty());
        let answer = text_field(rec, "answer").filter(|s| !s.trim().is_empty());
        match (question, answer) {
            (Some(question), Some(answer)) => instances.push(FactoidInstance {
                id,
                question,
                context: text_field(rec, "context").unwrap_or_default(),
                answer,
            }),
            (q, _) => {
                let missing = if q.is_none() { "question" } else { "answer" };
                let msg = format!("skipping record {id}: missing {missing}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if instances.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(FactoidSet { instances, warnings })
}

/// Reads a cloze file; any invalid record is an error naming its id.
pub fn load_cloze(path: impl AsRef<Path>) -> Result<Vec<ClozeInstance>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, rec) in parse_array(path)?.into_iter().enumerate() {
        let id = record_id(&rec, i);
        let inst: ClozeInstance = serde_json::from_value(rec).map_err(|e| Error::Record {
            id: id.clone(),
            message: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(out)
}

pub fn save_json<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(items)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Deterministic pronounceable word for an index, at least two syllables long
/// and distinct for distinct indices.
pub fn pseudo_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let base = C.len() * V.len();
    let mut digits = Vec::new();
    let mut rest = i;
    while rest > 0 || digits.len() < 2 {
        digits.push(rest % base);
        rest /= base;
    }
    digits
        .iter()
        .rev()
        .flat_map(|&d| [C[d / V.len()] as char, V[d % V.len()] as char])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClozeSynthConfig {
    pub n: usize,
    /// Size of the content-word pool shared by cue and filler words.
    pub vocab_size: usize,
    pub num_entities: usize,
    pub signal: f64,
    pub seed: u64,
}

/// Cue and filler pools derived from the vocabulary size.
pub struct ClozeLexicon {
    pub cues: Vec<String>,
    pub fillers: Vec<String>,
}

impl ClozeLexicon {
    pub fn new(vocab_size: usize, num_entities: usize) -> Self {
        let n_cues = (vocab_size / 2).max(num_entities);
        let n_fill = vocab_size.saturating_sub(n_cues).max(4);
        Self {
            cues: (0..n_cues).map(pseudo_word).collect(),
            fillers: (n_cues..n_cues + n_fill).map(pseudo_word).collect(),
        }
    }
}

pub fn entity_marker(i: usize) -> String {
    format!("@entity{i}")
}

/// Passages of one sentence per entity, `"{cue} @entityI {f} {g} ."`, and a
/// query `"{cue} XXXX {f} {g} ."` that repeats the cue and filler words of one
/// sentence. With probability `signal` that sentence is the gold entity's;
/// otherwise it belongs to an independently drawn entity, so the query carries
/// no information about the answer.
pub fn synth_cloze(cfg: &ClozeSynthConfig) -> Result<Vec<ClozeInstance>> {
    if cfg.num_entities < 2 || cfg.num_entities > MAX_CANDIDATES {
        return Err(Error::Parameter(format!(
            "num_entities must be in 2..={MAX_CANDIDATES}, got {}",
            cfg.num_entities
        )));
    }
    if !(0.0..=1.0).contains(&cfg.signal) {
        return Err(Error::Parameter(format!("signal {} outside [0, 1]", cfg.signal)));
    }
    let lex = ClozeLexicon::new(cfg.vocab_size, cfg.num_entities);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let k = cfg.num_entities;
    let mut out = Vec::with_capacity(cfg.n);
    for idx in 0..cfg.n {
        let cues: Vec<&String> = lex.cues.choose_multiple(&mut rng, k).collect();
        let fill: Vec<[&String; 2]> = (0..k)
            .map(|_| {
                let f = lex.fillers.choose(&mut rng).expect("fillers");
                let g = lex.fillers.choose(&mut rng).expect("fillers");
                [f, g]
            })
            .collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let sentences: Vec<String> = order
            .iter()
            .map(|&e| format!("{} {} {} {} .", cues[e], entity_marker(e), fill[e][0], fill[e][1]))
            .collect();
        let gold = rng.random_range(0..k);
        let cued = if rng.random_bool(cfg.signal) {
            gold
        } else {
            rng.random_range(0..k)
        };
        out.push(ClozeInstance {
            id: format!("synth-cloze-{idx}"),
            passage: sentences.join(" "),
            query: format!("{} {PLACEHOLDER} {} {} .", cues[cued], fill[cued][0], fill[cued][1]),
            candidates: (0..k).map(entity_marker).collect(),
            answer_index: gold,
        });
    }
    Ok(out)
}

/// Rule-based reader that knows the generator's layout: it returns the
/// entity written right after the query's cue word.
pub fn cue_oracle(inst: &ClozeInstance) -> Option<usize> {
    let cue = inst.query.split_whitespace().next()?;
    let words: Vec<&str> = inst.passage.split_whitespace().collect();
    let pos = words.iter().position(|w| *w == cue)?;
    let marker = words.get(pos + 1)?;
    inst.candidates.iter().position(|c| c == marker)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactoidSynthConfig {
    pub n: usize,
    /// Size of the pool that subjects and values are drawn from.
    pub vocab_size: usize,
    pub facts_per_context: usize,
    /// Fraction of questions whose answer is not a verbatim span of the context.
    pub non_extractable: f64,
    pub seed: u64,
}

impl FactoidSynthConfig {
    pub fn new(n: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            n,
            vocab_size,
            facts_per_context: 3,
            non_extractable: 0.25,
            seed,
        }
    }
}

pub const RELATIONS: [&str; 6] = ["target", "dose", "gene", "site", "class", "host"];
pub const TRANSFORM_SUFFIX: &str = "blocker";

/// Contexts listing facts `"the {rel} of {subj} is {val} ."`.
///
/// Extractable questions read `"what is the {rel} of {subj} ?"` with answer
/// `{val}`. Non-extractable ones read `"which blocker acts on the {rel} of
/// {subj} ?"` with answer `"{val} blocker"`, which never appears verbatim in
/// the context. Exactly `round(non_extractable · n)` questions are of the
/// second kind.
pub fn synth_factoid(cfg: &FactoidSynthConfig) -> Result<Vec<FactoidInstance>> {
    if cfg.n == 0 {
        return Err(Error::Parameter("synth_factoid needs n ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.non_extractable) {
        return Err(Error::Parameter(format!(
            "non_extractable fraction {} outside [0, 1]",
            cfg.non_extractable
        )));
    }
    if cfg.facts_per_context == 0 {
        return Err(Error::Parameter("facts_per_context must be positive".into()));
    }
    let pool = cfg.vocab_size.max(2 * cfg.facts_per_context);
    let n_subj = (pool / 2).max(cfg.facts_per_context);
    let subjects: Vec<String> = (0..n_subj).map(pseudo_word).collect();
    let values: Vec<String> = (n_subj..pool.max(n_subj + 2)).map(pseudo_word).collect();
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    let n_hard = (cfg.non_extractable * cfg.n as f64).round() as usize;
    let mut kinds: Vec<bool> = (0..cfg.n).map(|i| i < n_hard).collect();
    kinds.shuffle(&mut rng);

    let mut out = Vec::with_capacity(cfg.n);
    for (idx, hard) in kinds.into_iter().enumerate() {
        let subj: Vec<&String> = subjects.choose_multiple(&mut rng, cfg.facts_per_context).collect();
        let facts: Vec<(&str, &String, &String)> = subj
            .iter()
            .map(|s| {
                let rel = RELATIONS[rng.random_range(0..RELATIONS.len())];
                let val = values.choose(&mut rng).expect("values");
                (rel, *s, val)
            })
            .collect();
        let context = facts
            .iter()
            .map(|(r, s, v)| format!("the {r} of {s} is {v} ."))
            .collect::<Vec<_>>()
            .join(" ");
        let (rel, s, v) = facts[rng.random_range(0..facts.len())];
        let (question, answer) = if hard {
            (
                format!("which {TRANSFORM_SUFFIX} acts on the {rel} of {s} ?"),
                format!("{v} {TRANSFORM_SUFFIX}"),
            )
        } else {
            (format!("what is the {rel} of {s} ?"), v.clone())
        };
        out.push(FactoidInstance {
            id: format!("synth-factoid-{idx}"),
            question,
            context,
            answer,
        });
    }
    Ok(out)
}

/// Whether `answer` occurs as a contiguous run of normalised words in `context`.
pub fn is_extractable(answer: &str, context: &str) -> bool {
    !find_word_spans(&normalize(context), &normalize(answer)).is_empty()
}
