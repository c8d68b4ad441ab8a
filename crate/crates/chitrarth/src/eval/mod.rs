//! Multilingual evaluation harness: benchmark records, deterministic
//! scorers (POPE yes/no, exact match, token-overlap F1), and prediction
//! generation.

pub mod ablation;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{cipher, ImageRef};
use crate::error::{Error, Result};
use crate::model::{answer, ChitrarthModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pope,
    Genqa,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Pope => "pope",
            Task::Genqa => "genqa",
        })
    }
}

/// One benchmark item. The manifest uses the same line-oriented JSON as
/// training data plus task/question/reference fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub language: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub question: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
}

pub fn load_eval_manifest(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: EvalRecord =
            serde_json::from_str(&line).map_err(|e| Error::schema_at(line_no, e))?;
        if record.language.is_empty() {
            return Err(Error::schema_at(line_no, "missing language tag"));
        }
        if let Some(ImageRef::Path(p)) = &record.image {
            let resolved = base.join(p);
            if !resolved.is_file() {
                return Err(Error::schema_at(
                    line_no,
                    format!("image path does not resolve: {}", resolved.display()),
                ));
            }
            record.image = Some(ImageRef::Path(resolved.to_string_lossy().into_owned()));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_eval_manifest(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    prediction: String,
}

pub fn save_predictions(path: &Path, predictions: &[(String, String)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, prediction) in predictions {
        serde_json::to_writer(
            &mut out,
            &PredictionLine {
                id: id.clone(),
                prediction: prediction.clone(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut map = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::schema_at(idx + 1, e))?;
        map.insert(parsed.id, parsed.prediction);
    }
    Ok(map)
}

/// Greedy predictions for every record, in manifest order.
pub fn generate_predictions(
    model: &ChitrarthModel,
    records: &[EvalRecord],
    max_new: usize,
) -> Result<Vec<(String, String)>> {
    records
        .iter()
        .map(|r| Ok((r.id.clone(), answer(model, r.image.as_ref(), &r.question, max_new)?)))
        .collect()
}

// ── Normalization and lexicons ──────────────────────────────────────

/// Case-folds, trims, and strips terminal punctuation.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let trimmed = lowered.trim();
    trimmed
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim_end()
        .to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopeAnswer {
    Yes,
    No,
    Invalid,
}

#[derive(Debug, Clone, Default)]
pub struct YesNoLexicon {
    pub yes: BTreeSet<String>,
    pub no: BTreeSet<String>,
}

/// Per-language yes/no word lists. Registered cipher languages get their
/// ciphered "yes"/"no" automatically; real-language lists are insertable.
#[derive(Debug, Clone)]
pub struct Lexicons {
    map: BTreeMap<String, YesNoLexicon>,
}

impl Default for Lexicons {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        map.insert(
            "en".to_string(),
            YesNoLexicon {
                yes: BTreeSet::from(["yes".to_string()]),
                no: BTreeSet::from(["no".to_string()]),
            },
        );
        for tag in cipher::LANGUAGE_TAGS {
            map.insert(
                tag.to_string(),
                YesNoLexicon {
                    yes: BTreeSet::from([cipher::cipher_translate("yes", tag).expect("registered")]),
                    no: BTreeSet::from([cipher::cipher_translate("no", tag).expect("registered")]),
                },
            );
        }
        Lexicons { map }
    }
}

impl Lexicons {
    pub fn insert(&mut self, language: &str, lexicon: YesNoLexicon) {
        self.map.insert(language.to_string(), lexicon);
    }

    pub fn get(&self, language: &str) -> &YesNoLexicon {
        static EMPTY: std::sync::OnceLock<YesNoLexicon> = std::sync::OnceLock::new();
        self.map
            .get(language)
            .unwrap_or_else(|| EMPTY.get_or_init(YesNoLexicon::default))
    }
}

/// Maps text to yes/no/invalid by its first alphabetic word after
/// normalization.
pub fn pope_class(text: &str, lexicon: &YesNoLexicon) -> PopeAnswer {
    let normalized = normalize_answer(text);
    let first_word: String = normalized
        .split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())
        .unwrap_or("")
        .to_string();
    if lexicon.yes.contains(&first_word) {
        PopeAnswer::Yes
    } else if lexicon.no.contains(&first_word) {
        PopeAnswer::No
    } else {
        PopeAnswer::Invalid
    }
}

// ── POPE scoring ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

/// Confusion-matrix scoring with "yes" as the positive class. Predictions
/// binarize to yes vs not-yes: an invalid prediction never counts as yes,
/// so it is wrong on every positive reference and contributes nothing to
/// yes_ratio.
pub fn score_pope(records: &[EvalRecord], lexicons: &Lexicons) -> Result<PopeMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let mut yes_predictions = 0usize;
    for r in records {
        if r.task != Task::Pope {
            return Err(Error::Schema(format!("record {} is not a pope record", r.id)));
        }
        let prediction = r
            .prediction
            .as_deref()
            .ok_or_else(|| Error::Schema(format!("record {} has no prediction", r.id)))?;
        let lexicon = lexicons.get(&r.language);
        let ref_yes = match pope_class(&r.reference, lexicon) {
            PopeAnswer::Yes => true,
            PopeAnswer::No => false,
            PopeAnswer::Invalid => {
                return Err(Error::Schema(format!(
                    "record {}: pope reference {:?} does not normalize to yes/no",
                    r.id, r.reference
                )))
            }
        };
        let pred_yes = pope_class(prediction, lexicon) == PopeAnswer::Yes;
        if pred_yes {
            yes_predictions += 1;
        }
        match (ref_yes, pred_yes) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let n = records.len() as f64;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeMetrics {
        accuracy: (tp + tn) as f64 / n,
        precision,
        recall,
        f1,
        yes_ratio: yes_predictions as f64 / n,
    })
}

// ── Generative QA scoring ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenqaMetrics {
    pub exact_match: f64,
    pub token_f1: f64,
}

/// Whitespace tokens, sub-split where the 64-codepoint block changes so
/// different scripts never merge into one token. Cipher translation keeps
/// word boundaries, so cipher text tokenizes like its English source.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        let mut block = None;
        for c in chunk.chars() {
            let b = (c as u32) >> 6;
            if block == Some(b) || current.is_empty() {
                current.push(c);
            } else {
                tokens.push(std::mem::take(&mut current));
                current.push(c);
            }
            block = Some(b);
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Multiset token overlap F1 between normalized strings.
pub fn token_f1(reference: &str, prediction: &str) -> f64 {
    let ref_tokens = tokenize(&normalize_answer(reference));
    let pred_tokens = tokenize(&normalize_answer(prediction));
    if ref_tokens.is_empty() && pred_tokens.is_empty() {
        return 1.0;
    }
    if ref_tokens.is_empty() || pred_tokens.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for t in &ref_tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_tokens {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / ref_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn score_genqa(records: &[EvalRecord]) -> Result<GenqaMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut em = 0.0;
    let mut f1 = 0.0;
    for r in records {
        let prediction = r
            .prediction
            .as_deref()
            .ok_or_else(|| Error::Schema(format!("record {} has no prediction", r.id)))?;
        if normalize_answer(prediction) == normalize_answer(&r.reference) {
            em += 1.0;
        }
        f1 += token_f1(&r.reference, prediction);
    }
    let n = records.len() as f64;
    Ok(GenqaMetrics {
        exact_match: em / n,
        token_f1: f1 / n,
    })
}

/// Scores every (task, language) group present and assembles the report.
pub fn score_all(records: &[EvalRecord], lexicons: &Lexicons) -> Result<report::LanguageReport> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut groups: BTreeMap<(Task, String), Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.task, r.language.clone()))
            .or_default()
            .push(r.clone());
    }
    let mut rep = report::LanguageReport::default();
    for ((task, language), group) in groups {
        match task {
            Task::Pope => {
                let m = score_pope(&group, lexicons)?;
                rep.insert("pope", &language, "accuracy", m.accuracy);
                rep.insert("pope", &language, "precision", m.precision);
                rep.insert("pope", &language, "recall", m.recall);
                rep.insert("pope", &language, "f1", m.f1);
                rep.insert("pope", &language, "yes_ratio", m.yes_ratio);
            }
            Task::Genqa => {
                let m = score_genqa(&group)?;
                rep.insert("genqa", &language, "exact_match", m.exact_match);
                rep.insert("genqa", &language, "token_f1", m.token_f1);
            }
        }
    }
    Ok(rep)
}
