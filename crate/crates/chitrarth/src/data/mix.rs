//! Balanced multilingual mixing: a fixed English fraction with the
//! remainder split equally across the listed languages.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use super::{stable_hash, ConversationSample};
use crate::error::{Error, Result};

pub const ENGLISH: &str = "en";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub total: usize,
    pub english_fraction: f64,
    pub languages: Vec<String>,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::Config("mix total must be positive".into()));
        }
        if !(self.english_fraction > 0.0 && self.english_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "english_fraction must be in (0, 1], got {}",
                self.english_fraction
            )));
        }
        if self.english_fraction < 1.0 && self.languages.is_empty() {
            return Err(Error::Config(
                "non-English share requires at least one language".into(),
            ));
        }
        if self.languages.iter().any(|l| l == ENGLISH) {
            return Err(Error::Config("languages list must not repeat \"en\"".into()));
        }
        Ok(())
    }
}

/// Exact per-language counts via largest-remainder rounding: floor every
/// quota, then hand out the remaining samples by descending fractional
/// part (ties resolved in listing order, English first). Counts always
/// sum to `total`.
pub fn language_quotas(spec: &MixSpec) -> Result<Vec<(String, usize)>> {
    spec.validate()?;
    let mut quotas: Vec<(String, f64)> = Vec::with_capacity(spec.languages.len() + 1);
    quotas.push((ENGLISH.to_string(), spec.total as f64 * spec.english_fraction));
    let share = spec.total as f64 * (1.0 - spec.english_fraction) / spec.languages.len().max(1) as f64;
    for lang in &spec.languages {
        quotas.push((lang.clone(), share));
    }
    let mut counts: Vec<usize> = quotas.iter().map(|(_, q)| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a].1 - quotas[a].1.floor();
        let fb = quotas[b].1 - quotas[b].1.floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..spec.total.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    Ok(quotas
        .into_iter()
        .zip(counts)
        .map(|((lang, _), c)| (lang, c))
        .collect())
}

/// Samples each language's quota without replacement and returns one
/// seeded shuffle of the union. Every count matches the spec exactly.
pub fn mix_languages(
    sources: &BTreeMap<String, Vec<ConversationSample>>,
    spec: &MixSpec,
) -> Result<Vec<ConversationSample>> {
    let quotas = language_quotas(spec)?;
    let mut mixed = Vec::with_capacity(spec.total);
    for (lang, count) in &quotas {
        let source = sources.get(lang).map(Vec::as_slice).unwrap_or(&[]);
        if source.len() < *count {
            return Err(Error::Capacity {
                language: lang.clone(),
                needed: *count,
                available: source.len(),
            });
        }
        let mut indices: Vec<usize> = (0..source.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(lang));
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(*count) {
            mixed.push(source[i].clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    mixed.shuffle(&mut rng);
    Ok(mixed)
}

/// Language histogram of a sample list, for stats and exactness checks.
pub fn language_histogram(samples: &[ConversationSample]) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for s in samples {
        *hist.entry(s.language.clone()).or_insert(0) += 1;
    }
    hist
}
