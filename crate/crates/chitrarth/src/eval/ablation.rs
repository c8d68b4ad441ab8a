//! Language-count ablation: trains one micro model per training mix under
//! the same seed and budget, then scores generative QA on English and on
//! every cipher language side by side.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{token_f1, normalize_answer};
use crate::data::{cipher, mix::{mix_languages, MixSpec}, synth, ConversationSample, ImageRef};
use crate::error::Result;
use crate::lm::LmConfig;
use crate::model::{answer, ChitrarthModel, ModelConfig};
use crate::projector::{ProjectorConfig, ProjectorVariant};
use crate::tokenizer::VocabLayout;
use crate::trainer::{run_stage, StageConfig};
use crate::vision::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMix {
    pub name: String,
    /// Number of cipher languages mixed in alongside English.
    pub n_languages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPreset {
    pub seeds: Vec<u64>,
    pub mixes: Vec<AblationMix>,
    /// Training samples per run (identical across mixes).
    pub train_total: usize,
    pub eval_per_language: usize,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub max_new: usize,
}

impl Default for AblationPreset {
    fn default() -> Self {
        AblationPreset {
            seeds: vec![1, 2, 3],
            mixes: vec![
                AblationMix {
                    name: "english-only".into(),
                    n_languages: 0,
                },
                AblationMix {
                    name: "english+2".into(),
                    n_languages: 2,
                },
                AblationMix {
                    name: "english+10".into(),
                    n_languages: 10,
                },
            ],
            train_total: 300,
            eval_per_language: 6,
            batch_size: 8,
            stage1_epochs: 3,
            stage2_epochs: 18,
            stage1_lr: 2e-3,
            stage2_lr: 1.5e-3,
            max_new: 96,
        }
    }
}

/// Small enough to train in seconds per run, large enough to show the
/// cross-lingual trend.
pub fn ablation_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            variant_name: "ablation-micro".into(),
            image_size: 24,
            patch_size: 8,
            d_vision: 24,
            n_layers: 1,
            n_heads: 2,
        },
        projector: ProjectorConfig {
            variant: ProjectorVariant::Mlp2,
            d_vision: 24,
            d_model: 32,
        },
        lm: LmConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            vocab_size: VocabLayout::VOCAB_SIZE,
            context_length: 192,
            tie_embeddings: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mix: String,
    pub seed: u64,
    pub language: String,
    pub token_f1: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub mixes: Vec<String>,
    pub eval_languages: Vec<String>,
    pub seeds: Vec<u64>,
}

impl AblationReport {
    pub fn seed_f1(&self, mix: &str, seed: u64, language: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.mix == mix && c.seed == seed && c.language == language)
            .map(|c| c.token_f1)
    }

    pub fn mean_f1(&self, mix: &str, language: &str) -> f64 {
        let values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.mix == mix && c.language == language)
            .map(|c| c.token_f1)
            .collect();
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    /// Mean token F1 over the cipher-language eval sets for one seed.
    pub fn cipher_mean_f1(&self, mix: &str, seed: u64) -> f64 {
        let values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.mix == mix && c.seed == seed && cipher::is_cipher_language(&c.language))
            .map(|c| c.token_f1)
            .collect();
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    /// Side-by-side table: one row per mix, one column per eval language
    /// (values are token F1 averaged over seeds).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .mixes
            .iter()
            .map(|m| m.len())
            .max()
            .unwrap_or(4)
            .max(4);
        out.push_str(&format!("{:width$}", "mix"));
        for lang in &self.eval_languages {
            out.push_str(&format!("  {:>8}", lang));
        }
        out.push('\n');
        for mix in &self.mixes {
            out.push_str(&format!("{mix:width$}"));
            for lang in &self.eval_languages {
                out.push_str(&format!("  {:>8.4}", self.mean_f1(mix, lang)));
            }
            out.push('\n');
        }
        out
    }
}

fn english_pool(total: usize, seed: u64) -> Result<Vec<ConversationSample>> {
    synth::synth_corpus(total, seed)
        .into_iter()
        .map(|item| synth::caption_to_single_turn(ImageRef::Spec(item.spec), &item.caption, "en", &item.id))
        .collect()
}

fn ciphered_pool(english: &[ConversationSample], language: &str) -> Result<Vec<ConversationSample>> {
    english
        .iter()
        .map(|s| {
            let caption = cipher::cipher_translate(&s.turns[1].text, language)?;
            let id = format!("{}-{language}", s.id);
            synth::caption_to_single_turn(s.image.clone().expect("caption sample"), &caption, language, &id)
        })
        .collect()
}

struct EvalItem {
    image: ImageRef,
    question: String,
    reference: String,
}

fn eval_set(language: &str, n: usize, seed: u64) -> Result<Vec<EvalItem>> {
    synth::synth_corpus(n, seed)
        .into_iter()
        .map(|item| {
            let sample = if language == "en" {
                synth::caption_to_single_turn(ImageRef::Spec(item.spec), &item.caption, "en", &item.id)?
            } else {
                let caption = cipher::cipher_translate(&item.caption, language)?;
                synth::caption_to_single_turn(
                    ImageRef::Spec(item.spec),
                    &caption,
                    language,
                    &format!("{}-{language}", item.id),
                )?
            };
            Ok(EvalItem {
                image: sample.image.clone().unwrap(),
                question: sample.turns[0].text.clone(),
                reference: sample.turns[1].text.clone(),
            })
        })
        .collect()
}

fn run_one(preset: &AblationPreset, seed: u64, mix: &AblationMix, eval_languages: &[String]) -> Result<Vec<AblationCell>> {
    let english = english_pool(preset.train_total, seed.wrapping_mul(1000) + 11)?;
    let languages: Vec<String> = cipher::LANGUAGE_TAGS[..mix.n_languages]
        .iter()
        .map(|t| t.to_string())
        .collect();
    let mut sources: BTreeMap<String, Vec<ConversationSample>> = BTreeMap::new();
    sources.insert("en".to_string(), english.clone());
    for lang in &languages {
        sources.insert(lang.clone(), ciphered_pool(&english, lang)?);
    }
    let spec = MixSpec {
        total: preset.train_total,
        english_fraction: if languages.is_empty() { 1.0 } else { 0.5 },
        languages,
        seed,
    };
    let data = mix_languages(&sources, &spec)?;

    let mut model = ChitrarthModel::init(ablation_model_config(), seed)?;
    let mut stage1 = StageConfig::stage1();
    stage1.batch_size = preset.batch_size;
    stage1.accumulation_steps = 1;
    stage1.epochs = preset.stage1_epochs;
    stage1.peak_lr = preset.stage1_lr;
    stage1.seed = seed;
    run_stage(&mut model, &data, &stage1)?;

    let mut stage2 = StageConfig::stage2();
    stage2.batch_size = preset.batch_size;
    stage2.accumulation_steps = 1;
    stage2.epochs = preset.stage2_epochs;
    stage2.peak_lr = preset.stage2_lr;
    stage2.seed = seed;
    run_stage(&mut model, &data, &stage2)?;

    let mut cells = Vec::with_capacity(eval_languages.len());
    for language in eval_languages {
        let items = eval_set(
            language,
            preset.eval_per_language,
            seed.wrapping_mul(1000) + 777,
        )?;
        let mut f1_sum = 0.0;
        let mut em_sum = 0.0;
        for item in &items {
            let prediction = answer(&model, Some(&item.image), &item.question, preset.max_new)?;
            f1_sum += token_f1(&item.reference, &prediction);
            if normalize_answer(&prediction) == normalize_answer(&item.reference) {
                em_sum += 1.0;
            }
        }
        cells.push(AblationCell {
            mix: mix.name.clone(),
            seed,
            language: language.clone(),
            token_f1: f1_sum / items.len().max(1) as f64,
            exact_match: em_sum / items.len().max(1) as f64,
        });
    }
    Ok(cells)
}

/// Trains one model per (seed, mix) with identical budgets and scores each
/// on English plus every cipher language. Runs are independent, so they
/// execute on a small worker pool; the report order is fixed regardless.
pub fn language_ablation(preset: &AblationPreset) -> Result<AblationReport> {
    let eval_languages: Vec<String> = std::iter::once("en".to_string())
        .chain(cipher::LANGUAGE_TAGS.iter().map(|t| t.to_string()))
        .collect();

    let jobs: Vec<(usize, u64, &AblationMix)> = preset
        .seeds
        .iter()
        .flat_map(|&seed| preset.mixes.iter().map(move |m| (seed, m)))
        .enumerate()
        .map(|(i, (seed, m))| (i, seed, m))
        .collect();

    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    let queue = std::sync::Mutex::new(jobs.into_iter().collect::<std::collections::VecDeque<_>>());
    let mut results: Vec<Option<Result<Vec<AblationCell>>>> =
        (0..preset.seeds.len() * preset.mixes.len()).map(|_| None).collect();
    let results_mutex = std::sync::Mutex::new(&mut results);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop_front();
                let Some((index, seed, mix)) = job else { break };
                let outcome = run_one(preset, seed, mix, &eval_languages);
                results_mutex.lock().unwrap()[index] = Some(outcome);
            });
        }
    });

    let mut report = AblationReport {
        cells: Vec::new(),
        mixes: preset.mixes.iter().map(|m| m.name.clone()).collect(),
        eval_languages,
        seeds: preset.seeds.clone(),
    };
    for outcome in results {
        report.cells.extend(outcome.expect("worker completed")?);
    }
    Ok(report)
}
