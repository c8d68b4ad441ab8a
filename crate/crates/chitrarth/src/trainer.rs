//! Two-stage training: parameter-group freezing, gradient accumulation,
//! cosine scheduling, and per-step metric logging.
//!
//! Stage 1 trains the projector only; stage 2 trains projector and LM.
//! The encoder is frozen in both stages. Freezing is enforced by routing
//! gradients only to the stage's trainable set, so frozen parameter bytes
//! are untouched by construction.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ConversationSample;
use crate::error::{Error, Result};
use crate::model::{compute_loss, ChitrarthModel, PreparedSample};
use crate::optim::{cosine_lr, Adam, LrSchedule};
use crate::tensor::Tape;

fn default_accum() -> usize {
    1
}
fn default_warmup_ratio() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    pub epochs: usize,
    /// Warmup fraction of total steps, used when no explicit schedule is
    /// given.
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    /// Explicit schedule override; by default the schedule is derived from
    /// epochs × ceil(N / batch) steps.
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    /// Micro-steps per optimizer step; the physical batch is
    /// ceil(batch_size / accumulation_steps).
    #[serde(default = "default_accum")]
    pub accumulation_steps: usize,
    pub seed: u64,
    /// Decoupled weight decay; 0 (off) by default and never silently
    /// enabled.
    #[serde(default)]
    pub weight_decay: f64,
    /// Global-norm gradient clip; off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl StageConfig {
    /// Stage 1 defaults: batch 256, peak LR 2e-3, 1 epoch.
    pub fn stage1() -> Self {
        StageConfig {
            stage: 1,
            batch_size: 256,
            peak_lr: 2e-3,
            min_lr: 0.0,
            epochs: 1,
            warmup_ratio: 0.03,
            schedule: None,
            accumulation_steps: 8,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }

    /// Stage 2 defaults: batch 128, peak LR 2e-5, 1 epoch.
    pub fn stage2() -> Self {
        StageConfig {
            stage: 2,
            batch_size: 128,
            peak_lr: 2e-5,
            min_lr: 0.0,
            epochs: 1,
            warmup_ratio: 0.03,
            schedule: None,
            accumulation_steps: 4,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("batch_size and accumulation_steps must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} out of [0, 0.5]", self.warmup_ratio)));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }
}

/// Names of the parameters a stage updates: stage 1 is exactly the
/// projector, stage 2 is projector plus LM. Encoder parameters are never
/// included.
pub fn trainable_parameters(model: &ChitrarthModel, stage: u8) -> Result<Vec<String>> {
    if !(stage == 1 || stage == 2) {
        return Err(Error::Config(format!("stage must be 1 or 2, got {stage}")));
    }
    Ok(model
        .param_names()
        .into_iter()
        .filter(|name| name.starts_with("projector.") || (stage == 2 && name.starts_with("lm.")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub metrics: Vec<StepMetric>,
    pub schedule: LrSchedule,
    /// Samples dropped because their assembled length would overflow the
    /// context (rejected, never truncated).
    pub skipped_overlong: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f32> {
        self.metrics.last().map(|m| m.loss)
    }
}

/// Runs one stage over the data: epochs × ceil(N / batch) optimizer steps
/// of assemble → loss → backward → Adam under the cosine schedule.
pub fn run_stage(model: &mut ChitrarthModel, data: &[ConversationSample], cfg: &StageConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }

    // Render and decode images once; reject overlong samples up front.
    let context = model.config.lm.context_length;
    let visual_tokens = model.config.encoder.token_count();
    let mut prepared = Vec::with_capacity(data.len());
    let mut skipped_overlong = 0;
    for sample in data {
        let p = PreparedSample::prepare(&model.config, sample, true)?;
        let assembled_len = match p.rendered.image_slot {
            Some(_) => p.rendered.ids.len() - 1 + visual_tokens,
            None => p.rendered.ids.len(),
        };
        if assembled_len > context {
            skipped_overlong += 1;
        } else {
            prepared.push(p);
        }
    }
    if prepared.is_empty() {
        return Err(Error::Config("every training sample overflows the context".into()));
    }

    let n = prepared.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = match &cfg.schedule {
        Some(s) => s.clone(),
        None => LrSchedule {
            peak_lr: cfg.peak_lr,
            min_lr: cfg.min_lr,
            warmup_steps: ((total_steps as f64 * cfg.warmup_ratio).round() as usize)
                .min(total_steps.saturating_sub(1)),
            total_steps: total_steps.max(1),
        },
    };

    let trainable = trainable_parameters(model, cfg.stage)?;
    let mut adam = Adam::default();
    // Per-stage seed derivation keeps stage 2 from replaying stage 1's
    // data order.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.stage as u64);
    let mut metrics = Vec::with_capacity(total_steps);
    let micro_size = cfg.batch_size.div_ceil(cfg.accumulation_steps);

    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch_indices in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(&schedule, step);
            let batch_len = batch_indices.len();
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut loss_acc = 0f64;

            for micro_indices in batch_indices.chunks(micro_size) {
                let micro: Vec<PreparedSample> =
                    micro_indices.iter().map(|&i| prepared[i].clone()).collect();
                let mut tape = Tape::<f32>::new();
                let bound = model.bind(&mut tape)?;
                let batch_loss = compute_loss(&mut tape, &bound, &model.config, &micro)?;
                let loss_value = tape.scalar_value(batch_loss.loss);
                if !loss_value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        samples: micro.iter().map(|p| p.id.clone()).collect(),
                    });
                }
                tape.backward(batch_loss.loss)?;

                let weight = micro.len() as f32 / batch_len as f32;
                loss_acc += loss_value as f64 * micro.len() as f64;
                for name in &trainable {
                    let r = bound.ref_for(name).expect("bound parameter");
                    if let Some(g) = tape.grad(r) {
                        let acc = grads
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0; g.len()]);
                        for (a, &gv) in acc.iter_mut().zip(g) {
                            *a += gv * weight;
                        }
                    }
                }
            }

            if let Some(max_norm) = cfg.grad_clip {
                let norm: f64 = grads
                    .values()
                    .flat_map(|g| g.iter())
                    .map(|&g| (g as f64) * (g as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let scale = (max_norm / norm) as f32;
                    for g in grads.values_mut() {
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }

            let lr_f32 = lr as f32;
            model.visit_params_mut(&mut |name, p| {
                if let Some(g) = grads.get(name) {
                    if cfg.weight_decay > 0.0 {
                        let decay = 1.0 - lr_f32 * cfg.weight_decay as f32;
                        for v in p.data.iter_mut() {
                            *v *= decay;
                        }
                    }
                    adam.step(name, &mut p.data, g, lr_f32).expect("matching grad length");
                }
            });

            metrics.push(StepMetric {
                step,
                lr,
                loss: (loss_acc / batch_len as f64) as f32,
            });
            step += 1;
        }
    }

    Ok(TrainLog {
        metrics,
        schedule,
        skipped_overlong,
    })
}
