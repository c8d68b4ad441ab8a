//! Full model assembly: encoder + projector + LM.
//!
//! `assemble` splices the projected visual tokens into the text embedding
//! stream at the IMG slot, `compute_loss` supervises next-token prediction
//! under the loss mask, and `answer` runs the render → assemble → greedy
//! decode path end to end.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConversationSample, ImageRef, Turn};
use crate::error::{Error, Result};
use crate::lm::{self, BoundLm, LmConfig, LmParams};
use crate::params::{Binder, ParamTensor};
use crate::projector::{project, BoundProjector, ProjectorConfig, ProjectorParams, ProjectorVariant};
use crate::tensor::{grad_check, Scalar, Tape, TensorRef};
use crate::tokenizer::{self, RenderedSample, TokenId, VocabLayout};
use crate::vision::{encode_image, load_image, BoundEncoder, EncoderConfig, EncoderParams, ImageInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub lm: LmConfig,
}

impl ModelConfig {
    /// Desk-scale default: 48×48/patch-8 encoder, mlp2 projector, 64-wide LM.
    pub fn desk_default() -> Self {
        let encoder = EncoderConfig::variant("clip-like").expect("registered variant");
        let projector = ProjectorConfig {
            variant: ProjectorVariant::Mlp2,
            d_vision: encoder.d_vision,
            d_model: 64,
        };
        ModelConfig {
            encoder,
            projector,
            lm: LmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        if self.projector.d_vision != self.encoder.d_vision {
            return Err(Error::Config(format!(
                "projector d_vision {} != encoder d_vision {}",
                self.projector.d_vision, self.encoder.d_vision
            )));
        }
        if self.projector.d_model != self.lm.d_model {
            return Err(Error::Config(format!(
                "projector d_model {} != lm d_model {}",
                self.projector.d_model, self.lm.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChitrarthModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub projector: ProjectorParams,
    pub lm: LmParams,
}

impl ChitrarthModel {
    /// Seeded truncated-normal initialization of every component.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ChitrarthModel {
            encoder: EncoderParams::init(&config.encoder, &mut rng),
            projector: ProjectorParams::init(&config.projector, &mut rng),
            lm: LmParams::init(&config.lm, &mut rng),
            config,
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.encoder.visit("encoder", f);
        self.projector.visit("projector", f);
        self.lm.visit("lm", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.encoder.visit_mut("encoder", f);
        self.projector.visit_mut("projector", f);
        self.lm.visit_mut("lm", f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }

    pub fn param(&self, name: &str) -> Option<ParamTensor> {
        let mut found = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                found = Some(p.clone());
            }
        });
        found
    }

    /// Master parameters as f64, keyed by name (finite-difference path).
    pub fn params_as_f64(&self) -> BTreeMap<String, Vec<f64>> {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |name, p| {
            map.insert(name.to_string(), p.data.iter().map(|&v| v as f64).collect());
        });
        map
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<BoundModel> {
        self.bind_all(Binder::new(tape))
    }

    pub fn bind_with_overrides<'o, T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        overrides: &'o BTreeMap<String, Vec<f64>>,
    ) -> Result<BoundModel> {
        self.bind_all(Binder::with_overrides(tape, overrides))
    }

    fn bind_all<T: Scalar>(&self, mut binder: Binder<T>) -> Result<BoundModel> {
        let encoder = self.encoder.bind(&mut binder, "encoder")?;
        let projector = self.projector.bind(&mut binder, "projector")?;
        let lm = self.lm.bind(&mut binder, "lm")?;
        Ok(BoundModel {
            encoder,
            projector,
            lm,
            refs: binder.into_refs(),
        })
    }
}

/// One forward pass's registration of every parameter, with name → ref
/// pairs for gradient routing.
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub projector: BoundProjector,
    pub lm: BoundLm,
    pub refs: Vec<(String, TensorRef)>,
}

impl BoundModel {
    pub fn ref_for(&self, name: &str) -> Option<TensorRef> {
        self.refs.iter().find(|(n, _)| n == name).map(|&(_, r)| r)
    }
}

/// A sample rendered to ids with its image decoded, ready to assemble.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub rendered: RenderedSample,
    pub image: Option<ImageInput>,
}

impl PreparedSample {
    pub fn prepare(config: &ModelConfig, sample: &ConversationSample, for_training: bool) -> Result<Self> {
        let rendered = tokenizer::render_conversation(sample, for_training)?;
        let image = sample
            .image
            .as_ref()
            .map(|r| load_image(r, &config.encoder))
            .transpose()?;
        Ok(PreparedSample {
            id: sample.id.clone(),
            rendered,
            image,
        })
    }
}

/// An assembled sample on the tape: embeddings with visual rows spliced in,
/// plus the position-aligned supervision mask and target ids.
#[derive(Debug)]
pub struct AssembledSample {
    pub embeddings: TensorRef,
    pub loss_mask: Vec<bool>,
    pub targets: Vec<TokenId>,
    /// Start and end of the visual rows, when an image is present.
    pub visual_range: Option<(usize, usize)>,
}

/// Splices projected visual tokens into the rendered token stream at the
/// IMG slot. Final length is text length − 1 + token_count; overflowing
/// samples are rejected, never truncated.
pub fn assemble<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    config: &ModelConfig,
    prepared: &PreparedSample,
) -> Result<AssembledSample> {
    let rendered = &prepared.rendered;
    match (&prepared.image, rendered.image_slot) {
        (Some(_), None) => {
            return Err(Error::Schema(format!(
                "sample {}: image provided but no IMG slot rendered",
                prepared.id
            )))
        }
        (None, Some(_)) => {
            return Err(Error::Schema(format!(
                "sample {}: IMG slot rendered but no image provided",
                prepared.id
            )))
        }
        _ => {}
    }

    let context = config.lm.context_length;
    match (&prepared.image, rendered.image_slot) {
        (Some(image), Some(slot)) => {
            let n = config.encoder.token_count();
            let final_len = rendered.ids.len() - 1 + n;
            if final_len > context {
                return Err(Error::ContextOverflow {
                    len: final_len,
                    context,
                });
            }
            let visual = encode_image(tape, &bound.encoder, &config.encoder, image)?;
            let projected = project(tape, &bound.projector, visual)?;
            let before = lm::embed(tape, &bound.lm, &rendered.ids[..slot])?;
            let after = lm::embed(tape, &bound.lm, &rendered.ids[slot + 1..])?;
            let embeddings = tape.concat(&[before, projected, after], 0)?;

            let mut loss_mask = Vec::with_capacity(final_len);
            loss_mask.extend_from_slice(&rendered.loss_mask[..slot]);
            loss_mask.extend(std::iter::repeat(false).take(n));
            loss_mask.extend_from_slice(&rendered.loss_mask[slot + 1..]);

            let mut targets = Vec::with_capacity(final_len);
            targets.extend_from_slice(&rendered.ids[..slot]);
            targets.extend(std::iter::repeat(VocabLayout::PAD).take(n));
            targets.extend_from_slice(&rendered.ids[slot + 1..]);

            Ok(AssembledSample {
                embeddings,
                loss_mask,
                targets,
                visual_range: Some((slot, slot + n)),
            })
        }
        _ => {
            if rendered.ids.len() > context {
                return Err(Error::ContextOverflow {
                    len: rendered.ids.len(),
                    context,
                });
            }
            let embeddings = lm::embed(tape, &bound.lm, &rendered.ids)?;
            Ok(AssembledSample {
                embeddings,
                loss_mask: rendered.loss_mask.clone(),
                targets: rendered.ids.clone(),
                visual_range: None,
            })
        }
    }
}

#[derive(Debug)]
pub struct SampleLoss {
    pub id: String,
    pub loss: TensorRef,
    pub logits: TensorRef,
    pub assembled: AssembledSample,
}

#[derive(Debug)]
pub struct BatchLoss {
    pub loss: TensorRef,
    pub samples: Vec<SampleLoss>,
}

/// Mean over samples of the masked next-token cross entropy: logits at
/// position t are supervised with the token at t + 1 wherever the mask
/// covers t + 1. Visual positions are never supervised.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    config: &ModelConfig,
    batch: &[PreparedSample],
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Config("compute_loss requires a non-empty batch".into()));
    }
    let mut samples = Vec::with_capacity(batch.len());
    let mut losses = Vec::with_capacity(batch.len());
    for prepared in batch {
        let assembled = assemble(tape, bound, config, prepared)?;
        let len = assembled.targets.len();
        let logits = lm::forward_logits(tape, &bound.lm, &config.lm, assembled.embeddings)?;
        let predict = tape.slice(logits, 0, 0, len - 1)?;
        let shifted_targets = &assembled.targets[1..];
        let shifted_mask: Vec<bool> = assembled.loss_mask[1..].to_vec();
        let loss = tape
            .cross_entropy_masked(predict, shifted_targets, &shifted_mask)
            .map_err(|e| match e {
                Error::EmptySupervision { .. } => Error::EmptySupervision {
                    id: prepared.id.clone(),
                },
                other => other,
            })?;
        losses.push(loss);
        samples.push(SampleLoss {
            id: prepared.id.clone(),
            loss,
            logits,
            assembled,
        });
    }
    let loss = tape.mean_scalars(&losses)?;
    Ok(BatchLoss { loss, samples })
}

/// Renders the prompt as a generation prefix, assembles it with the image,
/// greedy-decodes, strips specials, and decodes the bytes.
pub fn answer(
    model: &ChitrarthModel,
    image: Option<&ImageRef>,
    prompt: &str,
    max_new: usize,
) -> Result<String> {
    if prompt.is_empty() {
        return Err(Error::Schema("answer requires a non-empty prompt".into()));
    }
    let sample = ConversationSample {
        id: "generate".into(),
        language: "en".into(),
        image: image.cloned(),
        turns: vec![Turn::user(prompt)],
    };
    let prepared = PreparedSample::prepare(&model.config, &sample, false)?;

    let mut tape = Tape::<f32>::inference();
    let bound = model.bind(&mut tape)?;
    let assembled = assemble(&mut tape, &bound, &model.config, &prepared)?;
    let prompt_embeddings = tape.data(assembled.embeddings).to_vec();
    drop(tape);

    let generated = lm::generate_greedy(&model.lm, &model.config.lm, &prompt_embeddings, max_new)?;
    let bytes: Vec<TokenId> = generated
        .into_iter()
        .filter(|&id| VocabLayout::is_byte(id))
        .collect();
    tokenizer::decode(&bytes)
}

/// Finite-difference check of the whole encoder → projector → LM graph at
/// f64, sampling a deterministic subset of elements per parameter.
pub fn end_to_end_grad_check(seed: u64, tol: f64) -> grad_check::KernelCheck {
    use crate::data::{Color, Shape, ShapeSpec};

    let config = ModelConfig {
        encoder: EncoderConfig {
            variant_name: "micro".into(),
            image_size: 16,
            patch_size: 8,
            d_vision: 12,
            n_layers: 1,
            n_heads: 2,
        },
        projector: ProjectorConfig {
            variant: ProjectorVariant::Mlp2,
            d_vision: 12,
            d_model: 16,
        },
        lm: LmConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: VocabLayout::VOCAB_SIZE,
            context_length: 64,
            tie_embeddings: true,
        },
    };
    let model = ChitrarthModel::init(config, seed).expect("valid micro config");
    let sample = ConversationSample {
        id: "fd".into(),
        language: "en".into(),
        image: Some(ImageRef::Spec(ShapeSpec {
            shape: Shape::Circle,
            color: Color::Red,
            row: 1,
            col: 1,
        })),
        turns: vec![Turn::user("look"), Turn::assistant("a dot")],
    };
    let prepared = PreparedSample::prepare(&model.config, &sample, true).expect("prepare");

    let eval = |params: &BTreeMap<String, Vec<f64>>| -> f64 {
        let mut tape = Tape::<f64>::new();
        let bound = model.bind_with_overrides(&mut tape, params).expect("bind");
        let batch = compute_loss(&mut tape, &bound, &model.config, std::slice::from_ref(&prepared)).expect("loss");
        tape.scalar_value(batch.loss)
    };

    let mut params = model.params_as_f64();

    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let bound = model.bind_with_overrides(&mut tape, &params).expect("bind");
    let batch = compute_loss(&mut tape, &bound, &model.config, std::slice::from_ref(&prepared)).expect("loss");
    tape.backward(batch.loss).expect("backward");
    let analytic: BTreeMap<String, Vec<f64>> = bound
        .refs
        .iter()
        .map(|(name, r)| {
            let g = tape.grad(*r).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.numel(*r)]);
            (name.clone(), g)
        })
        .collect();
    drop(tape);

    const MAX_ELEMENTS_PER_PARAM: usize = 8;
    let h = grad_check::DEFAULT_FD_STEP;
    let mut max_err = 0.0f64;
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params[&name].len();
        let stride = (n / MAX_ELEMENTS_PER_PARAM).max(1);
        let mut idx = 0;
        while idx < n {
            let orig = params[&name][idx];
            params.get_mut(&name).unwrap()[idx] = orig + h;
            let up = eval(&params);
            params.get_mut(&name).unwrap()[idx] = orig - h;
            let down = eval(&params);
            params.get_mut(&name).unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = grad_check::rel_err(analytic[&name][idx], fd);
            if err > max_err {
                max_err = err;
            }
            idx += stride;
        }
    }
    grad_check::KernelCheck {
        name: "end_to_end(encoder->projector->lm)".into(),
        max_rel_err: max_err,
        tolerance: tol,
        passed: max_err < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Color, Shape, ShapeSpec};
    use proptest::prelude::*;

    pub(super) fn micro_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                variant_name: "micro".into(),
                image_size: 16,
                patch_size: 8,
                d_vision: 12,
                n_layers: 1,
                n_heads: 2,
            },
            projector: ProjectorConfig {
                variant: ProjectorVariant::Mlp2,
                d_vision: 12,
                d_model: 16,
            },
            lm: LmConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                vocab_size: VocabLayout::VOCAB_SIZE,
                context_length: 128,
                tie_embeddings: true,
            },
        }
    }

    fn spec_image() -> ImageRef {
        ImageRef::Spec(ShapeSpec {
            shape: Shape::Square,
            color: Color::Green,
            row: 0,
            col: 2,
        })
    }

    fn caption_sample(id: &str, prompt: &str, caption: &str, image: Option<ImageRef>) -> ConversationSample {
        ConversationSample {
            id: id.into(),
            language: "en".into(),
            image,
            turns: vec![Turn::user(prompt), Turn::assistant(caption)],
        }
    }

    #[test]
    fn config_validation_catches_width_mismatches() {
        let mut cfg = micro_config();
        cfg.projector.d_model = 24;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = micro_config();
        cfg.projector.d_vision = 9;
        assert!(cfg.validate().is_err());
        assert!(micro_config().validate().is_ok());
    }

    #[test]
    fn assemble_length_law_with_image() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 11).unwrap();
        let sample = caption_sample("s", "look", "a green square", Some(spec_image()));
        let prepared = PreparedSample::prepare(&config, &sample, true).unwrap();
        let text_len = prepared.rendered.ids.len();

        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape).unwrap();
        let assembled = assemble(&mut tape, &bound, &config, &prepared).unwrap();
        let n = config.encoder.token_count();
        assert_eq!(tape.shape(assembled.embeddings)[0], text_len - 1 + n);
        assert_eq!(assembled.loss_mask.len(), text_len - 1 + n);
        assert_eq!(assembled.targets.len(), text_len - 1 + n);
        let (vs, ve) = assembled.visual_range.unwrap();
        assert_eq!(ve - vs, n);
        assert!(assembled.loss_mask[vs..ve].iter().all(|&m| !m));
    }

    #[test]
    fn assemble_text_only_keeps_length() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 11).unwrap();
        let sample = caption_sample("s", "hi", "hello", None);
        let prepared = PreparedSample::prepare(&config, &sample, true).unwrap();
        let text_len = prepared.rendered.ids.len();

        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape).unwrap();
        let assembled = assemble(&mut tape, &bound, &config, &prepared).unwrap();
        assert_eq!(tape.shape(assembled.embeddings)[0], text_len);
        assert!(assembled.visual_range.is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn assemble_length_law_over_random_lengths(
            prompt in "[a-z ]{1,40}",
            caption in "[a-z ]{1,40}",
        ) {
            let config = micro_config();
            let model = ChitrarthModel::init(config.clone(), 11).unwrap();
            let sample = caption_sample("s", &prompt, &caption, Some(spec_image()));
            let prepared = PreparedSample::prepare(&config, &sample, true).unwrap();
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape).unwrap();
            let assembled = assemble(&mut tape, &bound, &config, &prepared).unwrap();
            prop_assert_eq!(
                tape.shape(assembled.embeddings)[0],
                prepared.rendered.ids.len() - 1 + config.encoder.token_count()
            );
        }
    }

    #[test]
    fn assemble_rejects_overflow_instead_of_truncating() {
        let mut config = micro_config();
        config.lm.context_length = 16;
        let model = ChitrarthModel::init(config.clone(), 11).unwrap();
        let sample = caption_sample("s", "look", "a green square", Some(spec_image()));
        let prepared = PreparedSample::prepare(&config, &sample, true).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape).unwrap();
        assert!(matches!(
            assemble(&mut tape, &bound, &config, &prepared),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn image_slot_mismatches_are_schema_errors() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 11).unwrap();

        // Image without slot: prepared from a text-only render.
        let text_sample = caption_sample("s", "hi", "yo", None);
        let mut prepared = PreparedSample::prepare(&config, &text_sample, true).unwrap();
        prepared.image = Some(crate::vision::render_spec(
            &ShapeSpec {
                shape: Shape::Circle,
                color: Color::Red,
                row: 0,
                col: 0,
            },
            config.encoder.image_size,
        ).unwrap());
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape).unwrap();
        assert!(matches!(
            assemble(&mut tape, &bound, &config, &prepared),
            Err(Error::Schema(_))
        ));

        // Slot without image.
        let img_sample = caption_sample("s", "hi", "yo", Some(spec_image()));
        let mut prepared = PreparedSample::prepare(&config, &img_sample, true).unwrap();
        prepared.image = None;
        assert!(matches!(
            assemble(&mut tape, &bound, &config, &prepared),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn untrained_loss_is_near_uniform_bound() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 5).unwrap();
        let samples: Vec<PreparedSample> = (0..3)
            .map(|i| {
                let s = caption_sample(&format!("s{i}"), "look", "a green square", Some(spec_image()));
                PreparedSample::prepare(&config, &s, true).unwrap()
            })
            .collect();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape).unwrap();
        let batch = compute_loss(&mut tape, &bound, &config, &samples).unwrap();
        let loss = tape.scalar_value(batch.loss);
        let uniform = (VocabLayout::VOCAB_SIZE as f32).ln();
        assert!((loss - uniform).abs() / uniform < 0.05, "loss {loss} vs ln260 {uniform}");
    }

    #[test]
    fn duplicating_the_batch_leaves_loss_unchanged() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 5).unwrap();
        let a = PreparedSample::prepare(&config, &caption_sample("a", "look", "a dot", Some(spec_image())), true).unwrap();
        let b = PreparedSample::prepare(&config, &caption_sample("b", "see", "two dots here", None), true).unwrap();

        let loss_of = |batch: &[PreparedSample]| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape).unwrap();
            let out = compute_loss(&mut tape, &bound, &config, batch).unwrap();
            tape.scalar_value(out.loss)
        };
        let once = loss_of(&[a.clone(), b.clone()]);
        let doubled = loss_of(&[a.clone(), b.clone(), a, b]);
        assert_eq!(once.to_bits(), doubled.to_bits());
    }

    #[test]
    fn batch_loss_is_order_invariant() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 5).unwrap();
        let a = PreparedSample::prepare(&config, &caption_sample("a", "look", "a dot", Some(spec_image())), true).unwrap();
        let b = PreparedSample::prepare(&config, &caption_sample("b", "see", "two dots", None), true).unwrap();
        let c = PreparedSample::prepare(&config, &caption_sample("c", "what", "nothing at all", None), true).unwrap();
        let loss_of = |batch: &[PreparedSample]| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape).unwrap();
            let out = compute_loss(&mut tape, &bound, &config, batch).unwrap();
            tape.scalar_value(out.loss)
        };
        let abc = loss_of(&[a.clone(), b.clone(), c.clone()]);
        let cba = loss_of(&[c, b, a]);
        assert_eq!(abc.to_bits(), cba.to_bits());
    }

    #[test]
    fn visual_and_unsupervised_logit_rows_get_zero_grad() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 5).unwrap();
        let sample = caption_sample("s", "look", "a green square", Some(spec_image()));
        let prepared = PreparedSample::prepare(&config, &sample, true).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape).unwrap();
        let batch = compute_loss(&mut tape, &bound, &config, std::slice::from_ref(&prepared)).unwrap();
        tape.backward(batch.loss).unwrap();

        let info = &batch.samples[0];
        let grad = tape.grad(info.logits).unwrap();
        let v = config.lm.vocab_size;
        let len = info.assembled.targets.len();
        let (vs, ve) = info.assembled.visual_range.unwrap();
        for t in 0..len {
            let supervised = t + 1 < len && info.assembled.loss_mask[t + 1];
            let row = &grad[t * v..(t + 1) * v];
            if supervised {
                assert!(row.iter().any(|&g| g != 0.0), "supervised row {t} has zero grad");
            } else {
                assert!(
                    row.iter().all(|&g| g.to_bits() == 0),
                    "unsupervised row {t} has non-zero grad"
                );
            }
            if t >= vs && t < ve {
                assert!(row.iter().all(|&g| g.to_bits() == 0), "visual row {t}");
            }
        }
    }

    #[test]
    fn empty_supervision_names_the_sample() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 5).unwrap();
        let sample = caption_sample("needle", "look", "x", Some(spec_image()));
        let mut prepared = PreparedSample::prepare(&config, &sample, true).unwrap();
        for m in prepared.rendered.loss_mask.iter_mut() {
            *m = false;
        }
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape).unwrap();
        match compute_loss(&mut tape, &bound, &config, &[prepared]) {
            Err(Error::EmptySupervision { id }) => assert_eq!(id, "needle"),
            other => panic!("expected empty-supervision error, got {other:?}"),
        }
    }

    #[test]
    fn loss_depends_on_image_content() {
        let config = micro_config();
        let model = ChitrarthModel::init(config.clone(), 5).unwrap();
        let mk = |color: Color| {
            let image = ImageRef::Spec(ShapeSpec {
                shape: Shape::Circle,
                color,
                row: 1,
                col: 1,
            });
            let s = caption_sample("s", "look", "a circle", Some(image));
            PreparedSample::prepare(&config, &s, true).unwrap()
        };
        let loss_of = |p: PreparedSample| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape).unwrap();
            let out = compute_loss(&mut tape, &bound, &config, &[p]).unwrap();
            tape.scalar_value(out.loss)
        };
        let red = loss_of(mk(Color::Red));
        let blue = loss_of(mk(Color::Blue));
        assert_ne!(red.to_bits(), blue.to_bits());
    }

    #[test]
    fn answer_is_deterministic_and_respects_max_new_zero() {
        let config = micro_config();
        let model = ChitrarthModel::init(config, 5).unwrap();
        let image = spec_image();
        assert_eq!(answer(&model, Some(&image), "look", 0).unwrap(), "");
        let a = answer(&model, Some(&image), "look", 8).unwrap();
        let b = answer(&model, Some(&image), "look", 8).unwrap();
        assert_eq!(a, b);
        assert!(matches!(answer(&model, None, "", 4), Err(Error::Schema(_))));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let check = end_to_end_grad_check(3, 1e-3);
        assert!(check.passed, "{check}");
    }
}
