//! Modality projector: maps vision embeddings into the LM embedding space.
//! Two variants — a single linear map and a two-layer GELU MLP whose hidden
//! width equals the LM width.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear};
use crate::params::{Binder, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Scalar, Tape, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorVariant {
    Linear,
    Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub variant: ProjectorVariant,
    pub d_vision: usize,
    pub d_model: usize,
}

impl ProjectorConfig {
    /// Exact trainable scalar count for the variant.
    pub fn param_count(&self) -> usize {
        match self.variant {
            ProjectorVariant::Linear => self.d_vision * self.d_model + self.d_model,
            ProjectorVariant::Mlp2 => {
                self.d_vision * self.d_model + self.d_model + self.d_model * self.d_model + self.d_model
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub fc1: Linear,
    pub fc2: Option<Linear>,
}

impl ProjectorParams {
    pub fn init(cfg: &ProjectorConfig, rng: &mut ChaCha8Rng) -> Self {
        ProjectorParams {
            fc1: Linear::init(cfg.d_vision, cfg.d_model, rng),
            fc2: match cfg.variant {
                ProjectorVariant::Linear => None,
                ProjectorVariant::Mlp2 => Some(Linear::init(cfg.d_model, cfg.d_model, rng)),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        if let Some(fc2) = &self.fc2 {
            fc2.visit(&format!("{prefix}.fc2"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        if let Some(fc2) = &mut self.fc2 {
            fc2.visit_mut(&format!("{prefix}.fc2"), f);
        }
    }

    pub fn bind<T: Scalar>(&self, binder: &mut Binder<T>, prefix: &str) -> Result<BoundProjector> {
        Ok(BoundProjector {
            fc1: self.fc1.bind(binder, &format!("{prefix}.fc1"))?,
            fc2: self
                .fc2
                .as_ref()
                .map(|fc2| fc2.bind(binder, &format!("{prefix}.fc2")))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjector {
    pub fc1: BoundLinear,
    pub fc2: Option<BoundLinear>,
}

/// Token-wise projection of `[N, d_vision]` into `[N, d_model]`.
pub fn project<T: Scalar>(tape: &mut Tape<T>, projector: &BoundProjector, visual: TensorRef) -> Result<TensorRef> {
    if tape.shape(visual).len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "project",
            lhs: tape.shape(visual).to_vec(),
            rhs: vec![],
        });
    }
    let h = projector.fc1.forward(tape, visual)?;
    match &projector.fc2 {
        None => Ok(h),
        Some(fc2) => {
            let act = tape.gelu(h);
            fc2.forward(tape, act)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamTensor;
    use rand::SeedableRng;

    fn cfg(variant: ProjectorVariant, d_vision: usize, d_model: usize) -> ProjectorConfig {
        ProjectorConfig {
            variant,
            d_vision,
            d_model,
        }
    }

    fn run(params: &ProjectorParams, input: &[f32], rows: usize, d_vision: usize) -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, "proj").unwrap();
        let x = binder.tape.leaf_from_f32(input, &[rows, d_vision], false).unwrap();
        let out = project(binder.tape, &bound, x).unwrap();
        binder.tape.data(out).to_vec()
    }

    #[test]
    fn param_counts_match_variant_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (variant, expected) in [
            (ProjectorVariant::Linear, 64 * 64 + 64),
            (ProjectorVariant::Mlp2, 2 * (64 * 64 + 64)),
        ] {
            let c = cfg(variant, 64, 64);
            assert_eq!(c.param_count(), expected);
            let params = ProjectorParams::init(&c, &mut rng);
            let mut total = 0;
            params.visit("proj", &mut |_, p| total += p.numel());
            assert_eq!(total, expected);
        }
    }

    #[test]
    fn zero_weights_yield_bias_rows() {
        let c = cfg(ProjectorVariant::Linear, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ProjectorParams::init(&c, &mut rng);
        params.fc1.w = ParamTensor::zeros(&[3, 2]);
        params.fc1.b = ParamTensor {
            shape: vec![2],
            data: vec![0.5, -1.5],
        };
        let out = run(&params, &[9.0, -3.0, 2.0, 0.1, 0.2, 0.3], 2, 3);
        assert_eq!(out, vec![0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let c = cfg(ProjectorVariant::Linear, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ProjectorParams::init(&c, &mut rng);
        params.fc1.w = ParamTensor {
            shape: vec![2, 2],
            data: vec![1.0, 0.0, 0.0, 1.0],
        };
        params.fc1.b = ParamTensor::zeros(&[2]);
        let out = run(&params, &[0.25, -0.75], 1, 2);
        assert_eq!(out, vec![0.25, -0.75]);
    }

    /// mlp2 with hand-set 2×2 weights; the gelu composite was evaluated
    /// independently: pre-activation [5.5, -1.5] maps through gelu to
    /// [5.4999999940723597, -0.10042842301976708].
    #[test]
    fn mlp2_matches_hand_computed_composite() {
        let c = cfg(ProjectorVariant::Mlp2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ProjectorParams::init(&c, &mut rng);
        params.fc1.w = ParamTensor {
            shape: vec![2, 2],
            data: vec![1.0, -1.0, 2.0, 0.0],
        };
        params.fc1.b = ParamTensor {
            shape: vec![2],
            data: vec![0.5, -0.5],
        };
        let fc2 = params.fc2.as_mut().unwrap();
        fc2.w = ParamTensor {
            shape: vec![2, 2],
            data: vec![1.0, 0.0, 0.0, 1.0],
        };
        fc2.b = ParamTensor::zeros(&[2]);

        let out = run(&params, &[1.0, 2.0], 1, 2);
        assert!((out[0] - 5.49999999).abs() < 1e-5, "{}", out[0]);
        assert!((out[1] - (-0.10042842)).abs() < 1e-6, "{}", out[1]);
    }

    /// Output row i depends only on input row i.
    #[test]
    fn projection_is_token_wise() {
        let c = cfg(ProjectorVariant::Mlp2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ProjectorParams::init(&c, &mut rng);
        let mut input: Vec<f32> = (0..12).map(|i| (i as f32 * 0.3).cos()).collect();
        let out1 = run(&params, &input, 3, 4);
        for v in &mut input[4..8] {
            *v += 1.0;
        }
        let out2 = run(&params, &input, 3, 4);
        assert_eq!(&out1[0..4], &out2[0..4]);
        assert_eq!(&out1[8..12], &out2[8..12]);
        assert_ne!(&out1[4..8], &out2[4..8]);
    }
}
