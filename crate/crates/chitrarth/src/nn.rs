//! Transformer building blocks shared by the vision encoder and the LM:
//! linear layers, layer norm, and the pre-norm attention block.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Binder, ParamTensor, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Scalar, Tape, TensorRef};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamTensor, // [in, out]
    pub b: ParamTensor, // [out]
}

impl Linear {
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: ParamTensor::trunc_normal(&[input, output], INIT_STD, rng),
            b: ParamTensor::zeros(&[output]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind<T: Scalar>(&self, binder: &mut Binder<T>, prefix: &str) -> Result<BoundLinear> {
        Ok(BoundLinear {
            w: binder.bind(&format!("{prefix}.w"), &self.w)?,
            b: binder.bind(&format!("{prefix}.b"), &self.b)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: TensorRef,
    pub b: TensorRef,
}

impl BoundLinear {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: TensorRef) -> Result<TensorRef> {
        let h = tape.matmul(x, self.w)?;
        tape.add_bias(h, self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: ParamTensor::ones(&[dim]),
            beta: ParamTensor::zeros(&[dim]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.g"), &self.gamma);
        f(&format!("{prefix}.b"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.g"), &mut self.gamma);
        f(&format!("{prefix}.b"), &mut self.beta);
    }

    pub fn bind<T: Scalar>(&self, binder: &mut Binder<T>, prefix: &str) -> Result<BoundLayerNorm> {
        Ok(BoundLayerNorm {
            gamma: binder.bind(&format!("{prefix}.g"), &self.gamma)?,
            beta: binder.bind(&format!("{prefix}.b"), &self.beta)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: TensorRef,
    pub beta: TensorRef,
}

impl BoundLayerNorm {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: TensorRef) -> Result<TensorRef> {
        tape.layernorm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Pre-norm transformer block: attention and a 4× GELU MLP, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

pub const MLP_WIDENING: usize = 4;

impl Block {
    pub fn init(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            ln1: LayerNorm::init(d_model),
            q: Linear::init(d_model, d_model, rng),
            k: Linear::init(d_model, d_model, rng),
            v: Linear::init(d_model, d_model, rng),
            o: Linear::init(d_model, d_model, rng),
            ln2: LayerNorm::init(d_model),
            mlp_in: Linear::init(d_model, d_model * MLP_WIDENING, rng),
            mlp_out: Linear::init(d_model * MLP_WIDENING, d_model, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.q.visit(&format!("{prefix}.attn.q"), f);
        self.k.visit(&format!("{prefix}.attn.k"), f);
        self.v.visit(&format!("{prefix}.attn.v"), f);
        self.o.visit(&format!("{prefix}.attn.o"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.mlp_in.visit(&format!("{prefix}.mlp.fc1"), f);
        self.mlp_out.visit(&format!("{prefix}.mlp.fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.q.visit_mut(&format!("{prefix}.attn.q"), f);
        self.k.visit_mut(&format!("{prefix}.attn.k"), f);
        self.v.visit_mut(&format!("{prefix}.attn.v"), f);
        self.o.visit_mut(&format!("{prefix}.attn.o"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.mlp_in.visit_mut(&format!("{prefix}.mlp.fc1"), f);
        self.mlp_out.visit_mut(&format!("{prefix}.mlp.fc2"), f);
    }

    pub fn bind<T: Scalar>(&self, binder: &mut Binder<T>, prefix: &str) -> Result<BoundBlock> {
        Ok(BoundBlock {
            ln1: self.ln1.bind(binder, &format!("{prefix}.ln1"))?,
            q: self.q.bind(binder, &format!("{prefix}.attn.q"))?,
            k: self.k.bind(binder, &format!("{prefix}.attn.k"))?,
            v: self.v.bind(binder, &format!("{prefix}.attn.v"))?,
            o: self.o.bind(binder, &format!("{prefix}.attn.o"))?,
            ln2: self.ln2.bind(binder, &format!("{prefix}.ln2"))?,
            mlp_in: self.mlp_in.bind(binder, &format!("{prefix}.mlp.fc1"))?,
            mlp_out: self.mlp_out.bind(binder, &format!("{prefix}.mlp.fc2"))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub ln1: BoundLayerNorm,
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub o: BoundLinear,
    pub ln2: BoundLayerNorm,
    pub mlp_in: BoundLinear,
    pub mlp_out: BoundLinear,
}

impl BoundBlock {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: TensorRef,
        n_heads: usize,
        causal: bool,
    ) -> Result<TensorRef> {
        let d_model = tape.shape(x)[1];
        debug_assert_eq!(d_model % n_heads, 0);
        let d_head = d_model / n_heads;
        let scale = T::from_f64(1.0 / (d_head as f64).sqrt());

        let h = self.ln1.forward(tape, x)?;
        let q = self.q.forward(tape, h)?;
        let k = self.k.forward(tape, h)?;
        let v = self.v.forward(tape, h)?;

        let mut head_outputs = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let start = head * d_head;
            let qh = tape.slice(q, 1, start, d_head)?;
            let kh = tape.slice(k, 1, start, d_head)?;
            let vh = tape.slice(v, 1, start, d_head)?;
            let kt = tape.transpose(kh)?;
            let raw_scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(raw_scores, scale);
            let probs = if causal {
                tape.causal_softmax_rows(scores)?
            } else {
                tape.softmax_rows(scores)?
            };
            head_outputs.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat(&head_outputs, 1)?;
        let attn = self.o.forward(tape, ctx)?;
        let x = tape.add(x, attn)?;

        let h2 = self.ln2.forward(tape, x)?;
        let up = self.mlp_in.forward(tape, h2)?;
        let act = tape.gelu(up);
        let down = self.mlp_out.forward(tape, act)?;
        tape.add(x, down)
    }
}
