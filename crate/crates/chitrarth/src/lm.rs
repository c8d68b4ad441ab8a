//! Decoder-only autoregressive transformer over the byte-level vocabulary.
//! Learned absolute positions, pre-norm blocks, causal attention throughout,
//! and optional embedding tying for the output projection.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, BoundBlock, BoundLayerNorm, LayerNorm};
use crate::params::{Binder, ParamTensor, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Scalar, Tape, TensorRef};
use crate::tokenizer::{TokenId, VocabLayout};

fn default_vocab() -> usize {
    VocabLayout::VOCAB_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub context_length: usize,
    pub tie_embeddings: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: VocabLayout::VOCAB_SIZE,
            context_length: 512,
            tie_embeddings: true,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Config("context_length must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub tok_embed: ParamTensor, // [vocab, d_model]
    pub pos_embed: ParamTensor, // [context_length, d_model]
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub lm_head: Option<ParamTensor>, // [d_model, vocab] when untied
}

impl LmParams {
    pub fn init(cfg: &LmConfig, rng: &mut ChaCha8Rng) -> Self {
        LmParams {
            tok_embed: ParamTensor::trunc_normal(&[cfg.vocab_size, cfg.d_model], crate::nn::INIT_STD, rng),
            pos_embed: ParamTensor::trunc_normal(&[cfg.context_length, cfg.d_model], crate::nn::INIT_STD, rng),
            blocks: (0..cfg.n_layers).map(|_| Block::init(cfg.d_model, rng)).collect(),
            ln_f: LayerNorm::init(cfg.d_model),
            lm_head: if cfg.tie_embeddings {
                None
            } else {
                Some(ParamTensor::trunc_normal(&[cfg.d_model, cfg.vocab_size], crate::nn::INIT_STD, rng))
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.tok_embed"), &self.tok_embed);
        f(&format!("{prefix}.pos_embed"), &self.pos_embed);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.block{i}"), f);
        }
        self.ln_f.visit(&format!("{prefix}.ln_f"), f);
        if let Some(head) = &self.lm_head {
            f(&format!("{prefix}.lm_head"), head);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.tok_embed"), &mut self.tok_embed);
        f(&format!("{prefix}.pos_embed"), &mut self.pos_embed);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        self.ln_f.visit_mut(&format!("{prefix}.ln_f"), f);
        if let Some(head) = &mut self.lm_head {
            f(&format!("{prefix}.lm_head"), head);
        }
    }

    pub fn bind<T: Scalar>(&self, binder: &mut Binder<T>, prefix: &str) -> Result<BoundLm> {
        Ok(BoundLm {
            tok_embed: binder.bind(&format!("{prefix}.tok_embed"), &self.tok_embed)?,
            pos_embed: binder.bind(&format!("{prefix}.pos_embed"), &self.pos_embed)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(binder, &format!("{prefix}.block{i}")))
                .collect::<Result<_>>()?,
            ln_f: self.ln_f.bind(binder, &format!("{prefix}.ln_f"))?,
            lm_head: self
                .lm_head
                .as_ref()
                .map(|h| binder.bind(&format!("{prefix}.lm_head"), h))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundLm {
    pub tok_embed: TensorRef,
    pub pos_embed: TensorRef,
    pub blocks: Vec<BoundBlock>,
    pub ln_f: BoundLayerNorm,
    pub lm_head: Option<TensorRef>,
}

/// Embedding-table lookup; positions are added inside [`forward_logits`].
pub fn embed<T: Scalar>(tape: &mut Tape<T>, lm: &BoundLm, ids: &[TokenId]) -> Result<TensorRef> {
    tape.embedding(lm.tok_embed, ids)
}

/// Causal forward pass over an embedding sequence: logits at position t
/// depend on positions <= t only.
pub fn forward_logits<T: Scalar>(
    tape: &mut Tape<T>,
    lm: &BoundLm,
    cfg: &LmConfig,
    embeddings: TensorRef,
) -> Result<TensorRef> {
    let t = tape.shape(embeddings)[0];
    if t > cfg.context_length {
        return Err(Error::ContextOverflow {
            len: t,
            context: cfg.context_length,
        });
    }
    let pos = tape.slice(lm.pos_embed, 0, 0, t)?;
    let mut h = tape.add(embeddings, pos)?;
    for block in &lm.blocks {
        h = block.forward(tape, h, cfg.n_heads, true)?;
    }
    let h = lm.ln_f.forward(tape, h)?;
    match lm.lm_head {
        Some(head) => tape.matmul(h, head),
        None => {
            let et = tape.transpose(lm.tok_embed)?;
            tape.matmul(h, et)
        }
    }
}

/// Greedy argmax with lowest-id tie-breaking.
pub fn argmax_lowest(row: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding from raw prompt embeddings (`[prompt_len, d_model]`,
/// flattened). Appends argmax tokens until EOS or `max_new`; the returned
/// ids exclude the prompt and include the terminating EOS if produced.
pub fn generate_greedy(
    params: &LmParams,
    cfg: &LmConfig,
    prompt_embeddings: &[f32],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let d = cfg.d_model;
    debug_assert_eq!(prompt_embeddings.len() % d, 0);
    let prompt_len = prompt_embeddings.len() / d;
    if prompt_len + max_new > cfg.context_length {
        return Err(Error::ContextOverflow {
            len: prompt_len + max_new,
            context: cfg.context_length,
        });
    }
    let mut embeddings = prompt_embeddings.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new {
        let t = embeddings.len() / d;
        let mut tape = Tape::<f32>::inference();
        let mut binder = Binder::new(&mut tape);
        let lm = params.bind(&mut binder, "lm")?;
        let x = binder.tape.leaf_from_f32(&embeddings, &[t, d], false)?;
        let logits = forward_logits(binder.tape, &lm, cfg, x)?;
        let last_row = &binder.tape.data(logits)[(t - 1) * cfg.vocab_size..];
        let next = argmax_lowest(last_row);
        generated.push(next);
        if next == VocabLayout::EOS {
            break;
        }
        let row = &params.tok_embed.data[next as usize * d..(next as usize + 1) * d];
        embeddings.extend_from_slice(row);
    }
    Ok(generated)
}
