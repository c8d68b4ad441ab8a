//! Master parameter storage and per-forward tape binding.
//!
//! Parameters live outside any tape as `f32` master copies. Each forward
//! pass binds them onto a fresh tape (upcasting when the tape runs at
//! `f64`), recording name → tensor-ref pairs so the trainer can route
//! gradients back to the master copies by name.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Scalar, Tape, TensorRef};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamTensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        ParamTensor {
            shape: shape.to_vec(),
            data: vec![1.0; shape.iter().product()],
        }
    }

    /// Normal(0, std) truncated at ±2 std.
    pub fn trunc_normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..shape.iter().product())
            .map(|_| loop {
                let x = dist.sample(rng);
                if x.abs() <= 2.0 * std {
                    break x;
                }
            })
            .collect();
        ParamTensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Callback type for parameter traversal; names are dotted paths.
pub type ParamVisitor<'a> = dyn FnMut(&str, &ParamTensor) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, &mut ParamTensor) + 'a;

/// Registers master parameters on a tape, recording their names.
pub struct Binder<'t, 'o, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    overrides: Option<&'o BTreeMap<String, Vec<f64>>>,
    refs: Vec<(String, TensorRef)>,
}

impl<'t, 'o, T: Scalar> Binder<'t, 'o, T> {
    pub fn new(tape: &'t mut Tape<T>) -> Self {
        Binder {
            tape,
            overrides: None,
            refs: Vec::new(),
        }
    }

    /// Binder that reads selected parameters from an override map instead
    /// of the master copies — the finite-difference path.
    pub fn with_overrides(tape: &'t mut Tape<T>, overrides: &'o BTreeMap<String, Vec<f64>>) -> Self {
        Binder {
            tape,
            overrides: Some(overrides),
            refs: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: &str, param: &ParamTensor) -> Result<TensorRef> {
        let r = match self.overrides.and_then(|o| o.get(name)) {
            Some(values) => {
                let data: Vec<T> = values.iter().map(|&v| T::from_f64(v)).collect();
                self.tape.leaf(data, &param.shape, true)?
            }
            None => self.tape.leaf_from_f32(&param.data, &param.shape, true)?,
        };
        self.refs.push((name.to_string(), r));
        Ok(r)
    }

    pub fn into_refs(self) -> Vec<(String, TensorRef)> {
        self.refs
    }
}
