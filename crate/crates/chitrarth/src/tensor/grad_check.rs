//! Finite-difference gradient verification.
//!
//! Every kernel is checked by rebuilding its graph at `f64`, probing the
//! output with a fixed random weighting, and comparing the tape's analytic
//! gradients against central finite differences. The differencing never
//! touches the backward implementation it is checking.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Tape, TensorRef};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const KERNEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for KernelCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} max_rel_err {:>12.3e}  tol {:>8.1e}  {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of `eval` with respect to every element of
/// every input, at step `h`.
pub fn fd_gradients(eval: &mut dyn FnMut(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for e in 0..inputs[i].len() {
            let orig = work[i][e];
            work[i][e] = orig + h;
            let up = eval(&work);
            work[i][e] = orig - h;
            let down = eval(&work);
            work[i][e] = orig;
            g[e] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// One kernel graph: named inputs and a builder producing the output tensor.
struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: fn(&mut Tape<f64>, &[TensorRef]) -> TensorRef,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: |t, r| t.add(r[0], r[1]).unwrap(),
        },
        Case {
            name: "add_bias",
            shapes: vec![vec![3, 4], vec![4]],
            build: |t, r| t.add_bias(r[0], r[1]).unwrap(),
        },
        Case {
            name: "multiply",
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: |t, r| t.mul(r[0], r[1]).unwrap(),
        },
        Case {
            name: "scale",
            shapes: vec![vec![3, 4]],
            build: |t, r| t.scale(r[0], 1.7),
        },
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 5]],
            build: |t, r| t.matmul(r[0], r[1]).unwrap(),
        },
        Case {
            name: "transpose",
            shapes: vec![vec![3, 5]],
            build: |t, r| t.transpose(r[0]).unwrap(),
        },
        Case {
            name: "concat_rows",
            shapes: vec![vec![2, 3], vec![4, 3]],
            build: |t, r| t.concat(r, 0).unwrap(),
        },
        Case {
            name: "concat_cols",
            shapes: vec![vec![3, 2], vec![3, 4]],
            build: |t, r| t.concat(r, 1).unwrap(),
        },
        Case {
            name: "slice_rows",
            shapes: vec![vec![5, 3]],
            build: |t, r| t.slice(r[0], 0, 1, 3).unwrap(),
        },
        Case {
            name: "slice_cols",
            shapes: vec![vec![3, 6]],
            build: |t, r| t.slice(r[0], 1, 2, 3).unwrap(),
        },
        Case {
            name: "embedding_lookup",
            shapes: vec![vec![7, 4]],
            build: |t, r| t.embedding(r[0], &[0, 3, 3, 6, 1]).unwrap(),
        },
        Case {
            name: "layernorm",
            shapes: vec![vec![4, 5], vec![5], vec![5]],
            build: |t, r| t.layernorm(r[0], r[1], r[2], 1e-5).unwrap(),
        },
        Case {
            name: "gelu",
            shapes: vec![vec![3, 4]],
            build: |t, r| t.gelu(r[0]),
        },
        Case {
            name: "softmax_rows",
            shapes: vec![vec![4, 6]],
            build: |t, r| t.softmax_rows(r[0]).unwrap(),
        },
        Case {
            name: "causal_softmax_rows",
            shapes: vec![vec![5, 5]],
            build: |t, r| t.causal_softmax_rows(r[0]).unwrap(),
        },
        Case {
            name: "cross_entropy_masked",
            shapes: vec![vec![6, 9]],
            build: |t, r| {
                let targets = [2u32, 0, 8, 5, 1, 7];
                let mask = [true, false, true, true, false, true];
                t.cross_entropy_masked(r[0], &targets, &mask).unwrap()
            },
        },
        Case {
            name: "sum",
            shapes: vec![vec![3, 4]],
            build: |t, r| t.sum(r[0]),
        },
        Case {
            name: "mean_scalars",
            shapes: vec![vec![1], vec![1], vec![1]],
            build: |t, r| t.mean_scalars(r).unwrap(),
        },
    ]
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn run_case(case: &Case, seed: u64, tol: f64, distort_analytic: f64) -> KernelCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| random_values(&mut rng, s.iter().product()))
        .collect();

    // The probe weighting is fixed per case so the scalarized loss exposes
    // every output element.
    let probe_seed = seed.wrapping_add(0x9e37_79b9);
    let mut eval = |vals: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let refs: Vec<TensorRef> = vals
            .iter()
            .zip(&case.shapes)
            .map(|(v, s)| tape.leaf(v.clone(), s, true).unwrap())
            .collect();
        let out = (case.build)(&mut tape, &refs);
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe_vals = random_values(&mut prng, tape.numel(out));
        let probe = tape.constant(probe_vals, &tape.shape(out).to_vec()).unwrap();
        let weighted = tape.mul(out, probe).unwrap();
        let loss = tape.sum(weighted);
        tape.scalar_value(loss)
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::<f64>::new();
    let refs: Vec<TensorRef> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(v, s)| tape.leaf(v.clone(), s, true).unwrap())
        .collect();
    let out = (case.build)(&mut tape, &refs);
    let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe_vals = random_values(&mut prng, tape.numel(out));
    let probe = tape.constant(probe_vals, &tape.shape(out).to_vec()).unwrap();
    let weighted = tape.mul(out, probe).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();

    let fd = fd_gradients(&mut eval, &inputs, DEFAULT_FD_STEP);
    let mut max_err = 0.0f64;
    for (i, r) in refs.iter().enumerate() {
        let analytic = tape.grad(*r).expect("leaf gradient populated");
        for (a, f) in analytic.iter().zip(&fd[i]) {
            let err = rel_err(*a * distort_analytic, *f);
            if err > max_err {
                max_err = err;
            }
        }
    }
    KernelCheck {
        name: case.name.to_string(),
        max_rel_err: max_err,
        tolerance: tol,
        passed: max_err < tol,
    }
}

/// Runs the finite-difference check for every registered kernel.
pub fn check_all_kernels(seed: u64, tol: f64) -> Vec<KernelCheck> {
    cases().iter().map(|c| run_case(c, seed, tol, 1.0)).collect()
}

/// A deliberately distorted gelu gradient. The checker must flag it; this
/// proves the suite can detect a wrong backward implementation.
pub fn negative_control(seed: u64, tol: f64) -> KernelCheck {
    let case = cases().into_iter().find(|c| c.name == "gelu").unwrap();
    let mut check = run_case(&case, seed, tol, 1.05);
    check.name = "negative_control(gelu*1.05)".to_string();
    check
}
