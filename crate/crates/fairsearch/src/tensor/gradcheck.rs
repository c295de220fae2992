//! Central-difference gradient checking against the tape's analytic pass.
//!
//! Runs in 64-bit only; finite differences are unreliable in 32-bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step; must lie in `[1e-6, 1e-4]`.
    pub h: f64,
    /// Check at most this many coordinates per input (all when `None`),
    /// sampled deterministically from `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

fn eval_scalar<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let root = build(&mut tape, &vars)?;
    if tape.shape(root).iter().product::<usize>() != 1 {
        return Err(Error::InvalidArg(
            "grad_check: program output must be scalar".into(),
        ));
    }
    Ok(tape.scalar_value(root))
}

/// Max over all checked coordinates of
/// `|analytic - central| / max(1, |analytic|, |central|)`.
pub fn grad_check_many<F>(
    build: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::InvalidArg(format!(
            "grad_check: step size {} outside [1e-6, 1e-4]",
            opts.h
        )));
    }

    // Analytic gradients for every input.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.grad(v).expect("leaf gradient populated").to_vec())
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                let mut picked = all[..m].to_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += opts.h;
            let f_plus = eval_scalar(&build, &plus)?;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= opts.h;
            let f_minus = eval_scalar(&build, &minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * opts.h);
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_many`].
pub fn grad_check<F>(build: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| build(tape, vars[0]),
        std::slice::from_ref(x),
        GradCheckOptions {
            h,
            ..Default::default()
        },
    )
}
