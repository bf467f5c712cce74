//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is used to verify.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error `|g_a - g_n| / max(|g_a|, |g_n|)` per input,
    /// over the checked coordinates. Zero when both gradients vanish.
    pub rel_errors: Vec<f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement). `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let loss = f(&tape, &vars)?;
            let grads = tape.backward(loss)?;
            vars.iter().map(|&v| grads.wrt(v)).collect()
        };
        let eval = |inputs: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            f(&tape, &vars)?.item()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut rel_errors = Vec::with_capacity(inputs.len());
        let mut checked = 0;
        for (i, input) in inputs.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < input.len() => {
                    let mut c = sample(&mut rng, input.len(), m).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..input.len()).collect(),
            };
            let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for &c in &coords {
                let orig = input.data()[c];
                work[i].data_mut()[c] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[c] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i].data()[c];
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
            }
            checked += coords.len();
            let scale = a2.sqrt().max(n2.sqrt());
            rel_errors.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
        }
        Ok(GradCheckReport { rel_errors, checked })
    }
}

impl GradCheck {
    /// Directional check over all inputs at once: for each of `directions`
    /// random unit-scale perturbations `v`, compares `<grad, v>` with the
    /// central difference of `f` along `v`. Returns the norm-wise relative
    /// error over the vector of directional derivatives.
    pub fn directional<F>(&self, inputs: &[Tensor], directions: usize, f: F) -> Result<f64>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let loss = f(&tape, &vars)?;
            let grads = tape.backward(loss)?;
            vars.iter().map(|&v| grads.wrt(v)).collect()
        };
        let eval = |inputs: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            f(&tape, &vars)?.item()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for _ in 0..directions {
            let dirs: Vec<Tensor> = inputs
                .iter()
                .map(|t| {
                    let signs = (0..t.len())
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect();
                    Tensor::from_parts(t.shape().to_vec(), signs)
                })
                .collect();
            let shifted = |sign: f64| -> Vec<Tensor> {
                inputs
                    .iter()
                    .zip(&dirs)
                    .map(|(t, d)| {
                        let mut s = t.clone();
                        for (v, dv) in s.data_mut().iter_mut().zip(d.data()) {
                            *v += sign * self.step * dv;
                        }
                        s
                    })
                    .collect()
            };
            let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * self.step);
            let a: f64 = analytic
                .iter()
                .zip(&dirs)
                .map(|(g, d)| g.data().iter().zip(d.data()).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        Ok(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale })
    }
}
