//! Named trainable tensors and their per-step tape bindings.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{PvcError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered parameter list; each trainable tensor appears exactly once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(NamedParam { name, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Places every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Overwrites every parameter that has a same-named, same-shaped
    /// counterpart in `other`. Returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name) {
                if src.tensor.shape() != e.tensor.shape() {
                    return Err(PvcError::dim(
                        "copy_matching",
                        format!("{}: {:?} vs {:?}", e.name, src.tensor.shape(), e.tensor.shape()),
                    ));
                }
                e.tensor = src.tensor.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Wraps handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(shape);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fan-in/fan-out: `[out, in]` for dense weights, `[out, in, k...]` for
/// convolution kernels (receptive field multiplies both).
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

pub fn xavier_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let bound = xavier_bound(shape);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Deterministic Xavier-uniform tensor for `seed`.
pub fn xavier_init(shape: &[usize], seed: u64) -> Tensor {
    xavier_uniform(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fans_of_conv_kernel() {
        assert_eq!(fans(&[32, 16, 5, 3, 3]), (16 * 45, 32 * 45));
        assert_eq!(fans(&[6, 3]), (3, 6));
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let shape = [8, 4, 3, 3, 3];
        let a = xavier_init(&shape, 11);
        assert_eq!(a, xavier_init(&shape, 11));
        assert_ne!(a, xavier_init(&shape, 12));
        let bound = xavier_bound(&shape);
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_variance_matches_glorot() {
        // Var(U(-b, b)) = b^2 / 3 = 2 / (fan_in + fan_out)
        let shape = [100, 1000];
        let t = xavier_init(&shape, 3);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = 2.0 / 1100.0;
        assert!((var - expect).abs() / expect < 0.1, "{var} vs {expect}");
    }

    #[test]
    fn copy_matching_by_name() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2]));
        a.add("only_a", Tensor::zeros(&[1]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        assert_eq!(a.copy_matching(&b).unwrap(), 1);
        assert_eq!(a.get(ParamId(0)).data(), &[1.0, 2.0]);
    }
}
