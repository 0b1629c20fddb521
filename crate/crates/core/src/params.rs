//! Named parameter collections.
//!
//! Every model component exposes its weights as an ordered list of named
//! tensors. The same order is used for tracking on a graph, optimizer state,
//! and checkpoints.

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait ParamSet: Sized {
    /// Parameters in a fixed order, names unique within the set.
    fn named_tensors(&self) -> Vec<(String, Tensor)>;

    /// Rebuilds the set from tensors in `named_tensors` order.
    fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self>;

    fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// A copy whose tensors are leaves of `g`.
    fn track(&self, g: &mut Graph) -> Self {
        let leaves = self.tensors().iter().map(|t| g.leaf(t)).collect();
        self.with_tensors(leaves).expect("tracking preserves shapes")
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(Tensor::len).sum()
    }
}

/// Weight initialisation: `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = if fan_in == 0 { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
    Tensor::uniform(shape, bound, rng)
}

/// Pops the next tensor, checking it has the expected shape.
pub(crate) fn take(
    it: &mut impl Iterator<Item = Tensor>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor> {
    let t = it
        .next()
        .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
    if t.shape() != shape {
        return Err(Error::Dimension(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Prefixes every name with `prefix.`.
pub(crate) fn prefixed(prefix: &str, named: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    named
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
