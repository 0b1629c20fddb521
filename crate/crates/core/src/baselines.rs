//! Sequential reference cells: GRU, LSTM and a per-timestep MLP.
//!
//! The recurrent cells follow the common PyTorch layout: stacked gate weights
//! `w_ih: [G*d, c]`, `w_hh: [G*d, d]` with biases on both sides. The GRU gate
//! order is reset, update, new; the LSTM order is input, forget, cell, output.
//! Hidden and cell states start at zero.
//!
//! All three accept `[L, c]` or `[N, L, c]` and return `[.., L, d]`.

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::params::{init_weight, take, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GruParams {
    pub in_channels: usize,
    pub hidden: usize,
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub in_channels: usize,
    pub hidden: usize,
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub in_channels: usize,
    pub hidden: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn check_sizes(c: usize, d: usize) -> Result<()> {
    if c == 0 || d == 0 {
        return Err(Error::Contract("cell channel and hidden sizes must be positive".into()));
    }
    Ok(())
}

macro_rules! recurrent_params {
    ($ty:ident, $gates:expr) => {
        impl $ty {
            pub const GATES: usize = $gates;

            pub fn init<R: Rng + ?Sized>(in_channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
                check_sizes(in_channels, hidden)?;
                // PyTorch draws every tensor from Uniform(+-1/sqrt(hidden)).
                let g = Self::GATES * hidden;
                Ok($ty {
                    in_channels,
                    hidden,
                    w_ih: init_weight(&[g, in_channels], hidden, rng),
                    w_hh: init_weight(&[g, hidden], hidden, rng),
                    b_ih: Tensor::zeros(&[g]),
                    b_hh: Tensor::zeros(&[g]),
                })
            }

            pub fn zeros(in_channels: usize, hidden: usize) -> Result<Self> {
                check_sizes(in_channels, hidden)?;
                let g = Self::GATES * hidden;
                Ok($ty {
                    in_channels,
                    hidden,
                    w_ih: Tensor::zeros(&[g, in_channels]),
                    w_hh: Tensor::zeros(&[g, hidden]),
                    b_ih: Tensor::zeros(&[g]),
                    b_hh: Tensor::zeros(&[g]),
                })
            }
        }

        impl ParamSet for $ty {
            fn named_tensors(&self) -> Vec<(String, Tensor)> {
                vec![
                    ("w_ih".into(), self.w_ih.clone()),
                    ("w_hh".into(), self.w_hh.clone()),
                    ("b_ih".into(), self.b_ih.clone()),
                    ("b_hh".into(), self.b_hh.clone()),
                ]
            }

            fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
                let (c, d) = (self.in_channels, self.hidden);
                let g = Self::GATES * d;
                let mut it = tensors.into_iter();
                Ok($ty {
                    in_channels: c,
                    hidden: d,
                    w_ih: take(&mut it, "w_ih", &[g, c])?,
                    w_hh: take(&mut it, "w_hh", &[g, d])?,
                    b_ih: take(&mut it, "b_ih", &[g])?,
                    b_hh: take(&mut it, "b_hh", &[g])?,
                })
            }
        }
    };
}

recurrent_params!(GruParams, 3);
recurrent_params!(LstmParams, 4);

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        check_sizes(in_channels, hidden)?;
        Ok(MlpParams {
            in_channels,
            hidden,
            w1: init_weight(&[hidden, in_channels], in_channels, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: init_weight(&[hidden, hidden], hidden, rng),
            b2: Tensor::zeros(&[hidden]),
        })
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Result<Self> {
        check_sizes(in_channels, hidden)?;
        Ok(MlpParams {
            in_channels,
            hidden,
            w1: Tensor::zeros(&[hidden, in_channels]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
        })
    }
}

impl ParamSet for MlpParams {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("w1".into(), self.w1.clone()),
            ("b1".into(), self.b1.clone()),
            ("w2".into(), self.w2.clone()),
            ("b2".into(), self.b2.clone()),
        ]
    }

    fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let (c, d) = (self.in_channels, self.hidden);
        let mut it = tensors.into_iter();
        Ok(MlpParams {
            in_channels: c,
            hidden: d,
            w1: take(&mut it, "w1", &[d, c])?,
            b1: take(&mut it, "b1", &[d])?,
            w2: take(&mut it, "w2", &[d, d])?,
            b2: take(&mut it, "b2", &[d])?,
        })
    }
}

/// Flattens `[.., L, c]` (or `[L]` with `c == 1`) to `[N, L, c]` and returns
/// the leading shape to restore.
fn to_batched(g: &mut Graph, x: &Tensor, c: usize) -> Result<(Tensor, Vec<usize>)> {
    let shape = x.shape();
    let (lead, l) = match shape.len() {
        1 if c == 1 => (Vec::new(), shape[0]),
        r if r >= 2 && shape[r - 1] == c => (shape[..r - 2].to_vec(), shape[r - 2]),
        _ => {
            return Err(Error::Dimension(format!(
                "cell expects [.., L, {c}] input, got {shape:?}"
            )))
        }
    };
    let n = lead.iter().product();
    Ok((g.reshape(x, &[n, l, c])?, lead))
}

fn restore(g: &mut Graph, y: &Tensor, lead: &[usize]) -> Result<Tensor> {
    let mut shape = lead.to_vec();
    shape.extend_from_slice(&y.shape()[1..]);
    g.reshape(y, &shape)
}

/// `x W^T + b` over the last axis.
fn affine(g: &mut Graph, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let wt = g.transpose(w)?;
    let y = g.matmul(x, &wt)?;
    g.add(&y, b)
}

/// Input projections for every timestep at once, then a step loop that only
/// touches the recurrent state.
fn run_recurrence<F>(
    g: &mut Graph,
    x: &Tensor,
    c: usize,
    d: usize,
    gates: usize,
    w_ih: &Tensor,
    b_ih: &Tensor,
    mut step: F,
) -> Result<Tensor>
where
    F: FnMut(&mut Graph, &Tensor) -> Result<Tensor>,
{
    let (xb, lead) = to_batched(g, x, c)?;
    let (n, l) = (xb.shape()[0], xb.shape()[1]);
    let proj = affine(g, &xb, w_ih, b_ih)?;
    let mut outs = Vec::with_capacity(l);
    for t in 0..l {
        let xt = g.slice(&proj, 1, t, t + 1)?;
        let xt = g.reshape(&xt, &[n, gates * d])?;
        let h = step(g, &xt)?;
        outs.push(g.reshape(&h, &[n, 1, d])?);
    }
    let y = g.concat(1, &outs)?;
    restore(g, &y, &lead)
}

pub fn gru_forward_seq(g: &mut Graph, x: &Tensor, params: &GruParams) -> Result<Tensor> {
    let d = params.hidden;
    let n = x.len() / (params.in_channels * seq_len_of(x, params.in_channels)?);
    let mut h = Tensor::zeros(&[n, d]);
    let whh_t = g.transpose(&params.w_hh)?;
    run_recurrence(g, x, params.in_channels, d, 3, &params.w_ih, &params.b_ih, |g, xt| {
        let hh = g.matmul(&h, &whh_t)?;
        let hh = g.add(&hh, &params.b_hh)?;
        let (xr, xz, xn) = (g.slice(xt, 1, 0, d)?, g.slice(xt, 1, d, 2 * d)?, g.slice(xt, 1, 2 * d, 3 * d)?);
        let (hr, hz, hn) = (g.slice(&hh, 1, 0, d)?, g.slice(&hh, 1, d, 2 * d)?, g.slice(&hh, 1, 2 * d, 3 * d)?);
        let r = g.add(&xr, &hr)?;
        let r = g.sigmoid(&r)?;
        let z = g.add(&xz, &hz)?;
        let z = g.sigmoid(&z)?;
        let rn = g.mul(&r, &hn)?;
        let cand = g.add(&xn, &rn)?;
        let cand = g.tanh(&cand)?;
        let one_minus = g.sub(&Tensor::scalar(1.0), &z)?;
        let fresh = g.mul(&one_minus, &cand)?;
        let keep = g.mul(&z, &h)?;
        h = g.add(&fresh, &keep)?;
        Ok(h.clone())
    })
}

pub fn lstm_forward_seq(g: &mut Graph, x: &Tensor, params: &LstmParams) -> Result<Tensor> {
    let d = params.hidden;
    let n = x.len() / (params.in_channels * seq_len_of(x, params.in_channels)?);
    let mut h = Tensor::zeros(&[n, d]);
    let mut cell = Tensor::zeros(&[n, d]);
    let whh_t = g.transpose(&params.w_hh)?;
    run_recurrence(g, x, params.in_channels, d, 4, &params.w_ih, &params.b_ih, |g, xt| {
        let hh = g.matmul(&h, &whh_t)?;
        let hh = g.add(&hh, &params.b_hh)?;
        let pre = g.add(xt, &hh)?;
        let i = g.slice(&pre, 1, 0, d)?;
        let i = g.sigmoid(&i)?;
        let f = g.slice(&pre, 1, d, 2 * d)?;
        let f = g.sigmoid(&f)?;
        let gg = g.slice(&pre, 1, 2 * d, 3 * d)?;
        let gg = g.tanh(&gg)?;
        let o = g.slice(&pre, 1, 3 * d, 4 * d)?;
        let o = g.sigmoid(&o)?;
        let kept = g.mul(&f, &cell)?;
        let written = g.mul(&i, &gg)?;
        cell = g.add(&kept, &written)?;
        let squashed = g.tanh(&cell)?;
        h = g.mul(&o, &squashed)?;
        Ok(h.clone())
    })
}

/// `tanh(x W1^T + b1) W2^T + b2`, applied to every timestep independently.
pub fn mlp_block(g: &mut Graph, x: &Tensor, params: &MlpParams) -> Result<Tensor> {
    let (xb, lead) = to_batched(g, x, params.in_channels)?;
    let h = affine(g, &xb, &params.w1, &params.b1)?;
    let h = g.tanh(&h)?;
    let y = affine(g, &h, &params.w2, &params.b2)?;
    restore(g, &y, &lead)
}

fn seq_len_of(x: &Tensor, c: usize) -> Result<usize> {
    let s = x.shape();
    match s.len() {
        1 if c == 1 => Ok(s[0]),
        r if r >= 2 && s[r - 1] == c && s[r - 2] > 0 => Ok(s[r - 2]),
        _ => Err(Error::Dimension(format!("cell expects [.., L, {c}] input, got {s:?}"))),
    }
}
