//! The Parallel Gated Network cell.
//!
//! For an input sequence `x: [L, c]` the cell computes
//!
//! ```text
//! H     = HIE(Padding(x))                 history summary, [L, d]
//! G     = sigmoid(W_g [x, H] + b_g)       single gate
//! Hhat  = tanh(W_t [x, H] + b_t)          candidate
//! Out   = G * H + (1 - G) * Hhat
//! ```
//!
//! `Padding` prepends `L - 1` zero rows and `HIE` is one linear map applied to
//! every length-`L-1` window of the padded sequence, so `H_t` sees exactly the
//! timesteps strictly before `t`. No step depends on another step's output:
//! all timesteps are computed at once and the longest input-to-output path
//! does not grow with `L`.
//!
//! Weight layout:
//! * `w_h: [d, (L-1)*c]`, window flattened oldest timestep first, channels
//!   within a timestep.
//! * `w_g, w_t: [d, c + d]`, input columns first, then history columns.

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::params::{init_weight, take, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PgnParams {
    pub seq_len: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
    pub w_t: Tensor,
    pub b_t: Tensor,
}

#[derive(Clone, Debug)]
pub struct PgnOutput {
    pub h: Tensor,
    pub gate: Tensor,
    pub candidate: Tensor,
    pub out: Tensor,
}

fn check_dims(seq_len: usize, in_channels: usize, hidden: usize) -> Result<()> {
    if seq_len < 2 {
        return Err(Error::Contract(format!(
            "PGN needs a sequence length of at least 2 (got {seq_len}): the history window would be empty"
        )));
    }
    if in_channels == 0 || hidden == 0 {
        return Err(Error::Contract("PGN channel and hidden sizes must be positive".into()));
    }
    Ok(())
}

impl PgnParams {
    /// Random weights (`Uniform(+-1/sqrt(fan_in))`), zero biases.
    pub fn init<R: Rng + ?Sized>(seq_len: usize, in_channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        check_dims(seq_len, in_channels, hidden)?;
        let win = (seq_len - 1) * in_channels;
        let gate_in = hidden + in_channels;
        Ok(PgnParams {
            seq_len,
            in_channels,
            hidden,
            w_h: init_weight(&[hidden, win], win, rng),
            b_h: Tensor::zeros(&[hidden]),
            w_g: init_weight(&[hidden, gate_in], gate_in, rng),
            b_g: Tensor::zeros(&[hidden]),
            w_t: init_weight(&[hidden, gate_in], gate_in, rng),
            b_t: Tensor::zeros(&[hidden]),
        })
    }

    /// All weights and biases zero.
    pub fn zeros(seq_len: usize, in_channels: usize, hidden: usize) -> Result<Self> {
        check_dims(seq_len, in_channels, hidden)?;
        let win = (seq_len - 1) * in_channels;
        let gate_in = hidden + in_channels;
        Ok(PgnParams {
            seq_len,
            in_channels,
            hidden,
            w_h: Tensor::zeros(&[hidden, win]),
            b_h: Tensor::zeros(&[hidden]),
            w_g: Tensor::zeros(&[hidden, gate_in]),
            b_g: Tensor::zeros(&[hidden]),
            w_t: Tensor::zeros(&[hidden, gate_in]),
            b_t: Tensor::zeros(&[hidden]),
        })
    }
}

impl ParamSet for PgnParams {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("w_h".into(), self.w_h.clone()),
            ("b_h".into(), self.b_h.clone()),
            ("w_g".into(), self.w_g.clone()),
            ("b_g".into(), self.b_g.clone()),
            ("w_t".into(), self.w_t.clone()),
            ("b_t".into(), self.b_t.clone()),
        ]
    }

    fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let d = self.hidden;
        let win = (self.seq_len - 1) * self.in_channels;
        let gate_in = d + self.in_channels;
        let mut it = tensors.into_iter();
        Ok(PgnParams {
            seq_len: self.seq_len,
            in_channels: self.in_channels,
            hidden: d,
            w_h: take(&mut it, "w_h", &[d, win])?,
            b_h: take(&mut it, "b_h", &[d])?,
            w_g: take(&mut it, "w_g", &[d, gate_in])?,
            b_g: take(&mut it, "b_g", &[d])?,
            w_t: take(&mut it, "w_t", &[d, gate_in])?,
            b_t: take(&mut it, "b_t", &[d])?,
        })
    }
}

/// Views `x` as `[.., L, c]`, accepting a bare `[L]` when `c == 1`.
fn as_sequence(g: &mut Graph, x: &Tensor, params: &PgnParams) -> Result<Tensor> {
    let x = if x.rank() == 1 && params.in_channels == 1 {
        g.reshape(x, &[x.len(), 1])?
    } else {
        x.clone()
    };
    let r = x.rank();
    if r < 2 || x.shape()[r - 2] != params.seq_len || x.shape()[r - 1] != params.in_channels {
        return Err(Error::Dimension(format!(
            "PGN expects [.., {}, {}] input, got {:?}",
            params.seq_len,
            params.in_channels,
            x.shape()
        )));
    }
    Ok(x)
}

/// History extraction: `H_t = w_h * flatten(window_t) + b_h` over the
/// zero-padded input, all timesteps in one pass.
pub fn hie_forward(g: &mut Graph, x: &Tensor, params: &PgnParams) -> Result<Tensor> {
    check_dims(params.seq_len, params.in_channels, params.hidden)?;
    let x = as_sequence(g, x, params)?;
    let l = params.seq_len;
    let padded = g.pad_front(&x, l - 1)?;
    let raw = g.sliding_matmul(&padded, &params.w_h, l - 1, l)?;
    g.add(&raw, &params.b_h)
}

pub fn pgn_forward(g: &mut Graph, x: &Tensor, params: &PgnParams) -> Result<PgnOutput> {
    let x = as_sequence(g, x, params)?;
    let h = hie_forward(g, &x, params)?;
    let xh = g.concat(x.rank() - 1, &[x, h.clone()])?;
    let wg_t = g.transpose(&params.w_g)?;
    let wt_t = g.transpose(&params.w_t)?;
    let gate_pre = g.matmul(&xh, &wg_t)?;
    let gate_pre = g.add(&gate_pre, &params.b_g)?;
    let gate = g.sigmoid(&gate_pre)?;
    let cand_pre = g.matmul(&xh, &wt_t)?;
    let cand_pre = g.add(&cand_pre, &params.b_t)?;
    let candidate = g.tanh(&cand_pre)?;
    let keep = g.mul(&gate, &h)?;
    let one_minus = g.sub(&Tensor::scalar(1.0), &gate)?;
    let fresh = g.mul(&one_minus, &candidate)?;
    let out = g.add(&keep, &fresh)?;
    Ok(PgnOutput { h, gate, candidate, out })
}

/// Reference implementation: an explicit loop over sequences, timesteps and
/// units that builds every zero-padded window by hand. Shares no code with
/// [`pgn_forward`].
pub fn pgn_forward_oracle(x: &Tensor, params: &PgnParams) -> Result<PgnOutput> {
    check_dims(params.seq_len, params.in_channels, params.hidden)?;
    let (l, c, d) = (params.seq_len, params.in_channels, params.hidden);
    let lead: Vec<usize> = match x.rank() {
        1 if c == 1 && x.len() == l => Vec::new(),
        r if r >= 2 && x.shape()[r - 2] == l && x.shape()[r - 1] == c => x.shape()[..r - 2].to_vec(),
        _ => {
            return Err(Error::Dimension(format!(
                "PGN expects [.., {l}, {c}] input, got {:?}",
                x.shape()
            )))
        }
    };
    let seqs: usize = lead.iter().product();
    let xs = x.data();
    let (wh, bh) = (params.w_h.data(), params.b_h.data());
    let (wg, bg) = (params.w_g.data(), params.b_g.data());
    let (wt, bt) = (params.w_t.data(), params.b_t.data());
    let win = (l - 1) * c;
    let n = seqs * l * d;
    let (mut hs, mut gs, mut cs, mut os) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for s in 0..seqs {
        let seq = &xs[s * l * c..(s + 1) * l * c];
        for t in 0..l {
            // window_t: timesteps t-(L-1) ..= t-1, zeros before the sequence start
            let mut window = vec![0.0; win];
            for j in 0..l - 1 {
                let src = t as isize - (l as isize - 1) + j as isize;
                if src >= 0 {
                    for ch in 0..c {
                        window[j * c + ch] = seq[src as usize * c + ch];
                    }
                }
            }
            let mut h_t = vec![0.0; d];
            for (i, h) in h_t.iter_mut().enumerate() {
                let mut acc = bh[i];
                for q in 0..win {
                    acc += wh[i * win + q] * window[q];
                }
                *h = acc;
            }
            let mut xh = seq[t * c..(t + 1) * c].to_vec();
            xh.extend_from_slice(&h_t);
            for i in 0..d {
                let mut zg = bg[i];
                let mut zt = bt[i];
                for q in 0..c + d {
                    zg += wg[i * (c + d) + q] * xh[q];
                    zt += wt[i * (c + d) + q] * xh[q];
                }
                let gate = sigmoid(zg);
                let cand = zt.tanh();
                let k = (s * l + t) * d + i;
                hs[k] = h_t[i];
                gs[k] = gate;
                cs[k] = cand;
                os[k] = gate * h_t[i] + (1.0 - gate) * cand;
            }
        }
    }
    let mut shape = lead;
    shape.extend([l, d]);
    Ok(PgnOutput {
        h: Tensor::new(&shape, hs)?,
        gate: Tensor::new(&shape, gs)?,
        candidate: Tensor::new(&shape, cs)?,
        out: Tensor::new(&shape, os)?,
    })
}

/// Longest compute path from the input sequence to `Out` for one forward
/// pass at `params.seq_len`. Data movement ops do not count.
pub fn graph_depth(params: &PgnParams) -> Result<usize> {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::full(&[params.seq_len, params.in_channels], 0.5));
    let out = pgn_forward(&mut g, &x, params)?;
    g.path_depth(&x, &out.out)?
        .ok_or_else(|| Error::Contract("PGN output is not reachable from its input".into()))
}
