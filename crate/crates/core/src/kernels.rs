//! Raw compute kernels shared by the forward pass and the backward rules.
//!
//! Everything here works on flat row-major slices. Parallel kernels split
//! their output into fixed-size blocks that do not depend on the thread
//! count, so results are bitwise identical for any `TPGN_THREADS`.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{dim_err, Result};

/// Rows handed to one rayon task in the row-parallel GEMM.
const GEMM_ROW_BLOCK: usize = 64;
/// Below this many MACs a GEMM runs on the calling thread.
const PARALLEL_MACS: usize = 1 << 18;
/// Window rows per zero-skipping block in the sliding GEMM.
const WINDOW_BLOCK: usize = 256;
/// Windows at least this wide go through the FFT correlation instead.
const FFT_MIN_WIDTH: usize = 128;

/// A strided row-major matrix view: element (i, j) lives at `i*rs + j*cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }
}

/// `c = a * b + beta * c` for `a: m x k`, `b: k x n`, `c: m x n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    if m * k * n < PARALLEL_MACS || m <= GEMM_ROW_BLOCK {
        gemm_serial(m, k, n, a, b, beta, c);
        return;
    }
    c[..m * n]
        .par_chunks_mut(GEMM_ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let rows = chunk.len() / n;
            let offset = blk * GEMM_ROW_BLOCK * a.rs;
            let sub = View { data: &a.data[offset..], rs: a.rs, cs: a.cs };
            gemm_serial(rows, k, n, sub, b, beta, chunk);
        });
}

fn gemm_serial(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    debug_assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    debug_assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above describe the extents dgemm reads and
    // writes; callers build every view from slices of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window GEMM over `seqs` sequences of `len` rows with `c` channels.
///
/// `out[s, t, :] = w * flatten(a[s, t..t+width, :])` for `t < count`, with
/// `w: d x (width*c)`. Window rows that fall entirely inside a run of leading
/// all-zero rows contribute nothing and are skipped. Wide windows are
/// evaluated as per-channel correlations in the frequency domain.
pub(crate) fn sliding_gemm(
    a: &[f64],
    seqs: usize,
    len: usize,
    c: usize,
    w: &[f64],
    d: usize,
    width: usize,
    count: usize,
    out: &mut [f64],
) {
    if width >= FFT_MIN_WIDTH {
        return sliding_fft(a, seqs, len, c, w, d, width, count, out);
    }
    let wc = width * c;
    let seq_out = count * d;
    out[..seqs * seq_out]
        .par_chunks_mut(seq_out.max(1))
        .enumerate()
        .for_each(|(s, o)| {
            let seq = &a[s * len * c..(s + 1) * len * c];
            let zeros = leading_zero_rows(seq, c);
            o.fill(0.0);
            // Staircase over window-column blocks: block [k0, k1) only
            // touches rows whose window reaches past the zero prefix there.
            let mut k0 = 0;
            while k0 < width {
                let k1 = (k0 + WINDOW_BLOCK).min(width);
                let first = (zeros + 1).saturating_sub(k1).min(count);
                if first < count {
                    let av = View { data: &seq[first * c + k0 * c..], rs: c, cs: 1 };
                    let bv = View { data: &w[k0 * c..], rs: 1, cs: wc };
                    gemm_serial(count - first, (k1 - k0) * c, d, av, bv, 1.0, &mut o[first * d..]);
                }
                k0 = k1;
            }
        });
}

fn sliding_fft(
    a: &[f64],
    seqs: usize,
    len: usize,
    c: usize,
    w: &[f64],
    d: usize,
    width: usize,
    count: usize,
    out: &mut [f64],
) {
    // Circular correlation of length n >= len is exact at the indices read.
    let n = smooth_size(len);
    let wc = width * c;
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let zero = Complex::new(0.0, 0.0);

    // Reversed kernels, one spectrum per (output, channel).
    let mut kernels = vec![zero; d * c * n];
    kernels.par_chunks_mut(n).enumerate().for_each(|(jc, buf)| {
        let (j, ch) = (jc / c, jc % c);
        for m in 0..width {
            buf[m].re = w[j * wc + (width - 1 - m) * c + ch];
        }
        forward.process(buf);
    });
    let scratch_len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());

    let scale = 1.0 / n as f64;
    let seq_out = count * d;
    out[..seqs * seq_out]
        .par_chunks_mut(seq_out.max(1))
        .enumerate()
        .for_each(|(s, o)| {
            let seq = &a[s * len * c..(s + 1) * len * c];
            let mut scratch = vec![zero; scratch_len];
            let mut spectra = vec![zero; c * n];
            for (ch, buf) in spectra.chunks_mut(n).enumerate() {
                for t in 0..len {
                    buf[t].re = seq[t * c + ch];
                }
                forward.process_with_scratch(buf, &mut scratch);
            }
            // Outputs are real, so two of them share one inverse transform.
            let mut acc = vec![zero; n];
            for j in (0..d).step_by(2) {
                acc.fill(zero);
                for ch in 0..c {
                    let x = &spectra[ch * n..(ch + 1) * n];
                    let k0 = &kernels[(j * c + ch) * n..(j * c + ch + 1) * n];
                    if j + 1 < d {
                        let k1 = &kernels[((j + 1) * c + ch) * n..((j + 1) * c + ch + 1) * n];
                        for f in 0..n {
                            acc[f] += x[f] * (k0[f] + Complex::new(-k1[f].im, k1[f].re));
                        }
                    } else {
                        for f in 0..n {
                            acc[f] += x[f] * k0[f];
                        }
                    }
                }
                inverse.process_with_scratch(&mut acc, &mut scratch);
                for t in 0..count {
                    let v = acc[t + width - 1];
                    o[t * d + j] = v.re * scale;
                    if j + 1 < d {
                        o[t * d + j + 1] = v.im * scale;
                    }
                }
            }
        });
}

/// Smallest `2^a 3^b 5^c` not below `n`.
fn smooth_size(n: usize) -> usize {
    (n.max(1)..)
        .find(|&m| {
            let mut r = m;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            r == 1
        })
        .expect("unbounded search")
}

fn leading_zero_rows(seq: &[f64], c: usize) -> usize {
    if c == 0 {
        return 0;
    }
    seq.chunks(c).take_while(|row| row.iter().all(|&v| v == 0.0)).count()
}

/// Weight gradient of [`sliding_gemm`]: `dw += sum_s sum_t dout[s,t]^T window[s,t]`.
pub(crate) fn sliding_gemm_dw(
    a: &[f64],
    seqs: usize,
    len: usize,
    c: usize,
    dout: &[f64],
    d: usize,
    width: usize,
    count: usize,
    dw: &mut [f64],
) {
    let wc = width * c;
    let mut block = vec![0.0; d * wc];
    for s in 0..seqs {
        let seq = &a[s * len * c..(s + 1) * len * c];
        let g = &dout[s * count * d..(s + 1) * count * d];
        let zeros = leading_zero_rows(seq, c);
        let mut t0 = 0;
        while t0 < count {
            let t1 = (t0 + WINDOW_BLOCK).min(count);
            let skip = zeros.saturating_sub(t1 - 1).min(width);
            if skip < width {
                let k0 = skip * c;
                let kw = wc - k0;
                // dout rows t0..t1 transposed: d x (t1-t0)
                let av = View { data: &g[t0 * d..], rs: 1, cs: d };
                let bv = View { data: &seq[t0 * c + k0..], rs: c, cs: 1 };
                gemm_serial(d, t1 - t0, kw, av, bv, 0.0, &mut block[..d * kw]);
                for i in 0..d {
                    let dst = &mut dw[i * wc + k0..(i + 1) * wc];
                    for (x, y) in dst.iter_mut().zip(&block[i * kw..(i + 1) * kw]) {
                        *x += y;
                    }
                }
            }
            t0 = t1;
        }
    }
}

/// Input gradient of [`sliding_gemm`]; accumulates into `da`.
pub(crate) fn sliding_gemm_da(
    seqs: usize,
    len: usize,
    c: usize,
    w: &[f64],
    dout: &[f64],
    d: usize,
    width: usize,
    count: usize,
    da: &mut [f64],
) {
    let wc = width * c;
    let mut dwin = vec![0.0; count * wc];
    for s in 0..seqs {
        let g = &dout[s * count * d..(s + 1) * count * d];
        gemm(
            count,
            d,
            wc,
            View::row_major(g, d),
            View::row_major(w, wc),
            0.0,
            &mut dwin,
        );
        let dst = &mut da[s * len * c..(s + 1) * len * c];
        for t in 0..count {
            for (x, y) in dst[t * c..t * c + wc].iter_mut().zip(&dwin[t * wc..(t + 1) * wc]) {
                *x += y;
            }
        }
    }
}

/// Output shape of trailing-dimension broadcasting, or a dimension error.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(dim_err(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast operand.
pub(crate) fn broadcast_offsets(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let lead = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// How an operand maps onto the broadcast output.
pub(crate) enum Bcast {
    Same,
    /// Operand equals a suffix of the output: index is `i % len`.
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    pub fn new(out: &[usize], shape: &[usize]) -> Self {
        if out == shape {
            Bcast::Same
        } else if shape.len() <= out.len() && out[out.len() - shape.len()..] == *shape {
            Bcast::Suffix(shape.iter().product::<usize>().max(1))
        } else {
            Bcast::General(broadcast_offsets(out, shape))
        }
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::General(off) => off[i],
        }
    }

    /// Sums `grad` (output-shaped) down to the operand's `n` elements.
    pub fn reduce(&self, grad: &[f64], n: usize) -> Vec<f64> {
        match self {
            Bcast::Same => grad.to_vec(),
            Bcast::Suffix(len) => {
                let mut acc = vec![0.0; n];
                for chunk in grad.chunks(*len) {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
                acc
            }
            Bcast::General(off) => {
                let mut acc = vec![0.0; n];
                for (g, &o) in grad.iter().zip(off) {
                    acc[o] += g;
                }
                acc
            }
        }
    }
}

/// `f(a[i], b[i])` over the broadcast output of `n` elements.
pub(crate) fn zip_broadcast<F: Fn(f64, f64) -> f64>(
    n: usize,
    ia: &Bcast,
    da: &[f64],
    ib: &Bcast,
    db: &[f64],
    f: F,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match (ia, ib) {
        (Bcast::Same, Bcast::Same) => out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y))),
        (Bcast::Same, Bcast::Suffix(1)) => out.extend(da.iter().map(|&x| f(x, db[0]))),
        (Bcast::Suffix(1), Bcast::Same) => out.extend(db.iter().map(|&y| f(da[0], y))),
        (Bcast::Same, Bcast::Suffix(len)) => {
            for chunk in da.chunks(*len) {
                out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Suffix(len), Bcast::Same) => {
            for chunk in db.chunks(*len) {
                out.extend(da.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => out.extend((0..n).map(|i| f(da[ia.index(i)], db[ib.index(i)]))),
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `order[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], order: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let src = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
    let step: Vec<usize> = order.iter().map(|&o| src[o]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 || total == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    // Innermost axis runs in a tight loop; the rest advance an odometer.
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < total {
        let mut p = base;
        for _ in 0..inner {
            out.push(data[p]);
            p += inner_step;
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
