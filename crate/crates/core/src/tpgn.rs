//! The two-branch TPGN forecaster.
//!
//! A history of length `L_h` is reshaped into a grid of `R` periods by `P`
//! phases. The long-term branch runs a sequence cell down each phase column
//! (across periods) and compresses the `R` axis with a weight vector. The
//! short-term branch embeds each period row, compresses the rows into one
//! global vector, and repeats it for every phase. A linear head maps the two
//! `d`-dimensional summaries of each phase to `R_f` future periods, and the
//! `[P, R_f]` result is read out period by period, so forecast index
//! `i = r_f * P + p`.
//!
//! Every branch function accepts a single grid `[R, P, c]` or a batch
//! `[B, R, P, c]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{finite_diff_check, Graph};
use crate::baselines::{gru_forward_seq, lstm_forward_seq, mlp_block, GruParams, LstmParams, MlpParams};
use crate::error::{Error, Result};
use crate::params::{init_weight, prefixed, take, ParamSet};
use crate::pgn::{pgn_forward, PgnParams};
use crate::tensor::Tensor;

/// Number of calendar features produced by the data pipeline.
pub const TIME_FEATURES: usize = 4;

/// Standard deviation used in place of a zero one when normalizing.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// One forecasting sample.
#[derive(Clone, Debug)]
pub struct SeriesWindow {
    /// Target values, `[L_h]`.
    pub history: Tensor,
    /// Calendar features, `[L_h, C]`. `C` may be zero.
    pub time_features: Tensor,
    /// Future target values, `[L_f]`.
    pub target: Tensor,
}

impl SeriesWindow {
    pub fn new(history: Tensor, time_features: Tensor, target: Tensor) -> Result<Self> {
        if history.rank() != 1 || target.rank() != 1 || time_features.rank() != 2 {
            return Err(Error::Dimension(format!(
                "window needs history [L_h], time features [L_h, C], target [L_f]; got {:?}, {:?}, {:?}",
                history.shape(),
                time_features.shape(),
                target.shape()
            )));
        }
        if time_features.shape()[0] != history.len() {
            return Err(Error::Dimension(format!(
                "time features cover {} steps, history has {}",
                time_features.shape()[0],
                history.len()
            )));
        }
        Ok(SeriesWindow { history, time_features, target })
    }

    /// A window without calendar features.
    pub fn values_only(history: &[f64], target: &[f64]) -> Self {
        SeriesWindow {
            history: Tensor::vector(history),
            time_features: Tensor::zeros(&[history.len(), 0]),
            target: Tensor::vector(target),
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn forecast_len(&self) -> usize {
        self.target.len()
    }
}

/// Per-window normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
    pub norm: bool,
    /// `sigma` was below [`SIGMA_FLOOR`] and was replaced by it.
    pub clamped: bool,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { mu: 0.0, sigma: 1.0, norm: false, clamped: false }
    }

    /// Mean and population standard deviation of `values`.
    pub fn fit(values: &[f64], norm: bool) -> Self {
        let n = values.len().max(1) as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let raw = var.sqrt();
        let clamped = norm && raw < SIGMA_FLOOR;
        NormStats {
            mu,
            sigma: if clamped { SIGMA_FLOOR } else { raw },
            norm,
            clamped,
        }
    }

    /// The (scale, shift) applied to predictions.
    fn affine(&self) -> (f64, f64) {
        if self.norm {
            (self.sigma, self.mu)
        } else {
            (1.0, 0.0)
        }
    }
}

/// A history reshaped by period: `data[r, p, :]` is timestep `r * P + p`,
/// channel 0 the (normalized) value and the rest calendar features.
#[derive(Clone, Debug)]
pub struct Grid2D {
    pub data: Tensor,
    pub rows: usize,
    pub period: usize,
}

/// What the long-term branch runs down each phase column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LongCell {
    Pgn,
    Gru,
    Lstm,
    Mlp,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TpgnVariant {
    pub long: LongCell,
    pub short: bool,
}

impl TpgnVariant {
    pub const FULL: TpgnVariant = TpgnVariant { long: LongCell::Pgn, short: true };
    pub const LONG_ONLY: TpgnVariant = TpgnVariant { long: LongCell::Pgn, short: false };
    pub const SHORT_ONLY: TpgnVariant = TpgnVariant { long: LongCell::Off, short: true };
    pub const GRU: TpgnVariant = TpgnVariant { long: LongCell::Gru, short: true };
    pub const LSTM: TpgnVariant = TpgnVariant { long: LongCell::Lstm, short: true };
    pub const MLP: TpgnVariant = TpgnVariant { long: LongCell::Mlp, short: true };

    pub fn validate(&self) -> Result<()> {
        if self.long == LongCell::Off && !self.short {
            return Err(Error::Config("variant disables both branches".into()));
        }
        Ok(())
    }
}

impl FromStr for TpgnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Self::FULL,
            "long" => Self::LONG_ONLY,
            "short" => Self::SHORT_ONLY,
            "gru" => Self::GRU,
            "lstm" => Self::LSTM,
            "mlp" => Self::MLP,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?} (expected full, long, short, gru, lstm or mlp)"
                )))
            }
        })
    }
}

impl fmt::Display for TpgnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match (self.long, self.short) {
            (LongCell::Pgn, true) => "full",
            (LongCell::Pgn, false) => "long",
            (LongCell::Off, true) => "short",
            (LongCell::Gru, true) => "gru",
            (LongCell::Lstm, true) => "lstm",
            (LongCell::Mlp, true) => "mlp",
            (LongCell::Gru, false) => "gru-long",
            (LongCell::Lstm, false) => "lstm-long",
            (LongCell::Mlp, false) => "mlp-long",
            (LongCell::Off, false) => "none",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpgnConfig {
    pub history_len: usize,
    pub forecast_len: usize,
    pub period: usize,
    pub hidden: usize,
    /// Calendar feature channels next to the value channel.
    pub time_features: usize,
    pub norm: bool,
    pub variant: TpgnVariant,
    /// One head per phase instead of a head shared by all phases.
    pub per_phase_head: bool,
}

impl Default for TpgnConfig {
    fn default() -> Self {
        TpgnConfig {
            history_len: 168,
            forecast_len: 168,
            period: 24,
            hidden: 128,
            time_features: TIME_FEATURES,
            norm: true,
            variant: TpgnVariant::FULL,
            per_phase_head: false,
        }
    }
}

impl TpgnConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.period;
        if p == 0 || self.hidden == 0 || self.history_len == 0 || self.forecast_len == 0 {
            return Err(Error::Config("lengths, period and hidden size must be positive".into()));
        }
        if self.history_len % p != 0 {
            return Err(Error::Config(format!(
                "history length {} is not a multiple of the period {p}",
                self.history_len
            )));
        }
        if self.forecast_len % p != 0 {
            return Err(Error::Config(format!(
                "forecast length {} is not a multiple of the period {p}",
                self.forecast_len
            )));
        }
        self.variant.validate()?;
        if self.variant.long == LongCell::Pgn && self.rows() < 2 {
            return Err(Error::Config(format!(
                "the PGN long branch needs at least two periods of history (L_h={}, P={p})",
                self.history_len
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.history_len / self.period
    }

    pub fn future_rows(&self) -> usize {
        self.forecast_len / self.period
    }

    pub fn channels(&self) -> usize {
        1 + self.time_features
    }

    /// Flat `key=value` form, in a fixed key order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lh", self.history_len.to_string()),
            ("lf", self.forecast_len.to_string()),
            ("period", self.period.to_string()),
            ("dm", self.hidden.to_string()),
            ("time_features", self.time_features.to_string()),
            ("norm", u8::from(self.norm).to_string()),
            ("variant", self.variant.to_string()),
            ("per_phase_head", u8::from(self.per_phase_head).to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `false` for keys this type
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lh" => self.history_len = parse_value(key, value)?,
            "lf" => self.forecast_len = parse_value(key, value)?,
            "period" => self.period = parse_value(key, value)?,
            "dm" => self.hidden = parse_value(key, value)?,
            "time_features" => self.time_features = parse_value(key, value)?,
            "norm" => self.norm = parse_flag(key, value)?,
            "variant" => self.variant = value.parse()?,
            "per_phase_head" => self.per_phase_head = parse_flag(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Accepts only `0` and `1`.
pub(crate) fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Config(format!("{key} must be 0 or 1, got {other:?}"))),
    }
}

#[derive(Clone, Debug)]
pub enum LongCellParams {
    Pgn(PgnParams),
    Gru(GruParams),
    Lstm(LstmParams),
    Mlp(MlpParams),
}

impl LongCellParams {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        match self {
            LongCellParams::Pgn(p) => prefixed("pgn", p.named_tensors()),
            LongCellParams::Gru(p) => prefixed("gru", p.named_tensors()),
            LongCellParams::Lstm(p) => prefixed("lstm", p.named_tensors()),
            LongCellParams::Mlp(p) => prefixed("mlp", p.named_tensors()),
        }
    }

    fn with_tensors(&self, ts: Vec<Tensor>) -> Result<Self> {
        Ok(match self {
            LongCellParams::Pgn(p) => LongCellParams::Pgn(p.with_tensors(ts)?),
            LongCellParams::Gru(p) => LongCellParams::Gru(p.with_tensors(ts)?),
            LongCellParams::Lstm(p) => LongCellParams::Lstm(p.with_tensors(ts)?),
            LongCellParams::Mlp(p) => LongCellParams::Mlp(p.with_tensors(ts)?),
        })
    }

    /// Runs the cell over `[N, R, c]` sequences.
    fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        match self {
            LongCellParams::Pgn(p) => Ok(pgn_forward(g, x, p)?.out),
            LongCellParams::Gru(p) => gru_forward_seq(g, x, p),
            LongCellParams::Lstm(p) => lstm_forward_seq(g, x, p),
            LongCellParams::Mlp(p) => mlp_block(g, x, p),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LongParams {
    pub cell: LongCellParams,
    /// `[R]`, mixes the per-period cell outputs of one column.
    pub w_long: Tensor,
    /// Scalar.
    pub b_long: Tensor,
}

#[derive(Clone, Debug)]
pub struct ShortParams {
    /// `[d, P * c]`.
    pub w_row: Tensor,
    pub b_row: Tensor,
    /// `[R]`, mixes the row embeddings.
    pub w_col: Tensor,
    /// Scalar.
    pub b_col: Tensor,
}

#[derive(Clone, Debug)]
pub struct TpgnParams {
    pub config: TpgnConfig,
    pub long: Option<LongParams>,
    pub short: Option<ShortParams>,
    /// `[R_f, 2d]`, or `[P, R_f, 2d]` with a per-phase head.
    pub w_head: Tensor,
    /// `[R_f]`, or `[P, R_f]` with a per-phase head.
    pub b_head: Tensor,
}

impl TpgnParams {
    pub fn init<R: Rng + ?Sized>(config: &TpgnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (r, p, c, d, rf) = (config.rows(), config.period, config.channels(), config.hidden, config.future_rows());
        let long = match config.variant.long {
            LongCell::Off => None,
            kind => {
                let cell = match kind {
                    LongCell::Pgn => LongCellParams::Pgn(PgnParams::init(r, c, d, rng)?),
                    LongCell::Gru => LongCellParams::Gru(GruParams::init(c, d, rng)?),
                    LongCell::Lstm => LongCellParams::Lstm(LstmParams::init(c, d, rng)?),
                    LongCell::Mlp => LongCellParams::Mlp(MlpParams::init(c, d, rng)?),
                    LongCell::Off => unreachable!(),
                };
                Some(LongParams {
                    cell,
                    w_long: init_weight(&[r], r, rng),
                    b_long: Tensor::scalar(0.0),
                })
            }
        };
        let short = config.variant.short.then(|| ShortParams {
            w_row: init_weight(&[d, p * c], p * c, rng),
            b_row: Tensor::zeros(&[d]),
            w_col: init_weight(&[r], r, rng),
            b_col: Tensor::scalar(0.0),
        });
        let (w_head, b_head) = if config.per_phase_head {
            (init_weight(&[p, rf, 2 * d], 2 * d, rng), Tensor::zeros(&[p, rf]))
        } else {
            (init_weight(&[rf, 2 * d], 2 * d, rng), Tensor::zeros(&[rf]))
        };
        Ok(TpgnParams { config: config.clone(), long, short, w_head, b_head })
    }

    /// Same structure with every tensor set to zero.
    pub fn zeroed(&self) -> Self {
        let zeros = self.tensors().iter().map(Tensor::zeros_like).collect();
        self.with_tensors(zeros).expect("same shapes")
    }
}

impl ParamSet for TpgnParams {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(l) = &self.long {
            out.extend(prefixed("long", l.cell.named_tensors()));
            out.push(("long.w_long".into(), l.w_long.clone()));
            out.push(("long.b_long".into(), l.b_long.clone()));
        }
        if let Some(s) = &self.short {
            out.push(("short.w_row".into(), s.w_row.clone()));
            out.push(("short.b_row".into(), s.b_row.clone()));
            out.push(("short.w_col".into(), s.w_col.clone()));
            out.push(("short.b_col".into(), s.b_col.clone()));
        }
        out.push(("head.w".into(), self.w_head.clone()));
        out.push(("head.b".into(), self.b_head.clone()));
        out
    }

    fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let long = match &self.long {
            None => None,
            Some(l) => {
                let n = l.cell.named_tensors().len();
                let cell_ts: Vec<Tensor> = it.by_ref().take(n).collect();
                if cell_ts.len() != n {
                    return Err(Error::Contract("missing long-branch cell parameters".into()));
                }
                Some(LongParams {
                    cell: l.cell.with_tensors(cell_ts)?,
                    w_long: take(&mut it, "long.w_long", l.w_long.shape())?,
                    b_long: take(&mut it, "long.b_long", &[])?,
                })
            }
        };
        let short = match &self.short {
            None => None,
            Some(s) => Some(ShortParams {
                w_row: take(&mut it, "short.w_row", s.w_row.shape())?,
                b_row: take(&mut it, "short.b_row", s.b_row.shape())?,
                w_col: take(&mut it, "short.w_col", s.w_col.shape())?,
                b_col: take(&mut it, "short.b_col", &[])?,
            }),
        };
        let w_head = take(&mut it, "head.w", self.w_head.shape())?;
        let b_head = take(&mut it, "head.b", self.b_head.shape())?;
        if it.next().is_some() {
            return Err(Error::Contract("too many tensors for TPGN parameters".into()));
        }
        Ok(TpgnParams { config: self.config.clone(), long, short, w_head, b_head })
    }
}

/// Normalizes the history (when `norm`), appends calendar features and
/// reshapes by `period`.
pub fn prepare_input(window: &SeriesWindow, norm: bool, period: usize) -> Result<(Grid2D, NormStats)> {
    let lh = window.history_len();
    if period == 0 || lh % period != 0 {
        return Err(Error::Config(format!(
            "history length {lh} is not a multiple of the period {period}"
        )));
    }
    if window.time_features.shape()[0] != lh {
        return Err(Error::Dimension("time features do not cover the history".into()));
    }
    let xs = window.history.data();
    let stats = NormStats::fit(xs, norm);
    let ct = window.time_features.shape()[1];
    let c = 1 + ct;
    let tf = window.time_features.data();
    let mut data = Vec::with_capacity(lh * c);
    for t in 0..lh {
        let v = if norm { (xs[t] - stats.mu) / stats.sigma } else { xs[t] };
        data.push(v);
        data.extend_from_slice(&tf[t * ct..(t + 1) * ct]);
    }
    let rows = lh / period;
    Ok((
        Grid2D { data: Tensor::new(&[rows, period, c], data)?, rows, period },
        stats,
    ))
}

/// Grids and statistics for a batch of windows.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// `[B, R, P, c]`.
    pub grid: Tensor,
    pub stats: Vec<NormStats>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

pub fn prepare_batch(windows: &[&SeriesWindow], config: &TpgnConfig) -> Result<PreparedBatch> {
    if windows.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let (r, p, c) = (config.rows(), config.period, config.channels());
    let mut data = Vec::with_capacity(windows.len() * r * p * c);
    let mut stats = Vec::with_capacity(windows.len());
    for w in windows {
        if w.history_len() != config.history_len || w.time_features.shape()[1] != config.time_features {
            return Err(Error::Dimension(format!(
                "window with {} steps and {} features does not fit a model for {} steps and {} features",
                w.history_len(),
                w.time_features.shape()[1],
                config.history_len,
                config.time_features
            )));
        }
        let (grid, s) = prepare_input(w, config.norm, p)?;
        data.extend_from_slice(grid.data.data());
        stats.push(s);
    }
    Ok(PreparedBatch { grid: Tensor::new(&[windows.len(), r, p, c], data)?, stats })
}

/// Views `[R, P, c]` as `[1, R, P, c]`.
fn batched_grid(g: &mut Graph, grid: &Tensor, config: &TpgnConfig) -> Result<(Tensor, bool)> {
    let (r, p, c) = (config.rows(), config.period, config.channels());
    match grid.shape() {
        [gr, gp, gc] if (*gr, *gp, *gc) == (r, p, c) => Ok((g.reshape(grid, &[1, r, p, c])?, true)),
        [_, gr, gp, gc] if (*gr, *gp, *gc) == (r, p, c) => Ok((grid.clone(), false)),
        s => Err(Error::Dimension(format!("grid {s:?} does not match [.., {r}, {p}, {c}]"))),
    }
}

fn unbatch(g: &mut Graph, t: &Tensor, single: bool) -> Result<Tensor> {
    if single {
        g.reshape(t, &t.shape()[1..])
    } else {
        Ok(t.clone())
    }
}

/// `[.., R, d] -> [.., d]` weighted by a length-`R` vector.
fn mix_rows(g: &mut Graph, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let r = w.len();
    let rank = x.rank();
    let mut order: Vec<usize> = (0..rank).collect();
    order.swap(rank - 2, rank - 1);
    let xt = g.permute(x, &order)?;
    let w = g.reshape(w, &[r, 1])?;
    let y = g.matmul(&xt, &w)?;
    let shape = y.shape()[..rank - 1].to_vec();
    let y = g.reshape(&y, &shape)?;
    g.add(&y, b)
}

/// Long-term branch: `[.., R, P, c] -> [.., P, d]`.
pub fn long_branch(g: &mut Graph, grid: &Tensor, params: &TpgnParams) -> Result<Tensor> {
    let cfg = &params.config;
    let long = params
        .long
        .as_ref()
        .ok_or_else(|| Error::Contract("long branch is disabled in this model".into()))?;
    let (x, single) = batched_grid(g, grid, cfg)?;
    let (b, r, p, c, d) = (x.shape()[0], cfg.rows(), cfg.period, cfg.channels(), cfg.hidden);
    let cols = g.permute(&x, &[0, 2, 1, 3])?;
    let cols = g.reshape(&cols, &[b * p, r, c])?;
    let seq = long.cell.forward(g, &cols)?;
    let h = mix_rows(g, &seq, &long.w_long, &long.b_long)?;
    let h = g.reshape(&h, &[b, p, d])?;
    unbatch(g, &h, single)
}

/// Short-term branch: `[.., R, P, c] -> [.., P, d]`, the same global vector
/// in every phase row.
pub fn short_branch(g: &mut Graph, grid: &Tensor, params: &TpgnParams) -> Result<Tensor> {
    let cfg = &params.config;
    let short = params
        .short
        .as_ref()
        .ok_or_else(|| Error::Contract("short branch is disabled in this model".into()))?;
    let (x, single) = batched_grid(g, grid, cfg)?;
    let (b, r, p, c, d) = (x.shape()[0], cfg.rows(), cfg.period, cfg.channels(), cfg.hidden);
    let rows = g.reshape(&x, &[b, r, p * c])?;
    let w_row_t = g.transpose(&short.w_row)?;
    let emb = g.matmul(&rows, &w_row_t)?;
    let emb = g.add(&emb, &short.b_row)?;
    let global = mix_rows(g, &emb, &short.w_col, &short.b_col)?;
    let global = g.reshape(&global, &[b, 1, d])?;
    let repeated = g.concat(1, &vec![global; p])?;
    unbatch(g, &repeated, single)
}

/// Maps per-phase summaries `[.., P, d]` to a forecast `[.., L_f]` and undoes
/// the normalization. `stats` has one entry per batch row (one for an
/// unbatched call).
pub fn forecast_head(
    g: &mut Graph,
    h_long: &Tensor,
    h_global: &Tensor,
    params: &TpgnParams,
    stats: &[NormStats],
) -> Result<Tensor> {
    let cfg = &params.config;
    let (p, d, rf) = (cfg.period, cfg.hidden, cfg.future_rows());
    if rf * p != cfg.forecast_len {
        return Err(Error::Config("forecast length is not R_f * P".into()));
    }
    let single = h_long.rank() == 2;
    let b = if single { 1 } else { h_long.shape()[0] };
    if h_long.shape() != h_global.shape() || h_long.shape()[h_long.rank() - 2..] != [p, d] {
        return Err(Error::Dimension(format!(
            "head inputs {:?} and {:?} must both be [.., {p}, {d}]",
            h_long.shape(),
            h_global.shape()
        )));
    }
    if stats.len() != b {
        return Err(Error::Dimension(format!("{} normalization entries for a batch of {b}", stats.len())));
    }
    let hl = g.reshape(h_long, &[b, p, d])?;
    let hg = g.reshape(h_global, &[b, p, d])?;
    let joint = g.concat(2, &[hl, hg])?;
    let by_period = if cfg.per_phase_head {
        // [P, B, 2d] x [P, 2d, R_f] -> [P, B, R_f]
        let jp = g.permute(&joint, &[1, 0, 2])?;
        let wt = g.permute(&params.w_head, &[0, 2, 1])?;
        let y = g.matmul(&jp, &wt)?;
        let bias = g.reshape(&params.b_head, &[p, 1, rf])?;
        let y = g.add(&y, &bias)?;
        g.permute(&y, &[1, 2, 0])?
    } else {
        let wt = g.transpose(&params.w_head)?;
        let y = g.matmul(&joint, &wt)?;
        let y = g.add(&y, &params.b_head)?;
        g.permute(&y, &[0, 2, 1])?
    };
    let flat = g.reshape(&by_period, &[b, rf * p])?;
    let out = if stats.iter().any(|s| s.norm) {
        let (scale, shift): (Vec<f64>, Vec<f64>) = stats.iter().map(NormStats::affine).unzip();
        let scale = Tensor::new(&[b, 1], scale)?;
        let shift = Tensor::new(&[b, 1], shift)?;
        let y = g.mul(&flat, &scale)?;
        g.add(&y, &shift)?
    } else {
        flat
    };
    if single {
        g.reshape(&out, &[rf * p])
    } else {
        Ok(out)
    }
}

/// Forecasts `[B, L_f]` for a prepared batch.
pub fn tpgn_forward_batch(g: &mut Graph, batch: &PreparedBatch, params: &TpgnParams) -> Result<Tensor> {
    let cfg = &params.config;
    let b = batch.len();
    let zeros = || Tensor::zeros(&[b, cfg.period, cfg.hidden]);
    let h_long = match params.long {
        Some(_) => long_branch(g, &batch.grid, params)?,
        None => zeros(),
    };
    let h_global = match params.short {
        Some(_) => short_branch(g, &batch.grid, params)?,
        None => zeros(),
    };
    forecast_head(g, &h_long, &h_global, params, &batch.stats)
}

/// Forecasts `[L_f]` for one window.
pub fn tpgn_forward(g: &mut Graph, window: &SeriesWindow, params: &TpgnParams) -> Result<Tensor> {
    let batch = prepare_batch(&[window], &params.config)?;
    let y = tpgn_forward_batch(g, &batch, params)?;
    g.reshape(&y, &[params.config.forecast_len])
}

/// Longest compute path from the input grid to the forecast. Data movement
/// ops do not count.
pub fn graph_depth(params: &TpgnParams) -> Result<usize> {
    let cfg = &params.config;
    let mut g = Graph::new();
    let grid = g.leaf(&Tensor::full(&[1, cfg.rows(), cfg.period, cfg.channels()], 0.5));
    let batch = PreparedBatch { grid: grid.clone(), stats: vec![NormStats::identity()] };
    let y = tpgn_forward_batch(&mut g, &batch, params)?;
    g.path_depth(&grid, &y)?
        .ok_or_else(|| Error::Contract("forecast is not reachable from the input grid".into()))
}

/// Central-difference check of the squared forecast error with respect to
/// each parameter tensor. Returns the worst relative error per tensor.
pub fn gradient_check(params: &TpgnParams, window: &SeriesWindow, step: f64) -> Result<Vec<(String, f64)>> {
    let named = params.named_tensors();
    let mut out = Vec::with_capacity(named.len());
    for (i, (name, t)) in named.iter().enumerate() {
        let err = finite_diff_check(
            |g, probe| {
                let mut ts = params.tensors();
                ts[i] = probe.clone();
                let q = params.with_tensors(ts)?;
                let y = tpgn_forward(g, window, &q)?;
                let diff = g.sub(&y, &window.target)?;
                let sq = g.mul(&diff, &diff)?;
                g.mean_all(&sq)
            },
            t,
            step,
        )?;
        out.push((name.clone(), err));
    }
    Ok(out)
}

/// Multiply-accumulate counts of one forward pass over a single window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub long: u64,
    pub short: u64,
    pub head: u64,
    pub total: u64,
    /// Cost of applying each layer once at one position: the history
    /// extraction for one timestep, one gate evaluation, one column mix, one
    /// row embedding, the global mix and one head application.
    pub per_layer: u64,
}

pub fn param_count(params: &TpgnParams) -> usize {
    params.num_params()
}

/// Exact MAC counts matching what the kernels execute for one window.
pub fn flop_count(params: &TpgnParams) -> FlopCount {
    let cfg = &params.config;
    let (r, p, c, d, rf) = (
        cfg.rows() as u64,
        cfg.period as u64,
        cfg.channels() as u64,
        cfg.hidden as u64,
        cfg.future_rows() as u64,
    );
    let mut f = FlopCount::default();
    if let Some(long) = &params.long {
        let (cell_total, cell_layer) = match &long.cell {
            LongCellParams::Pgn(_) => {
                let hie = (r - 1) * c * d;
                let gates = 2 * (c + d) * d;
                (r * (hie + gates), hie + gates)
            }
            LongCellParams::Gru(_) => (r * 3 * d * (c + d), 3 * d * (c + d)),
            LongCellParams::Lstm(_) => (r * 4 * d * (c + d), 4 * d * (c + d)),
            LongCellParams::Mlp(_) => (r * (c * d + d * d), c * d + d * d),
        };
        f.long = p * (cell_total + r * d);
        f.per_layer += cell_layer + r * d;
    }
    if params.short.is_some() {
        f.short = r * p * c * d + r * d;
        f.per_layer += p * c * d + r * d;
    }
    f.head = p * rf * 2 * d;
    f.per_layer += rf * 2 * d;
    f.total = f.long + f.short + f.head;
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgn::pgn_forward_oracle;
    use crate::tensor::{mac_count, reset_mac_count};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config() -> TpgnConfig {
        TpgnConfig {
            history_len: 8,
            forecast_len: 8,
            period: 4,
            hidden: 2,
            time_features: 1,
            norm: true,
            variant: TpgnVariant::FULL,
            per_phase_head: false,
        }
    }

    fn random_window(cfg: &TpgnConfig, seed: u64) -> SeriesWindow {
        let mut r = rng(seed);
        SeriesWindow::new(
            Tensor::uniform(&[cfg.history_len], 2.0, &mut r),
            Tensor::uniform(&[cfg.history_len, cfg.time_features], 0.5, &mut r),
            Tensor::uniform(&[cfg.forecast_len], 2.0, &mut r),
        )
        .unwrap()
    }

    /// Randomizes every tensor, including biases that start at zero.
    fn randomized(params: &TpgnParams, seed: u64) -> TpgnParams {
        let mut r = rng(seed);
        let ts = params.tensors().iter().map(|t| Tensor::uniform(t.shape(), 0.7, &mut r)).collect();
        params.with_tensors(ts).unwrap()
    }

    #[test]
    fn reshape_by_period() {
        let w = SeriesWindow::values_only(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0]);
        let (grid, stats) = prepare_input(&w, false, 2).unwrap();
        assert_eq!(grid.data.shape(), &[2, 2, 1]);
        assert_eq!(grid.data.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!((grid.rows, grid.period), (2, 2));
        assert!(!stats.norm);
    }

    #[test]
    fn normalization_by_hand() {
        let w = SeriesWindow::values_only(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]);
        let (grid, stats) = prepare_input(&w, true, 3).unwrap();
        assert_eq!(stats.mu, 2.0);
        assert!((stats.sigma * stats.sigma - 2.0 / 3.0).abs() < 1e-15);
        let s = 1.5f64.sqrt();
        let expect = [-s, 0.0, s];
        for (a, b) in grid.data.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let v = grid.data.data();
        let mean = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_history_uses_sigma_floor() {
        let w = SeriesWindow::values_only(&[3.0; 4], &[0.0; 4]);
        let (grid, stats) = prepare_input(&w, true, 2).unwrap();
        assert!(stats.clamped);
        assert_eq!(stats.sigma, SIGMA_FLOOR);
        assert!(grid.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_history_is_config_error() {
        let w = SeriesWindow::values_only(&[1.0; 5], &[0.0; 4]);
        assert!(matches!(prepare_input(&w, false, 2), Err(Error::Config(_))));
        let cfg = TpgnConfig { history_len: 10, ..tiny_config() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TpgnConfig { variant: TpgnVariant { long: LongCell::Off, short: false }, ..tiny_config() };
        assert!(matches!(TpgnParams::init(&cfg, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["full", "long", "short", "gru", "lstm", "mlp"] {
            assert_eq!(name.parse::<TpgnVariant>().unwrap().to_string(), name);
        }
        assert!("both".parse::<TpgnVariant>().is_err());
    }

    #[test]
    fn long_branch_zero_grid_gives_bias() {
        let cfg = TpgnConfig { norm: false, ..tiny_config() };
        let mut p = TpgnParams::init(&cfg, &mut rng(1)).unwrap();
        p.long.as_mut().unwrap().b_long = Tensor::scalar(0.75);
        let h = long_branch(&mut Graph::new(), &Tensor::zeros(&[2, 4, 2]), &p).unwrap();
        assert_eq!(h.shape(), &[4, 2]);
        assert!(h.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn long_branch_matches_composed_oracle() {
        // R=2, P=1, d=1
        let cfg = TpgnConfig {
            history_len: 2,
            forecast_len: 1,
            period: 1,
            hidden: 1,
            time_features: 0,
            ..tiny_config()
        };
        let p = randomized(&TpgnParams::init(&cfg, &mut rng(2)).unwrap(), 3);
        let grid = Tensor::new(&[2, 1, 1], vec![0.4, -1.2]).unwrap();
        let h = long_branch(&mut Graph::new(), &grid, &p).unwrap();
        let long = p.long.as_ref().unwrap();
        let LongCellParams::Pgn(cell) = &long.cell else { panic!() };
        let seq = pgn_forward_oracle(&Tensor::new(&[2, 1], vec![0.4, -1.2]).unwrap(), cell).unwrap();
        let w = long.w_long.data();
        let expect = w[0] * seq.out.data()[0] + w[1] * seq.out.data()[1] + long.b_long.item();
        assert!((h.item() - expect).abs() < 1e-14);
    }

    #[test]
    fn long_branch_columns_are_independent() {
        let cfg = TpgnConfig { hidden: 3, ..tiny_config() };
        let p = randomized(&TpgnParams::init(&cfg, &mut rng(4)).unwrap(), 5);
        let grid = Tensor::uniform(&[2, 4, 2], 1.0, &mut rng(6));
        let mut g = Graph::new();
        let base = long_branch(&mut g, &grid, &p).unwrap();
        // swap columns 1 and 3
        let mut v = grid.to_vec();
        for r in 0..2 {
            for ch in 0..2 {
                v.swap((r * 4 + 1) * 2 + ch, (r * 4 + 3) * 2 + ch);
            }
        }
        let swapped = long_branch(&mut g, &Tensor::new(&[2, 4, 2], v).unwrap(), &p).unwrap();
        let row = |t: &Tensor, i: usize| t.data()[i * 3..i * 3 + 3].to_vec();
        assert_eq!(row(&swapped, 1), row(&base, 3));
        assert_eq!(row(&swapped, 3), row(&base, 1));
        assert_eq!(row(&swapped, 0), row(&base, 0));
        // zeroing column 2 leaves the others alone
        let mut z = grid.to_vec();
        for r in 0..2 {
            z[(r * 4 + 2) * 2] = 0.0;
            z[(r * 4 + 2) * 2 + 1] = 0.0;
        }
        let zeroed = long_branch(&mut g, &Tensor::new(&[2, 4, 2], z).unwrap(), &p).unwrap();
        for q in [0, 1, 3] {
            assert_eq!(row(&zeroed, q), row(&base, q));
        }
    }

    #[test]
    fn short_branch_zero_case() {
        let cfg = tiny_config();
        let p = TpgnParams::init(&cfg, &mut rng(7)).unwrap();
        let h = short_branch(&mut Graph::new(), &Tensor::zeros(&[2, 4, 2]), &p).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_branch_single_row() {
        let cfg = TpgnConfig {
            history_len: 4,
            forecast_len: 4,
            variant: TpgnVariant::SHORT_ONLY,
            ..tiny_config()
        };
        let mut p = randomized(&TpgnParams::init(&cfg, &mut rng(8)).unwrap(), 9);
        let s = p.short.as_mut().unwrap();
        s.w_col = Tensor::vector(&[0.3]);
        s.b_col = Tensor::scalar(-0.2);
        let grid = Tensor::uniform(&[1, 4, 2], 1.0, &mut rng(10));
        let h = short_branch(&mut Graph::new(), &grid, &p).unwrap();
        let s = p.short.as_ref().unwrap();
        for i in 0..2 {
            let row: f64 = (0..8).map(|q| s.w_row.at(&[i, q]) * grid.data()[q]).sum::<f64>() + s.b_row.data()[i];
            for ph in 0..4 {
                assert!((h.at(&[ph, i]) - (0.3 * row - 0.2)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn short_branch_two_by_two_oracle() {
        let cfg = TpgnConfig {
            history_len: 4,
            forecast_len: 2,
            period: 2,
            hidden: 1,
            time_features: 0,
            ..tiny_config()
        };
        let mut p = TpgnParams::init(&cfg, &mut rng(11)).unwrap();
        p.short = Some(ShortParams {
            w_row: Tensor::new(&[1, 2], vec![2.0, -1.0]).unwrap(),
            b_row: Tensor::vector(&[0.5]),
            w_col: Tensor::vector(&[1.0, 3.0]),
            b_col: Tensor::scalar(0.25),
        });
        let grid = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = short_branch(&mut Graph::new(), &grid, &p).unwrap();
        // rows: 2*1-2+0.5 = 0.5, 2*3-4+0.5 = 2.5; global = 0.5 + 7.5 + 0.25
        assert_eq!(h.data(), &[8.25, 8.25]);
    }

    #[test]
    fn constant_head_tiles_bias() {
        let cfg = TpgnConfig { norm: false, ..tiny_config() };
        let mut p = TpgnParams::init(&cfg, &mut rng(12)).unwrap();
        p.w_head = Tensor::zeros(&[2, 4]);
        p.b_head = Tensor::vector(&[1.5, -2.0]);
        let h = Tensor::uniform(&[4, 2], 1.0, &mut rng(13));
        let y = forecast_head(&mut Graph::new(), &h, &h, &p, &[NormStats::identity()]).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn head_reads_out_period_major() {
        // P=2, R_f=2, d=1: pick y2d[p, r_f] = [[a, b], [c, d]] via the inputs
        let cfg = TpgnConfig {
            history_len: 4,
            forecast_len: 4,
            period: 2,
            hidden: 1,
            time_features: 0,
            norm: false,
            ..tiny_config()
        };
        let mut p = TpgnParams::init(&cfg, &mut rng(14)).unwrap();
        // r_f = 0 reads h_long, r_f = 1 reads h_global
        p.w_head = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p.b_head = Tensor::zeros(&[2]);
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let hl = Tensor::new(&[2, 1], vec![a, c]).unwrap();
        let hg = Tensor::new(&[2, 1], vec![b, d]).unwrap();
        let y = forecast_head(&mut Graph::new(), &hl, &hg, &p, &[NormStats::identity()]).unwrap();
        assert_eq!(y.data(), &[a, c, b, d]);
    }

    #[test]
    fn head_delta_probe() {
        let cfg = TpgnConfig { norm: false, forecast_len: 12, ..tiny_config() };
        let mut p = TpgnParams::init(&cfg, &mut rng(15)).unwrap();
        let (pp, rf) = (4, 3);
        for target_rf in 0..rf {
            for target_p in 0..pp {
                // only h_long[target_p, 0] is nonzero and only head row target_rf reads it
                let mut w = vec![0.0; rf * 4];
                w[target_rf * 4] = 1.0;
                p.w_head = Tensor::new(&[rf, 4], w).unwrap();
                p.b_head = Tensor::zeros(&[rf]);
                let mut hl = vec![0.0; pp * 2];
                hl[target_p * 2] = 1.0;
                let hl = Tensor::new(&[pp, 2], hl).unwrap();
                let y = forecast_head(&mut Graph::new(), &hl, &Tensor::zeros(&[pp, 2]), &p, &[NormStats::identity()])
                    .unwrap();
                for (i, &v) in y.data().iter().enumerate() {
                    assert_eq!(v, if i == target_rf * pp + target_p { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn head_denormalizes() {
        let p = TpgnParams::init(&tiny_config(), &mut rng(16)).unwrap();
        let h = Tensor::uniform(&[4, 2], 1.0, &mut rng(17));
        let mut g = Graph::new();
        let raw = forecast_head(&mut g, &h, &h, &p, &[NormStats::identity()]).unwrap();
        let stats = NormStats { mu: 10.0, sigma: 2.0, norm: true, clamped: false };
        let y = forecast_head(&mut g, &h, &h, &p, &[stats]).unwrap();
        for (a, b) in y.data().iter().zip(raw.data()) {
            assert!((a - (2.0 * b + 10.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_model_predicts_head_bias() {
        let cfg = TpgnConfig { norm: false, ..tiny_config() };
        let mut p = TpgnParams::init(&cfg, &mut rng(18)).unwrap().zeroed();
        p.b_head = Tensor::vector(&[0.5, 1.0]);
        let w = random_window(&cfg, 19);
        let y = tpgn_forward(&mut Graph::new(), &w, &p).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0]);
        let mse: f64 = y.data().iter().zip(w.target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 8.0;
        let by_hand: f64 = w
            .target
            .data()
            .iter()
            .enumerate()
            .map(|(i, t)| (t - if i < 4 { 0.5 } else { 1.0 }).powi(2))
            .sum::<f64>()
            / 8.0;
        assert!((mse - by_hand).abs() < 1e-15);
    }

    #[test]
    fn disabled_long_branch_is_zero_summary() {
        let full = randomized(&TpgnParams::init(&tiny_config(), &mut rng(20)).unwrap(), 21);
        let short_only = TpgnParams {
            config: TpgnConfig { variant: TpgnVariant::SHORT_ONLY, ..full.config.clone() },
            long: None,
            ..full.clone()
        };
        let w = random_window(&full.config, 22);
        let mut g = Graph::new();
        let y = tpgn_forward(&mut g, &w, &short_only).unwrap();
        let batch = prepare_batch(&[&w], &full.config).unwrap();
        let hg = short_branch(&mut g, &batch.grid, &full).unwrap();
        let expect = forecast_head(&mut g, &Tensor::zeros(&[1, 4, 2]), &hg, &full, &batch.stats).unwrap();
        assert!(y.max_abs_diff(&Tensor::new(&[8], expect.to_vec()).unwrap()).unwrap() == 0.0);
    }

    /// Plain-loop evaluation of the whole model for one window.
    fn oracle_forward(w: &SeriesWindow, p: &TpgnParams) -> Vec<f64> {
        let cfg = &p.config;
        let (r, pp, c, d, rf) = (cfg.rows(), cfg.period, cfg.channels(), cfg.hidden, cfg.future_rows());
        let (grid, stats) = prepare_input(w, cfg.norm, pp).unwrap();
        let gd = grid.data.data();
        let at = |ri: usize, pi: usize, ch: usize| gd[(ri * pp + pi) * c + ch];
        let long = p.long.as_ref().unwrap();
        let LongCellParams::Pgn(cell) = &long.cell else { panic!() };
        let mut h_long = vec![0.0; pp * d];
        for pi in 0..pp {
            let col: Vec<f64> = (0..r).flat_map(|ri| (0..c).map(move |ch| (ri, ch))).map(|(ri, ch)| at(ri, pi, ch)).collect();
            let seq = pgn_forward_oracle(&Tensor::new(&[r, c], col).unwrap(), cell).unwrap();
            for k in 0..d {
                h_long[pi * d + k] =
                    (0..r).map(|ri| long.w_long.data()[ri] * seq.out.at(&[ri, k])).sum::<f64>() + long.b_long.item();
            }
        }
        let s = p.short.as_ref().unwrap();
        let mut global = vec![0.0; d];
        for k in 0..d {
            let mut acc = s.b_col.item();
            for ri in 0..r {
                let mut e = s.b_row.data()[k];
                for pi in 0..pp {
                    for ch in 0..c {
                        e += s.w_row.at(&[k, pi * c + ch]) * at(ri, pi, ch);
                    }
                }
                acc += s.w_col.data()[ri] * e;
            }
            global[k] = acc;
        }
        let mut out = vec![0.0; rf * pp];
        for pi in 0..pp {
            for f in 0..rf {
                let mut y = p.b_head.data()[f];
                for k in 0..d {
                    y += p.w_head.at(&[f, k]) * h_long[pi * d + k] + p.w_head.at(&[f, d + k]) * global[k];
                }
                out[f * pp + pi] = if stats.norm { y * stats.sigma + stats.mu } else { y };
            }
        }
        out
    }

    #[test]
    fn full_forward_matches_oracle() {
        let cfg = tiny_config();
        let p = randomized(&TpgnParams::init(&cfg, &mut rng(23)).unwrap(), 24);
        let w = random_window(&cfg, 25);
        let y = tpgn_forward(&mut Graph::new(), &w, &p).unwrap();
        let expect = oracle_forward(&w, &p);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_rows_match_single_windows() {
        let cfg = tiny_config();
        let p = randomized(&TpgnParams::init(&cfg, &mut rng(26)).unwrap(), 27);
        let ws: Vec<SeriesWindow> = (0..3).map(|i| random_window(&cfg, 30 + i)).collect();
        let refs: Vec<&SeriesWindow> = ws.iter().collect();
        let mut g = Graph::new();
        let batch = prepare_batch(&refs, &cfg).unwrap();
        let y = tpgn_forward_batch(&mut g, &batch, &p).unwrap();
        for (i, w) in ws.iter().enumerate() {
            let one = tpgn_forward(&mut g, w, &p).unwrap();
            assert!(Tensor::vector(&y.data()[i * 8..(i + 1) * 8]).max_abs_diff(&one).unwrap() < 1e-13);
        }
    }

    #[test]
    fn affine_input_gives_affine_forecast() {
        let cfg = TpgnConfig { time_features: 0, ..tiny_config() };
        let p = randomized(&TpgnParams::init(&cfg, &mut rng(40)).unwrap(), 41);
        let base: Vec<f64> = Tensor::uniform(&[8], 1.0, &mut rng(42)).to_vec();
        let (a, b) = (3.5, -7.0);
        let shifted: Vec<f64> = base.iter().map(|v| a * v + b).collect();
        let mut g = Graph::new();
        let y0 = tpgn_forward(&mut g, &SeriesWindow::values_only(&base, &[0.0; 8]), &p).unwrap();
        let y1 = tpgn_forward(&mut g, &SeriesWindow::values_only(&shifted, &[0.0; 8]), &p).unwrap();
        for (u, v) in y0.data().iter().zip(y1.data()) {
            assert!((v - (a * u + b)).abs() < 1e-9);
        }
    }

    #[test]
    fn every_variant_keeps_output_shape() {
        for v in ["full", "long", "short", "gru", "lstm", "mlp"] {
            for per_phase in [false, true] {
                let cfg = TpgnConfig {
                    variant: v.parse().unwrap(),
                    per_phase_head: per_phase,
                    forecast_len: 12,
                    ..tiny_config()
                };
                let p = TpgnParams::init(&cfg, &mut rng(50)).unwrap();
                let y = tpgn_forward(&mut Graph::new(), &random_window(&cfg, 51), &p).unwrap();
                assert_eq!(y.shape(), &[12], "{v}");
            }
        }
    }

    #[test]
    fn per_phase_head_matches_loop() {
        let cfg = TpgnConfig { per_phase_head: true, norm: false, ..tiny_config() };
        let p = randomized(&TpgnParams::init(&cfg, &mut rng(52)).unwrap(), 53);
        let hl = Tensor::uniform(&[4, 2], 1.0, &mut rng(54));
        let hg = Tensor::uniform(&[4, 2], 1.0, &mut rng(55));
        let y = forecast_head(&mut Graph::new(), &hl, &hg, &p, &[NormStats::identity()]).unwrap();
        for pi in 0..4 {
            for f in 0..2 {
                let mut e = p.b_head.at(&[pi, f]);
                for k in 0..2 {
                    e += p.w_head.at(&[pi, f, k]) * hl.at(&[pi, k]) + p.w_head.at(&[pi, f, 2 + k]) * hg.at(&[pi, k]);
                }
                assert!((y.data()[f * 4 + pi] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_of_every_parameter() {
        for variant in [TpgnVariant::FULL, TpgnVariant::GRU] {
            let cfg = TpgnConfig { variant, ..tiny_config() };
            let p = randomized(&TpgnParams::init(&cfg, &mut rng(60)).unwrap(), 61);
            let w = random_window(&cfg, 62);
            let report = gradient_check(&p, &w, 1e-5).unwrap();
            assert_eq!(report.len(), p.named_tensors().len());
            for (name, err) in report {
                assert!(err < 1e-5, "{variant}/{name}: {err}");
            }
        }
    }

    #[test]
    fn flop_count_matches_executed_macs() {
        for v in ["full", "long", "short", "gru", "lstm", "mlp"] {
            let cfg = TpgnConfig { variant: v.parse().unwrap(), history_len: 12, forecast_len: 8, ..tiny_config() };
            let p = TpgnParams::init(&cfg, &mut rng(70)).unwrap();
            let w = random_window(&cfg, 71);
            reset_mac_count();
            tpgn_forward(&mut Graph::new(), &w, &p).unwrap();
            assert_eq!(mac_count(), flop_count(&p).total, "{v}");
        }
    }

    #[test]
    fn depth_does_not_grow_with_history() {
        let depth = |lh: usize| {
            let cfg = TpgnConfig { history_len: lh, forecast_len: 8, ..tiny_config() };
            graph_depth(&TpgnParams::init(&cfg, &mut rng(80)).unwrap()).unwrap()
        };
        assert_eq!(depth(8), depth(64));
        assert_eq!(depth(8), depth(512));
    }

    #[test]
    fn flop_count_scaling() {
        let cfg = |lh: usize, period: usize| TpgnConfig {
            history_len: lh,
            forecast_len: lh,
            period,
            hidden: 8,
            time_features: 4,
            ..tiny_config()
        };
        let count = |c: &TpgnConfig| flop_count(&TpgnParams::init(c, &mut rng(72)).unwrap());
        // HIE for one timestep
        let (r, c, d) = (6u64, 5u64, 8u64);
        let base = count(&cfg(24, 4));
        let gates = 2 * (c + d) * d;
        assert_eq!(
            base.long,
            4 * (r * ((r - 1) * c * d + gates) + r * d)
        );
        // doubling P with R fixed leaves the per-column long cost unchanged
        let wide = count(&cfg(48, 8));
        assert_eq!(wide.long / 8, base.long / 4);
        // quadrupling L with R = P doubles each layer width
        let small = count(&cfg(16, 4));
        let big = count(&cfg(64, 8));
        let hie = |r: u64| (r - 1) * c * d;
        assert_eq!(small.per_layer - hie(4), 2 * (c + d) * d + 4 * d + 4 * c * d + 4 * d + 4 * 2 * d);
        assert_eq!(big.per_layer - hie(8), 2 * (c + d) * d + 8 * d + 8 * c * d + 8 * d + 8 * 2 * d);
    }
}
