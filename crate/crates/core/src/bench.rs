//! Timing, memory and cost measurements for forecasters and raw cells.
//!
//! Memory is the peak of the tensor allocator's live byte counter during a
//! repeat, relative to the bytes live when it started. The counter is
//! process-wide, so concurrent work in the same process inflates it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::baselines::{gru_forward_seq, lstm_forward_seq, GruParams, LstmParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::pgn::{pgn_forward, PgnParams};
use crate::tensor::{live_bytes, mac_count, peak_bytes, reset_mac_count, reset_peak_bytes, Tensor};
use crate::tpgn::{tpgn_forward_batch, NormStats, PreparedBatch, TpgnConfig, TpgnParams, TpgnVariant, TIME_FEATURES};

pub const CSV_HEADER: &str = "model,L_h,L_f,d_m,batch,time_ms_median,peak_bytes,macs,graph_depth";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Tpgn,
    /// A single PGN cell over the raw sequence.
    PgnRaw,
    GruSeq,
    LstmSeq,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Tpgn => "TPGN",
            ModelKind::PgnRaw => "PGN-raw",
            ModelKind::GruSeq => "GRU-seq",
            ModelKind::LstmSeq => "LSTM-seq",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tpgn" => Ok(ModelKind::Tpgn),
            "pgn-raw" | "pgn" => Ok(ModelKind::PgnRaw),
            "gru-seq" | "gru" => Ok(ModelKind::GruSeq),
            "lstm-seq" | "lstm" => Ok(ModelKind::LstmSeq),
            other => Err(Error::Config(format!("unknown bench model {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Forward,
    /// Forward plus backward of a scalar loss.
    TrainStep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchScenario {
    pub model: ModelKind,
    pub history_len: usize,
    pub forecast_len: usize,
    pub hidden: usize,
    pub batch: usize,
    /// Period used by TPGN; ignored by the raw cells.
    pub period: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub mode: BenchMode,
}

impl BenchScenario {
    pub fn new(model: ModelKind, history_len: usize, forecast_len: usize) -> Self {
        BenchScenario {
            model,
            history_len,
            forecast_len,
            hidden: 128,
            batch: 32,
            period: 24,
            repeats: 3,
            warmup: 1,
            mode: BenchMode::TrainStep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 || self.warmup < 1 {
            return Err(Error::Config("benchmarks need at least 3 repeats and 1 warmup".into()));
        }
        if self.batch == 0 || self.hidden == 0 || self.history_len < 2 {
            return Err(Error::Config("batch, hidden size and history length must be positive".into()));
        }
        if self.model == ModelKind::Tpgn {
            self.tpgn_config().validate()?;
        }
        Ok(())
    }

    pub fn tpgn_config(&self) -> TpgnConfig {
        TpgnConfig {
            history_len: self.history_len,
            forecast_len: self.forecast_len,
            period: self.period,
            hidden: self.hidden,
            time_features: TIME_FEATURES,
            norm: false,
            variant: TpgnVariant::FULL,
            per_phase_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub scenario: BenchScenario,
    pub time_ms_median: f64,
    pub peak_bytes: usize,
    /// Forward MACs for the whole batch.
    pub macs: u64,
    pub graph_depth: usize,
    /// Set when the scenario could not run.
    pub error: Option<String>,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        let s = &self.scenario;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            s.model, s.history_len, s.forecast_len, s.hidden, s.batch, self.time_ms_median, self.peak_bytes, self.macs,
            self.graph_depth
        )
    }
}

enum Model {
    Tpgn(TpgnParams),
    Pgn(PgnParams),
    Gru(GruParams),
    Lstm(LstmParams),
}

impl Model {
    fn build(s: &BenchScenario, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match s.model {
            ModelKind::Tpgn => Model::Tpgn(TpgnParams::init(&s.tpgn_config(), rng)?),
            ModelKind::PgnRaw => Model::Pgn(PgnParams::init(s.history_len, 1, s.hidden, rng)?),
            ModelKind::GruSeq => Model::Gru(GruParams::init(1, s.hidden, rng)?),
            ModelKind::LstmSeq => Model::Lstm(LstmParams::init(1, s.hidden, rng)?),
        })
    }

    fn input(&self, s: &BenchScenario, rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Model::Tpgn(p) => {
                let c = &p.config;
                Tensor::uniform(&[s.batch, c.rows(), c.period, c.channels()], 1.0, rng)
            }
            _ => Tensor::uniform(&[s.batch, s.history_len, 1], 1.0, rng),
        }
    }

    /// Forward pass with `x` as a graph leaf. Returns (input leaf, output).
    fn forward(&self, g: &mut Graph, x: &Tensor, track_params: bool) -> Result<(Tensor, Tensor)> {
        let x = g.leaf(x);
        let y = match self {
            Model::Tpgn(p) => {
                let p = if track_params { p.track(g) } else { p.clone() };
                let batch = PreparedBatch { grid: x.clone(), stats: vec![NormStats::identity(); x.shape()[0]] };
                tpgn_forward_batch(g, &batch, &p)?
            }
            Model::Pgn(p) => {
                let p = if track_params { p.track(g) } else { p.clone() };
                pgn_forward(g, &x, &p)?.out
            }
            Model::Gru(p) => {
                let p = if track_params { p.track(g) } else { p.clone() };
                gru_forward_seq(g, &x, &p)?
            }
            Model::Lstm(p) => {
                let p = if track_params { p.track(g) } else { p.clone() };
                lstm_forward_seq(g, &x, &p)?
            }
        };
        Ok((x, y))
    }
}

struct Measured {
    millis: f64,
    peak: usize,
    macs: u64,
    depth: Option<usize>,
}

fn run_once(model: &Model, x: &Tensor, mode: BenchMode, want_depth: bool) -> Result<Measured> {
    let base = live_bytes();
    reset_peak_bytes();
    reset_mac_count();
    let start = Instant::now();
    let mut g = Graph::new();
    let train = mode == BenchMode::TrainStep;
    let (leaf, y) = model.forward(&mut g, x, train)?;
    let macs = mac_count();
    if train {
        let loss = g.mean_all(&y)?;
        let grads = g.backward(&loss)?;
        std::hint::black_box(&grads);
    }
    std::hint::black_box(&y);
    let millis = start.elapsed().as_secs_f64() * 1e3;
    let depth = if want_depth { g.path_depth(&leaf, &y)? } else { None };
    let peak = peak_bytes().saturating_sub(base);
    Ok(Measured { millis, peak, macs, depth })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn measure(s: &BenchScenario) -> Result<BenchRecord> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2023);
    let model = Model::build(s, &mut rng)?;
    let x = model.input(s, &mut rng);
    for _ in 0..s.warmup {
        run_once(&model, &x, s.mode, false)?;
    }
    let mut times = Vec::with_capacity(s.repeats);
    let (mut peak, mut macs, mut depth) = (0, 0, 0);
    for i in 0..s.repeats {
        let m = run_once(&model, &x, s.mode, i == 0)?;
        times.push(m.millis);
        peak = peak.max(m.peak);
        if i == 0 {
            macs = m.macs;
            depth = m.depth.unwrap_or(0);
        }
    }
    Ok(BenchRecord {
        scenario: s.clone(),
        time_ms_median: median(&mut times),
        peak_bytes: peak,
        macs,
        graph_depth: depth,
        error: None,
    })
}

/// Runs one scenario: warmups, then timed repeats. Failures (including
/// panics such as allocation failures reported by the allocator) become a
/// record with `error` set.
pub fn run_scenario(s: &BenchScenario) -> BenchRecord {
    let failed = |msg: String| BenchRecord {
        scenario: s.clone(),
        time_ms_median: f64::NAN,
        peak_bytes: 0,
        macs: 0,
        graph_depth: 0,
        error: Some(msg),
    };
    match catch_unwind(AssertUnwindSafe(|| measure(s))) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => failed(e.to_string()),
        Err(_) => failed("scenario panicked".into()),
    }
}

/// `path`, or the first free `stem.vN.ext` next to it when `path` exists.
pub fn versioned_path(path: &Path) -> PathBuf {
    if !path.exists() {
        return path.to_path_buf();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("bench");
    let ext = path.extension().and_then(|s| s.to_str());
    (2..)
        .map(|v| {
            let name = match ext {
                Some(e) => format!("{stem}.v{v}.{e}"),
                None => format!("{stem}.v{v}"),
            };
            path.with_file_name(name)
        })
        .find(|p| !p.exists())
        .expect("unbounded search")
}

pub fn write_report<W: Write>(out: &mut W, records: &[BenchRecord]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Runs every scenario in order and writes the report to `path` (versioned
/// if it already exists). Rows are flushed as they complete.
pub fn sweep(scenarios: &[BenchScenario], path: &Path) -> Result<(PathBuf, Vec<BenchRecord>)> {
    let target = versioned_path(path);
    if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(&target)?;
    writeln!(file, "{CSV_HEADER}")?;
    let mut records = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let r = run_scenario(s);
        writeln!(file, "{}", r.csv_row())?;
        file.flush()?;
        records.push(r);
    }
    Ok((target, records))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpgn::flop_count;

    fn small(model: ModelKind, lh: usize) -> BenchScenario {
        BenchScenario { hidden: 4, batch: 2, period: 4, ..BenchScenario::new(model, lh, 8) }
    }

    #[test]
    fn tpgn_macs_follow_flop_count() {
        for lh in [168, 672] {
            let s = BenchScenario { hidden: 8, batch: 2, mode: BenchMode::Forward, ..BenchScenario::new(ModelKind::Tpgn, lh, 24) };
            let r = run_scenario(&s);
            assert!(r.error.is_none(), "{:?}", r.error);
            let p = TpgnParams::init(&s.tpgn_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(r.macs, 2 * flop_count(&p).total);
        }
    }

    #[test]
    fn depths_by_model() {
        let d = |m, lh| run_scenario(&small(m, lh)).graph_depth;
        assert_eq!(d(ModelKind::Tpgn, 16), d(ModelKind::Tpgn, 64));
        assert_eq!(d(ModelKind::PgnRaw, 16), d(ModelKind::PgnRaw, 64));
        assert!(d(ModelKind::GruSeq, 64) >= 64);
        assert!(d(ModelKind::LstmSeq, 64) >= 64);
    }

    #[test]
    fn invalid_scenarios_are_recorded_not_raised() {
        let r = run_scenario(&BenchScenario { repeats: 1, ..small(ModelKind::GruSeq, 8) });
        assert!(r.error.is_some());
        assert!(r.time_ms_median.is_nan());
        let r = run_scenario(&small(ModelKind::Tpgn, 10));
        assert!(r.error.is_some());
    }

    #[test]
    fn sweep_writes_one_row_per_scenario_and_never_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        let scenarios: Vec<BenchScenario> = [ModelKind::Tpgn, ModelKind::PgnRaw, ModelKind::GruSeq, ModelKind::LstmSeq]
            .into_iter()
            .map(|m| small(m, 16))
            .collect();
        let (first, records) = sweep(&scenarios, &path).unwrap();
        assert_eq!(first, path);
        assert_eq!(records.len(), 4);
        let text = fs::read_to_string(&first).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("PGN-raw,16,8,4,2,"));
        let (second, _) = sweep(&scenarios[..1], &path).unwrap();
        assert_eq!(second, dir.path().join("bench.v2.csv"));
        assert_eq!(fs::read_to_string(&first).unwrap(), text);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 4.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.sqrt()).collect();
        assert!((loglog_slope(&xs, &ys) - 0.5).abs() < 1e-12);
        let mut v = vec![3.0, 1.0, 2.0];
        assert_eq!(median(&mut v), 2.0);
    }

    #[test]
    fn model_names_parse() {
        for m in [ModelKind::Tpgn, ModelKind::PgnRaw, ModelKind::GruSeq, ModelKind::LstmSeq] {
            assert_eq!(m.to_string().parse::<ModelKind>().unwrap(), m);
        }
    }
}
