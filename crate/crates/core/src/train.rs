//! Training loop, metrics, optimizer and checkpoints.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::tpgn::{parse_value, prepare_batch, tpgn_forward_batch, SeriesWindow, TpgnConfig, TpgnParams};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TPGN1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps (the current epoch is still
    /// validated).
    pub max_steps: Option<usize>,
    pub model: TpgnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 25,
            patience: 5,
            seed: 2023,
            max_steps: None,
            model: TpgnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, epochs and patience must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds the epoch budget {}",
                self.patience, self.max_epochs
            )));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        self.model.validate()
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("max_steps", self.max_steps.map_or_else(|| "none".into(), |s| s.to_string())),
        ];
        out.extend(self.model.to_pairs());
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "max_steps" => {
                self.max_steps = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            _ => return self.model.set(key, value),
        }
        Ok(true)
    }
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("metrics need at least one value".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching the state.
pub fn adam_step(params: &[Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Dimension(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(j, (&w, &gj))| {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w - lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect();
        out.push(Tensor::new(p.shape(), data)?);
    }
    Ok(out)
}

/// Anything that can hand out forecasting windows by index.
pub trait Windows: Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> SeriesWindow;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Windows for WindowSet {
    fn len(&self) -> usize {
        WindowSet::len(self)
    }

    fn get(&self, i: usize) -> SeriesWindow {
        WindowSet::get(self, i)
    }
}

impl Windows for [SeriesWindow] {
    fn len(&self) -> usize {
        <[SeriesWindow]>::len(self)
    }

    fn get(&self, i: usize) -> SeriesWindow {
        self[i].clone()
    }
}

impl Windows for Vec<SeriesWindow> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> SeriesWindow {
        self[i].clone()
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: TpgnParams,
    pub best_val_loss: f64,
    /// 1-based epoch that produced these parameters (0 before training).
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

#[derive(Debug)]
pub enum TrainError {
    /// The loss became non-finite. Carries the best checkpoint so far (the
    /// initial parameters if no epoch finished) and the log up to that point.
    Diverged {
        message: String,
        last_good: Box<Checkpoint>,
        log: Vec<EpochRecord>,
    },
    Other(Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged { message, last_good, .. } => write!(
                f,
                "training diverged: {message} (last good checkpoint from epoch {})",
                last_good.epoch
            ),
            TrainError::Other(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Other(e)
    }
}

/// Mean squared error of a batch forecast against its targets, on the graph.
fn batch_loss(g: &mut Graph, windows: &[SeriesWindow], params: &TpgnParams) -> Result<Tensor> {
    let refs: Vec<&SeriesWindow> = windows.iter().collect();
    let batch = prepare_batch(&refs, &params.config)?;
    let pred = tpgn_forward_batch(g, &batch, params)?;
    let lf = params.config.forecast_len;
    let mut target = Vec::with_capacity(windows.len() * lf);
    for w in windows {
        if w.forecast_len() != lf {
            return Err(Error::Config(format!(
                "window forecasts {} steps, model {lf}",
                w.forecast_len()
            )));
        }
        target.extend_from_slice(w.target.data());
    }
    let target = Tensor::new(&[windows.len(), lf], target)?;
    let diff = g.sub(&pred, &target)?;
    let sq = g.mul(&diff, &diff)?;
    g.mean_all(&sq)
}

/// One optimizer step on a batch. Returns the updated parameters and the
/// batch loss before the update.
pub fn train_step(
    params: &TpgnParams,
    windows: &[SeriesWindow],
    state: &mut AdamState,
    lr: f64,
) -> Result<(TpgnParams, f64)> {
    let mut g = Graph::new();
    let tracked = params.track(&mut g);
    let loss = batch_loss(&mut g, windows, &tracked)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {value}")));
    }
    let grads = g.backward(&loss)?;
    let tensors = tracked.tensors();
    let grad_list: Vec<Tensor> = tensors.iter().map(|t| grads.get_or_zeros(t)).collect();
    let plain: Vec<Tensor> = tensors.iter().map(Tensor::detach).collect();
    let updated = adam_step(&plain, &grad_list, state, lr)?;
    Ok((params.with_tensors(updated)?, value))
}

/// Forecasts for the given window indices, in order.
pub fn predict<W: Windows + ?Sized>(
    params: &TpgnParams,
    windows: &W,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let lf = params.config.forecast_len;
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let parts: Vec<Result<Vec<Vec<f64>>>> = chunks
        .par_iter()
        .map(|chunk| {
            let ws: Vec<SeriesWindow> = chunk.iter().map(|&i| windows.get(i)).collect();
            let refs: Vec<&SeriesWindow> = ws.iter().collect();
            let batch = prepare_batch(&refs, &params.config)?;
            let y = tpgn_forward_batch(&mut Graph::new(), &batch, params)?;
            Ok(y.data().chunks(lf).map(<[f64]>::to_vec).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// MSE and MAE over every forecast value of every window.
pub fn evaluate<W: Windows + ?Sized>(params: &TpgnParams, windows: &W, batch_size: usize) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Contract("no windows to evaluate".into()));
    }
    let lf = params.config.forecast_len;
    let indices: Vec<usize> = (0..windows.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let sums: Vec<Result<(f64, f64)>> = chunks
        .par_iter()
        .map(|chunk| {
            let ws: Vec<SeriesWindow> = chunk.iter().map(|&i| windows.get(i)).collect();
            for w in &ws {
                if w.forecast_len() != lf || w.history_len() != params.config.history_len {
                    return Err(Error::Config(format!(
                        "window {}->{} does not match the model {}->{lf}",
                        w.history_len(),
                        w.forecast_len(),
                        params.config.history_len
                    )));
                }
            }
            let refs: Vec<&SeriesWindow> = ws.iter().collect();
            let batch = prepare_batch(&refs, &params.config)?;
            let y = tpgn_forward_batch(&mut Graph::new(), &batch, params)?;
            let mut sq = 0.0;
            let mut abs = 0.0;
            for (k, w) in ws.iter().enumerate() {
                for (p, t) in y.data()[k * lf..(k + 1) * lf].iter().zip(w.target.data()) {
                    sq += (p - t) * (p - t);
                    abs += (p - t).abs();
                }
            }
            Ok((sq, abs))
        })
        .collect();
    let (mut sq, mut abs) = (0.0, 0.0);
    for s in sums {
        let (a, b) = s?;
        sq += a;
        abs += b;
    }
    let n = (windows.len() * lf) as f64;
    Ok(Metrics { mse: sq / n, mae: abs / n })
}

/// Trains from `init`: shuffled minibatches each epoch, validation after
/// every epoch, early stopping after `patience` epochs without a strictly
/// lower validation loss. Returns the best-validation checkpoint.
pub fn fit<T, V>(init: TpgnParams, train: &T, val: &V, cfg: &TrainConfig) -> Result<FitOutcome, TrainError>
where
    T: Windows + ?Sized,
    V: Windows + ?Sized,
{
    cfg.validate()?;
    if init.config != cfg.model {
        return Err(Error::Config("initial parameters were built for a different model config".into()).into());
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()).into());
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut state = AdamState::new(&params.tensors());
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let diverged = |message: String, best: &Option<Checkpoint>, params: &TpgnParams, log: &[EpochRecord]| {
        let last_good = best.clone().unwrap_or_else(|| Checkpoint {
            params: params.clone(),
            best_val_loss: f64::NAN,
            epoch: 0,
        });
        TrainError::Diverged { message, last_good: Box::new(last_good), log: log.to_vec() }
    };
    let initial = params.clone();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let ws: Vec<SeriesWindow> = chunk.iter().map(|&i| train.get(i)).collect();
            match train_step(&params, &ws, &mut state, cfg.lr) {
                Ok((next, loss)) => {
                    params = next;
                    loss_sum += loss;
                }
                Err(Error::Numeric(msg)) => {
                    let fallback = if best.is_some() { &params } else { &initial };
                    return Err(diverged(format!("epoch {epoch}: {msg}"), &best, fallback, &log));
                }
                Err(e) => return Err(e.into()),
            }
            batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let val_loss = evaluate(&params, val, cfg.batch_size)?.mse;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        log.push(record);
        if !val_loss.is_finite() || !params.tensors().iter().all(Tensor::all_finite) {
            return Err(diverged(format!("epoch {epoch}: non-finite validation loss"), &best, &initial, &log));
        }
        if best.as_ref().is_none_or(|b| val_loss < b.best_val_loss) {
            best = Some(Checkpoint { params: params.clone(), best_val_loss: val_loss, epoch });
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience || cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    Ok(FitOutcome { checkpoint: best.expect("at least one epoch ran"), log, steps })
}

/// Epoch log as CSV.
pub fn write_epoch_log<W: Write>(out: &mut W, log: &[EpochRecord]) -> Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,elapsed_seconds")?;
    for r in log {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.elapsed_seconds)?;
    }
    Ok(())
}

/// Writes the binary checkpoint: magic, then per tensor a length-prefixed
/// name, rank, dims and little-endian `f64` payload, a zero name length as
/// terminator, and finally the `key=value` config block.
pub fn save_checkpoint<W: Write>(out: &mut W, ck: &Checkpoint) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in ck.params.named_tensors() {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.write_all(&0u64.to_le_bytes())?;
    let mut text = String::new();
    for (k, v) in ck.params.config.to_pairs() {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&format!("best_val_loss={}\nepoch={}\n", ck.best_val_loss, ck.epoch));
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn save_checkpoint_file(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    save_checkpoint(&mut buf, ck)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    let chunk = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Ingest("checkpoint truncated".into()))?;
    *at = end;
    Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
}

pub fn load_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.get(..5) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Ingest("not a TPGN1 checkpoint".into()));
    }
    let mut at = 5;
    let mut named = Vec::new();
    loop {
        let len = read_u64(&bytes, &mut at)? as usize;
        if len == 0 {
            break;
        }
        let name = bytes
            .get(at..at + len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| Error::Ingest("bad tensor name in checkpoint".into()))?
            .to_string();
        at += len;
        let rank = read_u64(&bytes, &mut at)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&bytes, &mut at).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_u64(&bytes, &mut at).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        named.push((name, Tensor::new(&shape, data)?));
    }
    let text = std::str::from_utf8(&bytes[at..]).map_err(|_| Error::Ingest("checkpoint config is not UTF-8".into()))?;
    let mut config = TpgnConfig::default();
    let (mut best_val_loss, mut epoch) = (f64::NAN, 0);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Ingest(format!("bad checkpoint config line {line:?}")))?;
        match k {
            "best_val_loss" => best_val_loss = parse_value(k, v)?,
            "epoch" => epoch = parse_value(k, v)?,
            _ => {
                if !config.set(k, v)? {
                    return Err(Error::Ingest(format!("unknown checkpoint config key {k:?}")));
                }
            }
        }
    }
    // Build the structure for this config, then swap in the stored tensors.
    let template = TpgnParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<String> = template.named_tensors().into_iter().map(|(n, _)| n).collect();
    let stored: Vec<&String> = named.iter().map(|(n, _)| n).collect();
    if expected.iter().collect::<Vec<_>>() != stored {
        return Err(Error::Ingest(format!(
            "checkpoint tensors {stored:?} do not match the config's {expected:?}"
        )));
    }
    let params = template.with_tensors(named.into_iter().map(|(_, t)| t).collect())?;
    Ok(Checkpoint { params, best_val_loss, epoch })
}

pub fn load_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open checkpoint {}: {e}", path.display())))?;
    load_checkpoint(&mut f)
}
