//! Command implementations. Each returns a [`Failure`] carrying the exit
//! code on error.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpgn_core::bench::{sweep, BenchMode, BenchScenario, ModelKind};
use tpgn_core::data::{aggregate_hourly, load_csv, split_and_window, synthetic_sinusoid, NoiseSpec, SplitSpec, Splits};
use tpgn_core::params::ParamSet;
use tpgn_core::tpgn::{gradient_check, SeriesWindow, TpgnConfig, TpgnParams, TpgnVariant};
use tpgn_core::train::{
    evaluate, fit, load_checkpoint_file, predict, save_checkpoint_file, write_epoch_log, Checkpoint, EpochRecord,
    Metrics, TrainError,
};
use tpgn_core::{Error, Tensor};

use crate::config::{read_config_file, RunConfig};
use crate::manifest::RunManifest;
use crate::{BenchArgs, GradcheckArgs, RunArgs, SynthArgs};

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Display) -> Self {
        Failure { code: EXIT_CONFIG, message: message.to_string() }
    }

    pub fn data(message: impl Display) -> Self {
        Failure { code: EXIT_DATA, message: message.to_string() }
    }

    pub fn other(message: impl Display) -> Self {
        Failure { code: EXIT_OTHER, message: message.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => EXIT_CONFIG,
            Error::Ingest(_) => EXIT_DATA,
            Error::Numeric(_) => EXIT_DIVERGED,
            Error::Io(_) => EXIT_OTHER,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::other(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// Defaults, then the config file, then flags.
pub fn resolve(args: &RunArgs) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        for (k, v) in read_config_file(path)? {
            cfg.set(&k, &v)?;
        }
    }
    let flags = [
        ("data", args.data.as_ref().map(|p| p.display().to_string())),
        ("target", args.target.clone()),
        ("lh", args.lh.clone()),
        ("lf", args.lf.clone()),
        ("period", args.period.clone()),
        ("dm", args.dm.clone()),
        ("norm", args.norm.clone()),
        ("variant", args.variant.clone()),
        ("seed", args.seed.clone()),
        ("noise_eps", args.noise_eps.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(cfg: &RunConfig) -> Outcome<Splits> {
    let path = cfg.data.as_ref().ok_or_else(|| Failure::config("no dataset given (--data or data=)"))?;
    if !path.is_file() {
        return Err(Failure::data(format!("dataset {} not found", path.display())));
    }
    let raw = load_csv(path, &cfg.target, cfg.timestamp_column.as_deref()).map_err(Failure::data)?;
    let (series, filled) = aggregate_hourly(&raw).map_err(Failure::data)?;
    if filled > 0 {
        println!("filled {filled} empty hours by interpolation");
    }
    let model = &cfg.train.model;
    let spec = SplitSpec { history_len: model.history_len, forecast_len: model.forecast_len };
    Ok(split_and_window(&series, spec, cfg.standardize)?)
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_log(manifest: &RunManifest, log: &[EpochRecord]) -> Outcome {
    let mut out = create(&manifest.path("epoch_log.csv"))?;
    write_epoch_log(&mut out, log)?;
    out.flush()?;
    Ok(())
}

/// Validation and test metrics plus the test-set prediction dump.
fn report(manifest: &RunManifest, params: &TpgnParams, splits: &Splits, batch_size: usize) -> Outcome<[Metrics; 2]> {
    let val = evaluate(params, &splits.val, batch_size)?;
    let test = evaluate(params, &splits.test, batch_size)?;
    let mut out = create(&manifest.path("metrics.csv"))?;
    writeln!(out, "split,mse,mae")?;
    writeln!(out, "val,{},{}", val.mse, val.mae)?;
    writeln!(out, "test,{},{}", test.mse, test.mae)?;
    out.flush()?;

    let indices = splits.test.non_overlapping();
    let preds = predict(params, &splits.test, &indices, batch_size)?;
    let mut out = create(&manifest.path("predictions.csv"))?;
    writeln!(out, "timestamp,truth,prediction")?;
    for (&i, pred) in indices.iter().zip(&preds) {
        let window = splits.test.get(i);
        let stamps = splits.test.target_timestamps(i);
        for ((t, truth), p) in stamps.iter().zip(window.target.data()).zip(pred) {
            writeln!(
                out,
                "{},{},{}",
                t.format(TIMESTAMP_FORMAT),
                splits.scaler.inverse(*truth),
                splits.scaler.inverse(*p)
            )?;
        }
    }
    out.flush()?;
    Ok([val, test])
}

fn print_metrics([val, test]: &[Metrics; 2]) {
    println!("validation  mse {:.6}  mae {:.6}", val.mse, val.mae);
    println!("test        mse {:.6}  mae {:.6}", test.mse, test.mae);
}

pub fn train(args: &RunArgs) -> Outcome {
    let cfg = resolve(args)?;
    let manifest = RunManifest::create("train", cfg.to_pairs(), &args.out)?;
    println!("run directory {}", manifest.out_dir.display());
    let splits = load_splits(&cfg)?;
    let noise = NoiseSpec { epsilon: cfg.noise_eps, seed: cfg.train.seed };
    noise.validate()?;
    let train_set = splits.train.clone().with_noise(Some(noise));
    println!(
        "windows: train {} / val {} / test {}",
        train_set.len(),
        splits.val.len(),
        splits.test.len()
    );
    let init = TpgnParams::init(&cfg.train.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let checkpoint_path = manifest.path("checkpoint.tpgn");
    let outcome = match fit(init, &train_set, &splits.val, &cfg.train) {
        Ok(o) => o,
        Err(TrainError::Diverged { message, last_good, log }) => {
            save_checkpoint_file(&checkpoint_path, &last_good)?;
            write_log(&manifest, &log)?;
            return Err(Failure { code: EXIT_DIVERGED, message });
        }
        Err(TrainError::Other(e)) => return Err(e.into()),
    };
    save_checkpoint_file(&checkpoint_path, &outcome.checkpoint)?;
    write_log(&manifest, &outcome.log)?;
    for r in &outcome.log {
        println!("epoch {:>3}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss);
    }
    let Checkpoint { params, epoch, .. } = &outcome.checkpoint;
    println!("best epoch {epoch} after {} steps", outcome.steps);
    print_metrics(&report(&manifest, params, &splits, cfg.train.batch_size)?);
    Ok(())
}

pub fn eval(checkpoint: &Path, args: &RunArgs) -> Outcome {
    let mut cfg = resolve(args)?;
    let ck = load_checkpoint_file(checkpoint).map_err(Failure::data)?;
    cfg.train.model = ck.params.config.clone();
    let mut entries = vec![("checkpoint".to_string(), checkpoint.display().to_string())];
    entries.extend(cfg.to_pairs());
    let manifest = RunManifest::create("eval", entries, &args.out)?;
    println!("run directory {}", manifest.out_dir.display());
    let splits = load_splits(&cfg)?;
    print_metrics(&report(&manifest, &ck.params, &splits, cfg.train.batch_size)?);
    Ok(())
}

fn parse_list<T: std::str::FromStr>(name: &str, raw: &str) -> Outcome<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| Failure::config(format!("--{name} {s:?}: {e}"))))
        .collect()
}

pub fn bench(args: &BenchArgs) -> Outcome {
    let models: Vec<ModelKind> = parse_list("models", &args.models)?;
    let lhs: Vec<usize> = parse_list("lh", &args.lh)?;
    let lfs: Vec<usize> = parse_list("lf", &args.lf)?;
    let mode = match args.mode.as_str() {
        "train" => BenchMode::TrainStep,
        "forward" => BenchMode::Forward,
        other => return Err(Failure::config(format!("--mode must be train or forward, got {other:?}"))),
    };
    let mut scenarios = Vec::new();
    for &model in &models {
        for &lh in &lhs {
            for &lf in &lfs {
                let s = BenchScenario {
                    hidden: args.dm,
                    batch: args.batch,
                    period: args.period,
                    repeats: args.repeats,
                    warmup: args.warmup,
                    mode,
                    ..BenchScenario::new(model, lh, lf)
                };
                s.validate()?;
                scenarios.push(s);
            }
        }
    }
    let entries = vec![
        ("models".to_string(), args.models.clone()),
        ("lh".into(), args.lh.clone()),
        ("lf".into(), args.lf.clone()),
        ("period".into(), args.period.to_string()),
        ("dm".into(), args.dm.to_string()),
        ("batch".into(), args.batch.to_string()),
        ("mode".into(), args.mode.clone()),
        ("repeats".into(), args.repeats.to_string()),
        ("warmup".into(), args.warmup.to_string()),
    ];
    let manifest = RunManifest::create("bench", entries, &args.out)?;
    let (path, records) = sweep(&scenarios, &manifest.path("bench.csv"))?;
    for r in &records {
        let s = &r.scenario;
        match &r.error {
            None => println!(
                "{:<9} L_h {:>5} L_f {:>5}  {:>10.2} ms  {:>12} bytes  {:>14} MACs  depth {}",
                s.model.to_string(),
                s.history_len,
                s.forecast_len,
                r.time_ms_median,
                r.peak_bytes,
                r.macs,
                r.graph_depth
            ),
            Some(e) => println!("{:<9} L_h {:>5} L_f {:>5}  failed: {e}", s.model.to_string(), s.history_len, s.forecast_len),
        }
    }
    println!("report {}", path.display());
    Ok(())
}

/// A seeded instance with every parameter drawn away from its initial value.
pub fn gradcheck_instance(config: &TpgnConfig, seed: u64) -> tpgn_core::Result<(TpgnParams, SeriesWindow)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = TpgnParams::init(config, &mut rng)?;
    let tensors = params.tensors().iter().map(|t| Tensor::uniform(t.shape(), 0.5, &mut rng)).collect();
    let params = params.with_tensors(tensors)?;
    let window = SeriesWindow::new(
        Tensor::uniform(&[config.history_len], 2.0, &mut rng),
        Tensor::uniform(&[config.history_len, config.time_features], 0.5, &mut rng),
        Tensor::uniform(&[config.forecast_len], 2.0, &mut rng),
    )?;
    Ok((params, window))
}

pub fn gradcheck(args: &GradcheckArgs) -> Outcome {
    let variants: Vec<TpgnVariant> = match &args.variant {
        Some(v) => vec![v.parse()?],
        None => ["full", "long", "short", "gru", "lstm", "mlp"]
            .iter()
            .map(|v| v.parse().expect("known variant"))
            .collect(),
    };
    let configs: Vec<TpgnConfig> = variants
        .iter()
        .map(|&variant| TpgnConfig {
            history_len: args.lh,
            forecast_len: args.lf,
            period: args.period,
            hidden: args.dm,
            variant,
            ..TpgnConfig::default()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let entries = vec![
        ("lh".to_string(), args.lh.to_string()),
        ("lf".into(), args.lf.to_string()),
        ("period".into(), args.period.to_string()),
        ("dm".into(), args.dm.to_string()),
        ("variants".into(), variants.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
        ("seed".into(), args.seed.to_string()),
        ("tolerance".into(), args.tolerance.to_string()),
    ];
    let manifest = RunManifest::create("gradcheck", entries, &args.out)?;
    let mut out = create(&manifest.path("gradcheck.csv"))?;
    writeln!(out, "variant,tensor,max_rel_error")?;
    let mut worst: f64 = 0.0;
    for config in &configs {
        let (params, window) = gradcheck_instance(config, args.seed)?;
        let report = gradient_check(&params, &window, 1e-5)?;
        let mut variant_worst: f64 = 0.0;
        for (name, err) in &report {
            writeln!(out, "{},{name},{err}", config.variant)?;
            variant_worst = variant_worst.max(*err);
        }
        println!("{:<6} {} tensors  max relative error {variant_worst:.3e}", config.variant.to_string(), report.len());
        worst = worst.max(variant_worst);
    }
    out.flush()?;
    println!("report {}", manifest.path("gradcheck.csv").display());
    if worst < args.tolerance {
        println!("gradient check passed ({worst:.3e} < {:e})", args.tolerance);
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_DIVERGED,
            message: format!("gradient check failed: {worst:.3e} >= {:e}", args.tolerance),
        })
    }
}

pub fn synth(args: &SynthArgs) -> Outcome {
    if args.len == 0 || args.period == 0 || !args.drift.is_finite() {
        return Err(Failure::config("length and period must be positive and drift finite"));
    }
    let entries = vec![
        ("len".to_string(), args.len.to_string()),
        ("period".into(), args.period.to_string()),
        ("drift".into(), args.drift.to_string()),
    ];
    let manifest = RunManifest::create("synth", entries, &args.out)?;
    let series = synthetic_sinusoid(args.len, args.period, args.drift);
    let path = manifest.path("synthetic.csv");
    let mut out = create(&path)?;
    writeln!(out, "date,{}", series.target_name)?;
    for (t, v) in series.timestamps.iter().zip(&series.values) {
        writeln!(out, "{},{v}", t.format(TIMESTAMP_FORMAT))?;
    }
    out.flush()?;
    println!("{}", path.display());
    Ok(())
}
