//! Run configuration: defaults, then a flat `key=value` file, then
//! command-line flags, each layer overriding the previous one.

use std::fs;
use std::path::{Path, PathBuf};

use tpgn_core::train::TrainConfig;
use tpgn_core::{Error, Result};

/// Everything a training or evaluation run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub target: String,
    /// Timestamp column name; the first column when unset.
    pub timestamp_column: Option<String>,
    /// Fraction of each training history perturbed by noise.
    pub noise_eps: f64,
    /// Rescale the series by the training split's mean and std.
    pub standardize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: None,
            target: "OT".into(),
            timestamp_column: None,
            noise_eps: 0.0,
            standardize: true,
        }
    }
}

impl RunConfig {
    /// Applies one setting. Unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "target" => self.target = value.to_string(),
            "timestamp_column" => {
                self.timestamp_column = (!value.is_empty()).then(|| value.to_string());
            }
            "noise_eps" => {
                self.noise_eps = value
                    .parse()
                    .map_err(|_| Error::Config(format!("noise_eps: cannot parse {value:?}")))?
            }
            "standardize" => {
                self.standardize = match value {
                    "0" => false,
                    "1" => true,
                    _ => return Err(Error::Config(format!("standardize must be 0 or 1, got {value:?}"))),
                }
            }
            _ => {
                if !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.noise_eps) {
            return Err(Error::Config(format!("noise_eps {} is outside [0, 1]", self.noise_eps)));
        }
        if self.target.is_empty() {
            return Err(Error::Config("target column name is empty".into()));
        }
        Ok(())
    }

    /// Resolved settings in a fixed order, suitable for a manifest.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("data".into(), self.data.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("target".into(), self.target.clone()),
            ("timestamp_column".into(), self.timestamp_column.clone().unwrap_or_default()),
            ("noise_eps".into(), self.noise_eps.to_string()),
            ("standardize".into(), u8::from(self.standardize).to_string()),
        ];
        out.extend(self.train.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_pairs(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
