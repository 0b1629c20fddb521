//! Series ingestion, hourly aggregation, splitting and windowing.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tpgn::{SeriesWindow, TIME_FEATURES};

/// A univariate series read from disk. Missing values are stored as NaN and
/// their 1-based data row numbers kept in `missing_rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
    pub target_name: String,
    pub missing_rows: Vec<usize>,
}

impl RawSeries {
    pub fn new(timestamps: Vec<NaiveDateTime>, values: Vec<f64>, target_name: &str) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Ingest(format!(
                "{} timestamps for {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Ingest(format!("timestamps not strictly increasing at {}", w[1])));
        }
        let missing_rows = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_nan())
            .map(|(i, _)| i + 1)
            .collect();
        Ok(RawSeries { timestamps, values, target_name: target_name.to_string(), missing_rows })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M:%S", "%Y/%m/%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Reads `target_column` against `timestamp_column` (the first column when
/// `None`). Empty, `NA` and `NaN` cells count as missing.
pub fn load_csv(path: &Path, target_column: &str, timestamp_column: Option<&str>) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = match timestamp_column {
        Some(name) => find(name).ok_or_else(|| Error::Ingest(format!("timestamp column {name:?} not found")))?,
        None => 0,
    };
    let val_col = find(target_column).ok_or_else(|| {
        Error::Ingest(format!(
            "target column {target_column:?} not found in {} (columns: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest(format!("row {row}: {e}")))?;
        let ts_raw = rec.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(ts_raw)
            .ok_or_else(|| Error::Ingest(format!("row {row}: unparseable timestamp {ts_raw:?}")))?;
        if let Some(prev) = timestamps.last() {
            if ts == *prev {
                return Err(Error::Ingest(format!("row {row}: duplicated timestamp {ts}")));
            }
            if ts < *prev {
                return Err(Error::Ingest(format!("row {row}: timestamp {ts} is earlier than {prev}")));
            }
        }
        let raw = rec.get(val_col).unwrap_or("");
        let v = match raw {
            "" | "NA" | "NaN" | "nan" | "null" => f64::NAN,
            s => s
                .parse::<f64>()
                .map_err(|_| Error::Ingest(format!("row {row}: unparseable value {s:?} in {target_column}")))?,
        };
        timestamps.push(ts);
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::Ingest(format!("{} has no data rows", path.display())));
    }
    RawSeries::new(timestamps, values, target_column)
}

fn floor_hour(t: NaiveDateTime) -> NaiveDateTime {
    t.date().and_hms_opt(t.hour(), 0, 0).expect("valid hour")
}

/// Hourly means. Hours without any present value are filled by linear
/// interpolation between the neighbouring filled hours (the nearest one at
/// the ends). Returns the series and the number of filled hours.
pub fn aggregate_hourly(s: &RawSeries) -> Result<(RawSeries, usize)> {
    if s.is_empty() {
        return Err(Error::Ingest("cannot aggregate an empty series".into()));
    }
    let mut buckets: BTreeMap<NaiveDateTime, (f64, usize)> = BTreeMap::new();
    for (t, &v) in s.timestamps.iter().zip(&s.values) {
        let e = buckets.entry(floor_hour(*t)).or_insert((0.0, 0));
        if !v.is_nan() {
            e.0 += v;
            e.1 += 1;
        }
    }
    let first = *buckets.keys().next().expect("non-empty");
    let last = *buckets.keys().next_back().expect("non-empty");
    let hours = ((last - first).num_hours() + 1) as usize;
    let mut timestamps = Vec::with_capacity(hours);
    let mut values: Vec<Option<f64>> = Vec::with_capacity(hours);
    for h in 0..hours {
        let t = first + Duration::hours(h as i64);
        timestamps.push(t);
        values.push(match buckets.get(&t) {
            Some(&(sum, n)) if n > 0 => Some(sum / n as f64),
            _ => None,
        });
    }
    let known: Vec<usize> = (0..hours).filter(|&i| values[i].is_some()).collect();
    if known.is_empty() {
        return Err(Error::Ingest(format!("{} has no present values", s.target_name)));
    }
    let mut filled = 0;
    let mut out = Vec::with_capacity(hours);
    let mut next_known: usize = 0;
    for i in 0..hours {
        match values[i] {
            Some(v) => {
                out.push(v);
                next_known += 1;
            }
            None => {
                filled += 1;
                let before = next_known.checked_sub(1).map(|k| known[k]);
                let after = known.get(next_known).copied();
                let v = match (before, after) {
                    (Some(a), Some(b)) => {
                        let (va, vb) = (values[a].unwrap(), values[b].unwrap());
                        va + (vb - va) * (i - a) as f64 / (b - a) as f64
                    }
                    (Some(a), None) => values[a].unwrap(),
                    (None, Some(b)) => values[b].unwrap(),
                    (None, None) => unreachable!(),
                };
                out.push(v);
            }
        }
    }
    let mut series = RawSeries::new(timestamps, out, &s.target_name)?;
    series.missing_rows = Vec::new();
    Ok((series, filled))
}

/// Calendar features `[N, 4]`: hour of day, day of week (Monday first), day
/// of month and day of year, each mapped onto `[-0.5, 0.5]`.
pub fn make_time_features(timestamps: &[NaiveDateTime]) -> Tensor {
    let mut data = Vec::with_capacity(timestamps.len() * TIME_FEATURES);
    for t in timestamps {
        data.push(t.hour() as f64 / 23.0 - 0.5);
        data.push(t.weekday().num_days_from_monday() as f64 / 6.0 - 0.5);
        data.push((t.day() - 1) as f64 / 30.0 - 0.5);
        data.push((t.ordinal() - 1) as f64 / 365.0 - 0.5);
    }
    Tensor::new(&[timestamps.len(), TIME_FEATURES], data).expect("length matches")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("noise fraction {} is outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

/// Picks `floor(epsilon * len)` distinct positions and adds
/// `Uniform(-2|x_i|, 2|x_i|)` to each.
pub fn inject_noise<R: Rng + ?Sized>(x: &[f64], epsilon: f64, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    let k = (epsilon * x.len() as f64).floor() as usize;
    if k == 0 {
        return out;
    }
    for i in sample(rng, x.len(), k.min(x.len())).into_vec() {
        let bound = 2.0 * x[i].abs();
        if bound > 0.0 {
            out[i] += rng.gen_range(-bound..=bound);
        }
    }
    out
}

/// Affine standardization fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Scaler { mean, std: if std > 0.0 { std } else { 1.0 } }
    }

    pub fn identity() -> Self {
        Scaler { mean: 0.0, std: 1.0 }
    }

    pub fn transform(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub history_len: usize,
    pub forecast_len: usize,
}

/// Train/validation/test lengths for a 6:2:2 partition of `n` points.
pub fn split_lengths(n: usize) -> [usize; 3] {
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    [train, val, n - train - val]
}

struct Prepared {
    timestamps: Vec<NaiveDateTime>,
    values: Vec<f64>,
    features: Vec<f64>,
}

/// Stride-1 windows over one split, materialized on demand.
#[derive(Clone)]
pub struct WindowSet {
    series: Arc<Prepared>,
    starts: Vec<usize>,
    history_len: usize,
    forecast_len: usize,
    noise: Option<NoiseSpec>,
}

impl std::fmt::Debug for WindowSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WindowSet")
            .field("windows", &self.starts.len())
            .field("history_len", &self.history_len)
            .field("forecast_len", &self.forecast_len)
            .field("noise", &self.noise)
            .finish()
    }
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn forecast_len(&self) -> usize {
        self.forecast_len
    }

    /// Series index of the first history step of window `i`.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn with_noise(mut self, noise: Option<NoiseSpec>) -> Self {
        self.noise = noise.filter(|n| n.epsilon > 0.0);
        self
    }

    pub fn get(&self, i: usize) -> SeriesWindow {
        let s = self.starts[i];
        let (lh, lf) = (self.history_len, self.forecast_len);
        let p = &self.series;
        let mut history = p.values[s..s + lh].to_vec();
        if let Some(noise) = self.noise {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add(i as u64));
            history = inject_noise(&history, noise.epsilon, &mut rng);
        }
        SeriesWindow {
            history: Tensor::vector(&history),
            time_features: Tensor::new(
                &[lh, TIME_FEATURES],
                p.features[s * TIME_FEATURES..(s + lh) * TIME_FEATURES].to_vec(),
            )
            .expect("length matches"),
            target: Tensor::vector(&p.values[s + lh..s + lh + lf]),
        }
    }

    pub fn history_timestamps(&self, i: usize) -> &[NaiveDateTime] {
        let s = self.starts[i];
        &self.series.timestamps[s..s + self.history_len]
    }

    pub fn target_timestamps(&self, i: usize) -> &[NaiveDateTime] {
        let s = self.starts[i] + self.history_len;
        &self.series.timestamps[s..s + self.forecast_len]
    }

    /// Windows whose targets tile the split without overlap.
    pub fn non_overlapping(&self) -> Vec<usize> {
        (0..self.len()).step_by(self.forecast_len.max(1)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    /// Standardization applied to every split, fitted on the training part.
    pub scaler: Scaler,
    /// `[start, end)` of each split in the series.
    pub bounds: [(usize, usize); 3],
}

/// Partitions 6:2:2 in time order and windows each split without crossing
/// its boundaries. With `standardize`, values are rescaled by a [`Scaler`]
/// fitted on the training split.
pub fn split_and_window(s: &RawSeries, spec: SplitSpec, standardize: bool) -> Result<Splits> {
    if spec.history_len == 0 || spec.forecast_len == 0 {
        return Err(Error::Config("window lengths must be positive".into()));
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Ingest(format!(
            "{} has missing or non-finite values; aggregate or fill them first",
            s.target_name
        )));
    }
    let lens = split_lengths(s.len());
    let need = spec.history_len + spec.forecast_len;
    let names = ["train", "validation", "test"];
    let mut bounds = [(0, 0); 3];
    let mut at = 0;
    for k in 0..3 {
        if lens[k] < need {
            return Err(Error::Config(format!(
                "{} split has {} points, fewer than L_h + L_f = {need}",
                names[k], lens[k]
            )));
        }
        bounds[k] = (at, at + lens[k]);
        at += lens[k];
    }
    let scaler = if standardize {
        Scaler::fit(&s.values[bounds[0].0..bounds[0].1])
    } else {
        Scaler::identity()
    };
    let prepared = Arc::new(Prepared {
        timestamps: s.timestamps.clone(),
        values: s.values.iter().map(|&v| scaler.transform(v)).collect(),
        features: make_time_features(&s.timestamps).to_vec(),
    });
    let set = |(a, b): (usize, usize)| WindowSet {
        series: Arc::clone(&prepared),
        starts: (a..=b - need).collect(),
        history_len: spec.history_len,
        forecast_len: spec.forecast_len,
        noise: None,
    };
    Ok(Splits { train: set(bounds[0]), val: set(bounds[1]), test: set(bounds[2]), scaler, bounds })
}

/// Hourly series `sin(2*pi*t/period + phase(t))` starting at 2020-01-01
/// 00:00, where the phase advances by `drift` radians per period.
pub fn synthetic_sinusoid(len: usize, period: usize, drift: f64) -> RawSeries {
    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let timestamps = (0..len).map(|t| start + Duration::hours(t as i64)).collect();
    let values = (0..len)
        .map(|t| {
            let cycles = t as f64 / period as f64;
            ((std::f64::consts::TAU + drift) * cycles).sin()
        })
        .collect();
    RawSeries::new(timestamps, values, "value").expect("increasing timestamps")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_rows() {
        let f = write_csv("date,OT,HUFL\n2016-07-01 00:00:00,1.5,0\n2016-07-01 01:00:00,2.5,0\n2016-07-01T02:00:00Z,3,0\n");
        let s = load_csv(f.path(), "OT", Some("date")).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.values, vec![1.5, 2.5, 3.0]);
        assert_eq!(s.timestamps[2], ts("2016-07-01 02:00:00"));
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_csv("date,OT\n2016-07-01 00:00:00,1\n");
        let err = load_csv(f.path(), "MT_320", None).unwrap_err().to_string();
        assert!(err.contains("MT_320"), "{err}");
    }

    #[test]
    fn duplicate_timestamp_is_named() {
        let f = write_csv("date,OT\n2016-07-01 00:00:00,1\n2016-07-01 00:00:00,2\n");
        let err = load_csv(f.path(), "OT", None).unwrap_err().to_string();
        assert!(err.contains("2016-07-01 00:00:00"), "{err}");
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn bad_cells_report_rows() {
        let f = write_csv("date,OT\n2016-07-01 00:00:00,1\nyesterday,2\n");
        assert!(load_csv(f.path(), "OT", None).unwrap_err().to_string().contains("row 2"));
        let f = write_csv("date,OT\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,\n2016-07-01 02:00:00,x\n");
        assert!(load_csv(f.path(), "OT", None).unwrap_err().to_string().contains("row 3"));
        let f = write_csv("date,OT\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,\n");
        let s = load_csv(f.path(), "OT", None).unwrap();
        assert_eq!(s.missing_rows, vec![2]);
    }

    #[test]
    fn quarter_hours_average() {
        let times = ["2020-01-01 00:00", "2020-01-01 00:15", "2020-01-01 00:30", "2020-01-01 00:45"];
        let s = RawSeries::new(times.iter().map(|t| ts(t)).collect(), vec![1.0, 2.0, 3.0, 4.0], "v").unwrap();
        let (h, filled) = aggregate_hourly(&s).unwrap();
        assert_eq!(h.values, vec![2.5]);
        assert_eq!(filled, 0);
    }

    #[test]
    fn hourly_is_unchanged() {
        let s = synthetic_sinusoid(30, 24, 0.0);
        let (h, filled) = aggregate_hourly(&s).unwrap();
        assert_eq!(h, s);
        assert_eq!(filled, 0);
    }

    #[test]
    fn empty_hour_is_interpolated() {
        let s = RawSeries::new(vec![ts("2020-01-01 00:00"), ts("2020-01-01 02:00")], vec![1.0, 3.0], "v").unwrap();
        let (h, filled) = aggregate_hourly(&s).unwrap();
        assert_eq!(h.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(h.timestamps[1], ts("2020-01-01 01:00"));
        assert_eq!(filled, 1);
        // a missing value counts as an empty hour
        let s = RawSeries::new(
            vec![ts("2020-01-01 00:00"), ts("2020-01-01 01:00"), ts("2020-01-01 02:00"), ts("2020-01-01 03:00")],
            vec![0.0, f64::NAN, f64::NAN, 3.0],
            "v",
        )
        .unwrap();
        let (h, filled) = aggregate_hourly(&s).unwrap();
        assert_eq!(h.values, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(filled, 2);
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_lengths(10), [6, 2, 2]);
        assert_eq!(split_lengths(17420), [10452, 3484, 3484]);
    }

    #[test]
    fn window_count_and_content() {
        let s = synthetic_sinusoid(10, 24, 0.0);
        let s = RawSeries::new(s.timestamps, (1..=10).map(f64::from).collect(), "v").unwrap();
        let spec = SplitSpec { history_len: 1, forecast_len: 1 };
        let sp = split_and_window(&s, spec, false).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (5, 1, 1));
        let s20 = RawSeries::new(
            synthetic_sinusoid(20, 24, 0.0).timestamps,
            (1..=20).map(f64::from).collect(),
            "v",
        )
        .unwrap();
        let sp = split_and_window(&s20, SplitSpec { history_len: 2, forecast_len: 1 }, false).unwrap();
        // train split has 12 points: 12 - 2 - 1 + 1 windows
        assert_eq!(sp.train.len(), 10);
        let w = sp.train.get(0);
        assert_eq!(w.history.data(), &[1.0, 2.0]);
        assert_eq!(w.target.data(), &[3.0]);
        assert_eq!(w.time_features.shape(), &[2, 4]);
        // the last test window ends at the series end, none start before the split
        let last = sp.test.get(sp.test.len() - 1);
        assert_eq!(last.target.data(), &[20.0]);
        assert_eq!(sp.test.get(0).history.data()[0], 17.0);
    }

    #[test]
    fn too_short_split_is_config_error() {
        let s = synthetic_sinusoid(10, 24, 0.0);
        let err = split_and_window(&s, SplitSpec { history_len: 2, forecast_len: 1 }, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn test_windows_follow_train_windows() {
        let s = synthetic_sinusoid(500, 24, 0.0);
        let sp = split_and_window(&s, SplitSpec { history_len: 24, forecast_len: 24 }, true).unwrap();
        let last_train = *sp.train.target_timestamps(sp.train.len() - 1).last().unwrap();
        for i in 0..sp.test.len() {
            assert!(sp.test.history_timestamps(i)[0] > last_train);
        }
        let last_val = *sp.val.target_timestamps(sp.val.len() - 1).last().unwrap();
        assert!(sp.test.history_timestamps(0)[0] > last_val);
    }

    #[test]
    fn standardization_uses_train_statistics() {
        let s = synthetic_sinusoid(200, 24, 0.0);
        let sp = split_and_window(&s, SplitSpec { history_len: 4, forecast_len: 4 }, true).unwrap();
        let fitted = Scaler::fit(&s.values[..120]);
        assert_eq!(sp.scaler, fitted);
        let w = sp.test.get(0);
        assert_eq!(w.history.data()[0], fitted.transform(s.values[160]));
    }

    #[test]
    fn time_feature_endpoints() {
        let f = make_time_features(&[ts("2024-01-01 00:00:00"), ts("2023-12-31 23:00:00")]);
        // 2024-01-01 is a Monday
        assert_eq!(f.at(&[0, 0]), -0.5);
        assert_eq!(f.at(&[0, 1]), -0.5);
        assert_eq!(f.at(&[0, 2]), -0.5);
        assert_eq!(f.at(&[0, 3]), -0.5);
        assert_eq!(f.at(&[1, 0]), 0.5);
        // Sunday
        assert_eq!(f.at(&[1, 1]), 0.5);
        assert_eq!(f.at(&[1, 2]), 0.5);
        assert!(f.data().iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn noise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(inject_noise(&x, 0.0, &mut rng), x);
        assert_eq!(inject_noise(&[0.0; 10], 1.0, &mut rng), vec![0.0; 10]);
        let y = inject_noise(&x, 1.0, &mut rng);
        for (a, b) in x.iter().zip(&y) {
            assert!(*b >= -a && *b <= 3.0 * a);
        }
        assert_ne!(y, x);
        let changed = inject_noise(&x, 0.1, &mut rng).iter().zip(&x).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
    }

    #[test]
    fn noisy_windows_are_reproducible() {
        let s = synthetic_sinusoid(400, 24, 0.0);
        let sp = split_and_window(&s, SplitSpec { history_len: 24, forecast_len: 24 }, false).unwrap();
        let noisy = sp.train.clone().with_noise(Some(NoiseSpec { epsilon: 0.1, seed: 2023 }));
        let a = noisy.get(5);
        let b = noisy.get(5);
        assert!(a.history.bitwise_eq(&b.history));
        assert!(!a.history.bitwise_eq(&sp.train.get(5).history));
        assert!(a.target.bitwise_eq(&sp.train.get(5).target));
    }
}
