//! Dataset container, text file format, chronological splits, sliding windows,
//! a synthetic spatio-temporal generator and forecast metrics.
//!
//! File format (`STLINK-DS v1`): one header line
//!
//! ```text
//! STLINK-DS v1; nodes=2; features=1; interval_min=5; start=2024-01-01T00:00:00
//! ```
//!
//! with optional `; sparse=1` and `; node_ids=a|b` fields, followed by one
//! comma-separated row per time step. A row holds either `N*F` values in
//! node-major order, or a timestamp followed by those values.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StlinkError};
use crate::numerics::seeded_rng;

pub const FORMAT_TAG: &str = "STLINK-DS v1";
const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Calendar position of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeMark {
    /// Index of the step within its day.
    pub slot: usize,
    /// Monday is 0.
    pub dow: usize,
}

impl TimeMark {
    pub fn of(ts: NaiveDateTime, interval_min: u32) -> Self {
        let minute = ts.hour() * 60 + ts.minute();
        Self { slot: (minute / interval_min) as usize, dow: ts.weekday().num_days_from_monday() as usize }
    }
}

pub fn steps_per_day(interval_min: u32) -> usize {
    1440usize.div_ceil(interval_min as usize)
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(features: usize) -> Self {
        Self { mean: vec![0.0; features], std: vec![1.0; features] }
    }

    /// Fits on steps `range` of `bundle`, pooling all nodes.
    pub fn fit(bundle: &DatasetBundle, range: &std::ops::Range<usize>) -> Result<Self> {
        let f = bundle.n_features;
        let mut mean = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let count = (range.len() * bundle.n_nodes) as f64;
        if count == 0.0 {
            return Err(StlinkError::Dataset("cannot fit a scaler on an empty range".into()));
        }
        for t in range.clone() {
            for n in 0..bundle.n_nodes {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += bundle.value(n, t, k);
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for t in range.clone() {
            for n in 0..bundle.n_nodes {
                for (k, s) in sq.iter_mut().enumerate() {
                    let c = bundle.value(n, t, k) - mean[k];
                    *s += c * c;
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(StlinkError::Dataset(format!("feature {k} has zero variance on steps {range:?}")));
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: f64, feature: usize) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    pub fn inverse(&self, z: f64, feature: usize) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

/// Node-indexed multivariate series with per-step timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub n_nodes: usize,
    pub n_features: usize,
    /// Time-major `T x N x F`.
    pub values: Vec<f64>,
    pub timestamps: Vec<NaiveDateTime>,
    pub marks: Vec<TimeMark>,
    pub node_ids: Vec<String>,
    pub interval_min: u32,
    /// Zero targets are missing readings rather than observations.
    pub sparse: bool,
}

impl DatasetBundle {
    pub fn n_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn value(&self, node: usize, t: usize, f: usize) -> f64 {
        self.values[(t * self.n_nodes + node) * self.n_features + f]
    }

    pub fn steps_per_day(&self) -> usize {
        steps_per_day(self.interval_min)
    }

    /// Value masked out of losses and metrics, if any.
    pub fn null_value(&self) -> Option<f64> {
        self.sparse.then_some(0.0)
    }

    pub fn from_values(n_nodes: usize, n_features: usize, values: Vec<f64>, start: NaiveDateTime, interval_min: u32) -> Result<Self> {
        if n_nodes == 0 || n_features == 0 || !values.len().is_multiple_of(n_nodes * n_features) {
            return Err(StlinkError::Dataset(format!("{} values do not tile {n_nodes} nodes x {n_features} features", values.len())));
        }
        if interval_min == 0 {
            return Err(StlinkError::Dataset("interval_min must be positive".into()));
        }
        let steps = values.len() / (n_nodes * n_features);
        let timestamps: Vec<NaiveDateTime> = (0..steps).map(|t| start + Duration::minutes(interval_min as i64 * t as i64)).collect();
        let marks = timestamps.iter().map(|&ts| TimeMark::of(ts, interval_min)).collect();
        Ok(Self {
            n_nodes,
            n_features,
            values,
            timestamps,
            marks,
            node_ids: (0..n_nodes).map(|i| format!("n{i}")).collect(),
            interval_min,
            sparse: false,
        })
    }
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

struct Header {
    nodes: usize,
    features: usize,
    interval_min: u32,
    start: NaiveDateTime,
    sparse: bool,
    node_ids: Option<Vec<String>>,
}

fn parse_header(line: &str) -> Result<Header> {
    let mut fields = line.split(';').map(str::trim);
    if fields.next() != Some(FORMAT_TAG) {
        return Err(StlinkError::Dataset(format!("header must start with '{FORMAT_TAG}'")));
    }
    let (mut nodes, mut features, mut interval, mut start) = (None, None, None, None);
    let mut sparse = false;
    let mut node_ids = None;
    for field in fields.filter(|f| !f.is_empty()) {
        let (k, v) = field.split_once('=').ok_or_else(|| StlinkError::Dataset(format!("malformed header field '{field}'")))?;
        let bad = || StlinkError::Dataset(format!("bad value for header field '{k}': '{v}'"));
        match k.trim() {
            "nodes" => nodes = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "features" => features = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "interval_min" => interval = Some(v.trim().parse::<u32>().map_err(|_| bad())?),
            "start" => start = Some(parse_time(v.trim()).ok_or_else(bad)?),
            "sparse" => sparse = matches!(v.trim(), "1" | "true"),
            "node_ids" => node_ids = Some(v.split('|').map(|s| s.trim().to_string()).collect()),
            other => return Err(StlinkError::Dataset(format!("unknown header field '{other}'"))),
        }
    }
    let missing = |name: &str| StlinkError::Dataset(format!("header is missing '{name}'"));
    let h = Header {
        nodes: nodes.ok_or_else(|| missing("nodes"))?,
        features: features.ok_or_else(|| missing("features"))?,
        interval_min: interval.ok_or_else(|| missing("interval_min"))?,
        start: start.ok_or_else(|| missing("start"))?,
        sparse,
        node_ids,
    };
    if h.nodes == 0 || h.features == 0 || h.interval_min == 0 {
        return Err(StlinkError::Dataset("nodes, features and interval_min must be positive".into()));
    }
    Ok(h)
}

pub fn parse_dataset(text: &str) -> Result<DatasetBundle> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = parse_header(lines.next().ok_or_else(|| StlinkError::Dataset("empty dataset file".into()))?)?;
    let width = header.nodes * header.features;
    let step = Duration::minutes(header.interval_min as i64);
    let mut values = Vec::new();
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let (ts, cells) = if cells.len() == width + 1 {
            let ts = parse_time(cells[0]).ok_or_else(|| StlinkError::Dataset(format!("bad timestamp '{}' at row {row}", cells[0])))?;
            (ts, &cells[1..])
        } else if cells.len() == width {
            (header.start + step * row as i32, &cells[..])
        } else {
            return Err(StlinkError::Dataset(format!("row {row} has {} values, expected {width} (nodes*features)", cells.len())));
        };
        match timestamps.last() {
            None if ts != header.start => {
                return Err(StlinkError::Dataset(format!("first timestamp {ts} differs from header start {}", header.start)));
            }
            Some(&prev) if ts <= prev => return Err(StlinkError::Dataset(format!("non-monotone timestamp at row {row}"))),
            Some(&prev) if ts - prev != step => return Err(StlinkError::NonUniformInterval(row)),
            _ => {}
        }
        timestamps.push(ts);
        for (col, c) in cells.iter().enumerate() {
            let v: f64 = c.parse().map_err(|_| StlinkError::Dataset(format!("unparsable cell '{c}' at row {row}, column {col}")))?;
            if !v.is_finite() {
                return Err(StlinkError::Dataset(format!("non-finite cell at row {row}, column {col}")));
            }
            values.push(v);
        }
    }
    // file rows are node-major, which is exactly time-major T x N x F storage
    let node_ids = header.node_ids.unwrap_or_else(|| (0..header.nodes).map(|i| format!("n{i}")).collect());
    if node_ids.len() != header.nodes {
        return Err(StlinkError::Dataset(format!("{} node ids for {} nodes", node_ids.len(), header.nodes)));
    }
    let marks = timestamps.iter().map(|&ts| TimeMark::of(ts, header.interval_min)).collect();
    Ok(DatasetBundle {
        n_nodes: header.nodes,
        n_features: header.features,
        values,
        timestamps,
        marks,
        node_ids,
        interval_min: header.interval_min,
        sparse: header.sparse,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn format_dataset(b: &DatasetBundle) -> String {
    let start = b.timestamps.first().copied().unwrap_or_default();
    let mut out = format!(
        "{FORMAT_TAG}; nodes={}; features={}; interval_min={}; start={}",
        b.n_nodes,
        b.n_features,
        b.interval_min,
        start.format(TIME_FORMAT)
    );
    if b.sparse {
        out.push_str("; sparse=1");
    }
    let _ = writeln!(out, "; node_ids={}", b.node_ids.join("|"));
    let width = b.n_nodes * b.n_features;
    for (t, ts) in b.timestamps.iter().enumerate() {
        out.push_str(&ts.format(TIME_FORMAT).to_string());
        for v in &b.values[t * width..(t + 1) * width] {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(b: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, format_dataset(b))?)
}

/// Proportions of train, validation and test, e.g. `7:1:2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatio(pub [f64; 3]);

impl Default for SplitRatio {
    fn default() -> Self {
        Self([7.0, 1.0, 2.0])
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = StlinkError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| StlinkError::InvalidConfig(format!("bad split ratio '{s}'")))?;
        match parts[..] {
            [a, b, c] if a > 0.0 && b > 0.0 && c > 0.0 => Ok(Self([a, b, c])),
            _ => Err(StlinkError::InvalidConfig(format!("split ratio '{s}' needs three positive parts"))),
        }
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// Contiguous chronological ranges; each must fit at least one window of
/// `window` steps.
pub fn split(n_steps: usize, ratio: SplitRatio, window: usize) -> Result<Splits> {
    let [a, b, c] = ratio.0;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(StlinkError::InvalidConfig(format!("split ratio {ratio} needs three positive parts")));
    }
    let total = a + b + c;
    let train_end = (n_steps as f64 * a / total).round() as usize;
    let val_end = (n_steps as f64 * (a + b) / total).round() as usize;
    let s = Splits { train: 0..train_end, val: train_end..val_end, test: val_end..n_steps };
    for (name, r) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        if r.len() < window {
            return Err(StlinkError::SplitTooShort { name: name, len: r.len(), need: window });
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub t_in: usize,
    pub t_out: usize,
    /// Targets are the first `f_out` features.
    pub f_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `T_in x N x F`, z-scored.
    pub x: Vec<f64>,
    /// `T_out x N x F_out`, original units.
    pub y: Vec<f64>,
    pub marks: Vec<TimeMark>,
    /// First input step.
    pub anchor: usize,
    pub anchor_time: NaiveDateTime,
}

/// Stride-1 windows lying entirely inside `range`.
pub fn make_windows(bundle: &DatasetBundle, range: &std::ops::Range<usize>, spec: WindowSpec, scaler: &Scaler) -> Vec<WindowSample> {
    let span = spec.t_in + spec.t_out;
    if range.len() < span {
        return Vec::new();
    }
    let (n, f) = (bundle.n_nodes, bundle.n_features);
    (range.start..=range.end - span)
        .map(|a| {
            let mut x = Vec::with_capacity(spec.t_in * n * f);
            for t in a..a + spec.t_in {
                for node in 0..n {
                    for k in 0..f {
                        x.push(scaler.transform(bundle.value(node, t, k), k));
                    }
                }
            }
            let mut y = Vec::with_capacity(spec.t_out * n * spec.f_out);
            for t in a + spec.t_in..a + span {
                for node in 0..n {
                    for k in 0..spec.f_out {
                        y.push(bundle.value(node, t, k));
                    }
                }
            }
            WindowSample { x, y, marks: bundle.marks[a..a + spec.t_in].to_vec(), anchor: a, anchor_time: bundle.timestamps[a] }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub base: f64,
    pub amplitude: f64,
    /// Fraction of node `i-1`'s lagged deviation that leaks into node `i`.
    pub coupling: f64,
    pub lag: usize,
    pub noise_std: f64,
    pub interval_min: u32,
    pub start: NaiveDateTime,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base: 50.0,
            amplitude: 10.0,
            coupling: 0.5,
            lag: 1,
            noise_std: 1.0,
            interval_min: 5,
            start: NaiveDateTime::parse_from_str("2024-01-01T00:00:00", TIME_FORMAT).unwrap(),
        }
    }
}

/// Daily sinusoid per node with phase `2 pi i / N`, a lagged leak from node
/// `i-1` and Gaussian noise. One feature.
pub fn synth_generate(n_nodes: usize, n_steps: usize, seed: u64, cfg: &SynthConfig) -> Result<DatasetBundle> {
    if n_nodes < 2 {
        return Err(StlinkError::InvalidConfig(format!("synthetic data needs at least 2 nodes (got {n_nodes})")));
    }
    if cfg.lag == 0 && cfg.coupling != 0.0 {
        return Err(StlinkError::InvalidConfig("coupling needs lag >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| StlinkError::InvalidConfig(e.to_string()))?;
    let period = steps_per_day(cfg.interval_min) as f64;
    let tau = std::f64::consts::TAU;
    let mut dev = vec![0.0; n_steps * n_nodes];
    for t in 0..n_steps {
        for i in 0..n_nodes {
            let phase = tau * i as f64 / n_nodes as f64;
            let mut d = cfg.amplitude * (tau * t as f64 / period + phase).sin();
            if i > 0 && t >= cfg.lag {
                d += cfg.coupling * dev[(t - cfg.lag) * n_nodes + i - 1];
            }
            if cfg.noise_std > 0.0 {
                d += normal.sample(&mut rng);
            }
            dev[t * n_nodes + i] = d;
        }
    }
    let values = dev.into_iter().map(|d| cfg.base + d).collect();
    DatasetBundle::from_values(n_nodes, 1, values, cfg.start, cfg.interval_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent, over unmasked entries with nonzero truth.
    pub mape: f64,
}

/// `None` when every entry is masked.
pub fn metrics(pred: &[f64], truth: &[f64], null_value: Option<f64>) -> Option<Metrics> {
    assert_eq!(pred.len(), truth.len(), "metrics operands differ in length");
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let (mut n, mut n_pct) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if null_value.is_some_and(|nv| t == nv) {
            continue;
        }
        let e = (p - t).abs();
        abs += e;
        sq += e * e;
        n += 1;
        if t != 0.0 {
            pct += e / t.abs();
            n_pct += 1;
        }
    }
    (n > 0).then(|| Metrics {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        mape: if n_pct > 0 { 100.0 * pct / n_pct as f64 } else { f64::NAN },
    })
}

pub const HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonTable {
    pub rows: Vec<HorizonRow>,
    pub aggregate: Option<Metrics>,
}

/// Metrics at forecast steps 3, 6 and 12 (those within `t_out`) plus all steps.
/// `pred` and `truth` are `samples x T_out x width`.
pub fn horizon_metrics(pred: &[f64], truth: &[f64], t_out: usize, width: usize, null_value: Option<f64>) -> HorizonTable {
    let rows = HORIZONS
        .iter()
        .filter(|&&h| h <= t_out)
        .map(|&h| {
            let pick = |xs: &[f64]| -> Vec<f64> { xs.chunks(t_out * width).flat_map(|s| s[(h - 1) * width..h * width].iter().copied()).collect() };
            HorizonRow { horizon: h, metrics: metrics(&pick(pred), &pick(truth), null_value) }
        })
        .collect();
    HorizonTable { rows, aggregate: metrics(pred, truth, null_value) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_text() -> String {
        let mut s = String::from("STLINK-DS v1; nodes=2; features=1; interval_min=5; start=2024-01-01T00:00:00\n");
        for t in 0..10 {
            s.push_str(&format!("2024-01-01T00:{:02}:00,{},{}\n", 5 * t, t, 100 - t));
        }
        s
    }

    fn ramp_bundle(steps: usize) -> DatasetBundle {
        let values = (0..steps * 2).map(|i| i as f64).collect();
        DatasetBundle::from_values(2, 1, values, SynthConfig::default().start, 5).unwrap()
    }

    #[test]
    fn toy_file_round_trips() {
        let b = parse_dataset(&toy_text()).unwrap();
        assert_eq!((b.n_nodes, b.n_steps()), (2, 10));
        assert_eq!(b.value(1, 3, 0), 97.0);
        assert_eq!(b.marks[2], TimeMark { slot: 2, dow: 0 });
        assert_eq!(parse_dataset(&format_dataset(&b)).unwrap(), b);
    }

    #[test]
    fn rows_without_timestamps_follow_the_header_start() {
        let text = "STLINK-DS v1; nodes=1; features=2; interval_min=15; start=2024-01-06T23:45:00\n1,2\n3,4\n";
        let b = parse_dataset(text).unwrap();
        assert_eq!(b.marks, vec![TimeMark { slot: 95, dow: 5 }, TimeMark { slot: 0, dow: 6 }]);
    }

    #[test]
    fn timestamp_gap_names_the_row() {
        let text = toy_text().replace("2024-01-01T00:20:00", "2024-01-01T00:25:00").replace("00:25:00,5", "00:30:00,5");
        let err = parse_dataset(&text).unwrap_err();
        assert!(matches!(err, StlinkError::NonUniformInterval(_)), "{err}");
        assert!(err.to_string().starts_with("non-uniform interval at row"));
        let gap = toy_text().replace("2024-01-01T00:20:00", "2024-01-01T00:22:00");
        assert_eq!(parse_dataset(&gap).unwrap_err().to_string(), "non-uniform interval at row 4");
    }

    #[test]
    fn rejects_nan_bad_widths_and_headers() {
        assert!(parse_dataset(&toy_text().replace(",3,97", ",NaN,97")).is_err());
        assert!(parse_dataset(&toy_text().replace(",3,97", ",3")).is_err());
        assert!(parse_dataset(&toy_text().replace("nodes=2", "nodes=x")).is_err());
        assert!(parse_dataset(&toy_text().replace("STLINK-DS v1", "CSV")).is_err());
        let back = toy_text().replace("2024-01-01T00:20:00", "2024-01-01T00:10:00");
        assert!(parse_dataset(&back).unwrap_err().to_string().contains("non-monotone"));
    }

    #[test]
    fn wide_header_is_accepted() {
        let n = 207;
        let mut text = format!("STLINK-DS v1; nodes={n}; features=1; interval_min=5; start=2012-03-01T00:00:00\n");
        for _ in 0..3 {
            text.push_str(&vec!["60.5"; n].join(","));
            text.push('\n');
        }
        let b = parse_dataset(&text).unwrap();
        assert_eq!((b.n_nodes, b.n_steps()), (207, 3));
    }

    #[test]
    fn split_examples() {
        let s = split(100, "7:1:2".parse().unwrap(), 5).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..70, 70..80, 80..100));
        let s = split(10, "6:2:2".parse().unwrap(), 2).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..6, 6..8, 8..10));
        let err = split(30, SplitRatio::default(), 24).unwrap_err();
        assert!(matches!(err, StlinkError::SplitTooShort { .. }));
        assert!("7:0:3".parse::<SplitRatio>().is_err());
    }

    #[test]
    fn window_counts_and_boundaries() {
        let b = ramp_bundle(60);
        let spec = WindowSpec { t_in: 12, t_out: 12, f_out: 1 };
        let id = Scaler::identity(1);
        assert_eq!(make_windows(&b, &(0..24), spec, &id).len(), 1);
        assert_eq!(make_windows(&b, &(0..25), spec, &id).len(), 2);
        let ws = make_windows(&b, &(10..50), spec, &id);
        assert_eq!(ws.len(), 40 - 24 + 1);
        for w in &ws {
            assert!(w.anchor >= 10 && w.anchor + 24 <= 50);
            // last input step is one interval before the first target step
            assert_eq!(w.x[(spec.t_in - 1) * 2] + 2.0, w.y[0]);
        }
    }

    #[test]
    fn inputs_are_scaled_and_targets_raw() {
        let b = synth_generate(3, 200, 1, &SynthConfig::default()).unwrap();
        let scaler = Scaler::fit(&b, &(0..140)).unwrap();
        let spec = WindowSpec { t_in: 4, t_out: 3, f_out: 1 };
        let w = &make_windows(&b, &(0..140), spec, &scaler)[5];
        for t in 0..4 {
            for n in 0..3 {
                assert!((scaler.inverse(w.x[t * 3 + n], 0) - b.value(n, 5 + t, 0)).abs() < 1e-5);
            }
        }
        assert_eq!(w.y[0], b.value(0, 9, 0));
    }

    #[test]
    fn scaler_only_sees_the_train_range() {
        let b = ramp_bundle(100);
        let s = split(100, SplitRatio::default(), 10).unwrap();
        let train = Scaler::fit(&b, &s.train).unwrap();
        let test = Scaler::fit(&b, &s.test).unwrap();
        assert_ne!(train, test);
        let all = Scaler::fit(&b, &(0..100)).unwrap();
        assert_ne!(train, all);
    }

    #[test]
    fn synth_closed_form_without_noise_or_coupling() {
        let cfg = SynthConfig { coupling: 0.0, noise_std: 0.0, ..SynthConfig::default() };
        let b = synth_generate(4, 600, 3, &cfg).unwrap();
        for n in 0..4 {
            for t in 0..600 - 288 {
                assert!((b.value(n, t, 0) - b.value(n, t + 288, 0)).abs() < 1e-9);
            }
            let want = 50.0 + 10.0 * (std::f64::consts::TAU * n as f64 / 4.0).sin();
            assert!((b.value(n, 0, 0) - want).abs() < 1e-12);
        }
        assert_eq!(synth_generate(4, 50, 9, &SynthConfig::default()).unwrap(), synth_generate(4, 50, 9, &SynthConfig::default()).unwrap());
        assert!(synth_generate(1, 50, 9, &cfg).is_err());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn coupled_nodes_correlate_at_the_lag() {
        let cfg = SynthConfig { coupling: 0.5, lag: 1, ..SynthConfig::default() };
        let b = synth_generate(5, 2000, 11, &cfg).unwrap();
        let node1: Vec<f64> = (1..2000).map(|t| b.value(1, t, 0)).collect();
        let lagged0: Vec<f64> = (0..1999).map(|t| b.value(0, t, 0)).collect();
        assert!(pearson(&node1, &lagged0) > 0.4);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0], None), Some(Metrics { mae: 0.0, rmse: 0.0, mape: 0.0 }));
        let m = metrics(&[2.0, 4.0], &[1.0, 2.0], None).unwrap();
        assert_eq!(m.mae, 1.5);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-15 && (m.rmse - 1.5811).abs() < 1e-4);
        // |2-1|/1 and |4-2|/2 are both 1
        assert_eq!(m.mape, 100.0);
        let m = metrics(&[9.0, 3.0], &[0.0, 2.0], Some(0.0)).unwrap();
        assert_eq!((m.mae, m.mape), (1.0, 50.0));
        assert_eq!(metrics(&[1.0], &[0.0], Some(0.0)), None);
    }

    #[test]
    fn horizon_table_picks_steps() {
        // two samples, T_out = 12, width 1; error at step s equals s
        let truth = vec![10.0; 24];
        let pred: Vec<f64> = (0..24).map(|i| 10.0 + (i % 12 + 1) as f64).collect();
        let table = horizon_metrics(&pred, &truth, 12, 1, None);
        let maes: Vec<f64> = table.rows.iter().map(|r| r.metrics.unwrap().mae).collect();
        assert_eq!(table.rows.iter().map(|r| r.horizon).collect::<Vec<_>>(), vec![3, 6, 12]);
        assert_eq!(maes, vec![3.0, 6.0, 12.0]);
        assert_eq!(table.aggregate.unwrap().mae, 6.5);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = metrics(&p, &t, None).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12);
        }

        #[test]
        fn metrics_ignore_entry_order(pairs in prop::collection::vec((-50.0f64..50.0, 1.0f64..50.0), 1..40), rot in 0usize..40) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            p2.rotate_left(k);
            t2.rotate_left(k);
            p2.reverse();
            t2.reverse();
            let a = metrics(&p, &t, None).unwrap();
            let b = metrics(&p2, &t2, None).unwrap();
            prop_assert!((a.mae - b.mae).abs() < 1e-9 && (a.rmse - b.rmse).abs() < 1e-9 && (a.mape - b.mape).abs() < 1e-9);
        }
    }
}
