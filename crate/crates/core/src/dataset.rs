//! Time-indexed tabular data, stress-signal regimes and the train/test plumbing
//! that feeds per-regime models.
//!
//! Rows are joined to an exogenous stress series, assigned to a [`Regime`] by
//! two fixed thresholds, min-max scaled so that an ℓ∞ budget means the same
//! thing for every feature, and split 80/20 with class stratification.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("instance {index} (timestamp {timestamp}) has no stress observation")]
    Join { index: usize, timestamp: i64 },
    #[error("invalid regime thresholds: tau_calm ({tau_calm}) must be below tau_stress ({tau_stress})")]
    Thresholds { tau_calm: f64, tau_stress: f64 },
    #[error("stress series timestamps must be strictly increasing (row {row})")]
    UnorderedSeries { row: usize },
    #[error("cannot fit scaling on an empty training set")]
    EmptyTrain,
    #[error("stratified split needs both classes (positives: {positives}, negatives: {negatives})")]
    Stratification { positives: usize, negatives: usize },
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// One labelled observation. `timestamp` is epoch seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f64>,
    pub label: u8,
    pub timestamp: i64,
}

/// An ordered collection of instances sharing one feature schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, instances: Vec<Instance>) -> Result<Self, DatasetError> {
        let d = feature_names.len();
        for (row, inst) in instances.iter().enumerate() {
            if inst.features.len() != d {
                return Err(DatasetError::Parse {
                    row,
                    message: format!("expected {d} features, found {}", inst.features.len()),
                });
            }
            if inst.label > 1 {
                return Err(DatasetError::Parse {
                    row,
                    message: format!("label {} is not 0 or 1", inst.label),
                });
            }
        }
        Ok(Self {
            feature_names,
            instances,
        })
    }

    pub fn empty(feature_names: Vec<String>) -> Self {
        Self {
            feature_names,
            instances: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.instances.iter().filter(|i| i.label == 1).count()
    }

    /// Copy of the rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }
}

/// Column layout of an input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Feature columns in model order. Empty means "every column except label and time".
    #[serde(default)]
    pub features: Vec<String>,
    pub label: String,
    pub time: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl Schema {
    pub fn new(features: Vec<String>, label: impl Into<String>, time: impl Into<String>) -> Self {
        Self {
            features,
            label: label.into(),
            time: time.into(),
            delimiter: ',',
        }
    }
}

/// Parses an ISO-8601 date, date-time, or integer epoch seconds.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S") {
        return Some(dt.and_utc().timestamp());
    }
    chrono::NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, DatasetError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DatasetError::Schema(format!("missing column `{name}`")))
}

/// Loads a dataset from a CSV file. Row indices in errors are zero-based data rows.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset, DatasetError> {
    let bytes = read_file(path.as_ref())?;
    parse_dataset(&bytes, schema)
}

pub fn parse_dataset(bytes: &[u8], schema: &Schema) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(bytes);
    let headers = reader.headers()?.clone();
    let label_col = column_index(&headers, &schema.label)?;
    let time_col = column_index(&headers, &schema.time)?;

    let feature_names: Vec<String> = if schema.features.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_col && *i != time_col)
            .map(|(_, h)| h.trim().to_string())
            .collect()
    } else {
        schema.features.clone()
    };
    let feature_cols = feature_names
        .iter()
        .map(|n| column_index(&headers, n))
        .collect::<Result<Vec<_>, _>>()?;

    let mut instances = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::Parse {
            row,
            message: e.to_string(),
        })?;
        let cell = |col: usize| -> Result<&str, DatasetError> {
            match record.get(col).map(str::trim) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(DatasetError::Parse {
                    row,
                    message: format!("missing value in column `{}`", &headers[col]),
                }),
            }
        };
        let mut features = Vec::with_capacity(feature_cols.len());
        for &col in &feature_cols {
            let raw = cell(col)?;
            let v: f64 = raw.parse().map_err(|_| DatasetError::Parse {
                row,
                message: format!("`{raw}` in column `{}` is not a number", &headers[col]),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::Parse {
                    row,
                    message: format!("non-finite value in column `{}`", &headers[col]),
                });
            }
            features.push(v);
        }
        let label = match cell(label_col)? {
            "0" | "0.0" => 0,
            "1" | "1.0" => 1,
            other => {
                return Err(DatasetError::Parse {
                    row,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        let raw_time = cell(time_col)?;
        let timestamp = parse_timestamp(raw_time).ok_or_else(|| DatasetError::Parse {
            row,
            message: format!("unparseable timestamp `{raw_time}`"),
        })?;
        instances.push(Instance {
            features,
            label,
            timestamp,
        });
    }
    Ok(Dataset {
        feature_names,
        instances,
    })
}

/// How an instance timestamp is matched against the stress series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinMode {
    /// Most recent observation at or before the timestamp.
    #[default]
    CarryForward,
    Exact,
}

/// Stress indicator observations keyed by epoch seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StressSeries {
    entries: BTreeMap<i64, f64>,
}

impl StressSeries {
    /// Builds a series from `(timestamp, value)` pairs, which must be strictly increasing in time.
    pub fn new(points: impl IntoIterator<Item = (i64, f64)>) -> Result<Self, DatasetError> {
        let mut entries = BTreeMap::new();
        let mut last = None;
        for (row, (t, v)) in points.into_iter().enumerate() {
            if last.is_some_and(|prev| t <= prev) {
                return Err(DatasetError::UnorderedSeries { row });
            }
            last = Some(t);
            entries.insert(t, v);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.entries.iter().map(|(t, v)| (*t, *v))
    }

    pub fn lookup(&self, timestamp: i64, mode: JoinMode) -> Option<f64> {
        match mode {
            JoinMode::Exact => self.entries.get(&timestamp).copied(),
            JoinMode::CarryForward => self.entries.range(..=timestamp).next_back().map(|(_, v)| *v),
        }
    }
}

/// Loads a `timestamp,value` CSV.
pub fn load_stress_series(path: impl AsRef<Path>) -> Result<StressSeries, DatasetError> {
    let bytes = read_file(path.as_ref())?;
    parse_stress_series(&bytes)
}

pub fn parse_stress_series(bytes: &[u8]) -> Result<StressSeries, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers()?.clone();
    let t_col = column_index(&headers, "timestamp")?;
    let v_col = column_index(&headers, "value")?;
    let mut points = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::Parse {
            row,
            message: e.to_string(),
        })?;
        let raw_t = record.get(t_col).unwrap_or("").trim();
        let t = parse_timestamp(raw_t).ok_or_else(|| DatasetError::Parse {
            row,
            message: format!("unparseable timestamp `{raw_t}`"),
        })?;
        let raw_v = record.get(v_col).unwrap_or("").trim();
        let v: f64 = raw_v.parse().map_err(|_| DatasetError::Parse {
            row,
            message: format!("stress value `{raw_v}` is not a number"),
        })?;
        points.push((t, v));
    }
    StressSeries::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Calm,
    Stress,
    Neutral,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Calm => "Calm",
            Regime::Stress => "Stress",
            Regime::Neutral => "Neutral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegimeConfig")]
pub struct RegimeConfig {
    tau_calm: f64,
    tau_stress: f64,
}

#[derive(Deserialize)]
struct RawRegimeConfig {
    tau_calm: f64,
    tau_stress: f64,
}

impl TryFrom<RawRegimeConfig> for RegimeConfig {
    type Error = DatasetError;
    fn try_from(raw: RawRegimeConfig) -> Result<Self, Self::Error> {
        RegimeConfig::new(raw.tau_calm, raw.tau_stress)
    }
}

impl RegimeConfig {
    pub fn new(tau_calm: f64, tau_stress: f64) -> Result<Self, DatasetError> {
        if !(tau_calm < tau_stress) {
            return Err(DatasetError::Thresholds { tau_calm, tau_stress });
        }
        Ok(Self { tau_calm, tau_stress })
    }

    pub fn tau_calm(&self) -> f64 {
        self.tau_calm
    }

    pub fn tau_stress(&self) -> f64 {
        self.tau_stress
    }
}

impl Default for RegimeConfig {
    /// VIX-style cut points: calm below 15, stress above 20.
    fn default() -> Self {
        Self {
            tau_calm: 15.0,
            tau_stress: 20.0,
        }
    }
}

/// Both inequalities are strict, so values sitting exactly on a threshold are neutral.
pub fn classify_regime(s_value: f64, cfg: &RegimeConfig) -> Regime {
    if s_value < cfg.tau_calm {
        Regime::Calm
    } else if s_value > cfg.tau_stress {
        Regime::Stress
    } else {
        Regime::Neutral
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSlices {
    pub calm: Dataset,
    pub stress: Dataset,
    pub neutral_count: usize,
}

impl RegimeSlices {
    pub fn get(&self, regime: Regime) -> Option<&Dataset> {
        match regime {
            Regime::Calm => Some(&self.calm),
            Regime::Stress => Some(&self.stress),
            Regime::Neutral => None,
        }
    }
}

pub fn segment_regimes(
    data: &Dataset,
    stress: &StressSeries,
    cfg: &RegimeConfig,
    mode: JoinMode,
) -> Result<RegimeSlices, DatasetError> {
    let mut calm = Dataset::empty(data.feature_names.clone());
    let mut hot = Dataset::empty(data.feature_names.clone());
    let mut neutral_count = 0;
    for (index, inst) in data.instances.iter().enumerate() {
        let s = stress.lookup(inst.timestamp, mode).ok_or(DatasetError::Join {
            index,
            timestamp: inst.timestamp,
        })?;
        match classify_regime(s, cfg) {
            Regime::Calm => calm.instances.push(inst.clone()),
            Regime::Stress => hot.instances.push(inst.clone()),
            Regime::Neutral => neutral_count += 1,
        }
    }
    Ok(RegimeSlices {
        calm,
        stress: hot,
        neutral_count,
    })
}

/// Per-feature min-max ranges fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalingSpec {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Features with zero training range. They scale to 0 and must not be attacked.
    pub fn constant_features(&self) -> Vec<usize> {
        self.min
            .iter()
            .zip(&self.max)
            .enumerate()
            .filter(|(_, (lo, hi))| hi <= lo)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        if range <= 0.0 {
            return 0.0;
        }
        ((v - self.min[j]) / range).clamp(0.0, 1.0)
    }

    pub fn scale_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &v)| self.scale_value(j, v)).collect()
    }

    /// Maps scaled values back to raw units. Constant features return their fitted value.
    pub fn invert_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| self.min[j] + v * (self.max[j] - self.min[j]))
            .collect()
    }
}

pub fn fit_scaling(train: &Dataset) -> Result<ScalingSpec, DatasetError> {
    if train.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    let d = train.dim();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for inst in &train.instances {
        for (j, &v) in inst.features.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(ScalingSpec { min, max })
}

/// Scales every row into `[0, 1]`, clipping values outside the fitted range.
pub fn apply_scaling(data: &Dataset, spec: &ScalingSpec) -> Result<Dataset, DatasetError> {
    if data.dim() != spec.dim() {
        return Err(DatasetError::Dimension {
            expected: spec.dim(),
            got: data.dim(),
        });
    }
    Ok(Dataset {
        feature_names: data.feature_names.clone(),
        instances: data
            .instances
            .iter()
            .map(|inst| Instance {
                features: spec.scale_row(&inst.features),
                label: inst.label,
                timestamp: inst.timestamp,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

/// Per-class seeded shuffle; each class contributes `round(n_class * test_fraction)`
/// rows to the test fold. Both folds keep the parent's row order.
pub fn stratified_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitPair, DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::Fraction(test_fraction));
    }
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.instances[i].label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(DatasetError::Stratification {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let n_test_pos = (pos.len() as f64 * test_fraction).round() as usize;
    let n_test_neg = (neg.len() as f64 * test_fraction).round() as usize;
    let mut test_indices: Vec<usize> = pos[..n_test_pos].iter().chain(&neg[..n_test_neg]).copied().collect();
    let mut train_indices: Vec<usize> = pos[n_test_pos..].iter().chain(&neg[n_test_neg..]).copied().collect();
    test_indices.sort_unstable();
    train_indices.sort_unstable();

    Ok(SplitPair {
        train: data.subset(&train_indices),
        test: data.subset(&test_indices),
        train_indices,
        test_indices,
        seed,
    })
}
