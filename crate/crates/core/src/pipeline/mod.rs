//! End-to-end regime audit: segment, split, train, attack, measure, explain, report.

mod report;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{pgd_attack, AttackConfig, GradientMode};
use crate::dataset::{
    apply_scaling, fit_scaling, load_dataset, load_stress_series, segment_regimes, stratified_split, Dataset, JoinMode,
    Regime, RegimeConfig, Schema, StressSeries,
};
use crate::explain::{attribute_batch, BackgroundSet, OutputSpace, DEFAULT_BACKGROUND_SIZE};
use crate::metrics::{
    amplification, percentile_threshold, AmplificationResult, ConfusionRates, PerformanceReport, ScoredSet,
    ThresholdName, ThresholdReport,
};
use crate::model::{self, ModelSpec};
use crate::risk::{expected_loss, expected_shortfall, value_at_risk, ExposureProfile, LossDistribution, LossUnit};
use crate::semantic::{
    drift_report, early_warning, DriftAggregation, DriftPair, DriftReport, DriftSettings, GovernanceVerdict,
    NarrativeScorer, RemoteScorer, RemoteScorerConfig, SurrogateScorer,
};

pub use report::{emit_report, markdown, report_json, verify_report, REPORT_FILES};
pub use synth::{ground_truth_direction, synth_generate, true_margin, write_synth, SynthSpec};

pub const REPORT_FORMAT_VERSION: u32 = 1;
/// Below this many test rows per regime a sample-size warning is attached.
pub const MIN_TEST_SIZE: usize = 2000;

/// Protocol stage, used to tag errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Segment,
    Split,
    Scale,
    Train,
    Score,
    Attack,
    Metrics,
    Risk,
    Explain,
    Drift,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Segment => "segment",
            Stage::Split => "split",
            Stage::Scale => "scale",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Attack => "attack",
            Stage::Metrics => "metrics",
            Stage::Risk => "risk",
            Stage::Explain => "explain",
            Stage::Drift => "drift",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("[{stage}] {regime}: {source}")]
    Stage {
        stage: Stage,
        regime: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("[config] {0}")]
    Config(String),
    #[error("[report] inconsistent report: {0}")]
    Inconsistent(String),
    #[error("[report] i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("[report] serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Stage { stage, .. } => *stage,
            PipelineError::Config(_) => Stage::Config,
            _ => Stage::Report,
        }
    }

    pub(crate) fn csv(e: csv::Error) -> Self {
        PipelineError::Io(e.into())
    }
}

fn at<E>(stage: Stage, regime: impl fmt::Display) -> impl FnOnce(E) -> PipelineError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| PipelineError::Stage {
        stage,
        regime: regime.to_string(),
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSettings {
    /// Features narrated per explanation.
    pub k: usize,
    pub background_size: usize,
    /// Test rows audited per regime (seeded sample).
    pub audit_sample: usize,
    pub output: OutputSpace,
    pub aggregation: DriftAggregation,
    pub max_in_flight: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            k: 4,
            background_size: DEFAULT_BACKGROUND_SIZE,
            audit_sample: 200,
            output: OutputSpace::Probability,
            aggregation: DriftAggregation::PerInstance,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSelection {
    #[default]
    Surrogate,
    /// Endpoint and token come from `SCORER_URL` / `SCORER_TOKEN`.
    Remote {
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: usize,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    RemoteScorerConfig::default().timeout_ms
}
fn default_retries() -> usize {
    RemoteScorerConfig::default().max_retries
}
fn default_backoff_ms() -> u64 {
    RemoteScorerConfig::default().backoff_ms
}

impl ScorerSelection {
    pub fn build(&self) -> Result<Box<dyn NarrativeScorer>, PipelineError> {
        match self {
            ScorerSelection::Surrogate => Ok(Box::new(SurrogateScorer)),
            ScorerSelection::Remote {
                timeout_ms,
                max_retries,
                backoff_ms,
            } => {
                let base = RemoteScorerConfig::from_env().map_err(|e| PipelineError::Config(e.to_string()))?;
                let scorer = RemoteScorer::new(RemoteScorerConfig {
                    timeout_ms: *timeout_ms,
                    max_retries: *max_retries,
                    backoff_ms: *backoff_ms,
                    ..base
                })
                .map_err(|e| PipelineError::Config(e.to_string()))?;
                Ok(Box::new(scorer))
            }
        }
    }
}

fn default_thresholds() -> Vec<f64> {
    vec![90.0, 50.0, 95.0]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_test_cap() -> Option<usize> {
    Some(MIN_TEST_SIZE)
}
fn default_var_alpha() -> f64 {
    0.95
}

/// Everything a run needs. Serialized verbatim into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub stress: PathBuf,
    pub schema: Schema,
    #[serde(default)]
    pub join: JoinMode,
    #[serde(default)]
    pub regimes: RegimeConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub exposure: ExposureProfile,
    /// Percentiles of the clean score distribution used as decision thresholds.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub explain: ExplainSettings,
    #[serde(default)]
    pub scorer: ScorerSelection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Test folds larger than this are subsampled (seeded, per class) after splitting.
    #[serde(default = "default_test_cap")]
    pub test_size_cap: Option<usize>,
    #[serde(default = "default_var_alpha")]
    pub var_alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, stress: impl Into<PathBuf>, schema: Schema) -> Self {
        Self {
            dataset: dataset.into(),
            stress: stress.into(),
            schema,
            join: JoinMode::default(),
            regimes: RegimeConfig::default(),
            model: ModelSpec::default(),
            attack: AttackConfig::default(),
            exposure: ExposureProfile::default(),
            thresholds: default_thresholds(),
            explain: ExplainSettings::default(),
            scorer: ScorerSelection::default(),
            seeds: default_seeds(),
            test_fraction: default_test_fraction(),
            test_size_cap: default_test_cap(),
            var_alpha: default_var_alpha(),
            output_dir: None,
        }
    }

    /// Parses a JSON config; relative paths resolve against the config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.stress);
        if let Some(out) = cfg.output_dir.as_mut() {
            resolve(out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(self.var_alpha > 0.0 && self.var_alpha < 1.0) {
            return bad(format!("var_alpha must lie in (0, 1), got {}", self.var_alpha));
        }
        if let Some(p) = self.thresholds.iter().find(|p| !(0.0..=100.0).contains(*p)) {
            return bad(format!("threshold percentile {p} outside [0, 100]"));
        }
        if self.explain.k == 0 || self.explain.background_size == 0 || self.explain.audit_sample == 0 {
            return bad("explain.k, background_size and audit_sample must be positive".into());
        }
        self.model
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.exposure
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.test_size_cap == Some(0) {
            return bad("test_size_cap must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub name: ThresholdName,
    pub percentile: f64,
    pub tau: f64,
    pub clean: ConfusionRates,
    pub adversarial: ConfusionRates,
    /// `FNR_adv - FNR_clean`.
    pub delta_fnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub el_clean: f64,
    pub el_adv: f64,
    pub delta_el: f64,
    pub delta_el_pct: Option<f64>,
    pub alpha: f64,
    pub tail_unit: LossUnit,
    pub var_clean: f64,
    pub var_adv: f64,
    pub es_clean: f64,
    pub es_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub gradient: String,
    pub frozen_features: Vec<usize>,
    pub max_linf: f64,
    pub mean_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub n_instances: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_test_positive: usize,
    pub clean: PerformanceReport,
    pub adversarial: PerformanceReport,
    pub delta_auroc: f64,
    pub delta_accuracy: f64,
    pub thresholds: Vec<ThresholdRow>,
    pub risk: RiskRow,
    pub attack: AttackSummary,
    pub drift: Option<DriftReport>,
    pub governance: Option<GovernanceVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAmplification {
    pub name: ThresholdName,
    pub percentile: f64,
    /// `None` when either regime's ΔFNR is undefined.
    pub amplification: Option<AmplificationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRegimeReport {
    pub raf: AmplificationResult,
    pub fnr_amplification: Vec<ThresholdAmplification>,
    pub delta_sri: Option<f64>,
    pub early_warning: bool,
}

/// Headline numbers from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReplicate {
    pub seed: u64,
    pub delta_auroc_calm: f64,
    pub delta_auroc_stress: f64,
    pub raf: Option<f64>,
    /// ΔFNR at the balanced (50th percentile) threshold, when configured.
    pub delta_fnr_balanced_calm: Option<f64>,
    pub delta_fnr_balanced_stress: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicates: Vec<SeedReplicate>,
    pub raf_mean: Option<f64>,
    pub raf_min: Option<f64>,
    pub raf_max: Option<f64>,
    /// Mean stress degradation over mean calm degradation.
    pub pooled_raf: Option<f64>,
    pub n_undefined: usize,
}

impl ReplicateSummary {
    pub fn from_replicates(replicates: Vec<SeedReplicate>) -> Self {
        let rafs: Vec<f64> = replicates.iter().filter_map(|r| r.raf).collect();
        let n = replicates.len() as f64;
        let mean_calm = replicates.iter().map(|r| r.delta_auroc_calm).sum::<f64>() / n;
        let mean_stress = replicates.iter().map(|r| r.delta_auroc_stress).sum::<f64>() / n;
        Self {
            raf_mean: (!rafs.is_empty()).then(|| rafs.iter().sum::<f64>() / rafs.len() as f64),
            raf_min: rafs.iter().copied().reduce(f64::min),
            raf_max: rafs.iter().copied().reduce(f64::max),
            pooled_raf: amplification(mean_stress, mean_calm).factor,
            n_undefined: replicates.len() - rafs.len(),
            replicates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub config: RunConfig,
    /// Seed behind the per-regime sections.
    pub seed: u64,
    pub n_instances: usize,
    pub neutral_count: usize,
    pub calm: RegimeReport,
    pub stress: RegimeReport,
    pub cross: CrossRegimeReport,
    /// Present when the config lists more than one seed.
    pub replication: Option<ReplicateSummary>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn regime(&self, regime: Regime) -> Option<&RegimeReport> {
        match regime {
            Regime::Calm => Some(&self.calm),
            Regime::Stress => Some(&self.stress),
            Regime::Neutral => None,
        }
    }
}

/// SplitMix64 finaliser, used to derive independent per-stage seeds.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SALT_SUBSAMPLE: u64 = 1;
const SALT_ATTACK: u64 = 2;
const SALT_BACKGROUND: u64 = 3;
const SALT_AUDIT: u64 = 4;

/// Keeps `cap` rows, drawing from each class in proportion to its share.
fn stratified_subsample(data: &Dataset, cap: usize, seed: u64) -> Dataset {
    if data.len() <= cap {
        return data.clone();
    }
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.instances[i].label == 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let keep_pos = ((pos.len() as f64 * cap as f64 / data.len() as f64).round() as usize).min(cap);
    let keep_neg = cap - keep_pos;
    let mut keep: Vec<usize> = pos[..keep_pos]
        .iter()
        .chain(&neg[..keep_neg.min(neg.len())])
        .copied()
        .collect();
    keep.sort_unstable();
    data.subset(&keep)
}

struct RegimeRun {
    report: RegimeReport,
    warnings: Vec<String>,
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn run_regime(
    cfg: &RunConfig,
    regime: Regime,
    slice: &Dataset,
    seed: u64,
    scorer: Option<&dyn NarrativeScorer>,
) -> Result<RegimeRun, PipelineError> {
    let mut warnings = Vec::new();
    let split = stratified_split(slice, cfg.test_fraction, seed).map_err(at(Stage::Split, regime))?;
    let test_raw = match cfg.test_size_cap {
        Some(cap) => stratified_subsample(&split.test, cap, mix(seed, SALT_SUBSAMPLE)),
        None => split.test.clone(),
    };
    if test_raw.len() < MIN_TEST_SIZE {
        warnings.push(format!(
            "{regime}: {} test instances, below the {MIN_TEST_SIZE} recommended for stable estimates",
            test_raw.len()
        ));
    }

    let scaling = fit_scaling(&split.train).map_err(at(Stage::Scale, regime))?;
    let train = apply_scaling(&split.train, &scaling).map_err(at(Stage::Scale, regime))?;
    let test = apply_scaling(&test_raw, &scaling).map_err(at(Stage::Scale, regime))?;

    let mut trained = model::train(&cfg.model, &train).map_err(at(Stage::Train, regime))?;
    trained.scaling = Some(scaling.clone());

    let clean_scores = trained.predict_batch(&test).map_err(at(Stage::Score, regime))?;
    let labels = test.labels();
    let clean_set = ScoredSet::new(clean_scores.clone(), labels.clone()).map_err(at(Stage::Metrics, regime))?;
    let clean = PerformanceReport::compute(&clean_set, 0.5).map_err(at(Stage::Metrics, regime))?;

    let mut attack_cfg = cfg.attack.clone();
    attack_cfg.seed = mix(seed ^ cfg.attack.seed, SALT_ATTACK);
    attack_cfg.frozen_features.extend(scaling.constant_features());
    let adv_batch = pgd_attack(&trained, &test, &attack_cfg).map_err(at(Stage::Attack, regime))?;
    if adv_batch.originals != test {
        return Err(PipelineError::Inconsistent(format!(
            "{regime}: attack mutated its input batch"
        )));
    }
    let adv_data = adv_batch.as_dataset();
    let adv_scores = trained.predict_batch(&adv_data).map_err(at(Stage::Score, regime))?;
    let adv_set = ScoredSet::new(adv_scores.clone(), labels).map_err(at(Stage::Metrics, regime))?;
    let adversarial = PerformanceReport::compute(&adv_set, 0.5).map_err(at(Stage::Metrics, regime))?;

    let mut thresholds = Vec::with_capacity(cfg.thresholds.len());
    for &pct in &cfg.thresholds {
        let tau = percentile_threshold(&clean_scores, pct).map_err(at(Stage::Metrics, regime))?;
        let c = ThresholdReport::at(&clean_set, pct, tau);
        let a = ThresholdReport::at(&adv_set, pct, tau);
        thresholds.push(ThresholdRow {
            name: c.name,
            percentile: pct,
            tau,
            clean: ConfusionRates { fnr: c.fnr, fpr: c.fpr },
            adversarial: ConfusionRates { fnr: a.fnr, fpr: a.fpr },
            delta_fnr: a.fnr.zip(c.fnr).map(|(x, y)| x - y),
        });
    }

    let risk = {
        let el_clean = expected_loss(&clean_scores, &cfg.exposure).map_err(at(Stage::Risk, regime))?;
        let el_adv = expected_loss(&adv_scores, &cfg.exposure).map_err(at(Stage::Risk, regime))?;
        let unit = cfg.exposure.tail_unit;
        let dc = LossDistribution::from_scores(&clean_scores, &cfg.exposure, unit).map_err(at(Stage::Risk, regime))?;
        let da = LossDistribution::from_scores(&adv_scores, &cfg.exposure, unit).map_err(at(Stage::Risk, regime))?;
        let a = cfg.var_alpha;
        RiskRow {
            el_clean,
            el_adv,
            delta_el: el_adv - el_clean,
            delta_el_pct: (el_clean > 0.0).then(|| 100.0 * (el_adv - el_clean) / el_clean),
            alpha: a,
            tail_unit: unit,
            var_clean: value_at_risk(&dc, a).map_err(at(Stage::Risk, regime))?,
            var_adv: value_at_risk(&da, a).map_err(at(Stage::Risk, regime))?,
            es_clean: expected_shortfall(&dc, a).map_err(at(Stage::Risk, regime))?,
            es_adv: expected_shortfall(&da, a).map_err(at(Stage::Risk, regime))?,
        }
    };

    let drift = match scorer {
        None => None,
        Some(scorer) => {
            let bg = BackgroundSet::sample(&train, cfg.explain.background_size, mix(seed, SALT_BACKGROUND))
                .map_err(at(Stage::Explain, regime))?;
            let n_audit = cfg.explain.audit_sample.min(test.len());
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, SALT_AUDIT));
            let mut audit = index::sample(&mut rng, test.len(), n_audit).into_vec();
            audit.sort_unstable();
            let clean_rows: Vec<Vec<f64>> = audit.iter().map(|&i| test.instances[i].features.clone()).collect();
            let adv_rows: Vec<Vec<f64>> = audit.iter().map(|&i| adv_batch.perturbed[i].clone()).collect();
            let out = cfg.explain.output;
            let clean_attr = attribute_batch(&trained, &clean_rows, &bg, out).map_err(at(Stage::Explain, regime))?;
            let adv_attr = attribute_batch(&trained, &adv_rows, &bg, out).map_err(at(Stage::Explain, regime))?;
            let pairs = clean_attr
                .into_iter()
                .zip(adv_attr)
                .zip(&audit)
                .map(|((mut c, mut a), &i)| {
                    c.instance = i;
                    a.instance = i;
                    DriftPair::new(c, a)
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(at(Stage::Drift, regime))?;
            let settings = DriftSettings {
                k: cfg.explain.k,
                aggregation: cfg.explain.aggregation,
                max_in_flight: cfg.explain.max_in_flight,
            };
            Some(drift_report(&pairs, &test.feature_names, scorer, &settings).map_err(at(Stage::Drift, regime))?)
        }
    };

    let attack = AttackSummary {
        epsilon: attack_cfg.epsilon,
        alpha: attack_cfg.step_size(),
        iterations: adv_batch.iterations,
        gradient: if attack_cfg.gradient == GradientMode::Auto && trained.is_differentiable() {
            "analytic".into()
        } else {
            "finite_difference".into()
        },
        frozen_features: attack_cfg.frozen_features.iter().copied().collect(),
        max_linf: adv_batch.max_linf(),
        mean_linf: mean_or_zero(&adv_batch.linf),
    };

    Ok(RegimeRun {
        report: RegimeReport {
            regime,
            n_instances: slice.len(),
            n_train: train.len(),
            n_test: test.len(),
            n_test_positive: test.positives(),
            clean,
            adversarial,
            delta_auroc: clean.auroc - adversarial.auroc,
            delta_accuracy: clean.accuracy - adversarial.accuracy,
            thresholds,
            risk,
            attack,
            drift,
            governance: None,
        },
        warnings,
    })
}

fn cross_regime(calm: &RegimeReport, stress: &RegimeReport) -> CrossRegimeReport {
    let raf = amplification(stress.delta_auroc, calm.delta_auroc);
    let fnr_amplification = calm
        .thresholds
        .iter()
        .zip(&stress.thresholds)
        .map(|(c, s)| ThresholdAmplification {
            name: c.name,
            percentile: c.percentile,
            amplification: s.delta_fnr.zip(c.delta_fnr).map(|(ds, dc)| amplification(ds, dc)),
        })
        .collect();
    let sri_calm = calm.drift.as_ref().and_then(|d| d.sri);
    let sri_stress = stress.drift.as_ref().and_then(|d| d.sri);
    let (delta_sri, warning) = match (sri_calm, sri_stress) {
        (Some(c), Some(s)) => (Some(c - s), early_warning(c, s, stress.delta_auroc)),
        _ => (None, false),
    };
    CrossRegimeReport {
        raf,
        fnr_amplification,
        delta_sri,
        early_warning: warning,
    }
}

fn balanced_delta(r: &RegimeReport) -> Option<f64> {
    r.thresholds
        .iter()
        .find(|t| t.name == ThresholdName::Balanced)
        .and_then(|t| t.delta_fnr)
}

fn seed_replicate(seed: u64, calm: &RegimeReport, stress: &RegimeReport) -> SeedReplicate {
    SeedReplicate {
        seed,
        delta_auroc_calm: calm.delta_auroc,
        delta_auroc_stress: stress.delta_auroc,
        raf: amplification(stress.delta_auroc, calm.delta_auroc).factor,
        delta_fnr_balanced_calm: balanced_delta(calm),
        delta_fnr_balanced_stress: balanced_delta(stress),
    }
}

/// Input data already segmented into regimes.
pub struct PreparedData {
    pub calm: Dataset,
    pub stress: Dataset,
    pub n_instances: usize,
    pub neutral_count: usize,
}

pub fn prepare(cfg: &RunConfig, data: &Dataset, stress: &StressSeries) -> Result<PreparedData, PipelineError> {
    let slices = segment_regimes(data, stress, &cfg.regimes, cfg.join).map_err(at(Stage::Segment, "all"))?;
    Ok(PreparedData {
        calm: slices.calm,
        stress: slices.stress,
        n_instances: data.len(),
        neutral_count: slices.neutral_count,
    })
}

fn run_pair(
    cfg: &RunConfig,
    prepared: &PreparedData,
    seed: u64,
    scorer: Option<&dyn NarrativeScorer>,
) -> Result<(RegimeRun, RegimeRun), PipelineError> {
    let (calm, stress) = rayon::join(
        || run_regime(cfg, Regime::Calm, &prepared.calm, seed, scorer),
        || run_regime(cfg, Regime::Stress, &prepared.stress, seed, scorer),
    );
    Ok((calm?, stress?))
}

/// Full protocol on in-memory data. The first seed produces the detailed
/// sections; every seed contributes to the replication summary.
pub fn run_on_data(cfg: &RunConfig, data: &Dataset, stress: &StressSeries) -> Result<EvaluationReport, PipelineError> {
    cfg.validate()?;
    let scorer = cfg.scorer.build()?;
    let prepared = prepare(cfg, data, stress)?;
    let primary_seed = cfg.seeds[0];
    let (calm_run, stress_run) = run_pair(cfg, &prepared, primary_seed, Some(scorer.as_ref()))?;
    let mut calm = calm_run.report;
    let mut hot = stress_run.report;
    let cross = cross_regime(&calm, &hot);
    for r in [&mut calm, &mut hot] {
        r.governance = r
            .drift
            .as_ref()
            .and_then(|d| d.sri)
            .map(|s| GovernanceVerdict::new(s, cross.early_warning));
    }

    let replication = if cfg.seeds.len() > 1 {
        let mut replicates = vec![seed_replicate(primary_seed, &calm, &hot)];
        replicates.extend(replicate_seeds(cfg, &prepared, &cfg.seeds[1..])?);
        Some(ReplicateSummary::from_replicates(replicates))
    } else {
        None
    };

    let mut warnings = calm_run.warnings;
    warnings.extend(stress_run.warnings);
    if cross.raf.factor.is_none() {
        warnings.push("RAF undefined: calm regime shows no AUROC degradation".into());
    }
    let report = EvaluationReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        seed: primary_seed,
        n_instances: prepared.n_instances,
        neutral_count: prepared.neutral_count,
        calm,
        stress: hot,
        cross,
        replication,
        warnings,
    };
    verify_report(&report)?;
    Ok(report)
}

fn replicate_seeds(
    cfg: &RunConfig,
    prepared: &PreparedData,
    seeds: &[u64],
) -> Result<Vec<SeedReplicate>, PipelineError> {
    seeds
        .par_iter()
        .map(|&seed| {
            let (c, s) = run_pair(cfg, prepared, seed, None)?;
            Ok(seed_replicate(seed, &c.report, &s.report))
        })
        .collect()
}

pub fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, StressSeries), PipelineError> {
    let data = load_dataset(&cfg.dataset, &cfg.schema).map_err(at(Stage::Load, cfg.dataset.display()))?;
    let stress = load_stress_series(&cfg.stress).map_err(at(Stage::Load, cfg.stress.display()))?;
    Ok((data, stress))
}

pub fn run_protocol(cfg: &RunConfig) -> Result<EvaluationReport, PipelineError> {
    cfg.validate()?;
    let (data, stress) = load_inputs(cfg)?;
    run_on_data(cfg, &data, &stress)
}

/// RAF stability across seeds on in-memory data. Explanation auditing is skipped.
pub fn replicate_on_data(
    cfg: &RunConfig,
    data: &Dataset,
    stress: &StressSeries,
) -> Result<ReplicateSummary, PipelineError> {
    cfg.validate()?;
    if cfg.seeds.len() < 2 {
        return Err(PipelineError::Config(format!(
            "replication needs at least two seeds, got {}",
            cfg.seeds.len()
        )));
    }
    let prepared = prepare(cfg, data, stress)?;
    Ok(ReplicateSummary::from_replicates(replicate_seeds(
        cfg, &prepared, &cfg.seeds,
    )?))
}

pub fn replicate(cfg: &RunConfig) -> Result<ReplicateSummary, PipelineError> {
    cfg.validate()?;
    let (data, stress) = load_inputs(cfg)?;
    replicate_on_data(cfg, &data, &stress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LogisticParams;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::new("unused.csv", "unused.csv", Schema::new(vec![], "y", "t"));
        cfg.model = ModelSpec::logistic(LogisticParams::default());
        cfg.explain.audit_sample = 20;
        cfg.explain.background_size = 16;
        cfg
    }

    fn small_data(compression: f64) -> (Dataset, StressSeries) {
        synth_generate(&SynthSpec {
            n_per_regime: 600,
            d: 4,
            compression,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_budget_has_no_degradation() {
        let (data, stress) = small_data(0.6);
        let mut cfg = small_cfg();
        cfg.attack = AttackConfig::with_epsilon(0.0);
        let report = run_on_data(&cfg, &data, &stress).unwrap();
        for r in [&report.calm, &report.stress] {
            assert_eq!(r.delta_auroc, 0.0);
            assert!(r.thresholds.iter().all(|t| t.delta_fnr == Some(0.0)));
            assert_eq!(r.attack.max_linf, 0.0);
        }
        assert_eq!(report.cross.raf.factor, None);
        assert!(report.warnings.iter().any(|w| w.contains("RAF undefined")));
    }

    #[test]
    fn report_is_deterministic_and_consistent() {
        let (data, stress) = small_data(0.6);
        let mut cfg = small_cfg();
        cfg.seeds = vec![3, 4];
        let a = run_on_data(&cfg, &data, &stress).unwrap();
        let b = run_on_data(&cfg, &data, &stress).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.calm.thresholds.len(), 3);
        assert_eq!(a.replication.as_ref().unwrap().replicates.len(), 2);
        assert!(a.warnings.iter().any(|w| w.contains("recommended")));
        let drift = a.calm.drift.as_ref().unwrap();
        assert_eq!(drift.n_instances, 20);
        assert!(a.calm.governance.is_some());
    }

    #[test]
    fn replicate_needs_two_seeds() {
        let (data, stress) = small_data(1.0);
        let cfg = small_cfg();
        assert!(matches!(
            replicate_on_data(&cfg, &data, &stress),
            Err(PipelineError::Config(_))
        ));
        let mut cfg = small_cfg();
        cfg.seeds = vec![9, 9];
        let summary = replicate_on_data(&cfg, &data, &stress).unwrap();
        assert_eq!(summary.replicates[0], summary.replicates[1]);
    }

    #[test]
    fn stage_tags_on_errors() {
        let (data, _) = small_data(1.0);
        let cfg = small_cfg();
        let empty = StressSeries::default();
        let err = run_on_data(&cfg, &data, &empty).unwrap_err();
        assert_eq!(err.stage(), Stage::Segment);
        assert!(err.to_string().starts_with("[segment]"));
    }

    #[test]
    fn subsample_keeps_class_mix() {
        let (data, _) = small_data(1.0);
        let sub = stratified_subsample(&data, 100, 1);
        assert_eq!(sub.len(), 100);
        let parent = data.positives() as f64 / data.len() as f64;
        assert!((sub.positives() as f64 - parent * 100.0).abs() <= 1.0);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"dataset":"d.csv","stress":"s.csv","schema":{"label":"y","time":"t"}}"#).unwrap();
        assert_eq!(cfg.thresholds, vec![90.0, 50.0, 95.0]);
        assert_eq!(cfg.attack.epsilon, 0.1);
        assert_eq!(cfg.attack.iterations, 10);
        assert_eq!(cfg.regimes.tau_calm(), 15.0);
        assert_eq!(cfg.scorer, ScorerSelection::Surrogate);
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
