//! Explanation stability between clean and adversarial attributions.
//!
//! Three signals are combined into the semantic robustness index (SRI):
//! cosine similarity of the Shapley vectors, Spearman correlation of the
//! feature-importance ranks, and a narrative consistency score produced by a
//! [`NarrativeScorer`]. The SRI then drives a fixed governance ladder.

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{top_k, Attribution, ExplainError};
use crate::metrics::average_ranks;

pub const DEFAULT_INSTRUCTION: &str = "Compare the two credit-risk explanations below. \
The first explains the model's decision on the original input, the second on a perturbed input. \
Score how consistent the two risk narratives are on a scale from 0 (unrelated reasoning) to 1 \
(identical reasoning). Reply with JSON of the form {\"score\": <number in [0,1]>}.";

const NARRATIVE_PREFIX: &str = "High risk due to: ";

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("drift pair mismatch: {0}")]
    Pair(String),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("no drift pairs supplied")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    /// Network-level failure after all retries were spent.
    #[error("scorer unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("scorer protocol error: {0}")]
    Protocol(String),
    #[error("scorer returned {0}, outside [0, 1]")]
    OutOfRange(f64),
    #[error("scorer configuration: {0}")]
    Config(String),
}

impl ScorerError {
    pub fn is_transport(&self) -> bool {
        matches!(self, ScorerError::Transport { .. })
    }
}

/// Clean and adversarial attributions of the same instance under the same model.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPair {
    pub clean: Attribution,
    pub adv: Attribution,
}

impl DriftPair {
    pub fn new(clean: Attribution, adv: Attribution) -> Result<Self, SemanticError> {
        if clean.dim() != adv.dim() {
            return Err(SemanticError::Pair(format!(
                "dimensions {} and {}",
                clean.dim(),
                adv.dim()
            )));
        }
        if clean.instance != adv.instance {
            return Err(SemanticError::Pair(format!(
                "instances {} and {}",
                clean.instance, adv.instance
            )));
        }
        Ok(Self { clean, adv })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of the angle between the two Shapley vectors. Two zero vectors
/// count as identical (1.0); one zero vector against a nonzero one gives 0.0.
pub fn cosine_drift(pair: &DriftPair) -> f64 {
    cosine(&pair.clean.phi, &pair.adv.phi)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

/// Importance ranks: 1 for the largest `|phi|`, ties share their average rank.
pub fn importance_ranks(phi: &[f64]) -> Vec<f64> {
    let neg_abs: Vec<f64> = phi.iter().map(|v| -v.abs()).collect();
    average_ranks(&neg_abs)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation of importance ranks, as Pearson on average ranks.
/// `None` when `d < 2` or either side has no rank variance.
pub fn rank_drift(pair: &DriftPair) -> Option<f64> {
    if pair.clean.dim() < 2 {
        return None;
    }
    pearson(&importance_ranks(&pair.clean.phi), &importance_ranks(&pair.adv.phi))
}

fn default_name(j: usize) -> String {
    format!("f{j}")
}

/// `"High risk due to: feature <name> (<+φ>), ..."` over the top-`k` features.
/// Missing names fall back to `f<index>`.
pub fn narrative_from(attr: &Attribution, k: usize, names: &[String]) -> Result<String, SemanticError> {
    let parts: Vec<String> = top_k(attr, k)?
        .into_iter()
        .map(|(j, v)| {
            let name = names.get(j).cloned().unwrap_or_else(|| default_name(j));
            format!("feature {name} ({v:+.4})")
        })
        .collect();
    Ok(format!("{NARRATIVE_PREFIX}{}", parts.join(", ")))
}

/// One narrative entry: feature name and whether its attribution was negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NarrativeItem {
    pub feature: String,
    pub negative: bool,
}

/// Inverse of [`narrative_from`]. Returns `None` when the text does not follow the template.
pub fn parse_narrative(text: &str) -> Option<Vec<NarrativeItem>> {
    let body = text.strip_prefix(NARRATIVE_PREFIX)?;
    if body.is_empty() {
        return Some(Vec::new());
    }
    let body = body.strip_prefix("feature ")?;
    body.split(", feature ")
        .map(|entry| {
            let open = entry.rfind(" (")?;
            let value = entry[open + 2..].strip_suffix(')')?;
            let negative = match value.chars().next()? {
                '-' => true,
                '+' => false,
                _ => return None,
            };
            value[1..].parse::<f64>().ok()?;
            Some(NarrativeItem {
                feature: entry[..open].to_string(),
                negative,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativePrompt {
    pub clean: String,
    pub adversarial: String,
    pub instruction: String,
}

impl NarrativePrompt {
    pub fn new(clean: String, adversarial: String) -> Self {
        Self {
            clean,
            adversarial,
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

/// Anything that scores the consistency of two narratives in `[0, 1]`.
/// Implementations must be deterministic for a given prompt.
pub trait NarrativeScorer: Send + Sync {
    fn score(&self, prompt: &NarrativePrompt) -> Result<f64, ScorerError>;

    fn name(&self) -> &str;
}

/// Offline scorer: the share of the `k` narrated features that appear in both
/// narratives with the same sign.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateScorer;

impl NarrativeScorer for SurrogateScorer {
    fn score(&self, prompt: &NarrativePrompt) -> Result<f64, ScorerError> {
        let parse =
            |t: &str| parse_narrative(t).ok_or_else(|| ScorerError::Protocol(format!("unrecognised narrative `{t}`")));
        let clean = parse(&prompt.clean)?;
        let adv = parse(&prompt.adversarial)?;
        let k = clean.len().max(adv.len());
        if k == 0 {
            return Ok(1.0);
        }
        let shared = clean.iter().filter(|c| adv.contains(c)).count();
        Ok(shared as f64 / k as f64)
    }

    fn name(&self) -> &str {
        "surrogate"
    }
}

/// Validated call into a scorer. Out-of-range or non-finite replies are rejected, never clamped.
pub fn consistency_score(prompt: &NarrativePrompt, scorer: &dyn NarrativeScorer) -> Result<f64, ScorerError> {
    let s = scorer.score(prompt)?;
    if !s.is_finite() || !(0.0..=1.0).contains(&s) {
        return Err(ScorerError::OutOfRange(s));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteScorerConfig {
    pub url: String,
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for RemoteScorerConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            token: None,
            timeout_ms: 10_000,
            max_retries: 3,
            backoff_ms: 200,
        }
    }
}

impl RemoteScorerConfig {
    /// Reads `SCORER_URL` (required) and `SCORER_TOKEN` (optional).
    pub fn from_env() -> Result<Self, ScorerError> {
        let url = std::env::var("SCORER_URL").map_err(|_| ScorerError::Config("SCORER_URL is not set".into()))?;
        Ok(Self {
            url,
            token: std::env::var("SCORER_TOKEN").ok().filter(|t| !t.is_empty()),
            ..Self::default()
        })
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    clean: &'a str,
    adversarial: &'a str,
    instruction: &'a str,
}

#[derive(Deserialize)]
struct ScoreReply {
    score: serde_json::Value,
}

/// HTTP client for an external scorer.
///
/// Sends `POST {"clean", "adversarial", "instruction"}` and expects `{"score": x}`.
/// Connection failures, timeouts, 429 and 5xx responses are retried with linear
/// backoff; any other non-success status or a malformed body is a protocol error.
pub struct RemoteScorer {
    cfg: RemoteScorerConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteScorer").field("url", &self.cfg.url).finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(ScorerError),
}

impl RemoteScorer {
    pub fn new(cfg: RemoteScorerConfig) -> Result<Self, ScorerError> {
        if cfg.url.is_empty() {
            return Err(ScorerError::Config("scorer URL is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ScorerError::Config(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    pub fn from_env() -> Result<Self, ScorerError> {
        Self::new(RemoteScorerConfig::from_env()?)
    }

    fn attempt(&self, body: &ScoreRequest<'_>) -> Result<f64, Attempt> {
        let mut req = self.client.post(&self.cfg.url).json(body);
        if let Some(token) = &self.cfg.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(ScorerError::Protocol(format!("HTTP {status}"))));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        let reply: ScoreReply = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(ScorerError::Protocol(format!("malformed reply: {e}"))))?;
        reply
            .score
            .as_f64()
            .ok_or_else(|| Attempt::Fatal(ScorerError::Protocol(format!("non-numeric score {}", reply.score))))
    }
}

impl NarrativeScorer for RemoteScorer {
    fn score(&self, prompt: &NarrativePrompt) -> Result<f64, ScorerError> {
        let body = ScoreRequest {
            clean: &prompt.clean,
            adversarial: &prompt.adversarial,
            instruction: &prompt.instruction,
        };
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms * attempt as u64));
            }
            match self.attempt(&body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("scorer attempt {} of {attempts} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(ScorerError::Transport {
            attempts,
            message: last,
        })
    }

    fn name(&self) -> &str {
        "remote"
    }
}

/// Arithmetic mean of the three components.
pub fn sri(cosine: f64, rank: f64, llm: f64) -> f64 {
    (cosine + rank + llm) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SriScore {
    pub value: f64,
    /// Set when at least one component was undefined and left out of the mean.
    pub partial: bool,
}

/// Mean of whichever components are defined; `None` when none are.
pub fn sri_composite(cosine: Option<f64>, rank: Option<f64>, llm: Option<f64>) -> Option<SriScore> {
    let defined: Vec<f64> = [cosine, rank, llm].into_iter().flatten().collect();
    if defined.is_empty() {
        return None;
    }
    if defined.len() == 3 {
        return Some(SriScore {
            value: sri(defined[0], defined[1], defined[2]),
            partial: false,
        });
    }
    Some(SriScore {
        value: defined.iter().sum::<f64>() / defined.len() as f64,
        partial: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GovernanceLevel {
    Normal,
    EnhancedMonitoring,
    ManualReview,
    Quarantine,
}

impl std::fmt::Display for GovernanceLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GovernanceLevel::Normal => "Normal",
            GovernanceLevel::EnhancedMonitoring => "Enhanced monitoring",
            GovernanceLevel::ManualReview => "Manual review",
            GovernanceLevel::Quarantine => "Quarantine",
        })
    }
}

pub fn governance(sri_value: f64) -> GovernanceLevel {
    if sri_value < 0.50 {
        GovernanceLevel::Quarantine
    } else if sri_value < 0.65 {
        GovernanceLevel::ManualReview
    } else if sri_value < 0.75 {
        GovernanceLevel::EnhancedMonitoring
    } else {
        GovernanceLevel::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GovernanceVerdict {
    pub level: GovernanceLevel,
    /// Raw SRI; the level is computed on this value clamped to `[0, 1]`.
    pub sri: f64,
    pub early_warning: bool,
}

impl GovernanceVerdict {
    pub fn new(sri: f64, early_warning: bool) -> Self {
        Self {
            level: governance(sri.clamp(0.0, 1.0)),
            sri,
            early_warning,
        }
    }
}

/// Explanation drift that exceeds performance drift: `ΔSRI > 0` and `ΔSRI > ΔAUROC_stress`.
pub fn early_warning(sri_calm: f64, sri_stress: f64, delta_auroc_stress: f64) -> bool {
    let delta = sri_calm - sri_stress;
    delta > 0.0 && delta > delta_auroc_stress
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftAggregation {
    /// Metrics per instance, then averaged.
    #[default]
    PerInstance,
    /// Metrics once, on the mean-|φ| vectors of each side.
    MeanAbsolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub cosine: f64,
    pub rank_corr: Option<f64>,
    pub llm_score: Option<f64>,
    pub sri: Option<f64>,
    pub sri_partial: bool,
    pub n_instances: usize,
    /// Instances whose rank correlation was undefined.
    pub n_rank_undefined: usize,
    /// Instances the scorer could not be reached for.
    pub n_unscored: usize,
    pub aggregation: DriftAggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSettings {
    pub k: usize,
    pub aggregation: DriftAggregation,
    /// Concurrent scorer calls.
    pub max_in_flight: usize,
}

impl Default for DriftSettings {
    fn default() -> Self {
        Self {
            k: 4,
            aggregation: DriftAggregation::PerInstance,
            max_in_flight: 4,
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn mean_abs(attrs: impl Iterator<Item = Vec<f64>>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut n = 0.0;
    for phi in attrs {
        for (a, v) in acc.iter_mut().zip(phi) {
            *a += v.abs();
        }
        n += 1.0;
    }
    acc.iter().map(|a| a / n).collect()
}

/// Computes cosine, rank and narrative drift across a batch and composes the SRI.
pub fn drift_report(
    pairs: &[DriftPair],
    names: &[String],
    scorer: &dyn NarrativeScorer,
    settings: &DriftSettings,
) -> Result<DriftReport, SemanticError> {
    let Some(first) = pairs.first() else {
        return Err(SemanticError::Empty);
    };
    let d = first.clean.dim();
    let k = settings.k.clamp(1, d);
    let collapsed;
    let working: &[DriftPair] = match settings.aggregation {
        DriftAggregation::PerInstance => pairs,
        DriftAggregation::MeanAbsolute => {
            let clean = mean_abs(pairs.iter().map(|p| p.clean.phi.clone()), d);
            let adv = mean_abs(pairs.iter().map(|p| p.adv.phi.clone()), d);
            let wrap = |phi| Attribution {
                instance: 0,
                phi,
                base_value: 0.0,
                value: 0.0,
            };
            collapsed = [DriftPair::new(wrap(clean), wrap(adv))?];
            &collapsed
        }
    };

    let cosines: Vec<f64> = working.iter().map(cosine_drift).collect();
    let ranks: Vec<Option<f64>> = working.iter().map(rank_drift).collect();
    let prompts = working
        .iter()
        .map(|p| {
            Ok(NarrativePrompt::new(
                narrative_from(&p.clean, k, names)?,
                narrative_from(&p.adv, k, names)?,
            ))
        })
        .collect::<Result<Vec<_>, SemanticError>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.max_in_flight.max(1))
        .build()
        .map_err(|e| ScorerError::Config(e.to_string()))?;
    let scored: Vec<Result<f64, ScorerError>> =
        pool.install(|| prompts.par_iter().map(|p| consistency_score(p, scorer)).collect());

    let mut llm = Vec::with_capacity(scored.len());
    let mut n_unscored = 0;
    for (i, s) in scored.into_iter().enumerate() {
        match s {
            Ok(v) => llm.push(v),
            Err(e) if e.is_transport() => {
                log::warn!("instance {} left unscored: {e}", working[i].clean.instance);
                n_unscored += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }

    let cosine = mean(&cosines).unwrap_or(1.0);
    let defined_ranks: Vec<f64> = ranks.iter().flatten().copied().collect();
    let rank_corr = mean(&defined_ranks);
    let llm_score = mean(&llm);
    let composite = sri_composite(Some(cosine), rank_corr, llm_score);
    Ok(DriftReport {
        cosine,
        rank_corr,
        llm_score,
        sri: composite.map(|s| s.value),
        sri_partial: composite.is_some_and(|s| s.partial),
        n_instances: pairs.len(),
        n_rank_undefined: ranks.len() - defined_ranks.len(),
        n_unscored,
        aggregation: settings.aggregation,
    })
}
