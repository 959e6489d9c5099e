//! ℓ∞-bounded projected gradient attacks on tabular scorers.
//!
//! Every step moves the iterate by `alpha * sign(g)` where `g` is the input
//! gradient of the cross-entropy loss, then projects back onto the ε-ball around
//! the clean point intersected with the feature box. Logistic models use the
//! closed-form gradient; tree ensembles use one-sided finite differences.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{bce, TrainedModel};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("instance {index} feature {feature} = {value} lies outside its bounds [{lo}, {hi}]")]
    OutOfBounds {
        index: usize,
        feature: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Analytic gradients when the model family has them, finite differences otherwise.
    #[default]
    Auto,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// ℓ∞ budget in scaled feature units.
    pub epsilon: f64,
    /// Step size; `epsilon / 4` when unset.
    pub alpha: Option<f64>,
    pub iterations: usize,
    /// Finite-difference probe width.
    pub fd_step: f64,
    /// Per-feature `[lo, hi]`; `[0, 1]` for every feature when unset.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub frozen_features: BTreeSet<usize>,
    pub seed: u64,
    pub gradient: GradientMode,
    /// Targeted mode: descend the loss towards this label instead of ascending the true-label loss.
    pub target: Option<u8>,
    /// Probe each feature at `±alpha` when the whole gradient vanishes.
    pub plateau_probe: bool,
    /// Extra runs from seeded uniform starts inside the ball; the worst case is kept.
    pub restarts: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            alpha: None,
            iterations: 10,
            fd_step: 1e-4,
            bounds: None,
            frozen_features: BTreeSet::new(),
            seed: 0,
            gradient: GradientMode::Auto,
            target: None,
            plateau_probe: false,
            restarts: 0,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }

    pub fn bound(&self, j: usize) -> (f64, f64) {
        self.bounds.as_ref().map_or((0.0, 1.0), |b| b[j])
    }

    pub fn validate(&self, dim: usize) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::Config(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.fd_step > 0.0) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        if self.epsilon > 0.0 {
            let alpha = self.step_size();
            if !(alpha > 0.0) {
                return bad(format!("alpha must be positive, got {alpha}"));
            }
            if alpha > self.epsilon {
                return bad(format!("alpha ({alpha}) must not exceed epsilon ({})", self.epsilon));
            }
            if self.fd_step >= alpha {
                return bad(format!(
                    "fd_step ({}) must be smaller than alpha ({alpha})",
                    self.fd_step
                ));
            }
        }
        if let Some(b) = &self.bounds {
            if b.len() != dim {
                return bad(format!("{} bounds given for {dim} features", b.len()));
            }
            if let Some(j) = b.iter().position(|(lo, hi)| !(lo <= hi)) {
                return bad(format!("bounds for feature {j} are inverted"));
            }
        }
        if let Some(&j) = self.frozen_features.iter().find(|&&j| j >= dim) {
            return bad(format!("frozen feature {j} out of range for {dim} features"));
        }
        if self.target.is_some_and(|t| t > 1) {
            return bad("target label must be 0 or 1".into());
        }
        Ok(())
    }
}

/// Perturbed copies of a batch plus the realised budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub originals: Dataset,
    pub perturbed: Vec<Vec<f64>>,
    /// `max_j |x_adv_j - x_j|` per instance.
    pub linf: Vec<f64>,
    pub iterations: usize,
}

impl AdversarialBatch {
    /// Adversarial rows with the original labels and timestamps.
    pub fn as_dataset(&self) -> Dataset {
        let mut out = self.originals.clone();
        for (inst, adv) in out.instances.iter_mut().zip(&self.perturbed) {
            inst.features.clone_from(adv);
        }
        out
    }

    pub fn max_linf(&self) -> f64 {
        self.linf.iter().cloned().fold(0.0, f64::max)
    }

    /// Writes `id,label,<feature>...,adv_<feature>...,linf_delta`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), AttackError> {
        write_batch_csv(self, std::fs::File::create(path)?)
    }
}

fn loss(model: &TrainedModel, x: &[f64], y: u8) -> f64 {
    bce(model.proba_unchecked(x), y)
}

/// Forward-difference gradient of `BCE(f(x), y)` with probe width `fd_step`.
pub fn finite_diff_grad(model: &TrainedModel, x: &[f64], y: u8, fd_step: f64) -> Result<Vec<f64>, AttackError> {
    if x.len() != model.dim {
        return Err(AttackError::Dimension {
            expected: model.dim,
            got: x.len(),
        });
    }
    Ok(fd_grad_masked(model, x, y, fd_step, &vec![false; x.len()]))
}

fn fd_grad_masked(model: &TrainedModel, x: &[f64], y: u8, fd_step: f64, frozen: &[bool]) -> Vec<f64> {
    let base = loss(model, x, y);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            if frozen[j] {
                return 0.0;
            }
            probe[j] = x[j] + fd_step;
            let up = loss(model, &probe, y);
            probe[j] = x[j];
            (up - base) / fd_step
        })
        .collect()
}

/// Clamp into `[origin - eps, origin + eps]`, then into the feature box; frozen features snap back.
pub fn project(candidate: &[f64], origin: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    candidate
        .iter()
        .zip(origin)
        .enumerate()
        .map(|(j, (&c, &o))| {
            if cfg.frozen_features.contains(&j) {
                return o;
            }
            let (lo, hi) = cfg.bound(j);
            let mut v = c.clamp(o - cfg.epsilon, o + cfg.epsilon).clamp(lo, hi);
            // o ± eps can round a few ulps past the budget
            while (v - o).abs() > cfg.epsilon {
                v = if v > o { next_down(v) } else { next_up(v) };
            }
            v
        })
        .collect()
}

fn next_up(v: f64) -> f64 {
    if v == 0.0 {
        return f64::from_bits(1);
    }
    let bits = v.to_bits();
    f64::from_bits(if v > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(v: f64) -> f64 {
    -next_up(-v)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Attacker<'a> {
    model: &'a TrainedModel,
    cfg: &'a AttackConfig,
    frozen: Vec<bool>,
    analytic: bool,
}

impl Attacker<'_> {
    /// Label whose loss is followed, and +1 to ascend or -1 to descend it.
    fn objective(&self, y_true: u8) -> (u8, f64) {
        match self.cfg.target {
            Some(t) => (t, -1.0),
            None => (y_true, 1.0),
        }
    }

    fn gradient(&self, x: &[f64], label: u8) -> Vec<f64> {
        if self.analytic {
            let mut g = self
                .model
                .grad_analytic(x, label)
                .expect("analytic gradient on differentiable family");
            for (gj, &f) in g.iter_mut().zip(&self.frozen) {
                if f {
                    *gj = 0.0;
                }
            }
            g
        } else {
            fd_grad_masked(self.model, x, label, self.cfg.fd_step, &self.frozen)
        }
    }

    fn plateau_probe(&self, x: &[f64], origin: &[f64], label: u8) -> Vec<f64> {
        let alpha = self.cfg.step_size();
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|j| {
                if self.frozen[j] {
                    return 0.0;
                }
                probe[j] = x[j] + alpha;
                let up = loss(self.model, &project(&probe, origin, self.cfg), label);
                probe[j] = x[j] - alpha;
                let down = loss(self.model, &project(&probe, origin, self.cfg), label);
                probe[j] = x[j];
                up - down
            })
            .collect()
    }

    fn run_from(&self, start: Vec<f64>, origin: &[f64], y_true: u8) -> Vec<f64> {
        let (label, direction) = self.objective(y_true);
        let alpha = self.cfg.step_size();
        let mut x = start;
        for _ in 0..self.cfg.iterations {
            let mut g = self.gradient(&x, label);
            if self.cfg.plateau_probe && g.iter().all(|v| *v == 0.0) {
                g = self.plateau_probe(&x, origin, label);
            }
            let stepped: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| xi + direction * alpha * sign(*gi))
                .collect();
            x = project(&stepped, origin, self.cfg);
        }
        x
    }

    fn attack_one(&self, index: usize, origin: &[f64], y_true: u8) -> Vec<f64> {
        if self.cfg.epsilon == 0.0 {
            return origin.to_vec();
        }
        let (label, direction) = self.objective(y_true);
        let mut best = self.run_from(origin.to_vec(), origin, y_true);
        if self.cfg.restarts == 0 {
            return best;
        }
        let mut best_obj = direction * loss(self.model, &best, label);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64);
        for _ in 0..self.cfg.restarts {
            let noisy: Vec<f64> = origin
                .iter()
                .map(|o| o + rng.random_range(-self.cfg.epsilon..=self.cfg.epsilon))
                .collect();
            let candidate = self.run_from(project(&noisy, origin, self.cfg), origin, y_true);
            let obj = direction * loss(self.model, &candidate, label);
            if obj > best_obj {
                best_obj = obj;
                best = candidate;
            }
        }
        best
    }
}

pub fn pgd_attack(model: &TrainedModel, batch: &Dataset, cfg: &AttackConfig) -> Result<AdversarialBatch, AttackError> {
    if batch.dim() != model.dim {
        return Err(AttackError::Dimension {
            expected: model.dim,
            got: batch.dim(),
        });
    }
    cfg.validate(model.dim)?;
    for (index, inst) in batch.instances.iter().enumerate() {
        if inst.features.len() != model.dim {
            return Err(AttackError::Dimension {
                expected: model.dim,
                got: inst.features.len(),
            });
        }
        for (feature, &value) in inst.features.iter().enumerate() {
            let (lo, hi) = cfg.bound(feature);
            if !(value >= lo && value <= hi) {
                return Err(AttackError::OutOfBounds {
                    index,
                    feature,
                    value,
                    lo,
                    hi,
                });
            }
        }
    }

    let mut frozen = vec![false; model.dim];
    for &j in &cfg.frozen_features {
        frozen[j] = true;
    }
    let attacker = Attacker {
        model,
        cfg,
        frozen,
        analytic: cfg.gradient == GradientMode::Auto && model.is_differentiable(),
    };
    let perturbed: Vec<Vec<f64>> = batch
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| attacker.attack_one(i, &inst.features, inst.label))
        .collect();
    let linf = perturbed
        .iter()
        .zip(&batch.instances)
        .map(|(adv, inst)| {
            adv.iter()
                .zip(&inst.features)
                .map(|(a, o)| (a - o).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(AdversarialBatch {
        originals: batch.clone(),
        perturbed,
        linf,
        iterations: if cfg.epsilon == 0.0 { 0 } else { cfg.iterations },
    })
}

pub fn write_batch_csv<W: Write>(batch: &AdversarialBatch, out: W) -> Result<(), AttackError> {
    let mut w = csv::Writer::from_writer(out);
    let names = &batch.originals.feature_names;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("adv_{n}")));
    header.push("linf_delta".into());
    w.write_record(&header).map_err(|e| AttackError::Io(e.into()))?;
    for (i, (inst, adv)) in batch.originals.instances.iter().zip(&batch.perturbed).enumerate() {
        let mut row = vec![i.to_string(), inst.label.to_string()];
        row.extend(inst.features.iter().map(|v| v.to_string()));
        row.extend(adv.iter().map(|v| v.to_string()));
        row.push(batch.linf[i].to_string());
        w.write_record(&row).map_err(|e| AttackError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Instance;
    use crate::model::TreeNode;

    fn batch(rows: Vec<(Vec<f64>, u8)>) -> Dataset {
        let d = rows[0].0.len();
        Dataset::new(
            (0..d).map(|j| format!("f{j}")).collect(),
            rows.into_iter()
                .map(|(features, label)| Instance {
                    features,
                    label,
                    timestamp: 0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        let cfg = AttackConfig::with_epsilon(0.1);
        assert_eq!(project(&[0.52], &[0.5], &cfg), vec![0.52]);
        let v = project(&[0.9], &[0.5], &cfg)[0];
        assert!((v - 0.6).abs() < 1e-15 && (v - 0.5).abs() <= 0.1);
        assert_eq!(project(&[-0.2], &[0.05], &cfg), vec![0.0]);
        let mut frozen = cfg.clone();
        frozen.frozen_features.insert(0);
        assert_eq!(project(&[0.9], &[0.5], &frozen), vec![0.5]);
    }

    #[test]
    fn projection_never_exceeds_budget_in_floating_point() {
        let cfg = AttackConfig::with_epsilon(0.1);
        for k in 0..1000 {
            let o = 0.1 + 0.8 * (k as f64 / 999.0);
            for c in [o + 1.0, o - 1.0] {
                let v = project(&[c], &[o], &cfg)[0];
                assert!((v - o).abs() <= 0.1, "{o} -> {v}");
            }
        }
    }

    #[test]
    fn finite_differences_on_constant_model() {
        let m = TrainedModel::logistic(vec![0.0, 0.0], 0.0);
        assert_eq!(finite_diff_grad(&m, &[0.2, 0.7], 1, 1e-4).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn finite_differences_cross_a_split() {
        let m = TrainedModel::from_trees(1, 0.0, vec![TreeNode::stump(0, 0.5, -2.0, 2.0)]);
        let g = finite_diff_grad(&m, &[0.49995], 1, 1e-4).unwrap();
        // hand evaluation: loss drops from -ln σ(-2) to -ln σ(2) across the split
        let expected = ((-(crate::model::sigmoid(2.0)).ln()) - (-(crate::model::sigmoid(-2.0)).ln())) / 1e-4;
        assert!((g[0] - expected).abs() < 1e-6 * expected.abs());
        assert!(g[0] < 0.0);
        let flat = finite_diff_grad(&m, &[0.3], 1, 1e-4).unwrap();
        assert_eq!(flat, vec![0.0]);
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = TrainedModel::logistic(vec![1.0, -2.0], 0.3);
        let data = batch(vec![(vec![0.2, 0.4], 1), (vec![0.9, 0.1], 0)]);
        let adv = pgd_attack(&m, &data, &AttackConfig::with_epsilon(0.0)).unwrap();
        assert_eq!(adv.perturbed[0], data.instances[0].features);
        assert_eq!(adv.perturbed[1], data.instances[1].features);
        assert_eq!(adv.max_linf(), 0.0);
    }

    #[test]
    fn logistic_attack_reaches_ball_corner() {
        let w = vec![1.5, -0.7, 0.0];
        let m = TrainedModel::logistic(w.clone(), -0.2);
        let data = batch(vec![
            (vec![0.5, 0.5, 0.5], 1),
            (vec![0.05, 0.97, 0.5], 1),
            (vec![0.4, 0.3, 0.6], 0),
        ]);
        let cfg = AttackConfig::with_epsilon(0.1);
        let adv = pgd_attack(&m, &data, &cfg).unwrap();
        for (inst, x_adv) in data.instances.iter().zip(&adv.perturbed) {
            let dir = if inst.label == 1 { -1.0 } else { 1.0 };
            for j in 0..3 {
                let expected = (inst.features[j] + dir * 0.1 * sign(w[j])).clamp(0.0, 1.0);
                assert!((x_adv[j] - expected).abs() < 1e-12, "{j}: {} vs {expected}", x_adv[j]);
            }
        }
    }

    #[test]
    fn targeted_mode_descends_towards_target() {
        let m = TrainedModel::logistic(vec![2.0], 0.0);
        let data = batch(vec![(vec![0.5], 1)]);
        let mut cfg = AttackConfig::with_epsilon(0.1);
        cfg.target = Some(1);
        let adv = pgd_attack(&m, &data, &cfg).unwrap();
        assert!(adv.perturbed[0][0] > 0.5);
    }

    #[test]
    fn tree_attack_uses_finite_differences() {
        let m = TrainedModel::from_trees(1, 0.0, vec![TreeNode::stump(0, 0.5, -2.0, 2.0)]);
        // positive sitting just above the split: one step across flips its score
        let data = batch(vec![(vec![0.51], 1)]);
        let mut cfg = AttackConfig::with_epsilon(0.1);
        // forward differences only see the split from the left, so probe the plateau
        cfg.plateau_probe = true;
        let adv = pgd_attack(&m, &data, &cfg).unwrap();
        assert!(adv.perturbed[0][0] <= 0.5);
        let mut plain = AttackConfig::with_epsilon(0.1);
        plain.plateau_probe = false;
        let stalled = pgd_attack(&m, &data, &plain).unwrap();
        assert_eq!(stalled.perturbed[0], vec![0.51]);
    }

    #[test]
    fn restarts_never_do_worse_and_are_deterministic() {
        let m = TrainedModel::from_trees(
            2,
            0.0,
            vec![TreeNode::stump(0, 0.5, -2.0, 2.0), TreeNode::stump(1, 0.3, 1.0, -1.0)],
        );
        let data = batch(vec![(vec![0.55, 0.35], 1), (vec![0.45, 0.2], 0)]);
        let mut cfg = AttackConfig::with_epsilon(0.1);
        cfg.restarts = 4;
        cfg.seed = 11;
        let a = pgd_attack(&m, &data, &cfg).unwrap();
        let b = pgd_attack(&m, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let plain = pgd_attack(&m, &data, &AttackConfig::with_epsilon(0.1)).unwrap();
        for (i, inst) in data.instances.iter().enumerate() {
            let with = loss(&m, &a.perturbed[i], inst.label);
            let without = loss(&m, &plain.perturbed[i], inst.label);
            assert!(with >= without);
            assert!(a.linf[i] <= 0.1);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::with_epsilon(0.1);
        cfg.alpha = Some(0.2);
        assert!(cfg.validate(2).is_err());
        cfg.alpha = Some(0.05);
        cfg.fd_step = 0.06;
        assert!(cfg.validate(2).is_err());
        let mut cfg = AttackConfig::with_epsilon(0.1);
        cfg.frozen_features.insert(5);
        assert!(cfg.validate(2).is_err());
        let mut cfg = AttackConfig::with_epsilon(0.1);
        cfg.iterations = 0;
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn rejects_out_of_bounds_and_wrong_dimension() {
        let m = TrainedModel::logistic(vec![1.0], 0.0);
        let data = batch(vec![(vec![1.5], 1)]);
        assert!(matches!(
            pgd_attack(&m, &data, &AttackConfig::default()),
            Err(AttackError::OutOfBounds { index: 0, .. })
        ));
        let data = batch(vec![(vec![0.5, 0.5], 1)]);
        assert!(matches!(
            pgd_attack(&m, &data, &AttackConfig::default()),
            Err(AttackError::Dimension { .. })
        ));
    }

    #[test]
    fn csv_export() {
        let m = TrainedModel::logistic(vec![1.0], 0.0);
        let data = batch(vec![(vec![0.5], 1)]);
        let adv = pgd_attack(&m, &data, &AttackConfig::default()).unwrap();
        let mut out = Vec::new();
        write_batch_csv(&adv, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("id,label,f0,adv_f0,linf_delta"));
        assert!(lines.next().unwrap().starts_with("0,1,0.5,0.4"));
    }
}
