//! Per-regime binary scorers.
//!
//! Two families are supported: a logistic model fitted by full-batch gradient
//! descent, which has an analytic input gradient, and gradient-boosted regression
//! trees fitted on binary cross-entropy with Newton leaf values, which does not.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, ScalingSpec};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Probabilities are kept this far away from 0 and 1.
const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("training set needs both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("analytic gradients are unavailable for the {0} family; use finite differences")]
    UnsupportedFamily(&'static str),
    #[error("model document: {0}")]
    Document(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    pub learning_rate: f64,
    pub n_epochs: usize,
    pub l2: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            n_epochs: 500,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub learning_rate: f64,
    pub n_rounds: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub l2: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            n_rounds: 100,
            max_depth: 4,
            min_leaf: 20,
            l2: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params")]
pub enum ModelFamily {
    Logistic(LogisticParams),
    GradientBoostedTrees(TreeParams),
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Logistic(_) => "logistic",
            ModelFamily::GradientBoostedTrees(_) => "gradient-boosted-trees",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub family: ModelFamily,
    /// Recorded for audit. Both fitting procedures are deterministic and draw no randomness.
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn logistic(params: LogisticParams) -> Self {
        Self {
            family: ModelFamily::Logistic(params),
            seed: 0,
        }
    }

    pub fn trees(params: TreeParams) -> Self {
        Self {
            family: ModelFamily::GradientBoostedTrees(params),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Hyperparams(m.to_string()));
        match self.family {
            ModelFamily::Logistic(p) => {
                if !(p.learning_rate > 0.0) {
                    return bad("learning_rate must be positive");
                }
                if p.n_epochs == 0 {
                    return bad("n_epochs must be at least 1");
                }
                if !(p.l2 >= 0.0) {
                    return bad("l2 must be non-negative");
                }
            }
            ModelFamily::GradientBoostedTrees(p) => {
                if !(p.learning_rate > 0.0) {
                    return bad("learning_rate must be positive");
                }
                if p.n_rounds == 0 {
                    return bad("n_rounds must be at least 1");
                }
                if p.max_depth == 0 {
                    return bad("max_depth must be at least 1");
                }
                if p.min_leaf == 0 {
                    return bad("min_leaf must be at least 1");
                }
                if !(p.l2 >= 0.0) {
                    return bad("l2 must be non-negative");
                }
            }
        }
        Ok(())
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::trees(TreeParams::default())
    }
}

/// A regression tree node. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    pub fn leaf(value: f64) -> Self {
        TreeNode::Leaf { value }
    }

    pub fn stump(feature: usize, threshold: f64, left: f64, right: f64) -> Self {
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(TreeNode::leaf(left)),
            right: Box::new(TreeNode::leaf(right)),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn collect_features(&self, out: &mut Vec<usize>) {
        if let TreeNode::Split {
            feature, left, right, ..
        } = self
        {
            out.push(*feature);
            left.collect_features(out);
            right.collect_features(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Logistic { weights: Vec<f64>, bias: f64 },
    Trees { base_score: f64, trees: Vec<TreeNode> },
}

/// An immutable fitted scorer `f: R^d -> (0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub dim: usize,
    pub params: ModelParams,
    /// Scaling applied to raw features before they reach the model, kept for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSpec>,
}

pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Binary cross-entropy of probability `p` against label `y`.
pub fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

impl TrainedModel {
    pub fn logistic(weights: Vec<f64>, bias: f64) -> Self {
        Self {
            spec: ModelSpec::logistic(LogisticParams::default()),
            dim: weights.len(),
            params: ModelParams::Logistic { weights, bias },
            scaling: None,
        }
    }

    pub fn from_trees(dim: usize, base_score: f64, trees: Vec<TreeNode>) -> Self {
        Self {
            spec: ModelSpec::trees(TreeParams::default()),
            dim,
            params: ModelParams::Trees { base_score, trees },
            scaling: None,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self.params {
            ModelParams::Logistic { .. } => "logistic",
            ModelParams::Trees { .. } => "gradient-boosted-trees",
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self.params, ModelParams::Logistic { .. })
    }

    /// Log-odds without bounds checks; `x` must have length `dim`.
    pub fn margin_unchecked(&self, x: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Logistic { weights, bias } => bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>(),
            ModelParams::Trees { base_score, trees } => base_score + trees.iter().map(|t| t.evaluate(x)).sum::<f64>(),
        }
    }

    pub fn proba_unchecked(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin_unchecked(x))
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn margin(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        Ok(self.margin_unchecked(x))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        Ok(self.proba_unchecked(x))
    }

    pub fn predict_batch(&self, data: &Dataset) -> Result<Vec<f64>, ModelError> {
        data.instances.iter().map(|i| self.predict_proba(&i.features)).collect()
    }

    /// Input gradient of `BCE(f(x), y)`, which for the logistic link is `(f(x) - y) * w`.
    pub fn grad_analytic(&self, x: &[f64], y: u8) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        match &self.params {
            ModelParams::Logistic { weights, .. } => {
                let residual = self.proba_unchecked(x) - f64::from(y);
                Ok(weights.iter().map(|w| residual * w).collect())
            }
            ModelParams::Trees { .. } => Err(ModelError::UnsupportedFamily("gradient-boosted-trees")),
        }
    }

    /// Feature indices the model can ever read. Features outside this set are dummies.
    pub fn used_features(&self) -> Vec<usize> {
        let mut out = match &self.params {
            ModelParams::Logistic { weights, .. } => weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(j, _)| j)
                .collect(),
            ModelParams::Trees { trees, .. } => {
                let mut v = Vec::new();
                for t in trees {
                    t.collect_features(&mut v);
                }
                v
            }
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let doc = ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| ModelError::Document(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| ModelError::Document(e.to_string()))?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Document(format!(
                "unsupported format version {} (expected {MODEL_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    model: TrainedModel,
}

pub fn train(spec: &ModelSpec, train: &Dataset) -> Result<TrainedModel, ModelError> {
    spec.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrain);
    }
    let positives = train.positives();
    let negatives = train.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ModelError::SingleClass { positives, negatives });
    }
    let xs: Vec<&[f64]> = train.instances.iter().map(|i| i.features.as_slice()).collect();
    let ys: Vec<f64> = train.instances.iter().map(|i| f64::from(i.label)).collect();
    let params = match spec.family {
        ModelFamily::Logistic(p) => fit_logistic(&xs, &ys, train.dim(), &p),
        ModelFamily::GradientBoostedTrees(p) => fit_trees(&xs, &ys, train.dim(), &p).0,
    };
    Ok(TrainedModel {
        spec: *spec,
        dim: train.dim(),
        params,
        scaling: None,
    })
}

/// Fits trees and also returns the training loss after each round (index 0 is the base score).
pub fn train_trees_with_trace(params: &TreeParams, train: &Dataset) -> Result<(TrainedModel, Vec<f64>), ModelError> {
    let spec = ModelSpec::trees(*params);
    spec.validate()?;
    let model = self::train(&spec, train)?;
    let xs: Vec<&[f64]> = train.instances.iter().map(|i| i.features.as_slice()).collect();
    let ys: Vec<f64> = train.instances.iter().map(|i| f64::from(i.label)).collect();
    let (_, trace) = fit_trees(&xs, &ys, train.dim(), params);
    Ok((model, trace))
}

fn fit_logistic(xs: &[&[f64]], ys: &[f64], d: usize, p: &LogisticParams) -> ModelParams {
    let n = xs.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut grad = vec![0.0; d];
    for _ in 0..p.n_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let z = b + w.iter().zip(x.iter()).map(|(a, v)| a * v).sum::<f64>();
            let r = sigmoid(z) - y;
            grad_b += r;
            for (g, v) in grad.iter_mut().zip(x.iter()) {
                *g += r * v;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= p.learning_rate * (gj / n + p.l2 * *wj);
        }
        b -= p.learning_rate * grad_b / n;
    }
    ModelParams::Logistic { weights: w, bias: b }
}

fn mean_bce(margins: &[f64], ys: &[f64]) -> f64 {
    margins
        .iter()
        .zip(ys)
        .map(|(m, y)| bce(sigmoid(*m), *y as u8))
        .sum::<f64>()
        / margins.len() as f64
}

fn fit_trees(xs: &[&[f64]], ys: &[f64], d: usize, p: &TreeParams) -> (ModelParams, Vec<f64>) {
    let n = xs.len();
    let prior = ys.iter().sum::<f64>() / n as f64;
    let base_score = (prior / (1.0 - prior)).ln();
    let mut margins = vec![base_score; n];
    let mut trace = vec![mean_bce(&margins, ys)];

    // Row indices sorted by each feature once; nodes keep stable sub-orders.
    let sorted: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| xs[a][j].total_cmp(&xs[b][j]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut trees = Vec::with_capacity(p.n_rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..p.n_rounds {
        for i in 0..n {
            let prob = sigmoid(margins[i]);
            grad[i] = prob - ys[i];
            hess[i] = (prob * (1.0 - prob)).max(1e-16);
        }
        let builder = TreeBuilder {
            xs,
            grad: &grad,
            hess: &hess,
            params: p,
        };
        let tree = builder.build(sorted.clone(), 0);
        for (m, x) in margins.iter_mut().zip(xs) {
            *m += tree.evaluate(x);
        }
        trace.push(mean_bce(&margins, ys));
        trees.push(tree);
    }
    (ModelParams::Trees { base_score, trees }, trace)
}

struct TreeBuilder<'a> {
    xs: &'a [&'a [f64]],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a TreeParams,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -self.params.learning_rate * g / (h + self.params.l2)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.l2)
    }

    /// `sorted[j]` holds this node's rows ordered by feature `j`.
    fn build(&self, sorted: Vec<Vec<usize>>, depth: usize) -> TreeNode {
        let rows = &sorted[0];
        let g_total: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h_total: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let leaf = TreeNode::leaf(self.leaf_value(g_total, h_total));
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_leaf {
            return leaf;
        }
        let Some(best) = self.best_split(&sorted, g_total, h_total) else {
            return leaf;
        };

        let n_total = self.xs.len();
        let mut goes_left = vec![false; n_total];
        for &i in rows {
            goes_left[i] = self.xs[i][best.feature] <= best.threshold;
        }
        let (left, right): (Vec<Vec<usize>>, Vec<Vec<usize>>) = sorted
            .into_iter()
            .map(|order| order.into_iter().partition(|&i| goes_left[i]))
            .unzip();
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.build(left, depth + 1)),
            right: Box::new(self.build(right, depth + 1)),
        }
    }

    fn best_split(&self, sorted: &[Vec<usize>], g_total: f64, h_total: f64) -> Option<BestSplit> {
        let parent = self.score(g_total, h_total);
        let min_leaf = self.params.min_leaf;
        let mut best: Option<BestSplit> = None;
        for (feature, order) in sorted.iter().enumerate() {
            let n = order.len();
            let (mut g_left, mut h_left) = (0.0, 0.0);
            for k in 0..n - 1 {
                let i = order[k];
                g_left += self.grad[i];
                h_left += self.hess[i];
                let value = self.xs[i][feature];
                // only cut between distinct values; ties stay on the left
                if value == self.xs[order[k + 1]][feature] {
                    continue;
                }
                let n_left = k + 1;
                if n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let gain = self.score(g_left, h_left) + self.score(g_total - g_left, h_total - h_left) - parent;
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature,
                        threshold: value,
                        gain,
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Instance;

    fn dataset(rows: Vec<(Vec<f64>, u8)>) -> Dataset {
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

    fn separable_1d() -> Dataset {
        dataset((0..40).map(|i| (vec![i as f64 / 39.0], u8::from(i >= 20))).collect())
    }

    #[test]
    fn logistic_closed_forms() {
        let m = TrainedModel::logistic(vec![0.0, 0.0], 0.0);
        assert_eq!(m.predict_proba(&[0.3, 0.9]).unwrap(), 0.5);
        let m = TrainedModel::logistic(vec![1.0], 0.0);
        assert_eq!(m.predict_proba(&[0.0]).unwrap(), 0.5);
        assert!((m.predict_proba(&[1.0]).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(matches!(
            m.predict_proba(&[1.0, 2.0]),
            Err(ModelError::Dimension { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn stump_closed_form() {
        let m = TrainedModel::from_trees(1, 0.0, vec![TreeNode::stump(0, 0.5, -2.0, 2.0)]);
        assert!((m.predict_proba(&[0.3]).unwrap() - 0.119_202_922_022_117_58).abs() < 1e-12);
        // ties go left
        assert!(m.predict_proba(&[0.5]).unwrap() < 0.5);
    }

    #[test]
    fn probabilities_stay_open() {
        let m = TrainedModel::logistic(vec![1e6], 0.0);
        let hi = m.predict_proba(&[1.0]).unwrap();
        let lo = m.predict_proba(&[-1.0]).unwrap();
        assert!(hi < 1.0 && lo > 0.0);
    }

    #[test]
    fn analytic_gradient_examples() {
        let m = TrainedModel::logistic(vec![2.0, 0.0], 0.0);
        assert_eq!(m.grad_analytic(&[0.0, 0.0], 1).unwrap(), vec![-1.0, 0.0]);
        // stationarity: f(x) = 0.5 is not a label, so synthesise y = f(x) through w = 0
        let flat = TrainedModel::logistic(vec![0.0, 0.0], 0.0);
        let g = flat.grad_analytic(&[0.4, 0.1], 1).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let tree = TrainedModel::from_trees(1, 0.0, vec![TreeNode::leaf(0.0)]);
        assert!(matches!(
            tree.grad_analytic(&[0.0], 1),
            Err(ModelError::UnsupportedFamily(_))
        ));
    }

    #[test]
    fn logistic_learns_separating_direction() {
        let data = separable_1d();
        let model = train(&ModelSpec::logistic(LogisticParams::default()), &data).unwrap();
        let ModelParams::Logistic { weights, .. } = &model.params else {
            panic!()
        };
        assert!(weights[0] > 0.0);
        let scores = model.predict_batch(&data).unwrap();
        // every positive outranks every negative
        let min_pos = scores[20..].iter().cloned().fold(f64::INFINITY, f64::min);
        let max_neg = scores[..20].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min_pos > max_neg);

        let flipped = dataset((0..40).map(|i| (vec![i as f64 / 39.0], u8::from(i < 20))).collect());
        let model = train(&ModelSpec::logistic(LogisticParams::default()), &flipped).unwrap();
        let ModelParams::Logistic { weights, .. } = &model.params else {
            panic!()
        };
        assert!(weights[0] < 0.0);
    }

    /// Brute-force best threshold: the cut maximising the Newton gain at the base margin.
    fn brute_force_threshold(xs: &[f64], ys: &[f64], l2: f64, min_leaf: usize) -> f64 {
        let prior = ys.iter().sum::<f64>() / ys.len() as f64;
        let p = prior;
        let g: Vec<f64> = ys.iter().map(|y| p - y).collect();
        let h = p * (1.0 - p);
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        let mut candidates: Vec<f64> = xs.to_vec();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        for &t in &candidates {
            let (mut gl, mut hl, mut nl, mut gr, mut hr, mut nr) = (0.0, 0.0, 0, 0.0, 0.0, 0);
            for (x, gi) in xs.iter().zip(&g) {
                if *x <= t {
                    gl += gi;
                    hl += h;
                    nl += 1;
                } else {
                    gr += gi;
                    hr += h;
                    nr += 1;
                }
            }
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let gain = gl * gl / (hl + l2) + gr * gr / (hr + l2);
            if gain > best.0 {
                best = (gain, t);
            }
        }
        best.1
    }

    #[test]
    fn single_stump_recovers_split() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| if x > 0.3 { 1.0 } else { 0.0 }).collect();
        let data = dataset(xs.iter().zip(&ys).map(|(x, y)| (vec![*x], *y as u8)).collect());
        let params = TreeParams {
            n_rounds: 1,
            max_depth: 1,
            min_leaf: 1,
            ..TreeParams::default()
        };
        let model = train(&ModelSpec::trees(params), &data).unwrap();
        let ModelParams::Trees { trees, .. } = &model.params else {
            panic!()
        };
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0].depth(), 1);
        let TreeNode::Split { feature, threshold, .. } = &trees[0] else {
            panic!()
        };
        let oracle = brute_force_threshold(&xs, &ys, params.l2, 1);
        assert_eq!(*feature, 0);
        let grid = 1.0 / 49.0;
        assert!((threshold - oracle).abs() <= grid + 1e-12, "{threshold} vs {oracle}");
        assert!((threshold - 0.3).abs() <= grid);
    }

    #[test]
    fn boosting_loss_never_increases() {
        let rows = (0..200)
            .map(|i| {
                let a = ((i * 37) % 101) as f64 / 100.0;
                let b = ((i * 53) % 97) as f64 / 96.0;
                (vec![a, b], u8::from(a + 0.5 * b > 0.7))
            })
            .collect();
        let data = dataset(rows);
        let params = TreeParams {
            n_rounds: 30,
            min_leaf: 5,
            ..TreeParams::default()
        };
        let (_, trace) = train_trees_with_trace(&params, &data).unwrap();
        assert_eq!(trace.len(), 31);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{trace:?}");
        }
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable_1d();
        for spec in [ModelSpec::default(), ModelSpec::logistic(LogisticParams::default())] {
            let a = train(&spec, &data).unwrap();
            let b = train(&spec, &data).unwrap();
            let pa = a.predict_batch(&data).unwrap();
            let pb = b.predict_batch(&data).unwrap();
            assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn training_errors() {
        let data = dataset(vec![(vec![0.0], 1), (vec![1.0], 1)]);
        assert!(matches!(
            train(&ModelSpec::default(), &data),
            Err(ModelError::SingleClass { .. })
        ));
        let bad = ModelSpec::trees(TreeParams {
            max_depth: 0,
            ..TreeParams::default()
        });
        assert!(matches!(train(&bad, &separable_1d()), Err(ModelError::Hyperparams(_))));
    }

    #[test]
    fn json_document_round_trip() {
        let data = separable_1d();
        let model = train(
            &ModelSpec::trees(TreeParams {
                n_rounds: 3,
                min_leaf: 2,
                ..TreeParams::default()
            }),
            &data,
        )
        .unwrap();
        let text = model.to_json().unwrap();
        assert!(text.contains("\"format_version\": 1"));
        assert_eq!(TrainedModel::from_json(&text).unwrap(), model);
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(TrainedModel::from_json(&bumped).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let d = rng.random_range(1..8);
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = TrainedModel::logistic(w, rng.random_range(-1.0..1.0));
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let y = u8::from(rng.random_bool(0.5));
            let g = m.grad_analytic(&x, y).unwrap();
            for j in 0..d {
                let mut up = x.clone();
                let mut down = x.clone();
                up[j] += h;
                down[j] -= h;
                let fd = (bce(m.predict_proba(&up).unwrap(), y) - bce(m.predict_proba(&down).unwrap(), y)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-4, "component {j}: {fd} vs {}", g[j]);
            }
        }
    }
}
