//! Exact interventional Shapley attributions by coalition enumeration.
//!
//! The value of a coalition `S` is the model output averaged over background
//! rows, with features in `S` taken from the explained instance and the rest
//! from the background row. All `2^d` coalition values are tabulated once per
//! instance, so the cost is `2^d * |background|` model evaluations.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::TrainedModel;

pub const DEFAULT_D_MAX: usize = 15;
pub const DEFAULT_BACKGROUND_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{d} features exceed the exact-enumeration limit of {d_max}; reduce or subsample features")]
    TooManyFeatures { d: usize, d_max: usize },
    #[error("background set is empty")]
    EmptyBackground,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("k = {k} must lie in 1..={d}")]
    TopK { k: usize, d: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Reference rows used to fill in features that are absent from a coalition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSet {
    rows: Vec<Vec<f64>>,
}

impl BackgroundSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ExplainError> {
        let Some(first) = rows.first() else {
            return Err(ExplainError::EmptyBackground);
        };
        let d = first.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(ExplainError::Dimension {
                expected: d,
                got: bad.len(),
            });
        }
        Ok(Self { rows })
    }

    /// Seeded sample of `size` rows without replacement (all rows when `size >= len`).
    pub fn sample(data: &Dataset, size: usize, seed: u64) -> Result<Self, ExplainError> {
        if data.is_empty() || size == 0 {
            return Err(ExplainError::EmptyBackground);
        }
        let rows = if size >= data.len() {
            data.instances.iter().map(|i| i.features.clone()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, data.len(), size).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| data.instances[i].features.clone()).collect()
        };
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Which model output is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    #[default]
    Probability,
    /// Log-odds before the link.
    Margin,
}

/// Shapley vector for one instance. `base_value + sum(phi) == value` up to rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub instance: usize,
    pub phi: Vec<f64>,
    pub base_value: f64,
    /// Model output at the explained point.
    pub value: f64,
}

impl Attribution {
    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    pub fn efficiency_gap(&self) -> f64 {
        (self.base_value + self.phi.iter().sum::<f64>() - self.value).abs()
    }
}

/// `|S|! (d - |S| - 1)! / d!` for `|S| = 0..d`, as `1 / (d * C(d-1, s))`.
fn shapley_weights(d: usize) -> Vec<f64> {
    let mut binom = 1.0;
    (0..d)
        .map(|s| {
            if s > 0 {
                binom = binom * (d - s) as f64 / s as f64;
            }
            1.0 / (d as f64 * binom)
        })
        .collect()
}

/// Exact Shapley values of an arbitrary value function.
pub fn exact_shapley_fn<F>(f: F, x: &[f64], bg: &BackgroundSet, d_max: usize) -> Result<Attribution, ExplainError>
where
    F: Fn(&[f64]) -> f64,
{
    let d = x.len();
    if d > d_max {
        return Err(ExplainError::TooManyFeatures { d, d_max });
    }
    if bg.dim() != d {
        return Err(ExplainError::Dimension {
            expected: d,
            got: bg.dim(),
        });
    }
    let n_coalitions = 1usize << d;
    let mut coalition_value = vec![0.0; n_coalitions];
    let mut composite = vec![0.0; d];
    for (mask, slot) in coalition_value.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in bg.rows() {
            for j in 0..d {
                composite[j] = if mask >> j & 1 == 1 { x[j] } else { b[j] };
            }
            acc += f(&composite);
        }
        *slot = acc / bg.len() as f64;
    }

    let weights = shapley_weights(d);
    let mut phi = vec![0.0; d];
    for (j, phi_j) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        let mut acc = 0.0;
        for mask in 0..n_coalitions {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            acc += weights[s] * (coalition_value[mask | bit] - coalition_value[mask]);
        }
        *phi_j = acc;
    }
    Ok(Attribution {
        instance: 0,
        phi,
        base_value: coalition_value[0],
        value: coalition_value[n_coalitions - 1],
    })
}

pub fn exact_shapley(
    model: &TrainedModel,
    x: &[f64],
    bg: &BackgroundSet,
    output: OutputSpace,
) -> Result<Attribution, ExplainError> {
    if x.len() != model.dim {
        return Err(ExplainError::Dimension {
            expected: model.dim,
            got: x.len(),
        });
    }
    match output {
        OutputSpace::Probability => exact_shapley_fn(|z| model.proba_unchecked(z), x, bg, DEFAULT_D_MAX),
        OutputSpace::Margin => exact_shapley_fn(|z| model.margin_unchecked(z), x, bg, DEFAULT_D_MAX),
    }
}

/// Attributions for many rows; `instance` records each row's position in `rows`.
pub fn attribute_batch(
    model: &TrainedModel,
    rows: &[Vec<f64>],
    bg: &BackgroundSet,
    output: OutputSpace,
) -> Result<Vec<Attribution>, ExplainError> {
    rows.par_iter()
        .enumerate()
        .map(|(i, x)| {
            exact_shapley(model, x, bg, output).map(|mut a| {
                a.instance = i;
                a
            })
        })
        .collect()
}

/// Features ordered by `|phi|` descending, ties by ascending index.
pub fn top_k(attr: &Attribution, k: usize) -> Result<Vec<(usize, f64)>, ExplainError> {
    let d = attr.dim();
    if k == 0 || k > d {
        return Err(ExplainError::TopK { k, d });
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| attr.phi[b].abs().total_cmp(&attr.phi[a].abs()).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|j| (j, attr.phi[j])).collect())
}

/// Writes `instance,base,<phi_name>...` rows.
pub fn write_attributions_csv<W: Write>(
    attrs: &[Attribution],
    feature_names: &[String],
    out: W,
) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["instance".to_string(), "base".to_string()];
    header.extend(feature_names.iter().map(|n| format!("phi_{n}")));
    w.write_record(&header)?;
    for a in attrs {
        let mut row = vec![a.instance.to_string(), a.base_value.to_string()];
        row.extend(a.phi.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
