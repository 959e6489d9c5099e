//! Synthetic two-regime datasets with a linear ground truth.
//!
//! Rows are uniform on the unit cube, conditioned on the class and on lying at
//! least `gap` from a fixed hyperplane through the cube centre. The stress block
//! then shrinks every row's component along the hyperplane normal by the
//! compression factor. Feature ranges barely change under compression, so a
//! budget fixed relative to those ranges crosses more stress-regime margins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Instance, StressSeries};
use crate::pipeline::PipelineError;

const DAY: i64 = 86_400;
/// 2015-01-01T00:00:00Z
const EPOCH_START: i64 = 1_420_070_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_per_regime: usize,
    pub d: usize,
    pub prior_calm: f64,
    pub prior_stress: f64,
    /// Scales the stress block's distance to the boundary; 1.0 makes the regimes identical.
    pub compression: f64,
    /// Probability of flipping a label.
    pub noise: f64,
    /// Width of the band around the true boundary where rows are thinned out.
    pub gap: f64,
    pub tau_calm: f64,
    pub tau_stress: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_regime: 5000,
            d: 8,
            prior_calm: 0.5,
            prior_stress: 0.5,
            compression: 1.0,
            noise: 0.0,
            gap: GAP,
            tau_calm: 15.0,
            tau_stress: 20.0,
            seed: 0,
        }
    }
}

const GAP: f64 = 0.4;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.d == 0 || self.d > 15 {
            return bad(format!("synthetic d must lie in 1..=15, got {}", self.d));
        }
        for (name, p) in [("prior_calm", self.prior_calm), ("prior_stress", self.prior_stress)] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {p}"));
            }
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression must lie in (0, 1], got {}", self.compression));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 0.5), got {}", self.noise));
        }
        if !(0.0..0.5).contains(&self.gap) {
            return bad(format!("gap must lie in [0, 0.5), got {}", self.gap));
        }
        if !(self.tau_calm < self.tau_stress) {
            return bad("tau_calm must be below tau_stress".into());
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.d).map(|j| format!("x{j}")).collect()
    }
}

/// Unit normal of the ground-truth hyperplane for a given seed and dimension.
pub fn ground_truth_direction(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ec);
    // every coordinate stays away from zero so each feature carries signal
    let w: Vec<f64> = (0..d)
        .map(|_| {
            let mag: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.into_iter().map(|v| v / n).collect()
}

/// Signed distance of a raw row to the ground-truth hyperplane.
pub fn true_margin(x: &[f64], direction: &[f64]) -> f64 {
    x.iter().zip(direction).map(|(v, u)| (v - 0.5) * u).sum()
}

fn draw_row(rng: &mut ChaCha8Rng, u: &[f64], positive: bool, gap: f64) -> (Vec<f64>, f64) {
    loop {
        let x: Vec<f64> = (0..u.len()).map(|_| rng.random::<f64>()).collect();
        let m = true_margin(&x, u);
        if (m > 0.0) != positive || m == 0.0 {
            continue;
        }
        // density near the boundary thins out quadratically inside the gap
        if m.abs() >= gap || rng.random::<f64>() < (m / gap).powi(2) {
            return (x, m);
        }
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, StressSeries), PipelineError> {
    spec.validate()?;
    let u = ground_truth_direction(spec.d, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut instances = Vec::with_capacity(2 * spec.n_per_regime);
    let mut stress_points = Vec::with_capacity(2 * spec.n_per_regime);

    let blocks = [
        (spec.prior_calm, 1.0, spec.tau_calm - 5.0, spec.tau_calm - 0.01),
        (
            spec.prior_stress,
            spec.compression,
            spec.tau_stress + 0.01,
            spec.tau_stress + 15.0,
        ),
    ];
    let mut day = 0i64;
    for (prior, k, s_lo, s_hi) in blocks {
        for _ in 0..spec.n_per_regime {
            let timestamp = EPOCH_START + day * DAY;
            day += 1;
            stress_points.push((timestamp, rng.random_range(s_lo..s_hi)));

            let positive = rng.random_bool(prior);
            let (mut features, m) = draw_row(&mut rng, &u, positive, spec.gap);
            for (xj, uj) in features.iter_mut().zip(&u) {
                *xj += (k - 1.0) * m * uj;
            }
            let flip = spec.noise > 0.0 && rng.random_bool(spec.noise);
            instances.push(Instance {
                features,
                label: u8::from(positive != flip),
                timestamp,
            });
        }
    }
    let data = Dataset::new(spec.feature_names(), instances).map_err(|e| PipelineError::Config(e.to_string()))?;
    let series = StressSeries::new(stress_points).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok((data, series))
}

/// Writes `data.csv` (`t,<features>,y`) and `stress.csv` (`timestamp,value`).
pub fn write_synth(dir: &std::path::Path, data: &Dataset, series: &StressSeries) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("data.csv")).map_err(PipelineError::csv)?;
    let mut header = vec!["t".to_string()];
    header.extend(data.feature_names.iter().cloned());
    header.push("y".into());
    w.write_record(&header).map_err(PipelineError::csv)?;
    for inst in &data.instances {
        let mut row = vec![inst.timestamp.to_string()];
        row.extend(inst.features.iter().map(|v| v.to_string()));
        row.push(inst.label.to_string());
        w.write_record(&row).map_err(PipelineError::csv)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("stress.csv")).map_err(PipelineError::csv)?;
    w.write_record(["timestamp", "value"]).map_err(PipelineError::csv)?;
    for (t, v) in series.iter() {
        w.write_record([t.to_string(), v.to_string()])
            .map_err(PipelineError::csv)?;
    }
    w.flush()?;
    Ok(())
}
