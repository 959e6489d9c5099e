//! Expected Loss, Value-at-Risk and Expected Shortfall over predicted default probabilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("loss distribution is empty")]
    Empty,
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    Alpha(f64),
    #[error("LGD must lie in [0, 1], got {0}")]
    Lgd(f64),
    #[error("exposure must be non-negative, got {0}")]
    Exposure(f64),
    #[error("{exposures} exposures supplied for {scores} scores")]
    ExposureLength { exposures: usize, scores: usize },
    #[error("probability {0} lies outside [0, 1]")]
    Probability(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Exposure {
    Scalar(f64),
    PerInstance(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossUnit {
    /// `p * LGD * EAD` in currency units.
    #[default]
    Currency,
    /// `p * LGD`, as if every exposure were 1.
    UnitExposure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExposureProfile {
    pub lgd: f64,
    pub ead: Exposure,
    /// Unit used for the VaR/ES distribution; EL always uses currency.
    pub tail_unit: LossUnit,
}

impl Default for ExposureProfile {
    fn default() -> Self {
        Self {
            lgd: 0.45,
            ead: Exposure::Scalar(1.0),
            tail_unit: LossUnit::Currency,
        }
    }
}

impl ExposureProfile {
    pub fn new(lgd: f64, ead: Exposure) -> Result<Self, RiskError> {
        let p = Self {
            lgd,
            ead,
            tail_unit: LossUnit::Currency,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        if !(0.0..=1.0).contains(&self.lgd) {
            return Err(RiskError::Lgd(self.lgd));
        }
        let check = |e: f64| {
            if e >= 0.0 && e.is_finite() {
                Ok(())
            } else {
                Err(RiskError::Exposure(e))
            }
        };
        match &self.ead {
            Exposure::Scalar(e) => check(*e),
            Exposure::PerInstance(v) => v.iter().try_for_each(|e| check(*e)),
        }
    }

    fn exposure(&self, i: usize, unit: LossUnit) -> f64 {
        match (unit, &self.ead) {
            (LossUnit::UnitExposure, _) => 1.0,
            (LossUnit::Currency, Exposure::Scalar(e)) => *e,
            (LossUnit::Currency, Exposure::PerInstance(v)) => v[i],
        }
    }

    fn check_len(&self, n: usize) -> Result<(), RiskError> {
        match &self.ead {
            Exposure::PerInstance(v) if v.len() != n => Err(RiskError::ExposureLength {
                exposures: v.len(),
                scores: n,
            }),
            _ => Ok(()),
        }
    }

    /// Multiplies every exposure by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let ead = match &self.ead {
            Exposure::Scalar(e) => Exposure::Scalar(e * k),
            Exposure::PerInstance(v) => Exposure::PerInstance(v.iter().map(|e| e * k).collect()),
        };
        Self { ead, ..self.clone() }
    }
}

/// Per-instance losses `L_i = p_i * LGD * EAD_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDistribution {
    losses: Vec<f64>,
}

impl LossDistribution {
    pub fn new(losses: Vec<f64>) -> Result<Self, RiskError> {
        if losses.is_empty() {
            return Err(RiskError::Empty);
        }
        Ok(Self { losses })
    }

    pub fn from_scores(scores: &[f64], profile: &ExposureProfile, unit: LossUnit) -> Result<Self, RiskError> {
        profile.validate()?;
        profile.check_len(scores.len())?;
        if let Some(&p) = scores.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(RiskError::Probability(p));
        }
        Self::new(
            scores
                .iter()
                .enumerate()
                .map(|(i, p)| p * profile.lgd * profile.exposure(i, unit))
                .collect(),
        )
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            losses: self.losses.iter().map(|l| l + c).collect(),
        }
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.losses.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Mean of `p_i * LGD * EAD_i`.
pub fn expected_loss(scores: &[f64], profile: &ExposureProfile) -> Result<f64, RiskError> {
    let dist = LossDistribution::from_scores(scores, profile, LossUnit::Currency)?;
    Ok(dist.losses.iter().sum::<f64>() / dist.losses.len() as f64)
}

fn check_alpha(alpha: f64) -> Result<(), RiskError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(RiskError::Alpha(alpha))
    }
}

fn var_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    // inf{z : F(z) >= alpha} is the order statistic at ceil(alpha * N)
    let rank = ((alpha * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

pub fn value_at_risk(dist: &LossDistribution, alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    Ok(var_sorted(&dist.sorted(), alpha))
}

/// Mean loss strictly beyond VaR; falls back to VaR when nothing lies beyond it.
pub fn expected_shortfall(dist: &LossDistribution, alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    let sorted = dist.sorted();
    let var = var_sorted(&sorted, alpha);
    let tail: Vec<f64> = sorted.iter().copied().filter(|l| *l > var).collect();
    if tail.is_empty() {
        return Ok(var);
    }
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_loss_examples() {
        let p = ExposureProfile::new(0.4, Exposure::Scalar(1000.0)).unwrap();
        assert!((expected_loss(&[0.5], &p).unwrap() - 200.0).abs() < 1e-12);
        assert_eq!(expected_loss(&[0.0, 0.0, 0.0], &p).unwrap(), 0.0);
        let p = ExposureProfile::new(0.5, Exposure::PerInstance(vec![100.0, 200.0])).unwrap();
        assert!((expected_loss(&[0.1, 0.3], &p).unwrap() - 17.5).abs() < 1e-12);
        assert_eq!(expected_loss(&[], &ExposureProfile::default()), Err(RiskError::Empty));
        assert!(expected_loss(&[0.1], &p).is_err());
        assert!(ExposureProfile::new(1.2, Exposure::Scalar(1.0)).is_err());
        assert!(ExposureProfile::new(0.5, Exposure::Scalar(-1.0)).is_err());
    }

    #[test]
    fn tail_measure_examples() {
        let d = LossDistribution::new((1..=100).map(f64::from).collect()).unwrap();
        assert_eq!(value_at_risk(&d, 0.95).unwrap(), 95.0);
        assert_eq!(expected_shortfall(&d, 0.95).unwrap(), 98.0);
        let c = LossDistribution::new(vec![3.5; 17]).unwrap();
        assert_eq!(value_at_risk(&c, 0.9).unwrap(), 3.5);
        assert_eq!(expected_shortfall(&c, 0.9).unwrap(), 3.5);
        let one = LossDistribution::new(vec![7.0]).unwrap();
        assert_eq!(value_at_risk(&one, 0.5).unwrap(), 7.0);
        assert!(value_at_risk(&d, 1.0).is_err());
        assert!(LossDistribution::new(vec![]).is_err());
    }

    #[test]
    fn unit_exposure_ignores_ead() {
        let p = ExposureProfile::new(0.5, Exposure::Scalar(1000.0)).unwrap();
        let d = LossDistribution::from_scores(&[0.2, 0.4], &p, LossUnit::UnitExposure).unwrap();
        assert_eq!(d.losses(), &[0.1, 0.2]);
    }
}
