//! Sample-level aggregation: the neutral mean or the closed-form KL duals
//! `tau * log mean exp(l / tau)` (pessimistic) and
//! `-tau * log mean exp(-l / tau)` (optimistic), which coincide with tilted
//! ERM at tilt `+-1/tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Stance;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggSpec {
    pub stance: Stance,
    /// Dual temperature; ignored by the neutral stance.
    pub tau: f64,
}

impl AggSpec {
    pub fn neutral() -> Self {
        Self { stance: Stance::Neutral, tau: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stance != Stance::Neutral && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check(losses: &[f64]) -> Result<(f64, f64)> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty loss vector".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in losses {
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss {l}")));
        }
        lo = lo.min(l);
        hi = hi.max(l);
    }
    Ok((lo, hi))
}

/// Arithmetic mean, accumulated relative to the minimum so that constant
/// vectors reproduce their value exactly.
pub fn shifted_mean(losses: &[f64], lo: f64) -> f64 {
    let s: f64 = losses.iter().map(|l| l - lo).sum();
    lo + s / losses.len() as f64
}

/// Aggregated value and its gradient with respect to each loss.
pub fn agg_with_weights(losses: &[f64], spec: &AggSpec) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    let (lo, hi) = check(losses)?;
    let n = losses.len();
    let mean = shifted_mean(losses, lo);
    match spec.stance {
        Stance::Neutral => Ok((mean, vec![1.0 / n as f64; n])),
        Stance::Pessimistic => {
            let e: Vec<f64> = losses.iter().map(|l| ((l - hi) / spec.tau).exp()).collect();
            let s: f64 = e.iter().sum();
            let v = hi + spec.tau * (s / n as f64).ln();
            Ok((v.clamp(mean, hi), e.into_iter().map(|x| x / s).collect()))
        }
        Stance::Optimistic => {
            let e: Vec<f64> = losses.iter().map(|l| (-(l - lo) / spec.tau).exp()).collect();
            let s: f64 = e.iter().sum();
            let v = lo - spec.tau * (s / n as f64).ln();
            Ok((v.clamp(lo, mean), e.into_iter().map(|x| x / s).collect()))
        }
    }
}

pub fn agg(losses: &[f64], spec: &AggSpec) -> Result<f64> {
    agg_with_weights(losses, spec).map(|(v, _)| v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub tau: f64,
    pub pessimistic: f64,
    pub optimistic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitsReport {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub rows: Vec<LimitRow>,
}

/// Both duals over a temperature grid, alongside the mean and extremes.
pub fn agg_limits_check(losses: &[f64], taus: &[f64]) -> Result<LimitsReport> {
    let (lo, hi) = check(losses)?;
    let rows = taus
        .iter()
        .map(|&tau| {
            Ok(LimitRow {
                tau,
                pessimistic: agg(losses, &AggSpec { stance: Stance::Pessimistic, tau })?,
                optimistic: agg(losses, &AggSpec { stance: Stance::Optimistic, tau })?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LimitsReport {
        mean: shifted_mean(losses, lo),
        min: lo,
        max: hi,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(stance: Stance, tau: f64) -> AggSpec {
        AggSpec { stance, tau }
    }

    #[test]
    fn constant_vector_is_fixed_point() {
        let l = [0.1; 7];
        for stance in [Stance::Neutral, Stance::Pessimistic, Stance::Optimistic] {
            for tau in [1e-3, 1.0, 1e3] {
                assert_eq!(agg(&l, &spec(stance, tau)).unwrap(), 0.1);
            }
        }
    }

    #[test]
    fn worked_values() {
        let p = agg(&[0.0, 2.0], &spec(Stance::Pessimistic, 1.0)).unwrap();
        let o = agg(&[0.0, 2.0], &spec(Stance::Optimistic, 1.0)).unwrap();
        let e2 = 2f64.exp();
        assert!((p - ((1.0 + e2) / 2.0).ln()).abs() < 1e-15);
        assert!((o + ((1.0 + 1.0 / e2) / 2.0).ln()).abs() < 1e-15);
        assert!((p - 1.43378).abs() < 1e-5);
        assert!((o - 0.56622).abs() < 1e-5);
    }

    #[test]
    fn no_overflow_on_large_losses() {
        let l = [1e6, 0.0, 5e5];
        let p = agg(&l, &spec(Stance::Pessimistic, 1e-3)).unwrap();
        let o = agg(&l, &spec(Stance::Optimistic, 1e-3)).unwrap();
        assert!(p.is_finite() && (p - 1e6).abs() < 1e-2);
        assert!(o.is_finite() && o.abs() < 1e-2);
    }

    #[test]
    fn neutral_ignores_tau() {
        assert_eq!(agg(&[1.0, 3.0], &spec(Stance::Neutral, -5.0)).unwrap(), 2.0);
    }

    #[test]
    fn errors() {
        assert!(agg(&[], &AggSpec::neutral()).is_err());
        assert!(agg(&[f64::NAN], &AggSpec::neutral()).is_err());
        assert!(agg(&[1.0], &spec(Stance::Pessimistic, 0.0)).is_err());
    }

    #[test]
    fn weights_match_finite_differences() {
        let l = [0.3, 1.7, 0.9, 2.4];
        for stance in [Stance::Neutral, Stance::Pessimistic, Stance::Optimistic] {
            let s = spec(stance, 0.7);
            let (_, w) = agg_with_weights(&l, &s).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..l.len() {
                let h = 1e-6;
                let mut up = l;
                let mut dn = l;
                up[i] += h;
                dn[i] -= h;
                let fd = (agg(&up, &s).unwrap() - agg(&dn, &s).unwrap()) / (2.0 * h);
                assert!((fd - w[i]).abs() < 1e-8, "{stance:?} {i}: {fd} vs {}", w[i]);
            }
        }
    }
}
