//! Label-space losses over the credal set
//! `Q = { p : sum_{y != y_obs} p(y) <= alpha }` around an observed class.
//!
//! * neutral: cross-entropy against the smoothed target `(1 - alpha) e_y + alpha / K`
//! * optimistic: `min_{p in Q} KL(p || p_hat)` (label relaxation)
//! * pessimistic: `-(1 - alpha) log p_hat(y) - alpha log min_{y' != y} p_hat(y')`
//!
//! All logarithms see probabilities clamped below at [`PROB_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{log_floor, PROB_FLOOR};
use crate::Stance;

const SIMPLEX_TOL: f64 = 1e-9;

/// Observed crisp class with credal mass `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredalTarget {
    pub class: usize,
    pub alpha: f64,
    pub k: usize,
}

impl CredalTarget {
    pub fn new(class: usize, alpha: f64, k: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("credal mass {alpha} outside [0, 1)")));
        }
        if class >= k {
            return Err(Error::Targets(format!("class {class} >= K = {k}")));
        }
        Ok(Self { class, alpha, k })
    }
}

/// Loss value and the coefficients `c` such that the logit gradient is
/// `p * sum(c) - c`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct CredalTerms {
    pub loss: f64,
    pub coeffs: Vec<f64>,
}

/// Smallest-index argmin of `lp` over classes other than `y`.
pub fn least_likely_other(lp: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &v) in lp.iter().enumerate() {
        if k != y && (best == usize::MAX || v < lp[best]) {
            best = k;
        }
    }
    best
}

pub(crate) fn credal_terms(p: &[f64], lp: &[f64], y: usize, alpha: f64, stance: Stance) -> CredalTerms {
    let k = p.len();
    let floor = log_floor();
    let lpf = |j: usize| lp[j].max(floor);
    let live = |j: usize| if lp[j] > floor { 1.0 } else { 0.0 };
    let mut coeffs = vec![0.0; k];
    let loss = match stance {
        Stance::Neutral => {
            let off = alpha / k as f64;
            let mut loss = 0.0;
            for (j, c) in coeffs.iter_mut().enumerate() {
                let t = if j == y { 1.0 - alpha + off } else { off };
                loss -= t * lpf(j);
                *c = t * live(j);
            }
            loss
        }
        Stance::Pessimistic => {
            let j = least_likely_other(lp, y);
            coeffs[y] = (1.0 - alpha) * live(y);
            coeffs[j] += alpha * live(j);
            -(1.0 - alpha) * lpf(y) - alpha * lpf(j)
        }
        Stance::Optimistic => {
            if p[y] >= 1.0 - alpha - 1e-12 {
                0.0
            } else {
                let q: f64 = p.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| v).sum();
                let mut loss = 0.0;
                if alpha < 1.0 {
                    loss += (1.0 - alpha) * ((1.0 - alpha).ln() - lpf(y));
                    coeffs[y] = (1.0 - alpha) * live(y);
                }
                if alpha > 0.0 {
                    loss += alpha * (alpha.ln() - q.max(PROB_FLOOR).ln());
                    if q > PROB_FLOOR {
                        for (j, c) in coeffs.iter_mut().enumerate() {
                            if j != y {
                                *c = alpha * p[j] / q;
                            }
                        }
                    }
                }
                loss.max(0.0)
            }
        }
    };
    CredalTerms { loss, coeffs }
}

fn check_simplex(p: &[f64], target: &CredalTarget) -> Result<Vec<f64>> {
    if p.len() != target.k {
        return Err(Error::Dimension(format!("{} probabilities for K = {}", p.len(), target.k)));
    }
    if p.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
        return Err(Error::OffSimplex(format!("{p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::OffSimplex(format!("entries sum to {s}")));
    }
    Ok(p.iter().map(|v| v.max(0.0).max(PROB_FLOOR).ln()).collect())
}

fn simplex_loss(p: &[f64], target: &CredalTarget, stance: Stance) -> Result<f64> {
    let lp = check_simplex(p, target)?;
    let p: Vec<f64> = p.iter().map(|v| v.max(0.0)).collect();
    Ok(credal_terms(&p, &lp, target.class, target.alpha, stance).loss)
}

/// Cross-entropy of `p_hat` against the label-smoothed target.
pub fn loss_neutral_ls(p_hat: &[f64], target: &CredalTarget) -> Result<f64> {
    simplex_loss(p_hat, target, Stance::Neutral)
}

/// Minimum KL divergence from the credal set to `p_hat`; zero inside the set.
pub fn loss_optimistic_lr(p_hat: &[f64], target: &CredalTarget) -> Result<f64> {
    simplex_loss(p_hat, target, Stance::Optimistic)
}

/// Worst-case expected negative log-likelihood at the vertex placing
/// `alpha` on the least likely wrong class.
pub fn loss_pessimistic(p_hat: &[f64], target: &CredalTarget) -> Result<f64> {
    if target.k < 2 {
        return Err(Error::InvalidArgument("pessimistic label loss needs K >= 2".into()));
    }
    simplex_loss(p_hat, target, Stance::Pessimistic)
}

/// Dispatch on stance.
pub fn credal_loss(p_hat: &[f64], target: &CredalTarget, stance: Stance) -> Result<f64> {
    match stance {
        Stance::Neutral => loss_neutral_ls(p_hat, target),
        Stance::Optimistic => loss_optimistic_lr(p_hat, target),
        Stance::Pessimistic => loss_pessimistic(p_hat, target),
    }
}

/// The KL projection of `p_hat` onto the credal set used by the optimistic loss.
pub fn relaxed_target(p_hat: &[f64], target: &CredalTarget) -> Vec<f64> {
    let y = target.class;
    let a = target.alpha;
    if p_hat[y] >= 1.0 - a {
        return p_hat.to_vec();
    }
    let q: f64 = p_hat.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| v).sum();
    p_hat
        .iter()
        .enumerate()
        .map(|(j, v)| if j == y { 1.0 - a } else { a * v / q })
        .collect()
}
