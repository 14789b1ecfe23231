//! Reference-distribution enrichment of a mini-batch: Gaussian vicinal
//! replicas, Mixup interpolation and label smoothing.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::numgrad::{Batch, Targets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrichMode {
    None,
    Vrm,
    Mixup,
}

/// Stage-1 configuration. Only the parameter of the selected mode is read,
/// so every field can stay present in a rectangular search space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrichSpec {
    #[serde(default = "none_mode")]
    pub mode: EnrichMode,
    /// Gaussian vicinity bandwidth.
    #[serde(default)]
    pub sigma: f64,
    /// Noisy replicas per input row.
    #[serde(default = "one")]
    pub replicas: usize,
    /// Beta shape of the Mixup weight.
    #[serde(default = "one_f")]
    pub mixup_alpha: f64,
    /// Label smoothing mass applied to crisp labels before any mixing.
    #[serde(default)]
    pub label_smoothing: f64,
}

fn none_mode() -> EnrichMode {
    EnrichMode::None
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl Default for EnrichSpec {
    fn default() -> Self {
        Self {
            mode: EnrichMode::None,
            sigma: 0.0,
            replicas: 1,
            mixup_alpha: 1.0,
            label_smoothing: 0.0,
        }
    }
}

impl EnrichSpec {
    pub fn vrm(sigma: f64) -> Self {
        Self { mode: EnrichMode::Vrm, sigma, ..Self::default() }
    }

    pub fn mixup(alpha: f64) -> Self {
        Self { mode: EnrichMode::Mixup, mixup_alpha: alpha, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            EnrichMode::Vrm => {
                if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                    bail_arg!("VRM bandwidth must be > 0, got {}", self.sigma);
                }
                if self.replicas == 0 {
                    bail_arg!("VRM needs at least one replica");
                }
            }
            EnrichMode::Mixup => {
                if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
                    bail_arg!("Mixup Beta shape must be > 0, got {}", self.mixup_alpha);
                }
            }
            EnrichMode::None => {}
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            bail_arg!("label smoothing {} outside [0, 1]", self.label_smoothing);
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.mode != EnrichMode::None || self.label_smoothing > 0.0
    }

    /// `true` when stage 1 turns crisp labels into soft targets.
    pub fn softens_labels(&self) -> bool {
        self.mode == EnrichMode::Mixup || self.label_smoothing > 0.0
    }
}

/// Replicate every row `k` times (consecutively) with i.i.d. `N(0, sigma^2)`
/// feature noise. Noise is drawn row-major over the output.
pub fn vrm_expand<R: Rng + ?Sized>(batch: &Batch, sigma: f64, k: usize, rng: &mut R) -> Result<Batch> {
    if !(sigma > 0.0) || k == 0 {
        bail_arg!("vrm_expand needs sigma > 0 and k >= 1 (got {sigma}, {k})");
    }
    let n = batch.len();
    let d = batch.x.ncols();
    let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let mut out = batch.select(&idx);
    for r in 0..n * k {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            out.x[(r, j)] += sigma * z;
        }
    }
    Ok(out)
}

/// `E[lambda (1 - lambda)]` for `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_c_alpha(alpha: f64) -> f64 {
    if alpha.is_infinite() {
        return 0.25;
    }
    alpha / (2.0 * (2.0 * alpha + 1.0))
}

/// Label smoothing of crisp labels: `(1 - alpha) one_hot + alpha / K`.
pub fn smooth_labels(labels: &[usize], alpha: f64, k: usize) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        bail_arg!("smoothing mass {alpha} outside [0, 1]");
    }
    if let Some(c) = labels.iter().find(|&&c| c >= k) {
        return Err(Error::Targets(format!("class {c} >= K = {k}")));
    }
    let off = alpha / k as f64;
    Ok(DMatrix::from_fn(labels.len(), k, |i, j| {
        if labels[i] == j {
            1.0 - alpha + off
        } else {
            off
        }
    }))
}

fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), k, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// Mix row `i` with `partners[i]` using weight `lambdas[i]` on row `i`.
pub fn mixup_with(batch: &Batch, partners: &[usize], lambdas: &[f64], classes: Option<usize>) -> Result<Batch> {
    let n = batch.len();
    if partners.len() != n || lambdas.len() != n {
        return Err(Error::Dimension("one partner and weight per row required".into()));
    }
    if partners.iter().any(|&j| j >= n) {
        bail_arg!("partner index out of range");
    }
    let mut x = batch.x.clone();
    for i in 0..n {
        let (l, j) = (lambdas[i], partners[i]);
        for c in 0..x.ncols() {
            x[(i, c)] = l * batch.x[(i, c)] + (1.0 - l) * batch.x[(j, c)];
        }
    }
    let mix_rows = |t: &DMatrix<f64>| {
        let mut out = t.clone();
        for i in 0..n {
            let (l, j) = (lambdas[i], partners[i]);
            for c in 0..t.ncols() {
                out[(i, c)] = l * t[(i, c)] + (1.0 - l) * t[(j, c)];
            }
        }
        out
    };
    let targets = match &batch.targets {
        Targets::Classes(y) => {
            let k = classes.unwrap_or_else(|| y.iter().max().map_or(1, |m| m + 1));
            Targets::Soft(mix_rows(&one_hot(y, k)))
        }
        Targets::Soft(t) => Targets::Soft(mix_rows(t)),
        Targets::Real(y) => Targets::Real(
            (0..n)
                .map(|i| lambdas[i] * y[i] + (1.0 - lambdas[i]) * y[partners[i]])
                .collect(),
        ),
        Targets::Preference(_) => {
            return Err(Error::Targets(
                "mixup is undefined for pairwise preference labels".into(),
            ))
        }
    };
    Ok(Batch { x, targets })
}

/// Mixup within the batch: each row draws a partner uniformly (with
/// replacement) and `lambda ~ Beta(alpha, alpha)`.
pub fn mixup<R: Rng + ?Sized>(batch: &Batch, alpha: f64, classes: Option<usize>, rng: &mut R) -> Result<Batch> {
    if !(alpha > 0.0) {
        bail_arg!("Mixup Beta shape must be > 0, got {alpha}");
    }
    if matches!(batch.targets, Targets::Preference(_)) {
        return Err(Error::Targets("mixup is undefined for pairwise preference labels".into()));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = batch.len();
    let mut partners = Vec::with_capacity(n);
    let mut lambdas = Vec::with_capacity(n);
    for _ in 0..n {
        partners.push(rng.random_range(0..n));
        lambdas.push(beta.sample(rng));
    }
    mixup_with(batch, &partners, &lambdas, classes)
}

/// Run the whole enrichment stage. Returns the batch and whether anything
/// was changed.
pub fn enrich<R: Rng + ?Sized>(batch: Batch, spec: &EnrichSpec, classes: Option<usize>, rng: &mut R) -> Result<(Batch, bool)> {
    spec.validate()?;
    let mut active = false;
    let mut batch = batch;
    if spec.label_smoothing > 0.0 {
        if let (Targets::Classes(y), Some(k)) = (&batch.targets, classes) {
            batch.targets = Targets::Soft(smooth_labels(y, spec.label_smoothing, k)?);
            active = true;
        } else {
            return Err(Error::Targets("label smoothing needs crisp class labels".into()));
        }
    }
    match spec.mode {
        EnrichMode::None => {}
        EnrichMode::Vrm => {
            batch = vrm_expand(&batch, spec.sigma, spec.replicas, rng)?;
            active = true;
        }
        EnrichMode::Mixup => {
            batch = mixup(&batch, spec.mixup_alpha, classes, rng)?;
            active = true;
        }
    }
    Ok((batch, active))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn toy() -> Batch {
        Batch::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]),
            Targets::Classes(vec![0, 1]),
        )
        .unwrap()
    }

    #[test]
    fn vrm_tiny_sigma_is_identity() {
        let out = vrm_expand(&toy(), 1e-12, 1, &mut stream(1, "t")).unwrap();
        assert!((out.x - toy().x).abs().max() < 1e-9);
    }

    #[test]
    fn vrm_bookkeeping() {
        let out = vrm_expand(&toy(), 0.5, 3, &mut stream(1, "t")).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.targets, Targets::Classes(vec![0, 0, 0, 1, 1, 1]));
    }

    #[test]
    fn vrm_noise_variance() {
        let sigma = 0.7;
        let b = Batch::new(DMatrix::zeros(1, 1), Targets::Real(vec![0.0])).unwrap();
        let out = vrm_expand(&b, sigma, 100_000, &mut stream(3, "var")).unwrap();
        let n = out.len() as f64;
        let mean = out.x.sum() / n;
        let var = out.x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ratio = var / (sigma * sigma);
        assert!((0.98..=1.02).contains(&ratio), "{ratio}");
    }

    #[test]
    fn mixup_self_partner_is_identity() {
        let b = toy();
        let out = mixup_with(&b, &[0, 1], &[0.3, 0.8], Some(2)).unwrap();
        assert_eq!(out.x, b.x);
        assert_eq!(out.targets, Targets::Soft(one_hot(&[0, 1], 2)));
    }

    #[test]
    fn mixup_targets_are_distributions() {
        let b = Batch::new(DMatrix::from_fn(50, 3, |i, j| (i * 3 + j) as f64), Targets::Classes((0..50).map(|i| i % 4).collect())).unwrap();
        let out = mixup(&b, 0.4, Some(4), &mut stream(9, "m")).unwrap();
        let Targets::Soft(t) = out.targets else { panic!() };
        for row in t.row_iter() {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_rejects_preferences() {
        let b = Batch::new(DMatrix::zeros(2, 2), Targets::Preference(vec![true, false])).unwrap();
        assert!(mixup(&b, 1.0, None, &mut stream(0, "m")).is_err());
    }

    #[test]
    fn c_alpha_values() {
        assert!((mixup_c_alpha(1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(mixup_c_alpha(f64::INFINITY), 0.25);
        assert!((mixup_c_alpha(1e12) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn c_alpha_monte_carlo() {
        let mut rng = stream(11, "beta");
        for alpha in [0.2, 1.0, 4.0] {
            let beta = Beta::new(alpha, alpha).unwrap();
            let m = 200_000;
            let xs: Vec<f64> = (0..m).map(|_| {
                let l: f64 = beta.sample(&mut rng);
                l * (1.0 - l)
            }).collect();
            let mean = xs.iter().sum::<f64>() / m as f64;
            let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0)).sqrt();
            let se = sd / (m as f64).sqrt();
            assert!((mean - mixup_c_alpha(alpha)).abs() < 3.0 * se, "alpha {alpha}");
        }
    }

    #[test]
    fn smoothing_values() {
        let s = smooth_labels(&[0], 0.3, 3).unwrap();
        assert!((s[(0, 0)] - 0.8).abs() < 1e-15);
        assert!((s[(0, 1)] - 0.1).abs() < 1e-15);
        assert_eq!(smooth_labels(&[2, 0], 0.0, 3).unwrap(), one_hot(&[2, 0], 3));
        let u = smooth_labels(&[1], 1.0, 4).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }
}
