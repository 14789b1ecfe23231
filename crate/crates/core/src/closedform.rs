//! Squared-loss linear-model identities: closed-form regularized risks for
//! Gaussian vicinal sampling, Mixup, first-order Wasserstein DRO and label
//! smoothing, each paired with a Monte-Carlo or pipeline counterpart.
//!
//! Feature matrices carry the intercept as their last, all-ones column.
//! Noise, dual norms and weight penalties act on the feature coordinates
//! only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::enrich::mixup_c_alpha;
use crate::error::{bail_arg, Error, Result};
use crate::numgrad::{Batch, Head, LossSpec, Model, Targets, Evaluation};
use crate::perturb_x::{pgd_perturb, InputPerturbSpec, Norm};
use crate::Stance;

const JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProblem {
    /// `n x (d + 1)`, intercept last.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// `d + 1` weights, intercept last.
    pub w: DVector<f64>,
}

/// Transport-cost exponent of the Wasserstein ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostNorm {
    L1,
    L2,
    Linf,
}

impl CostNorm {
    /// Norm of the conjugate exponent.
    pub fn dual_norm(&self, v: &[f64]) -> f64 {
        match self {
            CostNorm::L1 => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
            CostNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            CostNorm::Linf => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

impl LinearProblem {
    /// Appends the intercept column to raw features.
    pub fn new(features: &DMatrix<f64>, y: DVector<f64>, w: DVector<f64>) -> Result<Self> {
        let x = with_intercept(features);
        if y.len() != x.nrows() || w.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "{} rows, {} targets, {} weights for {} columns",
                x.nrows(),
                y.len(),
                w.len(),
                x.ncols()
            )));
        }
        Ok(Self { x, y, w })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Feature count, excluding the intercept.
    pub fn d(&self) -> usize {
        self.x.ncols() - 1
    }

    pub fn feature_weights(&self) -> &[f64] {
        &self.w.as_slice()[..self.d()]
    }

    pub fn features(&self) -> DMatrix<f64> {
        self.x.columns(0, self.d()).into_owned()
    }

    pub fn residuals(&self) -> DVector<f64> {
        &self.y - &self.x * &self.w
    }

    pub fn with_weights(&self, w: DVector<f64>) -> Self {
        Self { w, ..self.clone() }
    }
}

pub fn with_intercept(features: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = features.shape();
    let mut x = DMatrix::from_element(n, d + 1, 1.0);
    x.columns_mut(0, d).copy_from(features);
    x
}

/// Random problem: standard normal features, targets from a random linear
/// map plus noise (or its sign, for `+-1` classification), and an
/// independent random evaluation point `w`.
pub fn random_problem<R: Rng + ?Sized>(n: usize, d: usize, classification: bool, rng: &mut R) -> LinearProblem {
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let features = DMatrix::from_fn(n, d, |_, _| normal());
    let truth = DVector::from_fn(d + 1, |_, _| normal());
    let noise = DVector::from_fn(n, |_, _| 0.5 * normal());
    let w = DVector::from_fn(d + 1, |_, _| normal());
    let x = with_intercept(&features);
    let mut y = &x * truth + noise;
    if classification {
        y.apply(|v| *v = if *v >= 0.0 { 1.0 } else { -1.0 });
    }
    LinearProblem { x, y, w }
}

/// `(1/n) sum (y_i - w.x_i)^2`
pub fn erm_risk(prob: &LinearProblem) -> f64 {
    let r = prob.residuals();
    r.dot(&r) / prob.n() as f64
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    let n = a.nrows();
    let jittered = a + DMatrix::identity(n, n) * JITTER;
    if let Some(ch) = jittered.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    jittered
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NonFinite("singular normal equations".into()))
}

/// Minimizer of the empirical squared risk via the normal equations.
pub fn least_squares_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension("rows and targets differ".into()));
    }
    solve_spd(x.transpose() * x, x.transpose() * y)
}

/// Gradient of the empirical squared risk at `w`.
pub fn erm_gradient(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let r = y - x * w;
    x.transpose() * r * (-2.0 / x.nrows() as f64)
}

/// Gaussian vicinal risk: `R_ERM(w) + sigma^2 ||w||^2`.
pub fn vrm_risk_closed(prob: &LinearProblem, sigma: f64) -> f64 {
    let w2: f64 = prob.feature_weights().iter().map(|v| v * v).sum();
    erm_risk(prob) + sigma * sigma * w2
}

/// Mean squared loss over `m` draws `x_i + eps`, `eps ~ N(0, sigma^2 I)`,
/// cycling through the rows.
pub fn mc_vicinal_risk<R: Rng + ?Sized>(prob: &LinearProblem, sigma: f64, m: usize, rng: &mut R) -> f64 {
    let (n, d) = (prob.n(), prob.d());
    let w = prob.feature_weights();
    let base: Vec<f64> = (0..n).map(|i| prob.x.row(i).dot(&prob.w.transpose())).collect();
    let mut total = 0.0;
    for t in 0..m {
        let i = t % n;
        let mut pred = base[i];
        for wj in w.iter().take(d) {
            let e: f64 = StandardNormal.sample(rng);
            pred += wj * sigma * e;
        }
        total += (prob.y[i] - pred).powi(2);
    }
    total / m as f64
}

/// `(1 - 2c) R_ERM(w) + 2c (ybar - w.xbar)^2` with `c = E[lambda (1 - lambda)]`.
pub fn mixup_risk_closed(prob: &LinearProblem, alpha: f64) -> f64 {
    let c = mixup_c_alpha(alpha);
    let rbar = prob.residuals().mean();
    (1.0 - 2.0 * c) * erm_risk(prob) + 2.0 * c * rbar * rbar
}

/// Monte-Carlo Mixup risk: draw `t` uses the pair `(t / n mod n, t mod n)`,
/// so `m` a multiple of `n^2` enumerates every ordered pair equally often.
pub fn mc_mixup_risk<R: Rng + ?Sized>(prob: &LinearProblem, alpha: f64, m: usize, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = prob.n();
    let nn = n * n;
    let mut total = 0.0;
    let cols = prob.x.ncols();
    for t in 0..m {
        let p = t % nn;
        let (i, j) = (p / n, p % n);
        let l: f64 = beta.sample(rng);
        let mut pred = 0.0;
        for c in 0..cols {
            pred += prob.w[c] * (l * prob.x[(i, c)] + (1.0 - l) * prob.x[(j, c)]);
        }
        let yt = l * prob.y[i] + (1.0 - l) * prob.y[j];
        total += (yt - pred).powi(2);
    }
    Ok(total / m as f64)
}

/// Stationary point of [`mixup_risk_closed`] in `w`, from its own normal
/// equations.
pub fn mixup_minimizer(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    let c = mixup_c_alpha(alpha);
    let n = x.nrows() as f64;
    let xbar = x.row_sum().transpose() / n;
    let ybar = y.mean();
    let a = x.transpose() * x * ((1.0 - 2.0 * c) / n) + &xbar * xbar.transpose() * (2.0 * c);
    let b = x.transpose() * y * ((1.0 - 2.0 * c) / n) + xbar * (2.0 * c * ybar);
    solve_spd(a, b)
}

/// First-order Wasserstein-DRO risk
/// `R_ERM + 2 rho ||w||_{q*} mean|r_i|`.
pub fn wdro_risk_firstorder(prob: &LinearProblem, rho: f64, cost: CostNorm) -> Result<f64> {
    if !(rho >= 0.0) {
        bail_arg!("radius must be >= 0");
    }
    let mean_abs = prob.residuals().iter().map(|r| r.abs()).sum::<f64>() / prob.n() as f64;
    Ok(erm_risk(prob) + 2.0 * rho * cost.dual_norm(prob.feature_weights()) * mean_abs)
}

/// The linear model of `prob` as a pipeline model (features only, intercept
/// as bias).
pub fn as_model(prob: &LinearProblem) -> Result<Model> {
    let d = prob.d();
    let w = DMatrix::from_row_slice(1, d, prob.feature_weights());
    Model::linear(w, DVector::from_element(1, prob.w[d]), Head::Regression)
}

/// Mean squared loss after pessimistic PGD inside the `norm` ball of
/// radius `rho`, using the pipeline's default schedule.
pub fn pgd_surrogate_risk(prob: &LinearProblem, rho: f64, norm: Norm) -> Result<f64> {
    let model = as_model(prob)?;
    let batch = Batch::new(prob.features(), Targets::Real(prob.y.iter().copied().collect()))?;
    let spec = InputPerturbSpec { stance: Stance::Pessimistic, radius: rho, norm, ..Default::default() };
    let x = pgd_perturb(&model, &batch, &LossSpec::Squared, &spec)?;
    let moved = Batch::new(x, batch.targets)?;
    let eval = Evaluation::new(&model, &moved, &LossSpec::Squared)?;
    Ok(eval.losses().iter().sum::<f64>() / prob.n() as f64)
}

/// `(PGD risk - R_ERM) / rho` together with the first-order prediction
/// `2 ||w||_{q*} mean|r|`.
pub fn wdro_slope(prob: &LinearProblem, rho: f64, norm: Norm) -> Result<(f64, f64)> {
    let cost = match norm {
        Norm::L2 => CostNorm::L2,
        Norm::Linf => CostNorm::Linf,
    };
    let empirical = (pgd_surrogate_risk(prob, rho, norm)? - erm_risk(prob)) / rho;
    let predicted = (wdro_risk_firstorder(prob, 1.0, cost)? - erm_risk(prob)).max(0.0);
    Ok((empirical, predicted))
}

/// Least-squares minimizers for targets `(1 - alpha) y` and `y`.
pub fn ls_solution_scaling(x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(0.0..=1.0).contains(&alpha) {
        bail_arg!("smoothing mass {alpha} outside [0, 1]");
    }
    let w_erm = least_squares_fit(x, y)?;
    let w_ls = least_squares_fit(x, &(y * (1.0 - alpha)))?;
    Ok((w_ls, w_erm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn erm_basics() {
        let mut rng = stream(1, "cf");
        let p = random_problem(30, 3, false, &mut rng);
        let zero = p.with_weights(DVector::zeros(4));
        assert!((erm_risk(&zero) - p.y.dot(&p.y) / 30.0).abs() < 1e-12);
        let naive: f64 = (0..p.n())
            .map(|i| {
                let pred: f64 = (0..4).map(|j| p.x[(i, j)] * p.w[j]).sum();
                (p.y[i] - pred).powi(2)
            })
            .sum::<f64>()
            / p.n() as f64;
        assert!((erm_risk(&p) - naive).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_has_zero_residual() {
        let mut rng = stream(2, "cf");
        let p = random_problem(20, 3, false, &mut rng);
        let truth = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let y = &p.x * &truth;
        let w = least_squares_fit(&p.x, &y).unwrap();
        assert!((w - truth).norm() < 1e-10);
        let fitted = least_squares_fit(&p.x, &p.y).unwrap();
        assert!(erm_gradient(&p.x, &p.y, &fitted).norm() < 1e-8);
    }

    #[test]
    fn orthonormal_design() {
        let x = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!((least_squares_fit(&x, &y).unwrap() - x.transpose() * &y).norm() < 1e-14);
    }

    #[test]
    fn singular_design_does_not_abort() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let w = least_squares_fit(&x, &y).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn vrm_closed_arithmetic() {
        let features = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let p = LinearProblem::new(&features, DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(vrm_risk_closed(&p, 0.0), erm_risk(&p));
        assert!((vrm_risk_closed(&p, 0.5) - (erm_risk(&p) + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn mixup_at_least_squares_fit() {
        let mut rng = stream(3, "cf");
        let p = random_problem(50, 4, false, &mut rng);
        let p = p.with_weights(least_squares_fit(&p.x, &p.y).unwrap());
        let c = mixup_c_alpha(0.7);
        assert!((mixup_risk_closed(&p, 0.7) - (1.0 - 2.0 * c) * erm_risk(&p)).abs() < 1e-10);
        assert!((mixup_risk_closed(&p, 1e-12) - erm_risk(&p)).abs() < 1e-10);
    }

    #[test]
    fn wdro_degenerate_cases() {
        let mut rng = stream(4, "cf");
        let p = random_problem(40, 3, false, &mut rng);
        assert_eq!(wdro_risk_firstorder(&p, 0.0, CostNorm::L2).unwrap(), erm_risk(&p));
        let exact = p.with_weights(DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]));
        let exact = LinearProblem { y: &exact.x * &exact.w, ..exact };
        assert!((wdro_risk_firstorder(&exact, 0.3, CostNorm::Linf).unwrap() - erm_risk(&exact)).abs() < 1e-12);
    }

    #[test]
    fn dual_norms() {
        let v = [3.0, -4.0];
        assert_eq!(CostNorm::L1.dual_norm(&v), 4.0);
        assert_eq!(CostNorm::L2.dual_norm(&v), 5.0);
        assert_eq!(CostNorm::Linf.dual_norm(&v), 7.0);
    }

    #[test]
    fn ls_scaling_identity() {
        let mut rng = stream(5, "cf");
        let p = random_problem(60, 3, true, &mut rng);
        let (a, b) = ls_solution_scaling(&p.x, &p.y, 0.0).unwrap();
        assert_eq!(a, b);
        let (ls, erm) = ls_solution_scaling(&p.x, &p.y, 0.3).unwrap();
        assert!((&ls - &erm * 0.7).norm() < 1e-8);
        let cos = ls.dot(&erm) / (ls.norm() * erm.norm());
        assert!(cos > 1.0 - 1e-10);
    }
}
