//! Self-check suites run by `unirobust verify`: the linear-model
//! identities, gradient exactness, aggregation bounds, credal label losses
//! and metric oracles, each on a handful of seeded random draws.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::aggregate::{agg, agg_limits_check, AggSpec};
use crate::closedform::{
    least_squares_fit, ls_solution_scaling, mc_mixup_risk, mc_vicinal_risk, mixup_minimizer,
    mixup_risk_closed, random_problem, vrm_risk_closed, wdro_slope,
};
use crate::error::{Error, Result};
use crate::metrics::{brier, cvar10};
use crate::numgrad::{logits, per_sample_loss_and_grads, softmax_row, Activation, Batch, Head, Layer, LossSpec, Model, Targets};
use crate::perturb_x::Norm;
use crate::perturb_y::{loss_neutral_ls, loss_optimistic_lr, loss_pessimistic, CredalTarget};
use crate::rng::{stream, StreamRng};
use crate::Stance;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Closedform,
    Gradients,
    Aggregation,
    Labels,
    Metrics,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 6] = ["closedform", "gradients", "aggregation", "labels", "metrics", "all"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "closedform" => Suite::Closedform,
            "gradients" => Suite::Gradients,
            "aggregation" => Suite::Aggregation,
            "labels" => Suite::Labels,
            "metrics" => Suite::Metrics,
            "all" => Suite::All,
            _ => return Err(Error::InvalidArgument(format!("unknown suite '{s}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.to_string(), pass, detail }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Closedform {
        out.extend(closedform(seed)?);
    }
    if all || suite == Suite::Gradients {
        out.extend(gradients(seed)?);
    }
    if all || suite == Suite::Aggregation {
        out.extend(aggregation(seed)?);
    }
    if all || suite == Suite::Labels {
        out.extend(labels(seed)?);
    }
    if all || suite == Suite::Metrics {
        out.extend(metrics(seed)?);
    }
    Ok(out)
}

fn closedform(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/closedform");
    let mut worst_vrm = 0.0f64;
    let mut worst_mix = 0.0f64;
    let mut worst_min = 0.0f64;
    let mut worst_ls = 0.0f64;
    let mut worst_slope = 0.0f64;
    for (i, d) in [2usize, 5, 10].into_iter().enumerate() {
        let prob = random_problem(200, d, false, &mut rng);
        let sigma = 0.1 + 0.9 * rng.random::<f64>();
        let closed = vrm_risk_closed(&prob, sigma);
        let mc = mc_vicinal_risk(&prob, sigma, 1_000_000, &mut rng);
        worst_vrm = worst_vrm.max((mc - closed).abs() / closed);

        let alpha = 0.2 + 2.0 * rng.random::<f64>();
        let closed = mixup_risk_closed(&prob, alpha);
        let mc = mc_mixup_risk(&prob, alpha, 1_000_000, &mut rng)?;
        worst_mix = worst_mix.max((mc - closed).abs() / closed);
        let w_mix = mixup_minimizer(&prob.x, &prob.y, alpha)?;
        let w_ls = least_squares_fit(&prob.x, &prob.y)?;
        worst_min = worst_min.max((w_mix - w_ls).norm());

        let cls = random_problem(200, d, true, &mut rng);
        for a in [0.1, 0.3, 0.5] {
            let (wl, we) = ls_solution_scaling(&cls.x, &cls.y, a)?;
            worst_ls = worst_ls.max((wl - we * (1.0 - a)).norm());
        }

        let norm = if i % 2 == 0 { Norm::L2 } else { Norm::Linf };
        let (emp, pred) = wdro_slope(&prob, 1e-4, norm)?;
        worst_slope = worst_slope.max((emp - pred).abs() / pred);
    }
    Ok(vec![
        Check::new("vrm-regularizer", worst_vrm < 0.01, format!("max rel err {worst_vrm:.2e} (< 1e-2)")),
        Check::new("mixup-identity", worst_mix < 0.01, format!("max rel err {worst_mix:.2e} (< 1e-2)")),
        Check::new("mixup-minimizer", worst_min < 1e-8, format!("max |w_mix - w_ls| {worst_min:.2e} (< 1e-8)")),
        Check::new("ls-rescaling", worst_ls < 1e-8, format!("max |w_ls - (1-a) w| {worst_ls:.2e} (< 1e-8)")),
        Check::new("wdro-slope", worst_slope < 0.05, format!("max rel err {worst_slope:.2e} (< 5e-2)")),
    ])
}

/// A random model and batch on which `spec` is defined, avoiding the kinks
/// of the credal losses.
pub fn random_case(spec: &LossSpec, rng: &mut StreamRng) -> Result<(Model, Batch)> {
    let n = 10;
    let d = 3;
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let (head, width) = match spec {
        LossSpec::Squared => (Head::Regression, d),
        LossSpec::BradleyTerry => (Head::PairwiseScore, d),
        _ => (Head::Classes(3), d),
    };
    let hidden = 4;
    let l1 = Layer::new(
        DMatrix::from_fn(hidden, width, |_, _| normal()),
        DVector::from_fn(hidden, |_, _| 0.5 * normal()),
        Activation::Relu,
    )?;
    let l2 = Layer::new(
        DMatrix::from_fn(head.output_width(), hidden, |_, _| normal()),
        DVector::from_fn(head.output_width(), |_, _| 0.5 * normal()),
        Activation::Identity,
    )?;
    let model = Model::new(vec![l1, l2], head)?;
    let cols = model.row_width();
    loop {
        let x = DMatrix::from_fn(n, cols, |_, _| normal());
        let targets = match spec {
            LossSpec::Squared => Targets::Real((0..n).map(|_| normal()).collect()),
            LossSpec::BradleyTerry => Targets::Preference((0..n).map(|_| normal() > 0.0).collect()),
            LossSpec::CrossEntropy => {
                let raw = DMatrix::from_fn(n, 3, |_, _| normal().exp());
                let mut t = raw.clone();
                for i in 0..n {
                    let s: f64 = raw.row(i).sum();
                    for j in 0..3 {
                        t[(i, j)] = raw[(i, j)] / s;
                    }
                }
                Targets::Soft(t)
            }
            LossSpec::Credal { .. } => Targets::Classes((0..n).map(|i| i % 3).collect()),
        };
        let batch = Batch::new(x, targets)?;
        if !near_kink(&model, &batch, spec)? && !near_relu_kink(&model, &batch) {
            return Ok((model, batch));
        }
    }
}

fn near_relu_kink(model: &Model, batch: &Batch) -> bool {
    let l = &model.layers()[0];
    let w = l.input_width();
    let items = batch.x.ncols() / w;
    (0..batch.len()).any(|i| {
        (0..items).any(|s| {
            let x = batch.x.row(i).columns(s * w, w).transpose();
            let pre = &l.weight * x + &l.bias;
            pre.iter().any(|v| v.abs() < 1e-3)
        })
    })
}

fn near_kink(model: &Model, batch: &Batch, spec: &LossSpec) -> Result<bool> {
    let LossSpec::Credal { stance, alpha } = spec else {
        return Ok(false);
    };
    let Targets::Classes(y) = &batch.targets else {
        return Ok(false);
    };
    let z = logits(model, &batch.x)?;
    for (i, &yi) in y.iter().enumerate() {
        let row: Vec<f64> = z.row(i).iter().copied().collect();
        let (p, _) = softmax_row(&row);
        match stance {
            Stance::Optimistic if (p[yi] - (1.0 - alpha)).abs() < 1e-3 => return Ok(true),
            Stance::Pessimistic => {
                let mut others: Vec<f64> = p.iter().enumerate().filter(|(k, _)| *k != yi).map(|(_, v)| *v).collect();
                others.sort_by(f64::total_cmp);
                if others.len() > 1 && others[1] - others[0] < 1e-3 {
                    return Ok(true);
                }
            }
            _ => {}
        }
    }
    Ok(false)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Relative errors of the parameter and input gradients of the batch-mean
/// loss against central differences with step `h`.
pub fn gradient_error(model: &Model, batch: &Batch, spec: &LossSpec, h: f64) -> Result<(f64, f64)> {
    let g = per_sample_loss_and_grads(model, batch, spec, None)?;
    let mean = |m: &Model, b: &Batch| -> Result<f64> {
        let l = per_sample_loss_and_grads(m, b, spec, None)?.losses;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    };
    let params = model.params();
    let mut fd = Vec::with_capacity(params.len());
    let mut m = model.clone();
    for k in 0..params.len() {
        let mut p = params.clone();
        p[k] += h;
        m.set_params(&p)?;
        let up = mean(&m, batch)?;
        p[k] -= 2.0 * h;
        m.set_params(&p)?;
        let down = mean(&m, batch)?;
        fd.push((up - down) / (2.0 * h));
    }
    let param_err = rel_err(&fd, &g.param_grad.flatten());

    let mut fd_x = Vec::new();
    let mut an_x = Vec::new();
    for i in 0..batch.len() {
        for j in 0..batch.x.ncols() {
            let mut b = batch.clone();
            b.x[(i, j)] += h;
            let up = mean(model, &b)?;
            b.x[(i, j)] -= 2.0 * h;
            let down = mean(model, &b)?;
            fd_x.push((up - down) / (2.0 * h));
            an_x.push(g.input_grad[(i, j)]);
        }
    }
    Ok((param_err, rel_err(&fd_x, &an_x)))
}

pub fn gradient_specs() -> Vec<(&'static str, LossSpec)> {
    vec![
        ("squared", LossSpec::Squared),
        ("soft-cross-entropy", LossSpec::CrossEntropy),
        ("label-smoothing", LossSpec::Credal { stance: Stance::Neutral, alpha: 0.2 }),
        ("label-relaxation", LossSpec::Credal { stance: Stance::Optimistic, alpha: 0.2 }),
        ("pessimistic-credal", LossSpec::Credal { stance: Stance::Pessimistic, alpha: 0.2 }),
        ("bradley-terry", LossSpec::BradleyTerry),
    ]
}

fn gradients(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, spec) in gradient_specs() {
        let mut rng = stream(seed, &format!("verify/gradients/{name}"));
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let (model, batch) = random_case(&spec, &mut rng)?;
            let (p, x) = gradient_error(&model, &batch, &spec, 1e-5)?;
            worst = worst.max(p).max(x);
        }
        out.push(Check::new(&format!("gradient-{name}"), worst < 1e-4, format!("max rel err {worst:.2e} (< 1e-4)")));
    }
    Ok(out)
}

fn aggregation(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/aggregation");
    let mut ordered = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let l: Vec<f64> = (0..n).map(|_| 10.0 * rng.random::<f64>()).collect();
        let tau = 0.01 + 10.0 * rng.random::<f64>();
        let lo = l.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = agg(&l, &AggSpec::neutral())?;
        let p = agg(&l, &AggSpec { stance: Stance::Pessimistic, tau })?;
        let o = agg(&l, &AggSpec { stance: Stance::Optimistic, tau })?;
        ordered &= lo <= o && o <= mean && mean <= p && p <= hi;
    }
    let l: Vec<f64> = (0..50).map(|_| 10.0 * rng.random::<f64>()).collect();
    let rep = agg_limits_check(&l, &[1e-3, 1e3])?;
    let small = &rep.rows[0];
    let large = &rep.rows[1];
    let limits = (small.pessimistic - rep.max).abs() < 1e-2
        && (small.optimistic - rep.min).abs() < 1e-2
        && (large.pessimistic - rep.mean).abs() < 1e-2
        && (large.optimistic - rep.mean).abs() < 1e-2;
    let p = agg(&[0.0, 2.0], &AggSpec { stance: Stance::Pessimistic, tau: 1.0 })?;
    let o = agg(&[0.0, 2.0], &AggSpec { stance: Stance::Optimistic, tau: 1.0 })?;
    let worked = (p - 1.43378).abs() < 1e-4 && (o - 0.56622).abs() < 1e-4;
    let big = agg(&[1e6, 0.0], &AggSpec { stance: Stance::Pessimistic, tau: 1e-3 })?;
    Ok(vec![
        Check::new("aggregation-bounds", ordered, "min <= opt <= mean <= pess <= max on 1000 draws".into()),
        Check::new("aggregation-limits", limits, "tau 1e-3 -> max/min, tau 1e3 -> mean, within 1e-2".into()),
        Check::new("aggregation-worked", worked, format!("pess {p:.5}, opt {o:.5}")),
        Check::new("aggregation-overflow", big.is_finite(), format!("losses up to 1e6 at tau 1e-3 -> {big}")),
    ])
}

fn random_simplex(k: usize, rng: &mut StreamRng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn labels(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/labels");
    let mut vertex_err = 0.0f64;
    let mut ordered = true;
    for _ in 0..2000 {
        let k = rng.random_range(2..6);
        let p = random_simplex(k, &mut rng);
        let y = rng.random_range(0..k);
        let alpha = 0.99 * rng.random::<f64>();
        let t = CredalTarget::new(y, alpha, k)?;
        let pess = loss_pessimistic(&p, &t)?;
        let nll = |q: &[f64]| -> f64 { q.iter().zip(&p).map(|(a, b)| -a * b.max(1e-12).ln()).sum() };
        let vmax = (0..k)
            .filter(|j| *j != y)
            .map(|j| {
                let mut q = vec![0.0; k];
                q[y] = 1.0 - alpha;
                q[j] += alpha;
                nll(&q)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        vertex_err = vertex_err.max((pess - vmax).abs());
        let opt = loss_optimistic_lr(&p, &t)?;
        let ls = loss_neutral_ls(&p, &t)?;
        ordered &= opt <= pess + 1e-9 && opt <= ls + 1e-9;
    }
    let w = loss_pessimistic(&[0.7, 0.2, 0.1], &CredalTarget::new(0, 0.3, 3)?)?;
    Ok(vec![
        Check::new("pessimistic-vertex", vertex_err < 1e-10, format!("max |closed - vertex max| {vertex_err:.2e}")),
        Check::new("pessimistic-worked", (w - 0.9404).abs() < 1e-3, format!("{w:.4} (0.9404)")),
        Check::new("credal-ordering", ordered, "opt <= pess and opt <= ls on 2000 draws".into()),
    ])
}

fn metrics(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/metrics");
    let mut cvar_ok = true;
    let mut brier_ok = true;
    for _ in 0..200 {
        let n = 10 * rng.random_range(1..20);
        let l: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
        let mut s = l.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        let m = n / 10;
        let oracle = s[..m].iter().sum::<f64>() / m as f64;
        cvar_ok &= cvar10(&l)? == oracle;

        let k = rng.random_range(2..5);
        let probs = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>());
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut total = 0.0;
        for i in 0..n {
            for c in 0..k {
                let t = if y[i] == c { 1.0 } else { 0.0 };
                total += (probs[(i, c)] - t).powi(2);
            }
        }
        brier_ok &= (brier(&probs, &y)? - total / n as f64).abs() < 1e-12;
    }
    Ok(vec![
        Check::new("cvar10-oracle", cvar_ok, "matches sort-and-average on 200 vectors".into()),
        Check::new("brier-oracle", brier_ok, "matches the per-element loop on 200 matrices".into()),
    ])
}
