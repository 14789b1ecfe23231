//! Forward evaluation, per-sample losses and hand-derived gradients for
//! linear models and small ReLU MLPs, plus the Adam update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::perturb_y::credal_terms;
use crate::Stance;

/// Probabilities are clamped to this value before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

/// Task head on top of the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Regression,
    Classes(usize),
    /// Scalar utility per item; batches carry `[item_a ; item_b]` rows.
    PairwiseScore,
}

impl Head {
    pub fn output_width(&self) -> usize {
        match self {
            Head::Regression | Head::PairwiseScore => 1,
            Head::Classes(k) => *k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::Dimension(format!(
                "bias length {} != weight rows {}",
                bias.len(),
                weight.nrows()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.nrows()
    }
}

/// Feed-forward model: a stack of affine layers and a task head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    head: Head,
}

impl Model {
    pub fn new(layers: Vec<Layer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            bail_arg!("model needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::Dimension(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].output_width(),
                    pair[1].input_width()
                )));
            }
        }
        if let Head::Classes(k) = head {
            if k < 1 {
                bail_arg!("classification head needs K >= 1");
            }
        }
        let out = layers.last().map(Layer::output_width).unwrap_or(0);
        if out != head.output_width() {
            return Err(Error::Dimension(format!(
                "last layer width {out} does not match head width {}",
                head.output_width()
            )));
        }
        Ok(Self { layers, head })
    }

    /// Single affine layer with identity activation.
    pub fn linear(weight: DMatrix<f64>, bias: DVector<f64>, head: Head) -> Result<Self> {
        Self::new(vec![Layer::new(weight, bias, Activation::Identity)?], head)
    }

    /// ReLU MLP with He-uniform weights and zero biases. An empty `hidden`
    /// gives a linear model.
    pub fn mlp<R: Rng + ?Sized>(input: usize, hidden: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(head.output_width());
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| dist.sample(rng));
            let activation = if i + 2 < widths.len() {
                Activation::Relu
            } else {
                Activation::Identity
            };
            layers.push(Layer::new(weight, DVector::zeros(fan_out), activation)?);
        }
        Self::new(layers, head)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Width of one item fed to the network.
    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    /// Width of one batch row (two items for pairwise heads).
    pub fn row_width(&self) -> usize {
        match self.head {
            Head::PairwiseScore => 2 * self.input_width(),
            _ => self.input_width(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flattened parameters: per layer, weight (column-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }
}

/// Supervision attached to a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Crisp class indices.
    Classes(Vec<usize>),
    /// Probability rows, `n × K`.
    Soft(DMatrix<f64>),
    Real(Vec<f64>),
    /// `true` when item a is preferred over item b.
    Preference(Vec<bool>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Soft(m) => m.nrows(),
            Targets::Real(v) => v.len(),
            Targets::Preference(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows selected by `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Soft(m) => Targets::Soft(m.select_rows(idx)),
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Preference(v) => Targets::Preference(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn new(x: DMatrix<f64>, targets: Targets) -> Result<Self> {
        if x.nrows() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} targets",
                x.nrows(),
                targets.len()
            )));
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            targets: self.targets.select(idx),
        }
    }
}

/// Per-sample loss family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Squared,
    /// Softmax cross-entropy against crisp or soft targets.
    CrossEntropy,
    /// Credal-set label loss of mass `alpha` around the observed class.
    Credal { stance: Stance, alpha: f64 },
    BradleyTerry,
}

impl LossSpec {
    pub fn validate(&self, head: Head, targets: &Targets) -> Result<()> {
        let bad = |msg: &str| Err(Error::Targets(msg.to_string()));
        match (self, head, targets) {
            (LossSpec::Squared, Head::Regression, Targets::Real(_)) => Ok(()),
            (LossSpec::Squared, ..) => bad("squared loss needs a regression head with real targets"),
            (LossSpec::CrossEntropy, Head::Classes(k), Targets::Classes(y)) => check_classes(y, k),
            (LossSpec::CrossEntropy, Head::Classes(k), Targets::Soft(t)) => {
                if t.ncols() != k {
                    return bad("soft target width differs from class count");
                }
                Ok(())
            }
            (LossSpec::CrossEntropy, ..) => bad("cross-entropy needs a class head"),
            (LossSpec::Credal { alpha, .. }, head, targets) => {
                if !(0.0..1.0).contains(alpha) {
                    return Err(Error::InvalidArgument(format!("credal mass {alpha} outside [0, 1)")));
                }
                match (head, targets) {
                    (Head::Classes(k), Targets::Classes(y)) if k >= 2 => check_classes(y, k),
                    (Head::PairwiseScore, Targets::Preference(_)) => Ok(()),
                    _ => bad("credal losses need crisp labels and a K >= 2 class head (or a pairwise head)"),
                }
            }
            (LossSpec::BradleyTerry, Head::PairwiseScore, Targets::Preference(_)) => Ok(()),
            (LossSpec::BradleyTerry, ..) => bad("bradley-terry needs a pairwise head with preference targets"),
        }
    }
}

fn check_classes(y: &[usize], k: usize) -> Result<()> {
    match y.iter().find(|&&c| c >= k) {
        Some(c) => Err(Error::Targets(format!("class index {c} >= K = {k}"))),
        None => Ok(()),
    }
}

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

struct Trace {
    /// Input of every layer; `inputs[0]` is the batch itself.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<DMatrix<f64>>,
    out: DMatrix<f64>,
}

fn trace(model: &Model, x: &DMatrix<f64>) -> Trace {
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut a = x.clone();
    for layer in &model.layers {
        let mut z = &a * layer.weight.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(layer.bias[j]);
        }
        let next = match layer.activation {
            Activation::Identity => z.clone(),
            Activation::Relu => z.map(|v| v.max(0.0)),
        };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    Trace { inputs, pre, out: a }
}

/// Gradient with respect to model parameters, laid out like [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl Gradient {
    fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weight.nrows(), l.weight.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }
}

/// Backpropagate `d_out` (derivative w.r.t. the network output) through a
/// trace, accumulating into `grad` and returning the input derivative.
fn backprop(model: &Model, tr: &Trace, d_out: DMatrix<f64>, grad: &mut Gradient) -> DMatrix<f64> {
    let mut d = d_out;
    for (li, layer) in model.layers.iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            d.zip_apply(&tr.pre[li], |g, z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let (gw, gb) = &mut grad.layers[li];
        *gw += d.transpose() * &tr.inputs[li];
        for (j, col) in d.column_iter().enumerate() {
            gb[j] += col.sum();
        }
        d = &d * &layer.weight;
    }
    d
}

/// Scores for every row of `x` (items, for pairwise heads).
pub fn forward(model: &Model, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.input_width() {
        return Err(Error::Dimension(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            model.input_width()
        )));
    }
    Ok(trace(model, x).out)
}

/// Per-row logits for class-style losses. Pairwise heads map a score
/// difference `d` to the binary logits `(0, d)`, class 1 meaning "a preferred".
pub fn logits(model: &Model, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match model.head {
        Head::PairwiseScore => {
            let (sa, sb) = pair_scores(model, x)?;
            Ok(DMatrix::from_fn(x.nrows(), 2, |i, j| if j == 0 { 0.0 } else { sa[i] - sb[i] }))
        }
        _ => {
            if x.ncols() != model.input_width() {
                return Err(Error::Dimension(format!(
                    "input has {} columns, model expects {}",
                    x.ncols(),
                    model.input_width()
                )));
            }
            Ok(trace(model, x).out)
        }
    }
}

fn pair_scores(model: &Model, x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.input_width();
    if x.ncols() != 2 * d {
        return Err(Error::Dimension(format!(
            "pair rows have {} columns, expected 2 x {d}",
            x.ncols()
        )));
    }
    let a = trace(model, &x.columns(0, d).into_owned()).out;
    let b = trace(model, &x.columns(d, d).into_owned()).out;
    Ok((a.column(0).iter().copied().collect(), b.column(0).iter().copied().collect()))
}

/// Softmax and log-softmax of one logit row, with max subtraction.
pub fn softmax_row(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let ls = s.ln();
    let p = e.iter().map(|v| v / s).collect();
    let lp = z.iter().map(|v| v - m - ls).collect();
    (p, lp)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss of one logit row given coefficients on `-log p_k`; returns the
/// logit derivative `p * sum(c) - c`.
fn coeff_grad(p: &[f64], c: &[f64]) -> Vec<f64> {
    let sc: f64 = c.iter().sum();
    p.iter().zip(c).map(|(pj, cj)| pj * sc - cj).collect()
}

fn class_row_loss(z: &[f64], target: ClassTarget, spec: &LossSpec) -> (f64, Vec<f64>) {
    let (p, lp) = softmax_row(z);
    let floor = log_floor();
    match (spec, target) {
        (LossSpec::Credal { stance, alpha }, ClassTarget::Crisp(y)) => {
            let terms = credal_terms(&p, &lp, y, *alpha, *stance);
            (terms.loss, coeff_grad(&p, &terms.coeffs))
        }
        (_, target) => {
            let t: Vec<f64> = match target {
                ClassTarget::Crisp(y) => (0..z.len()).map(|k| if k == y { 1.0 } else { 0.0 }).collect(),
                ClassTarget::Soft(row) => row,
            };
            let mut loss = 0.0;
            let mut c = vec![0.0; t.len()];
            for k in 0..t.len() {
                if t[k] == 0.0 {
                    continue;
                }
                if lp[k] > floor {
                    loss -= t[k] * lp[k];
                    c[k] = t[k];
                } else {
                    loss -= t[k] * floor;
                }
            }
            (loss, coeff_grad(&p, &c))
        }
    }
}

enum ClassTarget {
    Crisp(usize),
    Soft(Vec<f64>),
}

/// Losses of a batch plus everything needed to backpropagate any weighting
/// of them.
pub struct Evaluation<'m> {
    model: &'m Model,
    losses: Vec<f64>,
    /// `d loss_i / d output_i`; for pairwise heads, w.r.t. `s_a - s_b`.
    d_out: DMatrix<f64>,
    traces: Vec<Trace>,
}

impl<'m> Evaluation<'m> {
    pub fn new(model: &'m Model, batch: &Batch, spec: &LossSpec) -> Result<Self> {
        spec.validate(model.head, &batch.targets)?;
        if batch.x.ncols() != model.row_width() {
            return Err(Error::Dimension(format!(
                "batch has {} columns, model expects {}",
                batch.x.ncols(),
                model.row_width()
            )));
        }
        ensure_finite(&batch.x, "batch features")?;
        let n = batch.len();
        let mut losses = Vec::with_capacity(n);

        match model.head {
            Head::PairwiseScore => {
                let d = model.input_width();
                let ta = trace(model, &batch.x.columns(0, d).into_owned());
                let tb = trace(model, &batch.x.columns(d, d).into_owned());
                let Targets::Preference(pref) = &batch.targets else { unreachable!() };
                let mut d_out = DMatrix::zeros(n, 1);
                for i in 0..n {
                    let diff = ta.out[(i, 0)] - tb.out[(i, 0)];
                    let y = pref[i];
                    let (loss, g) = match spec {
                        LossSpec::BradleyTerry => {
                            let yv = if y { 1.0 } else { 0.0 };
                            (softplus(diff) - yv * diff, sigmoid(diff) - yv)
                        }
                        _ => {
                            let (loss, gz) = class_row_loss(&[0.0, diff], ClassTarget::Crisp(usize::from(y)), spec);
                            (loss, gz[1])
                        }
                    };
                    losses.push(loss);
                    d_out[(i, 0)] = g;
                }
                Ok(Self { model, losses, d_out, traces: vec![ta, tb] })
            }
            Head::Regression => {
                let tr = trace(model, &batch.x);
                let Targets::Real(y) = &batch.targets else { unreachable!() };
                let mut d_out = DMatrix::zeros(n, 1);
                for i in 0..n {
                    let r = tr.out[(i, 0)] - y[i];
                    losses.push(r * r);
                    d_out[(i, 0)] = 2.0 * r;
                }
                Ok(Self { model, losses, d_out, traces: vec![tr] })
            }
            Head::Classes(k) => {
                let tr = trace(model, &batch.x);
                let mut d_out = DMatrix::zeros(n, k);
                let mut row = vec![0.0; k];
                for i in 0..n {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = tr.out[(i, j)];
                    }
                    let target = match &batch.targets {
                        Targets::Classes(y) => ClassTarget::Crisp(y[i]),
                        Targets::Soft(t) => ClassTarget::Soft(t.row(i).iter().copied().collect()),
                        _ => unreachable!(),
                    };
                    let (loss, g) = class_row_loss(&row, target, spec);
                    losses.push(loss);
                    for (j, gj) in g.into_iter().enumerate() {
                        d_out[(i, j)] = gj;
                    }
                }
                Ok(Self { model, losses, d_out, traces: vec![tr] })
            }
        }
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn into_losses(self) -> Vec<f64> {
        self.losses
    }

    /// Gradients of `sum_i weights[i] * loss_i`. Row `i` of the input
    /// gradient is `weights[i]` times the gradient of sample `i`'s own loss.
    pub fn backward(&self, weights: &[f64]) -> Result<(Gradient, DMatrix<f64>)> {
        if weights.len() != self.losses.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} losses",
                weights.len(),
                self.losses.len()
            )));
        }
        let mut d = self.d_out.clone();
        for (i, w) in weights.iter().enumerate() {
            d.row_mut(i).scale_mut(*w);
        }
        let mut grad = Gradient::zeros_like(self.model);
        let input = match self.model.head {
            Head::PairwiseScore => {
                let ga = backprop(self.model, &self.traces[0], d.clone(), &mut grad);
                let gb = backprop(self.model, &self.traces[1], -d, &mut grad);
                let w = ga.ncols();
                let mut both = DMatrix::zeros(ga.nrows(), 2 * w);
                both.columns_mut(0, w).copy_from(&ga);
                both.columns_mut(w, w).copy_from(&gb);
                both
            }
            _ => backprop(self.model, &self.traces[0], d, &mut grad),
        };
        if grad.layers.iter().any(|(w, b)| w.iter().chain(b.iter()).any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok((grad, input))
    }
}

/// Losses and gradients for one batch.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub losses: Vec<f64>,
    pub param_grad: Gradient,
    pub input_grad: DMatrix<f64>,
}

/// Per-sample losses and the gradients of their weighted sum. Without
/// explicit weights each loss contributes `1/n`, i.e. the gradients are
/// those of the batch mean.
pub fn per_sample_loss_and_grads(
    model: &Model,
    batch: &Batch,
    spec: &LossSpec,
    weights: Option<&[f64]>,
) -> Result<LossGrads> {
    let eval = Evaluation::new(model, batch, spec)?;
    let n = batch.len();
    let uniform;
    let w = match weights {
        Some(w) => w,
        None => {
            uniform = vec![1.0 / n as f64; n];
            &uniform
        }
    };
    let (param_grad, input_grad) = eval.backward(w)?;
    Ok(LossGrads {
        losses: eval.into_losses(),
        param_grad,
        input_grad,
    })
}

/// Adam state for a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Convenience for callers that keep weights in a [`Model`].
pub fn adam_step_model(model: &mut Model, grad: &Gradient, state: &mut OptState) -> Result<()> {
    let mut p = model.params();
    adam_step(&mut p, &grad.flatten(), state)?;
    model.set_params(&p)
}
