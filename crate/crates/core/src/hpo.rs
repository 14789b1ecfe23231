//! Joint hyperparameter search over [`RobustSpec`]: search spaces with
//! frozen dimensions for the single-mechanism presets, a random sampler, a
//! small TPE sampler, trial execution and history persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggSpec;
use crate::data::Dataset;
use crate::enrich::{EnrichMode, EnrichSpec};
use crate::error::{bail_arg, Error, Result};
use crate::metrics::{EvalReport, Metric};
use crate::perturb_x::{InputPerturbSpec, Norm};
use crate::pipeline::{train, LabelSpec, RobustSpec, Selection, StageFlags, TrainSettings};
use crate::rng::{derive_seed, stream};
use crate::Stance;

pub const SCHEMA_VERSION: u32 = 1;

/// One coordinate of the configuration vector. Every [`RobustSpec`] field
/// maps to exactly one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    EnrichMode,
    Sigma,
    Replicas,
    MixupAlpha,
    LabelSmoothing,
    InputStance,
    Radius,
    Norm,
    Steps,
    StepSize,
    LabelStance,
    Alpha,
    AggStance,
    Tau,
    LearningRate,
}

impl Param {
    pub const ALL: [Param; 15] = [
        Param::EnrichMode,
        Param::Sigma,
        Param::Replicas,
        Param::MixupAlpha,
        Param::LabelSmoothing,
        Param::InputStance,
        Param::Radius,
        Param::Norm,
        Param::Steps,
        Param::StepSize,
        Param::LabelStance,
        Param::Alpha,
        Param::AggStance,
        Param::Tau,
        Param::LearningRate,
    ];

    fn index(self) -> usize {
        Param::ALL.iter().position(|p| *p == self).unwrap()
    }

    /// Names of the categories, in code order, for categorical parameters.
    pub fn categories(self) -> Option<&'static [&'static str]> {
        match self {
            Param::EnrichMode => Some(&["none", "vrm", "mixup"]),
            Param::InputStance | Param::LabelStance | Param::AggStance => {
                Some(&["pessimistic", "neutral", "optimistic"])
            }
            Param::Norm => Some(&["l2", "linf"]),
            _ => None,
        }
    }

    fn code_of(self, name: &str) -> Result<f64> {
        let cats = self
            .categories()
            .ok_or_else(|| Error::InvalidArgument(format!("{self:?} is not categorical")))?;
        cats.iter()
            .position(|c| *c == name)
            .map(|i| i as f64)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown choice '{name}' for {self:?}")))
    }
}

/// Configuration encoded as one real per [`Param`]. Categories are stored
/// as their code, `step_size = 0` means the default PGD schedule.
pub type Encoded = [f64; 15];

fn stance_code(s: Stance) -> f64 {
    match s {
        Stance::Pessimistic => 0.0,
        Stance::Neutral => 1.0,
        Stance::Optimistic => 2.0,
    }
}

fn stance_of(c: f64) -> Stance {
    match c.round() as i64 {
        0 => Stance::Pessimistic,
        2 => Stance::Optimistic,
        _ => Stance::Neutral,
    }
}

pub fn encode(spec: &RobustSpec) -> Encoded {
    let mut v = [0.0; 15];
    v[Param::EnrichMode.index()] = match spec.enrich.mode {
        EnrichMode::None => 0.0,
        EnrichMode::Vrm => 1.0,
        EnrichMode::Mixup => 2.0,
    };
    v[Param::Sigma.index()] = spec.enrich.sigma;
    v[Param::Replicas.index()] = spec.enrich.replicas as f64;
    v[Param::MixupAlpha.index()] = spec.enrich.mixup_alpha;
    v[Param::LabelSmoothing.index()] = spec.enrich.label_smoothing;
    v[Param::InputStance.index()] = stance_code(spec.input.stance);
    v[Param::Radius.index()] = spec.input.radius;
    v[Param::Norm.index()] = match spec.input.norm {
        Norm::L2 => 0.0,
        Norm::Linf => 1.0,
    };
    v[Param::Steps.index()] = spec.input.steps as f64;
    v[Param::StepSize.index()] = spec.input.step_size.unwrap_or(0.0);
    v[Param::LabelStance.index()] = stance_code(spec.label.stance);
    v[Param::Alpha.index()] = spec.label.alpha;
    v[Param::AggStance.index()] = stance_code(spec.aggregate.stance);
    v[Param::Tau.index()] = spec.aggregate.tau;
    v[Param::LearningRate.index()] = spec.learning_rate;
    v
}

pub fn decode(v: &Encoded) -> RobustSpec {
    let g = |p: Param| v[p.index()];
    RobustSpec {
        enrich: EnrichSpec {
            mode: match g(Param::EnrichMode).round() as i64 {
                1 => EnrichMode::Vrm,
                2 => EnrichMode::Mixup,
                _ => EnrichMode::None,
            },
            sigma: g(Param::Sigma),
            replicas: g(Param::Replicas).round().max(0.0) as usize,
            mixup_alpha: g(Param::MixupAlpha),
            label_smoothing: g(Param::LabelSmoothing),
        },
        input: InputPerturbSpec {
            stance: stance_of(g(Param::InputStance)),
            radius: g(Param::Radius),
            norm: if g(Param::Norm).round() as i64 == 1 { Norm::Linf } else { Norm::L2 },
            steps: g(Param::Steps).round().max(0.0) as usize,
            step_size: Some(g(Param::StepSize)).filter(|s| *s > 0.0),
        },
        label: LabelSpec { stance: stance_of(g(Param::LabelStance)), alpha: g(Param::Alpha) },
        aggregate: AggSpec { stance: stance_of(g(Param::AggStance)), tau: g(Param::Tau) },
        learning_rate: g(Param::LearningRate),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    /// Kept at an encoded value.
    Frozen { value: f64 },
    Continuous {
        low: f64,
        high: f64,
        #[serde(default)]
        log: bool,
    },
    Integer { low: i64, high: i64 },
    Categorical { choices: Vec<String> },
}

impl Domain {
    pub fn linear(low: f64, high: f64) -> Self {
        Domain::Continuous { low, high, log: false }
    }

    pub fn log(low: f64, high: f64) -> Self {
        Domain::Continuous { low, high, log: true }
    }

    pub fn choices(names: &[&str]) -> Self {
        Domain::Categorical { choices: names.iter().map(|s| s.to_string()).collect() }
    }

    fn validate(&self, p: Param) -> Result<()> {
        match self {
            Domain::Frozen { value } => {
                if !value.is_finite() {
                    bail_arg!("{p:?}: frozen value must be finite");
                }
            }
            Domain::Continuous { low, high, log } => {
                if !(low < high) || !low.is_finite() || !high.is_finite() {
                    bail_arg!("{p:?}: need low < high, got [{low}, {high}]");
                }
                if *log && !(*low > 0.0) {
                    bail_arg!("{p:?}: log scale needs low > 0");
                }
                if p.categories().is_some() {
                    bail_arg!("{p:?} is categorical");
                }
            }
            Domain::Integer { low, high } => {
                if low > high {
                    bail_arg!("{p:?}: need low <= high");
                }
                if !matches!(p, Param::Replicas | Param::Steps) {
                    bail_arg!("{p:?} is not an integer parameter");
                }
            }
            Domain::Categorical { choices } => {
                if choices.is_empty() {
                    bail_arg!("{p:?}: no choices");
                }
                for c in choices {
                    p.code_of(c)?;
                }
            }
        }
        Ok(())
    }

    fn is_frozen(&self) -> bool {
        matches!(self, Domain::Frozen { .. })
    }
}

/// One domain per [`Param`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dims: BTreeMap<Param, Domain>,
}

pub mod ranges {
    pub const SIGMA: (f64, f64) = (1e-3, 1.0);
    pub const RADIUS: (f64, f64) = (1e-4, 1.0);
    pub const ALPHA: (f64, f64) = (0.0, 0.5);
    pub const TAU: (f64, f64) = (0.05, 5.0);
    pub const LEARNING_RATE: (f64, f64) = (1e-4, 1e-1);
    pub const MIXUP_ALPHA: (f64, f64) = (0.1, 10.0);
}

impl SearchSpace {
    /// Every dimension frozen at `spec`.
    pub fn frozen(spec: &RobustSpec) -> Self {
        let v = encode(spec);
        let dims = Param::ALL
            .iter()
            .map(|p| (*p, Domain::Frozen { value: v[p.index()] }))
            .collect();
        Self { dims }
    }

    pub fn with(mut self, p: Param, d: Domain) -> Self {
        self.dims.insert(p, d);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for p in Param::ALL {
            match self.dims.get(&p) {
                Some(d) => d.validate(p)?,
                None => bail_arg!("search space has no domain for {p:?}"),
            }
        }
        Ok(())
    }

    pub fn free_params(&self) -> Vec<Param> {
        Param::ALL.into_iter().filter(|p| !self.dims[p].is_frozen()).collect()
    }

    fn domain(&self, p: Param) -> &Domain {
        &self.dims[&p]
    }
}

/// Named points and sub-spaces of the joint space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Erm,
    Vrm,
    Mixup,
    #[serde(rename = "w-dro")]
    Wdro,
    KlDro,
    #[serde(rename = "w-dfo")]
    Wdfo,
    KlDfo,
    Ls,
    Lr,
    Joint,
}

impl Preset {
    /// Single-axis baselines that live inside the joint space.
    pub const BASELINES: [Preset; 8] = [
        Preset::Erm,
        Preset::Vrm,
        Preset::Wdro,
        Preset::KlDro,
        Preset::Wdfo,
        Preset::KlDfo,
        Preset::Ls,
        Preset::Lr,
    ];

    pub const ALL: [Preset; 10] = [
        Preset::Erm,
        Preset::Vrm,
        Preset::Mixup,
        Preset::Wdro,
        Preset::KlDro,
        Preset::Wdfo,
        Preset::KlDfo,
        Preset::Ls,
        Preset::Lr,
        Preset::Joint,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Erm => "erm",
            Preset::Vrm => "vrm",
            Preset::Mixup => "mixup",
            Preset::Wdro => "w-dro",
            Preset::KlDro => "kl-dro",
            Preset::Wdfo => "w-dfo",
            Preset::KlDfo => "kl-dfo",
            Preset::Ls => "ls",
            Preset::Lr => "lr",
            Preset::Joint => "joint",
        }
    }

    /// A representative configuration with moderate strength.
    pub fn spec(&self) -> RobustSpec {
        let mut s = RobustSpec::erm();
        match self {
            Preset::Erm | Preset::Joint => {}
            Preset::Vrm => s.enrich = EnrichSpec::vrm(0.1),
            Preset::Mixup => s.enrich = EnrichSpec::mixup(1.0),
            Preset::Wdro | Preset::Wdfo => {
                s.input.stance = if *self == Preset::Wdro { Stance::Pessimistic } else { Stance::Optimistic };
                s.input.radius = 0.1;
            }
            Preset::KlDro | Preset::KlDfo => {
                s.aggregate.stance = if *self == Preset::KlDro { Stance::Pessimistic } else { Stance::Optimistic };
                s.aggregate.tau = 1.0;
            }
            Preset::Ls | Preset::Lr => {
                s.label.stance = if *self == Preset::Ls { Stance::Neutral } else { Stance::Optimistic };
                s.label.alpha = 0.1;
            }
        }
        s
    }

    /// Stages a run of this preset touches.
    pub fn stages(&self) -> StageFlags {
        let mut f = StageFlags::default();
        match self {
            Preset::Erm => {}
            Preset::Vrm | Preset::Mixup => f.enrich = true,
            Preset::Wdro | Preset::Wdfo => f.input = true,
            Preset::KlDro | Preset::KlDfo => f.aggregate = true,
            Preset::Ls | Preset::Lr => f.label = true,
            Preset::Joint => {
                f = StageFlags { enrich: true, input: true, label: true, aggregate: true };
            }
        }
        f
    }

    /// Sub-space searched for this preset: its own strength parameter and
    /// the learning rate are free, everything else is frozen at ERM.
    pub fn space(&self) -> SearchSpace {
        use ranges::*;
        let base = SearchSpace::frozen(&self.spec())
            .with(Param::LearningRate, Domain::log(LEARNING_RATE.0, LEARNING_RATE.1));
        match self {
            Preset::Erm => base,
            Preset::Vrm => base.with(Param::Sigma, Domain::log(SIGMA.0, SIGMA.1)),
            Preset::Mixup => base.with(Param::MixupAlpha, Domain::log(MIXUP_ALPHA.0, MIXUP_ALPHA.1)),
            Preset::Wdro | Preset::Wdfo => base.with(Param::Radius, Domain::log(RADIUS.0, RADIUS.1)),
            Preset::KlDro | Preset::KlDfo => base.with(Param::Tau, Domain::linear(TAU.0, TAU.1)),
            Preset::Ls | Preset::Lr => base.with(Param::Alpha, Domain::linear(ALPHA.0, ALPHA.1)),
            Preset::Joint => {
                let stances = Domain::choices(&["pessimistic", "neutral", "optimistic"]);
                base.with(Param::EnrichMode, Domain::choices(&["none", "vrm"]))
                    .with(Param::Sigma, Domain::log(SIGMA.0, SIGMA.1))
                    .with(Param::InputStance, stances.clone())
                    .with(Param::Radius, Domain::log(RADIUS.0, RADIUS.1))
                    .with(Param::LabelStance, stances.clone())
                    .with(Param::Alpha, Domain::linear(ALPHA.0, ALPHA.1))
                    .with(Param::AggStance, stances)
                    .with(Param::Tau, Domain::linear(TAU.0, TAU.1))
            }
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset '{s}'")))
    }
}

fn draw<R: Rng + ?Sized>(p: Param, d: &Domain, rng: &mut R) -> f64 {
    match d {
        Domain::Frozen { value } => *value,
        Domain::Continuous { low, high, log: false } => low + (high - low) * rng.random::<f64>(),
        Domain::Continuous { low, high, log: true } => {
            let (a, b) = (low.ln(), high.ln());
            (a + (b - a) * rng.random::<f64>()).exp().clamp(*low, *high)
        }
        Domain::Integer { low, high } => rng.random_range(*low..=*high) as f64,
        Domain::Categorical { choices } => {
            let c = &choices[rng.random_range(0..choices.len())];
            p.code_of(c).expect("validated choice")
        }
    }
}

/// Independent draw per free dimension, in [`Param::ALL`] order.
pub fn sample_random<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Result<RobustSpec> {
    space.validate()?;
    let mut v = [0.0; 15];
    for p in Param::ALL {
        v[p.index()] = draw(p, space.domain(p), rng);
    }
    Ok(decode(&v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeConfig {
    /// Fraction of the history treated as good.
    pub gamma: f64,
    pub n_candidates: usize,
    /// Below this many completed trials the sampler draws at random.
    pub startup: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self { gamma: 0.25, n_candidates: 24, startup: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Random,
    Tpe(TpeConfig),
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Sampler::Random),
            "tpe" => Ok(Sampler::Tpe(TpeConfig::default())),
            _ => Err(Error::InvalidArgument(format!("unknown sampler '{s}'"))),
        }
    }
}

/// Value in the coordinates the density model works in.
fn to_model(d: &Domain, x: f64) -> f64 {
    match d {
        Domain::Continuous { log: true, .. } => x.max(f64::MIN_POSITIVE).ln(),
        _ => x,
    }
}

fn from_model(d: &Domain, z: f64) -> f64 {
    match d {
        Domain::Continuous { low, high, log } => {
            let x = if *log { z.exp() } else { z };
            x.clamp(*low, *high)
        }
        Domain::Integer { low, high } => z.round().clamp(*low as f64, *high as f64),
        _ => z,
    }
}

/// Whether `p` influences training under `spec`. Inactive coordinates
/// are left out of the density models, as in tree-structured search.
pub fn is_active(p: Param, spec: &RobustSpec) -> bool {
    match p {
        Param::Sigma | Param::Replicas => spec.enrich.mode == EnrichMode::Vrm,
        Param::MixupAlpha => spec.enrich.mode == EnrichMode::Mixup,
        Param::Radius | Param::Norm | Param::Steps | Param::StepSize => spec.input.stance != Stance::Neutral,
        Param::LabelStance => spec.label.alpha > 0.0,
        Param::Tau => spec.aggregate.stance != Stance::Neutral,
        _ => true,
    }
}

/// One-dimensional density for a set of observed values, mixed with the
/// uniform prior over the domain at weight `1 / (n + 1)`.
enum Density {
    Kde { points: Vec<f64>, bw: f64, lo: f64, hi: f64 },
    Cat { probs: Vec<(f64, f64)> },
}

impl Density {
    fn fit(p: Param, d: &Domain, xs: &[f64]) -> Density {
        match d {
            Domain::Categorical { choices } => {
                let codes: Vec<f64> = choices.iter().map(|c| p.code_of(c).unwrap()).collect();
                let total = xs.len() as f64 + 1.0;
                let probs = codes
                    .iter()
                    .map(|&c| {
                        let hits = xs.iter().filter(|x| (**x - c).abs() < 0.5).count() as f64;
                        (c, (hits + 1.0 / codes.len() as f64) / total)
                    })
                    .collect();
                Density::Cat { probs }
            }
            _ => {
                let (lo, hi) = match d {
                    Domain::Continuous { low, high, .. } => (to_model(d, *low), to_model(d, *high)),
                    Domain::Integer { low, high } => (*low as f64 - 0.5, *high as f64 + 0.5),
                    _ => (0.0, 0.0),
                };
                let points: Vec<f64> = xs.iter().map(|x| to_model(d, *x)).collect();
                let n = points.len().max(1) as f64;
                let mean = points.iter().sum::<f64>() / n;
                let var = points.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
                let silverman = 1.06 * var.sqrt() * n.powf(-0.2);
                let bw = silverman.max(1e-3 * (hi - lo)).max(1e-12);
                Density::Kde { points, bw, lo, hi }
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Density::Kde { points, bw, lo, hi } => {
                let i = rng.random_range(0..=points.len());
                if i == points.len() {
                    return lo + (hi - lo) * rng.random::<f64>();
                }
                let z: f64 = rng.sample(StandardNormal);
                points[i] + bw * z
            }
            Density::Cat { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for &(c, p) in probs {
                    acc += p;
                    if u < acc {
                        return c;
                    }
                }
                probs.last().unwrap().0
            }
        }
    }

    fn ln_pdf(&self, z: f64) -> f64 {
        match self {
            Density::Kde { points, bw, lo, hi } => {
                let norm = -(bw * (2.0 * std::f64::consts::PI).sqrt()).ln();
                let mut terms: Vec<f64> = points.iter().map(|c| norm - 0.5 * ((z - c) / bw).powi(2)).collect();
                terms.push(-(hi - lo).ln());
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + (terms.iter().map(|t| (t - m).exp()).sum::<f64>() / terms.len() as f64).ln()
            }
            Density::Cat { probs } => probs
                .iter()
                .find(|(c, _)| (c - z).abs() < 0.5)
                .map(|(_, p)| p.ln())
                .unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// Tree-structured Parzen suggestion from the completed `history`.
///
/// Falls back to [`sample_random`] below the startup size or when the
/// history cannot be split into distinct good and bad sets.
pub fn sample_tpe<R: Rng + ?Sized>(
    space: &SearchSpace,
    history: &[TrialRecord],
    cfg: &TpeConfig,
    rng: &mut R,
) -> Result<RobustSpec> {
    space.validate()?;
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) || cfg.n_candidates == 0 {
        bail_arg!("TPE needs gamma in (0, 1) and at least one candidate");
    }
    let n = history.len();
    let free = space.free_params();
    if n < cfg.startup.max(2) || free.is_empty() {
        return sample_random(space, rng);
    }
    let scores: Vec<f64> = history.iter().map(TrialRecord::score).collect();
    if scores.iter().all(|s| *s == scores[0]) {
        return sample_random(space, rng);
    }
    let metric = history[0].selection.metric;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        let ord = if metric.higher_is_better() { y.total_cmp(&x) } else { x.total_cmp(&y) };
        ord.then(a.cmp(&b))
    });
    let n_good = ((cfg.gamma * n as f64).ceil() as usize).clamp(1, n - 1);
    let enc: Vec<Encoded> = history.iter().map(|r| encode(&r.spec)).collect();

    let models: Vec<(Param, Density, Density)> = free
        .iter()
        .map(|&p| {
            let d = space.domain(p);
            let col = |idx: &[usize]| {
                idx.iter()
                    .filter(|&&i| is_active(p, &history[i].spec))
                    .map(|&i| enc[i][p.index()])
                    .collect::<Vec<_>>()
            };
            let good = Density::fit(p, d, &col(&order[..n_good]));
            let bad = Density::fit(p, d, &col(&order[n_good..]));
            (p, good, bad)
        })
        .collect();

    let base = decode_frozen(space);
    let mut best: Option<(f64, Encoded)> = None;
    for _ in 0..cfg.n_candidates {
        let mut v = base;
        let mut z = base;
        for (p, good, _) in &models {
            let d = space.domain(*p);
            v[p.index()] = from_model(d, good.sample(rng));
            z[p.index()] = to_model(d, v[p.index()]);
        }
        let spec = decode(&v);
        let score: f64 = models
            .iter()
            .filter(|(p, _, _)| is_active(*p, &spec))
            .map(|(p, good, bad)| good.ln_pdf(z[p.index()]) - bad.ln_pdf(z[p.index()]))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, v));
        }
    }
    Ok(decode(&best.unwrap().1))
}

fn decode_frozen(space: &SearchSpace) -> Encoded {
    let mut v = [0.0; 15];
    for p in Param::ALL {
        if let Domain::Frozen { value } = space.domain(p) {
            v[p.index()] = *value;
        }
    }
    v
}

/// Outcome of one training run inside a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub schema: u32,
    pub trial: usize,
    pub spec: RobustSpec,
    pub settings: TrainSettings,
    pub seed: u64,
    pub selection: Selection,
    /// Selection metric at the chosen checkpoint; absent when no epoch
    /// finished.
    pub selection_value: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Reports of every split at the chosen checkpoint.
    pub reports: Vec<EvalReport>,
    pub epoch_losses: Vec<f64>,
    pub diverged: bool,
    pub stages: StageFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl TrialRecord {
    /// Selection value, with failed trials scored worst-possible.
    pub fn score(&self) -> f64 {
        match self.selection_value {
            Some(v) if !self.diverged => v,
            _ => self.selection.metric.worst(),
        }
    }

    pub fn report(&self, split: crate::data::Split) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

/// Train `spec` once and summarize the run.
pub fn run_trial(
    spec: &RobustSpec,
    ds: &Dataset,
    settings: &TrainSettings,
    selection: &Selection,
    seed: u64,
) -> Result<TrialRecord> {
    let start = Instant::now();
    let out = train(spec, ds, settings, selection, seed)?;
    Ok(TrialRecord {
        schema: SCHEMA_VERSION,
        trial: 0,
        spec: *spec,
        settings: settings.clone(),
        seed,
        selection: *selection,
        selection_value: out.best_epoch.map(|_| out.best_value),
        best_epoch: out.best_epoch,
        reports: out.best_reports(),
        epoch_losses: out.epoch_losses,
        diverged: out.diverged,
        stages: out.stages,
        wall_clock_secs: Some(start.elapsed().as_secs_f64()),
    })
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub history: Vec<TrialRecord>,
    /// Index into `history` of the best trial.
    pub best: usize,
}

impl SearchResult {
    pub fn best(&self) -> &TrialRecord {
        &self.history[self.best]
    }
}

pub mod streams {
    pub fn trial(t: usize) -> String {
        format!("trial/{t}")
    }

    pub fn sample(t: usize) -> String {
        format!("trial/{t}/sample")
    }
}

/// Index of the best record; the earliest wins ties.
pub fn best_index(history: &[TrialRecord]) -> Option<usize> {
    let metric = history.first()?.selection.metric;
    let mut best = 0;
    for (i, r) in history.iter().enumerate().skip(1) {
        if metric.better(r.score(), history[best].score()) {
            best = i;
        }
    }
    Some(best)
}

/// Run `n_trials` trials. Random search may train trials on a thread pool;
/// results are identical to the sequential order either way.
#[allow(clippy::too_many_arguments)]
pub fn search(
    space: &SearchSpace,
    sampler: &Sampler,
    n_trials: usize,
    ds: &Dataset,
    settings: &TrainSettings,
    selection: &Selection,
    seed: u64,
    parallel: bool,
) -> Result<SearchResult> {
    space.validate()?;
    if n_trials == 0 {
        bail_arg!("search needs at least one trial");
    }
    let one = |t: usize, spec: RobustSpec| -> Result<TrialRecord> {
        let mut r = run_trial(&spec, ds, settings, selection, derive_seed(seed, &streams::trial(t)))?;
        r.trial = t;
        Ok(r)
    };
    let history = match sampler {
        Sampler::Random => {
            let specs = (0..n_trials)
                .map(|t| sample_random(space, &mut stream(seed, &streams::sample(t))))
                .collect::<Result<Vec<_>>>()?;
            if parallel {
                specs.into_par_iter().enumerate().map(|(t, s)| one(t, s)).collect::<Result<Vec<_>>>()?
            } else {
                specs.into_iter().enumerate().map(|(t, s)| one(t, s)).collect::<Result<Vec<_>>>()?
            }
        }
        Sampler::Tpe(cfg) => {
            let mut h = Vec::with_capacity(n_trials);
            for t in 0..n_trials {
                let spec = sample_tpe(space, &h, cfg, &mut stream(seed, &streams::sample(t)))?;
                h.push(one(t, spec)?);
            }
            h
        }
    };
    let best = best_index(&history).unwrap();
    Ok(SearchResult { history, best })
}

/// Best-so-far selection value after each trial.
pub fn running_best(history: &[TrialRecord]) -> Vec<(usize, f64)> {
    let Some(first) = history.first() else {
        return Vec::new();
    };
    let metric: Metric = first.selection.metric;
    let mut best = metric.worst();
    history
        .iter()
        .map(|r| {
            if metric.better(r.score(), best) {
                best = r.score();
            }
            (r.trial, best)
        })
        .collect()
}

pub fn write_history(path: &Path, history: &[TrialRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<TrialRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrialRecord = serde_json::from_str(&line)?;
        if r.schema != SCHEMA_VERSION {
            bail_arg!("unsupported trial record schema {}", r.schema);
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_running_best(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "trial,best")?;
    for (t, b) in curve {
        writeln!(f, "{t},{b}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn record(t: usize, spec: RobustSpec, value: f64) -> TrialRecord {
        TrialRecord {
            schema: SCHEMA_VERSION,
            trial: t,
            spec,
            settings: TrainSettings::default(),
            seed: 0,
            selection: Selection { metric: Metric::Cvar, split: Split::ValOod },
            selection_value: Some(value),
            best_epoch: Some(0),
            reports: Vec::new(),
            epoch_losses: Vec::new(),
            diverged: false,
            stages: StageFlags::default(),
            wall_clock_secs: None,
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        for p in Preset::ALL {
            let s = p.spec();
            assert_eq!(decode(&encode(&s)), s, "{p}");
        }
        let mut s = Preset::Wdro.spec();
        s.input.step_size = Some(0.05);
        s.input.norm = Norm::Linf;
        assert_eq!(decode(&encode(&s)), s);
    }

    #[test]
    fn frozen_space_returns_preset() {
        let mut rng = stream(1, "t");
        for p in Preset::ALL {
            let space = SearchSpace::frozen(&p.spec());
            assert_eq!(sample_random(&space, &mut rng).unwrap(), p.spec());
        }
    }

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            p.space().validate().unwrap();
            p.spec().validate().unwrap();
            let mut rng = stream(3, p.as_str());
            for _ in 0..50 {
                sample_random(&p.space(), &mut rng).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn missing_dimension_rejected() {
        let mut space = Preset::Erm.space();
        space.dims.remove(&Param::Tau);
        assert!(space.validate().is_err());
        let bad = Preset::Erm.space().with(Param::Sigma, Domain::log(0.0, 1.0));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_dimension_decades() {
        let space = Preset::Vrm.space();
        let mut rng = stream(5, "decades");
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = sample_random(&space, &mut rng).unwrap().enrich.sigma;
            let d = (-s.log10()).floor().clamp(0.0, 2.0) as usize;
            counts[d] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.30..=0.37).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn categorical_frequencies() {
        let space = Preset::Joint.space();
        let mut rng = stream(6, "cats");
        let n = 9_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let s = sample_random(&space, &mut rng).unwrap();
            counts[stance_code(s.aggregate.stance) as usize] += 1;
        }
        let se = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() < 3.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn tpe_falls_back_on_short_or_flat_history() {
        let space = Preset::Joint.space();
        let cfg = TpeConfig::default();
        let a = sample_tpe(&space, &[], &cfg, &mut stream(1, "x")).unwrap();
        let b = sample_random(&space, &mut stream(1, "x")).unwrap();
        assert_eq!(a, b);
        let flat: Vec<_> = (0..20).map(|t| record(t, Preset::Erm.spec(), 1.0)).collect();
        let a = sample_tpe(&space, &flat, &cfg, &mut stream(2, "x")).unwrap();
        let b = sample_random(&space, &mut stream(2, "x")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tpe_follows_separable_history() {
        // Small tau is good, large tau is bad.
        let space = Preset::KlDro.space();
        let mut rng = stream(9, "hist");
        let history: Vec<_> = (0..40)
            .map(|t| {
                let s = sample_random(&space, &mut rng).unwrap();
                let v = if s.aggregate.tau < 1.0 { 0.1 } else { 1.0 + s.aggregate.tau };
                record(t, s, v)
            })
            .collect();
        let good_hi = history
            .iter()
            .filter(|r| r.score() < 0.5)
            .map(|r| r.spec.aggregate.tau)
            .fold(0.0, f64::max);
        assert!(good_hi < 1.0);
        let cfg = TpeConfig::default();
        let hits = (0..100)
            .filter(|i| {
                let s = sample_tpe(&space, &history, &cfg, &mut stream(*i, "sugg")).unwrap();
                s.aggregate.tau < 1.0
            })
            .count();
        assert!(hits >= 90, "{hits}");
    }

    #[test]
    fn running_best_is_prefix_min() {
        let mut rng = stream(4, "rb");
        let vals: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let h: Vec<_> = vals.iter().enumerate().map(|(t, v)| record(t, RobustSpec::erm(), *v)).collect();
        let curve = running_best(&h);
        for (i, (t, b)) in curve.iter().enumerate() {
            assert_eq!(*t, i);
            let oracle = vals[..=i].iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(*b, oracle);
        }
        let flat: Vec<_> = (0..5).map(|t| record(t, RobustSpec::erm(), 2.0)).collect();
        assert!(running_best(&flat).iter().all(|(_, b)| *b == 2.0));
    }

    #[test]
    fn diverged_scores_worst() {
        let mut r = record(0, RobustSpec::erm(), 0.1);
        r.diverged = true;
        assert_eq!(r.score(), f64::INFINITY);
    }

    #[test]
    fn history_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        let h: Vec<_> = (0..3).map(|t| record(t, Preset::Joint.spec(), t as f64)).collect();
        write_history(&path, &h).unwrap();
        assert_eq!(read_history(&path).unwrap(), h);
    }
}
