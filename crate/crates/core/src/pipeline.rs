//! The four-stage robust training loop.
//!
//! Each mini-batch drawn from the training split goes through
//! 1. enrichment (vicinal noise, Mixup, label smoothing),
//! 2. input perturbation by projected gradient steps,
//! 3. the label-space loss over a credal set,
//! 4. aggregation of the per-sample losses (mean or KL dual),
//!
//! followed by one Adam update. Every stage reduces to the identity at its
//! neutral setting, so plain ERM and the single-mechanism baselines are
//! points of the same configuration space.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aggregate::{agg_with_weights, AggSpec};
use crate::data::{Dataset, Labels, Split};
use crate::enrich::{enrich, EnrichMode, EnrichSpec};
use crate::error::{bail_arg, Error, Result};
use crate::metrics::{evaluate_all, EvalReport, Metric};
use crate::numgrad::{adam_step, Evaluation, Head, LossSpec, Model, OptState};
use crate::perturb_x::{pgd_perturb, InputPerturbSpec};
use crate::rng::stream;
use crate::Stance;

/// Stage-3 configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub stance: Stance,
    /// Credal mass; 0 keeps the base loss.
    pub alpha: f64,
}

impl Default for LabelSpec {
    fn default() -> Self {
        Self { stance: Stance::Neutral, alpha: 0.0 }
    }
}

impl LabelSpec {
    pub fn is_active(&self) -> bool {
        self.alpha > 0.0
    }
}

pub fn default_learning_rate() -> f64 {
    1e-3
}

/// Full pipeline configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSpec {
    #[serde(default)]
    pub enrich: EnrichSpec,
    #[serde(default)]
    pub input: InputPerturbSpec,
    #[serde(default)]
    pub label: LabelSpec,
    #[serde(default = "AggSpec::neutral")]
    pub aggregate: AggSpec,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

impl Default for RobustSpec {
    fn default() -> Self {
        Self::erm()
    }
}

/// Loss used by the input-perturbation stage and by plain ERM.
pub fn base_loss(head: Head) -> LossSpec {
    match head {
        Head::Regression => LossSpec::Squared,
        Head::Classes(_) => LossSpec::CrossEntropy,
        Head::PairwiseScore => LossSpec::BradleyTerry,
    }
}

impl RobustSpec {
    pub fn erm() -> Self {
        Self {
            enrich: EnrichSpec::default(),
            input: InputPerturbSpec::default(),
            label: LabelSpec::default(),
            aggregate: AggSpec::neutral(),
            learning_rate: default_learning_rate(),
        }
    }

    /// Stages this configuration switches on.
    pub fn planned_stages(&self) -> StageFlags {
        StageFlags {
            enrich: self.enrich.is_active(),
            input: self.input.is_active(),
            label: self.label.is_active(),
            aggregate: self.aggregate.stance != Stance::Neutral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.enrich.validate()?;
        self.input.validate()?;
        self.aggregate.validate()?;
        if !(0.0..1.0).contains(&self.label.alpha) {
            bail_arg!("credal mass {} outside [0, 1)", self.label.alpha);
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail_arg!("learning rate must be > 0");
        }
        Ok(())
    }

    /// Checks that the stages compose on this kind of data.
    pub fn validate_for(&self, ds: &Dataset) -> Result<()> {
        self.validate()?;
        match &ds.labels {
            Labels::Classes { .. } => {
                if self.label.is_active() && self.enrich.softens_labels() {
                    return Err(Error::InvalidArgument(
                        "credal label losses need crisp labels; disable Mixup/label smoothing or set alpha = 0".into(),
                    ));
                }
            }
            Labels::Real(_) => {
                if self.label.is_active() || self.enrich.label_smoothing > 0.0 {
                    bail_arg!("label-space stages need class or preference labels");
                }
            }
            Labels::Preference { .. } => {
                if self.enrich.mode == EnrichMode::Mixup || self.enrich.label_smoothing > 0.0 {
                    bail_arg!("Mixup and stage-1 smoothing are undefined for preference pairs");
                }
            }
        }
        Ok(())
    }

    /// Stage-3 loss for the given head.
    pub fn loss_spec(&self, head: Head) -> LossSpec {
        if self.label.is_active() {
            LossSpec::Credal { stance: self.label.stance, alpha: self.label.alpha }
        } else {
            base_loss(head)
        }
    }
}

/// Which stages did non-trivial work during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub enrich: bool,
    pub input: bool,
    pub label: bool,
    pub aggregate: bool,
}

impl StageFlags {
    pub fn union(self, o: StageFlags) -> StageFlags {
        StageFlags {
            enrich: self.enrich || o.enrich,
            input: self.input || o.input,
            label: self.label || o.label,
            aggregate: self.aggregate || o.aggregate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Hidden ReLU widths; empty for a linear model.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_batch() -> usize {
    64
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { epochs: 30, batch_size: default_batch(), hidden: default_hidden() }
    }
}

/// Metric and split that drive checkpoint (and hyperparameter) selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub metric: Metric,
    pub split: Split,
}

impl Default for Selection {
    fn default() -> Self {
        Self { metric: Metric::Cvar, split: Split::ValOod }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the selected checkpoint.
    pub model: Model,
    /// Mean aggregated objective over the mini-batches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_reports: Vec<Vec<EvalReport>>,
    pub best_epoch: Option<usize>,
    pub best_value: f64,
    pub diverged: bool,
    pub stages: StageFlags,
}

impl TrainOutcome {
    pub fn best_reports(&self) -> Vec<EvalReport> {
        self.best_epoch
            .map(|e| self.epoch_reports[e].clone())
            .unwrap_or_default()
    }
}

/// Stream names used by [`train`]; exposed for replay tests.
pub mod streams {
    pub const INIT: &str = "init";

    pub fn shuffle(epoch: usize) -> String {
        format!("epoch/{epoch}/shuffle")
    }

    pub fn batch(epoch: usize, batch: usize) -> String {
        format!("epoch/{epoch}/batch/{batch}")
    }
}

enum StepError {
    Diverged,
    Fatal(Error),
}

impl From<Error> for StepError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => StepError::Diverged,
            e => StepError::Fatal(e),
        }
    }
}

/// Train a fresh model under `spec`, evaluating every split after each
/// epoch and keeping the checkpoint best on `selection`.
pub fn train(spec: &RobustSpec, ds: &Dataset, settings: &TrainSettings, selection: &Selection, seed: u64) -> Result<TrainOutcome> {
    spec.validate_for(ds)?;
    if settings.batch_size == 0 {
        bail_arg!("batch size must be >= 1");
    }
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        bail_arg!("dataset has no training rows");
    }
    if ds.indices(selection.split).is_empty() {
        bail_arg!("selection split '{}' is empty", selection.split);
    }
    let head = ds.head();
    let classes = match ds.labels {
        Labels::Classes { k, .. } => Some(k),
        _ => None,
    };
    let mut model = Model::mlp(ds.item_width(), &settings.hidden, head, &mut stream(seed, streams::INIT))?;
    let mut opt = OptState::new(model.n_params(), spec.learning_rate);
    let base = base_loss(head);
    let loss = spec.loss_spec(head);
    let full = ds.batch(&train_idx);

    let mut out = TrainOutcome {
        model: model.clone(),
        epoch_losses: Vec::with_capacity(settings.epochs),
        epoch_reports: Vec::with_capacity(settings.epochs),
        best_epoch: None,
        best_value: selection.metric.worst(),
        diverged: false,
        stages: StageFlags::default(),
    };

    'epochs: for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        order.shuffle(&mut stream(seed, &streams::shuffle(epoch)));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(settings.batch_size).enumerate() {
            let step = (|| -> std::result::Result<f64, StepError> {
                let mut rng = stream(seed, &streams::batch(epoch, b));
                let (mut batch, enriched) = enrich(full.select(chunk), &spec.enrich, classes, &mut rng)?;
                out.stages.enrich |= enriched;
                if spec.input.is_active() {
                    batch.x = pgd_perturb(&model, &batch, &base, &spec.input)?;
                    out.stages.input = true;
                }
                out.stages.label |= loss != base;
                let eval = Evaluation::new(&model, &batch, &loss)?;
                let (value, weights) = agg_with_weights(eval.losses(), &spec.aggregate)?;
                out.stages.aggregate |= spec.aggregate.stance != Stance::Neutral;
                if !value.is_finite() {
                    return Err(StepError::Diverged);
                }
                let (grad, _) = eval.backward(&weights)?;
                let mut params = model.params();
                adam_step(&mut params, &grad.flatten(), &mut opt)?;
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(StepError::Diverged);
                }
                model.set_params(&params)?;
                Ok(value)
            })();
            match step {
                Ok(v) => {
                    total += v;
                    batches += 1;
                }
                Err(StepError::Diverged) => {
                    out.diverged = true;
                    break 'epochs;
                }
                Err(StepError::Fatal(e)) => return Err(e),
            }
        }
        out.epoch_losses.push(total / batches as f64);
        let reports = evaluate_all(&model, ds)?;
        let value = reports
            .iter()
            .find(|r| r.split == selection.split)
            .map(|r| r.metric(selection.metric))
            .unwrap_or(f64::NAN);
        if value.is_nan() || reports.iter().any(|r| !r.loss.is_finite()) {
            out.epoch_reports.push(reports);
            out.diverged = true;
            break;
        }
        if out.best_epoch.is_none() || selection.metric.better(value, out.best_value) {
            out.best_epoch = Some(epoch);
            out.best_value = value;
            out.model = model.clone();
        }
        out.epoch_reports.push(reports);
    }
    Ok(out)
}
