//! Instance-wise input perturbation inside a norm ball by projected
//! gradient steps: ascent (pessimistic), descent (optimistic) or none.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::numgrad::{Batch, Evaluation, LossSpec, Model};
use crate::Stance;

/// Optimistic steps stop once a sample's loss drops below this.
pub const OPTIMISTIC_STOP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPerturbSpec {
    pub stance: Stance,
    pub radius: f64,
    #[serde(default = "default_norm")]
    pub norm: Norm,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Defaults to `2.5 * radius / steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
}

fn default_norm() -> Norm {
    Norm::L2
}

fn default_steps() -> usize {
    7
}

impl Default for InputPerturbSpec {
    fn default() -> Self {
        Self {
            stance: Stance::Neutral,
            radius: 0.0,
            norm: Norm::L2,
            steps: 7,
            step_size: None,
        }
    }
}

impl InputPerturbSpec {
    pub fn step(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.radius / self.steps.max(1) as f64)
    }

    pub fn is_active(&self) -> bool {
        self.stance != Stance::Neutral && self.radius > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            bail_arg!("ball radius must be >= 0, got {}", self.radius);
        }
        if self.steps == 0 {
            bail_arg!("PGD needs at least one step");
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                bail_arg!("PGD step size must be > 0, got {s}");
            }
        }
        Ok(())
    }

    /// `true` when the schedule cannot reach the ball boundary.
    pub fn undershoots(&self) -> bool {
        self.is_active() && self.step() * (self.steps as f64) < self.radius
    }
}

/// Project a displacement onto the ball of radius `radius`.
pub fn project_ball(delta: &mut [f64], radius: f64, norm: Norm) {
    match norm {
        Norm::L2 => {
            let n = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > radius {
                let s = if n > 0.0 { radius / n } else { 0.0 };
                delta.iter_mut().for_each(|v| *v *= s);
            }
        }
        Norm::Linf => delta.iter_mut().for_each(|v| *v = v.clamp(-radius, radius)),
    }
}

/// Steepest-ascent direction of `g` in the given geometry: unit `l2`
/// vector or the sign vector.
pub fn ascent_direction(g: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L2 => {
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                g.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; g.len()]
            }
        }
        Norm::Linf => g
            .iter()
            .map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
            .collect(),
    }
}

/// Perturbed feature matrix for `batch`; every row stays within `radius`
/// of its original.
pub fn pgd_perturb(model: &Model, batch: &Batch, loss: &LossSpec, spec: &InputPerturbSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if !spec.is_active() {
        return Ok(batch.x.clone());
    }
    let sign = match spec.stance {
        Stance::Pessimistic => 1.0,
        Stance::Optimistic => -1.0,
        Stance::Neutral => unreachable!(),
    };
    let n = batch.len();
    let d = batch.x.ncols();
    let step = spec.step();
    let ones = vec![1.0; n];
    let mut active = vec![true; n];
    let mut cur = batch.clone();
    let mut delta = vec![0.0; d];
    let mut g = vec![0.0; d];
    for _ in 0..spec.steps {
        let eval = Evaluation::new(model, &cur, loss)?;
        let (_, input_grad) = eval.backward(&ones)?;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            if sign < 0.0 && eval.losses()[i] < OPTIMISTIC_STOP {
                active[i] = false;
                continue;
            }
            for j in 0..d {
                g[j] = input_grad[(i, j)];
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("input gradient of sample {i}")));
            }
            let dir = ascent_direction(&g, spec.norm);
            for j in 0..d {
                delta[j] = cur.x[(i, j)] - batch.x[(i, j)] + sign * step * dir[j];
            }
            project_ball(&mut delta, spec.radius, spec.norm);
            for j in 0..d {
                cur.x[(i, j)] = batch.x[(i, j)] + delta[j];
            }
        }
    }
    Ok(cur.x)
}
