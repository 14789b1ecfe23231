//! Accuracy, Brier score and the 10% CVaR tail mean, plus per-split reports.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::numgrad::{forward, log_floor, logits, softmax_row, Model};

pub fn accuracy(preds: &[usize], targets: &[usize]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean over rows of `||p_i - onehot(y_i)||^2`.
pub fn brier(probs: &DMatrix<f64>, targets: &[usize]) -> Result<f64> {
    if probs.nrows() != targets.len() || targets.is_empty() {
        return Err(Error::Dimension(format!(
            "{} probability rows for {} targets",
            probs.nrows(),
            targets.len()
        )));
    }
    let k = probs.ncols();
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(Error::Targets(format!("class {y} >= K = {k}")));
        }
        for j in 0..k {
            let t = if j == y { 1.0 } else { 0.0 };
            total += (probs[(i, j)] - t).powi(2);
        }
    }
    Ok(total / targets.len() as f64)
}

/// Mean of the `ceil(level * n)` largest losses.
pub fn cvar(losses: &[f64], level: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("cvar of an empty loss vector".into()));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidArgument(format!("tail level {level} outside (0, 1]")));
    }
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite("NaN loss".into()));
    }
    let m = ((level * losses.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..m].iter().sum::<f64>() / m as f64)
}

/// Tail mean over the worst 10% of samples.
pub fn cvar10(losses: &[f64]) -> Result<f64> {
    cvar(losses, 0.1)
}

/// Evaluation of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub accuracy: f64,
    pub brier: f64,
    pub cvar10: f64,
    /// Mean per-sample evaluation loss.
    pub loss: f64,
    pub n: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "split,accuracy,brier,cvar10,loss,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.split, self.accuracy, self.brier, self.cvar10, self.loss, self.n
        )
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Brier => self.brier,
            Metric::Cvar => self.cvar10,
            Metric::Loss => self.loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Brier,
    Cvar,
    Loss,
}

impl Metric {
    pub fn higher_is_better(&self) -> bool {
        matches!(self, Metric::Accuracy)
    }

    /// `true` when `a` is strictly better than `b`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    /// Value that every finite result beats.
    pub fn worst(&self) -> f64 {
        if self.higher_is_better() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "brier" => Ok(Metric::Brier),
            "cvar" | "cvar10" => Ok(Metric::Cvar),
            "loss" => Ok(Metric::Loss),
            _ => Err(Error::InvalidArgument(format!("unknown metric '{s}'"))),
        }
    }
}

/// Per-sample evaluation losses, class probabilities and crisp targets for
/// a set of rows. Regression rows are scored as `+-1` margins.
pub struct Predictions {
    pub losses: Vec<f64>,
    pub probs: DMatrix<f64>,
    pub targets: Vec<usize>,
}

pub fn predict(model: &Model, ds: &Dataset, idx: &[usize]) -> Result<Predictions> {
    let x = ds.x.select_rows(idx);
    match &ds.labels {
        Labels::Real(v) => {
            let s = forward(model, &x)?;
            let mut losses = Vec::with_capacity(idx.len());
            let mut probs = DMatrix::zeros(idx.len(), 2);
            let mut targets = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                let pred = s[(r, 0)];
                losses.push((pred - v[i]).powi(2));
                let pos = usize::from(pred > 0.0);
                probs[(r, pos)] = 1.0;
                targets.push(usize::from(v[i] > 0.0));
            }
            Ok(Predictions { losses, probs, targets })
        }
        labels => {
            let z = logits(model, &x)?;
            let k = z.ncols();
            let mut probs = DMatrix::zeros(idx.len(), k);
            let mut losses = Vec::with_capacity(idx.len());
            let targets: Vec<usize> = match labels {
                Labels::Classes { y, .. } => idx.iter().map(|&i| y[i]).collect(),
                Labels::Preference { a_preferred, .. } => idx.iter().map(|&i| usize::from(a_preferred[i])).collect(),
                Labels::Real(_) => unreachable!(),
            };
            let floor = log_floor();
            let mut row = vec![0.0; k];
            for r in 0..idx.len() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = z[(r, j)];
                }
                let (p, lp) = softmax_row(&row);
                losses.push(-lp[targets[r]].max(floor));
                for j in 0..k {
                    probs[(r, j)] = p[j];
                }
            }
            Ok(Predictions { losses, probs, targets })
        }
    }
}

/// Report for one split, or `None` when the split is empty.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split) -> Result<Option<EvalReport>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Ok(None);
    }
    let pred = predict(model, ds, &idx)?;
    let hard: Vec<usize> = pred
        .probs
        .row_iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let (b, acc) = match ds.labels {
        Labels::Real(_) => (pred.losses.iter().sum::<f64>() / idx.len() as f64, accuracy(&hard, &pred.targets)?),
        _ => (brier(&pred.probs, &pred.targets)?, accuracy(&hard, &pred.targets)?),
    };
    Ok(Some(EvalReport {
        split,
        accuracy: acc,
        brier: b,
        cvar10: cvar10(&pred.losses)?,
        loss: pred.losses.iter().sum::<f64>() / idx.len() as f64,
        n: idx.len(),
    }))
}

/// Reports for every non-empty split, in canonical split order.
pub fn evaluate_all(model: &Model, ds: &Dataset) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for s in Split::ALL {
        if let Some(r) = evaluate(model, ds, s)? {
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        let p: Vec<usize> = (0..10).map(|i| usize::from(i < 7)).collect();
        assert!((accuracy(&p, &[1; 10]).unwrap() - 0.7).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn brier_values() {
        let onehot = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(brier(&onehot, &[0, 1]).unwrap(), 0.0);
        let uni = DMatrix::from_element(3, 2, 0.5);
        assert_eq!(brier(&uni, &[0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn cvar_values() {
        let l: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(cvar10(&l).unwrap(), 9.0);
        assert_eq!(cvar10(&[2.5; 20]).unwrap(), 2.5);
        let l: Vec<f64> = (0..15).map(f64::from).collect();
        assert_eq!(cvar10(&l).unwrap(), 13.5);
        assert!(cvar10(&[]).is_err());
    }

    #[test]
    fn metric_directions() {
        assert!(Metric::Accuracy.better(0.9, 0.8));
        assert!(Metric::Cvar.better(0.1, 0.2));
        assert!(Metric::Cvar.better(1e300, Metric::Cvar.worst()));
        assert_eq!("cvar10".parse::<Metric>().unwrap(), Metric::Cvar);
    }
}
