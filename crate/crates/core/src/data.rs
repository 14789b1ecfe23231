//! Datasets with split tags, synthetic generators with controllable
//! failure modes, and CSV ingestion/export.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::numgrad::{sigmoid, Batch, Head, Targets};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValId,
    ValOod,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::ValId, Split::ValOod, Split::TestId, Split::TestOod];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValId => "val_id",
            Split::ValOod => "val_ood",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }

    pub fn is_ood(&self) -> bool {
        matches!(self, Split::ValOod | Split::TestOod)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes { y: Vec<usize>, k: usize },
    Real(Vec<f64>),
    /// Rows hold `[e_a ; e_b]`; `true` when a is preferred.
    Preference { a_preferred: Vec<bool>, embed_dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub labels: Labels,
    pub splits: Vec<Split>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, labels: Labels, splits: Vec<Split>, seed: u64) -> Result<Self> {
        let n = x.nrows();
        let ln = match &labels {
            Labels::Classes { y, k } => {
                if let Some(c) = y.iter().find(|&&c| c >= *k) {
                    return Err(Error::Targets(format!("class {c} >= K = {k}")));
                }
                y.len()
            }
            Labels::Real(v) => v.len(),
            Labels::Preference { a_preferred, embed_dim } => {
                if x.ncols() != 2 * embed_dim {
                    return Err(Error::Dimension(format!(
                        "preference rows need 2 x {embed_dim} columns, have {}",
                        x.ncols()
                    )));
                }
                a_preferred.len()
            }
        };
        if ln != n || splits.len() != n {
            return Err(Error::Dimension(format!(
                "{n} rows, {ln} labels, {} split tags",
                splits.len()
            )));
        }
        Ok(Self { x, labels, splits, seed })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class count, or 0 for non-classification data.
    pub fn k(&self) -> usize {
        match &self.labels {
            Labels::Classes { k, .. } => *k,
            _ => 0,
        }
    }

    pub fn head(&self) -> Head {
        match &self.labels {
            Labels::Classes { k, .. } => Head::Classes(*k),
            Labels::Real(_) => Head::Regression,
            Labels::Preference { .. } => Head::PairwiseScore,
        }
    }

    /// Width of one network input (one item for preference data).
    pub fn item_width(&self) -> usize {
        match &self.labels {
            Labels::Preference { embed_dim, .. } => *embed_dim,
            _ => self.x.ncols(),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn targets(&self) -> Targets {
        match &self.labels {
            Labels::Classes { y, .. } => Targets::Classes(y.clone()),
            Labels::Real(v) => Targets::Real(v.clone()),
            Labels::Preference { a_preferred, .. } => Targets::Preference(a_preferred.clone()),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            targets: self.targets().select(idx),
        }
    }

    pub fn split_batch(&self, split: Split) -> Batch {
        self.batch(&self.indices(split))
    }
}

/// Angular interval in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub from_deg: f64,
    pub to_deg: f64,
}

impl FromStr for Gap {
    type Err = Error;

    /// `"60:120"`
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("gap '{s}' is not FROM:TO")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("gap bound '{v}' is not a number")))
        };
        let g = Gap { from_deg: parse(a)?, to_deg: parse(b)? };
        if !(g.from_deg < g.to_deg) {
            bail_arg!("gap start {} must be below its end {}", g.from_deg, g.to_deg);
        }
        Ok(g)
    }
}

/// Translation followed by a rotation about the moons' centre.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    #[serde(default)]
    pub rotation_deg: f64,
}

impl FromStr for Shift {
    type Err = Error;

    /// `"0.3"`, `"0.3,10deg"` or `"0.3,-0.1,10deg"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Shift::default();
        let mut offsets = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some(deg) = part.strip_suffix("deg") {
                out.rotation_deg = deg
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad rotation '{part}'")))?;
            } else {
                offsets.push(
                    part.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad translation '{part}'")))?,
                );
            }
        }
        match offsets.as_slice() {
            [] => {}
            [dx] => out.dx = *dx,
            [dx, dy] => {
                out.dx = *dx;
                out.dy = *dy;
            }
            _ => bail_arg!("shift takes at most two translation components"),
        }
        Ok(out)
    }
}

pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

impl Shift {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = (p[0] - MOONS_CENTER[0], p[1] - MOONS_CENTER[1]);
        [
            c * x - s * y + MOONS_CENTER[0] + self.dx,
            s * x + c * y + MOONS_CENTER[1] + self.dy,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoMoons {
    /// Training rows.
    pub n: usize,
    /// Rows in each of the four evaluation splits; defaults to `n`.
    #[serde(default)]
    pub n_eval: Option<usize>,
    #[serde(default = "default_moon_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub gap: Option<Gap>,
    #[serde(default)]
    pub shift: Shift,
}

fn default_moon_noise() -> f64 {
    0.1
}

fn moon_point(class: usize, theta: f64) -> [f64; 2] {
    if class == 0 {
        [theta.cos(), theta.sin()]
    } else {
        [1.0 - theta.cos(), 1.0 - theta.sin() - 0.5]
    }
}

/// Two interleaved half-circle arcs. Class-0 training angles avoid the gap;
/// OOD splits are passed through the shift after noise.
pub fn gen_two_moons(cfg: &TwoMoons, seed: u64) -> Result<Dataset> {
    if cfg.n < 4 {
        bail_arg!("two-moons needs n >= 4, got {}", cfg.n);
    }
    if !(cfg.noise_sd >= 0.0) {
        bail_arg!("noise sd must be >= 0");
    }
    let (lo, hi) = match cfg.gap {
        Some(g) => {
            if !(g.from_deg < g.to_deg) {
                bail_arg!("gap start must be below its end");
            }
            (g.from_deg.max(0.0).to_radians(), g.to_deg.min(180.0).to_radians())
        }
        None => (0.0, 0.0),
    };
    let gap_width = (hi - lo).max(0.0);
    let free = std::f64::consts::PI - gap_width;
    if free <= 0.0 {
        return Err(Error::InvalidArgument("gap covers the whole class-0 arc".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n_eval = cfg.n_eval.unwrap_or(cfg.n);

    let mut rows: Vec<[f64; 2]> = Vec::new();
    let mut y = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let count = if split == Split::Train { cfg.n } else { n_eval };
        let mut rng = stream(seed, &format!("two-moons/{split}"));
        let n0 = count.div_ceil(2);
        for i in 0..count {
            let class = usize::from(i >= n0);
            let theta = if class == 0 && split == Split::Train && gap_width > 0.0 {
                let u = rng.random::<f64>() * free;
                if u < lo { u } else { u + gap_width }
            } else {
                rng.random::<f64>() * std::f64::consts::PI
            };
            let base = moon_point(class, theta);
            let mut p = [base[0] + noise.sample(&mut rng), base[1] + noise.sample(&mut rng)];
            if split.is_ood() {
                p = cfg.shift.apply(p);
            }
            rows.push(p);
            y.push(class);
            splits.push(split);
        }
    }
    let x = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    Dataset::new(x, Labels::Classes { y, k: 2 }, splits, seed)
}

/// `k` isotropic Gaussian blobs with centres on a circle of radius
/// `spread`; the OOD splits are translated by `ood_offset` along x1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blobs {
    pub n: usize,
    #[serde(default)]
    pub n_eval: Option<usize>,
    #[serde(default = "two")]
    pub k: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_blob_sd")]
    pub sd: f64,
    #[serde(default)]
    pub ood_offset: f64,
}

fn two() -> usize {
    2
}
fn default_spread() -> f64 {
    3.0
}
fn default_blob_sd() -> f64 {
    0.3
}

pub fn gen_blobs(cfg: &Blobs, seed: u64) -> Result<Dataset> {
    if cfg.k < 2 || cfg.n < cfg.k {
        bail_arg!("blobs need k >= 2 and n >= k");
    }
    let noise = Normal::new(0.0, cfg.sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n_eval = cfg.n_eval.unwrap_or(cfg.n);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let count = if split == Split::Train { cfg.n } else { n_eval };
        let mut rng = stream(seed, &format!("blobs/{split}"));
        for i in 0..count {
            let c = i % cfg.k;
            let ang = 2.0 * std::f64::consts::PI * c as f64 / cfg.k as f64;
            let mut p = [
                cfg.spread * ang.cos() + noise.sample(&mut rng),
                cfg.spread * ang.sin() + noise.sample(&mut rng),
            ];
            if split.is_ood() {
                p[0] += cfg.ood_offset;
            }
            rows.push(p);
            y.push(c);
            splits.push(split);
        }
    }
    let x = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    Dataset::new(x, Labels::Classes { y, k: cfg.k }, splits, seed)
}

/// Resample each training label, with probability `rate`, uniformly among
/// the other `K - 1` classes.
pub fn inject_label_noise(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        bail_arg!("noise rate {rate} outside [0, 1]");
    }
    let Labels::Classes { y, k } = &ds.labels else {
        return Err(Error::Targets("label noise needs a classification dataset".into()));
    };
    let mut out = ds.clone();
    if rate == 0.0 || *k < 2 {
        return Ok(out);
    }
    let mut rng = stream(seed, "label-noise");
    let mut noisy = y.clone();
    for (i, lbl) in noisy.iter_mut().enumerate() {
        if ds.splits[i] != Split::Train {
            continue;
        }
        if rng.random::<f64>() < rate {
            let r = rng.random_range(0..k - 1);
            *lbl = if r >= *lbl { r + 1 } else { r };
        }
    }
    out.labels = Labels::Classes { y: noisy, k: *k };
    Ok(out)
}

/// Apply `x -> A x + b` to the rows of the designated splits. Preference
/// rows are transformed item by item.
pub fn apply_covariate_shift(ds: &Dataset, a: &DMatrix<f64>, b: &DVector<f64>, splits: &[Split]) -> Result<Dataset> {
    let w = ds.item_width();
    if a.nrows() != w || a.ncols() != w || b.len() != w {
        return Err(Error::Dimension(format!(
            "affine map is {}x{} + {}, items have width {w}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let items = ds.x.ncols() / w;
    let mut out = ds.clone();
    for i in 0..ds.len() {
        if !splits.contains(&ds.splits[i]) {
            continue;
        }
        for it in 0..items {
            let v = DVector::from_fn(w, |j, _| ds.x[(i, it * w + j)]);
            let t = a * v + b;
            for j in 0..w {
                out.x[(i, it * w + j)] = t[j];
            }
        }
    }
    Ok(out)
}

/// Random embedding pairs labelled by a Bradley-Terry annotator with
/// utility `e . utility`. All rows are tagged `train`; use [`split`].
pub fn gen_preferences(n_pairs: usize, utility: &[f64], annotator_noise: f64, seed: u64) -> Result<Dataset> {
    let d = utility.len();
    if d == 0 || n_pairs == 0 {
        bail_arg!("preferences need a non-empty utility and n_pairs >= 1");
    }
    if !(annotator_noise >= 0.0) {
        bail_arg!("annotator noise must be >= 0");
    }
    let mut rng = stream(seed, "preferences");
    let mut x = DMatrix::zeros(n_pairs, 2 * d);
    let mut pref = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        for j in 0..2 * d {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
        let s = |off: usize| (0..d).map(|j| utility[j] * x[(i, off + j)]).sum::<f64>();
        let diff = s(0) - s(d);
        let p = if annotator_noise > 0.0 {
            sigmoid(diff / annotator_noise)
        } else if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            0.0
        } else {
            0.5
        };
        let mut a_pref = rng.random::<f64>() < p;
        if rng.random::<bool>() {
            for j in 0..d {
                let t = x[(i, j)];
                x[(i, j)] = x[(i, d + j)];
                x[(i, d + j)] = t;
            }
            a_pref = !a_pref;
        }
        pref.push(a_pref);
    }
    Dataset::new(
        x,
        Labels::Preference { a_preferred: pref, embed_dim: d },
        vec![Split::Train; n_pairs],
        seed,
    )
}

/// Shuffle rows with `seed` and assign split tags in proportion to
/// `fractions` (train, val_id, val_ood, test_id, test_ood).
pub fn split(ds: &Dataset, fractions: [f64; 5], seed: u64) -> Result<Dataset> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        bail_arg!("split fractions {fractions:?} must be non-negative and sum to 1");
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "split"));
    let mut tags = vec![Split::Train; n];
    let mut cum = 0.0;
    let mut start = 0;
    for (s, f) in Split::ALL.into_iter().zip(fractions) {
        cum += f;
        let end = if s == Split::TestOod { n } else { ((cum * n as f64).round() as usize).min(n) };
        for &i in &order[start..end.max(start)] {
            tags[i] = s;
        }
        start = end.max(start);
    }
    let mut out = ds.clone();
    out.splits = tags;
    out.seed = seed;
    Ok(out)
}

/// Kind of the target column in a CSV file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Class,
    Real,
    /// Feature columns hold item a then item b, equal widths.
    Preference,
}

/// Column roles for [`load_csv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Feature columns in order; `None` takes every other column.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default = "default_target")]
    pub target: String,
    pub kind: TargetKind,
    #[serde(default = "default_split_col")]
    pub split_column: Option<String>,
    /// Class count; inferred from the labels when absent.
    #[serde(default)]
    pub classes: Option<usize>,
}

fn default_target() -> String {
    "y".into()
}

fn default_split_col() -> Option<String> {
    Some("split".into())
}

impl CsvSchema {
    pub fn new(kind: TargetKind) -> Self {
        Self {
            features: None,
            target: default_target(),
            kind,
            split_column: default_split_col(),
            classes: None,
        }
    }
}

/// Read a comma-separated, header-first UTF-8 file. A missing split column
/// tags every row `train` unless the schema names it explicitly.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("missing column '{name}'")))
    };
    let target_col = col(&schema.target)?;
    let split_col = match &schema.split_column {
        Some(s) if header.iter().any(|h| h == s) => Some(col(s)?),
        Some(s) if schema.split_column != default_split_col() => return Err(Error::Csv(format!("missing column '{s}'"))),
        _ => None,
    };
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&i| i != target_col && Some(i) != split_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Csv("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut targets = Vec::new();
    let mut splits = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let cell = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        for &c in &feature_cols {
            let v: f64 = cell(c).parse().map_err(|_| {
                Error::Csv(format!("row {}: non-numeric cell '{}' in '{}'", line + 2, cell(c), header[c]))
            })?;
            values.push(v);
        }
        let t: f64 = cell(target_col).parse().map_err(|_| {
            Error::Csv(format!("row {}: non-numeric target '{}'", line + 2, cell(target_col)))
        })?;
        targets.push(t);
        splits.push(match split_col {
            Some(c) => cell(c).parse::<Split>().map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))?,
            None => Split::Train,
        });
    }
    let n = targets.len();
    let d = feature_cols.len();
    let x = DMatrix::from_row_slice(n, d, &values);
    let labels = match schema.kind {
        TargetKind::Real => Labels::Real(targets),
        TargetKind::Class => {
            let mut y = Vec::with_capacity(n);
            for t in &targets {
                if *t < 0.0 || t.fract() != 0.0 {
                    return Err(Error::Csv(format!("class label {t} is not a non-negative integer")));
                }
                y.push(*t as usize);
            }
            let k = schema
                .classes
                .unwrap_or_else(|| y.iter().max().map_or(0, |m| m + 1));
            Labels::Classes { y, k }
        }
        TargetKind::Preference => {
            if d % 2 != 0 {
                return Err(Error::Csv("preference rows need an even number of feature columns".into()));
            }
            let a_preferred = targets
                .iter()
                .map(|t| match *t {
                    v if v == 1.0 => Ok(true),
                    v if v == 0.0 => Ok(false),
                    v => Err(Error::Csv(format!("preference label {v} is not 0/1"))),
                })
                .collect::<Result<_>>()?;
            Labels::Preference { a_preferred, embed_dim: d / 2 }
        }
    };
    Dataset::new(x, labels, splits, 0)
}

/// Write the dataset in the same dialect with a `split` column.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let d = ds.x.ncols();
    let mut header: Vec<String> = match &ds.labels {
        Labels::Preference { embed_dim, .. } => (0..*embed_dim)
            .map(|j| format!("a{j}"))
            .chain((0..*embed_dim).map(|j| format!("b{j}")))
            .collect(),
        _ => (0..d).map(|j| format!("x{j}")).collect(),
    };
    header.push("y".into());
    header.push("split".into());
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = (0..d).map(|j| ds.x[(i, j)].to_string()).collect();
        rec.push(match &ds.labels {
            Labels::Classes { y, .. } => y[i].to_string(),
            Labels::Real(v) => v[i].to_string(),
            Labels::Preference { a_preferred, .. } => u8::from(a_preferred[i]).to_string(),
        });
        rec.push(ds.splits[i].to_string());
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// CSV schema matching [`write_csv`] output.
pub fn exported_schema(ds: &Dataset) -> CsvSchema {
    let kind = match ds.labels {
        Labels::Classes { .. } => TargetKind::Class,
        Labels::Real(_) => TargetKind::Real,
        Labels::Preference { .. } => TargetKind::Preference,
    };
    let mut s = CsvSchema::new(kind);
    if let Labels::Classes { k, .. } = ds.labels {
        s.classes = Some(k);
    }
    s
}
