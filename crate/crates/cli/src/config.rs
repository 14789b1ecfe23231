//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use unirobust_core::data::{
    apply_covariate_shift, gen_blobs, gen_preferences, gen_two_moons, inject_label_noise, load_csv, split, Blobs,
    CsvSchema, TwoMoons,
};
use unirobust_core::hpo::{Preset, Sampler, TpeConfig};
use unirobust_core::{Dataset, RobustSpec, Selection, Split, TrainSettings};

use crate::Usage;

pub const SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub spec: RobustSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hpo: Option<HpoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapley: Option<ShapleyConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Exactly one source: a CSV file or one generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generator seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<CsvSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_moons: Option<TwoMoons>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<Blobs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferences: Option<PreferenceGen>,
    /// Split fractions (train, val_id, val_ood, test_id, test_ood) for
    /// sources without split tags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[f64; 5]>,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<AffineShift>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceGen {
    pub n_pairs: usize,
    pub utility: Vec<f64>,
    #[serde(default = "one")]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

/// `x -> A x + b` applied to the listed splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineShift {
    /// Row-major square matrix.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub splits: Vec<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpoConfig {
    #[serde(default = "joint")]
    pub preset: Preset,
    #[serde(default = "fifty")]
    pub n_trials: usize,
    #[serde(default = "tpe")]
    pub sampler: Sampler,
    #[serde(default)]
    pub parallel: bool,
}

fn joint() -> Preset {
    Preset::Joint
}
fn fifty() -> usize {
    50
}
fn tpe() -> Sampler {
    Sampler::Tpe(TpeConfig::default())
}

impl Default for HpoConfig {
    fn default() -> Self {
        Self { preset: joint(), n_trials: fifty(), sampler: tpe(), parallel: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapleyConfig {
    #[serde(default = "default_players")]
    pub players: Vec<String>,
    /// Tuned configuration per player, in player order; each defaults to
    /// the player's preset.
    #[serde(default)]
    pub tuned: Vec<RobustSpec>,
    #[serde(default = "five")]
    pub n_seeds: usize,
    /// Metric and split that define coalition values.
    #[serde(default = "default_target")]
    pub target: Selection,
}

fn default_players() -> Vec<String> {
    vec!["vrm".into(), "ls".into(), "kl-dro".into()]
}
fn five() -> usize {
    5
}
fn default_target() -> Selection {
    Selection { metric: unirobust_core::Metric::Accuracy, split: Split::TestOod }
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self { players: default_players(), tuned: Vec::new(), n_seeds: five(), target: default_target() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema != SCHEMA {
            return Err(Usage(format!("unsupported config schema {} (expected {SCHEMA})", self.schema)).into());
        }
        let d = &self.data;
        let sources = [d.csv.is_some(), d.two_moons.is_some(), d.blobs.is_some(), d.preferences.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(Usage("data needs exactly one of csv, two_moons, blobs, preferences".into()).into());
        }
        if d.schema.is_some() && d.csv.is_none() {
            return Err(Usage("data.schema only applies to csv sources".into()).into());
        }
        self.spec.validate().map_err(|e| Usage(e.to_string()))?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Usage("train.epochs and train.batch_size must be >= 1".into()).into());
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Materialize the configured dataset.
pub fn build_dataset(cfg: &RunConfig, base: &Path) -> anyhow::Result<Dataset> {
    let d = &cfg.data;
    let seed = cfg.data_seed();
    let mut ds = if let Some(p) = &d.csv {
        let path = if p.is_absolute() { p.clone() } else { base.join(p) };
        let schema = d.schema.clone().unwrap_or_else(|| CsvSchema::new(unirobust_core::data::TargetKind::Class));
        load_csv(&path, &schema)?
    } else if let Some(m) = &d.two_moons {
        gen_two_moons(m, seed)?
    } else if let Some(b) = &d.blobs {
        gen_blobs(b, seed)?
    } else if let Some(p) = &d.preferences {
        let ds = gen_preferences(p.n_pairs, &p.utility, p.noise, seed)?;
        split(&ds, d.split.unwrap_or([0.6, 0.1, 0.1, 0.1, 0.1]), seed)?
    } else {
        bail!(Usage("no data source".into()));
    };
    if let (Some(fr), false) = (d.split, d.preferences.is_some()) {
        ds = split(&ds, fr, seed)?;
    }
    if d.label_noise > 0.0 {
        ds = inject_label_noise(&ds, d.label_noise, seed)?;
    }
    if let Some(s) = &d.shift {
        let n = s.b.len();
        if s.a.len() != n || s.a.iter().any(|r| r.len() != n) {
            bail!(Usage("shift.a must be a square matrix matching shift.b".into()));
        }
        let a = DMatrix::from_fn(n, n, |i, j| s.a[i][j]);
        ds = apply_covariate_shift(&ds, &a, &DVector::from_vec(s.b.clone()), &s.splits)?;
    }
    Ok(ds)
}
