//! Coalition analysis of robustness components: the value table over all
//! subsets of players, exact Shapley values and order-2 Faithful Shapley
//! interaction indices.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::enrich::EnrichSpec;
use crate::error::{bail_arg, Error, Result};
use crate::hpo::run_trial;
use crate::pipeline::{LabelSpec, RobustSpec, Selection, TrainSettings};
use crate::aggregate::AggSpec;
use crate::perturb_x::InputPerturbSpec;
use crate::Stance;

pub const MAX_PLAYERS: usize = 10;

/// A robustness component that can be switched on or off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Player {
    Vrm,
    Mixup,
    #[serde(rename = "w-dro")]
    Wdro,
    #[serde(rename = "w-dfo")]
    Wdfo,
    Ls,
    Lr,
    KlDro,
    KlDfo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Enrich,
    Input,
    Label,
    Aggregate,
}

impl Player {
    pub const DEFAULT: [Player; 3] = [Player::Vrm, Player::Ls, Player::KlDro];

    pub fn as_str(&self) -> &'static str {
        match self {
            Player::Vrm => "vrm",
            Player::Mixup => "mixup",
            Player::Wdro => "w-dro",
            Player::Wdfo => "w-dfo",
            Player::Ls => "ls",
            Player::Lr => "lr",
            Player::KlDro => "kl-dro",
            Player::KlDfo => "kl-dfo",
        }
    }

    fn stage(&self) -> Stage {
        match self {
            Player::Vrm | Player::Mixup => Stage::Enrich,
            Player::Wdro | Player::Wdfo => Stage::Input,
            Player::Ls | Player::Lr => Stage::Label,
            Player::KlDro | Player::KlDfo => Stage::Aggregate,
        }
    }

    /// Copy this player's component from `tuned` into `spec`.
    pub fn enable(&self, spec: &mut RobustSpec, tuned: &RobustSpec) {
        match self.stage() {
            Stage::Enrich => spec.enrich = tuned.enrich,
            Stage::Input => spec.input = tuned.input,
            Stage::Label => spec.label = tuned.label,
            Stage::Aggregate => spec.aggregate = tuned.aggregate,
        }
    }

    /// Switch the component off: `sigma = 0`, `alpha = 0`, radius 0 or a
    /// neutral mean.
    pub fn disable(&self, spec: &mut RobustSpec) {
        match self.stage() {
            Stage::Enrich => spec.enrich = EnrichSpec::default(),
            Stage::Input => spec.input = InputPerturbSpec::default(),
            Stage::Label => spec.label = LabelSpec::default(),
            Stage::Aggregate => spec.aggregate = AggSpec::neutral(),
        }
    }

    fn is_on(&self, spec: &RobustSpec) -> bool {
        use crate::enrich::EnrichMode;
        match self {
            Player::Vrm => spec.enrich.mode == EnrichMode::Vrm,
            Player::Mixup => spec.enrich.mode == EnrichMode::Mixup,
            Player::Wdro => spec.input.is_active() && spec.input.stance == Stance::Pessimistic,
            Player::Wdfo => spec.input.is_active() && spec.input.stance == Stance::Optimistic,
            Player::Ls => spec.label.is_active() && spec.label.stance == Stance::Neutral,
            Player::Lr => spec.label.is_active() && spec.label.stance == Stance::Optimistic,
            Player::KlDro => spec.aggregate.stance == Stance::Pessimistic,
            Player::KlDfo => spec.aggregate.stance == Stance::Optimistic,
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Player {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Player::Vrm,
            Player::Mixup,
            Player::Wdro,
            Player::Wdfo,
            Player::Ls,
            Player::Lr,
            Player::KlDro,
            Player::KlDfo,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown player '{s}'")))
    }
}

/// Values of all `2^k` coalitions, indexed by bitmask (bit `i` = player `i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalitionGame {
    pub players: Vec<String>,
    pub values: Vec<f64>,
}

impl CoalitionGame {
    pub fn new(players: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let k = players.len();
        if k == 0 || k > MAX_PLAYERS {
            bail_arg!("need 1..={MAX_PLAYERS} players, got {k}");
        }
        if values.len() != 1 << k {
            return Err(Error::Dimension(format!("{} values for {} coalitions", values.len(), 1 << k)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coalition value".into()));
        }
        Ok(Self { players, values })
    }

    /// Game whose value is `f(mask)` for every coalition.
    pub fn from_fn(players: Vec<String>, f: impl Fn(usize) -> f64) -> Result<Self> {
        let values = (0..1usize << players.len()).map(f).collect();
        Self::new(players, values)
    }

    pub fn k(&self) -> usize {
        self.players.len()
    }

    pub fn value(&self, mask: usize) -> f64 {
        self.values[mask]
    }

    pub fn grand(&self) -> usize {
        (1 << self.k()) - 1
    }

    pub fn members(&self, mask: usize) -> Vec<&str> {
        (0..self.k())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| self.players[i].as_str())
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "mask,members,value")?;
        for (m, v) in self.values.iter().enumerate() {
            writeln!(f, "{m},{},{v}", self.members(m).join("+"))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        let mut masks = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let parse = |i: usize| rec.get(i).unwrap_or("").to_string();
            masks.push(parse(0).parse().map_err(|_| Error::Csv(format!("bad mask '{}'", parse(0))))?);
            values.push(parse(2).parse().map_err(|_| Error::Csv(format!("bad value '{}'", parse(2))))?);
        }
        Ok((masks, values))
    }
}

/// Per-coalition training outcome behind a [`CoalitionGame`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalitionRun {
    pub mask: usize,
    pub spec: RobustSpec,
    /// Target metric averaged over seeds.
    pub raw: f64,
    pub delta: f64,
}

/// Spec of coalition `mask`: members at their tuned components, everything
/// else at `base`.
pub fn coalition_spec(players: &[Player], tuned: &[RobustSpec], base: &RobustSpec, mask: usize) -> RobustSpec {
    let mut s = *base;
    for (i, p) in players.iter().enumerate() {
        if mask >> i & 1 == 1 {
            p.enable(&mut s, &tuned[i]);
        } else {
            p.disable(&mut s);
        }
    }
    s
}

/// Train every coalition over `seeds` and record the mean of `target`
/// relative to the empty coalition.
#[allow(clippy::too_many_arguments)]
pub fn build_game(
    players: &[Player],
    tuned: &[RobustSpec],
    base: &RobustSpec,
    ds: &Dataset,
    settings: &TrainSettings,
    selection: &Selection,
    target: &Selection,
    seeds: &[u64],
) -> Result<(CoalitionGame, Vec<CoalitionRun>)> {
    let k = players.len();
    if k == 0 || k > MAX_PLAYERS {
        bail_arg!("need 1..={MAX_PLAYERS} players");
    }
    if tuned.len() != k {
        return Err(Error::Dimension(format!("{} tuned specs for {k} players", tuned.len())));
    }
    if seeds.is_empty() {
        bail_arg!("need at least one seed");
    }
    for (i, p) in players.iter().enumerate() {
        if players[..i].iter().any(|q| q.stage() == p.stage()) {
            bail_arg!("players '{}' share a stage, so disabling one is undefined", p);
        }
        if !p.is_on(&tuned[i]) {
            bail_arg!("tuned spec for '{p}' does not enable it");
        }
        if p.is_on(base) {
            bail_arg!("base spec already enables '{p}'");
        }
    }
    let mut runs = Vec::with_capacity(1 << k);
    for mask in 0..1usize << k {
        let spec = coalition_spec(players, tuned, base, mask);
        let mut total = 0.0;
        for &seed in seeds {
            let rec = run_trial(&spec, ds, settings, selection, seed)?;
            let v = rec
                .report(target.split)
                .map(|r| r.metric(target.metric))
                .filter(|v| v.is_finite() && !rec.diverged)
                .ok_or_else(|| Error::NonFinite(format!("coalition {mask} diverged on seed {seed}")))?;
            total += v;
        }
        runs.push(CoalitionRun { mask, spec, raw: total / seeds.len() as f64, delta: 0.0 });
    }
    let empty = runs[0].raw;
    for r in &mut runs {
        r.delta = r.raw - empty;
    }
    let names = players.iter().map(|p| p.to_string()).collect();
    let game = CoalitionGame::new(names, runs.iter().map(|r| r.delta).collect())?;
    Ok((game, runs))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn binom(n: usize, r: usize) -> f64 {
    factorial(n) / (factorial(r) * factorial(n - r))
}

/// Exact Shapley values by enumeration over coalitions.
pub fn shapley_values(game: &CoalitionGame) -> Vec<f64> {
    let k = game.k();
    let kf = factorial(k);
    (0..k)
        .map(|i| {
            let bit = 1 << i;
            (0..1usize << k)
                .filter(|s| s & bit == 0)
                .map(|s| {
                    let size = s.count_ones() as usize;
                    let w = factorial(size) * factorial(k - size - 1) / kf;
                    w * (game.value(s | bit) - game.value(s))
                })
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairIndex {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Order-2 Faithful Shapley interaction indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interactions {
    pub constant: f64,
    pub mains: Vec<f64>,
    pub pairs: Vec<PairIndex>,
}

impl Interactions {
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pairs.iter().find(|p| p.i == a && p.j == b).map(|p| p.value).unwrap_or(0.0)
    }

    /// Model prediction for coalition `mask`.
    pub fn predict(&self, mask: usize) -> f64 {
        let on = |i: usize| mask >> i & 1 == 1;
        let mains: f64 = self.mains.iter().enumerate().filter(|(i, _)| on(*i)).map(|(_, v)| v).sum();
        let pairs: f64 = self.pairs.iter().filter(|p| on(p.i) && on(p.j)).map(|p| p.value).sum();
        self.constant + mains + pairs
    }
}

/// Shapley kernel weight of a coalition of size `s` among `k` players;
/// infinite at the empty and grand coalitions.
pub fn shapley_kernel(k: usize, s: usize) -> f64 {
    if s == 0 || s == k {
        f64::INFINITY
    } else {
        (k - 1) as f64 / (binom(k, s) * s as f64 * (k - s) as f64)
    }
}

/// Weighted least-squares projection of the game onto constant, main and
/// pairwise terms under the Shapley kernel, with the empty and grand
/// coalitions fitted exactly.
pub fn interaction_indices(game: &CoalitionGame) -> Result<Interactions> {
    let k = game.k();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let p = 1 + k + pairs.len();
    let row = |mask: usize| -> Vec<f64> {
        let on = |i: usize| if mask >> i & 1 == 1 { 1.0 } else { 0.0 };
        let mut r = Vec::with_capacity(p);
        r.push(1.0);
        r.extend((0..k).map(on));
        r.extend(pairs.iter().map(|&(i, j)| on(i) * on(j)));
        r
    };
    let grand = game.grand();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for mask in 1..grand {
        let w = shapley_kernel(k, mask.count_ones() as usize);
        let r = row(mask);
        for a in 0..p {
            rhs[a] += 2.0 * w * r[a] * game.value(mask);
            for b in 0..p {
                gram[(a, b)] += 2.0 * w * r[a] * r[b];
            }
        }
    }
    let m = p + 2;
    let mut kkt = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    kkt.view_mut((0, 0), (p, p)).copy_from(&gram);
    b.rows_mut(0, p).copy_from(&rhs);
    for (c, mask) in [0usize, grand].into_iter().enumerate() {
        let r = row(mask);
        for a in 0..p {
            kkt[(p + c, a)] = r[a];
            kkt[(a, p + c)] = r[a];
        }
        b[p + c] = game.value(mask);
    }
    let sol = kkt
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidArgument("singular interaction design".into()))?;
    Ok(Interactions {
        constant: sol[0],
        mains: (0..k).map(|i| sol[1 + i]).collect(),
        pairs: pairs
            .iter()
            .enumerate()
            .map(|(n, &(i, j))| PairIndex { i, j, value: sol[1 + k + n] })
            .collect(),
    })
}

/// Everything exported by a coalition analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub players: Vec<String>,
    pub values: Vec<f64>,
    pub shapley: Vec<f64>,
    pub interactions: Interactions,
    /// `v(N) - v(empty)`.
    pub total: f64,
}

impl ShapleyReport {
    pub fn new(game: &CoalitionGame) -> Result<Self> {
        Ok(Self {
            players: game.players.clone(),
            values: game.values.clone(),
            shapley: shapley_values(game),
            interactions: interaction_indices(game)?,
            total: game.value(game.grand()) - game.value(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn additive_game() {
        let c = [0.3, -1.2, 2.5];
        let g = CoalitionGame::from_fn(names(3), |m| (0..3).filter(|i| m >> i & 1 == 1).map(|i| c[i]).sum()).unwrap();
        let phi = shapley_values(&g);
        for i in 0..3 {
            assert!((phi[i] - c[i]).abs() < 1e-12);
        }
        let ix = interaction_indices(&g).unwrap();
        for p in &ix.pairs {
            assert!(p.value.abs() < 1e-10);
        }
        for i in 0..3 {
            assert!((ix.mains[i] - c[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn pure_pair_game() {
        let g = CoalitionGame::from_fn(names(3), |m| if m & 0b11 == 0b11 { 1.0 } else { 0.0 }).unwrap();
        let ix = interaction_indices(&g).unwrap();
        assert!(ix.pair(0, 1) > 0.0);
        assert!(ix.pair(0, 2).abs() < 1e-10);
        assert!(ix.pair(1, 2).abs() < 1e-10);
        let phi = shapley_values(&g);
        assert!((phi[0] - 0.5).abs() < 1e-12 && (phi[1] - 0.5).abs() < 1e-12 && phi[2].abs() < 1e-12);
    }

    #[test]
    fn efficiency_and_fit_constraints() {
        let mut rng = stream(3, "game");
        for k in 1..=5 {
            let g = CoalitionGame::from_fn(names(k), |m| if m == 0 { 0.0 } else { 0.0 })
                .and_then(|g| {
                    let v = (0..g.values.len()).map(|m| if m == 0 { 0.0 } else { rng.random::<f64>() - 0.5 }).collect();
                    CoalitionGame::new(g.players, v)
                })
                .unwrap();
            let phi = shapley_values(&g);
            let total = g.value(g.grand()) - g.value(0);
            assert!((phi.iter().sum::<f64>() - total).abs() < 1e-12);
            let ix = interaction_indices(&g).unwrap();
            assert!((ix.predict(g.grand()) - g.value(g.grand())).abs() < 1e-10);
            assert!((ix.predict(0) - g.value(0)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(CoalitionGame::new(names(2), vec![0.0; 3]).is_err());
        assert!(CoalitionGame::new(names(0), vec![0.0]).is_err());
        assert!(CoalitionGame::new(names(1), vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn coalition_specs() {
        let players = Player::DEFAULT;
        let tuned = [
            crate::hpo::Preset::Vrm.spec(),
            crate::hpo::Preset::Ls.spec(),
            crate::hpo::Preset::KlDro.spec(),
        ];
        let base = RobustSpec::erm();
        assert_eq!(coalition_spec(&players, &tuned, &base, 0), base);
        let full = coalition_spec(&players, &tuned, &base, 0b111);
        let flags = full.planned_stages();
        assert!(flags.enrich && flags.label && flags.aggregate && !flags.input);
        assert_eq!(coalition_spec(&players, &tuned, &base, 0b001), tuned[0]);
    }
}
