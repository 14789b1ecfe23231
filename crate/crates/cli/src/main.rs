use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use unirobust_core::data::{gen_blobs, gen_preferences, gen_two_moons, inject_label_noise, split, write_csv, Blobs, Gap, Shift, TwoMoons};
use unirobust_core::hpo::{self, running_best, write_history, write_running_best, Preset, Sampler, TrialRecord};
use unirobust_core::rng::derive_seed;
use unirobust_core::shapley::{build_game, CoalitionGame, Player, ShapleyReport};
use unirobust_core::verify::{self, Suite};
use unirobust_core::{EnrichMode, EvalReport};

mod config;

use config::{build_dataset, RunConfig, ShapleyConfig};

/// Usage or validation failure; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Run finished but training diverged; exits with status 1.
#[derive(Debug)]
struct Diverged(PathBuf);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training diverged; record written to {}", self.0.display())
    }
}

impl std::error::Error for Diverged {}

#[derive(Parser)]
#[command(name = "unirobust", version, about = "Staged robust training: data, training, joint HPO, coalition analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV with a split column.
    GenData {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Train one configuration and write its trial record and reports.
    Train(TrainArgs),
    /// Search the configuration space.
    Hpo(HpoArgs),
    /// Coalition values, Shapley values and pairwise interactions.
    Shapley(ShapleyArgs),
    /// Run a built-in check suite.
    Verify {
        /// closedform, gradients, aggregation, labels, metrics or all
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct CommonGen {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of training labels resampled among the other classes.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GenKind {
    TwoMoons {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Class-0 angular gap in degrees, e.g. 60:120.
        #[arg(long)]
        gap: Option<String>,
        /// OOD shift, e.g. 0.3,10deg.
        #[arg(long)]
        shift: Option<String>,
        #[command(flatten)]
        common: CommonGen,
    },
    Blobs {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 3.0)]
        spread: f64,
        #[arg(long, default_value_t = 0.3)]
        sd: f64,
        #[arg(long, default_value_t = 0.0)]
        ood_offset: f64,
        #[command(flatten)]
        common: CommonGen,
    },
    Preferences {
        #[arg(long)]
        n_pairs: usize,
        /// Comma-separated true utility weights.
        #[arg(long)]
        utility: String,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Comma-separated fractions for train,val_id,val_ood,test_id,test_ood.
        #[arg(long, default_value = "0.6,0.1,0.1,0.1,0.1")]
        split: String,
        #[command(flatten)]
        common: CommonGen,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Training seed; the dataset keeps the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory (overrides out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep wall-clock times in trial records (artifacts stop being
    /// byte-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Start from a named preset instead of the configured spec.
    #[arg(long)]
    recover: Option<String>,
    /// VRM bandwidth; switches enrichment to vrm if it was off.
    #[arg(long)]
    sigma: Option<f64>,
    /// Input-ball radius.
    #[arg(long)]
    rho: Option<f64>,
    /// Credal label mass.
    #[arg(long)]
    alpha: Option<f64>,
    /// Aggregation temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct HpoArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n_trials: Option<usize>,
    /// random or tpe
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct ShapleyArgs {
    /// Required unless --synthetic-additive is given.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Test mode: an additive game with these per-player values, no training.
    #[arg(long)]
    synthetic_additive: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

fn parse_list(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Usage(format!("'{v}' is not a number")).into()))
        .collect()
}

fn parse<T: std::str::FromStr<Err = unirobust_core::Error>>(s: &str) -> anyhow::Result<T> {
    s.parse::<T>().map_err(|e| Usage(e.to_string()).into())
}

fn gen_data(kind: GenKind) -> anyhow::Result<()> {
    let (ds, common) = match kind {
        GenKind::TwoMoons { n, n_eval, noise, gap, shift, common } => {
            let gap = gap.as_deref().map(parse::<Gap>).transpose()?;
            let shift = shift.as_deref().map(parse::<Shift>).transpose()?.unwrap_or_default();
            let cfg = TwoMoons { n, n_eval, noise_sd: noise, gap, shift };
            (gen_two_moons(&cfg, common.seed)?, common)
        }
        GenKind::Blobs { n, n_eval, k, spread, sd, ood_offset, common } => {
            let cfg = Blobs { n, n_eval, k, spread, sd, ood_offset };
            (gen_blobs(&cfg, common.seed)?, common)
        }
        GenKind::Preferences { n_pairs, utility, noise, split: fr, common } => {
            let u = parse_list(&utility)?;
            let f = parse_list(&fr)?;
            let Ok(f) = <[f64; 5]>::try_from(f) else {
                return usage("--split takes five fractions");
            };
            let ds = gen_preferences(n_pairs, &u, noise, common.seed)?;
            (split(&ds, f, common.seed)?, common)
        }
    };
    let ds = if common.label_noise > 0.0 { inject_label_noise(&ds, common.label_noise, common.seed)? } else { ds };
    if let Some(dir) = common.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(&ds, &common.out)?;
    println!("wrote {} rows to {}", ds.len(), common.out.display());
    Ok(())
}

fn load(run: &RunArgs) -> anyhow::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        if cfg.data.seed.is_none() {
            cfg.data.seed = Some(cfg.seed);
        }
        cfg.seed = s;
    }
    if let Some(e) = run.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &run.out {
        cfg.out_dir = o.clone();
    }
    let base = run.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn write_reports(path: &Path, reports: &[EvalReport]) -> anyhow::Result<()> {
    let mut s = String::from(EvalReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn strip_timing(r: &mut TrialRecord, keep: bool) {
    if !keep {
        r.wall_clock_secs = None;
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, base) = load(&args.run)?;
    if let Some(p) = &args.recover {
        let preset: Preset = parse(p)?;
        let lr = cfg.spec.learning_rate;
        cfg.spec = preset.spec();
        cfg.spec.learning_rate = lr;
    }
    if let Some(s) = args.sigma {
        cfg.spec.enrich.sigma = s;
        if cfg.spec.enrich.mode == EnrichMode::None {
            cfg.spec.enrich.mode = EnrichMode::Vrm;
        }
    }
    if let Some(r) = args.rho {
        cfg.spec.input.radius = r;
    }
    if let Some(a) = args.alpha {
        cfg.spec.label.alpha = a;
    }
    if let Some(t) = args.tau {
        cfg.spec.aggregate.tau = t;
    }
    if let Some(lr) = args.lr {
        cfg.spec.learning_rate = lr;
    }
    cfg.validate()?;
    let ds = build_dataset(&cfg, &base)?;
    cfg.spec.validate_for(&ds).map_err(|e| Usage(e.to_string()))?;
    if cfg.spec.input.undershoots() {
        eprintln!("warning: PGD schedule cannot reach the ball boundary");
    }
    let mut rec = hpo::run_trial(&cfg.spec, &ds, &cfg.train, &cfg.selection, cfg.seed)?;
    strip_timing(&mut rec, args.run.timing);
    fs::create_dir_all(&cfg.out_dir)?;
    let trial_path = cfg.out_dir.join("trial.json");
    fs::write(&trial_path, serde_json::to_string_pretty(&rec)? + "\n")?;
    write_reports(&cfg.out_dir.join("reports.csv"), &rec.reports)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    if rec.diverged {
        return Err(Diverged(trial_path).into());
    }
    println!(
        "best epoch {:?}, {} on {} = {:?}; stages {:?}",
        rec.best_epoch, metric_name(&rec), rec.selection.split, rec.selection_value, rec.stages
    );
    Ok(())
}

fn metric_name(r: &TrialRecord) -> String {
    serde_json::to_value(r.selection.metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn hpo_cmd(args: HpoArgs) -> anyhow::Result<()> {
    let (mut cfg, base) = load(&args.run)?;
    let mut h = cfg.hpo.clone().unwrap_or_default();
    if let Some(p) = &args.preset {
        h.preset = parse(p)?;
    }
    if let Some(n) = args.n_trials {
        h.n_trials = n;
    }
    if let Some(s) = &args.sampler {
        h.sampler = parse::<Sampler>(s)?;
    }
    h.parallel |= args.parallel;
    if h.n_trials == 0 {
        return usage("n_trials must be >= 1");
    }
    cfg.hpo = Some(h.clone());
    let ds = build_dataset(&cfg, &base)?;
    let space = h.preset.space();
    let mut result = hpo::search(&space, &h.sampler, h.n_trials, &ds, &cfg.train, &cfg.selection, cfg.seed, h.parallel)?;
    for r in &mut result.history {
        strip_timing(r, args.run.timing);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_history(&cfg.out_dir.join("history.jsonl"), &result.history)?;
    write_running_best(&cfg.out_dir.join("running_best.csv"), &running_best(&result.history))?;
    let best = result.best();
    fs::write(cfg.out_dir.join("best_trial.json"), serde_json::to_string_pretty(best)? + "\n")?;
    let best_cfg = RunConfig {
        seed: best.seed,
        out_dir: cfg.out_dir.join("best"),
        data: config::DataConfig { seed: Some(cfg.data_seed()), ..cfg.data.clone() },
        spec: best.spec,
        train: best.settings.clone(),
        hpo: None,
        shapley: None,
        ..cfg.clone()
    };
    fs::write(cfg.out_dir.join("best_config.toml"), best_cfg.to_toml()?)?;
    println!(
        "{} trials; best trial {} with {} = {}",
        result.history.len(),
        best.trial,
        metric_name(best),
        best.score()
    );
    Ok(())
}

fn shapley_cmd(args: ShapleyArgs) -> anyhow::Result<()> {
    let (game, out, runs) = if let Some(vals) = &args.synthetic_additive {
        let c = parse_list(vals)?;
        let players = (0..c.len()).map(|i| format!("p{i}")).collect();
        let game = CoalitionGame::from_fn(players, |m| (0..c.len()).filter(|i| m >> i & 1 == 1).fold(0.0, |s, i| s + c[i]))
            .map_err(|e| Usage(e.to_string()))?;
        (game, args.out.clone().unwrap_or_else(|| PathBuf::from("out")), None)
    } else {
        let Some(path) = &args.config else {
            return usage("shapley needs --config or --synthetic-additive");
        };
        let run = RunArgs { config: path.clone(), seed: None, epochs: None, out: args.out.clone(), timing: false };
        let (cfg, base) = load(&run)?;
        let sh: ShapleyConfig = cfg.shapley.clone().unwrap_or_default();
        let players = sh.players.iter().map(|p| parse::<Player>(p)).collect::<anyhow::Result<Vec<_>>>()?;
        let tuned = if sh.tuned.is_empty() {
            players.iter().map(|p| parse::<Preset>(p.as_str()).map(|pr| preset_for(pr, &cfg))).collect::<anyhow::Result<Vec<_>>>()?
        } else {
            sh.tuned.clone()
        };
        let n_seeds = args.seeds.unwrap_or(sh.n_seeds);
        let seeds: Vec<u64> = (0..n_seeds).map(|s| derive_seed(cfg.seed, &format!("coalition-seed/{s}"))).collect();
        let ds = build_dataset(&cfg, &base)?;
        let (game, runs) = build_game(&players, &tuned, &cfg.spec, &ds, &cfg.train, &cfg.selection, &sh.target, &seeds)
            .map_err(|e| match e {
                unirobust_core::Error::InvalidArgument(m) => anyhow::Error::from(Usage(m)),
                e => e.into(),
            })?;
        (game, cfg.out_dir.clone(), Some(runs))
    };
    fs::create_dir_all(&out)?;
    game.write_csv(&out.join("coalitions.csv"))?;
    let report = ShapleyReport::new(&game)?;
    fs::write(out.join("indices.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(runs) = runs {
        fs::write(out.join("coalition_runs.json"), serde_json::to_string_pretty(&runs)? + "\n")?;
    }
    for (p, v) in report.players.iter().zip(&report.shapley) {
        println!("{p}: {v}");
    }
    Ok(())
}

/// The player's preset with the run's learning rate.
fn preset_for(p: Preset, cfg: &RunConfig) -> unirobust_core::RobustSpec {
    let mut s = p.spec();
    s.learning_rate = cfg.spec.learning_rate;
    s
}

fn verify_cmd(suite: &str, seed: u64) -> anyhow::Result<()> {
    let Ok(s) = suite.parse::<Suite>() else {
        return usage(format!("unknown suite '{suite}'; expected one of {}", Suite::NAMES.join(", ")));
    };
    let checks = verify::run(s, seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::GenData { kind } => gen_data(kind),
        Command::Train(a) => train(a),
        Command::Hpo(a) => hpo_cmd(a),
        Command::Shapley(a) => shapley_cmd(a),
        Command::Verify { suite, seed } => verify_cmd(&suite, seed),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<unirobust_core::Error>() {
        Some(unirobust_core::Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
