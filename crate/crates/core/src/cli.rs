//! Command-line front end. `run` parses arguments, dispatches a subcommand
//! and maps failures to exit codes with a JSON error record on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::checkpoint;
use crate::dfps::{self, DfpsConfig, DfpsRun, DiagnosticsRecord, Evaluation, StageFingerprints, Variant};
use crate::error::{DfpsError, Result};
use crate::experiments::{self, AblationReport, ConvergenceReport};
use crate::model::{CoefficientRanges, Scenario};
use crate::networks::NetworkBundle;
use crate::report::{num, opt, write_charts, write_json, write_jsonl, ChartSpec, Table};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_OUTPUT: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "dfps", version, about = "Deep FBSDE Picard solver for LQ mean-field Stackelberg games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run seed (network initialization, training noise, exploration).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Base settings: `paper`, `smoke` or `desk`.
    #[arg(long, global = true, default_value = "smoke")]
    pub profile: String,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Time steps; the sweep takes a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub n_steps: Option<Vec<usize>>,
    /// Monte Carlo paths per training scenario.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Picard iterations per stage.
    #[arg(long, global = true)]
    pub picard: Option<usize>,
    #[arg(long, global = true)]
    pub eps_tol: Option<f64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with config fields; missing fields come from the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on one or more seeds and write convergence diagnostics.
    Train {
        /// Comma-separated seeds; overrides --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Evaluate a trained model on several grids.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare the follower against the Riccati baseline on constant scenarios.
    RiccatiCheck {
        /// State dimension.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        scenarios: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every variant on several seeds.
    Ablate {
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Unilateral deviation test around a trained equilibrium.
    Deviate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        seeds: usize,
        #[arg(long, default_value_t = 32)]
        directions: usize,
        /// Paths per deviation simulation.
        #[arg(long, default_value_t = 64)]
        deviation_paths: usize,
    },
    /// Portfolio study across volatility regimes.
    Finance {
        #[arg(long, default_value_t = 5)]
        replicates: usize,
    },
    /// Parameter count against state dimension.
    Scale {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,50")]
        dims: Vec<usize>,
        /// Points per axis of the comparison grid.
        #[arg(long, default_value_t = 20)]
        grid: usize,
    },
    /// Regenerate the SVG charts in --out from its CSV files.
    Plot,
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    code: i32,
    message: String,
}

/// Exit code and category of an error.
pub fn classify(e: &DfpsError) -> (i32, &'static str) {
    match e {
        DfpsError::Config(_) | DfpsError::Serde(_) => (EXIT_CONFIG, "config"),
        DfpsError::Io { .. } | DfpsError::Csv(_) => (EXIT_OUTPUT, "output"),
        DfpsError::Singular { .. } | DfpsError::Simulation { .. } | DfpsError::Training { .. } | DfpsError::Undefined(_) => (EXIT_NUMERICAL, "numerical"),
        DfpsError::Contract(_) => (EXIT_OTHER, "internal"),
    }
}

fn report_error(kind: &str, code: i32, message: String) -> i32 {
    let rec = ErrorRecord { error: kind, code, message };
    eprintln!("{}", serde_json::to_string(&rec).unwrap_or_default());
    code
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return report_error("usage", EXIT_USAGE, e.kind().to_string());
        }
    };
    if let Some(t) = cli.common.threads {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = classify(&e);
            report_error(kind, code, e.to_string())
        }
    }
}

/// Profile, then config file, then flags.
pub fn resolve_config(common: &Common, single_steps: bool) -> Result<DfpsConfig> {
    let mut cfg = DfpsConfig::profile(&common.profile)?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| DfpsError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg = cfg.with_json_patch(&text).map_err(|e| DfpsError::Config(format!("{}: {e}", path.display())))?;
    }
    cfg.seed = common.seed;
    if single_steps {
        if let Some(ns) = &common.n_steps {
            match ns.as_slice() {
                [n] => cfg.steps = *n,
                _ => return Err(DfpsError::Config("--n-steps takes a single value for this subcommand".into())),
            }
        }
    }
    if let Some(p) = common.paths {
        cfg.paths = p;
    }
    if let Some(p) = common.picard {
        cfg.picard = p;
    }
    if let Some(t) = common.eps_tol {
        cfg.eps_tol = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DfpsError::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| DfpsError::io(dir, e))?;
    fs::remove_file(&probe).map_err(|e| DfpsError::io(dir, e))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = &cli.common.out;
    let single = !matches!(cli.command, Command::Sweep { .. });
    if matches!(cli.command, Command::Plot) {
        let n = crate::report::replot(out)?;
        info!("redrew {n} charts in {}", out.display());
        return Ok(());
    }
    let mut cfg = resolve_config(&cli.common, single)?;
    prepare_out(out)?;
    match &cli.command {
        Command::Train { seeds } => {
            let seeds = seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
            cmd_train(&cfg, &seeds, out)
        }
        Command::Sweep { checkpoint } => {
            let ns = cli.common.n_steps.clone().unwrap_or_else(|| vec![50, 100, 200]);
            cmd_sweep(&cfg, &ns, checkpoint.as_deref(), out)
        }
        Command::RiccatiCheck { n, scenarios, checkpoint } => {
            cfg.dims.n = *n;
            cfg.validate()?;
            cmd_riccati(&cfg, *scenarios, checkpoint.as_deref(), out)
        }
        Command::Ablate { seeds } => {
            let seeds: Vec<u64> = (0..*seeds as u64).map(|i| cfg.seed + i).collect();
            cmd_ablate(&cfg, &seeds, out)
        }
        Command::Deviate {
            checkpoint,
            seeds,
            directions,
            deviation_paths,
        } => cmd_deviate(&cfg, checkpoint.as_deref(), *seeds, *directions, *deviation_paths, out),
        Command::Finance { replicates } => cmd_finance(&cfg, *replicates, out),
        Command::Scale { dims, grid } => cmd_scale(dims, *grid, out),
        Command::Plot => unreachable!(),
    }
}

fn pool_for(cfg: &DfpsConfig) -> Result<Vec<Scenario>> {
    cfg.scenario_pool(&CoefficientRanges::default())
}

/// Write the per-stage and final checkpoints of a run under `dir`.
pub fn save_checkpoints(run: &DfpsRun, dir: &Path) -> Result<()> {
    for (stage, bundle) in &run.snapshots {
        checkpoint::save(bundle, dir, stage)?;
    }
    checkpoint::save(&run.bundle, dir, "final")?;
    Ok(())
}

/// A trained model: loaded from `checkpoint` or trained with `cfg`.
fn trained_model(cfg: &DfpsConfig, pool: &[Scenario], checkpoint: Option<&Path>, out: &Path) -> Result<NetworkBundle> {
    if let Some(path) = checkpoint {
        let bundle = checkpoint::load(path)?;
        if bundle.dims != cfg.dims {
            return Err(DfpsError::Config("checkpoint dimensions differ from the config".into()));
        }
        return Ok(bundle);
    }
    let run = dfps::run_dfps(cfg, pool)?;
    save_checkpoints(&run, &out.join("checkpoints"))?;
    Ok(run.bundle)
}

#[allow(clippy::too_many_arguments)]
fn chart(file: &str, table: &str, title: &str, x: &str, y: &[&str], group: Option<&str>, log_x: bool, log_y: bool) -> ChartSpec {
    ChartSpec {
        file: file.into(),
        table: table.into(),
        title: title.into(),
        x: x.into(),
        y: y.iter().map(|s| s.to_string()).collect(),
        group: group.map(str::to_string),
        log_x,
        log_y,
    }
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    seed: u64,
    picard_iter: usize,
    #[serde(flatten)]
    record: &'a DiagnosticsRecord,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    convergence: &'a ConvergenceReport,
    evaluations: Vec<&'a Evaluation>,
    fingerprints: Vec<&'a StageFingerprints>,
}

pub const DIAGNOSTIC_COLUMNS: [&str; 19] = [
    "seed",
    "stage",
    "picard_iter",
    "iteration",
    "J1",
    "J2",
    "residual_follower",
    "residual_leader",
    "delta_t_follower",
    "delta_t_leader",
    "V_u1",
    "V_x1",
    "V_u2",
    "V_x2",
    "rho_u1",
    "rho_x1",
    "rho_u2",
    "rho_x2",
    "picard_error",
];

/// Diagnostics of several runs as a table, one row per logged iteration.
pub fn diagnostics_table(runs: &[DfpsRun]) -> Table {
    let mut t = Table::new(&DIAGNOSTIC_COLUMNS);
    for run in runs {
        for (k, r) in run.diagnostics.iter().enumerate() {
            t.push(vec![
                run.config.seed.to_string(),
                r.stage.name().to_string(),
                k.to_string(),
                r.iteration.to_string(),
                num(r.j1),
                num(r.j2),
                opt(r.residual_follower),
                opt(r.residual_leader),
                opt(r.delta_t_follower),
                opt(r.delta_t_leader),
                opt(r.v_u1),
                opt(r.v_x1),
                opt(r.v_u2),
                opt(r.v_x2),
                num(r.rho_u1),
                num(r.rho_x1),
                num(r.rho_u2),
                num(r.rho_x2),
                opt(r.picard_error),
            ]);
        }
    }
    t
}

fn bound_table(runs: &[DfpsRun]) -> Table {
    let mut t = Table::new(&[
        "seed",
        "player",
        "channel",
        "iteration",
        "rho",
        "eta",
        "residual_norm",
        "eps_opt",
        "eps_net",
        "bound",
    ]);
    for run in runs {
        for c in &run.bound_checks {
            t.push(vec![
                run.config.seed.to_string(),
                format!("{:?}", c.player).to_lowercase(),
                format!("{:?}", c.channel).to_lowercase(),
                c.iteration.to_string(),
                num(c.rho),
                num(c.eta),
                num(c.residual_norm),
                num(c.eps_opt),
                num(c.eps_net),
                opt(c.bound),
            ]);
        }
    }
    t
}

/// Write the artifacts of a set of training runs.
pub fn write_training(cfg: &DfpsConfig, runs: &[DfpsRun], out: &Path) -> Result<ConvergenceReport> {
    let report = ConvergenceReport::from_runs(cfg, runs);
    let full = TrainReport {
        convergence: &report,
        evaluations: runs.iter().map(|r| &r.evaluation).collect(),
        fingerprints: runs.iter().map(|r| &r.fingerprints).collect(),
    };
    write_json(&out.join("report.json"), &full)?;
    let tagged: Vec<TaggedRecord> = runs
        .iter()
        .flat_map(|run| {
            run.diagnostics.iter().enumerate().map(|(k, record)| TaggedRecord {
                seed: run.config.seed,
                picard_iter: k,
                record,
            })
        })
        .collect();
    write_jsonl(&out.join("diagnostics.jsonl"), &tagged)?;
    diagnostics_table(runs).write(&out.join("raw.csv"))?;
    bound_table(runs).write(&out.join("bound_checks.csv"))?;
    for run in runs {
        save_checkpoints(run, &out.join("checkpoints").join(format!("seed{}", run.config.seed)))?;
    }
    write_charts(
        out,
        &[
            chart(
                "violations.svg",
                "raw.csv",
                "Consistency violations",
                "picard_iter",
                &["V_u1", "V_x1", "V_u2", "V_x2"],
                None,
                false,
                true,
            ),
            chart(
                "residuals.svg",
                "raw.csv",
                "Adjoint residuals",
                "picard_iter",
                &["residual_follower", "residual_leader"],
                None,
                false,
                true,
            ),
            chart(
                "penalties.svg",
                "raw.csv",
                "Penalty parameters",
                "picard_iter",
                &["rho_u1", "rho_x1", "rho_u2", "rho_x2"],
                None,
                false,
                false,
            ),
            chart("costs.svg", "raw.csv", "Costs", "picard_iter", &["J1", "J2"], None, false, false),
        ],
    )?;
    Ok(report)
}

fn cmd_train(cfg: &DfpsConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let pool = pool_for(cfg)?;
    let (_, runs) = experiments::convergence_study(cfg, &pool, seeds)?;
    let report = write_training(cfg, &runs, out)?;
    info!(
        "J1 {:.4} +/- {:.4}, J2 {:.4} +/- {:.4}",
        report.j1.mean, report.j1.std, report.j2.mean, report.j2.std
    );
    Ok(())
}

#[derive(Serialize)]
struct Wrapped<'a, T> {
    config: &'a DfpsConfig,
    #[serde(flatten)]
    result: &'a T,
}

fn cmd_sweep(cfg: &DfpsConfig, ns: &[usize], checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let pool = pool_for(cfg)?;
    let bundle = trained_model(cfg, &pool, checkpoint, out)?;
    let sweep = experiments::discretization_sweep(&bundle, cfg, &pool, ns)?;
    write_json(&out.join("report.json"), &Wrapped { config: cfg, result: &sweep })?;
    let mut t = Table::new(&["steps", "dt", "J1", "J2", "self_error"]);
    for p in &sweep.points {
        t.push(vec![p.steps.to_string(), num(p.dt), num(p.j1), num(p.j2), num(p.self_error)]);
    }
    t.write(&out.join("raw.csv"))?;
    write_charts(
        out,
        &[chart(
            "sweep.svg",
            "raw.csv",
            "Self-convergence in the step count",
            "dt",
            &["self_error"],
            None,
            true,
            true,
        )],
    )
}

fn cmd_riccati(cfg: &DfpsConfig, scenarios: usize, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let pool = pool_for(cfg)?;
    let bundle = trained_model(cfg, &pool, checkpoint, out)?;
    let rep = experiments::riccati_comparison(&bundle, cfg, scenarios)?;
    write_json(&out.join("report.json"), &Wrapped { config: cfg, result: &rep })?;
    let mut t = Table::new(&["index", "J1_dfps", "J1_dfps_se", "J1_riccati", "J1_riccati_plain", "J1_oracle", "rel_error"]);
    for c in &rep.cases {
        t.push(vec![
            c.index.to_string(),
            num(c.j1_dfps),
            num(c.j1_dfps_se),
            num(c.j1_riccati),
            num(c.j1_riccati_plain),
            num(c.j1_oracle),
            num(c.rel_error),
        ]);
    }
    t.write(&out.join("raw.csv"))?;
    info!("mean |relative error| {:.4}", rep.mean_abs_rel_error);
    write_charts(
        out,
        &[chart(
            "riccati.svg",
            "raw.csv",
            "Follower cost against the Riccati reference",
            "index",
            &["J1_dfps", "J1_riccati"],
            None,
            false,
            false,
        )],
    )
}

/// Write the artifacts of an ablation study.
pub fn write_ablation(report: &AblationReport, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Change {
        variant: Variant,
        dj1: Option<f64>,
        dj2: Option<f64>,
    }
    #[derive(Serialize)]
    struct Full<'a> {
        #[serde(flatten)]
        report: &'a AblationReport,
        relative_change: Vec<Change>,
    }
    let relative_change = Variant::ALL
        .iter()
        .filter(|v| **v != Variant::Full)
        .map(|&v| {
            let c = report.relative_change(v);
            Change {
                variant: v,
                dj1: c.map(|c| c.0),
                dj2: c.map(|c| c.1),
            }
        })
        .collect();
    write_json(&out.join("report.json"), &Full { report, relative_change })?;
    let mut t = Table::new(&["variant", "seed", "J1", "J2", "max_violation", "delta_t", "diverged", "fault"]);
    for v in &report.variants {
        for r in &v.runs {
            t.push(vec![
                v.variant.name().to_string(),
                r.seed.to_string(),
                opt(r.j1),
                opt(r.j2),
                opt(r.max_violation),
                opt(r.delta_t),
                r.diverged.to_string(),
                r.fault.clone().unwrap_or_default(),
            ]);
        }
    }
    t.write(&out.join("raw.csv"))?;
    write_charts(
        out,
        &[chart(
            "ablation.svg",
            "raw.csv",
            "Costs per seed",
            "seed",
            &["J2"],
            Some("variant"),
            false,
            false,
        )],
    )
}

fn cmd_ablate(cfg: &DfpsConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let pool = pool_for(cfg)?;
    let report = experiments::ablation_suite(cfg, &pool, seeds, &[]);
    write_ablation(&report, out)
}

fn cmd_deviate(cfg: &DfpsConfig, checkpoint: Option<&Path>, seeds: usize, directions: usize, paths: usize, out: &Path) -> Result<()> {
    let pool = pool_for(cfg)?;
    let bundle = trained_model(cfg, &pool, checkpoint, out)?;
    let eps = experiments::default_eps_grid();
    let rep = experiments::deviation_test(&bundle, cfg, &pool, seeds, directions, &eps, paths)?;
    write_json(&out.join("report.json"), &Wrapped { config: cfg, result: &rep })?;
    let mut t = Table::new(&["player", "eps", "mean_rel_delta", "min_rel_delta", "max_rel_delta"]);
    for c in &rep.curves {
        for (k, e) in c.eps.iter().enumerate() {
            t.push(vec![
                format!("{:?}", c.player).to_lowercase(),
                num(*e),
                num(c.mean_rel_delta[k]),
                num(c.min_rel_delta[k]),
                num(c.max_rel_delta[k]),
            ]);
        }
    }
    t.write(&out.join("raw.csv"))?;
    write_charts(
        out,
        &[chart(
            "deviation.svg",
            "raw.csv",
            "Relative cost increment under deviation",
            "eps",
            &["mean_rel_delta"],
            Some("player"),
            false,
            false,
        )],
    )
}

fn cmd_finance(cfg: &DfpsConfig, replicates: usize, out: &Path) -> Result<()> {
    let (rep, run) = experiments::financial_study(cfg, replicates)?;
    save_checkpoints(&run, &out.join("checkpoints"))?;
    write_json(&out.join("report.json"), &rep)?;
    let mut t = Table::new(&["regime", "volatility", "J1_mean", "J1_std", "J1_se", "J2_mean", "J2_std", "J2_se", "replicates"]);
    let mut fan = Table::new(&["regime", "step", "t", "q05", "q25", "q50", "q75", "q95", "mean_u1"]);
    let grid = rep.config.grid()?;
    for r in &rep.regimes {
        t.push(vec![
            r.regime.name().to_string(),
            num(r.volatility),
            num(r.j1.mean),
            num(r.j1.std),
            num(r.j1_se),
            num(r.j2.mean),
            num(r.j2.std),
            num(r.j2_se),
            r.j1.count.to_string(),
        ]);
        for (k, q) in r.fan.iter().enumerate() {
            let u = r.mean_u1.get(k).copied().map_or(String::new(), num);
            let mut row = vec![r.regime.name().to_string(), k.to_string(), num(grid.t(k))];
            row.extend(q.iter().map(|v| num(*v)));
            row.push(u);
            fan.push(row);
        }
    }
    t.write(&out.join("raw.csv"))?;
    fan.write(&out.join("fan.csv"))?;
    write_charts(
        out,
        &[
            chart(
                "fan.svg",
                "fan.csv",
                "Stock position quantiles",
                "t",
                &["q05", "q50", "q95"],
                Some("regime"),
                false,
                false,
            ),
            chart(
                "mean_u1.svg",
                "fan.csv",
                "Mean follower control",
                "t",
                &["mean_u1"],
                Some("regime"),
                false,
                false,
            ),
        ],
    )
}

fn cmd_scale(dims: &[usize], grid: usize, out: &Path) -> Result<()> {
    let rep = experiments::scaling_profile(dims, grid)?;
    write_json(&out.join("report.json"), &rep)?;
    let mut t = Table::new(&["n", "parameters", "grid_log10"]);
    for p in &rep.points {
        t.push(vec![p.n.to_string(), p.parameters.to_string(), num(p.grid_log10)]);
    }
    t.write(&out.join("raw.csv"))?;
    write_charts(
        out,
        &[chart("scaling.svg", "raw.csv", "Trainable parameters", "n", &["parameters"], None, true, true)],
    )
}
