//! The experiment suite: convergence diagnostics, discretization sweep,
//! comparison against the Riccati baseline, ablations, unilateral deviation
//! test, financial regimes and the parameter-count profile.
//!
//! Every experiment is a pure function of its config and seeds and returns a
//! serializable report; writing files is left to the `report` module.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alm::{self, BoundCheck};
use crate::dfps::{self, DfpsConfig, DfpsRun, FollowerPlay, LeaderPlay, PlaySpec, StageKind, Variant};
use crate::error::{DfpsError, Result};
use crate::linalg::Mat;
use crate::model::{self, CoefficientRanges, Dims, MeanField, Noise, Player, Regime, Scenario, TimeGrid};
use crate::networks::{parameter_count, NetworkBundle};
use crate::riccati::{self, LqProblem};
use crate::rng::{stream, Purpose};

use rand::Rng;
use rand_distr::StandardNormal;

/// Mean and sample standard deviation of the finite entries of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        let count = v.len();
        if count == 0 {
            return Stat { mean: 0.0, std: 0.0, count };
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let std = if count > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, count }
    }

    /// Coefficient of variation, `std / |mean|`.
    pub fn cv(&self) -> f64 {
        self.std / self.mean.abs().max(1e-300)
    }
}

/// Least-squares line `y = a + b x`; returns `(a, b, r2)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    fit_poly(x, y, 1).map(|(c, r2)| (c[0], c[1], r2))
}

/// Least-squares polynomial of the given degree via the normal equations;
/// returns the coefficients in ascending order and `R^2`.
pub fn fit_poly(x: &[f64], y: &[f64], degree: usize) -> Option<(Vec<f64>, f64)> {
    let k = degree + 1;
    if x.len() != y.len() || x.len() < k {
        return None;
    }
    let mut ata = Mat::zeros(k, k);
    let mut aty = Mat::zeros(k, 1);
    for (&xi, &yi) in x.iter().zip(y) {
        let pows: Vec<f64> = (0..k).map(|p| xi.powi(p as i32)).collect();
        for r in 0..k {
            aty.data[r] += pows[r] * yi;
            for c in 0..k {
                ata.data[r * k + c] += pows[r] * pows[c];
            }
        }
    }
    let coef = ata.solve(&aty).ok()?.data;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let fit: f64 = coef.iter().enumerate().map(|(p, c)| c * xi.powi(p as i32)).sum();
            (yi - fit).powi(2)
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some((coef, r2))
}

/// Scalar outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub j1: Option<f64>,
    pub j2: Option<f64>,
    /// Largest of the four evaluation violations.
    pub max_violation: Option<f64>,
    /// Largest terminal mismatch over the players.
    pub delta_t: Option<f64>,
    /// Follower residual on the monitor set at the start and end of the
    /// follower (or joint) stage.
    pub residual_initial: Option<f64>,
    pub residual_final: Option<f64>,
    pub penalties_monotone: bool,
    pub iterations: usize,
    pub diverged: bool,
    pub fault: Option<String>,
}

impl RunSummary {
    pub fn residual_ratio(&self) -> Option<f64> {
        match (self.residual_initial, self.residual_final) {
            (Some(a), Some(b)) if a > 0.0 => Some(b / a),
            _ => None,
        }
    }

    fn failed(variant: Variant, seed: u64, fault: String) -> Self {
        RunSummary {
            variant,
            seed,
            j1: None,
            j2: None,
            max_violation: None,
            delta_t: None,
            residual_initial: None,
            residual_final: None,
            penalties_monotone: false,
            iterations: 0,
            diverged: true,
            fault: Some(fault),
        }
    }
}

/// Divergence rule: a non-finite cost or evaluation, or a final violation
/// above ten times the tolerance.
pub fn is_diverged(run: &DfpsRun) -> bool {
    let ev = &run.evaluation;
    let nonfinite_log = run.diagnostics.iter().any(|r| !(r.j1.is_finite() && r.j2.is_finite()));
    nonfinite_log || !ev.is_finite() || ev.max_violation() > 10.0 * run.config.eps_tol
}

/// Whether every penalty parameter is non-decreasing along the log.
pub fn penalties_monotone(run: &DfpsRun) -> bool {
    run.diagnostics.windows(2).all(|w| {
        let (a, b) = (&w[0], &w[1]);
        b.rho_u1 >= a.rho_u1 && b.rho_x1 >= a.rho_x1 && b.rho_u2 >= a.rho_u2 && b.rho_x2 >= a.rho_x2
    })
}

pub fn summarize(run: &DfpsRun) -> RunSummary {
    let ev = &run.evaluation;
    let first_stage = |s: StageKind| s == StageKind::Follower || s == StageKind::Joint;
    let residuals: Vec<f64> = run
        .diagnostics
        .iter()
        .filter(|r| first_stage(r.stage))
        .filter_map(|r| r.residual_follower)
        .collect();
    let delta_t = match (ev.delta_t_follower, ev.delta_t_leader) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    let finite = |v: f64| v.is_finite().then_some(v);
    RunSummary {
        variant: run.config.variant,
        seed: run.config.seed,
        j1: finite(ev.j1),
        j2: finite(ev.j2),
        max_violation: finite(ev.max_violation()),
        delta_t,
        residual_initial: residuals.first().copied(),
        residual_final: residuals.last().copied(),
        penalties_monotone: penalties_monotone(run),
        iterations: run.diagnostics.iter().filter(|r| r.iteration > 0).count(),
        diverged: is_diverged(run),
        fault: None,
    }
}

/// Train one run per seed, in parallel; results come back in seed order.
pub fn train_seeds(cfg: &DfpsConfig, pool: &[Scenario], seeds: &[u64]) -> Vec<Result<DfpsRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let c = DfpsConfig { seed, ..cfg.clone() };
            dfps::run_dfps(&c, pool)
        })
        .collect()
}

/// Tally of the logged feasibility-bound checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub logged: usize,
    /// Checks with `rho > 1/eta`, where the bound applies.
    pub active: usize,
    pub satisfied: usize,
    /// Smallest `bound - residual` over the active checks.
    pub worst_slack: Option<f64>,
}

impl BoundSummary {
    pub fn of<'a>(checks: impl IntoIterator<Item = &'a BoundCheck>) -> Self {
        let mut s = BoundSummary {
            logged: 0,
            active: 0,
            satisfied: 0,
            worst_slack: None,
        };
        for c in checks {
            s.logged += 1;
            if let Some(b) = c.bound {
                s.active += 1;
                if c.holds(1e-8) == Some(true) {
                    s.satisfied += 1;
                }
                let slack = b - c.residual_norm;
                s.worst_slack = Some(s.worst_slack.map_or(slack, |w: f64| w.min(slack)));
            }
        }
        s
    }

    pub fn all_hold(&self) -> bool {
        self.satisfied == self.active
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config: DfpsConfig,
    pub runs: Vec<RunSummary>,
    pub j1: Stat,
    pub j2: Stat,
    pub residual_ratio: Stat,
    pub max_violation: Stat,
    pub delta_t: Stat,
    pub bound_checks: BoundSummary,
}

impl ConvergenceReport {
    pub fn from_runs(cfg: &DfpsConfig, runs: &[DfpsRun]) -> Self {
        let summaries: Vec<RunSummary> = runs.iter().map(summarize).collect();
        let col = |f: &dyn Fn(&RunSummary) -> Option<f64>| Stat::of(&summaries.iter().filter_map(f).collect::<Vec<_>>());
        ConvergenceReport {
            config: cfg.clone(),
            j1: col(&|s| s.j1),
            j2: col(&|s| s.j2),
            residual_ratio: col(&|s| s.residual_ratio()),
            max_violation: col(&|s| s.max_violation),
            delta_t: col(&|s| s.delta_t),
            bound_checks: BoundSummary::of(runs.iter().flat_map(|r| &r.bound_checks)),
            runs: summaries,
        }
    }
}

/// Train the full method on several seeds and summarize convergence.
pub fn convergence_study(cfg: &DfpsConfig, pool: &[Scenario], seeds: &[u64]) -> Result<(ConvergenceReport, Vec<DfpsRun>)> {
    let cfg = DfpsConfig {
        variant: Variant::Full,
        ..cfg.clone()
    };
    let runs = train_seeds(&cfg, pool, seeds).into_iter().collect::<Result<Vec<_>>>()?;
    Ok((ConvergenceReport::from_runs(&cfg, &runs), runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub steps: usize,
    pub dt: f64,
    pub j1: f64,
    pub j2: f64,
    /// `|J1(N) - J1(N_max)| / |J1(N_max)|`.
    pub self_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub scenarios: usize,
    pub paths: usize,
    /// Slope of `log(self_error)` against `log(dt)` over the nonzero errors.
    pub slope: Option<f64>,
    pub strictly_decreasing: bool,
}

/// Mean equilibrium costs of the trained solution on `pool[..count]`, with
/// noise supplied per scenario.
fn mean_costs(bundle: &NetworkBundle, variant: Variant, pool: &[Scenario], grid: &TimeGrid, noises: &[Noise]) -> Result<(f64, f64)> {
    let mut j = [0.0; 2];
    for (sc, noise) in pool.iter().zip(noises) {
        let xi = bundle.context(&sc.context());
        let agg = dfps::eval_leader_coeffs(bundle, variant, sc, &xi, grid, noise)?;
        let eq = dfps::simulate_equilibrium(bundle, sc, grid, noise, &agg, [None, None])?;
        j[0] += eq.cost(Player::Follower);
        j[1] += eq.cost(Player::Leader);
    }
    let n = noises.len().max(1) as f64;
    Ok((j[0] / n, j[1] / n))
}

/// Evaluate one trained solution on several grids. All grids see the same
/// Brownian paths: increments are drawn on the finest grid and summed.
pub fn discretization_sweep(bundle: &NetworkBundle, cfg: &DfpsConfig, pool: &[Scenario], steps: &[usize]) -> Result<SweepReport> {
    if steps.len() < 3 {
        return Err(DfpsError::Config("the discretization sweep needs at least three step counts".into()));
    }
    let mut ns = steps.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() != steps.len() {
        return Err(DfpsError::Config("step counts must be distinct".into()));
    }
    let n_max = *ns.last().unwrap();
    if ns.iter().any(|&n| n == 0 || !n_max.is_multiple_of(n)) {
        return Err(DfpsError::Config("every step count must divide the largest one".into()));
    }
    let fine = TimeGrid::new(cfg.horizon, n_max)?;
    let count = cfg.eval_scenarios.min(pool.len());
    let fine_noise: Vec<Noise> = (0..count)
        .map(|i| Noise::sample(cfg.scenario_seed, Purpose::EvalNoise, i as u64, cfg.eval_paths, cfg.dims.n, &fine, cfg.x0_var))
        .collect();
    let mut raw = Vec::new();
    for &n in &ns {
        let grid = TimeGrid::new(cfg.horizon, n)?;
        let noises = fine_noise.iter().map(|z| z.coarsen(n_max / n)).collect::<Result<Vec<_>>>()?;
        let (j1, j2) = mean_costs(bundle, cfg.variant, &pool[..count], &grid, &noises)?;
        raw.push((n, grid.dt(), j1, j2));
    }
    let j_ref = raw.last().unwrap().2;
    let points: Vec<SweepPoint> = raw
        .into_iter()
        .map(|(steps, dt, j1, j2)| SweepPoint {
            steps,
            dt,
            j1,
            j2,
            self_error: (j1 - j_ref).abs() / j_ref.abs().max(1e-300),
        })
        .collect();
    let strictly_decreasing = points.windows(2).all(|w| w[1].self_error < w[0].self_error);
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().filter(|p| p.self_error > 0.0).map(|p| (p.dt.ln(), p.self_error.ln())).unzip();
    let slope = if lx.len() >= 2 { fit_line(&lx, &ly).map(|(_, b, _)| b) } else { None };
    Ok(SweepReport {
        points,
        scenarios: count,
        paths: cfg.eval_paths,
        slope,
        strictly_decreasing,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiCase {
    pub index: usize,
    pub scenario: Scenario,
    pub j1_dfps: f64,
    pub j1_dfps_se: f64,
    pub j1_riccati: f64,
    /// Exact cost of the Euler-discretized problem.
    pub j1_oracle: f64,
    /// Riccati reference without the mean-field cost weights.
    pub j1_riccati_plain: f64,
    /// Signed, `(J_dfps - J_riccati) / |J_riccati|`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiReport {
    pub cases: Vec<RiccatiCase>,
    pub mean_abs_rel_error: f64,
    pub mean_rel_error: f64,
}

/// Constant-coefficient scenarios near the midpoints of the sampling ranges.
pub fn constant_scenarios(cfg: &DfpsConfig, count: usize) -> Result<Vec<Scenario>> {
    let ranges = CoefficientRanges::default().shrink(0.5);
    (0..count as u64)
        .map(|i| model::sample_scenario(&mut stream(cfg.scenario_seed, Purpose::Riccati, i, 0), &ranges, cfg.dims))
        .collect()
}

/// Compare the trained follower, with the leader switched off, against the
/// Riccati reference on constant-coefficient scenarios.
pub fn riccati_comparison(bundle: &NetworkBundle, cfg: &DfpsConfig, count: usize) -> Result<RiccatiReport> {
    let grid = cfg.grid()?;
    let n = cfg.dims.n;
    let mean = vec![0.0; n];
    let cov = Mat::identity(n).scale(cfg.x0_var);
    let zeros = Mat::zeros(grid.steps, cfg.dims.m2);
    let mut cases = Vec::new();
    for (index, sc) in constant_scenarios(cfg, count)?.into_iter().enumerate() {
        let xi = bundle.context(&sc.context());
        let noise = Noise::sample(cfg.scenario_seed, Purpose::Riccati, index as u64, cfg.eval_paths, n, &grid, cfg.x0_var);
        let spec = PlaySpec::new(FollowerPlay::Network, LeaderPlay::Exogenous(&zeros), MeanField::Batch);
        let batch = dfps::play(bundle, &sc, &xi, &grid, &noise, spec)?;
        let costs = model::path_costs(Player::Follower, &batch, &sc, &grid);
        let j1_dfps = costs.iter().sum::<f64>() / costs.len() as f64;
        let pr = LqProblem::follower(&sc, true);
        let j1_riccati = riccati::riccati_reference_cost(&riccati::solve_mf_riccati(&pr, &grid)?, &mean, &cov);
        let j1_oracle = riccati::discrete_lqr_oracle(&pr, &grid)?.cost(&mean, &cov);
        let plain = LqProblem::follower(&sc, false);
        let j1_riccati_plain = riccati::riccati_reference_cost(&riccati::solve_mf_riccati(&plain, &grid)?, &mean, &cov);
        cases.push(RiccatiCase {
            index,
            j1_dfps,
            j1_dfps_se: dfps::standard_error(&costs),
            j1_riccati,
            j1_oracle,
            j1_riccati_plain,
            rel_error: (j1_dfps - j1_riccati) / j1_riccati.abs().max(1e-300),
            scenario: sc,
        });
    }
    let k = cases.len().max(1) as f64;
    Ok(RiccatiReport {
        mean_abs_rel_error: cases.iter().map(|c| c.rel_error.abs()).sum::<f64>() / k,
        mean_rel_error: cases.iter().map(|c| c.rel_error).sum::<f64>() / k,
        cases,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: Vec<RunSummary>,
    /// Over the runs that produced finite costs.
    pub j1: Stat,
    pub j2: Stat,
    pub diverged: usize,
}

impl VariantSummary {
    fn new(variant: Variant, runs: Vec<RunSummary>) -> Self {
        let j1: Vec<f64> = runs.iter().filter_map(|r| r.j1).collect();
        let j2: Vec<f64> = runs.iter().filter_map(|r| r.j2).collect();
        VariantSummary {
            variant,
            j1: Stat::of(&j1),
            j2: Stat::of(&j2),
            diverged: runs.iter().filter(|r| r.diverged).count(),
            runs,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: DfpsConfig,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    /// Relative change of the mean costs of `v` against the full method.
    pub fn relative_change(&self, v: Variant) -> Option<(f64, f64)> {
        let full = self.variant(Variant::Full)?;
        let other = self.variant(v)?;
        if full.j1.count == 0 || other.j1.count == 0 {
            return None;
        }
        Some((
            (other.j1.mean - full.j1.mean) / full.j1.mean.abs(),
            (other.j2.mean - full.j2.mean) / full.j2.mean.abs(),
        ))
    }
}

/// Train every variant on `seeds`. Runs of the full method already trained
/// with the same config and pool may be passed in `reuse`. A run that fails
/// with an error counts as diverged.
pub fn ablation_suite(cfg: &DfpsConfig, pool: &[Scenario], seeds: &[u64], reuse: &[DfpsRun]) -> AblationReport {
    let mut variants = Vec::new();
    for v in Variant::ALL {
        let c = DfpsConfig { variant: v, ..cfg.clone() };
        let todo: Vec<u64> = seeds
            .iter()
            .copied()
            .filter(|s| !(v == Variant::Full && reuse.iter().any(|r| r.config.seed == *s && r.config.variant == v)))
            .collect();
        let trained = train_seeds(&c, pool, &todo);
        let mut runs = Vec::new();
        for &seed in seeds {
            if let Some(r) = reuse.iter().find(|r| r.config.seed == seed && r.config.variant == v) {
                runs.push(summarize(r));
                continue;
            }
            let i = todo.iter().position(|s| *s == seed).unwrap();
            runs.push(match &trained[i] {
                Ok(run) => summarize(run),
                Err(e) => RunSummary::failed(v, seed, e.to_string()),
            });
        }
        variants.push(VariantSummary::new(v, runs));
    }
    AblationReport { config: cfg.clone(), variants }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviationCurve {
    pub player: Player,
    pub eps: Vec<f64>,
    /// Relative cost increment `(J(eps) - J*) / |J*|` averaged over seeds and
    /// directions.
    pub mean_rel_delta: Vec<f64>,
    /// Smallest and largest relative increment over seeds and directions.
    pub min_rel_delta: Vec<f64>,
    pub max_rel_delta: Vec<f64>,
    /// Coefficients of the quadratic fit of the averaged curve, ascending.
    pub quadratic: Vec<f64>,
    pub r2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviationReport {
    pub seeds: usize,
    pub directions: usize,
    pub paths: usize,
    pub curves: Vec<DeviationCurve>,
    /// Whether every leader deviation changed the follower's realized control.
    pub follower_recomputed: bool,
}

/// Random open-loop direction `steps x m` with unit `dt`-weighted norm.
pub fn unit_direction(seed: u64, a: u64, b: u64, steps: usize, m: usize, dt: f64) -> Mat {
    let mut rng = stream(seed, Purpose::Deviation, a, b);
    let mut d = Mat::zeros(steps, m);
    d.data.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
    let norm = alm::rms_dt_norm(std::slice::from_ref(&d), dt);
    d.scale(1.0 / norm)
}

/// Unilateral deviations from the trained equilibrium. Leader deviations are
/// applied before the follower network reacts; follower deviations leave the
/// leader law unchanged. Each seed uses one evaluation scenario and a fixed
/// set of paths for every perturbation (common random numbers).
pub fn deviation_test(
    bundle: &NetworkBundle,
    cfg: &DfpsConfig,
    pool: &[Scenario],
    seeds: usize,
    directions: usize,
    eps: &[f64],
    paths: usize,
) -> Result<DeviationReport> {
    let grid = cfg.grid()?;
    let dt = grid.dt();
    let count = cfg.eval_scenarios.min(pool.len()).max(1);
    // rel[player][eps] collects one value per (seed, direction).
    let mut rel = vec![vec![Vec::new(); eps.len()]; 2];
    let mut follower_recomputed = true;
    for s in 0..seeds {
        let idx = s % count;
        let sc = &pool[idx];
        let xi = bundle.context(&sc.context());
        let noise = Noise::sample(cfg.scenario_seed, Purpose::Deviation, s as u64, paths, cfg.dims.n, &grid, cfg.x0_var);
        let agg = dfps::eval_leader_coeffs(bundle, cfg.variant, sc, &xi, &grid, &noise)?;
        let base = dfps::simulate_equilibrium(bundle, sc, &grid, &noise, &agg, [None, None])?;
        let j_star = [base.cost(Player::Follower), base.cost(Player::Leader)];
        for d in 0..directions {
            for p in [Player::Follower, Player::Leader] {
                let i = p.index();
                let dir = unit_direction(cfg.seed, s as u64, (d * 2 + i) as u64, grid.steps, cfg.dims.control_dim(p), dt);
                for (e, &eps_v) in eps.iter().enumerate() {
                    if eps_v == 0.0 {
                        rel[i][e].push(0.0);
                        continue;
                    }
                    let dev = dir.scale(eps_v);
                    let mut devs = [None, None];
                    devs[i] = Some(&dev);
                    let eq = dfps::simulate_equilibrium(bundle, sc, &grid, &noise, &agg, devs)?;
                    if p == Player::Leader && eq.batch.u1.iter().zip(&base.batch.u1).all(|(a, b)| a == b) {
                        follower_recomputed = false;
                    }
                    rel[i][e].push((eq.cost(p) - j_star[i]) / j_star[i].abs().max(1e-300));
                }
            }
        }
    }
    let curves = [Player::Follower, Player::Leader]
        .into_iter()
        .map(|p| {
            let r = &rel[p.index()];
            let mean: Vec<f64> = r.iter().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64).collect();
            let (quadratic, r2) = fit_poly(eps, &mean, 2).unwrap_or((vec![], 0.0));
            DeviationCurve {
                player: p,
                eps: eps.to_vec(),
                min_rel_delta: r.iter().map(|v| v.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
                max_rel_delta: r.iter().map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect(),
                mean_rel_delta: mean,
                quadratic,
                r2,
            }
        })
        .collect();
    Ok(DeviationReport {
        seeds,
        directions,
        paths,
        curves,
        follower_recomputed,
    })
}

/// The `eps` grid `-2, -1.5, ..., 2`.
pub fn default_eps_grid() -> Vec<f64> {
    (0..=8).map(|i| -2.0 + 0.5 * i as f64).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: Regime,
    pub volatility: f64,
    /// Over replicates.
    pub j1: Stat,
    pub j2: Stat,
    /// Path-level Monte Carlo standard errors pooled over replicates.
    pub j1_se: f64,
    pub j2_se: f64,
    /// Per time step, the 5/25/50/75/95% quantiles of the first state component.
    pub fan: Vec<[f64; 5]>,
    /// Per step, the mean follower control averaged over replicates.
    pub mean_u1: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinanceReport {
    pub config: DfpsConfig,
    pub replicates: usize,
    pub training: RunSummary,
    pub regimes: Vec<RegimeResult>,
}

impl FinanceReport {
    pub fn regime(&self, r: Regime) -> Option<&RegimeResult> {
        self.regimes.iter().find(|x| x.regime == r)
    }

    /// `(J1_r - J1_det) / sqrt(se_r^2 + se_det^2)` for a stochastic regime.
    pub fn gap_in_standard_errors(&self, r: Regime) -> Option<f64> {
        let det = self.regime(Regime::Deterministic)?;
        let x = self.regime(r)?;
        Some((x.j1.mean - det.j1.mean) / (x.j1_se.powi(2) + det.j1_se.powi(2)).sqrt().max(1e-300))
    }

    /// Largest pairwise difference of the mean leader costs and the largest
    /// replicate standard deviation.
    pub fn leader_spread(&self) -> (f64, f64) {
        let mut diff: f64 = 0.0;
        for a in &self.regimes {
            for b in &self.regimes {
                diff = diff.max((a.j2.mean - b.j2.mean).abs());
            }
        }
        (diff, self.regimes.iter().map(|r| r.j2.std).fold(0.0, f64::max))
    }
}

/// The config of the portfolio study: two states, scalar controls.
pub fn finance_config(base: &DfpsConfig) -> DfpsConfig {
    DfpsConfig {
        dims: Dims { n: 2, m1: 1, m2: 1 },
        ..base.clone()
    }
}

/// Training pool cycling through the regimes.
pub fn finance_pool(cfg: &DfpsConfig) -> Vec<Scenario> {
    (0..cfg.scenarios)
        .map(|b| {
            model::financial_scenario(
                Regime::ALL[b % Regime::ALL.len()],
                &mut stream(cfg.scenario_seed, Purpose::Finance, b as u64, 0),
            )
        })
        .collect()
}

/// The fixed evaluation instance of a regime: the first draw of its own stream.
pub fn regime_instance(cfg: &DfpsConfig, regime: Regime) -> Scenario {
    let r = Regime::ALL.iter().position(|x| *x == regime).unwrap() as u64;
    model::financial_scenario(regime, &mut stream(cfg.scenario_seed, Purpose::Finance, 10_000 + r, 0))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Evaluate a trained portfolio model on each regime's fixed instance.
pub fn finance_evaluation(bundle: &NetworkBundle, cfg: &DfpsConfig, replicates: usize) -> Result<Vec<RegimeResult>> {
    let grid = cfg.grid()?;
    let mut out = Vec::new();
    for (r, regime) in Regime::ALL.into_iter().enumerate() {
        let sc = regime_instance(cfg, regime);
        let xi = bundle.context(&sc.context());
        let mut j = [Vec::new(), Vec::new()];
        let mut all = [Vec::new(), Vec::new()];
        let mut states: Vec<Vec<f64>> = vec![Vec::new(); grid.steps + 1];
        let mut mean_u1 = vec![0.0; grid.steps];
        for rep in 0..replicates {
            let noise = Noise::sample(
                cfg.scenario_seed,
                Purpose::Finance,
                (20_000 + r * 1_000 + rep) as u64,
                cfg.eval_paths,
                sc.dims.n,
                &grid,
                cfg.x0_var,
            );
            let agg = dfps::eval_leader_coeffs(bundle, cfg.variant, &sc, &xi, &grid, &noise)?;
            let eq = dfps::simulate_equilibrium(bundle, &sc, &grid, &noise, &agg, [None, None])?;
            for p in [Player::Follower, Player::Leader] {
                j[p.index()].push(eq.cost(p));
                all[p.index()].extend_from_slice(&eq.path_costs[p.index()]);
            }
            for (k, x) in eq.batch.x.iter().enumerate() {
                states[k].extend((0..x.rows).map(|row| x.row(row)[0]));
            }
            for (k, m) in mean_u1.iter_mut().enumerate() {
                *m += eq.batch.u1bar.row(k)[0] / replicates as f64;
            }
        }
        let fan = states
            .into_iter()
            .map(|mut v| {
                v.sort_by(f64::total_cmp);
                [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&v, q))
            })
            .collect();
        out.push(RegimeResult {
            regime,
            volatility: sc.sigma[0],
            j1: Stat::of(&j[0]),
            j2: Stat::of(&j[1]),
            j1_se: dfps::standard_error(&all[0]),
            j2_se: dfps::standard_error(&all[1]),
            fan,
            mean_u1,
        });
    }
    Ok(out)
}

/// Train on the mixed-regime pool and evaluate every regime.
pub fn financial_study(base: &DfpsConfig, replicates: usize) -> Result<(FinanceReport, DfpsRun)> {
    let cfg = finance_config(base);
    let pool = finance_pool(&cfg);
    let run = dfps::run_dfps(&cfg, &pool)?;
    let regimes = finance_evaluation(&run.bundle, &cfg, replicates)?;
    Ok((
        FinanceReport {
            config: cfg,
            replicates,
            training: summarize(&run),
            regimes,
        },
        run,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub parameters: usize,
    /// `log10(G^n)` for the grid size `G`.
    pub grid_log10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub grid_points: usize,
    pub points: Vec<ScalingPoint>,
    /// Fitted `parameters ~ c n^exponent`.
    pub exponent: f64,
    pub r2: f64,
}

/// Parameter counts of the network bundle against state dimension with
/// scalar controls; no training.
pub fn scaling_profile(ns: &[usize], grid_points: usize) -> Result<ScalingReport> {
    if ns.len() < 3 || ns.contains(&0) {
        return Err(DfpsError::Config("the scaling profile needs at least three positive state dimensions".into()));
    }
    let points: Vec<ScalingPoint> = ns
        .iter()
        .map(|&n| ScalingPoint {
            n,
            parameters: parameter_count(Dims { n, m1: 1, m2: 1 }),
            grid_log10: n as f64 * (grid_points as f64).log10(),
        })
        .collect();
    let lx: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| (p.parameters as f64).ln()).collect();
    let (_, exponent, r2) = fit_line(&lx, &ly).ok_or_else(|| DfpsError::Config("scaling fit failed".into()))?;
    Ok(ScalingReport {
        grid_points,
        points,
        exponent,
        r2,
    })
}
