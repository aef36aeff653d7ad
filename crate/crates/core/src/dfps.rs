//! The three-stage training loop and the evaluation of a trained solution.
//!
//! Stage I trains the follower against exploratory open-loop leader
//! controls. Stage II linearizes the trained follower into an affine
//! response. Stage III trains the leader against that frozen response. Each
//! training stage is a Picard loop of block-coordinate updates: adjoint
//! network, macro network, multipliers, penalties.

use log::{debug, info};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::alm::{self, AlmState, BoundCheck, Channel};
use crate::error::{DfpsError, Result};
use crate::fbsde::{self, AdjointPaths, AggregatedLeaderCoeffs, ResponseSensitivities};
use crate::linalg::Mat;
use crate::mlp::Mlp;
use crate::model::{self, CoefficientRanges, Dims, MeanField, Noise, PathBatch, Player, Scenario, TimeGrid};
use crate::networks::{repeat_rows, ContextNorm, NetworkBundle};
use crate::rng::{stream, Purpose};
use crate::rollout::{self, DualTarget, EnvInput, FollowerSide, Frozen, LeaderSide, LossWeights, MacroTarget};
use crate::tape::{Tape, Var};

/// Training variant; everything but `Full` is an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// The leader ignores the follower's reaction to its control.
    NoBilevel,
    /// Both players trained simultaneously in one loop, no exploration, no
    /// response extraction.
    Naive,
    /// Multipliers and penalties removed, macro networks frozen after the
    /// warm start.
    NoAlm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoBilevel, Variant::Naive, Variant::NoAlm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBilevel => "no-bilevel",
            Variant::Naive => "naive",
            Variant::NoAlm => "no-alm",
        }
    }
}

/// Everything that determines a run besides the scenario pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfpsConfig {
    pub dims: Dims,
    pub horizon: f64,
    /// Time steps `N`.
    pub steps: usize,
    /// Paths per scenario `M`.
    pub paths: usize,
    /// Training scenarios `B`, each paired with one exploratory leader control.
    pub scenarios: usize,
    /// Scenarios per Picard iteration, cycled through the pool.
    pub minibatch: usize,
    /// Maximum Picard iterations `P` per stage.
    pub picard: usize,
    pub eps_tol: f64,
    /// Adam steps on the adjoint network per iteration (`N_A`).
    pub adjoint_steps: usize,
    /// Adam steps on the macro network per iteration (`N_B`).
    pub macro_steps: usize,
    /// Adam steps on the multiplier networks per dual update (`N_C`).
    pub lambda_steps: usize,
    pub warmstart_steps: usize,
    pub terminal_weight: f64,
    /// Standard deviation of the exploratory control levels.
    pub explore_std: f64,
    /// Number of constant pieces of an exploratory control.
    pub explore_pieces: usize,
    /// Variance of the initial state, per coordinate.
    pub x0_var: f64,
    pub eval_scenarios: usize,
    pub eval_paths: usize,
    pub rho_u: f64,
    pub rho_x: f64,
    pub eta: f64,
    pub penalty_growth: f64,
    pub adam: AdamConfig,
    /// Joint leader-follower refinement after Stage III; accepted but never
    /// run.
    pub joint_refinement: bool,
    pub variant: Variant,
    /// Drives network initialization, training noise and exploration.
    pub seed: u64,
    /// Drives the scenario pool and the evaluation noise, so that runs with
    /// different `seed` are compared on the same scenarios and paths.
    pub scenario_seed: u64,
}

impl DfpsConfig {
    /// Full-size settings: `N = 100`, `M = 64`, `B = 48`, `P = 20`.
    pub fn paper() -> Self {
        DfpsConfig {
            dims: Dims { n: 1, m1: 1, m2: 1 },
            horizon: 1.0,
            steps: 100,
            paths: 64,
            scenarios: 48,
            minibatch: 8,
            picard: 20,
            eps_tol: 0.02,
            adjoint_steps: 600,
            macro_steps: 600,
            lambda_steps: 50,
            warmstart_steps: 500,
            terminal_weight: 10.0,
            explore_std: 0.5,
            explore_pieces: 10,
            x0_var: 0.1,
            eval_scenarios: 16,
            eval_paths: 512,
            rho_u: 0.05,
            rho_x: 0.10,
            eta: 1.0,
            penalty_growth: 1.1,
            adam: AdamConfig::default(),
            joint_refinement: false,
            variant: Variant::Full,
            seed: 0,
            scenario_seed: 0,
        }
    }

    /// Reduced budgets that finish in minutes on one core.
    pub fn smoke() -> Self {
        DfpsConfig {
            steps: 40,
            paths: 32,
            scenarios: 16,
            minibatch: 4,
            picard: 8,
            adjoint_steps: 200,
            macro_steps: 200,
            lambda_steps: 20,
            warmstart_steps: 200,
            eval_scenarios: 8,
            eval_paths: 256,
            ..DfpsConfig::paper()
        }
    }

    /// About a minute per run on one core; used by the acceptance suite,
    /// which trains a few dozen models.
    pub fn desk() -> Self {
        DfpsConfig {
            steps: 20,
            paths: 16,
            picard: 6,
            adjoint_steps: 150,
            macro_steps: 150,
            warmstart_steps: 150,
            ..DfpsConfig::smoke()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            "desk" => Ok(Self::desk()),
            other => Err(DfpsError::Config(format!("unknown profile `{other}` (expected paper, smoke or desk)"))),
        }
    }

    /// Overwrite fields with those of a JSON object; unknown fields are an error.
    pub fn with_json_patch(&self, text: &str) -> Result<Self> {
        let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| DfpsError::Config(e.to_string()))?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(DfpsError::Config("expected a JSON object".into()));
        };
        let mut base = serde_json::to_value(self)?;
        let obj = base.as_object_mut().expect("config serializes to an object");
        for (k, v) in patch {
            if !obj.contains_key(&k) {
                return Err(DfpsError::Config(format!("unknown field `{k}`")));
            }
            obj.insert(k, v);
        }
        serde_json::from_value(base).map_err(|e| DfpsError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("steps", self.steps),
            ("paths", self.paths),
            ("scenarios", self.scenarios),
            ("minibatch", self.minibatch),
            ("picard", self.picard),
            ("explore_pieces", self.explore_pieces),
            ("eval_scenarios", self.eval_scenarios),
            ("eval_paths", self.eval_paths),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DfpsError::Config(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("horizon", self.horizon),
            ("eps_tol", self.eps_tol),
            ("eta", self.eta),
            ("penalty_growth", self.penalty_growth),
            ("adam.lr", self.adam.lr),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(DfpsError::Config(format!("{name} must be positive and finite")));
            }
        }
        for (name, v) in [
            ("terminal_weight", self.terminal_weight),
            ("explore_std", self.explore_std),
            ("x0_var", self.x0_var),
            ("rho_u", self.rho_u),
            ("rho_x", self.rho_x),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DfpsError::Config(format!("{name} must be non-negative and finite")));
            }
        }
        if self.minibatch > self.scenarios {
            return Err(DfpsError::Config("minibatch larger than the scenario pool".into()));
        }
        if self.eval_scenarios > self.scenarios {
            return Err(DfpsError::Config("more evaluation scenarios than training scenarios".into()));
        }
        Dims::new(self.dims.n, self.dims.m1, self.dims.m2).map_err(|e| DfpsError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    /// `B` scenarios drawn from `ranges` with the scenario seed.
    pub fn scenario_pool(&self, ranges: &CoefficientRanges) -> Result<Vec<Scenario>> {
        (0..self.scenarios as u64)
            .map(|i| model::scenario_for(self.scenario_seed, i, ranges, self.dims))
            .collect()
    }

    /// Evaluation noise of pool scenario `index`.
    pub fn eval_noise(&self, index: usize, grid: &TimeGrid) -> Noise {
        Noise::sample(
            self.scenario_seed,
            Purpose::EvalNoise,
            index as u64,
            self.eval_paths,
            self.dims.n,
            grid,
            self.x0_var,
        )
    }

    fn initial_alm(&self) -> AlmState {
        if self.variant == Variant::NoAlm {
            return AlmState::disabled();
        }
        AlmState {
            rho_u: [self.rho_u; 2],
            rho_x: [self.rho_x; 2],
            eta: self.eta,
            tau: self.penalty_growth,
            last: [None; 2],
        }
    }
}

/// `count` open-loop leader controls, each `steps x m2`, piecewise constant
/// over `pieces` equal sub-intervals with i.i.d. `N(0, std^2)` levels.
pub fn exploratory_leader_controls(seed: u64, count: usize, steps: usize, m2: usize, pieces: usize, std: f64) -> Vec<Mat> {
    (0..count)
        .map(|b| {
            let mut rng = stream(seed, Purpose::Exploration, b as u64, 0);
            let levels: Vec<f64> = (0..pieces * m2).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut u = Mat::zeros(steps, m2);
            for k in 0..steps {
                let piece = (k * pieces / steps).min(pieces - 1);
                u.row_mut(k).copy_from_slice(&levels[piece * m2..(piece + 1) * m2]);
            }
            u
        })
        .collect()
}

/// Relative Picard error between consecutive iterates: the larger of the
/// relative change in cost and in mean control.
pub fn picard_error(j_prev: f64, j_cur: f64, ubar_prev: &[Mat], ubar_cur: &[Mat], dt: f64) -> f64 {
    let dj = (j_cur - j_prev).abs() / j_prev.abs().max(1e-8);
    let diff: Vec<Mat> = ubar_cur.iter().zip(ubar_prev).map(|(a, b)| a.sub(b)).collect();
    let du = alm::rms_dt_norm(&diff, dt) / alm::rms_dt_norm(ubar_prev, dt).max(1e-8);
    dj.max(du)
}

/// How the follower acts in a plain simulation.
#[derive(Clone, Copy, Debug)]
pub enum FollowerPlay<'a> {
    Network,
    Affine(&'a ResponseSensitivities),
    Zero,
}

/// How the leader acts in a plain simulation.
#[derive(Clone, Copy, Debug)]
pub enum LeaderPlay<'a> {
    /// Open-loop controls, `steps x m2`.
    Exogenous(&'a Mat),
    /// Stationarity law from the leader adjoint network.
    Law(&'a AggregatedLeaderCoeffs),
    Zero,
}

/// A plain (tape-free) simulation setup.
#[derive(Clone, Copy, Debug)]
pub struct PlaySpec<'a> {
    pub follower: FollowerPlay<'a>,
    pub leader: LeaderPlay<'a>,
    pub mean_field: MeanField<'a>,
    /// Open-loop control perturbations `steps x m_i` added after each law.
    /// The leader's is added before the follower reacts.
    pub deviation: [Option<&'a Mat>; 2],
}

impl<'a> PlaySpec<'a> {
    pub fn new(follower: FollowerPlay<'a>, leader: LeaderPlay<'a>, mean_field: MeanField<'a>) -> Self {
        PlaySpec {
            follower,
            leader,
            mean_field,
            deviation: [None, None],
        }
    }
}

fn add_row(m: &mut Mat, row: &[f64]) {
    for r in 0..m.rows {
        m.row_mut(r).iter_mut().zip(row).for_each(|(v, c)| *v += c);
    }
}

/// Simulate one scenario under `spec`; `xi` is the standardized context.
pub fn play(bundle: &NetworkBundle, sc: &Scenario, xi: &[f64], grid: &TimeGrid, noise: &Noise, spec: PlaySpec<'_>) -> Result<PathBatch> {
    let Dims { m1, m2, .. } = sc.dims;
    let taus = rollout::grid_taus(grid);
    let lam1 = match spec.follower {
        FollowerPlay::Network => Some(bundle.follower_lambda.u.eval(&taus, xi)?),
        _ => None,
    };
    let lam2 = match spec.leader {
        LeaderPlay::Law(_) => Some(bundle.leader_lambda.u.eval(&taus, xi)?),
        _ => None,
    };
    model::simulate_paths(sc, grid, noise, spec.mean_field, |k, x, _| {
        let rows = x.rows;
        let tau = grid.tau(k);
        let mut u2 = match spec.leader {
            LeaderPlay::Exogenous(u) => repeat_rows(u.row(k), rows),
            LeaderPlay::Zero => Mat::zeros(rows, m2),
            LeaderPlay::Law(agg) => {
                let (y, z) = bundle.leader_adjoint.eval(tau, x, xi, None)?;
                let lam = Mat::row_vec(lam2.as_ref().unwrap().row(k));
                fbsde::leader_control(&y, &z, &lam, agg, sc, k)?
            }
        };
        if let Some(d) = spec.deviation[1] {
            add_row(&mut u2, d.row(k));
        }
        let mut u1 = match spec.follower {
            FollowerPlay::Zero => Mat::zeros(rows, m1),
            FollowerPlay::Affine(s) => s.respond(k, x, &u2),
            FollowerPlay::Network => {
                let (y, z) = bundle.follower_adjoint.eval(tau, x, xi, Some(&u2))?;
                let lam = Mat::row_vec(lam1.as_ref().unwrap().row(k));
                fbsde::follower_control(&y, &z, &lam, sc)?
            }
        };
        if let Some(d) = spec.deviation[0] {
            add_row(&mut u1, d.row(k));
        }
        Ok((u1, u2))
    })
}

/// Adjoint network outputs along simulated paths: `steps + 1` values of `Y`
/// and `steps` of `Z`. The follower network sees the leader control of the
/// last step at the terminal time.
pub fn adjoint_trace(bundle: &NetworkBundle, player: Player, xi: &[f64], grid: &TimeGrid, batch: &PathBatch) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let steps = grid.steps;
    let net = bundle.adjoint(player);
    let mut ys = Vec::with_capacity(steps + 1);
    let mut zs = Vec::with_capacity(steps);
    for k in 0..=steps {
        let control = match player {
            Player::Follower => Some(&batch.u2[k.min(steps - 1)]),
            Player::Leader => None,
        };
        let (y, z) = net.eval(grid.tau(k), &batch.x[k], xi, control)?;
        ys.push(y);
        if k < steps {
            zs.push(z);
        }
    }
    Ok((ys, zs))
}

/// A follower policy that can be linearized.
pub trait FollowerResponse {
    /// Controls for all rows of `x` at step `k`.
    fn controls(&self, k: usize, x: &Mat, u2: &Mat) -> Result<Mat>;
    /// Tape version; row `r` is at step `ks[r]`.
    fn controls_tape(&self, tape: &mut Tape, ks: &[usize], x: Var, u2: Var) -> Result<Var>;
}

/// The trained follower: adjoint network plus stationarity law.
pub struct NetworkResponse<'a> {
    pub bundle: &'a NetworkBundle,
    pub sc: &'a Scenario,
    pub xi: &'a [f64],
    pub grid: TimeGrid,
    /// `steps x m1`.
    pub lambda_u: Mat,
}

impl<'a> NetworkResponse<'a> {
    pub fn new(bundle: &'a NetworkBundle, sc: &'a Scenario, xi: &'a [f64], grid: &TimeGrid) -> Result<Self> {
        let lambda_u = bundle.follower_lambda.u.eval(&rollout::grid_taus(grid), xi)?;
        Ok(NetworkResponse {
            bundle,
            sc,
            xi,
            grid: *grid,
            lambda_u,
        })
    }
}

impl FollowerResponse for NetworkResponse<'_> {
    fn controls(&self, k: usize, x: &Mat, u2: &Mat) -> Result<Mat> {
        let (y, z) = self.bundle.follower_adjoint.eval(self.grid.tau(k), x, self.xi, Some(u2))?;
        fbsde::follower_control(&y, &z, &Mat::row_vec(self.lambda_u.row(k)), self.sc)
    }

    fn controls_tape(&self, tape: &mut Tape, ks: &[usize], x: Var, u2: Var) -> Result<Var> {
        let rows = ks.len();
        let taus: Vec<f64> = ks.iter().map(|&k| self.grid.tau(k)).collect();
        let tau = tape.constant(Mat::col(&taus));
        let xi = tape.constant(repeat_rows(self.xi, rows));
        let bound = self.bundle.follower_adjoint.mlp.bind(tape, false);
        let (y, z) = self.bundle.follower_adjoint.eval_rows(&bound, tape, tau, x, xi, Some(u2));
        let r_inv_t = self
            .sc
            .r1
            .inverse()
            .map_err(|_| DfpsError::contract("follower control weight is singular"))?
            .t();
        let wy = tape.constant(self.sc.b1.matmul(&r_inv_t).scale(-1.0));
        let wz = tape.constant(self.sc.d1.matmul(&r_inv_t).scale(-1.0));
        let a = tape.matmul(y, wy);
        let b = tape.matmul(z, wz);
        let ab = tape.add(a, b);
        let mut shift = Mat::zeros(rows, self.sc.dims.m1);
        for (r, &k) in ks.iter().enumerate() {
            let lam = Mat::row_vec(self.lambda_u.row(k)).matmul(&r_inv_t).scale(-1.0);
            shift.row_mut(r).copy_from_slice(&lam.data);
        }
        let s = tape.constant(shift);
        Ok(tape.add(ab, s))
    }
}

/// Batch-averaged Jacobians of `response` along a nominal simulation with
/// zero leader control and batch-mean mean field.
pub fn extract_sensitivities(response: &dyn FollowerResponse, sc: &Scenario, grid: &TimeGrid, noise: &Noise) -> Result<ResponseSensitivities> {
    let Dims { n, m1, m2 } = sc.dims;
    let steps = grid.steps;
    let paths = noise.paths();
    let nominal = model::simulate_paths(sc, grid, noise, MeanField::Batch, |k, x, _| {
        let u2 = Mat::zeros(x.rows, m2);
        Ok((response.controls(k, x, &u2)?, u2))
    })?;
    let rows = steps * paths;
    let mut xs = Mat::zeros(rows, n);
    let mut ks = Vec::with_capacity(rows);
    for k in 0..steps {
        for p in 0..paths {
            xs.row_mut(k * paths + p).copy_from_slice(nominal.x[k].row(p));
            ks.push(k);
        }
    }
    let mut tape = Tape::new();
    let xv = tape.var(xs.clone());
    let uv = tape.var(Mat::zeros(rows, m2));
    let u1 = response.controls_tape(&mut tape, &ks, xv, uv)?;
    let mut m11 = vec![Mat::zeros(m1, n); steps];
    let mut m12 = vec![Mat::zeros(m1, m2); steps];
    for j in 0..m1 {
        let col = tape.slice_cols(u1, j, 1);
        let s = tape.sum(col);
        let grads = tape.backward(s)?;
        let gx = grads.get_or_zeros(xv, rows, n);
        let gu = grads.get_or_zeros(uv, rows, m2);
        for k in 0..steps {
            let block = |g: &Mat, width: usize| {
                let mut acc = vec![0.0; width];
                for p in 0..paths {
                    acc.iter_mut().zip(g.row(k * paths + p)).for_each(|(a, v)| *a += v);
                }
                acc.iter().map(|a| a / paths as f64).collect::<Vec<_>>()
            };
            m11[k].row_mut(j).copy_from_slice(&block(&gx, n));
            m12[k].row_mut(j).copy_from_slice(&block(&gu, m2));
        }
    }
    let u1v = tape.value(u1);
    let mut offset = vec![vec![0.0; m1]; steps];
    for k in 0..steps {
        for p in 0..paths {
            let r = k * paths + p;
            let lin = m11[k].matvec(xs.row(r));
            for j in 0..m1 {
                offset[k][j] += (u1v[(r, j)] - lin[j]) / paths as f64;
            }
        }
    }
    let sens = ResponseSensitivities { m11, m12, offset };
    if !sens.is_finite() {
        return Err(DfpsError::Undefined("non-finite response sensitivities".into()));
    }
    Ok(sens)
}

/// Aggregated leader coefficients that ignore the follower's reaction.
pub fn plain_leader_coeffs(sc: &Scenario, steps: usize) -> AggregatedLeaderCoeffs {
    AggregatedLeaderCoeffs {
        btilde2: vec![sc.b2.clone(); steps],
        dtilde2: vec![sc.d2.clone(); steps],
    }
}

/// Which players a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Follower,
    Leader,
    Joint,
}

impl StageKind {
    pub fn players(self) -> &'static [Player] {
        match self {
            StageKind::Follower => &[Player::Follower],
            StageKind::Leader => &[Player::Leader],
            StageKind::Joint => &[Player::Follower, Player::Leader],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Follower => "stage I (follower)",
            StageKind::Leader => "stage III (leader)",
            StageKind::Joint => "joint",
        }
    }
}

/// Per-iteration record. Quantities of a player not trained in the stage
/// are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub stage: StageKind,
    /// 0 is the state before the first update.
    pub iteration: usize,
    pub j1: f64,
    pub j2: f64,
    pub residual_follower: Option<f64>,
    pub residual_leader: Option<f64>,
    pub delta_t_follower: Option<f64>,
    pub delta_t_leader: Option<f64>,
    pub v_u1: Option<f64>,
    pub v_x1: Option<f64>,
    pub v_u2: Option<f64>,
    pub v_x2: Option<f64>,
    pub rho_u1: f64,
    pub rho_x1: f64,
    pub rho_u2: f64,
    pub rho_x2: f64,
    pub picard_error: Option<f64>,
    /// Channels that received a dual step, as `player/channel`.
    pub dual_steps: Vec<String>,
}

/// Parameter fingerprints of the eight networks, in [`NetworkBundle::mlps`]
/// order.
pub type Fingerprint = Vec<u64>;

pub fn fingerprint(bundle: &NetworkBundle) -> Fingerprint {
    bundle.mlps().iter().map(|(_, m)| mlp_checksum(m)).collect()
}

fn mlp_checksum(m: &Mlp) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in m.tensors() {
        for v in &t.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Network fingerprints at stage boundaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageFingerprints {
    pub after_warmstart: Fingerprint,
    pub after_stage1: Fingerprint,
    pub after_stage3: Fingerprint,
}

/// Final re-simulation of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub index: usize,
    pub j1: f64,
    pub j2: f64,
    /// Monte Carlo standard errors of the path-cost means.
    pub j1_se: f64,
    pub j2_se: f64,
}

/// Final evaluation with batch-mean mean field and frozen networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub j1: f64,
    pub j2: f64,
    pub v_u1: f64,
    pub v_x1: f64,
    pub v_u2: f64,
    pub v_x2: f64,
    pub residual_follower: f64,
    pub residual_leader: f64,
    pub delta_t_follower: Option<f64>,
    pub delta_t_leader: Option<f64>,
    pub scenarios: Vec<ScenarioEval>,
}

impl Evaluation {
    pub fn max_violation(&self) -> f64 {
        self.v_u1.max(self.v_x1).max(self.v_u2).max(self.v_x2)
    }

    pub fn is_finite(&self) -> bool {
        [self.j1, self.j2, self.v_u1, self.v_x1, self.v_u2, self.v_x2].iter().all(|v| v.is_finite())
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct DfpsRun {
    pub config: DfpsConfig,
    pub bundle: NetworkBundle,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub bound_checks: Vec<BoundCheck>,
    pub alm: AlmState,
    pub fingerprints: StageFingerprints,
    /// Network states at stage boundaries, e.g. `("stage1", ..)`.
    pub snapshots: Vec<(String, NetworkBundle)>,
    pub evaluation: Evaluation,
}

/// A training scenario with its fixed noise and exploratory control.
struct Env {
    sc: Scenario,
    xi: Vec<f64>,
    noise: Noise,
    explore: Mat,
}

struct Optimizers {
    adjoint: [Adam; 2],
    macro_: [Adam; 2],
    lambda_u: [Adam; 2],
    lambda_x: [Adam; 2],
}

impl Optimizers {
    fn new(cfg: &AdamConfig, b: &NetworkBundle) -> Self {
        let adam = |m: &Mlp| Adam::new(cfg.clone(), &m.tensors());
        Optimizers {
            adjoint: [adam(&b.follower_adjoint.mlp), adam(&b.leader_adjoint.mlp)],
            macro_: [adam(&b.follower_macro.mlp), adam(&b.leader_macro.mlp)],
            lambda_u: [adam(&b.follower_lambda.u.mlp), adam(&b.leader_lambda.u.mlp)],
            lambda_x: [adam(&b.follower_lambda.x.mlp), adam(&b.leader_lambda.x.mlp)],
        }
    }
}

fn adam_step(opt: &mut Adam, mlp: &mut Mlp, grads: &[Mat], stage: &str, iteration: usize) -> Result<()> {
    let mut params = mlp.tensors_mut();
    opt.step(&mut params, grads).map_err(|e| match e {
        DfpsError::Training { detail, .. } => DfpsError::Training {
            stage: stage.into(),
            iteration,
            detail,
        },
        other => other,
    })
}

fn check_loss(value: f64, stage: &str, iteration: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(DfpsError::Training {
            stage: stage.into(),
            iteration,
            detail: format!("non-finite {what} loss ({value})"),
        })
    }
}

/// Diagnostics of one scenario under training semantics.
struct EnvDiag {
    j: [f64; 2],
    residual: [Option<f64>; 2],
    delta_t: [Option<f64>; 2],
    r_u: [Mat; 2],
    r_x: [Mat; 2],
    ubar: [Mat; 2],
}

struct Trainer<'c> {
    cfg: &'c DfpsConfig,
    grid: TimeGrid,
    bundle: NetworkBundle,
    envs: Vec<Env>,
    alm: AlmState,
    opt: Optimizers,
    sens: Vec<ResponseSensitivities>,
    agg: Vec<AggregatedLeaderCoeffs>,
    records: Vec<DiagnosticsRecord>,
    bound_checks: Vec<BoundCheck>,
}

impl<'c> Trainer<'c> {
    fn new(cfg: &'c DfpsConfig, pool: &[Scenario]) -> Result<Self> {
        let grid = cfg.grid()?;
        let contexts: Vec<Vec<f64>> = pool.iter().map(Scenario::context).collect();
        let mut bundle = NetworkBundle::new(cfg.dims, &mut stream(cfg.seed, Purpose::NetworkInit, 0, 0));
        bundle.context_norm = ContextNorm::fit(&contexts)?;
        let explore = exploratory_leader_controls(cfg.seed, pool.len(), cfg.steps, cfg.dims.m2, cfg.explore_pieces, cfg.explore_std);
        let envs = pool
            .iter()
            .zip(explore)
            .enumerate()
            .map(|(b, (sc, explore))| Env {
                sc: sc.clone(),
                xi: bundle.context(&sc.context()),
                noise: Noise::sample(cfg.seed, Purpose::TrainNoise, b as u64, cfg.paths, cfg.dims.n, &grid, cfg.x0_var),
                explore,
            })
            .collect();
        let opt = Optimizers::new(&cfg.adam, &bundle);
        Ok(Trainer {
            cfg,
            grid,
            bundle,
            envs,
            alm: cfg.initial_alm(),
            opt,
            sens: Vec::new(),
            agg: Vec::new(),
            records: Vec::new(),
            bound_checks: Vec::new(),
        })
    }

    /// Scenarios of adjoint step `step` of Picard iteration `iteration`: the
    /// pool is cycled in consecutive blocks of `minibatch`.
    fn minibatch(&self, iteration: usize, step: usize) -> Vec<usize> {
        let b = self.envs.len();
        let mb = self.cfg.minibatch;
        let g = (iteration - 1) * self.cfg.adjoint_steps + step;
        (0..mb).map(|j| (g * mb + j) % b).collect()
    }

    fn all_envs(&self) -> Vec<usize> {
        (0..self.envs.len()).collect()
    }

    fn mean_player(kind: StageKind) -> Player {
        match kind {
            StageKind::Leader => Player::Leader,
            _ => Player::Follower,
        }
    }

    fn play_spec<'a>(&'a self, kind: StageKind, e: usize, beta: &'a Mat) -> PlaySpec<'a> {
        let env = &self.envs[e];
        let (follower, leader) = match kind {
            StageKind::Follower => (FollowerPlay::Network, LeaderPlay::Exogenous(&env.explore)),
            StageKind::Leader => (FollowerPlay::Affine(&self.sens[e]), LeaderPlay::Law(&self.agg[e])),
            StageKind::Joint => (FollowerPlay::Network, LeaderPlay::Law(&self.agg[e])),
        };
        PlaySpec::new(follower, leader, MeanField::Given(beta))
    }

    fn simulate(&self, kind: StageKind, e: usize, beta: &Mat) -> Result<PathBatch> {
        let env = &self.envs[e];
        play(&self.bundle, &env.sc, &env.xi, &self.grid, &env.noise, self.play_spec(kind, e, beta))
    }

    fn frozen(&self, e: usize) -> Result<[Frozen; 2]> {
        let env = &self.envs[e];
        Ok([
            Frozen::of(&self.bundle, Player::Follower, &env.xi, &self.grid)?,
            Frozen::of(&self.bundle, Player::Leader, &env.xi, &self.grid)?,
        ])
    }

    fn diagnose(&self, kind: StageKind, e: usize) -> Result<EnvDiag> {
        let env = &self.envs[e];
        let frozen = self.frozen(e)?;
        let mp = Self::mean_player(kind);
        let batch = self.simulate(kind, e, &frozen[mp.index()].beta)?;
        let dt = self.grid.dt();
        let j = [
            model::discrete_cost(Player::Follower, &batch, &env.sc, &self.grid),
            model::discrete_cost(Player::Leader, &batch, &env.sc, &self.grid),
        ];
        let mut residual = [None, None];
        let mut delta_t = [None, None];
        for &p in kind.players() {
            let (y, z) = adjoint_trace(&self.bundle, p, &env.xi, &self.grid, &batch)?;
            let paths = AdjointPaths {
                x: &batch.x,
                y: &y,
                z: &z,
                dw: &batch.dw,
                lambda_x: &frozen[p.index()].lambda_x,
            };
            residual[p.index()] = Some(fbsde::bsde_residual(p, &paths, &env.sc, dt, self.cfg.terminal_weight));
            delta_t[p.index()] = fbsde::terminal_mismatch(&y[self.grid.steps], env.sc.weights(p).g, &batch.x[self.grid.steps]).ok();
        }
        let (ru1, rx1) = alm::residuals(&batch.u1bar, &frozen[0].alpha, &batch.xbar, &frozen[0].beta);
        let (ru2, rx2) = alm::residuals(&batch.u2bar, &frozen[1].alpha, &batch.xbar, &frozen[1].beta);
        Ok(EnvDiag {
            j,
            residual,
            delta_t,
            r_u: [ru1, ru2],
            r_x: [rx1, rx2],
            ubar: [batch.u1bar, batch.u2bar],
        })
    }

    /// Record over the whole pool; returns it together with the stacked mean
    /// controls of the trained players for the Picard error.
    fn record(&self, kind: StageKind, iteration: usize, dual_steps: Vec<String>) -> Result<(DiagnosticsRecord, Vec<Mat>, f64)> {
        let set = self.all_envs();
        let diags: Vec<EnvDiag> = set.iter().map(|&e| self.diagnose(kind, e)).collect::<Result<_>>()?;
        let count = diags.len() as f64;
        let mean = |f: &dyn Fn(&EnvDiag) -> f64| diags.iter().map(f).sum::<f64>() / count;
        let mean_opt = |f: &dyn Fn(&EnvDiag) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = diags.iter().map(f).collect();
            vals.map(|v| v.iter().sum::<f64>() / count)
        };
        let dt = self.grid.dt();
        let trained = |p: Player| kind.players().contains(&p);
        let viol = |p: Player, ch: Channel| -> Option<f64> {
            trained(p).then(|| {
                let rs: Vec<Mat> = diags
                    .iter()
                    .map(|d| match ch {
                        Channel::Control => d.r_u[p.index()].clone(),
                        Channel::State => d.r_x[p.index()].clone(),
                    })
                    .collect();
                alm::rms_dt_norm(&rs, dt)
            })
        };
        let j = [mean(&|d| d.j[0]), mean(&|d| d.j[1])];
        let mut ubar = Vec::new();
        for &p in kind.players() {
            ubar.extend(diags.iter().map(|d| d.ubar[p.index()].clone()));
        }
        let objective: f64 = kind.players().iter().map(|p| j[p.index()]).sum();
        let rec = DiagnosticsRecord {
            stage: kind,
            iteration,
            j1: j[0],
            j2: j[1],
            residual_follower: mean_opt(&|d| d.residual[0]),
            residual_leader: mean_opt(&|d| d.residual[1]),
            delta_t_follower: mean_opt(&|d| d.delta_t[0]),
            delta_t_leader: mean_opt(&|d| d.delta_t[1]),
            v_u1: viol(Player::Follower, Channel::Control),
            v_x1: viol(Player::Follower, Channel::State),
            v_u2: viol(Player::Leader, Channel::Control),
            v_x2: viol(Player::Leader, Channel::State),
            rho_u1: self.alm.rho_u[0],
            rho_x1: self.alm.rho_x[0],
            rho_u2: self.alm.rho_u[1],
            rho_x2: self.alm.rho_x[1],
            picard_error: None,
            dual_steps,
        };
        Ok((rec, ubar, objective))
    }

    fn env_inputs<'a>(&'a self, kind: StageKind, set: &[usize], frozen: &'a [[Frozen; 2]]) -> Vec<EnvInput<'a>> {
        let mp = Self::mean_player(kind).index();
        set.iter()
            .zip(frozen)
            .map(|(&e, fr)| {
                let env = &self.envs[e];
                let (follower, leader) = match kind {
                    StageKind::Follower => (FollowerSide::Network, LeaderSide::Exogenous(&env.explore)),
                    StageKind::Leader => (FollowerSide::Affine(&self.sens[e]), LeaderSide::Network(&self.agg[e])),
                    StageKind::Joint => (FollowerSide::Network, LeaderSide::Network(&self.agg[e])),
                };
                EnvInput {
                    sc: &env.sc,
                    xi: &env.xi,
                    noise: &env.noise,
                    mean_source: &fr[mp].beta,
                    follower,
                    leader,
                    frozen: [&fr[0], &fr[1]],
                }
            })
            .collect()
    }

    /// `adjoint_steps` Adam steps on the adjoint networks of the stage.
    fn train_adjoints(&mut self, kind: StageKind, iteration: usize) -> Result<()> {
        let all: Vec<[Frozen; 2]> = (0..self.envs.len()).map(|e| self.frozen(e)).collect::<Result<_>>()?;
        let stage = kind.name();
        for step in 0..self.cfg.adjoint_steps {
            let set = self.minibatch(iteration, step);
            let frozen: Vec<[Frozen; 2]> = set.iter().map(|&e| all[e].clone()).collect();
            let mut tape = Tape::new();
            let bf = match kind {
                StageKind::Follower | StageKind::Joint => Some(self.bundle.follower_adjoint.mlp.bind(&mut tape, true)),
                StageKind::Leader => None,
            };
            let bl = match kind {
                StageKind::Leader | StageKind::Joint => Some(self.bundle.leader_adjoint.mlp.bind(&mut tape, true)),
                StageKind::Follower => None,
            };
            let envs = self.env_inputs(kind, &set, &frozen);
            let ro = rollout::rollout(&mut tape, &self.bundle, [bf.as_ref(), bl.as_ref()], &envs, &self.grid)?;
            let mut grads = Vec::new();
            for &p in kind.players() {
                let i = p.index();
                let w = LossWeights {
                    rho_u: self.alm.rho_u[i],
                    rho_x: self.alm.rho_x[i],
                    terminal_weight: self.cfg.terminal_weight,
                };
                let loss = rollout::player_loss(&mut tape, &ro, &envs, &self.grid, p, w)?;
                let value = tape.scalar(loss.total);
                check_loss(value, stage, iteration, "adjoint")?;
                if step == 0 || step + 1 == self.cfg.adjoint_steps {
                    debug!(
                        "{stage} it {iteration} step {step} {p:?}: loss {value:.5e} cost {:.5e} residual {:.5e}",
                        tape.scalar(loss.cost),
                        tape.scalar(loss.residual)
                    );
                }
                let g = tape.backward(loss.total)?;
                let bound = if p == Player::Follower { bf.as_ref() } else { bl.as_ref() };
                grads.push((p, bound.unwrap().grads(&tape, &g)));
            }
            drop(envs);
            for (p, g) in grads {
                let i = p.index();
                adam_step(&mut self.opt.adjoint[i], &mut self.bundle.adjoint_mut(p).mlp, &g, stage, iteration)?;
            }
        }
        Ok(())
    }

    /// Fit the macro network of `player` to the given empirical means.
    fn fit_macro(&mut self, player: Player, targets: &[(usize, Mat, Mat)], steps: usize, stage: &str, iteration: usize) -> Result<()> {
        let i = player.index();
        let control_dim = self.cfg.dims.control_dim(player);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let bound = self.bundle.macro_net(player).mlp.bind(&mut tape, true);
            let ts: Vec<MacroTarget<'_>> = targets
                .iter()
                .map(|(e, u, x)| MacroTarget {
                    xi: &self.envs[*e].xi,
                    ubar: u,
                    xbar: x,
                })
                .collect();
            let loss = rollout::macro_loss(&mut tape, &bound, control_dim, &ts, &self.grid)?;
            check_loss(tape.scalar(loss), stage, iteration, "macro")?;
            let g = tape.backward(loss)?;
            let grads = bound.grads(&tape, &g);
            drop(ts);
            adam_step(&mut self.opt.macro_[i], &mut self.bundle.macro_net_mut(player).mlp, &grads, stage, iteration)?;
        }
        Ok(())
    }

    /// Fit macro networks to simulations under zero controls (follower) or
    /// zero leader control against the frozen response (leader).
    fn warm_start(&mut self, player: Player) -> Result<()> {
        let mut targets = Vec::with_capacity(self.envs.len());
        for e in 0..self.envs.len() {
            let env = &self.envs[e];
            let follower = match player {
                Player::Leader if !self.sens.is_empty() => FollowerPlay::Affine(&self.sens[e]),
                _ => FollowerPlay::Zero,
            };
            let spec = PlaySpec::new(follower, LeaderPlay::Zero, MeanField::Batch);
            let batch = play(&self.bundle, &env.sc, &env.xi, &self.grid, &env.noise, spec)?;
            targets.push((e, batch.control_mean(player).clone(), alm::head_rows(&batch.xbar, self.grid.steps)));
        }
        self.fit_macro(player, &targets, self.cfg.warmstart_steps, "warm start", 0)
    }

    /// Dual step on one channel's multiplier network when its violation is
    /// above tolerance; logs the feasibility bound either way.
    fn dual_update(&mut self, player: Player, channel: Channel, set: &[usize], viol: &[Mat], active: bool, iteration: usize) -> Result<()> {
        let i = player.index();
        let taus = rollout::grid_taus(&self.grid);
        let eval = |b: &NetworkBundle, e: usize| -> Result<Mat> {
            let lam = b.lambdas(player);
            let net = match channel {
                Channel::Control => &lam.u,
                Channel::State => &lam.x,
            };
            net.eval(&taus, &self.envs[e].xi)
        };
        let before: Vec<Mat> = set.iter().map(|&e| eval(&self.bundle, e)).collect::<Result<_>>()?;
        if active {
            let stage = "dual";
            for _ in 0..self.cfg.lambda_steps {
                let mut tape = Tape::new();
                let lam = self.bundle.lambdas(player);
                let net = match channel {
                    Channel::Control => &lam.u,
                    Channel::State => &lam.x,
                };
                let bound = net.mlp.bind(&mut tape, true);
                let ts: Vec<DualTarget<'_>> = set
                    .iter()
                    .zip(viol)
                    .zip(&before)
                    .map(|((&e, v), prev)| DualTarget {
                        xi: &self.envs[e].xi,
                        viol: v,
                        lambda_prev: prev,
                    })
                    .collect();
                let loss = rollout::dual_loss(&mut tape, &bound, &ts, self.alm.eta, &self.grid)?;
                check_loss(tape.scalar(loss), stage, iteration, "dual")?;
                let g = tape.backward(loss)?;
                let grads = bound.grads(&tape, &g);
                drop(ts);
                let lam = self.bundle.lambdas_mut(player);
                let (opt, mlp) = match channel {
                    Channel::Control => (&mut self.opt.lambda_u[i], &mut lam.u.mlp),
                    Channel::State => (&mut self.opt.lambda_x[i], &mut lam.x.mlp),
                };
                adam_step(opt, mlp, &grads, stage, iteration)?;
            }
        }
        let after: Vec<Mat> = set.iter().map(|&e| eval(&self.bundle, e)).collect::<Result<_>>()?;
        let rho = match channel {
            Channel::Control => self.alm.rho_u[i],
            Channel::State => self.alm.rho_x[i],
        };
        self.bound_checks.push(BoundCheck::measure(
            player,
            channel,
            iteration,
            &before,
            &after,
            viol,
            rho,
            self.alm.eta,
            self.grid.dt(),
        ));
        Ok(())
    }

    fn run_stage(&mut self, kind: StageKind) -> Result<()> {
        let alm_on = self.cfg.variant != Variant::NoAlm;
        let dt = self.grid.dt();
        let (mut rec, mut prev_ubar, mut prev_obj) = self.record(kind, 0, Vec::new())?;
        info!("{} start: J1 {:.4} J2 {:.4}", kind.name(), rec.j1, rec.j2);
        self.records.push(rec.clone());
        for iteration in 1..=self.cfg.picard {
            self.train_adjoints(kind, iteration)?;
            let set = self.all_envs();

            if alm_on {
                let mut targets: [Vec<(usize, Mat, Mat)>; 2] = [Vec::new(), Vec::new()];
                for &e in &set {
                    let frozen = self.frozen(e)?;
                    let beta = &frozen[Self::mean_player(kind).index()].beta;
                    let batch = self.simulate(kind, e, beta)?;
                    for &p in kind.players() {
                        targets[p.index()].push((e, batch.control_mean(p).clone(), alm::head_rows(&batch.xbar, self.grid.steps)));
                    }
                }
                for &p in kind.players() {
                    self.fit_macro(p, &targets[p.index()], self.cfg.macro_steps, kind.name(), iteration)?;
                }
            }

            let mut dual_steps = Vec::new();
            if alm_on {
                let mut r_u: [Vec<Mat>; 2] = [Vec::new(), Vec::new()];
                let mut r_x: [Vec<Mat>; 2] = [Vec::new(), Vec::new()];
                for &e in &set {
                    let frozen = self.frozen(e)?;
                    let beta = &frozen[Self::mean_player(kind).index()].beta;
                    let batch = self.simulate(kind, e, beta)?;
                    for &p in kind.players() {
                        let i = p.index();
                        let (ru, rx) = alm::residuals(batch.control_mean(p), &frozen[i].alpha, &batch.xbar, &frozen[i].beta);
                        r_u[i].push(ru);
                        r_x[i].push(rx);
                    }
                }
                for &p in kind.players() {
                    let i = p.index();
                    let v_u = alm::rms_dt_norm(&r_u[i], dt);
                    let v_x = alm::rms_dt_norm(&r_x[i], dt);
                    let tag = if p == Player::Follower { "follower" } else { "leader" };
                    let active_u = v_u > self.cfg.eps_tol;
                    let active_x = v_x > self.cfg.eps_tol;
                    self.dual_update(p, Channel::Control, &set, &r_u[i], active_u, iteration)?;
                    self.dual_update(p, Channel::State, &set, &r_x[i], active_x, iteration)?;
                    if active_u {
                        dual_steps.push(format!("{tag}/control"));
                    }
                    if active_x {
                        dual_steps.push(format!("{tag}/state"));
                    }
                    self.alm.adapt(p, v_u, v_x, self.cfg.eps_tol);
                }
            }

            let (next, ubar, obj) = self.record(kind, iteration, dual_steps)?;
            rec = next;
            let err = picard_error(prev_obj, obj, &prev_ubar, &ubar, dt);
            rec.picard_error = Some(err);
            info!(
                "{} it {iteration}: J1 {:.4} J2 {:.4} res {:?}/{:?} picard {:.3e}",
                kind.name(),
                rec.j1,
                rec.j2,
                rec.residual_follower,
                rec.residual_leader,
                err
            );
            self.records.push(rec.clone());
            prev_ubar = ubar;
            prev_obj = obj;
            if err < self.cfg.eps_tol {
                break;
            }
        }
        Ok(())
    }

    fn extract_all(&mut self, masked: bool) -> Result<()> {
        let mut sens = Vec::with_capacity(self.envs.len());
        for env in &self.envs {
            let resp = NetworkResponse::new(&self.bundle, &env.sc, &env.xi, &self.grid)?;
            let s = extract_sensitivities(&resp, &env.sc, &self.grid, &env.noise)?;
            sens.push(if masked { s.masked() } else { s });
        }
        self.agg = self.envs.iter().zip(&sens).map(|(env, s)| fbsde::aggregate_leader_coeffs(&env.sc, s)).collect();
        self.sens = sens;
        Ok(())
    }
}

/// Run all stages on `pool` and evaluate the result.
pub fn run_dfps(cfg: &DfpsConfig, pool: &[Scenario]) -> Result<DfpsRun> {
    cfg.validate()?;
    if pool.len() != cfg.scenarios {
        return Err(DfpsError::Config(format!(
            "scenario pool has {} entries, config expects {}",
            pool.len(),
            cfg.scenarios
        )));
    }
    for sc in pool {
        if sc.dims != cfg.dims {
            return Err(DfpsError::Config("scenario dimensions differ from the config".into()));
        }
        sc.validate()?;
    }
    let mut t = Trainer::new(cfg, pool)?;
    let mut fingerprints = StageFingerprints::default();
    let mut snapshots = Vec::new();
    match cfg.variant {
        Variant::Naive => {
            t.warm_start(Player::Follower)?;
            t.warm_start(Player::Leader)?;
            t.agg = t.envs.iter().map(|env| plain_leader_coeffs(&env.sc, cfg.steps)).collect();
            fingerprints.after_warmstart = fingerprint(&t.bundle);
            t.run_stage(StageKind::Joint)?;
            fingerprints.after_stage1 = fingerprint(&t.bundle);
            snapshots.push(("joint".to_string(), t.bundle.clone()));
        }
        _ => {
            t.warm_start(Player::Follower)?;
            fingerprints.after_warmstart = fingerprint(&t.bundle);
            t.run_stage(StageKind::Follower)?;
            fingerprints.after_stage1 = fingerprint(&t.bundle);
            snapshots.push(("stage1".to_string(), t.bundle.clone()));
            t.extract_all(cfg.variant == Variant::NoBilevel)?;
            t.warm_start(Player::Leader)?;
            t.run_stage(StageKind::Leader)?;
            snapshots.push(("stage3".to_string(), t.bundle.clone()));
        }
    }
    fingerprints.after_stage3 = fingerprint(&t.bundle);
    if cfg.joint_refinement {
        info!("joint refinement requested; it is not part of this solver and is skipped");
    }
    let evaluation = evaluate(&t.bundle, cfg, pool)?;
    Ok(DfpsRun {
        config: cfg.clone(),
        bundle: t.bundle,
        diagnostics: t.records,
        bound_checks: t.bound_checks,
        alm: t.alm,
        fingerprints,
        snapshots,
        evaluation,
    })
}

/// Leader coefficients used when evaluating a trained solution.
pub fn eval_leader_coeffs(
    bundle: &NetworkBundle,
    variant: Variant,
    sc: &Scenario,
    xi: &[f64],
    grid: &TimeGrid,
    noise: &Noise,
) -> Result<AggregatedLeaderCoeffs> {
    match variant {
        Variant::Full | Variant::NoAlm => {
            let resp = NetworkResponse::new(bundle, sc, xi, grid)?;
            let sens = extract_sensitivities(&resp, sc, grid, noise)?;
            Ok(fbsde::aggregate_leader_coeffs(sc, &sens))
        }
        Variant::NoBilevel | Variant::Naive => Ok(plain_leader_coeffs(sc, grid.steps)),
    }
}

/// Outcome of simulating the trained equilibrium on one scenario.
pub struct Equilibrium {
    pub batch: PathBatch,
    pub path_costs: [Vec<f64>; 2],
}

impl Equilibrium {
    pub fn cost(&self, player: Player) -> f64 {
        let c = &self.path_costs[player.index()];
        c.iter().sum::<f64>() / c.len() as f64
    }

    pub fn standard_error(&self, player: Player) -> f64 {
        standard_error(&self.path_costs[player.index()])
    }
}

pub fn standard_error(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

/// Simulate the trained pair on `sc` with batch-mean mean field: leader law
/// with `agg`, follower network reacting to the realized leader control.
pub fn simulate_equilibrium(
    bundle: &NetworkBundle,
    sc: &Scenario,
    grid: &TimeGrid,
    noise: &Noise,
    agg: &AggregatedLeaderCoeffs,
    deviation: [Option<&Mat>; 2],
) -> Result<Equilibrium> {
    let xi = bundle.context(&sc.context());
    let mut spec = PlaySpec::new(FollowerPlay::Network, LeaderPlay::Law(agg), MeanField::Batch);
    spec.deviation = deviation;
    let batch = play(bundle, sc, &xi, grid, noise, spec)?;
    let path_costs = [
        model::path_costs(Player::Follower, &batch, sc, grid),
        model::path_costs(Player::Leader, &batch, sc, grid),
    ];
    Ok(Equilibrium { batch, path_costs })
}

/// Evaluate on the first `eval_scenarios` of `pool` with fresh noise.
pub fn evaluate(bundle: &NetworkBundle, cfg: &DfpsConfig, pool: &[Scenario]) -> Result<Evaluation> {
    let grid = cfg.grid()?;
    let dt = grid.dt();
    let mut scen = Vec::new();
    let mut r_u: [Vec<Mat>; 2] = [Vec::new(), Vec::new()];
    let mut r_x: [Vec<Mat>; 2] = [Vec::new(), Vec::new()];
    let mut res = [0.0; 2];
    let mut delta: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let count = cfg.eval_scenarios.min(pool.len());
    for (idx, sc) in pool.iter().take(count).enumerate() {
        let xi = bundle.context(&sc.context());
        let noise = cfg.eval_noise(idx, &grid);
        let agg = eval_leader_coeffs(bundle, cfg.variant, sc, &xi, &grid, &noise)?;
        let eq = simulate_equilibrium(bundle, sc, &grid, &noise, &agg, [None, None])?;
        scen.push(ScenarioEval {
            index: idx,
            j1: eq.cost(Player::Follower),
            j2: eq.cost(Player::Leader),
            j1_se: eq.standard_error(Player::Follower),
            j2_se: eq.standard_error(Player::Leader),
        });
        for p in [Player::Follower, Player::Leader] {
            let i = p.index();
            let fr = Frozen::of(bundle, p, &xi, &grid)?;
            let (ru, rx) = alm::residuals(eq.batch.control_mean(p), &fr.alpha, &eq.batch.xbar, &fr.beta);
            r_u[i].push(ru);
            r_x[i].push(rx);
            let (y, z) = adjoint_trace(bundle, p, &xi, &grid, &eq.batch)?;
            let paths = AdjointPaths {
                x: &eq.batch.x,
                y: &y,
                z: &z,
                dw: &eq.batch.dw,
                lambda_x: &fr.lambda_x,
            };
            res[i] += fbsde::bsde_residual(p, &paths, sc, dt, cfg.terminal_weight) / count as f64;
            if let Ok(d) = fbsde::terminal_mismatch(&y[grid.steps], sc.weights(p).g, &eq.batch.x[grid.steps]) {
                delta[i].push(d);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let j1 = scen.iter().map(|s| s.j1).sum::<f64>() / count as f64;
    let j2 = scen.iter().map(|s| s.j2).sum::<f64>() / count as f64;
    Ok(Evaluation {
        j1,
        j2,
        v_u1: alm::rms_dt_norm(&r_u[0], dt),
        v_x1: alm::rms_dt_norm(&r_x[0], dt),
        v_u2: alm::rms_dt_norm(&r_u[1], dt),
        v_x2: alm::rms_dt_norm(&r_x[1], dt),
        residual_follower: res[0],
        residual_leader: res[1],
        delta_t_follower: mean(&delta[0]),
        delta_t_leader: mean(&delta[1]),
        scenarios: scen,
    })
}
