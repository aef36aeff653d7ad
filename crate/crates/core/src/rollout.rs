//! Differentiable simulation of several scenarios at once and the training
//! losses built on it.
//!
//! Rows are grouped by scenario: scenario `e` owns rows `e*M .. (e+1)*M`.
//! Scenario matrices enter through [`Tape::group_linear`], Brownian
//! increments through [`Tape::row_scale`] and per-scenario means through
//! [`Tape::segment_mean`]. Everything that is not trained in the current
//! block (mean-field source, multipliers, the other player) enters as a
//! constant.

use std::sync::Arc;

use crate::error::{DfpsError, Result};
use crate::fbsde::{AggregatedLeaderCoeffs, ResponseSensitivities};
use crate::linalg::Mat;
use crate::mlp::BoundMlp;
use crate::model::{Noise, Player, Scenario, TimeGrid};
use crate::networks::NetworkBundle;
use crate::tape::{Tape, Var};

/// Outputs of one player's macro and multiplier networks on the grid
/// `tau_0 .. tau_{N-1}` for one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    /// `steps x m`.
    pub alpha: Mat,
    /// `steps x n`.
    pub beta: Mat,
    /// `steps x m`.
    pub lambda_u: Mat,
    /// `steps x n`.
    pub lambda_x: Mat,
}

impl Frozen {
    /// Evaluate the networks of `player`; `xi` is the standardized context.
    pub fn of(bundle: &NetworkBundle, player: Player, xi: &[f64], grid: &TimeGrid) -> Result<Frozen> {
        let taus = grid_taus(grid);
        let (alpha, beta) = bundle.macro_net(player).eval(&taus, xi)?;
        let lam = bundle.lambdas(player);
        Ok(Frozen {
            alpha,
            beta,
            lambda_u: lam.u.eval(&taus, xi)?,
            lambda_x: lam.x.eval(&taus, xi)?,
        })
    }
}

/// `tau_k = k / N` for `k < N`.
pub fn grid_taus(grid: &TimeGrid) -> Vec<f64> {
    (0..grid.steps).map(|k| grid.tau(k)).collect()
}

/// How the follower acts inside a rollout.
#[derive(Clone, Copy, Debug)]
pub enum FollowerSide<'a> {
    /// Stationarity law driven by the follower adjoint network.
    Network,
    /// Frozen affine response.
    Affine(&'a ResponseSensitivities),
}

/// How the leader acts inside a rollout.
#[derive(Clone, Copy, Debug)]
pub enum LeaderSide<'a> {
    /// Prescribed open-loop controls, `steps x m2`.
    Exogenous(&'a Mat),
    /// Stationarity law with the given aggregated control matrices.
    Network(&'a AggregatedLeaderCoeffs),
}

/// One scenario of a batched rollout.
#[derive(Clone, Copy, Debug)]
pub struct EnvInput<'a> {
    pub sc: &'a Scenario,
    /// Standardized context.
    pub xi: &'a [f64],
    pub noise: &'a Noise,
    /// Mean state read by the dynamics, `steps x n` or longer.
    pub mean_source: &'a Mat,
    pub follower: FollowerSide<'a>,
    pub leader: LeaderSide<'a>,
    /// Frozen network outputs of follower and leader.
    pub frozen: [&'a Frozen; 2],
}

/// Tape handles of a rollout. `y` has `steps + 1` entries for a player whose
/// adjoint network was evaluated and is empty otherwise; `z` has `steps`.
pub struct Rollout {
    pub x: Vec<Var>,
    pub u: [Vec<Var>; 2],
    pub y: [Vec<Var>; 2],
    pub z: [Vec<Var>; 2],
    pub envs: usize,
    pub paths: usize,
}

impl Rollout {
    pub fn rows(&self) -> usize {
        self.envs * self.paths
    }
}

type Group = Arc<Vec<Mat>>;

fn per_env(envs: &[EnvInput<'_>], f: impl Fn(&EnvInput<'_>) -> Mat) -> Group {
    Arc::new(envs.iter().map(f).collect())
}

/// `steps`-independent row expansion: env `e` contributes `paths` copies of
/// `row(e)`.
fn expand(envs: usize, paths: usize, width: usize, row: impl Fn(usize) -> Vec<f64>) -> Mat {
    let mut m = Mat::zeros(envs * paths, width);
    for e in 0..envs {
        let v = row(e);
        for p in 0..paths {
            m.row_mut(e * paths + p).copy_from_slice(&v);
        }
    }
    m
}

fn inv_t(r: &Mat) -> Result<Mat> {
    Ok(r.inverse().map_err(|_| DfpsError::contract("control weight is singular"))?.t())
}

/// Sum of scalar nodes.
pub fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut it = vars.iter();
    let first = *it.next().expect("sum of no terms");
    it.fold(first, |acc, &v| tape.add(acc, v))
}

/// Simulate all `envs` on one tape. `bound[i]` must be present exactly when
/// player `i` acts through its adjoint network.
pub fn rollout(tape: &mut Tape, bundle: &NetworkBundle, bound: [Option<&BoundMlp>; 2], envs: &[EnvInput<'_>], grid: &TimeGrid) -> Result<Rollout> {
    let Some(first) = envs.first() else {
        return Err(DfpsError::contract("rollout over no scenarios"));
    };
    let dims = bundle.dims;
    let (n, m1, m2) = (dims.n, dims.m1, dims.m2);
    let steps = grid.steps;
    let paths = first.noise.paths();
    let follower_net = matches!(first.follower, FollowerSide::Network);
    let leader_net = matches!(first.leader, LeaderSide::Network(_));
    for e in envs {
        if e.noise.paths() != paths || e.noise.steps() != steps || e.sc.dims != dims || e.mean_source.rows < steps {
            return Err(DfpsError::contract("rollout scenarios disagree in shape"));
        }
        if matches!(e.follower, FollowerSide::Network) != follower_net || matches!(e.leader, LeaderSide::Network(_)) != leader_net {
            return Err(DfpsError::contract("rollout scenarios mix control modes"));
        }
        if let LeaderSide::Exogenous(u) = e.leader {
            if u.rows < steps || u.cols != m2 {
                return Err(DfpsError::contract("exogenous leader control has the wrong shape"));
            }
        }
    }
    if bound[0].is_some() != follower_net || bound[1].is_some() != leader_net {
        return Err(DfpsError::contract("bound networks do not match the control modes"));
    }
    let e_count = envs.len();
    let rows = e_count * paths;
    let dt = grid.dt();

    let drift_x = per_env(envs, |e| Mat::identity(n).add(&e.sc.a1.t().scale(dt)));
    let diff_x = per_env(envs, |e| e.sc.c1.t());
    let drift_u1 = per_env(envs, |e| e.sc.b1.t().scale(dt));
    let diff_u1 = per_env(envs, |e| e.sc.d1.t());
    let drift_u2 = per_env(envs, |e| e.sc.b2.t().scale(dt));
    let diff_u2 = per_env(envs, |e| e.sc.d2.t());
    let r1_inv_t: Vec<Mat> = envs.iter().map(|e| inv_t(&e.sc.r1)).collect::<Result<_>>()?;
    let r2_inv_t: Vec<Mat> = envs.iter().map(|e| inv_t(&e.sc.r2)).collect::<Result<_>>()?;
    let law1_y = Arc::new(envs.iter().zip(&r1_inv_t).map(|(e, ri)| e.sc.b1.matmul(ri).scale(-1.0)).collect::<Vec<_>>());
    let law1_z = Arc::new(envs.iter().zip(&r1_inv_t).map(|(e, ri)| e.sc.d1.matmul(ri).scale(-1.0)).collect::<Vec<_>>());

    let xi_rows = expand(e_count, paths, first.xi.len(), |e| envs[e].xi.to_vec());
    let xiv = tape.constant(xi_rows);
    let mut x0 = Mat::zeros(rows, n);
    for (e, env) in envs.iter().enumerate() {
        for p in 0..paths {
            x0.row_mut(e * paths + p).copy_from_slice(env.noise.x0.row(p));
        }
    }
    let dw_col = |k: usize| -> Arc<Vec<f64>> { Arc::new(envs.iter().flat_map(|e| (0..paths).map(move |p| e.noise.dw[(p, k)])).collect()) };

    let mut xs = vec![tape.constant(x0)];
    let mut u = [Vec::with_capacity(steps), Vec::with_capacity(steps)];
    let mut y: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut z: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    for k in 0..steps {
        let xk = xs[k];
        let dw = dw_col(k);
        let tau = tape.constant(Mat::filled(rows, 1, grid.tau(k)));

        let u2 = if leader_net {
            let (yv, zv) = bundle.leader_adjoint.eval_rows(bound[1].unwrap(), tape, tau, xk, xiv, None);
            let mut wy = Vec::with_capacity(e_count);
            let mut wz = Vec::with_capacity(e_count);
            for (e, ri) in envs.iter().zip(&r2_inv_t) {
                let LeaderSide::Network(agg) = e.leader else { unreachable!() };
                wy.push(agg.btilde2[k].matmul(ri).scale(-1.0));
                wz.push(agg.dtilde2[k].matmul(ri).scale(-1.0));
            }
            let shift = expand(e_count, paths, m2, |e| {
                Mat::row_vec(envs[e].frozen[1].lambda_u.row(k)).matmul(&r2_inv_t[e]).scale(-1.0).data
            });
            let a = tape.group_linear(yv, Arc::new(wy), paths);
            let b = tape.group_linear(zv, Arc::new(wz), paths);
            let ab = tape.add(a, b);
            let s = tape.constant(shift);
            y[1].push(yv);
            z[1].push(zv);
            tape.add(ab, s)
        } else {
            let levels = expand(e_count, paths, m2, |e| match envs[e].leader {
                LeaderSide::Exogenous(u) => u.row(k).to_vec(),
                LeaderSide::Network(_) => unreachable!(),
            });
            tape.constant(levels)
        };

        let u1 = if follower_net {
            let (yv, zv) = bundle.follower_adjoint.eval_rows(bound[0].unwrap(), tape, tau, xk, xiv, Some(u2));
            let shift = expand(e_count, paths, m1, |e| {
                Mat::row_vec(envs[e].frozen[0].lambda_u.row(k)).matmul(&r1_inv_t[e]).scale(-1.0).data
            });
            let a = tape.group_linear(yv, law1_y.clone(), paths);
            let b = tape.group_linear(zv, law1_z.clone(), paths);
            let ab = tape.add(a, b);
            let s = tape.constant(shift);
            y[0].push(yv);
            z[0].push(zv);
            tape.add(ab, s)
        } else {
            let mut m11t = Vec::with_capacity(e_count);
            let mut m12t = Vec::with_capacity(e_count);
            for e in envs {
                let FollowerSide::Affine(s) = e.follower else { unreachable!() };
                m11t.push(s.m11[k].t());
                m12t.push(s.m12[k].t());
            }
            let offset = expand(e_count, paths, m1, |e| match envs[e].follower {
                FollowerSide::Affine(s) => s.offset[k].clone(),
                FollowerSide::Network => unreachable!(),
            });
            let a = tape.group_linear(xk, Arc::new(m11t), paths);
            let b = tape.group_linear(u2, Arc::new(m12t), paths);
            let ab = tape.add(a, b);
            let c = tape.constant(offset);
            tape.add(ab, c)
        };

        let mut drift_c = Mat::zeros(rows, n);
        for (e, env) in envs.iter().enumerate() {
            let beta = env.mean_source.row(k);
            let dc: Vec<f64> = env.sc.a2.matvec(beta).iter().zip(&env.sc.b).map(|(a, b)| (a + b) * dt).collect();
            let sc_: Vec<f64> = env.sc.c2.matvec(beta).iter().zip(&env.sc.sigma).map(|(a, b)| a + b).collect();
            for p in 0..paths {
                let w = dw[e * paths + p];
                for (i, v) in drift_c.row_mut(e * paths + p).iter_mut().enumerate() {
                    *v = dc[i] + sc_[i] * w;
                }
            }
        }
        let fx = tape.group_linear(xk, drift_x.clone(), paths);
        let fu1 = tape.group_linear(u1, drift_u1.clone(), paths);
        let fu2 = tape.group_linear(u2, drift_u2.clone(), paths);
        let gx = tape.group_linear(xk, diff_x.clone(), paths);
        let gu1 = tape.group_linear(u1, diff_u1.clone(), paths);
        let gu2 = tape.group_linear(u2, diff_u2.clone(), paths);
        let g = tape.add(gx, gu1);
        let g = tape.add(g, gu2);
        let g = tape.row_scale(g, dw);
        let f = tape.add(fx, fu1);
        let f = tape.add(f, fu2);
        let next = tape.add(f, g);
        let c = tape.constant(drift_c);
        let next = tape.add(next, c);
        if !tape.value(next).is_finite() {
            return Err(DfpsError::Simulation { step: k });
        }
        xs.push(next);
        u[0].push(u1);
        u[1].push(u2);
    }

    let tau = tape.constant(Mat::filled(rows, 1, 1.0));
    if follower_net {
        let (yv, _) = bundle
            .follower_adjoint
            .eval_rows(bound[0].unwrap(), tape, tau, xs[steps], xiv, Some(u[1][steps - 1]));
        y[0].push(yv);
    }
    if leader_net {
        let (yv, _) = bundle.leader_adjoint.eval_rows(bound[1].unwrap(), tape, tau, xs[steps], xiv, None);
        y[1].push(yv);
    }
    Ok(Rollout {
        x: xs,
        u,
        y,
        z,
        envs: e_count,
        paths,
    })
}

/// Penalty weights and terminal weight of one player's loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rho_u: f64,
    pub rho_x: f64,
    pub terminal_weight: f64,
}

/// Scalar nodes of one player's augmented Lagrangian, each averaged over
/// scenarios.
#[derive(Clone, Copy, Debug)]
pub struct PlayerLoss {
    pub total: Var,
    pub cost: Var,
    pub residual: Var,
    pub penalty: Var,
}

/// Cost, adjoint defect and multiplier/penalty terms of `player` on a
/// rollout in which that player's adjoint network was evaluated.
pub fn player_loss(tape: &mut Tape, ro: &Rollout, envs: &[EnvInput<'_>], grid: &TimeGrid, player: Player, w: LossWeights) -> Result<PlayerLoss> {
    let i = player.index();
    let steps = grid.steps;
    if ro.y[i].len() != steps + 1 {
        return Err(DfpsError::contract("player loss needs the player's adjoint on the rollout"));
    }
    let dt = grid.dt();
    let paths = ro.paths;
    let rows = ro.rows() as f64;
    let e_count = ro.envs as f64;
    let weights = |f: &dyn Fn(&Scenario) -> Mat| -> Group { Arc::new(envs.iter().map(|e| f(e.sc)).collect()) };
    let q = weights(&|s| s.weights(player).q.clone());
    let r = weights(&|s| s.weights(player).r.clone());
    let g = weights(&|s| s.weights(player).g.clone());
    let qbar = weights(&|s| s.weights(player).qbar.clone());
    let rbar = weights(&|s| s.weights(player).rbar.clone());
    let a_dt = weights(&|s| s.a1.scale(dt));
    let c_dt = weights(&|s| s.c1.scale(dt));
    let qt_dt = weights(&|s| s.weights(player).q.t().scale(dt));
    let gt = weights(&|s| s.weights(player).g.t());

    let mut cost_terms = Vec::new();
    let mut res_terms = Vec::new();
    let mut pen_terms = Vec::new();
    for k in 0..steps {
        let (xk, uk) = (ro.x[k], ro.u[i][k]);
        let xq = tape.group_linear(xk, q.clone(), paths);
        let uq = tape.group_linear(uk, r.clone(), paths);
        let a = tape.dot(xk, xq);
        let b = tape.dot(uk, uq);
        let ab = tape.add(a, b);
        cost_terms.push(tape.scale(ab, dt / rows));

        let xb = tape.segment_mean(xk, paths);
        let ub = tape.segment_mean(uk, paths);
        let xbq = tape.group_linear(xb, qbar.clone(), 1);
        let ubq = tape.group_linear(ub, rbar.clone(), 1);
        let a = tape.dot(xb, xbq);
        let b = tape.dot(ub, ubq);
        let ab = tape.add(a, b);
        cost_terms.push(tape.scale(ab, dt / e_count));

        let (yk, yk1, zk) = (ro.y[i][k], ro.y[i][k + 1], ro.z[i][k]);
        let lam_x = expand(ro.envs, paths, envs[0].sc.dims.n, |e| {
            envs[e].frozen[i].lambda_x.row(k).iter().map(|v| v * dt).collect()
        });
        let d = tape.sub(yk1, yk);
        let ya = tape.group_linear(yk, a_dt.clone(), paths);
        let zc = tape.group_linear(zk, c_dt.clone(), paths);
        let xq = tape.group_linear(xk, qt_dt.clone(), paths);
        let dw: Arc<Vec<f64>> = Arc::new(envs.iter().flat_map(|e| (0..paths).map(move |p| e.noise.dw[(p, k)])).collect());
        let zdw = tape.row_scale(zk, dw);
        let d = tape.add(d, ya);
        let d = tape.add(d, zc);
        let d = tape.add(d, xq);
        let l = tape.constant(lam_x);
        let d = tape.add(d, l);
        let d = tape.sub(d, zdw);
        let ss = tape.sum_squares(d);
        res_terms.push(tape.scale(ss, 1.0 / rows));

        let stack = |f: &dyn Fn(&Frozen) -> &Mat| {
            let cols = f(envs[0].frozen[i]).cols;
            Mat::from_vec(ro.envs, cols, envs.iter().flat_map(|e| f(e.frozen[i]).row(k).to_vec()).collect())
        };
        let alpha = tape.constant(stack(&|f| &f.alpha));
        let beta = tape.constant(stack(&|f| &f.beta));
        let lu = tape.constant(stack(&|f| &f.lambda_u));
        let lx = tape.constant(stack(&|f| &f.lambda_x));
        let ru = tape.sub(ub, alpha);
        let rx = tape.sub(xb, beta);
        let a = tape.dot(ru, lu);
        let b = tape.dot(rx, lx);
        let su = tape.sum_squares(ru);
        let sx = tape.sum_squares(rx);
        let su = tape.scale(su, 0.5 * w.rho_u);
        let sx = tape.scale(sx, 0.5 * w.rho_x);
        let t = sum_vars(tape, &[a, b, su, sx]);
        pen_terms.push(tape.scale(t, dt / e_count));
    }
    let xn = ro.x[steps];
    let xg = tape.group_linear(xn, g.clone(), paths);
    let term = tape.dot(xn, xg);
    cost_terms.push(tape.scale(term, 1.0 / rows));
    let gx = tape.group_linear(xn, gt, paths);
    let mis = tape.sub(ro.y[i][steps], gx);
    let ss = tape.sum_squares(mis);
    res_terms.push(tape.scale(ss, w.terminal_weight / rows));

    let cost = sum_vars(tape, &cost_terms);
    let residual = sum_vars(tape, &res_terms);
    let penalty = sum_vars(tape, &pen_terms);
    let cr = tape.add(cost, residual);
    let total = tape.add(cr, penalty);
    Ok(PlayerLoss {
        total,
        cost,
        residual,
        penalty,
    })
}

/// One scenario's target for the macro fit: empirical means on the grid.
#[derive(Clone, Copy, Debug)]
pub struct MacroTarget<'a> {
    pub xi: &'a [f64],
    /// `steps x m`.
    pub ubar: &'a Mat,
    /// `steps x n` or longer.
    pub xbar: &'a Mat,
}

/// `(1/E) sum_e (||alpha - ubar||^2_dt + ||beta - xbar||^2_dt)` over the
/// bound macro network.
pub fn macro_loss(tape: &mut Tape, bound: &BoundMlp, control_dim: usize, targets: &[MacroTarget<'_>], grid: &TimeGrid) -> Result<Var> {
    let Some(first) = targets.first() else {
        return Err(DfpsError::contract("macro fit over no scenarios"));
    };
    let steps = grid.steps;
    let n = first.xbar.cols;
    let d_c = first.xi.len();
    let rows = targets.len() * steps;
    let mut input = Mat::zeros(rows, 1 + d_c);
    let mut target = Mat::zeros(rows, control_dim + n);
    for (e, t) in targets.iter().enumerate() {
        if t.ubar.rows < steps || t.ubar.cols != control_dim || t.xbar.rows < steps || t.xbar.cols != n {
            return Err(DfpsError::contract("macro target has the wrong shape"));
        }
        for k in 0..steps {
            let r = e * steps + k;
            let row = input.row_mut(r);
            row[0] = grid.tau(k);
            row[1..].copy_from_slice(t.xi);
            let row = target.row_mut(r);
            row[..control_dim].copy_from_slice(t.ubar.row(k));
            row[control_dim..].copy_from_slice(t.xbar.row(k));
        }
    }
    let inp = tape.constant(input);
    let out = bound.forward(tape, inp);
    let tv = tape.constant(target);
    let d = tape.sub(out, tv);
    let ss = tape.sum_squares(d);
    Ok(tape.scale(ss, grid.dt() / targets.len() as f64))
}

/// One scenario's data for a multiplier step.
#[derive(Clone, Copy, Debug)]
pub struct DualTarget<'a> {
    pub xi: &'a [f64],
    /// Violation trajectory, `steps x d`.
    pub viol: &'a Mat,
    /// Multiplier outputs before the step, `steps x d`.
    pub lambda_prev: &'a Mat,
}

/// `(1/E) sum_e [-<lambda, viol>_dt + (eta/2) ||lambda - lambda_prev||^2_dt]`.
pub fn dual_loss(tape: &mut Tape, bound: &BoundMlp, targets: &[DualTarget<'_>], eta: f64, grid: &TimeGrid) -> Result<Var> {
    let Some(first) = targets.first() else {
        return Err(DfpsError::contract("dual step over no scenarios"));
    };
    let steps = grid.steps;
    let d = first.viol.cols;
    let d_c = first.xi.len();
    let rows = targets.len() * steps;
    let mut input = Mat::zeros(rows, 1 + d_c);
    let mut viol = Mat::zeros(rows, d);
    let mut prev = Mat::zeros(rows, d);
    for (e, t) in targets.iter().enumerate() {
        if t.viol.shape() != (steps, d) || t.lambda_prev.shape() != (steps, d) {
            return Err(DfpsError::contract("dual target has the wrong shape"));
        }
        for k in 0..steps {
            let r = e * steps + k;
            let row = input.row_mut(r);
            row[0] = grid.tau(k);
            row[1..].copy_from_slice(t.xi);
            viol.row_mut(r).copy_from_slice(t.viol.row(k));
            prev.row_mut(r).copy_from_slice(t.lambda_prev.row(k));
        }
    }
    let inp = tape.constant(input);
    let lam = bound.forward(tape, inp);
    let v = tape.constant(viol);
    let p = tape.constant(prev);
    let lin = tape.dot(lam, v);
    let diff = tape.sub(lam, p);
    let sq = tape.sum_squares(diff);
    let sq = tape.scale(sq, 0.5 * eta);
    let lin = tape.scale(lin, -1.0);
    let total = tape.add(lin, sq);
    Ok(tape.scale(total, grid.dt() / targets.len() as f64))
}
