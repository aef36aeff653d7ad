//! Reverse-mode gradients of every training loss against central finite
//! differences along random unit directions in parameter space.

use dfps::fbsde::{aggregate_leader_coeffs, AggregatedLeaderCoeffs, ResponseSensitivities};
use dfps::linalg::Mat;
use dfps::mlp::Mlp;
use dfps::model::{scenario_for, CoefficientRanges, Dims, Noise, Player, Scenario, TimeGrid};
use dfps::networks::NetworkBundle;
use dfps::rng::{stream, Purpose};
use dfps::rollout::{self, DualTarget, EnvInput, FollowerSide, Frozen, LeaderSide, LossWeights, MacroTarget};
use dfps::tape::Tape;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const DRAWS: u64 = 100;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    m.data.iter_mut().for_each(|v| *v = scale * rng.sample::<f64, _>(StandardNormal));
    m
}

/// Replace every parameter with a random draw so no layer is degenerate.
fn randomize(b: &mut NetworkBundle, rng: &mut ChaCha8Rng) {
    for mlp in b.mlps_mut() {
        for t in mlp.tensors_mut() {
            let scale = if t.rows == 1 { 0.1 } else { 1.0 / (t.rows as f64).sqrt() };
            *t = normal(rng, t.rows, t.cols, scale);
        }
    }
}

fn unit_direction(mlp: &Mlp, rng: &mut ChaCha8Rng) -> Vec<Mat> {
    let mut d: Vec<Mat> = mlp.tensors().iter().map(|t| normal(rng, t.rows, t.cols, 1.0)).collect();
    let norm = d.iter().map(|m| m.frobenius().powi(2)).sum::<f64>().sqrt();
    d.iter_mut().for_each(|m| *m = m.scale(1.0 / norm));
    d
}

fn shifted(mlp: &mut Mlp, dir: &[Mat], h: f64) {
    for (t, d) in mlp.tensors_mut().into_iter().zip(dir) {
        t.axpy(h, d);
    }
}

fn inner(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| p * q).sum::<f64>()).sum()
}

fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-10)
}

/// A loss value and, when asked for, its gradient on the selected MLP.
type LossFn<'a> = dyn Fn(&NetworkBundle, bool) -> (f64, Vec<Mat>) + 'a;

/// Check `loss` at the bundle against finite differences on the MLP chosen
/// by `select`; returns the relative error.
fn check(b: &NetworkBundle, select: fn(&mut NetworkBundle) -> &mut Mlp, loss: &LossFn, rng: &mut ChaCha8Rng) -> f64 {
    let (_, grads) = loss(b, true);
    let mut probe = b.clone();
    let dir = unit_direction(select(&mut probe), rng);
    let analytic = inner(&grads, &dir);
    shifted(select(&mut probe), &dir, H);
    let plus = loss(&probe, false).0;
    shifted(select(&mut probe), &dir, -2.0 * H);
    let minus = loss(&probe, false).0;
    rel_error(analytic, (plus - minus) / (2.0 * H))
}

struct Case {
    grid: TimeGrid,
    scs: Vec<Scenario>,
    noises: Vec<Noise>,
    explore: Vec<Mat>,
    sens: Vec<ResponseSensitivities>,
    agg: Vec<AggregatedLeaderCoeffs>,
}

fn case(draw: u64, rng: &mut ChaCha8Rng) -> (Case, NetworkBundle) {
    let dims = if draw.is_multiple_of(2) {
        Dims { n: 1, m1: 1, m2: 1 }
    } else {
        Dims { n: 2, m1: 1, m2: 1 }
    };
    let grid = TimeGrid::new(1.0, 3).unwrap();
    let envs = 2;
    let scs: Vec<Scenario> = (0..envs).map(|e| scenario_for(draw, e, &CoefficientRanges::default(), dims).unwrap()).collect();
    let noises = (0..envs).map(|e| Noise::sample(draw, Purpose::Test, e, 3, dims.n, &grid, 0.1)).collect();
    let explore = (0..envs).map(|_| normal(rng, grid.steps, dims.m2, 0.5)).collect();
    let sens: Vec<ResponseSensitivities> = (0..envs)
        .map(|_| ResponseSensitivities {
            m11: (0..grid.steps).map(|_| normal(rng, dims.m1, dims.n, 0.3)).collect(),
            m12: (0..grid.steps).map(|_| normal(rng, dims.m1, dims.m2, 0.3)).collect(),
            offset: (0..grid.steps).map(|_| normal(rng, 1, dims.m1, 0.1).data).collect(),
        })
        .collect();
    let agg = scs.iter().zip(&sens).map(|(sc, s)| aggregate_leader_coeffs(sc, s)).collect();
    let mut bundle = NetworkBundle::new(dims, &mut stream(draw, Purpose::NetworkInit, 0, 0));
    randomize(&mut bundle, rng);
    (
        Case {
            grid,
            scs,
            noises,
            explore,
            sens,
            agg,
        },
        bundle,
    )
}

#[derive(Clone, Copy)]
enum Setting {
    /// Follower network against open-loop leader controls.
    FollowerStage,
    /// Leader network against the affine follower response.
    LeaderStage,
    /// Both networks on one rollout.
    Joint,
}

fn adjoint_loss(c: &Case, b: &NetworkBundle, setting: Setting, player: Player, with_grad: bool) -> (f64, Vec<Mat>) {
    let frozen: Vec<[Frozen; 2]> = c
        .scs
        .iter()
        .map(|sc| {
            let xi = b.context(&sc.context());
            [
                Frozen::of(b, Player::Follower, &xi, &c.grid).unwrap(),
                Frozen::of(b, Player::Leader, &xi, &c.grid).unwrap(),
            ]
        })
        .collect();
    let xis: Vec<Vec<f64>> = c.scs.iter().map(|sc| b.context(&sc.context())).collect();
    let mut tape = Tape::new();
    let train_f = !matches!(setting, Setting::LeaderStage);
    let train_l = !matches!(setting, Setting::FollowerStage);
    let bf = train_f.then(|| b.follower_adjoint.mlp.bind(&mut tape, true));
    let bl = train_l.then(|| b.leader_adjoint.mlp.bind(&mut tape, true));
    let mean_player = if matches!(setting, Setting::LeaderStage) { 1 } else { 0 };
    let envs: Vec<EnvInput> = (0..c.scs.len())
        .map(|e| {
            let (follower, leader) = match setting {
                Setting::FollowerStage => (FollowerSide::Network, LeaderSide::Exogenous(&c.explore[e])),
                Setting::LeaderStage => (FollowerSide::Affine(&c.sens[e]), LeaderSide::Network(&c.agg[e])),
                Setting::Joint => (FollowerSide::Network, LeaderSide::Network(&c.agg[e])),
            };
            EnvInput {
                sc: &c.scs[e],
                xi: &xis[e],
                noise: &c.noises[e],
                mean_source: &frozen[e][mean_player].beta,
                follower,
                leader,
                frozen: [&frozen[e][0], &frozen[e][1]],
            }
        })
        .collect();
    let ro = rollout::rollout(&mut tape, b, [bf.as_ref(), bl.as_ref()], &envs, &c.grid).unwrap();
    let w = LossWeights {
        rho_u: 0.3,
        rho_x: 0.7,
        terminal_weight: 10.0,
    };
    let loss = rollout::player_loss(&mut tape, &ro, &envs, &c.grid, player, w).unwrap();
    let value = tape.scalar(loss.total);
    if !with_grad {
        return (value, Vec::new());
    }
    let g = tape.backward(loss.total).unwrap();
    let bound = if player == Player::Follower { bf.as_ref() } else { bl.as_ref() };
    (value, bound.unwrap().grads(&tape, &g))
}

fn follower_adjoint(b: &mut NetworkBundle) -> &mut Mlp {
    &mut b.follower_adjoint.mlp
}

fn leader_adjoint(b: &mut NetworkBundle) -> &mut Mlp {
    &mut b.leader_adjoint.mlp
}

fn follower_macro(b: &mut NetworkBundle) -> &mut Mlp {
    &mut b.follower_macro.mlp
}

fn leader_lambda_x(b: &mut NetworkBundle) -> &mut Mlp {
    &mut b.leader_lambda.x.mlp
}

/// Worst relative error over the draws; a non-finite error is returned as is.
fn worst_over_draws(f: impl Fn(u64, &mut ChaCha8Rng) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for draw in 0..DRAWS {
        let mut rng = stream(draw, Purpose::Test, 77, 0);
        let e = f(draw, &mut rng);
        if !e.is_finite() {
            return e;
        }
        worst = worst.max(e);
    }
    worst
}

pub fn follower_adjoint_family() -> f64 {
    worst_over_draws(|draw, rng| {
        let (c, b) = case(draw, rng);
        let setting = if draw % 3 == 0 { Setting::Joint } else { Setting::FollowerStage };
        check(&b, follower_adjoint, &|b, g| adjoint_loss(&c, b, setting, Player::Follower, g), rng)
    })
}

pub fn leader_adjoint_family() -> f64 {
    worst_over_draws(|draw, rng| {
        let (c, b) = case(draw, rng);
        let setting = if draw % 3 == 0 { Setting::Joint } else { Setting::LeaderStage };
        check(&b, leader_adjoint, &|b, g| adjoint_loss(&c, b, setting, Player::Leader, g), rng)
    })
}

pub fn macro_family() -> f64 {
    worst_over_draws(|draw, rng| {
        let (c, b) = case(draw, rng);
        let dims = b.dims;
        let xis: Vec<Vec<f64>> = c.scs.iter().map(|sc| b.context(&sc.context())).collect();
        let data: Vec<(Mat, Mat)> = xis
            .iter()
            .map(|_| (normal(rng, c.grid.steps, dims.m1, 0.5), normal(rng, c.grid.steps + 1, dims.n, 0.5)))
            .collect();
        let loss = |b: &NetworkBundle, with_grad: bool| {
            let mut tape = Tape::new();
            let bound = b.follower_macro.mlp.bind(&mut tape, true);
            let ts: Vec<MacroTarget> = xis.iter().zip(&data).map(|(xi, (u, x))| MacroTarget { xi, ubar: u, xbar: x }).collect();
            let l = rollout::macro_loss(&mut tape, &bound, dims.m1, &ts, &c.grid).unwrap();
            let v = tape.scalar(l);
            if !with_grad {
                return (v, Vec::new());
            }
            let g = tape.backward(l).unwrap();
            (v, bound.grads(&tape, &g))
        };
        check(&b, follower_macro, &loss, rng)
    })
}

pub fn multiplier_family() -> f64 {
    worst_over_draws(|draw, rng| {
        let (c, b) = case(draw, rng);
        let n = b.dims.n;
        let xis: Vec<Vec<f64>> = c.scs.iter().map(|sc| b.context(&sc.context())).collect();
        let data: Vec<(Mat, Mat)> = xis
            .iter()
            .map(|_| (normal(rng, c.grid.steps, n, 0.2), normal(rng, c.grid.steps, n, 0.2)))
            .collect();
        let loss = |b: &NetworkBundle, with_grad: bool| {
            let mut tape = Tape::new();
            let bound = b.leader_lambda.x.mlp.bind(&mut tape, true);
            let ts: Vec<DualTarget> = xis.iter().zip(&data).map(|(xi, (v, p))| DualTarget { xi, viol: v, lambda_prev: p }).collect();
            let l = rollout::dual_loss(&mut tape, &bound, &ts, 1.3, &c.grid).unwrap();
            let v = tape.scalar(l);
            if !with_grad {
                return (v, Vec::new());
            }
            let g = tape.backward(l).unwrap();
            (v, bound.grads(&tape, &g))
        };
        check(&b, leader_lambda_x, &loss, rng)
    })
}

/// Every network family with its worst relative error.
pub fn all_families() -> Vec<(&'static str, f64)> {
    vec![
        ("follower adjoint", follower_adjoint_family()),
        ("leader adjoint", leader_adjoint_family()),
        ("macro", macro_family()),
        ("multiplier", multiplier_family()),
    ]
}
