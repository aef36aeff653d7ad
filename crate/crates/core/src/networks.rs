//! The network families of the solver, all conditioned on the scenario context.
//!
//! | network            | input                  | hidden   | gain |
//! |--------------------|------------------------|----------|------|
//! | follower adjoint   | `t, X, context, u2`    | 4 x 128  | 0.05 |
//! | leader adjoint     | `t, X, context`        | 4 x 128  | 0.05 |
//! | macro (per player) | `t, context`           | 4 x 128  | 0.10 |
//! | multiplier         | `t, context`           | 3 x 64   | 0.01 |
//!
//! Time enters normalized to `[0, 1]`; the context is standardized with
//! statistics fitted on the training scenarios. An adjoint network returns
//! `(Y, Z)` from one trunk with a `2n` head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::linalg::Mat;
use crate::mlp::{BoundMlp, Mlp};
use crate::model::{Dims, Player};
use crate::tape::{Tape, Var};

pub const ADJOINT_HIDDEN: [usize; 4] = [128; 4];
pub const MACRO_HIDDEN: [usize; 4] = [128; 4];
pub const LAMBDA_HIDDEN: [usize; 3] = [64; 3];
pub const ADJOINT_GAIN: f64 = 0.05;
pub const MACRO_GAIN: f64 = 0.10;
pub const LAMBDA_GAIN: f64 = 0.01;

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Per-coordinate standardization of context vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ContextNorm {
    pub fn identity(dim: usize) -> Self {
        ContextNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation over `contexts`; coordinates
    /// that do not vary keep unit scale.
    pub fn fit(contexts: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = contexts.first() else {
            return Err(DfpsError::contract("cannot fit a context normalization on no scenarios"));
        };
        let d = first.len();
        let count = contexts.len() as f64;
        let mut mean = vec![0.0; d];
        for c in contexts {
            if c.len() != d {
                return Err(DfpsError::contract("contexts of differing length"));
            }
            mean.iter_mut().zip(c).for_each(|(m, v)| *m += v / count);
        }
        let mut std = vec![0.0; d];
        for c in contexts {
            std.iter_mut().zip(c.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / count);
        }
        for s in &mut std {
            *s = s.sqrt();
            if *s < 1e-8 {
                *s = 1.0;
            }
        }
        Ok(ContextNorm { mean, std })
    }

    pub fn apply(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

/// Rows `[tau, X_row, xi, extra_row]` for every row of `x`.
fn state_inputs(tau: f64, x: &Mat, xi: &[f64], extra: Option<&Mat>) -> Mat {
    let extra_cols = extra.map_or(0, |e| e.cols);
    let cols = 1 + x.cols + xi.len() + extra_cols;
    let mut out = Mat::zeros(x.rows, cols);
    for r in 0..x.rows {
        let row = out.row_mut(r);
        row[0] = tau;
        row[1..1 + x.cols].copy_from_slice(x.row(r));
        row[1 + x.cols..1 + x.cols + xi.len()].copy_from_slice(xi);
        if let Some(e) = extra {
            row[1 + x.cols + xi.len()..].copy_from_slice(e.row(r));
        }
    }
    out
}

/// Rows `[tau_k, xi]` for each time in `taus`.
pub fn time_inputs(taus: &[f64], xi: &[f64]) -> Mat {
    let mut out = Mat::zeros(taus.len(), 1 + xi.len());
    for (r, &t) in taus.iter().enumerate() {
        let row = out.row_mut(r);
        row[0] = t;
        row[1..].copy_from_slice(xi);
    }
    out
}

/// Adjoint pair `(Y, Z)` as a function of time, state, context and, for the
/// follower only, the leader's control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointNet {
    pub mlp: Mlp,
    pub n: usize,
    pub context_dim: usize,
    /// Width of the control input; zero for the leader.
    pub control_dim: usize,
}

impl AdjointNet {
    pub fn new<R: Rng + ?Sized>(n: usize, context_dim: usize, control_dim: usize, rng: &mut R) -> Self {
        let input = 1 + n + context_dim + control_dim;
        AdjointNet {
            mlp: Mlp::new(&widths(input, &ADJOINT_HIDDEN, 2 * n), ADJOINT_GAIN, rng),
            n,
            context_dim,
            control_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        1 + self.n + self.context_dim + self.control_dim
    }

    fn check(&self, x: &Mat, xi: &[f64], control: Option<&Mat>) -> Result<()> {
        if x.cols != self.n || xi.len() != self.context_dim {
            return Err(DfpsError::contract("adjoint network: state or context width mismatch"));
        }
        match (control, self.control_dim) {
            (None, 0) => Ok(()),
            (Some(u), d) if d > 0 && u.cols == d && u.rows == x.rows => Ok(()),
            _ => Err(DfpsError::contract("adjoint network: control input does not match the signature")),
        }
    }

    /// `(Y, Z)` for every row of `x` at normalized time `tau`; `xi` is the
    /// standardized context.
    pub fn eval(&self, tau: f64, x: &Mat, xi: &[f64], control: Option<&Mat>) -> Result<(Mat, Mat)> {
        self.check(x, xi, control)?;
        let out = self.mlp.forward(&state_inputs(tau, x, xi, control))?;
        Ok(split_cols(&out, self.n))
    }

    /// Tape version of [`AdjointNet::eval`]. `x` and `control` may be
    /// differentiable nodes.
    pub fn eval_tape(&self, bound: &BoundMlp, tape: &mut Tape, tau: f64, x: Var, xi: &[f64], control: Option<Var>) -> (Var, Var) {
        let rows = tape.shape(x).0;
        let tcol = tape.constant(Mat::filled(rows, 1, tau));
        let xiv = tape.constant(repeat_rows(xi, rows));
        self.eval_rows(bound, tape, tcol, x, xiv, control)
    }

    /// Row-wise tape evaluation: every row carries its own time (`tau`,
    /// one column) and standardized context (`xi`, one row each).
    pub fn eval_rows(&self, bound: &BoundMlp, tape: &mut Tape, tau: Var, x: Var, xi: Var, control: Option<Var>) -> (Var, Var) {
        let mut parts = vec![tau, x, xi];
        parts.extend(control);
        let input = tape.concat_cols(&parts);
        let out = bound.forward(tape, input);
        let y = tape.slice_cols(out, 0, self.n);
        let z = tape.slice_cols(out, self.n, self.n);
        (y, z)
    }
}

/// `rows` copies of `v` stacked.
pub fn repeat_rows(v: &[f64], rows: usize) -> Mat {
    let mut m = Mat::zeros(rows, v.len());
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(v);
    }
    m
}

/// Mean control `alpha` and mean state `beta` of one player as functions of
/// time and context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroNet {
    pub mlp: Mlp,
    pub control_dim: usize,
    pub n: usize,
}

impl MacroNet {
    pub fn new<R: Rng + ?Sized>(n: usize, context_dim: usize, control_dim: usize, rng: &mut R) -> Self {
        MacroNet {
            mlp: Mlp::new(&widths(1 + context_dim, &MACRO_HIDDEN, control_dim + n), MACRO_GAIN, rng),
            control_dim,
            n,
        }
    }

    /// `(alpha, beta)` with one row per entry of `taus`.
    pub fn eval(&self, taus: &[f64], xi: &[f64]) -> Result<(Mat, Mat)> {
        let out = self.mlp.forward(&time_inputs(taus, xi))?;
        Ok(split_cols(&out, self.control_dim))
    }
}

/// One multiplier trajectory as a function of time and context. The output
/// is linear and unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaNet {
    pub mlp: Mlp,
    pub dim: usize,
}

impl LambdaNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, context_dim: usize, rng: &mut R) -> Self {
        LambdaNet {
            mlp: Mlp::new(&widths(1 + context_dim, &LAMBDA_HIDDEN, dim), LAMBDA_GAIN, rng),
            dim,
        }
    }

    pub fn eval(&self, taus: &[f64], xi: &[f64]) -> Result<Mat> {
        self.mlp.forward(&time_inputs(taus, xi))
    }
}

/// The multiplier networks of one player: control channel and state channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPair {
    pub u: LambdaNet,
    pub x: LambdaNet,
}

/// All eight networks plus the context standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkBundle {
    pub dims: Dims,
    pub context_norm: ContextNorm,
    pub follower_adjoint: AdjointNet,
    pub leader_adjoint: AdjointNet,
    pub follower_macro: MacroNet,
    pub leader_macro: MacroNet,
    pub follower_lambda: LambdaPair,
    pub leader_lambda: LambdaPair,
}

impl NetworkBundle {
    /// Fresh networks with the multiplier outputs at zero: the multiplier
    /// heads are zeroed outright rather than merely scaled down.
    pub fn new<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let d_c = dims.context_dim();
        let Dims { n, m1, m2 } = dims;
        let follower_adjoint = AdjointNet::new(n, d_c, m2, rng);
        let leader_adjoint = AdjointNet::new(n, d_c, 0, rng);
        let follower_macro = MacroNet::new(n, d_c, m1, rng);
        let leader_macro = MacroNet::new(n, d_c, m2, rng);
        let mut lam = |dim| {
            let mut net = LambdaNet::new(dim, d_c, rng);
            zero_head(&mut net.mlp);
            net
        };
        let follower_lambda = LambdaPair { u: lam(m1), x: lam(n) };
        let leader_lambda = LambdaPair { u: lam(m2), x: lam(n) };
        NetworkBundle {
            dims,
            context_norm: ContextNorm::identity(d_c),
            follower_adjoint,
            leader_adjoint,
            follower_macro,
            leader_macro,
            follower_lambda,
            leader_lambda,
        }
    }

    pub fn adjoint(&self, player: Player) -> &AdjointNet {
        match player {
            Player::Follower => &self.follower_adjoint,
            Player::Leader => &self.leader_adjoint,
        }
    }

    pub fn adjoint_mut(&mut self, player: Player) -> &mut AdjointNet {
        match player {
            Player::Follower => &mut self.follower_adjoint,
            Player::Leader => &mut self.leader_adjoint,
        }
    }

    pub fn macro_net(&self, player: Player) -> &MacroNet {
        match player {
            Player::Follower => &self.follower_macro,
            Player::Leader => &self.leader_macro,
        }
    }

    pub fn macro_net_mut(&mut self, player: Player) -> &mut MacroNet {
        match player {
            Player::Follower => &mut self.follower_macro,
            Player::Leader => &mut self.leader_macro,
        }
    }

    pub fn lambdas(&self, player: Player) -> &LambdaPair {
        match player {
            Player::Follower => &self.follower_lambda,
            Player::Leader => &self.leader_lambda,
        }
    }

    pub fn lambdas_mut(&mut self, player: Player) -> &mut LambdaPair {
        match player {
            Player::Follower => &mut self.follower_lambda,
            Player::Leader => &mut self.leader_lambda,
        }
    }

    /// All eight MLPs in a fixed order: adjoints, macros, then multipliers.
    pub fn mlps(&self) -> [(&'static str, &Mlp); 8] {
        [
            ("follower_adjoint", &self.follower_adjoint.mlp),
            ("leader_adjoint", &self.leader_adjoint.mlp),
            ("follower_macro", &self.follower_macro.mlp),
            ("leader_macro", &self.leader_macro.mlp),
            ("follower_lambda_u", &self.follower_lambda.u.mlp),
            ("follower_lambda_x", &self.follower_lambda.x.mlp),
            ("leader_lambda_u", &self.leader_lambda.u.mlp),
            ("leader_lambda_x", &self.leader_lambda.x.mlp),
        ]
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 8] {
        [
            &mut self.follower_adjoint.mlp,
            &mut self.leader_adjoint.mlp,
            &mut self.follower_macro.mlp,
            &mut self.leader_macro.mlp,
            &mut self.follower_lambda.u.mlp,
            &mut self.follower_lambda.x.mlp,
            &mut self.leader_lambda.u.mlp,
            &mut self.leader_lambda.x.mlp,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.mlps().iter().map(|(_, m)| m.num_params()).sum()
    }

    /// Standardized context of a raw context vector.
    pub fn context(&self, xi: &[f64]) -> Vec<f64> {
        self.context_norm.apply(xi)
    }
}

/// Trainable parameter count of a full bundle for the given dimensions,
/// computed from the architecture table without allocating networks.
pub fn parameter_count(dims: Dims) -> usize {
    fn mlp(w: &[usize]) -> usize {
        w.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
    let d_c = dims.context_dim();
    let Dims { n, m1, m2 } = dims;
    mlp(&widths(1 + n + d_c + m2, &ADJOINT_HIDDEN, 2 * n))
        + mlp(&widths(1 + n + d_c, &ADJOINT_HIDDEN, 2 * n))
        + mlp(&widths(1 + d_c, &MACRO_HIDDEN, m1 + n))
        + mlp(&widths(1 + d_c, &MACRO_HIDDEN, m2 + n))
        + mlp(&widths(1 + d_c, &LAMBDA_HIDDEN, m1))
        + mlp(&widths(1 + d_c, &LAMBDA_HIDDEN, n))
        + mlp(&widths(1 + d_c, &LAMBDA_HIDDEN, m2))
        + mlp(&widths(1 + d_c, &LAMBDA_HIDDEN, n))
}

fn zero_head(mlp: &mut Mlp) {
    let last = mlp.layers.last_mut().unwrap();
    last.weight.data.iter_mut().for_each(|v| *v = 0.0);
    last.bias.data.iter_mut().for_each(|v| *v = 0.0);
}

/// Split the columns of `m` at `at`.
pub fn split_cols(m: &Mat, at: usize) -> (Mat, Mat) {
    let mut a = Mat::zeros(m.rows, at);
    let mut b = Mat::zeros(m.rows, m.cols - at);
    for r in 0..m.rows {
        a.row_mut(r).copy_from_slice(&m.row(r)[..at]);
        b.row_mut(r).copy_from_slice(&m.row(r)[at..]);
    }
    (a, b)
}
