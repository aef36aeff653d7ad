//! The linear-quadratic mean-field model: coefficient scenarios, the time
//! grid, the Euler–Maruyama simulator and the discretized cost functionals.
//!
//! State equation, one scalar Brownian motion:
//!
//! ```text
//! dX = (A1 X + A2 E[X] + B1 u1 + B2 u2 + b) dt + (C1 X + C2 E[X] + D1 u1 + D2 u2 + sigma) dW
//! ```
//!
//! and player `i` pays
//!
//! ```text
//! E[ ∫ <Qi X,X> + <Qbar_i E[X],E[X]> + <Ri ui,ui> + <Rbar_i E[ui],E[ui]> dt + <Gi X(T),X(T)> ]
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::linalg::Mat;
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
}

impl Dims {
    pub fn new(n: usize, m1: usize, m2: usize) -> Result<Self> {
        if n == 0 || m1 == 0 || m2 == 0 {
            return Err(DfpsError::contract("all dimensions must be at least 1"));
        }
        Ok(Dims { n, m1, m2 })
    }

    pub fn control_dim(&self, player: Player) -> usize {
        match player {
            Player::Follower => self.m1,
            Player::Leader => self.m2,
        }
    }

    /// Length of the context vector.
    pub fn context_dim(&self) -> usize {
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        4 * n * n + 2 * n * m1 + 2 * n * m2 + 4 * n * n + 2 * m1 * m1 + 2 * m2 * m2 + 2 * n * n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Player {
    Follower,
    Leader,
}

impl Player {
    pub fn index(self) -> usize {
        match self {
            Player::Follower => 0,
            Player::Leader => 1,
        }
    }
}

/// One realization of every system and cost coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dims: Dims,
    #[serde(rename = "A1")]
    pub a1: Mat,
    #[serde(rename = "A2")]
    pub a2: Mat,
    #[serde(rename = "B1")]
    pub b1: Mat,
    #[serde(rename = "B2")]
    pub b2: Mat,
    #[serde(rename = "C1")]
    pub c1: Mat,
    #[serde(rename = "C2")]
    pub c2: Mat,
    #[serde(rename = "D1")]
    pub d1: Mat,
    #[serde(rename = "D2")]
    pub d2: Mat,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(rename = "Q1")]
    pub q1: Mat,
    #[serde(rename = "Q2")]
    pub q2: Mat,
    #[serde(rename = "Qbar1")]
    pub qbar1: Mat,
    #[serde(rename = "Qbar2")]
    pub qbar2: Mat,
    #[serde(rename = "R1")]
    pub r1: Mat,
    #[serde(rename = "R2")]
    pub r2: Mat,
    #[serde(rename = "Rbar1")]
    pub rbar1: Mat,
    #[serde(rename = "Rbar2")]
    pub rbar2: Mat,
    #[serde(rename = "G1")]
    pub g1: Mat,
    #[serde(rename = "G2")]
    pub g2: Mat,
}

/// Cost weights of one player.
pub struct CostWeights<'a> {
    pub q: &'a Mat,
    pub qbar: &'a Mat,
    pub r: &'a Mat,
    pub rbar: &'a Mat,
    pub g: &'a Mat,
}

impl Scenario {
    /// Every coefficient zero, including the control weights.
    pub fn zeros(dims: Dims) -> Self {
        let (n, m1, m2) = (dims.n, dims.m1, dims.m2);
        let nn = || Mat::zeros(n, n);
        Scenario {
            dims,
            a1: nn(),
            a2: nn(),
            b1: Mat::zeros(n, m1),
            b2: Mat::zeros(n, m2),
            c1: nn(),
            c2: nn(),
            d1: Mat::zeros(n, m1),
            d2: Mat::zeros(n, m2),
            b: vec![0.0; n],
            sigma: vec![0.0; n],
            q1: nn(),
            q2: nn(),
            qbar1: nn(),
            qbar2: nn(),
            r1: Mat::zeros(m1, m1),
            r2: Mat::zeros(m2, m2),
            rbar1: Mat::zeros(m1, m1),
            rbar2: Mat::zeros(m2, m2),
            g1: nn(),
            g2: nn(),
        }
    }

    pub fn weights(&self, player: Player) -> CostWeights<'_> {
        match player {
            Player::Follower => CostWeights {
                q: &self.q1,
                qbar: &self.qbar1,
                r: &self.r1,
                rbar: &self.rbar1,
                g: &self.g1,
            },
            Player::Leader => CostWeights {
                q: &self.q2,
                qbar: &self.qbar2,
                r: &self.r2,
                rbar: &self.rbar2,
                g: &self.g2,
            },
        }
    }

    /// Control input and diffusion loading of a player.
    pub fn control_matrices(&self, player: Player) -> (&Mat, &Mat) {
        match player {
            Player::Follower => (&self.b1, &self.d1),
            Player::Leader => (&self.b2, &self.d2),
        }
    }

    /// Shapes, symmetry and definiteness of the cost weights.
    pub fn validate(&self) -> Result<()> {
        let Dims { n, m1, m2 } = self.dims;
        let shapes: [(&str, &Mat, (usize, usize)); 18] = [
            ("A1", &self.a1, (n, n)),
            ("A2", &self.a2, (n, n)),
            ("B1", &self.b1, (n, m1)),
            ("B2", &self.b2, (n, m2)),
            ("C1", &self.c1, (n, n)),
            ("C2", &self.c2, (n, n)),
            ("D1", &self.d1, (n, m1)),
            ("D2", &self.d2, (n, m2)),
            ("Q1", &self.q1, (n, n)),
            ("Q2", &self.q2, (n, n)),
            ("Qbar1", &self.qbar1, (n, n)),
            ("Qbar2", &self.qbar2, (n, n)),
            ("R1", &self.r1, (m1, m1)),
            ("R2", &self.r2, (m2, m2)),
            ("Rbar1", &self.rbar1, (m1, m1)),
            ("Rbar2", &self.rbar2, (m2, m2)),
            ("G1", &self.g1, (n, n)),
            ("G2", &self.g2, (n, n)),
        ];
        for (name, m, shape) in shapes {
            if m.shape() != shape {
                return Err(DfpsError::contract(format!("{name} has shape {:?}, expected {shape:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(DfpsError::contract(format!("{name} has non-finite entries")));
            }
        }
        if self.b.len() != n || self.sigma.len() != n {
            return Err(DfpsError::contract("b and sigma must have length n"));
        }
        for (name, m) in [
            ("Q1", &self.q1),
            ("Q2", &self.q2),
            ("Qbar1", &self.qbar1),
            ("Qbar2", &self.qbar2),
            ("G1", &self.g1),
            ("G2", &self.g2),
            ("Rbar1", &self.rbar1),
            ("Rbar2", &self.rbar2),
        ] {
            if !m.is_symmetric(1e-12) || !m.is_psd(1e-12) {
                return Err(DfpsError::contract(format!("{name} must be symmetric positive semidefinite")));
            }
        }
        for (name, m) in [("R1", &self.r1), ("R2", &self.r2)] {
            if !m.is_symmetric(1e-12) || !m.is_positive_definite() {
                return Err(DfpsError::contract(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }

    /// Flattened coefficients in the fixed order
    /// `A1 A2 B1 B2 C1 C2 D1 D2 Q1 Q2 R1 R2 G1 G2 Qbar1 Qbar2 Rbar1 Rbar2`,
    /// each matrix row-major. `b` and `sigma` are not part of the context.
    pub fn context(&self) -> Vec<f64> {
        let mut xi = Vec::with_capacity(self.dims.context_dim());
        for m in self.context_parts() {
            xi.extend_from_slice(&m.data);
        }
        xi
    }

    fn context_parts(&self) -> [&Mat; 18] {
        [
            &self.a1,
            &self.a2,
            &self.b1,
            &self.b2,
            &self.c1,
            &self.c2,
            &self.d1,
            &self.d2,
            &self.q1,
            &self.q2,
            &self.r1,
            &self.r2,
            &self.g1,
            &self.g2,
            &self.qbar1,
            &self.qbar2,
            &self.rbar1,
            &self.rbar2,
        ]
    }

    /// Inverse of [`Scenario::context`]; `b` and `sigma` must be supplied.
    pub fn from_context(dims: Dims, xi: &[f64], b: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if xi.len() != dims.context_dim() {
            return Err(DfpsError::contract(format!(
                "context length {} does not match dimension {}",
                xi.len(),
                dims.context_dim()
            )));
        }
        let mut sc = Scenario::zeros(dims);
        sc.b = b;
        sc.sigma = sigma;
        let mut off = 0;
        let parts: [&mut Mat; 18] = [
            &mut sc.a1,
            &mut sc.a2,
            &mut sc.b1,
            &mut sc.b2,
            &mut sc.c1,
            &mut sc.c2,
            &mut sc.d1,
            &mut sc.d2,
            &mut sc.q1,
            &mut sc.q2,
            &mut sc.r1,
            &mut sc.r2,
            &mut sc.g1,
            &mut sc.g2,
            &mut sc.qbar1,
            &mut sc.qbar2,
            &mut sc.rbar1,
            &mut sc.rbar2,
        ];
        for m in parts {
            let len = m.data.len();
            m.data.copy_from_slice(&xi[off..off + len]);
            off += len;
        }
        Ok(sc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Diagonal,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    pub structure: Structure,
}

impl Range {
    pub const fn full(lo: f64, hi: f64) -> Self {
        Range {
            lo,
            hi,
            structure: Structure::Full,
        }
    }

    pub const fn diag(lo: f64, hi: f64) -> Self {
        Range {
            lo,
            hi,
            structure: Structure::Diagonal,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        match self.structure {
            Structure::Full => m.data.iter_mut().for_each(|v| *v = self.draw(rng)),
            Structure::Diagonal => (0..rows.min(cols)).for_each(|i| m[(i, i)] = self.draw(rng)),
        }
        m
    }

    /// Central `frac` of the interval, same structure.
    pub fn shrink(&self, frac: f64) -> Range {
        let mid = 0.5 * (self.lo + self.hi);
        let half = 0.5 * (self.hi - self.lo) * frac;
        Range {
            lo: mid - half,
            hi: mid + half,
            structure: self.structure,
        }
    }
}

/// Sampling distribution of every coefficient: independent uniforms, either on
/// every entry or on the diagonal only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRanges {
    pub a1: Range,
    pub a2: Range,
    pub b1: Range,
    pub b2: Range,
    pub c1: Range,
    pub c2: Range,
    pub d1: Range,
    pub d2: Range,
    pub b: Range,
    pub sigma: Range,
    pub q: Range,
    pub r: Range,
    pub g: Range,
    pub qbar: Range,
    pub rbar: Range,
}

impl Default for CoefficientRanges {
    fn default() -> Self {
        CoefficientRanges {
            a1: Range::diag(-1.0, -0.4),
            a2: Range::full(0.1, 0.4),
            b1: Range::full(0.7, 1.3),
            b2: Range::full(0.3, 0.8),
            c1: Range::full(0.05, 0.15),
            c2: Range::full(0.02, 0.08),
            d1: Range::full(0.02, 0.08),
            d2: Range::full(0.02, 0.08),
            b: Range::full(0.01, 0.5),
            sigma: Range::full(0.01, 0.5),
            q: Range::diag(0.99, 1.01),
            r: Range::diag(0.99, 1.01),
            g: Range::diag(0.99, 1.01),
            qbar: Range::diag(0.099, 0.101),
            rbar: Range::diag(0.099, 0.101),
        }
    }
}

impl CoefficientRanges {
    /// Every range narrowed to its central `frac`.
    pub fn shrink(&self, frac: f64) -> Self {
        let s = |r: &Range| r.shrink(frac);
        CoefficientRanges {
            a1: s(&self.a1),
            a2: s(&self.a2),
            b1: s(&self.b1),
            b2: s(&self.b2),
            c1: s(&self.c1),
            c2: s(&self.c2),
            d1: s(&self.d1),
            d2: s(&self.d2),
            b: s(&self.b),
            sigma: s(&self.sigma),
            q: s(&self.q),
            r: s(&self.r),
            g: s(&self.g),
            qbar: s(&self.qbar),
            rbar: s(&self.rbar),
        }
    }

    fn check(&self) -> Result<()> {
        let all = [
            ("A1", self.a1),
            ("A2", self.a2),
            ("B1", self.b1),
            ("B2", self.b2),
            ("C1", self.c1),
            ("C2", self.c2),
            ("D1", self.d1),
            ("D2", self.d2),
            ("b", self.b),
            ("sigma", self.sigma),
            ("Q", self.q),
            ("R", self.r),
            ("G", self.g),
            ("Qbar", self.qbar),
            ("Rbar", self.rbar),
        ];
        for (name, r) in all {
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
                return Err(DfpsError::Config(format!("range for {name} is empty or non-finite")));
            }
        }
        for (name, r) in [("Q", self.q), ("G", self.g), ("Qbar", self.qbar), ("Rbar", self.rbar)] {
            if r.structure != Structure::Diagonal || r.lo < 0.0 {
                return Err(DfpsError::Config(format!("{name} must be a non-negative diagonal range")));
            }
        }
        if self.r.structure != Structure::Diagonal || self.r.lo <= 0.0 {
            return Err(DfpsError::Config("R must be a strictly positive diagonal range".into()));
        }
        Ok(())
    }
}

/// Draw one scenario. Ranges that cannot produce positive definite control
/// weights are rejected before any draw.
pub fn sample_scenario<R: Rng + ?Sized>(rng: &mut R, ranges: &CoefficientRanges, dims: Dims) -> Result<Scenario> {
    ranges.check()?;
    let Dims { n, m1, m2 } = dims;
    let a1 = ranges.a1.sample(n, n, rng);
    let a2 = ranges.a2.sample(n, n, rng);
    let b1 = ranges.b1.sample(n, m1, rng);
    let b2 = ranges.b2.sample(n, m2, rng);
    let c1 = ranges.c1.sample(n, n, rng);
    let c2 = ranges.c2.sample(n, n, rng);
    let d1 = ranges.d1.sample(n, m1, rng);
    let d2 = ranges.d2.sample(n, m2, rng);
    let b = ranges.b.sample(n, 1, rng).data;
    let sigma = ranges.sigma.sample(n, 1, rng).data;
    let q1 = ranges.q.sample(n, n, rng);
    let q2 = ranges.q.sample(n, n, rng);
    let r1 = ranges.r.sample(m1, m1, rng);
    let r2 = ranges.r.sample(m2, m2, rng);
    let g1 = ranges.g.sample(n, n, rng);
    let g2 = ranges.g.sample(n, n, rng);
    let qbar1 = ranges.qbar.sample(n, n, rng);
    let qbar2 = ranges.qbar.sample(n, n, rng);
    let rbar1 = ranges.rbar.sample(m1, m1, rng);
    let rbar2 = ranges.rbar.sample(m2, m2, rng);
    let sc = Scenario {
        dims,
        a1,
        a2,
        b1,
        b2,
        c1,
        c2,
        d1,
        d2,
        b,
        sigma,
        q1,
        q2,
        qbar1,
        qbar2,
        r1,
        r2,
        rbar1,
        rbar2,
        g1,
        g2,
    };
    sc.validate()?;
    Ok(sc)
}

/// Scenario number `index` of a run, drawn from its own stream.
pub fn scenario_for(seed: u64, index: u64, ranges: &CoefficientRanges, dims: Dims) -> Result<Scenario> {
    sample_scenario(&mut stream(seed, Purpose::Scenario, index, 0), ranges, dims)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    Medium,
    High,
    Deterministic,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Low, Regime::Medium, Regime::High, Regime::Deterministic];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Low => "low",
            Regime::Medium => "medium",
            Regime::High => "high",
            Regime::Deterministic => "deterministic",
        }
    }

    fn sigma_range(self) -> (f64, f64) {
        match self {
            Regime::Low => (0.04, 0.10),
            Regime::Medium | Regime::Deterministic => (0.10, 0.20),
            Regime::High => (0.18, 0.30),
        }
    }
}

/// Portfolio-tracking scenario with `n = 2` (stock, cash deviation) and scalar
/// trading rates. The deterministic regime consumes the same draws as the
/// medium regime and then pins the volatility at 0.15, so with equal streams
/// it is the medium instance at its nominal volatility.
pub fn financial_scenario<R: Rng + ?Sized>(regime: Regime, rng: &mut R) -> Scenario {
    let dims = Dims { n: 2, m1: 1, m2: 1 };
    let liq1 = rng.gen_range(0.7..1.3);
    let liq2 = rng.gen_range(1.2..2.0);
    let (lo, hi) = regime.sigma_range();
    let mut vol = rng.gen_range(lo..hi);
    if regime == Regime::Deterministic {
        vol = 0.15;
    }
    let mut jitter = |nom: &[f64]| -> Mat { Mat::diag(&nom.iter().map(|v| v * rng.gen_range(0.99..1.01)).collect::<Vec<_>>()) };
    let q1 = jitter(&[3.0, 1.0]);
    let r1 = jitter(&[0.5]);
    let g1 = jitter(&[2.0, 0.5]);
    let qbar1 = jitter(&[0.3, 0.1]);
    let rbar1 = jitter(&[0.05]);
    let q2 = jitter(&[2.0, 0.5]);
    let r2 = jitter(&[1.0]);
    let g2 = jitter(&[1.5, 0.3]);
    let qbar2 = jitter(&[0.5, 0.2]);
    let rbar2 = jitter(&[0.1]);
    let mut sc = Scenario::zeros(dims);
    sc.a1 = Mat::diag(&[-0.5, -0.3]);
    sc.a2 = Mat::diag(&[0.15, 0.1]);
    sc.b1 = Mat::col(&[liq1, -0.9 * liq1]);
    sc.b2 = Mat::col(&[liq2, -0.8 * liq2]);
    sc.sigma = vec![vol, 0.0];
    sc.q1 = q1;
    sc.r1 = r1;
    sc.g1 = g1;
    sc.qbar1 = qbar1;
    sc.rbar1 = rbar1;
    sc.q2 = q2;
    sc.r2 = r2;
    sc.g2 = g2;
    sc.qbar2 = qbar2;
    sc.rbar2 = rbar2;
    sc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if horizon.is_nan() || horizon <= 0.0 || steps == 0 {
            return Err(DfpsError::contract("time grid needs a positive horizon and at least one step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Time normalized to `[0, 1]`, the network time input.
    pub fn tau(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }
}

/// Initial states and Brownian increments of a batch of paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// `paths x n`.
    pub x0: Mat,
    /// `paths x steps`.
    pub dw: Mat,
}

impl Noise {
    /// Path `p` of environment `env` draws from its own stream, so adding
    /// paths leaves earlier ones unchanged. `X0 ~ N(0, x0_var I)`.
    pub fn sample(seed: u64, purpose: Purpose, env: u64, paths: usize, n: usize, grid: &TimeGrid, x0_var: f64) -> Noise {
        let mut x0 = Mat::zeros(paths, n);
        let mut dw = Mat::zeros(paths, grid.steps);
        let (sx, sw) = (x0_var.sqrt(), grid.dt().sqrt());
        for p in 0..paths {
            let mut rng = stream(seed, purpose, env, p as u64);
            for v in x0.row_mut(p) {
                *v = sx * rng.sample::<f64, _>(StandardNormal);
            }
            for v in dw.row_mut(p) {
                *v = sw * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Noise { x0, dw }
    }

    pub fn paths(&self) -> usize {
        self.x0.rows
    }

    pub fn steps(&self) -> usize {
        self.dw.cols
    }

    /// Sum consecutive blocks of `factor` increments: the same Brownian paths
    /// observed on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Noise> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(DfpsError::contract("coarsening factor must divide the step count"));
        }
        let steps = self.steps() / factor;
        let mut dw = Mat::zeros(self.paths(), steps);
        for p in 0..self.paths() {
            let src = self.dw.row(p);
            for (k, v) in dw.row_mut(p).iter_mut().enumerate() {
                *v = src[k * factor..(k + 1) * factor].iter().sum();
            }
        }
        Ok(Noise { x0: self.x0.clone(), dw })
    }

    /// Noise restricted to the first `paths` paths.
    pub fn take_paths(&self, paths: usize) -> Noise {
        let p = paths.min(self.paths());
        Noise {
            x0: Mat::from_vec(p, self.x0.cols, self.x0.data[..p * self.x0.cols].to_vec()),
            dw: Mat::from_vec(p, self.dw.cols, self.dw.data[..p * self.dw.cols].to_vec()),
        }
    }
}

/// Simulated trajectories on a uniform grid.
#[derive(Clone, Debug)]
pub struct PathBatch {
    /// `steps + 1` matrices of shape `paths x n`.
    pub x: Vec<Mat>,
    /// `steps` matrices of shape `paths x m1`.
    pub u1: Vec<Mat>,
    /// `steps` matrices of shape `paths x m2`.
    pub u2: Vec<Mat>,
    /// `paths x steps`.
    pub dw: Mat,
    /// `(steps + 1) x n`.
    pub xbar: Mat,
    /// `steps x m1`.
    pub u1bar: Mat,
    /// `steps x m2`.
    pub u2bar: Mat,
}

impl PathBatch {
    pub fn paths(&self) -> usize {
        self.dw.rows
    }

    pub fn steps(&self) -> usize {
        self.dw.cols
    }

    pub fn control(&self, player: Player) -> &[Mat] {
        match player {
            Player::Follower => &self.u1,
            Player::Leader => &self.u2,
        }
    }

    pub fn control_mean(&self, player: Player) -> &Mat {
        match player {
            Player::Follower => &self.u1bar,
            Player::Leader => &self.u2bar,
        }
    }

    /// Recompute the empirical means from the stored paths.
    pub fn refresh_means(&mut self) {
        self.xbar = stack_means(&self.x);
        self.u1bar = stack_means(&self.u1);
        self.u2bar = stack_means(&self.u2);
    }
}

/// Column means of `m`, summed in ascending row order.
pub fn column_mean(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / m.rows as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

fn stack_means(ms: &[Mat]) -> Mat {
    let cols = ms.first().map_or(0, |m| m.cols);
    let mut out = Mat::zeros(ms.len(), cols);
    for (k, m) in ms.iter().enumerate() {
        out.row_mut(k).copy_from_slice(&column_mean(m));
    }
    out
}

/// Where the drift and diffusion read the mean state from.
#[derive(Clone, Copy, Debug)]
pub enum MeanField<'a> {
    /// Running batch mean of the simulated states.
    Batch,
    /// A prescribed trajectory, `steps x n` (or longer).
    Given(&'a Mat),
}

/// Euler–Maruyama simulation. `policy(k, X_k, xbar_k)` returns the controls
/// `(u1_k, u2_k)` for all paths, where `xbar_k` is the mean state used in
/// the dynamics at step `k`.
pub fn simulate_paths<F>(sc: &Scenario, grid: &TimeGrid, noise: &Noise, mean_field: MeanField<'_>, mut policy: F) -> Result<PathBatch>
where
    F: FnMut(usize, &Mat, &[f64]) -> Result<(Mat, Mat)>,
{
    let Dims { n, m1, m2 } = sc.dims;
    let steps = grid.steps;
    let paths = noise.paths();
    if noise.x0.cols != n || noise.steps() != steps {
        return Err(DfpsError::contract("noise does not match the scenario and grid"));
    }
    if let MeanField::Given(beta) = mean_field {
        if beta.rows < steps || beta.cols != n {
            return Err(DfpsError::contract("prescribed mean field has the wrong shape"));
        }
    }
    let dt = grid.dt();
    let mut x = Vec::with_capacity(steps + 1);
    let mut u1s = Vec::with_capacity(steps);
    let mut u2s = Vec::with_capacity(steps);
    x.push(noise.x0.clone());
    for k in 0..steps {
        let xk = &x[k];
        let xbar = match mean_field {
            MeanField::Batch => column_mean(xk),
            MeanField::Given(beta) => beta.row(k).to_vec(),
        };
        let (u1, u2) = policy(k, xk, &xbar)?;
        if u1.shape() != (paths, m1) || u2.shape() != (paths, m2) {
            return Err(DfpsError::contract(format!("policy returned controls of the wrong shape at step {k}")));
        }
        let drift_c = add_vec(&sc.a2.matvec(&xbar), &sc.b);
        let diff_c = add_vec(&sc.c2.matvec(&xbar), &sc.sigma);
        let mut next = Mat::zeros(paths, n);
        for p in 0..paths {
            let xp = xk.row(p);
            let (u1p, u2p) = (u1.row(p), u2.row(p));
            let dwp = noise.dw[(p, k)];
            let ax = sc.a1.matvec(xp);
            let cx = sc.c1.matvec(xp);
            let bu1 = sc.b1.matvec(u1p);
            let bu2 = sc.b2.matvec(u2p);
            let du1 = sc.d1.matvec(u1p);
            let du2 = sc.d2.matvec(u2p);
            let out = next.row_mut(p);
            for i in 0..n {
                let drift = ax[i] + bu1[i] + bu2[i] + drift_c[i];
                let diff = cx[i] + du1[i] + du2[i] + diff_c[i];
                out[i] = xp[i] + drift * dt + diff * dwp;
            }
        }
        if !next.is_finite() {
            return Err(DfpsError::Simulation { step: k });
        }
        x.push(next);
        u1s.push(u1);
        u2s.push(u2);
    }
    let mut batch = PathBatch {
        x,
        u1: u1s,
        u2: u2s,
        dw: noise.dw.clone(),
        xbar: Mat::zeros(0, 0),
        u1bar: Mat::zeros(0, 0),
        u2bar: Mat::zeros(0, 0),
    };
    batch.refresh_means();
    Ok(batch)
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Per-path cost of `player`; the mean-field terms are common to all paths.
/// Their average is [`discrete_cost`].
pub fn path_costs(player: Player, batch: &PathBatch, sc: &Scenario, grid: &TimeGrid) -> Vec<f64> {
    let w = sc.weights(player);
    let dt = grid.dt();
    let u = batch.control(player);
    let ubar = batch.control_mean(player);
    let steps = batch.steps();
    let mut common = 0.0;
    for k in 0..steps {
        common += (w.qbar.quad(batch.xbar.row(k)) + w.rbar.quad(ubar.row(k))) * dt;
    }
    (0..batch.paths())
        .map(|p| {
            let mut c = common;
            for (x, uk) in batch.x.iter().zip(u) {
                c += (w.q.quad(x.row(p)) + w.r.quad(uk.row(p))) * dt;
            }
            c + w.g.quad(batch.x[steps].row(p))
        })
        .collect()
}

/// Left-endpoint discretized cost averaged over paths.
pub fn discrete_cost(player: Player, batch: &PathBatch, sc: &Scenario, grid: &TimeGrid) -> f64 {
    let costs = path_costs(player, batch, sc, grid);
    costs.iter().sum::<f64>() / costs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d1() -> Dims {
        Dims { n: 1, m1: 1, m2: 1 }
    }

    fn zero_controls(paths: usize, sc: &Scenario) -> impl FnMut(usize, &Mat, &[f64]) -> Result<(Mat, Mat)> + '_ {
        move |_, _, _| Ok((Mat::zeros(paths, sc.dims.m1), Mat::zeros(paths, sc.dims.m2)))
    }

    #[test]
    fn context_dims() {
        assert_eq!(d1().context_dim(), 18);
        assert_eq!(Dims { n: 2, m1: 1, m2: 1 }.context_dim(), 52);
    }

    #[test]
    fn context_round_trip() {
        let dims = Dims { n: 2, m1: 1, m2: 3 };
        let sc = sample_scenario(&mut ChaCha8Rng::seed_from_u64(5), &CoefficientRanges::default(), dims).unwrap();
        let xi = sc.context();
        assert_eq!(xi.len(), dims.context_dim());
        let back = Scenario::from_context(dims, &xi, sc.b.clone(), sc.sigma.clone()).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn zero_scenario_zero_context() {
        assert!(Scenario::zeros(d1()).context().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn table_ranges_respected() {
        let dims = Dims { n: 3, m1: 2, m2: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let sc = sample_scenario(&mut rng, &CoefficientRanges::default(), dims).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let v = sc.a1[(i, j)];
                    if i == j {
                        assert!((-1.0..=-0.4).contains(&v));
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
            assert!(sc.qbar1.data.iter().all(|&v| v == 0.0 || (0.099..=0.101).contains(&v)));
        }
    }

    #[test]
    fn point_mass_range() {
        let ranges = CoefficientRanges {
            b1: Range::full(0.5, 0.5),
            ..CoefficientRanges::default()
        };
        let sc = sample_scenario(&mut ChaCha8Rng::seed_from_u64(1), &ranges, Dims { n: 2, m1: 2, m2: 1 }).unwrap();
        assert!(sc.b1.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn non_positive_control_weight_rejected() {
        let ranges = CoefficientRanges {
            r: Range::diag(-0.1, 1.0),
            ..CoefficientRanges::default()
        };
        assert!(sample_scenario(&mut ChaCha8Rng::seed_from_u64(1), &ranges, d1()).is_err());
    }

    #[test]
    fn scenario_sampling_is_deterministic() {
        let a = scenario_for(3, 7, &CoefficientRanges::default(), Dims { n: 2, m1: 1, m2: 1 }).unwrap();
        let b = scenario_for(3, 7, &CoefficientRanges::default(), Dims { n: 2, m1: 1, m2: 1 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_dynamics() {
        let sc = Scenario::zeros(d1());
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let noise = Noise {
            x0: Mat::filled(3, 1, 1.0),
            dw: Mat::filled(3, 5, 0.3),
        };
        let batch = simulate_paths(&sc, &grid, &noise, MeanField::Batch, zero_controls(3, &sc)).unwrap();
        assert!(batch.x.iter().all(|x| x.data.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn explicit_euler_recursion() {
        let mut sc = Scenario::zeros(d1());
        sc.a1 = Mat::scalar(-1.0);
        let grid = TimeGrid::new(0.2, 2).unwrap();
        let noise = Noise {
            x0: Mat::scalar(1.0),
            dw: Mat::zeros(1, 2),
        };
        let batch = simulate_paths(&sc, &grid, &noise, MeanField::Batch, zero_controls(1, &sc)).unwrap();
        assert!((batch.x[1].data[0] - 0.9).abs() < 1e-15);
        assert!((batch.x[2].data[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn mean_field_from_batch() {
        let mut sc = Scenario::zeros(d1());
        sc.a2 = Mat::scalar(1.0);
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let noise = Noise {
            x0: Mat::col(&[0.0, 2.0]),
            dw: Mat::zeros(2, 1),
        };
        let batch = simulate_paths(&sc, &grid, &noise, MeanField::Batch, zero_controls(2, &sc)).unwrap();
        assert_eq!(batch.x[1].data, vec![1.0, 3.0]);
        assert_eq!(batch.xbar.data, vec![1.0, 2.0]);
    }

    #[test]
    fn explosion_reports_step() {
        let mut sc = Scenario::zeros(d1());
        sc.a1 = Mat::scalar(1e200);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = Noise {
            x0: Mat::scalar(1e200),
            dw: Mat::zeros(1, 4),
        };
        let err = simulate_paths(&sc, &grid, &noise, MeanField::Batch, zero_controls(1, &sc)).unwrap_err();
        assert!(matches!(err, DfpsError::Simulation { step: 0 }));
    }

    fn constant_batch(value: f64, terminal: f64, steps: usize) -> PathBatch {
        let mut x: Vec<Mat> = (0..steps).map(|_| Mat::scalar(value)).collect();
        x.push(Mat::scalar(terminal));
        let mut b = PathBatch {
            x,
            u1: (0..steps).map(|_| Mat::scalar(0.0)).collect(),
            u2: (0..steps).map(|_| Mat::scalar(0.0)).collect(),
            dw: Mat::zeros(1, steps),
            xbar: Mat::zeros(0, 0),
            u1bar: Mat::zeros(0, 0),
            u2bar: Mat::zeros(0, 0),
        };
        b.refresh_means();
        b
    }

    #[test]
    fn riemann_sum_of_constant() {
        let mut sc = Scenario::zeros(d1());
        sc.q1 = Mat::scalar(1.0);
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let batch = constant_batch(1.0, 3.0, 2);
        assert!((discrete_cost(Player::Follower, &batch, &sc, &grid) - 1.0).abs() < 1e-15);
        sc.g1 = Mat::scalar(2.0);
        assert!((discrete_cost(Player::Follower, &batch, &sc, &grid) - 19.0).abs() < 1e-12);
        assert_eq!(discrete_cost(Player::Leader, &batch, &sc, &grid), 0.0);
    }

    #[test]
    fn coarsened_increments_sum() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let fine = Noise::sample(1, Purpose::Test, 0, 3, 2, &grid, 0.1);
        let coarse = fine.coarsen(4).unwrap();
        assert_eq!(coarse.steps(), 2);
        let total: f64 = fine.dw.row(1).iter().sum();
        assert!((coarse.dw.row(1).iter().sum::<f64>() - total).abs() < 1e-14);
        assert!(fine.coarsen(3).is_err());
    }

    #[test]
    fn growing_batch_keeps_existing_paths() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let small = Noise::sample(2, Purpose::Test, 1, 2, 2, &grid, 0.1);
        let large = Noise::sample(2, Purpose::Test, 1, 5, 2, &grid, 0.1);
        assert_eq!(large.take_paths(2), small);
    }

    #[test]
    fn financial_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for regime in Regime::ALL {
            let sc = financial_scenario(regime, &mut rng);
            sc.validate().unwrap();
            assert_eq!(sc.a1[(0, 0)], -0.5);
            assert!((sc.b1[(1, 0)] / sc.b1[(0, 0)] + 0.9).abs() < 1e-14);
            if regime == Regime::Medium {
                assert!((0.10..=0.20).contains(&sc.sigma[0]));
            }
        }
        let det = financial_scenario(Regime::Deterministic, &mut ChaCha8Rng::seed_from_u64(9));
        let med = financial_scenario(Regime::Medium, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(det.sigma[0], 0.15);
        assert_eq!(det.b1, med.b1);
        assert_eq!(det.q1, med.q1);
    }

    #[test]
    fn scenario_json_uses_symbol_names() {
        let sc = Scenario::zeros(d1());
        let js = serde_json::to_string(&sc).unwrap();
        assert!(js.contains("\"A1\"") && js.contains("\"Qbar2\"") && js.contains("\"sigma\""));
        let back: Scenario = serde_json::from_str(&js).unwrap();
        assert_eq!(back, sc);
    }
}
