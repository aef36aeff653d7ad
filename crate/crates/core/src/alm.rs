//! Augmented-Lagrangian bookkeeping for the mean-field consistency
//! constraints `E[u_i] = alpha_i` and `E[X] = beta_i`.
//!
//! Trajectories are `steps x dim` matrices on the time grid. The discrete
//! norm is `||f||_dt = (dt * sum_k |f_k|^2)^(1/2)`; when several scenarios are
//! involved their trajectories are stacked and the result divided by the
//! scenario count, i.e. the root mean square of the per-scenario norms.

use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::linalg::Mat;
use crate::model::Player;

pub fn dt_inner(a: &Mat, b: &Mat, dt: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "dt_inner shape mismatch");
    dt * a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>()
}

pub fn dt_norm(a: &Mat, dt: f64) -> f64 {
    dt_inner(a, a, dt).sqrt()
}

/// Root mean square of per-scenario `dt` norms.
pub fn rms_dt_norm(trajs: &[Mat], dt: f64) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    let sq: f64 = trajs.iter().map(|t| dt_inner(t, t, dt)).sum();
    (sq / trajs.len() as f64).sqrt()
}

/// First `rows` rows of `m`.
pub fn head_rows(m: &Mat, rows: usize) -> Mat {
    Mat::from_vec(rows, m.cols, m.data[..rows * m.cols].to_vec())
}

/// Consistency residuals of one player, stacked over scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub v_u: f64,
    pub v_x: f64,
    /// `ubar - alpha` per scenario.
    #[serde(skip)]
    pub r_u: Vec<Mat>,
    /// `xbar - beta` per scenario, times `0..steps`.
    #[serde(skip)]
    pub r_x: Vec<Mat>,
}

impl Violation {
    pub fn max(&self) -> f64 {
        self.v_u.max(self.v_x)
    }
}

/// Residual trajectories for one scenario. `xbar` may include the terminal
/// time; only the first `steps` rows enter.
pub fn residuals(ubar: &Mat, alpha: &Mat, xbar: &Mat, beta: &Mat) -> (Mat, Mat) {
    let steps = ubar.rows;
    let r_u = ubar.sub(&head_rows(alpha, steps));
    let r_x = head_rows(xbar, steps).sub(&head_rows(beta, steps));
    (r_u, r_x)
}

pub fn violation_norms(r_u: Vec<Mat>, r_x: Vec<Mat>, dt: f64) -> Violation {
    Violation {
        v_u: rms_dt_norm(&r_u, dt),
        v_x: rms_dt_norm(&r_x, dt),
        r_u,
        r_x,
    }
}

/// Value of the augmented Lagrangian of one player on one scenario.
#[allow(clippy::too_many_arguments)]
pub fn augmented_lagrangian(cost: f64, fbsde_residual: f64, r_u: &Mat, r_x: &Mat, lambda_u: &Mat, lambda_x: &Mat, rho_u: f64, rho_x: f64, dt: f64) -> f64 {
    cost + fbsde_residual
        + dt_inner(lambda_u, r_u, dt)
        + dt_inner(lambda_x, r_x, dt)
        + 0.5 * rho_u * dt_inner(r_u, r_u, dt)
        + 0.5 * rho_x * dt_inner(r_x, r_x, dt)
}

/// `-<lambda, viol>_dt + (eta/2) ||lambda - lambda_prev||^2_dt`.
pub fn dual_loss(lambda: &Mat, viol: &Mat, lambda_prev: &Mat, eta: f64, dt: f64) -> f64 {
    let d = lambda.sub(lambda_prev);
    -dt_inner(lambda, viol, dt) + 0.5 * eta * dt_inner(&d, &d, dt)
}

/// Minimizer of [`dual_loss`] over all trajectories: `lambda_prev + viol / eta`.
pub fn proximal_target(viol: &Mat, lambda_prev: &Mat, eta: f64) -> Mat {
    let mut t = lambda_prev.clone();
    t.axpy(1.0 / eta, viol);
    t
}

/// `(eps_opt + eps_net) / (rho - 1/eta)`; undefined unless `rho > 1/eta`.
pub fn residual_bound(eps_opt: f64, eps_net: f64, rho: f64, eta: f64) -> Result<f64> {
    if eta.is_nan() || eta <= 0.0 || rho <= 1.0 / eta {
        return Err(DfpsError::Undefined(format!("feasibility bound needs rho > 1/eta (rho = {rho}, eta = {eta})")));
    }
    Ok((eps_opt + eps_net) / (rho - 1.0 / eta))
}

/// `lambda_next - lambda_cur - rho * viol`.
pub fn lambda_update_residual(lambda_next: &Mat, lambda_cur: &Mat, rho: f64, viol: &Mat) -> Mat {
    let mut e = lambda_next.sub(lambda_cur);
    e.axpy(-rho, viol);
    e
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Control,
    State,
}

/// One evaluation of the feasibility bound on a multiplier update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub player: Player,
    pub channel: Channel,
    pub iteration: usize,
    pub rho: f64,
    pub eta: f64,
    pub residual_norm: f64,
    pub eps_opt: f64,
    pub eps_net: f64,
    /// `None` when `rho <= 1/eta`.
    pub bound: Option<f64>,
}

impl BoundCheck {
    /// Measure the bound from the multiplier trajectories before and after an
    /// update, one entry per scenario.
    #[allow(clippy::too_many_arguments)]
    pub fn measure(
        player: Player,
        channel: Channel,
        iteration: usize,
        lambda_cur: &[Mat],
        lambda_next: &[Mat],
        viol: &[Mat],
        rho: f64,
        eta: f64,
        dt: f64,
    ) -> Self {
        let mut opt = Vec::with_capacity(viol.len());
        let mut net = Vec::with_capacity(viol.len());
        for ((cur, next), r) in lambda_cur.iter().zip(lambda_next).zip(viol) {
            opt.push(next.sub(&proximal_target(r, cur, eta)));
            net.push(lambda_update_residual(next, cur, rho, r));
        }
        let eps_opt = rms_dt_norm(&opt, dt);
        let eps_net = rms_dt_norm(&net, dt);
        BoundCheck {
            player,
            channel,
            iteration,
            rho,
            eta,
            residual_norm: rms_dt_norm(viol, dt),
            eps_opt,
            eps_net,
            bound: residual_bound(eps_opt, eps_net, rho, eta).ok(),
        }
    }

    /// `None` when the bound does not apply.
    pub fn holds(&self, slack: f64) -> Option<bool> {
        self.bound.map(|b| self.residual_norm <= b + slack)
    }
}

/// Penalties and proximal step of both players.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmState {
    pub rho_u: [f64; 2],
    pub rho_x: [f64; 2],
    pub eta: f64,
    /// Growth factor applied to a stalled channel.
    pub tau: f64,
    /// Last recorded `(V_u, V_x)` per player.
    pub last: [Option<(f64, f64)>; 2],
}

impl Default for AlmState {
    fn default() -> Self {
        AlmState {
            rho_u: [0.05; 2],
            rho_x: [0.10; 2],
            eta: 1.0,
            tau: 1.1,
            last: [None; 2],
        }
    }
}

impl AlmState {
    /// All penalties and the growth factor at zero: plain penalty-free
    /// training.
    pub fn disabled() -> Self {
        AlmState {
            rho_u: [0.0; 2],
            rho_x: [0.0; 2],
            eta: 1.0,
            tau: 1.0,
            last: [None; 2],
        }
    }

    /// Grow the penalty of every channel that is still infeasible and
    /// improved by no more than 5% since the previous record.
    pub fn adapt(&mut self, player: Player, v_u: f64, v_x: f64, eps_tol: f64) {
        let i = player.index();
        if let Some((pu, px)) = self.last[i] {
            self.rho_u[i] = grow(self.rho_u[i], pu, v_u, eps_tol, self.tau);
            self.rho_x[i] = grow(self.rho_x[i], px, v_x, eps_tol, self.tau);
        }
        self.last[i] = Some((v_u, v_x));
    }
}

/// Penalty update rule for a single channel.
pub fn grow(rho: f64, prev: f64, cur: f64, eps_tol: f64, tau: f64) -> f64 {
    if cur >= eps_tol && cur > 0.95 * prev {
        rho * tau
    } else {
        rho
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(steps: usize) -> Mat {
        Mat::filled(steps, 1, 1.0)
    }

    #[test]
    fn unit_residual_has_unit_norm() {
        for steps in [1, 7, 100] {
            let dt = 1.0 / steps as f64;
            assert!((dt_norm(&ones(steps), dt) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matched_means_have_zero_violation() {
        let u = Mat::from_rows(&[vec![0.1], vec![0.2]]);
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let (ru, rx) = residuals(&u, &u, &x, &x);
        let v = violation_norms(vec![ru], vec![rx], 0.5);
        assert_eq!((v.v_u, v.v_x), (0.0, 0.0));
    }

    #[test]
    fn lagrangian_reduces_without_constraints() {
        let z = Mat::zeros(4, 1);
        let l = augmented_lagrangian(1.5, 0.25, &z, &z, &z, &z, 3.0, 3.0, 0.25);
        assert_eq!(l, 1.75);
    }

    #[test]
    fn penalty_of_unit_residual() {
        let z = Mat::zeros(10, 1);
        let l = augmented_lagrangian(0.0, 0.0, &ones(10), &z, &z, &z, 2.0, 0.0, 0.1);
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dual_loss_closed_form() {
        let steps = 20;
        let dt = 1.0 / steps as f64;
        let z = Mat::zeros(steps, 1);
        assert_eq!(dual_loss(&z, &z, &z, 1.0, dt), 0.0);
        let target = proximal_target(&ones(steps), &z, 1.0);
        assert_eq!(target, ones(steps));
        assert!((dual_loss(&target, &ones(steps), &z, 1.0, dt) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn penalty_rule() {
        assert!((grow(1.0, 0.10, 0.10, 0.02, 1.1) - 1.1).abs() < 1e-15);
        assert_eq!(grow(1.0, 0.10, 0.05, 0.02, 1.1), 1.0);
        assert_eq!(grow(1.0, 0.10, 0.01, 0.02, 1.1), 1.0);
    }

    #[test]
    fn first_record_never_grows() {
        let mut s = AlmState::default();
        s.adapt(Player::Follower, 1.0, 1.0, 0.02);
        assert_eq!(s.rho_u[0], 0.05);
        s.adapt(Player::Follower, 1.0, 0.5, 0.02);
        assert!((s.rho_u[0] - 0.055).abs() < 1e-15);
        assert_eq!(s.rho_x[0], 0.10);
    }

    #[test]
    fn bound_formula() {
        assert_eq!(residual_bound(0.0, 0.0, 2.0, 1.0).unwrap(), 0.0);
        assert_eq!(residual_bound(0.5, 0.5, 2.0, 1.0).unwrap(), 1.0);
        assert!(matches!(residual_bound(1.0, 0.0, 1.0, 1.0), Err(DfpsError::Undefined(_))));
        let mut prev = f64::INFINITY;
        for rho in [2.0, 10.0, 1e3, 1e6] {
            let b = residual_bound(1.0, 0.0, rho, 1.0).unwrap();
            assert!(b < prev);
            prev = b;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn exact_update_has_zero_net_residual() {
        let cur = Mat::col(&[0.1, 0.2, 0.3]);
        let r = Mat::col(&[1.0, -1.0, 0.5]);
        let mut next = cur.clone();
        next.axpy(2.0, &r);
        assert!(lambda_update_residual(&next, &cur, 2.0, &r).max_abs() < 1e-15);
        let frozen = lambda_update_residual(&cur, &cur, 2.0, &r);
        assert_eq!(frozen, r.scale(-2.0));
    }
}
