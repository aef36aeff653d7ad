//! Reference solutions for the follower's problem with constant coefficients
//! and the leader's control held at zero.
//!
//! Splitting `X = E[X] + (X - E[X])`, the value function is
//! `E<P(t) X~, X~> + <Pi(t) xbar, xbar> + 2 <phi(t), xbar> + c(t)` where,
//! with `Ahat = A1 + A2`, `Chat = C1 + C2`, `Qhat = Q1 + Qbar1`,
//! `Rhat = R1 + Rbar1`,
//!
//! ```text
//! -P'   = P A + A'P + C'PC + Q - (PB + C'PD)(R + D'PD)^{-1}(B'P + D'PC)
//! K     = Rhat + D'PD,  S = B'Pi + D'P Chat,  s = B'phi + D'P sigma
//! -Pi'  = Pi Ahat + Ahat'Pi + Qhat + Chat'P Chat - S'K^{-1}S
//! -phi' = Ahat'phi + Pi b + Chat'P sigma - S'K^{-1}s
//! -c'   = 2<phi, b> + <P sigma, sigma> - s'K^{-1}s
//! ```
//!
//! with `P(T) = Pi(T) = G`, `phi(T) = 0`, `c(T) = 0`. Alongside the
//! continuous equations sits an exact dynamic program for the
//! Euler-discretized problem and an exact moment evaluator for linear
//! feedback policies, which serve as independent checks.

use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::linalg::{dot, Mat};
use crate::model::{Scenario, TimeGrid};

/// Follower data of a scenario with the leader removed.
#[derive(Clone, Debug, PartialEq)]
pub struct LqProblem {
    pub a: Mat,
    pub a_mf: Mat,
    pub b: Mat,
    pub c: Mat,
    pub c_mf: Mat,
    pub d: Mat,
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
    pub q: Mat,
    pub q_mf: Mat,
    pub r: Mat,
    pub r_mf: Mat,
    pub g: Mat,
}

impl LqProblem {
    /// The follower's problem. Without `mean_field_weights` the `Qbar1` and
    /// `Rbar1` cost terms are dropped.
    pub fn follower(sc: &Scenario, mean_field_weights: bool) -> Self {
        let w = |m: &Mat| if mean_field_weights { m.clone() } else { Mat::zeros(m.rows, m.cols) };
        LqProblem {
            a: sc.a1.clone(),
            a_mf: sc.a2.clone(),
            b: sc.b1.clone(),
            c: sc.c1.clone(),
            c_mf: sc.c2.clone(),
            d: sc.d1.clone(),
            drift: sc.b.clone(),
            sigma: sc.sigma.clone(),
            q: sc.q1.clone(),
            q_mf: w(&sc.qbar1),
            r: sc.r1.clone(),
            r_mf: w(&sc.rbar1),
            g: sc.g1.clone(),
        }
    }

    fn a_hat(&self) -> Mat {
        self.a.add(&self.a_mf)
    }

    fn c_hat(&self) -> Mat {
        self.c.add(&self.c_mf)
    }

    fn q_hat(&self) -> Mat {
        self.q.add(&self.q_mf)
    }

    fn r_hat(&self) -> Mat {
        self.r.add(&self.r_mf)
    }
}

#[derive(Clone, Debug)]
struct ValueState {
    p: Mat,
    pi: Mat,
    phi: Vec<f64>,
    c: f64,
}

impl ValueState {
    fn axpy(&self, h: f64, d: &ValueState) -> ValueState {
        ValueState {
            p: self.p.add(&d.p.scale(h)),
            pi: self.pi.add(&d.pi.scale(h)),
            phi: self.phi.iter().zip(&d.phi).map(|(a, b)| a + h * b).collect(),
            c: self.c + h * d.c,
        }
    }
}

/// Backward-time derivative `-d/dt` of the value coefficients.
fn value_rhs(pr: &LqProblem, s: &ValueState) -> Result<ValueState> {
    let (a, b, c, d) = (&pr.a, &pr.b, &pr.c, &pr.d);
    let p = &s.p;
    let pb_cpd = p.matmul(b).add(&c.t().matmul(p).matmul(d));
    let h = pr.r.add(&d.t().matmul(p).matmul(d));
    let h_inv = h.inverse().map_err(|_| DfpsError::Singular {
        context: "R + D'PD in the centered Riccati equation".into(),
    })?;
    let dp = p
        .matmul(a)
        .add(&a.t().matmul(p))
        .add(&c.t().matmul(p).matmul(c))
        .add(&pr.q)
        .sub(&pb_cpd.matmul(&h_inv).matmul(&pb_cpd.t()));

    let (ah, ch) = (pr.a_hat(), pr.c_hat());
    let k = pr.r_hat().add(&d.t().matmul(p).matmul(d));
    let k_inv = k.inverse().map_err(|_| DfpsError::Singular {
        context: "Rhat + D'PD in the mean Riccati equation".into(),
    })?;
    let sm = b.t().matmul(&s.pi).add(&d.t().matmul(p).matmul(&ch));
    let sv: Vec<f64> = b.t_matvec(&s.phi).iter().zip(d.t().matvec(&p.matvec(&pr.sigma))).map(|(x, y)| x + y).collect();
    let dpi =
        s.pi.matmul(&ah)
            .add(&ah.t().matmul(&s.pi))
            .add(&pr.q_hat())
            .add(&ch.t().matmul(p).matmul(&ch))
            .sub(&sm.t().matmul(&k_inv).matmul(&sm));
    let k_inv_s = k_inv.matvec(&sv);
    let st_kis = sm.t_matvec(&k_inv_s);
    let dphi: Vec<f64> = ah
        .t_matvec(&s.phi)
        .iter()
        .zip(s.pi.matvec(&pr.drift))
        .zip(ch.t_matvec(&p.matvec(&pr.sigma)))
        .zip(&st_kis)
        .map(|(((a, b), c), d)| a + b + c - d)
        .collect();
    let dc = 2.0 * dot(&s.phi, &pr.drift) + p.quad(&pr.sigma) - dot(&sv, &k_inv_s);
    Ok(ValueState {
        p: dp,
        pi: dpi,
        phi: dphi,
        c: dc,
    })
}

/// Value-function coefficients on the grid, index `k` at time `t_k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub p: Vec<Mat>,
    pub pi: Vec<Mat>,
    pub phi: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

/// Integrate the value equations backward from `T` with the classical
/// fourth-order Runge–Kutta method on `grid`, symmetrizing after each step.
pub fn solve_mf_riccati(pr: &LqProblem, grid: &TimeGrid) -> Result<RiccatiSolution> {
    let n = pr.a.rows;
    let steps = grid.steps;
    let h = grid.dt();
    let mut s = ValueState {
        p: pr.g.clone(),
        pi: pr.g.clone(),
        phi: vec![0.0; n],
        c: 0.0,
    };
    let mut out = vec![s.clone()];
    for _ in 0..steps {
        let k1 = value_rhs(pr, &s)?;
        let k2 = value_rhs(pr, &s.axpy(0.5 * h, &k1))?;
        let k3 = value_rhs(pr, &s.axpy(0.5 * h, &k2))?;
        let k4 = value_rhs(pr, &s.axpy(h, &k3))?;
        let mut next = s.axpy(h / 6.0, &k1).axpy(h / 3.0, &k2).axpy(h / 3.0, &k3).axpy(h / 6.0, &k4);
        next.p = next.p.symmetrize();
        next.pi = next.pi.symmetrize();
        if !(next.p.is_finite() && next.pi.is_finite() && next.c.is_finite()) {
            return Err(DfpsError::Singular {
                context: "Riccati integration diverged".into(),
            });
        }
        out.push(next.clone());
        s = next;
    }
    out.reverse();
    Ok(RiccatiSolution {
        grid: *grid,
        p: out.iter().map(|v| v.p.clone()).collect(),
        pi: out.iter().map(|v| v.pi.clone()).collect(),
        phi: out.iter().map(|v| v.phi.clone()).collect(),
        c: out.iter().map(|v| v.c).collect(),
    })
}

/// Optimal cost for an initial state with the given mean and covariance.
pub fn riccati_reference_cost(sol: &RiccatiSolution, x0_mean: &[f64], x0_cov: &Mat) -> f64 {
    sol.p[0].matmul(x0_cov).trace() + sol.pi[0].quad(x0_mean) + 2.0 * dot(&sol.phi[0], x0_mean) + sol.c[0]
}

/// Linear feedback `u_k = ubar_k + K_k (X_k - xbar_k)`, where the mean
/// control is itself affine in the mean state: `ubar_k = Kbar_k xbar_k + kbar_k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub gain: Vec<Mat>,
    pub mean_gain: Vec<Mat>,
    pub mean_offset: Vec<Vec<f64>>,
}

impl LinearPolicy {
    pub fn mean_control(&self, k: usize, xbar: &[f64]) -> Vec<f64> {
        self.mean_gain[k].matvec(xbar).iter().zip(&self.mean_offset[k]).map(|(a, b)| a + b).collect()
    }

    /// Controls for all paths at step `k` given the mean state.
    pub fn controls(&self, k: usize, x: &Mat, xbar: &[f64]) -> Mat {
        let ubar = self.mean_control(k, xbar);
        let mut centered = x.clone();
        for r in 0..x.rows {
            centered.row_mut(r).iter_mut().zip(xbar).for_each(|(v, m)| *v -= m);
        }
        let mut u = centered.matmul(&self.gain[k].t());
        for r in 0..u.rows {
            u.row_mut(r).iter_mut().zip(&ubar).for_each(|(v, m)| *v += m);
        }
        u
    }
}

/// Feedback of the continuous solution sampled on its grid.
pub fn riccati_policy(pr: &LqProblem, sol: &RiccatiSolution) -> Result<LinearPolicy> {
    let steps = sol.grid.steps;
    let (b, c, d) = (&pr.b, &pr.c, &pr.d);
    let ch = pr.c_hat();
    let mut gain = Vec::with_capacity(steps);
    let mut mean_gain = Vec::with_capacity(steps);
    let mut mean_offset = Vec::with_capacity(steps);
    for k in 0..steps {
        let p = &sol.p[k];
        let h = pr.r.add(&d.t().matmul(p).matmul(d));
        let l = b.t().matmul(p).add(&d.t().matmul(p).matmul(c));
        gain.push(h.solve(&l)?.scale(-1.0));
        let km = pr.r_hat().add(&d.t().matmul(p).matmul(d));
        let sm = b.t().matmul(&sol.pi[k]).add(&d.t().matmul(p).matmul(&ch));
        let sv: Vec<f64> = b
            .t_matvec(&sol.phi[k])
            .iter()
            .zip(d.t().matvec(&p.matvec(&pr.sigma)))
            .map(|(x, y)| x + y)
            .collect();
        mean_gain.push(km.solve(&sm)?.scale(-1.0));
        mean_offset.push(km.solve(&Mat::col(&sv))?.data.iter().map(|v| -v).collect());
    }
    Ok(LinearPolicy { gain, mean_gain, mean_offset })
}

/// Exact dynamic program of the Euler-discretized problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscreteSolution {
    pub p: Vec<Mat>,
    pub pi: Vec<Mat>,
    pub phi: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub policy: LinearPolicy,
}

impl DiscreteSolution {
    pub fn cost(&self, x0_mean: &[f64], x0_cov: &Mat) -> f64 {
        self.p[0].matmul(x0_cov).trace() + self.pi[0].quad(x0_mean) + 2.0 * dot(&self.phi[0], x0_mean) + self.c[0]
    }
}

pub fn discrete_lqr_oracle(pr: &LqProblem, grid: &TimeGrid) -> Result<DiscreteSolution> {
    let n = pr.a.rows;
    let steps = grid.steps;
    let dt = grid.dt();
    let (b, c, d) = (&pr.b, &pr.c, &pr.d);
    let eye = Mat::identity(n);
    let f = eye.add(&pr.a.scale(dt));
    let fh = eye.add(&pr.a_hat().scale(dt));
    let ch = pr.c_hat();
    let (qh, rh) = (pr.q_hat(), pr.r_hat());

    let mut p = vec![pr.g.clone(); steps + 1];
    let mut pi = vec![pr.g.clone(); steps + 1];
    let mut phi = vec![vec![0.0; n]; steps + 1];
    let mut cc = vec![0.0; steps + 1];
    let mut gain = vec![Mat::zeros(0, 0); steps];
    let mut mean_gain = vec![Mat::zeros(0, 0); steps];
    let mut mean_offset = vec![Vec::new(); steps];
    for k in (0..steps).rev() {
        let pn = p[k + 1].clone();
        let pin = pi[k + 1].clone();
        let phin = phi[k + 1].clone();

        let h =
            pr.r.scale(dt)
                .add(&b.t().matmul(&pn).matmul(b).scale(dt * dt))
                .add(&d.t().matmul(&pn).matmul(d).scale(dt));
        let l = b.t().matmul(&pn).matmul(&f).scale(dt).add(&d.t().matmul(&pn).matmul(c).scale(dt));
        let hl = h.solve(&l)?;
        p[k] =
            pr.q.scale(dt)
                .add(&f.t().matmul(&pn).matmul(&f))
                .add(&c.t().matmul(&pn).matmul(c).scale(dt))
                .sub(&l.t().matmul(&hl))
                .symmetrize();
        gain[k] = hl.scale(-1.0);

        let hm = rh
            .scale(dt)
            .add(&b.t().matmul(&pin).matmul(b).scale(dt * dt))
            .add(&d.t().matmul(&pn).matmul(d).scale(dt));
        let lm = b.t().matmul(&pin).matmul(&fh).scale(dt).add(&d.t().matmul(&pn).matmul(&ch).scale(dt));
        let w: Vec<f64> = pin.matvec(&pr.drift).iter().zip(&phin).map(|(x, y)| x * dt + y).collect();
        let lv: Vec<f64> = b
            .t_matvec(&w)
            .iter()
            .zip(d.t().matvec(&pn.matvec(&pr.sigma)))
            .map(|(x, y)| dt * (x + y))
            .collect();
        let hml = hm.solve(&lm)?;
        let hmv = hm.solve(&Mat::col(&lv))?.data;
        pi[k] = qh
            .scale(dt)
            .add(&fh.t().matmul(&pin).matmul(&fh))
            .add(&ch.t().matmul(&pn).matmul(&ch).scale(dt))
            .sub(&lm.t().matmul(&hml))
            .symmetrize();
        let lm_hmv = lm.t_matvec(&hmv);
        phi[k] = fh
            .t_matvec(&w)
            .iter()
            .zip(ch.t_matvec(&pn.matvec(&pr.sigma)))
            .zip(&lm_hmv)
            .map(|((a, s), m)| a + dt * s - m)
            .collect();
        cc[k] = cc[k + 1] + 2.0 * dt * dot(&phin, &pr.drift) + dt * dt * pin.quad(&pr.drift) + dt * pn.quad(&pr.sigma) - dot(&lv, &hmv);
        mean_gain[k] = hml.scale(-1.0);
        mean_offset[k] = hmv.iter().map(|v| -v).collect();
    }
    Ok(DiscreteSolution {
        p,
        pi,
        phi,
        c: cc,
        policy: LinearPolicy { gain, mean_gain, mean_offset },
    })
}

/// Exact cost of a linear feedback policy on the Euler-discretized problem,
/// by propagating the mean and covariance of the state.
pub fn evaluate_linear_policy(pr: &LqProblem, grid: &TimeGrid, policy: &LinearPolicy, x0_mean: &[f64], x0_cov: &Mat) -> f64 {
    let n = pr.a.rows;
    let dt = grid.dt();
    let eye = Mat::identity(n);
    let f = eye.add(&pr.a.scale(dt));
    let fh = eye.add(&pr.a_hat().scale(dt));
    let ch = pr.c_hat();
    let (qh, rh) = (pr.q_hat(), pr.r_hat());
    let mut mean = x0_mean.to_vec();
    let mut cov = x0_cov.clone();
    let mut cost = 0.0;
    for k in 0..grid.steps {
        let kk = &policy.gain[k];
        let ubar = policy.mean_control(k, &mean);
        cost += dt * (pr.q.matmul(&cov).trace() + kk.t().matmul(&pr.r).matmul(kk).matmul(&cov).trace() + qh.quad(&mean) + rh.quad(&ubar));
        let nu: Vec<f64> = ch
            .matvec(&mean)
            .iter()
            .zip(pr.d.matvec(&ubar))
            .zip(&pr.sigma)
            .map(|((a, b), c)| a + b + c)
            .collect();
        let closed = f.add(&pr.b.matmul(kk).scale(dt));
        let diff = pr.c.add(&pr.d.matmul(kk));
        let nu_col = Mat::col(&nu);
        cov = closed
            .matmul(&cov)
            .matmul(&closed.t())
            .add(&diff.matmul(&cov).matmul(&diff.t()).scale(dt))
            .add(&nu_col.matmul(&nu_col.t()).scale(dt));
        mean = fh
            .matvec(&mean)
            .iter()
            .zip(pr.b.matvec(&ubar))
            .zip(&pr.drift)
            .map(|((a, b), c)| a + dt * (b + c))
            .collect();
    }
    cost + pr.g.matmul(&cov).trace() + pr.g.quad(&mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, Scenario};

    fn scalar(a: f64, b: f64, q: f64, r: f64, g: f64) -> LqProblem {
        let mut sc = Scenario::zeros(Dims { n: 1, m1: 1, m2: 1 });
        sc.a1 = Mat::scalar(a);
        sc.b1 = Mat::scalar(b);
        sc.q1 = Mat::scalar(q);
        sc.r1 = Mat::scalar(r);
        sc.g1 = Mat::scalar(g);
        LqProblem::follower(&sc, true)
    }

    #[test]
    fn pure_running_cost_is_linear_in_time() {
        let pr = scalar(0.0, 0.0, 0.7, 1.0, 2.0);
        let grid = TimeGrid::new(1.5, 30).unwrap();
        let sol = solve_mf_riccati(&pr, &grid).unwrap();
        for k in 0..=30 {
            let want = 2.0 + 0.7 * (1.5 - grid.t(k));
            assert!((sol.p[k].data[0] - want).abs() < 1e-12);
            assert!((sol.pi[k].data[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_riccati_matches_closed_form() {
        let pr = scalar(0.0, 1.0, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let sol = solve_mf_riccati(&pr, &grid).unwrap();
        for k in 0..=100 {
            let want = 1.0 / (1.0 + 1.0 - grid.t(k));
            assert!((sol.p[k].data[0] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn one_step_oracle_matches_calculus() {
        // x1 = x0 + (a x0 + b u) dt, cost q x0^2 dt + r u^2 dt + g x1^2, deterministic x0.
        let (a, b, q, r, g, dt, x0) = (-0.4, 0.9, 1.2, 0.8, 1.5, 0.25, 0.7);
        let pr = scalar(a, b, q, r, g);
        let grid = TimeGrid::new(dt, 1).unwrap();
        let sol = discrete_lqr_oracle(&pr, &grid).unwrap();
        let f = 1.0 + a * dt;
        let u = -(g * b * dt * f * x0) / (r * dt + g * b * b * dt * dt);
        let x1 = f * x0 + b * dt * u;
        let want = q * x0 * x0 * dt + r * u * u * dt + g * x1 * x1;
        let got = sol.cost(&[x0], &Mat::scalar(0.0));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn trivial_problem_costs_terminal_only() {
        let pr = scalar(0.0, 0.0, 0.0, 1.0, 1.3);
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let sol = discrete_lqr_oracle(&pr, &grid).unwrap();
        assert!(sol.policy.gain.iter().all(|k| k.data[0] == 0.0));
        let cost = sol.cost(&[0.4], &Mat::scalar(0.1));
        assert!((cost - 1.3 * (0.1 + 0.16)).abs() < 1e-14);
    }

    #[test]
    fn oracle_value_equals_policy_evaluation() {
        let sc = crate::model::sample_scenario(
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(17),
            &crate::model::CoefficientRanges::default(),
            Dims { n: 2, m1: 1, m2: 1 },
        )
        .unwrap();
        let pr = LqProblem::follower(&sc, true);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let sol = discrete_lqr_oracle(&pr, &grid).unwrap();
        let mean = [0.2, -0.1];
        let cov = Mat::diag(&[0.1, 0.1]);
        let v = sol.cost(&mean, &cov);
        let e = evaluate_linear_policy(&pr, &grid, &sol.policy, &mean, &cov);
        assert!((v - e).abs() < 1e-10 * v.abs().max(1.0), "{v} vs {e}");
        assert!(sol.p.iter().all(|p| p.is_symmetric(1e-12) && p.is_psd(1e-10)));
    }

    #[test]
    fn null_control_is_never_better_than_oracle() {
        let mut sc = Scenario::zeros(Dims { n: 1, m1: 1, m2: 1 });
        sc.a1 = Mat::scalar(-0.5);
        sc.b1 = Mat::scalar(1.0);
        sc.d1 = Mat::scalar(0.05);
        sc.c1 = Mat::scalar(0.1);
        sc.b = vec![0.3];
        sc.sigma = vec![0.2];
        sc.q1 = Mat::scalar(1.0);
        sc.r1 = Mat::scalar(1.0);
        sc.g1 = Mat::scalar(1.0);
        sc.qbar1 = Mat::scalar(0.1);
        sc.rbar1 = Mat::scalar(0.1);
        let pr = LqProblem::follower(&sc, true);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let sol = discrete_lqr_oracle(&pr, &grid).unwrap();
        let zero = LinearPolicy {
            gain: vec![Mat::scalar(0.0); 50],
            mean_gain: vec![Mat::scalar(0.0); 50],
            mean_offset: vec![vec![0.0]; 50],
        };
        let opt = sol.cost(&[0.0], &Mat::scalar(0.1));
        let null = evaluate_linear_policy(&pr, &grid, &zero, &[0.0], &Mat::scalar(0.1));
        assert!(opt < null);
    }
}
