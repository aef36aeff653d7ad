//! Stationarity control laws, the follower's affine response and the
//! one-step defect form of the adjoint equations.
//!
//! For player `i` the adjoint pair solves, with the mean-field driver terms
//! replaced by the multiplier `lambda_x`,
//!
//! ```text
//! dY = -(A1' Y + C1' Z + Qi X + lambda_x) dt + Z dW,   Y(T) = Gi X(T)
//! ```
//!
//! and the control satisfies `Ri u + B' Y + D' Z + lambda_u = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};
use crate::linalg::Mat;
use crate::model::{Player, Scenario};

/// `-(y B + z D + lambda) R^{-T}` row by row, i.e. `u = -R^{-1}(B'Y + D'Z + lambda)`
/// for every path. `lambda` is either one row shared by all paths or one row
/// per path.
pub fn stationary_control(y: &Mat, z: &Mat, lambda: &Mat, b: &Mat, d: &Mat, r: &Mat) -> Result<Mat> {
    let r_inv_t = r.inverse().map_err(|_| DfpsError::contract("control weight is singular"))?.t();
    let mut s = y.matmul(b);
    s.add_assign(&z.matmul(d));
    match lambda.rows {
        1 => {
            for row in 0..s.rows {
                for (v, l) in s.row_mut(row).iter_mut().zip(&lambda.data) {
                    *v += l;
                }
            }
        }
        rows if rows == s.rows => s.add_assign(lambda),
        _ => return Err(DfpsError::contract("multiplier rows match neither one nor the path count")),
    }
    Ok(s.matmul(&r_inv_t).scale(-1.0))
}

/// `u1 = -R1^{-1}(B1'Y1 + D1'Z1 + lambda_u1)`.
pub fn follower_control(y: &Mat, z: &Mat, lambda_u: &Mat, sc: &Scenario) -> Result<Mat> {
    stationary_control(y, z, lambda_u, &sc.b1, &sc.d1, &sc.r1)
}

/// `u2 = -R2^{-1}(Btilde2_k'Y2 + Dtilde2_k'Z2 + lambda_u2)`.
pub fn leader_control(y: &Mat, z: &Mat, lambda_u: &Mat, agg: &AggregatedLeaderCoeffs, sc: &Scenario, k: usize) -> Result<Mat> {
    stationary_control(y, z, lambda_u, &agg.btilde2[k], &agg.dtilde2[k], &sc.r2)
}

/// Linearized follower response `u1 = M11_k X + M12_k u2 + m_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseSensitivities {
    /// Per step, `m1 x n`.
    pub m11: Vec<Mat>,
    /// Per step, `m1 x m2`.
    pub m12: Vec<Mat>,
    /// Per step, length `m1`.
    pub offset: Vec<Vec<f64>>,
}

impl ResponseSensitivities {
    pub fn steps(&self) -> usize {
        self.m11.len()
    }

    /// Follower controls for all paths at step `k`.
    pub fn respond(&self, k: usize, x: &Mat, u2: &Mat) -> Mat {
        let mut u1 = x.matmul(&self.m11[k].t());
        u1.add_assign(&u2.matmul(&self.m12[k].t()));
        for r in 0..u1.rows {
            for (v, c) in u1.row_mut(r).iter_mut().zip(&self.offset[k]) {
                *v += c;
            }
        }
        u1
    }

    /// Same response with the leader-control channel removed.
    pub fn masked(&self) -> Self {
        let mut s = self.clone();
        s.m12.iter_mut().for_each(|m| m.data.iter_mut().for_each(|v| *v = 0.0));
        s
    }

    pub fn is_finite(&self) -> bool {
        self.m11.iter().chain(&self.m12).all(Mat::is_finite) && self.offset.iter().flatten().all(|v| v.is_finite())
    }
}

/// The leader's control matrices after substituting the follower's response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedLeaderCoeffs {
    /// `B1 M12_k + B2`.
    pub btilde2: Vec<Mat>,
    /// `D1 M12_k + D2`.
    pub dtilde2: Vec<Mat>,
}

pub fn aggregate_leader_coeffs(sc: &Scenario, sens: &ResponseSensitivities) -> AggregatedLeaderCoeffs {
    let btilde2 = sens.m12.iter().map(|m| sc.b1.matmul(m).add(&sc.b2)).collect();
    let dtilde2 = sens.m12.iter().map(|m| sc.d1.matmul(m).add(&sc.d2)).collect();
    AggregatedLeaderCoeffs { btilde2, dtilde2 }
}

/// State-dependent drift and diffusion offsets `(btilde, sigmatilde)` of the
/// leader's aggregated dynamics at step `k`, one row per path:
/// `B1 (M11_k X + m_k) + b` and `D1 (M11_k X + m_k) + sigma`.
pub fn aggregated_offsets(sc: &Scenario, sens: &ResponseSensitivities, k: usize, x: &Mat) -> (Mat, Mat) {
    let zero_u2 = Mat::zeros(x.rows, sens.m12[k].cols);
    let u1 = sens.respond(k, x, &zero_u2);
    let mut bt = u1.matmul(&sc.b1.t());
    let mut st = u1.matmul(&sc.d1.t());
    for r in 0..x.rows {
        bt.row_mut(r).iter_mut().zip(&sc.b).for_each(|(v, c)| *v += c);
        st.row_mut(r).iter_mut().zip(&sc.sigma).for_each(|(v, c)| *v += c);
    }
    (bt, st)
}

/// Adjoint trajectories along a batch of paths.
pub struct AdjointPaths<'a> {
    /// `steps + 1` matrices `paths x n`.
    pub x: &'a [Mat],
    /// `steps + 1` matrices `paths x n`.
    pub y: &'a [Mat],
    /// At least `steps` matrices `paths x n`.
    pub z: &'a [Mat],
    /// `paths x steps`.
    pub dw: &'a Mat,
    /// `steps x n`, shared by all paths.
    pub lambda_x: &'a Mat,
}

/// Path average of `sum_k |Y_{k+1} - Y_k + (A1'Y_k + C1'Z_k + Qi X_k + lambda_k) dt - Z_k dW_k|^2`
/// plus `w_terminal |Y_N - Gi X_N|^2`.
pub fn bsde_residual(player: Player, p: &AdjointPaths<'_>, sc: &Scenario, dt: f64, w_terminal: f64) -> f64 {
    let q = sc.weights(player).q;
    let g = sc.weights(player).g;
    let steps = p.x.len() - 1;
    let paths = p.dw.rows;
    let n = sc.dims.n;
    let mut total = 0.0;
    for k in 0..steps {
        // Row form: A1'y -> y A1, C1'z -> z C1, Q x -> x Q'.
        let drift = p.y[k].matmul(&sc.a1).add(&p.z[k].matmul(&sc.c1)).add(&p.x[k].matmul(&q.t()));
        for r in 0..paths {
            let dw = p.dw[(r, k)];
            for i in 0..n {
                let e = p.y[k + 1][(r, i)] - p.y[k][(r, i)] + (drift[(r, i)] + p.lambda_x[(k, i)]) * dt - p.z[k][(r, i)] * dw;
                total += e * e;
            }
        }
    }
    let gx = p.x[steps].matmul(&g.t());
    let term: f64 = p.y[steps].sub(&gx).data.iter().map(|v| v * v).sum();
    (total + w_terminal * term) / paths as f64
}

/// `E|Y_N - G X_N| / E|G X_N|` with Euclidean norms per path.
pub fn terminal_mismatch(y_n: &Mat, g: &Mat, x_n: &Mat) -> Result<f64> {
    let gx = x_n.matmul(&g.t());
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..gx.rows {
        num += gx.row(r).iter().zip(y_n.row(r)).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
        den += gx.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
    }
    let paths = gx.rows.max(1) as f64;
    if den / paths < 1e-12 {
        return Err(DfpsError::Undefined("terminal mismatch with vanishing G X(T)".into()));
    }
    Ok(num / den)
}
