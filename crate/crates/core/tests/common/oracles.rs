//! Independent references for the simulator and the Riccati baseline.

use dfps::linalg::Mat;
use dfps::model::{discrete_cost, sample_scenario, simulate_paths, CoefficientRanges, Dims, MeanField, Noise, Player, Scenario, TimeGrid};
use dfps::riccati::{discrete_lqr_oracle, riccati_reference_cost, solve_mf_riccati, LqProblem};
use dfps::rng::{stream, Purpose};
use rand::Rng;

const SCALAR: Dims = Dims { n: 1, m1: 1, m2: 1 };

/// Noiseless single-path input starting at `x0`.
fn still(x0: f64, steps: usize) -> Noise {
    Noise {
        x0: Mat::scalar(x0),
        dw: Mat::zeros(1, steps),
    }
}

/// Terminal error of the noiseless Euler scheme for
/// `dx = ((a1 + a2) x + b1 u + b) dt` with constant `u`, against the exact
/// exponential solution, for each step size.
pub fn euler_terminal_errors(dts: &[f64]) -> Vec<f64> {
    let (a1, a2, b1, b, u, x0, horizon) = (-0.8, 0.3, 1.2, 0.3, 0.2, 1.0, 1.0);
    let mut sc = Scenario::zeros(SCALAR);
    sc.a1 = Mat::scalar(a1);
    sc.a2 = Mat::scalar(a2);
    sc.b1 = Mat::scalar(b1);
    sc.b = vec![b];
    let a = a1 + a2;
    let c = b1 * u + b;
    let exact = (a * horizon).exp() * x0 + c / a * ((a * horizon).exp() - 1.0);
    dts.iter()
        .map(|&dt| {
            let steps = (horizon / dt).round() as usize;
            let grid = TimeGrid::new(horizon, steps).unwrap();
            let batch = simulate_paths(&sc, &grid, &still(x0, steps), MeanField::Batch, |_, _, _| {
                Ok((Mat::scalar(u), Mat::scalar(0.0)))
            })
            .unwrap();
            (batch.x[steps][(0, 0)] - exact).abs()
        })
        .collect()
}

/// `(continuous Riccati cost, discrete dynamic-programming cost)` on random
/// constant scalar scenarios.
pub fn riccati_vs_dp(count: u64, steps: usize) -> Vec<(f64, f64)> {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let (mean, cov) = ([0.3], Mat::scalar(0.1));
    (0..count)
        .map(|i| {
            let sc = sample_scenario(&mut stream(11, Purpose::Test, 300 + i, 0), &CoefficientRanges::default(), SCALAR).unwrap();
            let pr = LqProblem::follower(&sc, true);
            let cont = riccati_reference_cost(&solve_mf_riccati(&pr, &grid).unwrap(), &mean, &cov);
            let disc = discrete_lqr_oracle(&pr, &grid).unwrap().cost(&mean, &cov);
            (cont, disc)
        })
        .collect()
}

#[derive(Debug)]
pub struct BruteForce {
    pub oracle: f64,
    pub brute: f64,
    /// Largest excess of the best grid point over the true minimum.
    pub resolution: f64,
    /// Whether the oracle's controls lie inside the searched box.
    pub inside: bool,
}

/// Two-step noiseless scalar problem: exhaustive search over a grid of
/// open-loop controls `(u0, u1)`, each cost simulated and priced by the
/// model, against the dynamic program.
pub fn brute_force_two_steps(seed: u64) -> BruteForce {
    let mut rng = stream(seed, Purpose::Test, 400, 0);
    let mut sc = Scenario::zeros(SCALAR);
    sc.a1 = Mat::scalar(rng.gen_range(-1.0..1.0));
    sc.a2 = Mat::scalar(rng.gen_range(-0.3..0.3));
    sc.b1 = Mat::scalar(rng.gen_range(0.5..1.5));
    sc.b = vec![rng.gen_range(-0.5..0.5)];
    sc.q1 = Mat::scalar(rng.gen_range(0.5..2.0));
    sc.qbar1 = Mat::scalar(rng.gen_range(0.0..0.5));
    sc.r1 = Mat::scalar(rng.gen_range(0.5..2.0));
    sc.rbar1 = Mat::scalar(rng.gen_range(0.0..0.5));
    sc.g1 = Mat::scalar(rng.gen_range(0.5..2.0));
    let x0 = rng.gen_range(-1.0..1.0);
    let grid = TimeGrid::new(1.0, 2).unwrap();
    let noise = still(x0, 2);
    let cost = |u: [f64; 2]| {
        let batch = simulate_paths(&sc, &grid, &noise, MeanField::Batch, |k, _, _| Ok((Mat::scalar(u[k]), Mat::scalar(0.0)))).unwrap();
        discrete_cost(Player::Follower, &batch, &sc, &grid)
    };

    let (half_width, h): (f64, f64) = (5.0, 0.025);
    let points = (2.0 * half_width / h).round() as usize + 1;
    let mut brute = f64::INFINITY;
    for i in 0..points {
        for j in 0..points {
            brute = brute.min(cost([-half_width + i as f64 * h, -half_width + j as f64 * h]));
        }
    }

    // The cost is quadratic in the controls, so unit second differences give
    // its Hessian exactly; a grid point lies within h/2 of the minimizer in
    // each coordinate.
    let j0 = cost([0.0, 0.0]);
    let h00 = cost([1.0, 0.0]) - 2.0 * j0 + cost([-1.0, 0.0]);
    let h11 = cost([0.0, 1.0]) - 2.0 * j0 + cost([0.0, -1.0]);
    let h01 = (cost([1.0, 1.0]) - cost([1.0, -1.0]) - cost([-1.0, 1.0]) + cost([-1.0, -1.0])) / 4.0;
    let (tr, det) = (h00 + h11, h00 * h11 - h01 * h01);
    let lambda_max = tr / 2.0 + ((tr / 2.0).powi(2) - det).max(0.0).sqrt();
    let resolution = lambda_max * h * h / 4.0;

    let pr = LqProblem::follower(&sc, true);
    let sol = discrete_lqr_oracle(&pr, &grid).unwrap();
    let oracle = sol.cost(&[x0], &Mat::scalar(0.0));
    let u0 = sol.policy.mean_control(0, &[x0])[0];
    let batch = simulate_paths(&sc, &grid, &noise, MeanField::Batch, |k, x, _| {
        Ok((Mat::scalar(sol.policy.mean_control(k, &[x[(0, 0)]])[0]), Mat::scalar(0.0)))
    })
    .unwrap();
    let u1 = batch.u1[1][(0, 0)];
    BruteForce {
        oracle,
        brute,
        resolution,
        inside: u0.abs() < half_width && u1.abs() < half_width,
    }
}
