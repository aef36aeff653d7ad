//! A hand-built affine follower response and the error of recovering it.

use std::sync::Arc;

use dfps::dfps::{extract_sensitivities, FollowerResponse};
use dfps::fbsde::ResponseSensitivities;
use dfps::linalg::Mat;
use dfps::model::{scenario_for, CoefficientRanges, Dims, Noise, TimeGrid};
use dfps::rng::{stream, Purpose};
use dfps::tape::{Tape, Var};
use dfps::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    m.data.iter_mut().for_each(|v| *v = scale * rng.sample::<f64, _>(StandardNormal));
    m
}

/// `u1 = x M11_k^T + u2 M12_k^T + c_k`, built by hand.
pub struct AffineMap(pub ResponseSensitivities);

impl FollowerResponse for AffineMap {
    fn controls(&self, k: usize, x: &Mat, u2: &Mat) -> Result<Mat> {
        Ok(self.0.respond(k, x, u2))
    }

    fn controls_tape(&self, tape: &mut Tape, ks: &[usize], x: Var, u2: Var) -> Result<Var> {
        // Rows come in equal blocks per step, in step order.
        let steps = self.0.steps();
        let group = ks.len() / steps;
        let m11t = Arc::new(self.0.m11.iter().map(Mat::t).collect());
        let m12t = Arc::new(self.0.m12.iter().map(Mat::t).collect());
        let a = tape.group_linear(x, m11t, group);
        let b = tape.group_linear(u2, m12t, group);
        let ab = tape.add(a, b);
        let m1 = self.0.offset[0].len();
        let mut c = Mat::zeros(ks.len(), m1);
        for (r, &k) in ks.iter().enumerate() {
            c.row_mut(r).copy_from_slice(&self.0.offset[k]);
        }
        let c = tape.constant(c);
        Ok(tape.add(ab, c))
    }
}

pub fn random_sensitivities(rng: &mut ChaCha8Rng, dims: Dims, steps: usize) -> ResponseSensitivities {
    ResponseSensitivities {
        m11: (0..steps).map(|_| normal(rng, dims.m1, dims.n, 0.5)).collect(),
        m12: (0..steps).map(|_| normal(rng, dims.m1, dims.m2, 0.5)).collect(),
        offset: (0..steps).map(|_| normal(rng, 1, dims.m1, 0.2).data).collect(),
    }
}

fn max_diff(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.sub(y).max_abs()).fold(0.0, f64::max)
}

/// Largest coefficient error of the extracted linearization of a random
/// affine map.
pub fn extraction_error(seed: u64, dims: Dims) -> f64 {
    let mut rng = stream(seed, Purpose::Test, 0, 0);
    let grid = TimeGrid::new(1.0, 12).unwrap();
    let sc = scenario_for(seed, 0, &CoefficientRanges::default(), dims).unwrap();
    let truth = random_sensitivities(&mut rng, dims, grid.steps);
    let noise = Noise::sample(seed, Purpose::Test, 1, 16, dims.n, &grid, 0.1);
    let got = extract_sensitivities(&AffineMap(truth.clone()), &sc, &grid, &noise).unwrap();
    let offset = got
        .offset
        .iter()
        .flatten()
        .zip(truth.offset.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    max_diff(&got.m11, &truth.m11).max(max_diff(&got.m12, &truth.m12)).max(offset)
}

/// Dimension cases for the extraction check.
pub const CASES: [(u64, Dims); 3] = [
    (1, Dims { n: 1, m1: 1, m2: 1 }),
    (2, Dims { n: 2, m1: 2, m2: 1 }),
    (3, Dims { n: 3, m1: 2, m2: 2 }),
];
