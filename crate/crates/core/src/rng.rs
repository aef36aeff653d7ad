//! Seeded random streams.
//!
//! Every random draw in the solver comes from a ChaCha8 generator keyed by the
//! run seed plus a stream id derived from what the draw is for and which
//! scenario/path it belongs to. Growing a batch therefore never reshuffles the
//! draws of existing paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for. The discriminants are part of the
/// reproducibility contract and must not be renumbered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Scenario = 1,
    NetworkInit = 2,
    Exploration = 3,
    TrainNoise = 4,
    EvalNoise = 5,
    Deviation = 6,
    Finance = 7,
    Riccati = 8,
    Test = 9,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, purpose, a, b)`; `a` and `b` are free indices such
/// as scenario and path number.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = mix(mix(mix(purpose as u64) ^ a) ^ b.rotate_left(17));
    rng.set_stream(id);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_draws() {
        let a: Vec<u64> = stream(7, Purpose::TrainNoise, 3, 4)
            .sample_iter(rand::distributions::Standard)
            .take(5)
            .collect();
        let b: Vec<u64> = stream(7, Purpose::TrainNoise, 3, 4)
            .sample_iter(rand::distributions::Standard)
            .take(5)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_keys_differ() {
        let x: u64 = stream(7, Purpose::TrainNoise, 3, 4).gen();
        let y: u64 = stream(7, Purpose::TrainNoise, 4, 3).gen();
        let z: u64 = stream(7, Purpose::EvalNoise, 3, 4).gen();
        let w: u64 = stream(8, Purpose::TrainNoise, 3, 4).gen();
        assert!(x != y && x != z && x != w);
    }
}
