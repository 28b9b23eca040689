#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tornn::model::{run_sequence, EsnCell, EsnModel, GammaParams, ModelState, Readout, Recurrent, Tornn};
use tornn::topology::{NetworkWeights, TopologyConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e57)
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

pub fn random_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    DMatrix::from_fn(n, m, |_, _| r.gen_range(-1.0..1.0))
}

/// K groups of N neurons with dense-ish blocks so gradients touch every path.
pub fn small_tornn(groups: usize, neurons: usize, seed: u64) -> Tornn {
    let cfg = TopologyConfig {
        groups,
        neurons_per_group: neurons,
        p: 0.8,
        q: 0.3,
        rho: 0.9,
        input_dim: 1,
        seed,
    };
    Tornn::init(NetworkWeights::generate(&cfg).unwrap(), 1, seed)
}

/// State after driving `model` with `steps` random inputs.
pub fn warm_state(model: &Tornn, steps: usize, seed: u64) -> ModelState {
    let mut state = model.initial_state();
    for u in uniform_vec(steps, -1.0, 1.0, seed) {
        state = model.step(&state, &[u]).unwrap().0;
    }
    state
}

pub fn plain_esn(weights: &NetworkWeights, readout: Readout) -> EsnModel {
    EsnModel {
        cell: EsnCell {
            w_r: weights.w_r.clone(),
            w_i: weights.w_i.clone(),
            w_f: DMatrix::zeros(weights.total_neurons(), 1),
            leak: 1.0,
            input_scaling: 1.0,
            feedback_scaling: 0.0,
            state_noise: 0.0,
        },
        readout,
        teacher_scaling: 1.0,
        noise_seed: 0,
    }
}

/// Largest elementwise gap between the TORNN state at cutoffs
/// (1 - eps, eps) and the plain ESN state over 500 random inputs.
pub fn reduction_gap(k: usize, seed: u64, eps: f64) -> f64 {
    let weights = NetworkWeights::generate(&TopologyConfig::new(k, seed)).unwrap();
    let readout = Readout::init_random(weights.total_neurons(), 1, seed);
    let gammas = GammaParams::from_gammas(&vec![1.0 - eps; k], &vec![eps; k]).unwrap();
    let tornn = Tornn::new(weights.clone(), gammas, readout.clone()).unwrap();
    let esn = plain_esn(&weights, readout);
    let inputs = uniform_vec(500, -1.0, 1.0, seed);
    let a = run_sequence(&tornn, &inputs, None).unwrap();
    let b = run_sequence(&esn, &inputs, None).unwrap();
    a.states
        .iter()
        .zip(&b.states)
        .map(|(s, e)| (&s.x - &e.x).amax())
        .fold(0.0, f64::max)
}
