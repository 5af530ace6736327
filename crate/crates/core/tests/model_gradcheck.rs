//! Finite-difference check of the full reduced-width network in 64-bit mode.

use nrc_core::autodiff::Tensor;
use nrc_core::nrc_net::{NrcNet, NrcNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// About 2e5 ReLU and max-pool switch points sit behind the first layer; a
// 1e-5 step straddles some of them and even 1e-6 occasionally does. In f64
// the rounding error at 1e-7 is still ~1e-9, far under the floor.
const STEP: f64 = 1e-7;
const TOL: f64 = 1e-3;
const DENOM_FLOOR: f64 = 1e-3;
const ENTRIES_PER_TENSOR: usize = 2;

fn check(seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NrcNet::<f64>::new(NrcNetConfig::reduced(), seed).unwrap();
    // Zero-initialized biases put dead units exactly on the ReLU kink, where
    // central differences and the subgradient disagree by construction.
    for p in &mut model.params.params {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let x = Tensor::new(vec![2, 224, 224, 3], (0..2 * 224 * 224 * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
    let labels = [rng.random_range(0..5), rng.random_range(0..5)];
    // Clone per evaluation so dropout masks and batch statistics replay exactly.
    let loss = |m: &NrcNet<f64>| m.clone().loss(&x, &labels, true).unwrap();
    let (_, grads, _) = model.clone().loss_and_grads(&x, &labels, true).unwrap();
    let mut worst = (0.0, String::new());
    for (pi, p) in model.params.params.iter().enumerate() {
        for _ in 0..ENTRIES_PER_TENSOR {
            let j = rng.random_range(0..p.value.len());
            let mut plus = model.clone();
            plus.params.get_mut(pi).data[j] += STEP;
            let mut minus = model.clone();
            minus.params.get_mut(pi).data[j] -= STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let a = grads[pi][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if err > worst.0 {
                worst = (err, format!("{}[{j}]: analytic {a:e}, numeric {numeric:e}", p.name));
            }
        }
    }
    worst
}

#[test]
fn reduced_network_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (err, at) = check(seed);
        assert!(err < TOL, "seed {seed}: {err:e} at {at}");
    }
}
