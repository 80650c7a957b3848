mod common;

use ceperfed::data::{generate, SyntheticSpec};
use ceperfed::model::{loss_and_grad, Batch, ParameterSet, TinyConvConfig};
use common::{finite_difference, random_batch, random_params, tiny_specs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn backprop_matches_finite_differences() {
    for seed in [100, 101] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_params(tiny_specs(), &mut rng, 0.5);
        let batch = random_batch(4, 2, 7, 3, &mut rng);
        let (_, grad) = loss_and_grad(&model, &batch).unwrap();
        let numeric = finite_difference(&model, &batch, 1e-3);
        for (i, (a, n)) in grad.to_flat().iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-4, "seed {seed} coordinate {i}: {a} vs {n}");
        }
    }
}

fn golden_batch() -> Batch<f64> {
    let data = generate::<f64>(&SyntheticSpec::default()).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let sub = data.subset(&idx);
    Batch::new(sub.inputs, sub.labels).unwrap()
}

#[test]
fn golden_loss_seed_42() {
    let model: ParameterSet<f64> = TinyConvConfig::default().init(42).unwrap();
    let (loss, _) = loss_and_grad(&model, &golden_batch()).unwrap();
    assert!((loss - GOLDEN).abs() < 1e-10, "{loss}");
}

const GOLDEN: f64 = 1.454_981_350_794_638_3;
