#![allow(dead_code)]

use std::sync::Arc;

use ceperfed::data::{Dataset, SyntheticSpec};
use ceperfed::fedsim::{build_client_data, client_rng_seed, ExperimentConfig};
use ceperfed::model::{loss_and_grad, Batch, LayerSpec, OptimizerState, ParameterSet, Part};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 314 weights: three convs (one per compressed part) and two dense layers.
pub fn tiny_specs() -> Arc<Vec<LayerSpec>> {
    Arc::new(vec![
        LayerSpec::conv("c1", [4, 2, 3, 3], Part::Part1),
        LayerSpec::conv("c2", [4, 4, 3, 3], Part::Part2),
        LayerSpec::conv("c3", [8, 4, 1, 1], Part::Part3),
        LayerSpec::dense("fc1", 6, 8),
        LayerSpec::dense("fc2", 3, 6),
    ])
}

pub fn random_params(specs: Arc<Vec<LayerSpec>>, rng: &mut impl Rng, scale: f64) -> ParameterSet<f64> {
    ParameterSet::from_fn(specs, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_batch(n: usize, channels: usize, side: usize, classes: usize, rng: &mut impl Rng) -> Batch<f64> {
    let inputs = Array4::from_shape_simple_fn((n, channels, side, side), || rng.sample(StandardNormal));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, labels).unwrap()
}

/// Matrix with a random spectrum: a random low-rank part plus noise, with
/// rank and noise level drawn per call.
pub fn random_matrix(m: usize, n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let k = rng.random_range(1..=m.min(n));
    let noise: f64 = [0.0, 1e-3, 0.1, 1.0][rng.random_range(0..4)];
    let a = Array2::from_shape_simple_fn((m, k), || rng.sample::<f64, _>(StandardNormal));
    let decay: Vec<f64> = (0..k).map(|i| (-(i as f64) * rng.random_range(0.0..1.0)).exp()).collect();
    let b = Array2::from_shape_fn((k, n), |(i, _)| decay[i] * rng.sample::<f64, _>(StandardNormal));
    let mut out = a.dot(&b);
    out.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
    out
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative distance `‖a − b‖ / max(‖b‖, tiny)` over all layers.
pub fn relative_distance(a: &ParameterSet<f64>, b: &ParameterSet<f64>) -> f64 {
    let diff = a.sub(b).unwrap().norm_sq().sqrt();
    diff / b.norm_sq().sqrt().max(1e-300)
}

/// Central-difference gradient; each coordinate's step is halved until two
/// successive estimates agree, so a ReLU kink inside `[-h, h]` is avoided.
pub fn finite_difference(model: &ParameterSet<f64>, batch: &Batch<f64>, h0: f64) -> Vec<f64> {
    let base = model.to_flat();
    let specs = model.specs().clone();
    let loss_at = |flat: &[f64]| {
        let m = ParameterSet::from_flat(specs.clone(), flat).unwrap();
        loss_and_grad(&m, batch).unwrap().0
    };
    let mut work = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut est = |h: f64| {
            work[i] = base[i] + h;
            let up = loss_at(&work);
            work[i] = base[i] - h;
            let down = loss_at(&work);
            work[i] = base[i];
            (up - down) / (2.0 * h)
        };
        let mut h = h0;
        let mut prev = est(h);
        while h > 1e-6 {
            let next = est(h / 2.0);
            let agree = (next - prev).abs() <= 1e-6 * next.abs().max(prev.abs()).max(1e-4);
            prev = next;
            h /= 2.0;
            if agree {
                break;
            }
        }
        out.push(prev);
    }
    out
}

pub fn small_data_spec() -> SyntheticSpec {
    SyntheticSpec {
        samples_per_class: 40,
        ..SyntheticSpec::default()
    }
}

/// Plain FedAvg written directly against the model primitives: f32 download,
/// local Adam from the global model, f32 parameter upload, sample-weighted mean.
/// Returns the global model after every round.
pub fn reference_fedavg(config: &ExperimentConfig) -> Vec<ParameterSet<f64>> {
    let shards: Vec<(Dataset<f64>, Dataset<f64>)> = build_client_data(config).unwrap();
    let mut global: ParameterSet<f64> = config.model.init(config.seed).unwrap();
    let mut optimizers: Vec<OptimizerState<f64>> = shards
        .iter()
        .map(|_| OptimizerState::new(&global, config.learning_rate))
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..shards.len())
        .map(|i| ChaCha8Rng::seed_from_u64(client_rng_seed(config.seed, i)))
        .collect();
    let total: usize = shards.iter().map(|(tr, _)| tr.len()).sum();
    let mut history = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let received = global.to_wire_precision();
        let mut acc = received.zeros_like();
        for (i, (train, _)) in shards.iter().enumerate() {
            let mut model = received.clone();
            let mut order: Vec<usize> = (0..train.len()).collect();
            for _ in 0..config.local_epochs {
                order.shuffle(&mut rngs[i]);
                for chunk in order.chunks(config.batch_size) {
                    let sub = train.subset(chunk);
                    let batch = Batch::new(sub.inputs, sub.labels).unwrap();
                    let (_, grad) = loss_and_grad(&model, &batch).unwrap();
                    optimizers[i].apply(&mut model, &grad).unwrap();
                }
            }
            let w = train.len() as f64 / total as f64;
            acc.axpy(w, &model.to_wire_precision()).unwrap();
        }
        global = acc;
        history.push(global.clone());
    }
    history
}

use ceperfed::hsvd::{CompressedLayer, CompressedUpdate, LayerBody, LowRankFactors, ResidualEntry, SparseResidual, UpdateKind};
use ceperfed::wire::{UploadMessage, UploadPayload};

fn wire_value(rng: &mut impl Rng) -> f64 {
    rng.sample::<f32, _>(StandardNormal) as f64
}

fn random_factors(m: usize, n: usize, rng: &mut impl Rng) -> LowRankFactors<f64> {
    let r = rng.random_range(1..=m.min(n));
    LowRankFactors {
        u_prime: Array2::from_shape_simple_fn((m, r), || wire_value(rng)),
        v_t: Array2::from_shape_simple_fn((r, n), || wire_value(rng)),
    }
}

/// Structurally valid update with f32-representable values and random
/// shapes, ranks and layer variants.
pub fn random_update(rng: &mut impl Rng) -> CompressedUpdate<f64> {
    let layers = (0..rng.random_range(0..5))
        .map(|_| {
            let shape: Vec<usize> = if rng.random_bool(0.3) {
                vec![rng.random_range(1..6), rng.random_range(1..6)]
            } else {
                vec![rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)]
            };
            let m = shape[0];
            let n: usize = shape[1..].iter().product();
            let body = match rng.random_range(0..4) {
                0 => {
                    let mut coords: Vec<(usize, usize)> =
                        (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|_| rng.random_bool(0.2)).collect();
                    coords.sort();
                    let gamma = wire_value(rng).abs();
                    LayerBody::Residual {
                        factors: random_factors(m, n, rng),
                        residual: SparseResidual {
                            entries: coords
                                .into_iter()
                                .map(|(row, col)| ResidualEntry { row, col, value: wire_value(rng) })
                                .collect(),
                            gamma,
                        },
                    }
                }
                1 => LayerBody::LowRank(random_factors(m, n, rng)),
                2 => {
                    let divisors: Vec<usize> = (1..=m).filter(|&g| m.is_multiple_of(g)).collect();
                    let groups = divisors[rng.random_range(0..divisors.len())];
                    LayerBody::Grouped((0..groups).map(|_| random_factors(m / groups, n, rng)).collect())
                }
                _ => LayerBody::Dense((0..m * n).map(|_| wire_value(rng)).collect()),
            };
            CompressedLayer { shape, body }
        })
        .collect();
    let kind = if rng.random_bool(0.5) { UpdateKind::Gradient } else { UpdateKind::Parameters };
    CompressedUpdate { kind, layers }
}

pub fn random_upload(rng: &mut impl Rng) -> UploadMessage<f64> {
    UploadMessage {
        round: rng.random(),
        client: rng.random(),
        payload: UploadPayload {
            gradient: CompressedUpdate { kind: UpdateKind::Gradient, ..random_update(rng) },
            parameters: CompressedUpdate { kind: UpdateKind::Parameters, ..random_update(rng) },
            alignment: wire_value(rng),
            n_samples: rng.random(),
        },
    }
}
