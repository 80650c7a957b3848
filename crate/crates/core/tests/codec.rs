mod common;

use std::sync::Arc;

use ceperfed::hsvd::{
    self, compress, compress_part1, compress_part2, compress_part3, decompress, select_rank, transmission_ratio,
    truncated_svd, Compression, EnergyConfig, LayerBody, UpdateKind,
};
use ceperfed::linalg::thin_svd;
use ceperfed::model::{LayerSpec, ParameterSet, Part, TinyConvConfig};
use common::{frobenius, random_matrix};
use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn oracle_singular_values(a: &Array2<f64>) -> Vec<f64> {
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// Error of the best rank-`r` approximation, `sqrt(Σ_{k>r} σ_k²)`.
fn oracle_tail(sigma: &[f64], r: usize) -> f64 {
    sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(m, n) in &[(1, 1), (1, 7), (7, 1), (6, 10), (10, 6), (16, 144), (64, 576), (33, 33)] {
        let a = random_matrix(m, n, &mut rng);
        let svd = thin_svd(a.view()).unwrap();
        let oracle = oracle_singular_values(&a);
        let scale = oracle[0].max(1e-300);
        for (x, y) in svd.singular_values.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-9 * scale, "{m}x{n}: {x} vs {y}");
        }
        let (u_prime, v_t) = svd.truncate(m.min(n));
        let err = frobenius(&(&a - &u_prime.dot(&v_t)));
        assert!(err <= 1e-9 * frobenius(&a).max(1e-300), "{m}x{n}: reconstruction error {err}");
    }
}

#[test]
fn identity_keeps_full_rank() {
    let a = Array2::<f64>::eye(4);
    let (_, sigma) = truncated_svd(a.view()).unwrap();
    assert_eq!(select_rank(&sigma, 0.9).unwrap(), 4);
}

#[test]
fn rank_one_is_exact() {
    let u = ndarray::arr1(&[1.0, -2.0, 0.5]);
    let v = ndarray::arr1(&[3.0, 1.0, 0.0, -1.0]);
    let a = Array2::from_shape_fn((3, 4), |(i, j)| u[i] * v[j]);
    let f = compress_part2(a.view(), &EnergyConfig::default()).unwrap();
    assert_eq!(f.rank(), 1);
    assert!(frobenius(&(&a - &f.reconstruct())) < 1e-12);
    let (f, res) = compress_part1(a.view(), &EnergyConfig::default()).unwrap();
    assert_eq!(f.rank(), 1);
    assert!(res.entries.iter().all(|e| e.value.abs() < 1e-12));
}

#[test]
fn part2_energy_against_singular_value_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = random_matrix(16, 144, &mut rng);
        let f = compress_part2(a.view(), &EnergyConfig::default()).unwrap();
        let kept = frobenius(&f.reconstruct()).powi(2);
        let total = oracle_singular_values(&a).iter().map(|s| s * s).sum::<f64>();
        assert!(kept / total >= 0.9 - 1e-12, "{}", kept / total);
    }
}

#[test]
fn residual_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Array2::from_shape_simple_fn((8, 27), || rng.sample::<f64, _>(StandardNormal));
    let cfg = EnergyConfig::default();
    let (f, res) = compress_part1(a.view(), &cfg).unwrap();

    // dense oracle: full residual, mask of the ceil(10%) largest magnitudes
    let eps = &a - &f.reconstruct();
    let mut order: Vec<(usize, usize)> = (0..8).flat_map(|i| (0..27).map(move |j| (i, j))).collect();
    order.sort_by(|&p, &q| eps[q].abs().partial_cmp(&eps[p].abs()).unwrap().then(p.cmp(&q)));
    let k = (0.1f64 * 216.0).ceil() as usize;
    let mut masked = Array2::<f64>::zeros((8, 27));
    for &p in &order[..k] {
        masked[p] = eps[p];
    }
    let mut got = Array2::<f64>::zeros((8, 27));
    res.add_to(&mut got);
    assert_eq!(res.entries.len(), k);
    assert!(frobenius(&(&got - &masked)) < 1e-12);

    let with = frobenius(&(&a - &(&f.reconstruct() + &got)));
    let without = frobenius(&eps);
    assert!(with <= without);
    let expected = (without.powi(2) - frobenius(&masked).powi(2)).sqrt();
    assert!((with - expected).abs() < 1e-10);
}

#[test]
fn gamma_zero_is_part2() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_matrix(8, 27, &mut rng);
    let cfg = EnergyConfig { gamma: 0.0, ..EnergyConfig::default() };
    let (f1, res) = compress_part1(a.view(), &cfg).unwrap();
    let f2 = compress_part2(a.view(), &cfg).unwrap();
    let mut r1 = f1.reconstruct();
    res.add_to(&mut r1);
    assert_eq!(r1, f2.reconstruct());
}

#[test]
fn groups_match_per_group_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = ArrayD::from_shape_simple_fn(IxDyn(&[128, 8, 3, 3]), || rng.sample::<f64, _>(StandardNormal));
    let groups = compress_part3(&t, &EnergyConfig::default()).unwrap();
    assert_eq!(groups.len(), 2);
    let a: Array2<f64> = t.into_shape_with_order((128, 72)).unwrap();
    for (g, f) in groups.iter().enumerate() {
        let block: Array2<f64> = a.slice(s![g * 64..(g + 1) * 64, ..]).to_owned();
        assert_eq!(f.rank(), 16);
        let err = frobenius(&(&block - &f.reconstruct()));
        let oracle = oracle_tail(&oracle_singular_values(&block), 16);
        assert!((err - oracle).abs() <= 1e-9 * oracle, "group {g}: {err} vs {oracle}");
    }
}

#[test]
fn full_group_rank_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = ArrayD::from_shape_simple_fn(IxDyn(&[64, 2, 2, 2]), || rng.sample::<f64, _>(StandardNormal));
    let cfg = EnergyConfig { group_rank: 8, ..EnergyConfig::default() };
    let groups = compress_part3(&t, &cfg).unwrap();
    let a: Array2<f64> = t.into_shape_with_order((64, 8)).unwrap();
    assert_eq!(groups.len(), 1);
    assert!(frobenius(&(&a - &groups[0].reconstruct())) < 1e-10 * frobenius(&a));
}

fn random_params(seed: u64) -> ParameterSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = TinyConvConfig::default().layer_specs().unwrap();
    ParameterSet::from_fn(specs, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn lossless_configuration_round_trips() {
    let p = random_params(1);
    for comp in [Compression::Hierarchical(EnergyConfig::lossless()), Compression::Lossless] {
        let c = compress(&p, UpdateKind::Parameters, &comp).unwrap();
        let back = decompress(&c, p.specs()).unwrap();
        for ((spec, x), y) in p.iter().zip(back.tensors()) {
            let d = x - y;
            let rel = d.iter().map(|v| v * v).sum::<f64>().sqrt() / x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(rel < 1e-6, "{}: {rel}", spec.name);
            if spec.part == Part::Head {
                assert_eq!(x, y);
            }
        }
    }
}

#[test]
fn defaults_keep_energy_per_layer() {
    let p = random_params(2);
    let c = compress(&p, UpdateKind::Parameters, &Compression::Hierarchical(EnergyConfig::default())).unwrap();
    for ((spec, tensor), layer) in p.iter().zip(&c.layers) {
        if spec.part == Part::Head {
            continue;
        }
        let a = hsvd::reshape_2d(tensor).unwrap();
        let total = frobenius(&a).powi(2);
        let lowrank = match &layer.body {
            LayerBody::Residual { factors, .. } | LayerBody::LowRank(factors) => factors.reconstruct(),
            _ => continue,
        };
        assert!(frobenius(&lowrank).powi(2) / total >= 0.9 - 1e-12, "{}", spec.name);
    }
}

#[test]
fn transmission_ratio_examples() {
    let head_only = Arc::new(vec![LayerSpec::dense("fc", 3, 5)]);
    let p = ParameterSet::<f64>::from_fn(head_only.clone(), |_, i| i as f64);
    let c = compress(&p, UpdateKind::Parameters, &Compression::Lossless).unwrap();
    assert_eq!(transmission_ratio(&c, &head_only), 1.0);

    let p = random_params(3);
    let specs = p.specs().clone();
    let dynamic = compress(&p, UpdateKind::Parameters, &Compression::Hierarchical(EnergyConfig::default())).unwrap();
    let fixed2 = compress(&p, UpdateKind::Parameters, &Compression::FixedRank { rank: 2, group_channels: 64 }).unwrap();
    let rd = transmission_ratio(&dynamic, &specs);
    let r2 = transmission_ratio(&fixed2, &specs);
    assert!(rd < 1.0 && rd >= r2, "dynamic {rd}, fixed-2 {r2}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn select_rank_matches_linear_scan(mut sigma in proptest::collection::vec(0.0f64..10.0, 1..12), eta in 0.05f64..=1.0) {
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sigma[0] > 0.0);
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let oracle = (1..=sigma.len())
            .find(|&k| sigma[..k].iter().map(|s| s * s).sum::<f64>() / total >= eta)
            .unwrap_or(sigma.len());
        prop_assert_eq!(select_rank(&sigma, eta).unwrap(), oracle);
    }

    #[test]
    fn selected_rank_is_minimal(seed in any::<u64>(), m in 1usize..20, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(m, n, &mut rng);
        let (_, sigma) = truncated_svd(a.view()).unwrap();
        let r = select_rank(&sigma, 0.9).unwrap();
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let energy = |k: usize| sigma[..k].iter().map(|s| s * s).sum::<f64>() / total;
        prop_assert!(energy(r) >= 0.9);
        if r > 1 {
            prop_assert!(energy(r - 1) < 0.9);
        }
    }

    #[test]
    fn reshape_round_trip(dims in proptest::collection::vec(1usize..5, 4)) {
        let t = ArrayD::from_shape_fn(IxDyn(&dims), |i| (i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64);
        let m = hsvd::reshape_2d(&t).unwrap();
        prop_assert_eq!(m.dim(), (dims[0], dims[1] * dims[2] * dims[3]));
        prop_assert_eq!(hsvd::unreshape(m, &dims).unwrap(), t);
    }
}
