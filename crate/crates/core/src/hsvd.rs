//! Hierarchical SVD codec.
//!
//! Each layer is compressed according to its [`Part`]:
//!
//! * **Part1**: dynamic rank from the energy criterion, plus a sparse residual
//!   holding the largest entries of `A - U'Vᵀ` scaled by `gamma`.
//! * **Part2**: dynamic rank only.
//! * **Part3**: output channels split into groups of `group_channels`, each
//!   group factorized at a fixed rank.
//! * **Head**: sent dense.
//!
//! Conv tensors `(c_o, c_i, k_h, k_w)` are viewed as `c_o x (c_i k_h k_w)`
//! matrices. Only the products `U'Vᵀ` are meaningful; individual factors are
//! defined up to column signs.

use std::cmp::Ordering;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::linalg::thin_svd;
use crate::model::{LayerKind, LayerSpec, ParameterSet, Part};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// Fraction of spectral energy the dynamic rank must retain.
    pub eta: f64,
    /// Scale applied to the transmitted residual entries.
    pub gamma: f64,
    /// Fraction of residual entries kept in part 1.
    pub residual_fraction: f64,
    /// Output channels per group in part 3.
    pub group_channels: usize,
    /// Fixed rank per part-3 group, clamped to the group's dimensions.
    pub group_rank: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            eta: 0.9,
            gamma: 1.0,
            residual_fraction: 0.10,
            group_channels: 64,
            group_rank: 16,
        }
    }
}

impl EnergyConfig {
    /// Settings under which every tier reconstructs its input exactly.
    pub fn lossless() -> Self {
        Self {
            eta: 1.0,
            gamma: 0.0,
            group_rank: usize::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.residual_fraction) {
            return Err(Error::config(format!(
                "residual_fraction must lie in [0, 1], got {}",
                self.residual_fraction
            )));
        }
        if self.group_channels == 0 || self.group_rank == 0 {
            return Err(Error::config("group_channels and group_rank must be positive"));
        }
        Ok(())
    }

    /// Every part-3 conv must split evenly into groups.
    pub fn check_layers(&self, specs: &[LayerSpec]) -> Result<()> {
        for spec in specs.iter().filter(|s| s.part == Part::Part3) {
            if spec.kind != LayerKind::Conv || spec.shape[0] % self.group_channels != 0 {
                return Err(Error::config(format!(
                    "part3 layer {} with {} output channels is not divisible into groups of {}",
                    spec.name, spec.shape[0], self.group_channels
                )));
            }
        }
        Ok(())
    }
}

/// How a whole update is encoded.
#[derive(Debug, Clone, PartialEq)]
pub enum Compression {
    /// Per-part hierarchical strategy.
    Hierarchical(EnergyConfig),
    /// Every non-head layer truncated at one rank, no residual. Part-3 layers
    /// keep their channel groups.
    FixedRank { rank: usize, group_channels: usize },
    /// Dense copy of every layer.
    Lossless,
}

impl Compression {
    pub fn check_layers(&self, specs: &[LayerSpec]) -> Result<()> {
        match self {
            Compression::Hierarchical(cfg) => {
                cfg.validate()?;
                cfg.check_layers(specs)
            }
            Compression::FixedRank {
                rank,
                group_channels,
            } => {
                if *rank == 0 {
                    return Err(Error::config("fixed rank must be positive"));
                }
                EnergyConfig {
                    group_channels: *group_channels,
                    ..EnergyConfig::default()
                }
                .check_layers(specs)
            }
            Compression::Lossless => Ok(()),
        }
    }
}

/// `U' = U_r Σ_r` (`m x r`) and `V_rᵀ` (`r x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors<T> {
    pub u_prime: Array2<T>,
    pub v_t: Array2<T>,
}

impl<T: Scalar> LowRankFactors<T> {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            u_prime: Array2::zeros((m, 1)),
            v_t: Array2::zeros((1, n)),
        }
    }

    pub fn rank(&self) -> usize {
        self.u_prime.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.u_prime.nrows(), self.v_t.ncols())
    }

    pub fn reconstruct(&self) -> Array2<T> {
        self.u_prime.dot(&self.v_t)
    }

    pub fn scalar_count(&self) -> usize {
        self.u_prime.len() + self.v_t.len()
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        let r = self.rank();
        if r == 0 || r > m.min(n) || self.u_prime.nrows() != m || self.v_t.dim() != (r, n) {
            return Err(Error::structural(format!(
                "factors {:?}·{:?} do not describe a rank-{r} {m}x{n} matrix",
                self.u_prime.dim(),
                self.v_t.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEntry<T> {
    pub row: usize,
    pub col: usize,
    /// Already multiplied by `gamma`.
    pub value: T,
}

/// Masked, scaled residual; entries sorted by row-major coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseResidual<T> {
    pub entries: Vec<ResidualEntry<T>>,
    pub gamma: T,
}

impl<T: Scalar> SparseResidual<T> {
    pub fn empty(gamma: T) -> Self {
        Self {
            entries: Vec::new(),
            gamma,
        }
    }

    pub fn add_to(&self, target: &mut Array2<T>) {
        for e in &self.entries {
            target[[e.row, e.col]] += e.value;
        }
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        let mut prev: Option<(usize, usize)> = None;
        for e in &self.entries {
            if e.row >= m || e.col >= n {
                return Err(Error::structural(format!(
                    "residual entry ({}, {}) outside {m}x{n}",
                    e.row, e.col
                )));
            }
            if prev.is_some_and(|p| p >= (e.row, e.col)) {
                return Err(Error::structural("residual entries unsorted or duplicated"));
            }
            prev = Some((e.row, e.col));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerBody<T> {
    /// Part 1: factors plus sparse residual.
    Residual {
        factors: LowRankFactors<T>,
        residual: SparseResidual<T>,
    },
    /// Part 2 (or any fixed-rank non-head layer).
    LowRank(LowRankFactors<T>),
    /// Part 3: one factor pair per channel group, in channel order.
    Grouped(Vec<LowRankFactors<T>>),
    /// Uncompressed values in row-major order.
    Dense(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer<T> {
    pub shape: Vec<usize>,
    pub body: LayerBody<T>,
}

impl<T: Scalar> CompressedLayer<T> {
    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.shape[0], self.shape[1..].iter().product())
    }

    /// Scalars this layer puts on the wire; a residual entry counts three.
    pub fn scalar_count(&self) -> usize {
        match &self.body {
            LayerBody::Residual { factors, residual } => {
                factors.scalar_count() + 3 * residual.entries.len()
            }
            LayerBody::LowRank(f) => f.scalar_count(),
            LayerBody::Grouped(groups) => groups.iter().map(LowRankFactors::scalar_count).sum(),
            LayerBody::Dense(v) => v.len(),
        }
    }

    /// Mean retained rank, or `None` for dense layers.
    pub fn mean_rank(&self) -> Option<f64> {
        match &self.body {
            LayerBody::Residual { factors, .. } | LayerBody::LowRank(factors) => {
                Some(factors.rank() as f64)
            }
            LayerBody::Grouped(groups) if !groups.is_empty() => {
                Some(groups.iter().map(|g| g.rank() as f64).sum::<f64>() / groups.len() as f64)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateKind {
    Gradient,
    Parameters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate<T> {
    pub kind: UpdateKind,
    pub layers: Vec<CompressedLayer<T>>,
}

impl<T: Scalar> CompressedUpdate<T> {
    /// Rounds every transmitted value through `f32`, matching what a decoder sees.
    pub fn to_wire_precision(&self) -> Self {
        let w = |v: T| T::from_wire(v.to_wire());
        let f = |f: &LowRankFactors<T>| LowRankFactors {
            u_prime: f.u_prime.mapv(w),
            v_t: f.v_t.mapv(w),
        };
        let layers = self
            .layers
            .iter()
            .map(|l| CompressedLayer {
                shape: l.shape.clone(),
                body: match &l.body {
                    LayerBody::Residual { factors, residual } => LayerBody::Residual {
                        factors: f(factors),
                        residual: SparseResidual {
                            entries: residual
                                .entries
                                .iter()
                                .map(|e| ResidualEntry { value: w(e.value), ..*e })
                                .collect(),
                            gamma: w(residual.gamma),
                        },
                    },
                    LayerBody::LowRank(x) => LayerBody::LowRank(f(x)),
                    LayerBody::Grouped(g) => LayerBody::Grouped(g.iter().map(f).collect()),
                    LayerBody::Dense(v) => LayerBody::Dense(v.iter().map(|&x| w(x)).collect()),
                },
            })
            .collect();
        Self {
            kind: self.kind,
            layers,
        }
    }
}

/// Views a conv tensor `(c_o, c_i, k_h, k_w)` as a `c_o x c_i k_h k_w` matrix.
pub fn reshape_2d<T: Scalar>(tensor: &ArrayD<T>) -> Result<Array2<T>> {
    if tensor.ndim() != 4 {
        return Err(Error::structural(format!(
            "expected a 4-D conv tensor, got shape {:?}",
            tensor.shape()
        )));
    }
    let rows = tensor.shape()[0];
    let cols: usize = tensor.shape()[1..].iter().product();
    Ok(tensor
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("contiguous"))
}

/// Inverse of [`reshape_2d`] (also accepts 2-D target shapes).
pub fn unreshape<T: Scalar>(matrix: Array2<T>, shape: &[usize]) -> Result<ArrayD<T>> {
    matrix
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .map_err(|e| Error::structural(format!("cannot reshape to {shape:?}: {e}")))
}

/// Smallest `k` whose leading singular values hold at least `eta` of the energy.
///
/// `singular_values` must be sorted descending. Fails on an all-zero spectrum.
pub fn select_rank<T: Scalar>(singular_values: &[T], eta: T) -> Result<usize> {
    let cumulative: Vec<T> = singular_values
        .iter()
        .scan(T::zero(), |acc, &s| {
            *acc += s * s;
            Some(*acc)
        })
        .collect();
    let total = match cumulative.last() {
        Some(&t) if t > T::zero() => t,
        _ => return Err(Error::DegenerateSpectrum),
    };
    Ok(cumulative
        .iter()
        .position(|&c| c / total >= eta)
        .unwrap_or(cumulative.len() - 1)
        + 1)
}

/// Retained-energy fraction of the leading `rank` singular values.
pub fn retained_energy<T: Scalar>(singular_values: &[T], rank: usize) -> T {
    let total: T = singular_values.iter().map(|&s| s * s).sum();
    if total == T::zero() {
        return T::one();
    }
    singular_values.iter().take(rank).map(|&s| s * s).sum::<T>() / total
}

/// Full-rank factors and the descending spectrum of `matrix`.
pub fn truncated_svd<T: Scalar>(matrix: ArrayView2<T>) -> Result<(LowRankFactors<T>, Vec<T>)> {
    let svd = thin_svd(matrix)?;
    let (u_prime, v_t) = svd.truncate(svd.singular_values.len());
    Ok((LowRankFactors { u_prime, v_t }, svd.singular_values))
}

fn factors_at_rank<T: Scalar>(matrix: ArrayView2<T>, rank: Option<usize>, eta: T) -> Result<LowRankFactors<T>> {
    let (m, n) = matrix.dim();
    let svd = thin_svd(matrix)?;
    let r = match rank {
        Some(r) => r.min(m.min(n)),
        None => match select_rank(&svd.singular_values, eta) {
            Ok(r) => r,
            Err(Error::DegenerateSpectrum) => return Ok(LowRankFactors::zeros(m, n)),
            Err(e) => return Err(e),
        },
    };
    if svd.singular_values.first().is_none_or(|&s| s == T::zero()) {
        return Ok(LowRankFactors::zeros(m, n));
    }
    let (u_prime, v_t) = svd.truncate(r);
    Ok(LowRankFactors { u_prime, v_t })
}

/// Number of residual entries kept for an `total`-entry matrix: `ceil(fraction * total)`.
pub fn residual_count(fraction: f64, total: usize) -> usize {
    let x = fraction * total as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (k as usize).min(total)
}

/// Coordinates of the `count` largest `|values|`, ties broken by row-major order.
pub fn top_entries<T: Scalar>(values: &Array2<T>, count: usize) -> Vec<(usize, usize)> {
    let n = values.ncols();
    let flat: Vec<T> = values.iter().copied().collect();
    let mut idx: Vec<usize> = (0..flat.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        flat[b]
            .abs()
            .partial_cmp(&flat[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if count == 0 {
        return Vec::new();
    }
    if count < idx.len() {
        idx.select_nth_unstable_by(count - 1, cmp);
        idx.truncate(count);
    }
    idx.sort_unstable();
    idx.into_iter().map(|i| (i / n, i % n)).collect()
}

/// Dynamic-rank factors plus the top-fraction residual, scaled by `gamma`.
pub fn compress_part1<T: Scalar>(
    matrix: ArrayView2<T>,
    config: &EnergyConfig,
) -> Result<(LowRankFactors<T>, SparseResidual<T>)> {
    let gamma = T::of(config.gamma);
    let factors = factors_at_rank(matrix, None, T::of(config.eta))?;
    if matrix.iter().all(|&v| v == T::zero()) {
        return Ok((factors, SparseResidual::empty(gamma)));
    }
    let residual = &matrix - &factors.reconstruct();
    let count = residual_count(config.residual_fraction, residual.len());
    let entries = top_entries(&residual, count)
        .into_iter()
        .map(|(row, col)| ResidualEntry {
            row,
            col,
            value: gamma * residual[[row, col]],
        })
        .collect();
    Ok((factors, SparseResidual { entries, gamma }))
}

/// Dynamic-rank factors without residual.
pub fn compress_part2<T: Scalar>(matrix: ArrayView2<T>, config: &EnergyConfig) -> Result<LowRankFactors<T>> {
    factors_at_rank(matrix, None, T::of(config.eta))
}

fn compress_groups<T: Scalar>(
    matrix: ArrayView2<T>,
    group_channels: usize,
    rank: usize,
) -> Result<Vec<LowRankFactors<T>>> {
    let (rows, cols) = matrix.dim();
    if group_channels == 0 || rows % group_channels != 0 {
        return Err(Error::config(format!(
            "{rows} output channels not divisible into groups of {group_channels}"
        )));
    }
    (0..rows / group_channels)
        .map(|g| {
            let block = matrix.slice(s![g * group_channels..(g + 1) * group_channels, ..]);
            if block.iter().all(|&v| v == T::zero()) {
                Ok(LowRankFactors::zeros(group_channels, cols))
            } else {
                factors_at_rank(block, Some(rank), T::one())
            }
        })
        .collect()
}

/// Grouped fixed-rank factorization of a 4-D conv tensor.
pub fn compress_part3<T: Scalar>(tensor: &ArrayD<T>, config: &EnergyConfig) -> Result<Vec<LowRankFactors<T>>> {
    let matrix = reshape_2d(tensor)?;
    compress_groups(matrix.view(), config.group_channels, config.group_rank)
}

fn dense_body<T: Scalar>(tensor: &ArrayD<T>) -> LayerBody<T> {
    LayerBody::Dense(tensor.iter().copied().collect())
}

/// Compresses every layer of `params` according to its part and `compression`.
pub fn compress<T: Scalar>(
    params: &ParameterSet<T>,
    kind: UpdateKind,
    compression: &Compression,
) -> Result<CompressedUpdate<T>> {
    let layers = params
        .iter()
        .map(|(spec, tensor)| {
            let body = match (compression, spec.part) {
                (_, Part::Head) | (Compression::Lossless, _) => dense_body(tensor),
                (Compression::Hierarchical(cfg), part) => {
                    let matrix = reshape_2d(tensor)?;
                    match part {
                        Part::Part1 => {
                            let (factors, residual) = compress_part1(matrix.view(), cfg)?;
                            LayerBody::Residual { factors, residual }
                        }
                        Part::Part2 => LayerBody::LowRank(compress_part2(matrix.view(), cfg)?),
                        _ => LayerBody::Grouped(compress_groups(
                            matrix.view(),
                            cfg.group_channels,
                            cfg.group_rank,
                        )?),
                    }
                }
                (
                    Compression::FixedRank {
                        rank,
                        group_channels,
                    },
                    part,
                ) => {
                    let matrix = reshape_2d(tensor)?;
                    if part == Part::Part3 {
                        LayerBody::Grouped(compress_groups(matrix.view(), *group_channels, *rank)?)
                    } else if matrix.iter().all(|&v| v == T::zero()) {
                        let (m, n) = matrix.dim();
                        LayerBody::LowRank(LowRankFactors::zeros(m, n))
                    } else {
                        LayerBody::LowRank(factors_at_rank(matrix.view(), Some(*rank), T::one())?)
                    }
                }
            };
            Ok(CompressedLayer {
                shape: spec.shape.clone(),
                body,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedUpdate { kind, layers })
}

/// Rebuilds a parameter set from its compressed form.
pub fn decompress<T: Scalar>(
    update: &CompressedUpdate<T>,
    specs: &Arc<Vec<LayerSpec>>,
) -> Result<ParameterSet<T>> {
    if update.layers.len() != specs.len() {
        return Err(Error::structural(format!(
            "update has {} layers, model has {}",
            update.layers.len(),
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for (layer, spec) in update.layers.iter().zip(specs.iter()) {
        if layer.shape != spec.shape {
            return Err(Error::structural(format!(
                "layer {}: compressed shape {:?} != {:?}",
                spec.name, layer.shape, spec.shape
            )));
        }
        let (m, n) = layer.matrix_dims();
        let mismatch = || {
            Error::structural(format!(
                "layer {} ({}) cannot carry this encoding",
                spec.name, spec.part
            ))
        };
        let matrix = match &layer.body {
            LayerBody::Dense(values) => {
                if values.len() != m * n {
                    return Err(Error::structural(format!(
                        "layer {}: {} dense values for {} entries",
                        spec.name,
                        values.len(),
                        m * n
                    )));
                }
                Array2::from_shape_vec((m, n), values.clone()).expect("length checked")
            }
            _ if spec.part == Part::Head || spec.kind != LayerKind::Conv => return Err(mismatch()),
            LayerBody::Residual { factors, residual } => {
                if spec.part != Part::Part1 {
                    return Err(mismatch());
                }
                factors.check(m, n)?;
                residual.check(m, n)?;
                let mut a = factors.reconstruct();
                residual.add_to(&mut a);
                a
            }
            LayerBody::LowRank(factors) => {
                factors.check(m, n)?;
                factors.reconstruct()
            }
            LayerBody::Grouped(groups) => {
                if spec.part != Part::Part3 || groups.is_empty() || m % groups.len() != 0 {
                    return Err(mismatch());
                }
                let c = m / groups.len();
                let mut a = Array2::zeros((m, n));
                for (g, f) in groups.iter().enumerate() {
                    f.check(c, n)?;
                    a.slice_mut(s![g * c..(g + 1) * c, ..]).assign(&f.reconstruct());
                }
                a
            }
        };
        tensors.push(unreshape(matrix, &spec.shape)?);
    }
    ParameterSet::new(specs.clone(), tensors)
}

/// Transmitted scalars over model scalars.
///
/// Factors count every entry, a residual entry counts three (row, column,
/// value), dense layers count all their values.
pub fn transmission_ratio<T: Scalar>(update: &CompressedUpdate<T>, specs: &[LayerSpec]) -> f64 {
    let sent: usize = update.layers.iter().map(CompressedLayer::scalar_count).sum();
    let total: usize = specs.iter().map(LayerSpec::numel).sum();
    sent as f64 / total as f64
}

/// Mean retained rank per compressed part (`[part1, part2, part3]`).
pub fn mean_ranks<T: Scalar>(update: &CompressedUpdate<T>, specs: &[LayerSpec]) -> [Option<f64>; 3] {
    let mut sums = [(0.0, 0usize); 3];
    for (layer, spec) in update.layers.iter().zip(specs) {
        if spec.part == Part::Head {
            continue;
        }
        if let Some(r) = layer.mean_rank() {
            let slot = &mut sums[spec.part.index()];
            slot.0 += r;
            slot.1 += 1;
        }
    }
    sums.map(|(s, n)| (n > 0).then(|| s / n as f64))
}
