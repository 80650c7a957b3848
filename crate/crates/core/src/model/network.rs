//! Forward and backward passes for conv stacks followed by a dense head.
//!
//! Layer semantics: every conv is valid-padding, stride 1, no bias, followed
//! by ReLU. After the last conv a global average pool produces one feature
//! per channel; a model without conv layers flattens its input instead. Dense
//! layers use ReLU between them and none after the last, whose outputs are
//! the logits.

use std::sync::Arc;

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{validate_layers, LayerKind, LayerSpec, ParameterSet, Part};
use crate::{Error, Result, Scalar};

/// A mini-batch of images `(batch, channels, height, width)` with class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Array4<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Array4<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] == 0 {
            return Err(Error::structural("batch must contain at least one sample"));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::structural(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Array2<T>,
    pub loss: T,
}

struct ConvCache<T> {
    cols: Array2<T>,
    pre: Array2<T>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

struct DenseCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
}

struct Trace<T> {
    convs: Vec<ConvCache<T>>,
    denses: Vec<DenseCache<T>>,
    /// Channels and spatial size feeding the pool (or the flatten).
    feature_src: (usize, usize, usize),
    logits: Array2<T>,
}

/// Patches of a `(C, B*H*W)` activation as an `(C*kh*kw, B*oh*ow)` matrix.
fn im2col<T: Scalar>(
    act: &Array2<T>,
    batch: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
) -> Array2<T> {
    let c = act.nrows();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut cols = Array2::zeros((c * kh * kw, batch * oh * ow));
    let src = act.as_slice().expect("standard layout");
    let out_cols = batch * oh * ow;
    let dst = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let drow = &mut dst[row * out_cols..(row + 1) * out_cols];
                for b in 0..batch {
                    let base = ch * batch * h * w + b * h * w;
                    for y in 0..oh {
                        let s0 = base + (y + i) * w + j;
                        let d0 = b * oh * ow + y * ow;
                        drow[d0..d0 + ow].copy_from_slice(&src[s0..s0 + ow]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back to the input layout.
fn col2im<T: Scalar>(
    dcols: &Array2<T>,
    channels: usize,
    batch: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
) -> Array2<T> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Array2::zeros((channels, batch * h * w));
    let src = dcols.as_slice().expect("standard layout");
    let in_cols = batch * oh * ow;
    let dst = out.as_slice_mut().expect("standard layout");
    for ch in 0..channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let srow = &src[row * in_cols..(row + 1) * in_cols];
                for b in 0..batch {
                    let base = ch * batch * h * w + b * h * w;
                    for y in 0..oh {
                        let d0 = base + (y + i) * w + j;
                        let s0 = b * oh * ow + y * ow;
                        for x in 0..ow {
                            dst[d0 + x] += srow[s0 + x];
                        }
                    }
                }
            }
        }
    }
    out
}

fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

fn relu_backward<T: Scalar>(grad: &mut Array2<T>, pre: &Array2<T>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
}

fn check_finite<T: Scalar>(x: &Array2<T>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(format!("activation of layer {layer}")))
    }
}

fn conv_weight_2d<'a, T: Scalar>(spec: &LayerSpec, w: &'a ndarray::ArrayD<T>) -> ArrayView2<'a, T> {
    let (rows, cols) = spec.matrix_dims();
    w.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous conv weight")
}

fn dense_weight<'a, T: Scalar>(spec: &LayerSpec, w: &'a ndarray::ArrayD<T>) -> ArrayView2<'a, T> {
    w.view()
        .into_shape_with_order((spec.shape[0], spec.shape[1]))
        .expect("contiguous dense weight")
}

fn run_forward<T: Scalar>(model: &ParameterSet<T>, batch: &Batch<T>) -> Result<Trace<T>> {
    let specs = model.specs();
    let (b, mut c, mut h, mut w) = batch.inputs.dim();
    let n_conv = specs.iter().take_while(|s| s.kind == LayerKind::Conv).count();

    // (C, B*H*W) layout for the conv stack.
    let mut act: Array2<T> = batch
        .inputs
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous input");

    let mut convs = Vec::with_capacity(n_conv);
    for (spec, weight) in specs.iter().zip(model.tensors()).take(n_conv) {
        let [co, ci, kh, kw] = [spec.shape[0], spec.shape[1], spec.shape[2], spec.shape[3]];
        if ci != c {
            return Err(Error::structural(format!(
                "layer {} expects {ci} input channels, got {c}",
                spec.name
            )));
        }
        if kh > h || kw > w {
            return Err(Error::structural(format!(
                "layer {}: kernel {kh}x{kw} larger than input {h}x{w}",
                spec.name
            )));
        }
        let cols = im2col(&act, b, (h, w), (kh, kw));
        let pre = conv_weight_2d(spec, weight).dot(&cols);
        check_finite(&pre, &spec.name)?;
        act = relu(&pre);
        let out_hw = (h - kh + 1, w - kw + 1);
        convs.push(ConvCache {
            cols,
            pre,
            in_hw: (h, w),
            out_hw,
        });
        c = co;
        (h, w) = out_hw;
    }

    let feature_src = (c, h, w);
    let mut features: Array2<T> = if n_conv > 0 {
        // Global average pool: (C, B*P) -> (B, C).
        let p = h * w;
        let inv = T::one() / T::of_usize(p);
        let mut f = Array2::zeros((b, c));
        for ch in 0..c {
            let row = act.row(ch);
            for bb in 0..b {
                let sum: T = row.slice(s![bb * p..(bb + 1) * p]).iter().copied().sum();
                f[[bb, ch]] = sum * inv;
            }
        }
        f
    } else {
        batch
            .inputs
            .view()
            .into_shape_with_order((b, c * h * w))
            .map_err(|e| Error::structural(e.to_string()))?
            .to_owned()
    };

    let mut denses = Vec::new();
    let dense_specs = &specs[n_conv..];
    for (k, (spec, weight)) in dense_specs
        .iter()
        .zip(&model.tensors()[n_conv..])
        .enumerate()
    {
        if spec.shape[1] != features.ncols() {
            return Err(Error::structural(format!(
                "layer {} expects {} inputs, got {}",
                spec.name,
                spec.shape[1],
                features.ncols()
            )));
        }
        let pre = features.dot(&dense_weight(spec, weight).t());
        check_finite(&pre, &spec.name)?;
        let last = k + 1 == dense_specs.len();
        let next = if last { pre.clone() } else { relu(&pre) };
        denses.push(DenseCache {
            input: std::mem::replace(&mut features, next),
            pre,
        });
    }

    let k = features.ncols();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(Error::structural(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(Trace {
        convs,
        denses,
        feature_src,
        logits: features,
    })
}

/// Row-wise log-sum-exp and the mean cross-entropy.
fn cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    let b = logits.nrows();
    let mut probs = logits.clone();
    let mut loss = T::zero();
    for (mut row, &y) in probs.axis_iter_mut(Axis(0)).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp());
    }
    (loss / T::of_usize(b), probs)
}

/// Logits and mean cross-entropy loss for `batch`.
pub fn forward<T: Scalar>(model: &ParameterSet<T>, batch: &Batch<T>) -> Result<ForwardOutput<T>> {
    let trace = run_forward(model, batch)?;
    let (loss, _) = cross_entropy(&trace.logits, &batch.labels);
    Ok(ForwardOutput {
        logits: trace.logits,
        loss,
    })
}

/// Gradient of the mean cross-entropy loss with respect to every weight.
pub fn backward<T: Scalar>(model: &ParameterSet<T>, batch: &Batch<T>) -> Result<ParameterSet<T>> {
    loss_and_grad(model, batch).map(|(_, g)| g)
}

/// Loss and gradient from one forward/backward sweep.
pub fn loss_and_grad<T: Scalar>(
    model: &ParameterSet<T>,
    batch: &Batch<T>,
) -> Result<(T, ParameterSet<T>)> {
    let trace = run_forward(model, batch)?;
    let (loss, probs) = cross_entropy(&trace.logits, &batch.labels);
    let b = batch.len();
    let specs = model.specs();
    let n_conv = trace.convs.len();
    let mut grad = model.zeros_like();

    let inv_b = T::one() / T::of_usize(b);
    let mut delta = probs;
    for (mut row, &y) in delta.axis_iter_mut(Axis(0)).zip(&batch.labels) {
        row[y] -= T::one();
        row.mapv_inplace(|v| v * inv_b);
    }

    // Dense head, last to first. `delta` is dL/d(pre-activation).
    for (k, cache) in trace.denses.iter().enumerate().rev() {
        let l = n_conv + k;
        let spec = &specs[l];
        let w = dense_weight(spec, model.tensor(l));
        let dw = delta.t().dot(&cache.input);
        grad.tensor_mut(l)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(dw.as_standard_layout().as_slice().expect("standard layout"));
        let mut d_in = delta.dot(&w);
        if k > 0 {
            relu_backward(&mut d_in, &trace.denses[k - 1].pre);
        }
        delta = d_in;
    }

    if n_conv == 0 {
        return Ok((loss, grad));
    }

    // Undo the global average pool: (B, C) -> (C, B*P).
    let (c, h, w) = trace.feature_src;
    let p = h * w;
    let inv_p = T::one() / T::of_usize(p);
    let mut d_act = Array2::zeros((c, b * p));
    for ch in 0..c {
        for bb in 0..b {
            let v = delta[[bb, ch]] * inv_p;
            d_act.slice_mut(s![ch, bb * p..(bb + 1) * p]).fill(v);
        }
    }

    for l in (0..n_conv).rev() {
        let cache = &trace.convs[l];
        let spec = &specs[l];
        relu_backward(&mut d_act, &cache.pre);
        let dw = d_act.dot(&cache.cols.t());
        grad.tensor_mut(l)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(dw.as_standard_layout().as_slice().expect("standard layout"));
        if l > 0 {
            let w = conv_weight_2d(spec, model.tensor(l));
            let dcols = w.t().dot(&d_act);
            d_act = col2im(
                &dcols,
                spec.shape[1],
                b,
                cache.in_hw,
                (spec.shape[2], spec.shape[3]),
            );
        }
        debug_assert_eq!(cache.out_hw.0 * cache.out_hw.1 * b, cache.pre.ncols());
    }
    Ok((loss, grad))
}

/// Mean loss and accuracy over `inputs`, evaluated in chunks.
pub fn evaluate<T: Scalar>(
    model: &ParameterSet<T>,
    inputs: &Array4<T>,
    labels: &[usize],
    chunk: usize,
) -> Result<(T, f64)> {
    let n = labels.len();
    if n == 0 {
        return Ok((T::zero(), 0.0));
    }
    let chunk = chunk.max(1);
    let mut loss = T::zero();
    let mut correct = 0usize;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let batch = Batch::new(
            inputs.slice(s![start..end, .., .., ..]).to_owned(),
            labels[start..end].to_vec(),
        )?;
        let out = forward(model, &batch)?;
        loss += out.loss * T::of_usize(end - start);
        for (row, &y) in out.logits.axis_iter(Axis(0)).zip(&batch.labels) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == y {
                correct += 1;
            }
        }
    }
    Ok((loss / T::of_usize(n), correct as f64 / n as f64))
}

/// Shape of the small conv net used by the simulator.
///
/// Default: one 8-channel conv in part 1, two 16-channel convs in part 2,
/// two 64-channel convs in part 3 (the last one 1x1), then a dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyConvConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub part1_channels: usize,
    pub part2_channels: Vec<usize>,
    pub part3_channels: Vec<usize>,
    /// One kernel size per conv layer, in order.
    pub kernels: Vec<usize>,
    pub n_classes: usize,
}

impl Default for TinyConvConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 10,
            part1_channels: 8,
            part2_channels: vec![16, 16],
            part3_channels: vec![64, 64],
            kernels: vec![3, 3, 3, 3, 1],
            n_classes: 3,
        }
    }
}

impl TinyConvConfig {
    pub fn layer_specs(&self) -> Result<Arc<Vec<LayerSpec>>> {
        let n_conv = 1 + self.part2_channels.len() + self.part3_channels.len();
        if self.kernels.len() != n_conv {
            return Err(Error::config(format!(
                "{} kernel sizes for {n_conv} conv layers",
                self.kernels.len()
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        let shrink: usize = self.kernels.iter().map(|k| k.saturating_sub(1)).sum();
        if self.kernels.contains(&0) || self.image_size <= shrink {
            return Err(Error::config(format!(
                "image size {} too small for kernels {:?}",
                self.image_size, self.kernels
            )));
        }
        let channels = std::iter::once((self.part1_channels, Part::Part1))
            .chain(self.part2_channels.iter().map(|&c| (c, Part::Part2)))
            .chain(self.part3_channels.iter().map(|&c| (c, Part::Part3)));
        let mut specs = Vec::with_capacity(n_conv + 1);
        let mut c_in = self.in_channels;
        for (i, ((c_out, part), &k)) in channels.zip(&self.kernels).enumerate() {
            specs.push(LayerSpec::conv(format!("conv{}", i + 1), [c_out, c_in, k, k], part));
            c_in = c_out;
        }
        specs.push(LayerSpec::dense("fc", self.n_classes, c_in));
        validate_layers(&specs)?;
        Ok(Arc::new(specs))
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParameterSet<T>> {
        Ok(init_he(self.layer_specs()?, seed))
    }
}

/// He-normal initialization, `N(0, 2 / fan_in)` per weight.
pub fn init_he<T: Scalar>(specs: Arc<Vec<LayerSpec>>, seed: u64) -> ParameterSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan_in: Vec<f64> = specs
        .iter()
        .map(|s| s.shape[1..].iter().product::<usize>() as f64)
        .collect();
    ParameterSet::from_fn(specs, |l, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::of(z * (2.0 / fan_in[l]).sqrt())
    })
}
