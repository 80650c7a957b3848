//! Synthetic image datasets and non-IID partitioning.
//!
//! Each class has a fixed spatial template (an off-centre blob plus a
//! class-specific stripe pattern); samples are template plus Gaussian noise.
//! Per-client feature shift is a channel-wise affine contrast/offset change,
//! standing in for scanner differences between sites. Acquisition "pulses"
//! are fixed channel-wise contrast profiles, selectable by letter.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Strength of the per-client contrast/offset shift; 0 disables it.
    pub shift_strength: f64,
    /// Pulse letters (`G`, `S`, `R`) whose contrast profiles are averaged.
    pub pulses: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            samples_per_class: 200,
            channels: 3,
            height: 10,
            width: 10,
            noise_std: 1.0,
            shift_strength: 0.3,
            pulses: "GSR".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.samples_per_class == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("dataset dimensions must be positive"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || self.shift_strength.is_nan() || self.shift_strength < 0.0 {
            return Err(Error::config("noise_std and shift_strength must be >= 0"));
        }
        pulse_gains(&self.pulses, self.channels)?;
        Ok(())
    }
}

/// Images `(n, c, h, w)` with labels in `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Array4<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn concat(parts: &[&Dataset<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::structural("concat of no datasets"))?;
        let views: Vec<_> = parts.iter().map(|d| d.inputs.view()).collect();
        let inputs = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::structural(e.to_string()))?;
        Ok(Self {
            inputs,
            labels: parts.iter().flat_map(|d| d.labels.iter().copied()).collect(),
            n_classes: first.n_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Channel gains of one pulse letter.
fn single_pulse(letter: char, channels: usize) -> Option<Vec<f64>> {
    let phase = match letter.to_ascii_uppercase() {
        'G' => 0.0,
        'S' => 2.1,
        'R' => 4.2,
        _ => return None,
    };
    Some(
        (0..channels)
            .map(|c| 1.0 + 0.5 * (phase + 1.7 * c as f64).cos())
            .collect(),
    )
}

/// Mean channel gains of a pulse combination such as `"GS"`.
pub fn pulse_gains(pulses: &str, channels: usize) -> Result<Vec<f64>> {
    if pulses.is_empty() {
        return Err(Error::config("pulse combination must name at least one pulse"));
    }
    let mut sum = vec![0.0; channels];
    for letter in pulses.chars() {
        let g = single_pulse(letter, channels)
            .ok_or_else(|| Error::config(format!("unknown pulse '{letter}', expected G, S or R")))?;
        sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
    }
    let n = pulses.chars().count() as f64;
    Ok(sum.into_iter().map(|v| v / n).collect())
}

/// Noise-free template of `class`, shape `(c, h, w)` flattened row-major.
pub fn class_template(spec: &SyntheticSpec, class: usize) -> Vec<f64> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let angle = std::f64::consts::TAU * class as f64 / spec.n_classes as f64;
    let cy = (h as f64 - 1.0) / 2.0 + 0.25 * h as f64 * angle.sin();
    let cx = (w as f64 - 1.0) / 2.0 + 0.25 * w as f64 * angle.cos();
    let width = (h.min(w) as f64 / 5.0).max(0.5);
    let freq = 0.6 + 0.35 * class as f64;
    let gains = pulse_gains(&spec.pulses, c).unwrap_or_else(|_| vec![1.0; c]);
    let mut out = Vec::with_capacity(c * h * w);
    for (ch, gain) in gains.iter().enumerate() {
        let sign = if (ch + class).is_multiple_of(2) { 1.0 } else { -1.0 };
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = 2.0 * (-d2 / (2.0 * width * width)).exp();
                let stripe = 0.5 * (freq * (x as f64 * angle.cos() + y as f64 * angle.sin())).sin();
                out.push(gain * (sign * blob + stripe));
            }
        }
    }
    out
}

/// Class-balanced dataset: templates plus seeded Gaussian noise, classes interleaved.
pub fn generate<T: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let templates: Vec<Vec<f64>> = (0..spec.n_classes).map(|k| class_template(spec, k)).collect();
    let per = spec.channels * spec.height * spec.width;
    let n = spec.n_classes * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.n_classes;
        labels.push(k);
        for &t in &templates[k] {
            let z = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(T::of(t + z));
        }
    }
    let inputs = Array4::from_shape_vec((n, spec.channels, spec.height, spec.width), data)
        .expect("length matches shape");
    Ok(Dataset {
        inputs,
        labels,
        n_classes: spec.n_classes,
    })
}

/// Applies client `client`'s channel-wise `x -> a x + b` in place.
pub fn apply_feature_shift<T: Scalar>(data: &mut Dataset<T>, client: usize, strength: f64, seed: u64) {
    if strength == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5417 ^ (client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let channels = data.inputs.shape()[1];
    for ch in 0..channels {
        let a = 1.0 + strength * rng.random_range(-1.0..1.0);
        let b = strength * rng.random_range(-1.0..1.0);
        let (a, b) = (T::of(a), T::of(b));
        data.inputs
            .slice_mut(s![.., ch, .., ..])
            .mapv_inplace(|x| a * x + b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Dirichlet concentration; small values give strong label skew.
    pub concentration: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            n_clients: 5,
            concentration: 0.5,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

const MAX_PARTITION_RETRIES: u64 = 100;

/// Per-class Dirichlet split of sample indices into `n_clients` disjoint shards.
///
/// Every shard must end up with at least two samples (one per split); the
/// draw is repeated with a fresh sub-seed otherwise.
pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    if spec.n_clients == 0 {
        return Err(Error::config("n_clients must be positive"));
    }
    if !(spec.concentration > 0.0 && spec.concentration.is_finite()) {
        return Err(Error::config(format!(
            "Dirichlet concentration must be > 0, got {}",
            spec.concentration
        )));
    }
    if spec.n_clients == 1 {
        return Ok(vec![(0..labels.len()).collect()]);
    }
    let gamma = Gamma::new(spec.concentration, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    for attempt in 0..MAX_PARTITION_RETRIES {
        let sub_seed = spec.seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let mut shards = vec![Vec::new(); spec.n_clients];
        for members in by_class.values() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let draws: Vec<f64> = (0..spec.n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut cumulative = 0.0;
            let mut start = 0;
            for (client, d) in draws.iter().enumerate() {
                cumulative += if total > 0.0 { d / total } else { 1.0 / spec.n_clients as f64 };
                let end = if client + 1 == spec.n_clients {
                    members.len()
                } else {
                    ((cumulative * members.len() as f64).floor() as usize).clamp(start, members.len())
                };
                shards[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| s.len() >= 2) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::config(format!(
        "could not give every client two samples after {MAX_PARTITION_RETRIES} Dirichlet draws"
    )))
}

/// Train/test split of one shard, stratified when every class has two or more samples.
pub fn split_train_test(
    shard: &[usize],
    labels: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if shard.len() < 2 {
        return Err(Error::config(format!(
            "shard of {} samples is too small to split",
            shard.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_count = |n: usize| ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in shard {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    if by_class.values().all(|m| m.len() >= 2) {
        for mut members in by_class.into_values() {
            members.shuffle(&mut rng);
            let k = split_count(members.len());
            train.extend_from_slice(&members[..k]);
            test.extend_from_slice(&members[k..]);
        }
    } else {
        let mut members = shard.to_vec();
        members.shuffle(&mut rng);
        let k = split_count(members.len());
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Mean over shards of the L1 distance between shard and global label distributions.
pub fn label_skew(shards: &[Vec<usize>], labels: &[usize], n_classes: usize) -> f64 {
    let dist = |idx: &mut dyn Iterator<Item = usize>| {
        let mut counts = vec![0.0; n_classes];
        let mut n = 0.0;
        for i in idx {
            counts[labels[i]] += 1.0;
            n += 1.0;
        }
        counts.into_iter().map(|c| if n > 0.0 { c / n } else { 0.0 }).collect::<Vec<f64>>()
    };
    let global = dist(&mut (0..labels.len()));
    let total: f64 = shards
        .iter()
        .map(|s| {
            let d = dist(&mut s.iter().copied());
            d.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum();
    total / shards.len() as f64
}

const DATASET_MAGIC: &[u8; 4] = b"CEPD";
const DATASET_VERSION: u16 = 1;

/// Writes `data` as: magic `CEPD`, version u16, then u32 `n, c, h, w, classes`,
/// `n*c*h*w` f32 values and `n` u32 labels, all little-endian.
pub fn write_dataset<T: Scalar>(data: &Dataset<T>, mut out: impl Write) -> Result<()> {
    let (n, c, h, w) = data.inputs.dim();
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [n, c, h, w, data.n_classes] {
        let v = u32::try_from(v).map_err(|_| Error::config("dataset dimension exceeds u32"))?;
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * data.inputs.len());
    for &v in data.inputs.as_standard_layout().iter() {
        buf.extend_from_slice(&v.to_wire().to_le_bytes());
    }
    for &y in &data.labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<T: Scalar>(mut input: impl Read) -> Result<Dataset<T>> {
    let mut header = [0u8; 26];
    input.read_exact(&mut header)?;
    if &header[..4] != DATASET_MAGIC {
        return Err(Error::config("not a dataset file (bad magic)"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != DATASET_VERSION {
        return Err(Error::config(format!("unsupported dataset version {version}")));
    }
    let field = |i: usize| u32::from_le_bytes(header[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w, k) = (field(0), field(1), field(2), field(3), field(4));
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::config("dataset dimensions overflow"))?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != 4 * (count + n) {
        return Err(Error::config(format!(
            "dataset body has {} bytes, header implies {}",
            body.len(),
            4 * (count + n)
        )));
    }
    let values: Vec<T> = body[..4 * count]
        .chunks_exact(4)
        .map(|b| T::from_wire(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    let labels: Vec<usize> = body[4 * count..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::config("dataset label out of range"));
    }
    Ok(Dataset {
        inputs: Array4::from_shape_vec((n, c, h, w), values).expect("length checked"),
        labels,
        n_classes: k,
    })
}

pub fn save_dataset<T: Scalar>(data: &Dataset<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(data, std::io::BufWriter::new(file))
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}
