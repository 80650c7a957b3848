use std::fmt;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Dense,
}

/// Compression tier a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    /// Shallow layer: dynamic rank plus sparse residual compensation.
    Part1,
    /// Middle layers: dynamic rank only.
    Part2,
    /// Deep layers: grouped fixed-rank factorization.
    Part3,
    /// Classifier head, always sent dense.
    Head,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Part1, Part::Part2, Part::Part3, Part::Head];

    pub fn index(self) -> usize {
        match self {
            Part::Part1 => 0,
            Part::Part2 => 1,
            Part::Part3 => 2,
            Part::Head => 3,
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Part::Part1 => "part1",
            Part::Part2 => "part2",
            Part::Part3 => "part3",
            Part::Head => "head",
        };
        f.write_str(s)
    }
}

/// Static description of one trainable layer.
///
/// Conv shapes are `[c_out, c_in, k_h, k_w]`, dense shapes `[out, in]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub part: Part,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, shape: [usize; 4], part: Part) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            shape: shape.to_vec(),
            part,
        }
    }

    pub fn dense(name: impl Into<String>, out: usize, input: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            shape: vec![out, input],
            part: Part::Head,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rows and columns of the 2-D view used by the codec: `c_out x (c_in*k_h*k_w)`.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.shape[1..].iter().product())
    }
}

/// Checks the layout rules every model must satisfy.
///
/// Head layers form one contiguous run at the end and are exactly the dense
/// layers; at most one layer is tagged [`Part::Part1`]. A pure dense model
/// (no conv layers at all) has no Part1 layer.
pub fn validate_layers(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("model has no layers"));
    }
    for spec in specs {
        let want = match spec.kind {
            LayerKind::Conv => 4,
            LayerKind::Dense => 2,
        };
        if spec.shape.len() != want || spec.shape.contains(&0) {
            return Err(Error::config(format!(
                "layer {} has invalid shape {:?}",
                spec.name, spec.shape
            )));
        }
        if (spec.kind == LayerKind::Dense) != (spec.part == Part::Head) {
            return Err(Error::config(format!(
                "layer {}: dense layers and only dense layers belong to the head",
                spec.name
            )));
        }
    }
    let first_head = specs
        .iter()
        .position(|s| s.part == Part::Head)
        .ok_or_else(|| Error::config("model has no head layer"))?;
    if specs[first_head..].iter().any(|s| s.part != Part::Head) {
        return Err(Error::config("head layers must be contiguous and last"));
    }
    let part1 = specs.iter().filter(|s| s.part == Part::Part1).count();
    let has_conv = first_head > 0;
    if part1 > 1 || (has_conv && part1 != 1) {
        return Err(Error::config(format!(
            "expected exactly one part1 layer, found {part1}"
        )));
    }
    let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("layer names must be unique"));
    }
    Ok(())
}

/// Ordered named tensors sharing one layer layout.
///
/// Holds model weights, gradients, pseudo-gradients and optimizer moments.
/// Two sets are compatible iff their layer lists are identical.
#[derive(Clone, PartialEq)]
pub struct ParameterSet<T> {
    specs: Arc<Vec<LayerSpec>>,
    tensors: Vec<ArrayD<T>>,
}

impl<T: fmt::Debug> fmt::Debug for ParameterSet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (s, t) in self.specs.iter().zip(&self.tensors) {
            m.entry(&s.name, t);
        }
        m.finish()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new(specs: Arc<Vec<LayerSpec>>, tensors: Vec<ArrayD<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::structural(format!(
                "{} layer specs but {} tensors",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if t.shape() != s.shape.as_slice() {
                return Err(Error::structural(format!(
                    "layer {} expects shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("layer {}", s.name)));
            }
        }
        Ok(Self { specs, tensors })
    }

    pub fn zeros(specs: Arc<Vec<LayerSpec>>) -> Self {
        let tensors = specs
            .iter()
            .map(|s| ArrayD::zeros(IxDyn(&s.shape)))
            .collect();
        Self { specs, tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.specs.clone())
    }

    /// Fills every coordinate from `f(layer_index, flat_index)`.
    pub fn from_fn(specs: Arc<Vec<LayerSpec>>, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let data: Vec<T> = (0..s.numel()).map(|i| f(l, i)).collect();
                ArrayD::from_shape_vec(IxDyn(&s.shape), data).expect("shape matches numel")
            })
            .collect();
        Self { specs, tensors }
    }

    pub fn specs(&self) -> &Arc<Vec<LayerSpec>> {
        &self.specs
    }

    pub fn tensors(&self) -> &[ArrayD<T>] {
        &self.tensors
    }

    pub fn tensor(&self, layer: usize) -> &ArrayD<T> {
        &self.tensors[layer]
    }

    pub fn tensor_mut(&mut self, layer: usize) -> &mut ArrayD<T> {
        &mut self.tensors[layer]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerSpec, &ArrayD<T>)> {
        self.specs.iter().zip(&self.tensors)
    }

    pub fn is_compatible(&self, other: &ParameterSet<T>) -> bool {
        Arc::ptr_eq(&self.specs, &other.specs) || self.specs == other.specs
    }

    pub fn check_compatible(&self, other: &ParameterSet<T>) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::structural("parameter sets have different layer layouts"))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flattens all layers, in order, into one vector.
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn from_flat(specs: Arc<Vec<LayerSpec>>, flat: &[T]) -> Result<Self> {
        let total: usize = specs.iter().map(LayerSpec::numel).sum();
        if flat.len() != total {
            return Err(Error::structural(format!(
                "flat vector has {} values, layout needs {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs.iter() {
            let n = s.numel();
            let t = ArrayD::from_shape_vec(IxDyn(&s.shape), flat[offset..offset + n].to_vec())
                .expect("shape matches numel");
            offset += n;
            tensors.push(t);
        }
        Ok(Self { specs, tensors })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| t.mapv(&f)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &ParameterSet<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParameterSet<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &ParameterSet<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_compatible(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| Zip::from(a).and(b).map_collect(|&x, &y| f(x, y)))
            .collect();
        Ok(Self {
            specs: self.specs.clone(),
            tensors,
        })
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: T, other: &ParameterSet<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(factor, b);
        }
        Ok(())
    }

    /// Inner product summed over every layer, head included.
    pub fn dot(&self, other: &ParameterSet<T>) -> Result<T> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| Zip::from(a).and(b).fold(T::zero(), |acc, &x, &y| acc + x * y))
            .sum())
    }

    pub fn norm_sq(&self) -> T {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }

    /// `sum_k weights[k] * sets[k]`; all sets must be compatible.
    pub fn weighted_sum(sets: &[&ParameterSet<T>], weights: &[T]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::structural("weighted sum of an empty list"))?;
        if sets.len() != weights.len() {
            return Err(Error::structural(format!(
                "{} parameter sets but {} weights",
                sets.len(),
                weights.len()
            )));
        }
        let mut acc = first.zeros_like();
        for (set, &w) in sets.iter().zip(weights) {
            acc.axpy(w, set)?;
        }
        Ok(acc)
    }

    /// Rounds every value through `f32`, as the wire does.
    pub fn to_wire_precision(&self) -> Self {
        self.map(|v| T::from_wire(v.to_wire()))
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            specs: self.specs.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::of(v.as_f64())))
                .collect(),
        }
    }
}

/// Free-function form of [`ParameterSet::dot`].
pub fn dot<T: Scalar>(a: &ParameterSet<T>, b: &ParameterSet<T>) -> Result<T> {
    a.dot(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> Arc<Vec<LayerSpec>> {
        Arc::new(vec![
            LayerSpec::conv("c", [2, 1, 1, 1], Part::Part1),
            LayerSpec::dense("fc", 1, 2),
        ])
    }

    #[test]
    fn dot_hand_computed() {
        let specs = two_layer();
        let a = ParameterSet::from_flat(specs.clone(), &[1.0, 2.0, 3.0, -1.0]).unwrap();
        let b = ParameterSet::from_flat(specs, &[0.5, -2.0, 4.0, 3.0]).unwrap();
        // 0.5 - 4 + 12 - 3
        assert_eq!(dot(&a, &b).unwrap(), 5.5);
        assert_eq!(a.dot(&a.zeros_like()).unwrap(), 0.0);
        assert_eq!(a.dot(&a).unwrap(), a.norm_sq());
        assert_eq!(a.norm_sq(), 15.0);
    }

    #[test]
    fn incompatible_sets_are_rejected() {
        let a = ParameterSet::<f64>::zeros(two_layer());
        let b = ParameterSet::<f64>::zeros(Arc::new(vec![LayerSpec::dense("fc", 1, 2)]));
        assert!(matches!(a.dot(&b), Err(Error::Structural(_))));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn rejects_non_finite_and_wrong_shapes() {
        let specs = Arc::new(vec![LayerSpec::dense("fc", 1, 2)]);
        let bad = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            ParameterSet::new(specs.clone(), vec![bad]),
            Err(Error::NonFinite { .. })
        ));
        let wrong = ArrayD::<f64>::zeros(IxDyn(&[2, 1]));
        assert!(ParameterSet::new(specs, vec![wrong]).is_err());
    }

    #[test]
    fn layout_validation() {
        assert!(validate_layers(&two_layer()).is_ok());
        assert!(validate_layers(&[LayerSpec::dense("fc", 2, 2)]).is_ok());
        let head_in_middle = vec![
            LayerSpec::conv("a", [2, 1, 1, 1], Part::Part1),
            LayerSpec::dense("fc", 2, 2),
            LayerSpec::conv("b", [2, 2, 1, 1], Part::Part2),
        ];
        assert!(validate_layers(&head_in_middle).is_err());
        let two_part1 = vec![
            LayerSpec::conv("a", [2, 1, 1, 1], Part::Part1),
            LayerSpec::conv("b", [2, 2, 1, 1], Part::Part1),
            LayerSpec::dense("fc", 2, 2),
        ];
        assert!(validate_layers(&two_part1).is_err());
        let no_part1 = vec![
            LayerSpec::conv("a", [2, 1, 1, 1], Part::Part2),
            LayerSpec::dense("fc", 2, 2),
        ];
        assert!(validate_layers(&no_part1).is_err());
    }
}
