//! Dense row-major tensors.
//!
//! `Tensor<T>` is a plain value: a shape plus a flat element buffer. It has no
//! notion of gradients — differentiation lives on the [`crate::tape::Tape`],
//! which owns per-node gradient buffers. Keeping the value type inert makes
//! tensors freely clonable and sendable between threads.

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and row-major data.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.rank(), 2, "row() needs a rank-2 tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Elementwise map into a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Casts every element to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().expect("scalar converts to f64")))
                .collect(),
        }
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "cannot stack zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("mixed shapes {:?} vs {:?}", first.shape, t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// Trailing-dimension broadcast shape of two operand shapes.
///
/// Shapes are aligned at their last dimension; each pair of extents must be
/// equal or one of them 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::shape(
                "broadcast",
                format!("shapes {:?} and {:?} are not broadcastable", a, b),
            ));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides for a shape, with stride 0 on broadcast (extent-1) axes
/// when the shape is padded to `rank` dimensions.
pub(crate) fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Row-major strides of a dense shape.
fn dense_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// How one operand's broadcast strides traverse the output.
enum IndexPlan {
    /// Same flat index as the output.
    Dense,
    /// Constant over trailing runs of `inner` elements (operand shaped like
    /// the leading output dims).
    Outer { inner: usize },
    /// Cycles through `inner` positions (operand shaped like the trailing
    /// output dims).
    Inner { inner: usize },
    /// Anything else: generic stride walk.
    General,
}

fn classify(strides: &[usize], out_shape: &[usize], dense: &[usize]) -> IndexPlan {
    if strides == dense {
        return IndexPlan::Dense;
    }
    let rank = out_shape.len();
    // zero-stride suffix: operand constant over the trailing block
    let mut k = rank;
    while k > 0 && strides[k - 1] == 0 {
        k -= 1;
    }
    if k < rank {
        let lead = dense_strides(&out_shape[..k]);
        if strides[..k] == lead[..] {
            let inner: usize = out_shape[k..].iter().product();
            return IndexPlan::Outer { inner };
        }
    }
    // zero-stride prefix: operand repeats along leading dims
    let mut k2 = 0;
    while k2 < rank && strides[k2] == 0 {
        k2 += 1;
    }
    if k2 > 0 && strides[k2..] == dense[k2..] {
        let inner: usize = out_shape[k2..].iter().product();
        return IndexPlan::Inner { inner };
    }
    IndexPlan::General
}

/// Iterates an output shape in row-major order, yielding for every output
/// index the flat source indices of the two broadcast operands. Common
/// layouts (same shape, per-row constants, repeated rows) take direct loops
/// instead of the generic stride walk.
pub(crate) fn for_each_broadcast_pair(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    if rank == 0 {
        if numel == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let dense = dense_strides(out_shape);
    let plan_a = classify(&sa, out_shape, &dense);
    let plan_b = classify(&sb, out_shape, &dense);
    let index = |plan: &IndexPlan, flat: usize| -> usize {
        match plan {
            IndexPlan::Dense => flat,
            IndexPlan::Outer { inner } => flat / inner,
            IndexPlan::Inner { inner } => flat % inner,
            IndexPlan::General => unreachable!("general plans take the stride walk"),
        }
    };
    if !matches!(plan_a, IndexPlan::General) && !matches!(plan_b, IndexPlan::General) {
        match (&plan_a, &plan_b) {
            (IndexPlan::Dense, IndexPlan::Dense) => {
                for i in 0..numel {
                    f(i, i, i);
                }
            }
            _ => {
                for i in 0..numel {
                    f(i, index(&plan_a, i), index(&plan_b, i));
                }
            }
        }
        return;
    }
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for flat in 0..numel {
        f(flat, ai, bi);
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero_with_one_element() {
        let s = Tensor::scalar(4.0f64);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn broadcast_shape_trailing_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 5], &[2, 5]).unwrap(), vec![4, 2, 5]);
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_iteration_matches_manual_indexing() {
        // [2,1,3] against [2,3] -> [2,2,3]
        let out = broadcast_shape(&[2, 1, 3], &[2, 3]).unwrap();
        let mut seen = Vec::new();
        for_each_broadcast_pair(&out, &[2, 1, 3], &[2, 3], |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen.len(), 12);
        // manual check: output coord (i,j,k) -> a index i*3+k, b index j*3+k
        for (o, a, b) in seen {
            let i = o / 6;
            let j = (o / 3) % 2;
            let k = o % 3;
            assert_eq!(a, i * 3 + k);
            assert_eq!(b, j * 3 + k);
        }
    }

    #[test]
    fn stack_concatenates_along_new_axis() {
        let a = Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0f32, 4.0]).unwrap();
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
