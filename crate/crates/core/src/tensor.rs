//! Dense row-major tensor value type and shape utilities.
//!
//! A `Tensor` is a plain value: flat `f64` storage plus extents. Gradients are
//! produced by [`crate::tape::Tape`] and absorbed back into the `grad` field of
//! parameter tensors after a backward pass.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!("expected scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Value at a multi-index (row-major).
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn at_mut(&mut self, idx: &[usize]) -> &mut f64 {
        let i = flat_index(&self.shape, idx);
        &mut self.data[i]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut flat = 0;
    for (d, &i) in idx.iter().enumerate() {
        debug_assert!(i < shape[d]);
        flat = flat * shape[d] + i;
    }
    flat
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Broadcast two shapes (numpy rules, right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a, b)));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides of `shape` viewed through broadcast target `out_shape`
/// (stride 0 on broadcast axes, shape padded with leading 1s).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = strides(shape);
    let mut s = vec![0; nd];
    let off = nd - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Odometer over a broadcast output: yields (out_flat, a_flat, b_flat).
/// Calls `f` for every element of `out_shape` in row-major order.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    let numel: usize = out_shape.iter().product();
    if nd == 0 {
        if numel == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut ao = 0usize;
    let mut bo = 0usize;
    for flat in 0..numel {
        f(flat, ao, bo);
        // increment odometer
        for d in (0..nd).rev() {
            idx[d] += 1;
            ao += a_strides[d];
            bo += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ao -= a_strides[d] * out_shape[d];
            bo -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_len() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn flat_index_row_major() {
        assert_eq!(flat_index(&[2, 3], &[1, 2]), 5);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 3]).unwrap(), vec![2, 4, 3]);
        assert_eq!(broadcast_shape(&[5], &[2, 5]).unwrap(), vec![2, 5]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn broadcast_walk_matches_naive() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let out_shape = broadcast_shape(&a.shape, &b.shape).unwrap();
        let asr = broadcast_strides(&a.shape, &out_shape);
        let bsr = broadcast_strides(&b.shape, &out_shape);
        let mut got = vec![0.0; 6];
        for_each_broadcast2(&out_shape, &asr, &bsr, |o, ai, bi| {
            got[o] = a.data[ai] + b.data[bi];
        });
        assert_eq!(got, vec![11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }
}
