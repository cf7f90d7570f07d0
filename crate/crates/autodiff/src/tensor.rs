//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

/// A dense, row-major array of `f64` values.
///
/// A tensor with an empty shape is a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    /// Stack equally-shaped rows into a `[rows.len(), ...]` tensor.
    pub fn stack_rows(rows: &[&[f64]], row_shape: &[usize]) -> Self {
        let width = numel(row_shape);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            assert_eq!(r.len(), width);
            data.extend_from_slice(r);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(row_shape);
        Self { shape, data }
    }

    /// Select rows (first axis) by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let width = self.data.len() / self.shape[0].max(1);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Numpy-style broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` laid against the broadcast shape `dst` (0 on broadcast axes).
pub(crate) fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let offset = dst.len() - src.len();
    let mut strides = vec![0; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Expand `src` to `shape` by repetition along broadcast axes.
pub fn broadcast_to(src: &Tensor, shape: &[usize]) -> Tensor {
    if src.shape == shape {
        return src.clone();
    }
    let strides = broadcast_strides(&src.shape, shape);
    let n = numel(shape);
    let mut data = Vec::with_capacity(n);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(src.data[off]);
        for ax in (0..shape.len()).rev() {
            index[ax] += 1;
            if index[ax] < shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Tensor::new(shape, data)
}

/// Sum `src` down to `shape`, the inverse of [`broadcast_to`].
pub fn sum_to(src: &Tensor, shape: &[usize]) -> Tensor {
    if src.shape == shape {
        return src.clone();
    }
    let strides = broadcast_strides(shape, &src.shape);
    let mut out = vec![0.0; numel(shape)];
    let dims = &src.shape;
    // Fast path: reduce leading axis of a [N, D] tensor into [D] or [1, D].
    if dims.len() == 2 && numel(shape) == dims[1] && strides[0] == 0 && strides[1] == 1 {
        for r in 0..dims[0] {
            for (o, v) in out.iter_mut().zip(&src.data[r * dims[1]..(r + 1) * dims[1]]) {
                *o += v;
            }
        }
        return Tensor::new(shape, out);
    }
    let mut index = vec![0usize; dims.len()];
    for &v in &src.data {
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[off] += v;
        for ax in (0..dims.len()).rev() {
            index[ax] += 1;
            if index[ax] < dims[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    if b.data.len() == 1 {
        let s = b.data[0];
        let shape = broadcast_shapes(&a.shape, &b.shape).expect("broadcast");
        return Tensor::new(&shape, a.data.iter().map(|&x| f(x, s)).collect());
    }
    if a.data.len() == 1 {
        let s = a.data[0];
        let shape = broadcast_shapes(&a.shape, &b.shape).expect("broadcast");
        return Tensor::new(&shape, b.data.iter().map(|&y| f(s, y)).collect());
    }
    let shape = broadcast_shapes(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let ea = broadcast_to(a, &shape);
    let eb = broadcast_to(b, &shape);
    ea.zip_map(&eb, f)
}

/// `op(a) @ op(b)` for 2-D tensors, with optional transposition of either side.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D, got {:?}", a.shape);
    assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape);
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?} (ta={trans_a}, tb={trans_b})", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    if m > 0 && n > 0 && k > 0 {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(&[m, n], out)
}
