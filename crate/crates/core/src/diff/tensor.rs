//! Dense row-major tensors with copy-on-write storage.
//!
//! Values are immutable once built; clones share storage. The kernels here
//! are the single evaluation path for both plain and recorded computation,
//! so recorded forward values match plain evaluation bit for bit.

use std::sync::Arc;

use crate::{Error, Result, Scalar};

#[derive(Clone, Debug)]
pub struct Tensor<F> {
    data: Arc<Vec<F>>,
    shape: Vec<usize>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match data length {}", data.len());
        Tensor {
            data: Arc::new(data),
            shape,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![F::zero(); n])
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::from_vec(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access; clones the storage if shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        let v: &mut Vec<F> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn to_scalar(&self) -> F {
        assert_eq!(self.len(), 1, "to_scalar on shape {:?}", self.shape);
        self.data[0]
    }

    /// Row-major strides of the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Same storage, new shape with identical element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape,
                self.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            data: Arc::clone(&self.data),
            shape,
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let data: Vec<F> = self.data.iter().map(|&x| f(x)).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts every element through `f64` (exact for f32 → f64).
    pub fn cast_from<G: Scalar>(other: &Tensor<G>) -> Self {
        let data = other
            .data()
            .iter()
            .map(|x| F::cast(x.to_f64_lossy()))
            .collect();
        Tensor::from_vec(other.shape().to_vec(), data)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Right-aligned broadcast of two shapes, NumPy-style.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast shapes {a:?} and {b:?}"
            )));
        }
    }
    Ok(out)
}

/// Element strides of `shape` viewed under `bshape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], bshape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let offset = bshape.len() - shape.len();
    let mut out = vec![0usize; bshape.len()];
    for i in 0..bshape.len() {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = strides[i - offset];
        }
    }
    out
}

/// Elementwise binary op with broadcasting.
pub fn zip_broadcast<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        let data: Vec<F> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_vec(a.shape().to_vec(), data));
    }
    let bshape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &bshape);
    let sb = broadcast_strides(b.shape(), &bshape);
    let n: usize = bshape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; bshape.len()];
    let (da, db) = (a.data(), b.data());
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..n {
        data.push(f(da[oa], db[ob]));
        // odometer increment
        for ax in (0..bshape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < bshape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * bshape[ax];
            ob -= sb[ax] * bshape[ax];
        }
    }
    Ok(Tensor::from_vec(bshape, data))
}

/// Sums `grad` down to `target` shape, undoing broadcast expansion.
pub fn reduce_to_shape<F: Scalar>(grad: &Tensor<F>, target: &[usize]) -> Tensor<F> {
    if grad.shape() == target {
        return grad.clone();
    }
    let bshape = grad.shape();
    let st = broadcast_strides(target, bshape);
    let n = grad.len();
    let tlen: usize = target.iter().product();
    let mut out = vec![F::zero(); tlen];
    let mut idx = vec![0usize; bshape.len()];
    let mut ot = 0usize;
    let gd = grad.data();
    for i in 0..n {
        out[ot] += gd[i];
        for ax in (0..bshape.len()).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < bshape[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * bshape[ax];
        }
    }
    Tensor::from_vec(target.to_vec(), out)
}
