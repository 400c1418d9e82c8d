//! Dense row-major `f64` tensors and the GEMM kernel behind every
//! convolution and linear layer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dense, row-major tensor of `f64`.
///
/// Image batches use the `[batch, channel, height, width]` layout throughout
/// the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard-normal entries drawn from `rng` in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(batch, channels, height, width)` of a 4-d tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => panic!("expected a 4-d tensor, got shape {:?}", self.shape),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `index` of the leading axis as a new tensor with leading dim 1.
    pub fn select(&self, index: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::invalid(format!(
                    "stack: trailing shape {:?} vs {:?}",
                    &p.shape[1..],
                    tail
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    /// Channel concatenation of two `[B, C, H, W]` tensors.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ba, ca, ha, wa) = a.dims4();
        let (bb, cb, hb, wb) = b.dims4();
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::invalid(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape, b.shape
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..ba {
            data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(Tensor {
            shape: vec![ba, ca + cb, ha, wa],
            data,
        })
    }
}

/// `c = alpha * a·b + beta * c` for strided matrices.
///
/// `a` is `m×k` with row stride `rsa` and column stride `csa`; likewise for
/// `b` (`k×n`). `c` is a contiguous row-major `m×n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa), "gemm: lhs buffer too small");
    assert!(b.len() >= last(k, n, rsb, csb), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
