//! Dense row-major `f64` arrays and the raw kernels the tape is built on.

use crate::autodiff::NodeId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Set when this value was read off a tape node that tracks gradients.
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    /// Builds an `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn with_node(mut self, node: Option<NodeId>) -> Self {
        self.node = node;
        self
    }

    /// Drops any gradient linkage.
    pub fn detach(mut self) -> Self {
        self.node = None;
        self
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Number of leading-axis rows.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.numel() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Gathers leading-axis rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Contract("select_rows with no indices".into()));
        }
        let n = self.rows();
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// Stacks tensors along axis 0; trailing extents must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
            rows += p.shape[0];
        }
        let mut data = Vec::with_capacity(rows * first.row_len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            node: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            node: None,
        })
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dim(op, other, &[0, 0])),
    }
}

/// `out[m×n] = a[m×k] · b[k×n]` with optional transposes, i-k-j loop order.
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if trans_b {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::dim("conv2d", input, kernel));
        };
        if kc != c || stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim("conv2d", input, kernel));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Visits every (output index, input index, kernel index) triple that contributes.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for oc in 0..self.o {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let oi = ((b * self.o + oc) * self.oh + oy) * self.ow + ox;
                        for ic in 0..self.c {
                            for ky in 0..self.kh {
                                let Some(iy) = self.src(oy, ky, self.h) else {
                                    continue;
                                };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.src(ox, kx, self.w) else {
                                        continue;
                                    };
                                    let ii = ((b * self.c + ic) * self.h + iy) * self.w + ix;
                                    let ki = ((oc * self.c + ic) * self.kh + ky) * self.kw + kx;
                                    f(oi, ii, ki);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.o * self.oh * self.ow];
        self.for_each_tap(|oi, ii, ki| out[oi] += input[ii] * kernel[ki]);
        out
    }

    /// Returns (d_input, d_kernel) for upstream gradient `g`.
    pub fn backward(&self, input: &[f64], kernel: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut di = vec![0.0; input.len()];
        let mut dk = vec![0.0; kernel.len()];
        self.for_each_tap(|oi, ii, ki| {
            di[ii] += g[oi] * kernel[ki];
            dk[ki] += g[oi] * input[ii];
        });
        (di, dk)
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}
