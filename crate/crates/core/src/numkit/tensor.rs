use std::fmt;

use super::NumError;

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NumError> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(NumError::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false })
    }

    /// Builds a tensor whose shape is already known to be consistent with `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumError::Dimension { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn get3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), NumError> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(NumError::Rank { op, expected: 2, shape: self.shape.clone() }),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize), NumError> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            _ => Err(NumError::Rank { op, expected: 3, shape: self.shape.clone() }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(NumError::Dimension { op: "matmul", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(Tensor::from_parts(vec![m, n], gemm_nn(&self.data, &other.data, m, k, n)))
    }

    pub fn transpose(&self) -> Result<Tensor, NumError> {
        let (m, n) = self.dims2("transpose")?;
        Ok(Tensor::from_parts(vec![n, m], transpose_raw(&self.data, m, n)))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, NumError> {
        let (outer, len, inner) = axis_split(&self.shape, axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| self.data[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (self.data[at(t)] - max).exp();
                    out[at(t)] = e;
                    sum += e;
                }
                for t in 0..len {
                    out[at(t)] /= sum;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Normalizes every vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, NumError> {
        let d = *self.shape.last().expect("non-empty shape");
        if gamma.numel() != d || beta.numel() != d {
            return Err(NumError::Dimension { op: "layer_norm", lhs: self.shape.clone(), rhs: gamma.shape.clone() });
        }
        let (out, _, _) = layer_norm_raw(&self.data, d, &gamma.data, &beta.data, eps);
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// 2-D convolution of a `C_in×H×W` input with `C_out×C_in×k×k` kernels, zero padding.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor, NumError> {
        let geom = ConvGeometry::new(self, kernels, stride, pad)?;
        let cols = im2col(&self.data, &geom);
        let out = gemm_nn(&kernels.data, &cols, geom.c_out, geom.col_rows(), geom.out_len());
        Ok(Tensor::from_parts(vec![geom.c_out, geom.out_h, geom.out_w], out))
    }

    /// Bilinear resampling of a `C×H×W` tensor with half-pixel centers.
    pub fn bilinear_resize(&self, h: usize, w: usize) -> Result<Tensor, NumError> {
        let (c, in_h, in_w) = self.dims3("bilinear_resize")?;
        if h == 0 || w == 0 {
            return Err(NumError::Dimension { op: "bilinear_resize", lhs: self.shape.clone(), rhs: vec![h, w] });
        }
        let plan = ResizePlan::new(in_h, in_w, h, w);
        Ok(Tensor::from_parts(vec![c, h, w], plan.forward(&self.data, c)))
    }
}

pub(crate) fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize), NumError> {
    if axis >= shape.len() {
        return Err(NumError::Axis { op, axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, b, m, k, n, (k, 1), (n, 1))
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, b, m, k, n, (k, 1), (1, k))
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, b, m, k, n, (1, m), (n, 1))
}

/// Row-major `c[m×n] = a·b` with (row, column) strides for each operand.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, sa: (usize, usize), sb: (usize, usize)) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n, "gemm operand too short");
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Returns (output, normalized input, reciprocal std per row).
pub(crate) fn layer_norm_raw(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let v = &x[r * d..(r + 1) * d];
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (v[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (out, xhat, rstd)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Self, NumError> {
        let (c_in, h, w) = input.dims3("conv2d")?;
        let err = || NumError::Dimension { op: "conv2d", lhs: input.shape.clone(), rhs: kernels.shape.clone() };
        let (c_out, kc, k) = match kernels.shape.as_slice() {
            &[co, kc, kh, kw] if kh == kw => (co, kc, kh),
            _ => return Err(err()),
        };
        if kc != c_in || stride == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(err());
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the input into a `(C_in·k·k) × (H'·W')` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out_len();
    let mut cols = vec![0.0; g.col_rows() * n];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out_len();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Precomputed source taps for a separable bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self { in_h, in_w, out_h, out_w, ys: taps(in_h, out_h), xs: taps(in_w, out_w) }
    }

    pub fn is_identity(&self) -> bool {
        self.in_h == self.out_h && self.in_w == self.out_w
    }

    pub fn forward(&self, x: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return x.to_vec();
        }
        let mut out = vec![0.0; channels * self.out_h * self.out_w];
        for c in 0..channels {
            let src = &x[c * self.in_h * self.in_w..][..self.in_h * self.in_w];
            let dst = &mut out[c * self.out_h * self.out_w..][..self.out_h * self.out_w];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let top = src[y0 * self.in_w + x0] * (1.0 - fx) + src[y0 * self.in_w + x1] * fx;
                    let bot = src[y1 * self.in_w + x0] * (1.0 - fx) + src[y1 * self.in_w + x1] * fx;
                    dst[oy * self.out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn backward(&self, dy: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return dy.to_vec();
        }
        let mut dx = vec![0.0; channels * self.in_h * self.in_w];
        for c in 0..channels {
            let g = &dy[c * self.out_h * self.out_w..][..self.out_h * self.out_w];
            let dst = &mut dx[c * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let v = g[oy * self.out_w + ox];
                    dst[y0 * self.in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * self.in_w + x1] += v * (1.0 - fy) * fx;
                    dst[y1 * self.in_w + x0] += v * fy * (1.0 - fx);
                    dst[y1 * self.in_w + x1] += v * fy * fx;
                }
            }
        }
        dx
    }
}
