//! Batched forward/backward kernels over flat slices.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let (cin, h, w) = (input[0], input[1], input[2]);
        ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    /// Range of output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn valid(&self, kofs: usize, in_size: usize, out_size: usize) -> (usize, usize) {
        // need 0 <= o*s + kofs - pad < in_size
        let lo = if kofs >= self.pad {
            0
        } else {
            (self.pad - kofs).div_ceil(self.stride)
        };
        let hi = if in_size + self.pad > kofs {
            ((in_size + self.pad - kofs - 1) / self.stride + 1).min(out_size)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C`, all row-major
/// unless the strides say otherwise.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices whose extents cover every index
    // reachable through the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn transposed(cols_of_stored: usize) -> (isize, isize) {
    (1, cols_of_stored as isize)
}

/// Unfolds one sample into a `[cin*k*k, oh*ow]` patch matrix.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.oh * g.ow;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid(ky, g.h, g.oh);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        row[oy * g.ow + ox] = xc[iy * g.w + ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one sample's input gradient.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid(ky, g.h, g.oh);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        dxc[iy * g.w + ox * g.stride + kx - g.pad] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = g.oh * g.ow;
    let kk = g.cin * g.k * g.k;
    let mut y = vec![0.0; batch * g.out_len()];
    let mut cols = vec![0.0; kk * p];
    for n in 0..batch {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let yn = &mut y[n * g.out_len()..(n + 1) * g.out_len()];
        im2col(g, xn, &mut cols);
        gemm(g.cout, kk, p, weight, row_major(kk), &cols, row_major(p), 0.0, yn);
        if let Some(b) = bias {
            for (co, yc) in yn.chunks_mut(p).enumerate() {
                yc.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let p = g.oh * g.ow;
    let kk = g.cin * g.k * g.k;
    let mut dx = vec![0.0; batch * g.in_len()];
    if let Some(db) = dbias {
        for n in 0..batch {
            let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
            for (co, chunk) in dyn_.chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
    }
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    for n in 0..batch {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        im2col(g, xn, &mut cols);
        // dW += dY [cout, p] * cols^T [p, kk]
        gemm(g.cout, p, kk, dyn_, row_major(p), &cols, transposed(p), 1.0, dweight);
        // dcols = W^T [kk, cout] * dY [cout, p]
        gemm(kk, g.cout, p, weight, transposed(kk), dyn_, row_major(p), 0.0, &mut dcols);
        col2im(g, &dcols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    dx
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub(crate) fn dense_forward(
    batch: usize,
    fan_in: usize,
    units: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * units];
    // Y [batch, units] = X [batch, in] * W^T [in, units]
    gemm(batch, fan_in, units, x, row_major(fan_in), weight, transposed(fan_in), 0.0, &mut y);
    if let Some(b) = bias {
        for row in y.chunks_mut(units) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    batch: usize,
    fan_in: usize,
    units: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    if let Some(db) = dbias {
        for row in dy.chunks(units) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
    }
    // dW [units, in] += dY^T [units, batch] * X [batch, in]
    gemm(units, batch, fan_in, dy, transposed(units), x, row_major(fan_in), 1.0, dweight);
    // dX [batch, in] = dY [batch, units] * W [units, in]
    let mut dx = vec![0.0; batch * fan_in];
    gemm(batch, units, fan_in, dy, row_major(units), weight, row_major(fan_in), 0.0, &mut dx);
    dx
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Gradient through ReLU given its output.
pub(crate) fn relu_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(dy)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect()
}

/// Per-channel affine over items shaped `[c, spatial...]`.
pub(crate) fn affine_forward(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[f64],
    params: &[f64],
) -> Vec<f64> {
    let (gamma, beta) = params.split_at(channels);
    let mut y = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            for s in 0..spatial {
                y[base + s] = gamma[c] * x[base + s] + beta[c];
            }
        }
    }
    y
}

pub(crate) fn affine_backward(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[f64],
    params: &[f64],
    dy: &[f64],
    dparams: &mut [f64],
) -> Vec<f64> {
    let gamma = &params[..channels];
    let (dgamma, dbeta) = dparams.split_at_mut(channels);
    let mut dx = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            for s in 0..spatial {
                let g = dy[base + s];
                dgamma[c] += g * x[base + s];
                dbeta[c] += g;
                dx[base + s] = g * gamma[c];
            }
        }
    }
    dx
}

pub(crate) fn avgpool_forward(batch: usize, channels: usize, spatial: usize, x: &[f64]) -> Vec<f64> {
    let inv = 1.0 / spatial as f64;
    x.chunks(spatial)
        .take(batch * channels)
        .map(|c| c.iter().sum::<f64>() * inv)
        .collect()
}

pub(crate) fn avgpool_backward(batch: usize, channels: usize, spatial: usize, dy: &[f64]) -> Vec<f64> {
    let inv = 1.0 / spatial as f64;
    let mut dx = Vec::with_capacity(batch * channels * spatial);
    for &g in dy.iter().take(batch * channels) {
        dx.extend(std::iter::repeat_n(g * inv, spatial));
    }
    dx
}
