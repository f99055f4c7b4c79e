//! NHWC convolution, batch normalization and activation kernels with their
//! backward passes. Convolutions lower to a single GEMM over an im2col buffer.

/// `c = alpha * a · b + beta * c` with arbitrary strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(span(m, k, a_strides) as usize <= a.len());
    assert!(span(k, n, b_strides) as usize <= b.len());
    assert!(span(m, n, c_strides) as usize <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index dgemm touches inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Number of weights: `kernel * kernel * cin * cout`, laid out `[ky][kx][cin][cout]`.
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }
}

fn im2col(input: &[f64], n: usize, h: usize, w: usize, g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = g.out_hw(h, w);
    let patch = g.patch_len();
    let pad = g.pad() as isize;
    let mut cols = vec![0.0; n * ho * wo * patch];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kernel + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, h: usize, w: usize, g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = g.out_hw(h, w);
    let patch = g.patch_len();
    let pad = g.pad() as isize;
    let mut out = vec![0.0; n * h * w * g.cin];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * g.cin;
                        let src = row + (ky * g.kernel + kx) * g.cin;
                        for c in 0..g.cin {
                            out[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution without bias. Returns the NHWC output and its spatial size.
pub fn conv_forward(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weight: &[f64],
) -> (Vec<f64>, usize, usize) {
    debug_assert_eq!(input.len(), n * h * w * g.cin);
    debug_assert_eq!(weight.len(), g.weight_len());
    let (ho, wo) = g.out_hw(h, w);
    let rows = n * ho * wo;
    let patch = g.patch_len();
    let mut out = vec![0.0; rows * g.cout];
    let cols = im2col(input, n, h, w, g);
    gemm(
        rows,
        patch,
        g.cout,
        1.0,
        &cols,
        (patch as isize, 1),
        weight,
        (g.cout as isize, 1),
        0.0,
        &mut out,
        (g.cout as isize, 1),
    );
    (out, ho, wo)
}

/// Backward pass of [`conv_forward`]. Weight and input gradients are only
/// computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weight: &[f64],
    dout: &[f64],
    want_weight: bool,
    want_input: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = g.out_hw(h, w);
    let rows = n * ho * wo;
    let patch = g.patch_len();
    debug_assert_eq!(dout.len(), rows * g.cout);

    let dweight = want_weight.then(|| {
        let cols = im2col(input, n, h, w, g);
        let mut dw = vec![0.0; g.weight_len()];
        // dW = colsᵀ · dout
        gemm(
            patch,
            rows,
            g.cout,
            1.0,
            &cols,
            (1, patch as isize),
            dout,
            (g.cout as isize, 1),
            0.0,
            &mut dw,
            (g.cout as isize, 1),
        );
        dw
    });
    let dinput = want_input.then(|| {
        let mut dcols = vec![0.0; rows * patch];
        // dcols = dout · Wᵀ
        gemm(
            rows,
            g.cout,
            patch,
            1.0,
            dout,
            (g.cout as isize, 1),
            weight,
            (1, g.cout as isize),
            0.0,
            &mut dcols,
            (patch as isize, 1),
        );
        col2im(&dcols, n, h, w, g)
    });
    (dweight, dinput)
}

/// Per-channel population mean and variance over all leading dimensions.
pub fn channel_stats(z: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (z.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for row in z.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for row in z.chunks_exact(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count);
    (mean, var)
}

/// Cached quantities of one batch-norm application.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// True when the normalization used the batch statistics.
    pub batch_stats: bool,
}

pub fn bn_forward(
    z: &[f64],
    channels: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    batch_stats: bool,
) -> (Vec<f64>, BnCache) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; z.len()];
    let mut y = vec![0.0; z.len()];
    for ((zr, xr), yr) in z
        .chunks_exact(channels)
        .zip(xhat.chunks_exact_mut(channels))
        .zip(y.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            let xh = (zr[c] - mean[c]) * inv_std[c];
            xr[c] = xh;
            yr[c] = gamma[c] * xh + beta[c];
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
        },
    )
}

/// Returns `(dz, dgamma, dbeta)`.
pub fn bn_backward(
    dy: &[f64],
    channels: usize,
    cache: &BnCache,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (dy.len() / channels) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (dr, xr) in dy.chunks_exact(channels).zip(cache.xhat.chunks_exact(channels)) {
        for c in 0..channels {
            dbeta[c] += dr[c];
            dgamma[c] += dr[c] * xr[c];
        }
    }
    let mut dz = vec![0.0; dy.len()];
    if cache.batch_stats {
        for ((zr, dr), xr) in dz
            .chunks_exact_mut(channels)
            .zip(dy.chunks_exact(channels))
            .zip(cache.xhat.chunks_exact(channels))
        {
            for c in 0..channels {
                zr[c] = gamma[c] * cache.inv_std[c] / count
                    * (count * dr[c] - dbeta[c] - xr[c] * dgamma[c]);
            }
        }
    } else {
        for (zr, dr) in dz.chunks_exact_mut(channels).zip(dy.chunks_exact(channels)) {
            for c in 0..channels {
                zr[c] = dr[c] * gamma[c] * cache.inv_std[c];
            }
        }
    }
    (dz, dgamma, dbeta)
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zeroes `grad` wherever the activation output was not positive.
pub fn relu_backward_inplace(grad: &mut [f64], output: &[f64]) {
    grad.iter_mut().zip(output).for_each(|(g, &o)| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
}
