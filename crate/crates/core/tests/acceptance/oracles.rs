//! Scalar reference implementations written directly from the definitions,
//! with plain loops and no shared code from the library's kernels.

use ci_engine::backbone::ModelState;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Mean of `−log softmax(η·cos(f, θ_k))[y]`.
pub fn cnce(feats: &[Vec<f64>], labels: &[usize], emb: &[Vec<f64>], eta: f64) -> f64 {
    let mut total = 0.0;
    for (f, &y) in feats.iter().zip(labels) {
        let z: Vec<f64> = emb.iter().map(|e| eta * cos(f, e)).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[y].exp() / denom).ln();
    }
    total / feats.len() as f64
}

/// Mean over anchors of `Σ_{k∈new} max(m − cos(f, θ_y) + cos(f, θ_k), 0)`.
pub fn margin(feats: &[Vec<f64>], labels: &[usize], emb: &[Vec<f64>], new: &[usize], m: f64) -> f64 {
    let mut total = 0.0;
    for (f, &y) in feats.iter().zip(labels) {
        for &k in new {
            total += (m - cos(f, &emb[y]) + cos(f, &emb[k])).max(0.0);
        }
    }
    total / feats.len() as f64
}

/// Mean over classes `k` with both centroids of
/// `−log(e^{τ cos(S_k,T_k)} / (e^{τ cos(S_k,T_k)} + Σ_{j≠k} e^{τ cos(S_j,T_k)} + e^{τ cos(T_j,T_k)}))`.
pub fn contrastive(source: &[Option<Vec<f64>>], target: &[Option<Vec<f64>>], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for k in 0..source.len() {
        let (Some(sk), Some(tk)) = (&source[k], &target[k]) else {
            continue;
        };
        let pos = (tau * cos(sk, tk)).exp();
        let mut denom = pos;
        for j in (0..source.len()).filter(|&j| j != k) {
            for c in [&source[j], &target[j]].into_iter().flatten() {
                denom += (tau * cos(c, tk)).exp();
            }
        }
        total += -(pos / denom).ln();
        count += 1;
    }
    total / count as f64
}

/// `images[b][y][x][c]`.
pub type Images = Vec<Vec<Vec<Vec<f64>>>>;

pub fn to_images(data: &[f64], b: usize, h: usize, w: usize, c: usize) -> Images {
    (0..b)
        .map(|i| {
            (0..h)
                .map(|y| {
                    (0..w)
                        .map(|x| (0..c).map(|ch| data[((i * h + y) * w + x) * c + ch]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Per-image sum of squared vertical and horizontal neighbour differences,
/// averaged over the batch.
pub fn tv_l2(img: &Images) -> f64 {
    let mut total = 0.0;
    for im in img {
        let (h, w) = (im.len(), im[0].len());
        for y in 0..h {
            for x in 0..w {
                for c in 0..im[y][x].len() {
                    if y + 1 < h {
                        total += (im[y + 1][x][c] - im[y][x][c]).powi(2);
                    }
                    if x + 1 < w {
                        total += (im[y][x + 1][c] - im[y][x][c]).powi(2);
                    }
                }
            }
        }
    }
    total / img.len() as f64
}

pub fn l2(img: &Images) -> f64 {
    let mut total = 0.0;
    for im in img {
        for row in im {
            for px in row {
                for v in px {
                    total += v * v;
                }
            }
        }
    }
    total / img.len() as f64
}

/// Direct convolution with zero padding `k/2`; weights `[ky][kx][cin][cout]`.
fn conv(input: &Images, w: &[f64], k: usize, cout: usize, stride: usize) -> Images {
    let (h, wd, cin) = (input[0].len(), input[0][0].len(), input[0][0][0].len());
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let pad = pad as isize;
    input
        .iter()
        .map(|im| {
            (0..ho)
                .map(|oy| {
                    (0..wo)
                        .map(|ox| {
                            (0..cout)
                                .map(|co| {
                                    let mut s = 0.0;
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = (oy * stride + ky) as isize - pad;
                                            let ix = (ox * stride + kx) as isize - pad;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            for ci in 0..cin {
                                                s += im[iy as usize][ix as usize][ci]
                                                    * w[((ky * k + kx) * cin + ci) * cout + co];
                                            }
                                        }
                                    }
                                    s
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Per-channel mean and population variance over batch and space.
fn channel_stats(z: &Images) -> (Vec<f64>, Vec<f64>) {
    let c = z[0][0][0].len();
    let mut mean = vec![0.0; c];
    let mut n = 0.0;
    for px in z.iter().flatten().flatten() {
        for ch in 0..c {
            mean[ch] += px[ch];
        }
        n += 1.0;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for px in z.iter().flatten().flatten() {
        for ch in 0..c {
            var[ch] += (px[ch] - mean[ch]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn map(z: &Images, f: impl Fn(usize, f64) -> f64) -> Images {
    z.iter()
        .map(|im| {
            im.iter()
                .map(|row| row.iter().map(|px| px.iter().enumerate().map(|(c, &v)| f(c, v)).collect()).collect())
                .collect()
        })
        .collect()
}

fn add(a: &Images, b: &Images) -> Images {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(r, s)| r.iter().zip(s).map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect()).collect())
                .collect()
        })
        .collect()
}

/// Eval-mode forward of the residual backbone. Returns the pooled features
/// and the batch statistics of every BN input in parameter order.
pub fn reference_forward(model: &ModelState, input: &Images) -> (Vec<Vec<f64>>, Vec<(Vec<f64>, Vec<f64>)>) {
    let arch = &model.arch;
    let k = arch.kernel;
    let mut stats = vec![(Vec::new(), Vec::new()); model.conv_weights.len()];
    let mut conv_bn = |x: &Images, layer: usize, kernel: usize, cout: usize, stride: usize| -> Images {
        let z = conv(x, &model.conv_weights[layer], kernel, cout, stride);
        stats[layer] = channel_stats(&z);
        let bn = &model.bn[layer];
        map(&z, |c, v| {
            (v - bn.running_mean[c]) / (bn.running_var[c] + arch.bn_eps).sqrt() * bn.gamma[c] + bn.beta[c]
        })
    };
    let relu = |z: &Images| map(z, |_, v| v.max(0.0));

    let mut x = relu(&conv_bn(input, 0, k, arch.widths[0], 1));
    let mut layer = 1;
    let mut cin = arch.widths[0];
    for (b, &cout) in arch.widths.iter().enumerate() {
        let stride = if b == 0 { 1 } else { 2 };
        let a = relu(&conv_bn(&x, layer, k, cout, stride));
        let main = conv_bn(&a, layer + 1, k, cout, 1);
        let projected = stride != 1 || cin != cout;
        let skip = if projected {
            conv_bn(&x, layer + 2, 1, cout, stride)
        } else {
            x.clone()
        };
        layer += if projected { 3 } else { 2 };
        let sum = add(&main, &skip);
        x = if b + 1 == arch.widths.len() { sum } else { relu(&sum) };
        cin = cout;
    }
    let feats = x
        .iter()
        .map(|im| {
            let mut f = vec![0.0; cin];
            let mut n = 0.0;
            for px in im.iter().flatten() {
                for c in 0..cin {
                    f[c] += px[c];
                }
                n += 1.0;
            }
            f.iter().map(|v| v / n).collect()
        })
        .collect();
    (feats, stats)
}

/// `Σ_l ‖μ_l − μ̂_l‖ + ‖σ²_l − σ̂²_l‖` against the model's running statistics.
pub fn bn_reg(stats: &[(Vec<f64>, Vec<f64>)], model: &ModelState) -> f64 {
    stats
        .iter()
        .zip(&model.bn)
        .map(|((m, v), bn)| {
            let dm: Vec<f64> = m.iter().zip(&bn.running_mean).map(|(a, b)| a - b).collect();
            let dv: Vec<f64> = v.iter().zip(&bn.running_var).map(|(a, b)| a - b).collect();
            norm(&dm) + norm(&dv)
        })
        .sum()
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
