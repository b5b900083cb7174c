//! Forward and backward kernels for the layers the backbones are built from.

use crate::network::ConvLayerSpec;
use crate::scalar::{cast, Scalar};
use crate::tensor::{FeatureMap, Matrix};

pub(crate) fn conv_output_size(input: usize, spec: &ConvLayerSpec) -> Option<usize> {
    let padded = input + 2 * spec.padding;
    if padded < spec.kernel_size {
        return None;
    }
    Some((padded - spec.kernel_size) / spec.stride + 1)
}

fn is_pointwise(spec: &ConvLayerSpec) -> bool {
    spec.kernel_size == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1
}

/// Lower one channel group of `x` into a `(C_in_g * K * K) x (N * Ho * Wo)` matrix.
fn im2col<T: Scalar>(
    x: &FeatureMap<T>,
    spec: &ConvLayerSpec,
    group: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let k = spec.kernel_size;
    let cin_g = spec.in_channels / spec.groups;
    let ncols = x.batch * ho * wo;
    let (h, w) = (x.height as isize, x.width as isize);
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for ci in 0..cin_g {
        let chan = x.channel(group * cin_g + ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..x.batch {
                    let src = &chan[n * x.plane()..(n + 1) * x.plane()];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        let out = &mut dst[(n * ho + oy) * wo..(n * ho + oy + 1) * wo];
                        if iy < 0 || iy >= h {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &src[(iy * w) as usize..((iy + 1) * w) as usize];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *o = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`] into `dx`.
fn col2im<T: Scalar>(
    cols: &[T],
    spec: &ConvLayerSpec,
    group: usize,
    ho: usize,
    wo: usize,
    dx: &mut FeatureMap<T>,
) {
    let k = spec.kernel_size;
    let cin_g = spec.in_channels / spec.groups;
    let ncols = dx.batch * ho * wo;
    let (h, w) = (dx.height as isize, dx.width as isize);
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let plane = dx.plane();
    let batch = dx.batch;
    for ci in 0..cin_g {
        let chan = dx.channel_mut(group * cin_g + ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..batch {
                    let dst = &mut chan[n * plane..(n + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let seg = &src[(n * ho + oy) * wo..(n * ho + oy + 1) * wo];
                        let line = &mut dst[(iy * w) as usize..((iy + 1) * w) as usize];
                        for (ox, &v) in seg.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution without bias. `kernel` is `(C_out, C_in_g, K, K)` row-major.
pub(crate) fn conv2d<T: Scalar>(x: &FeatureMap<T>, kernel: &[T], spec: &ConvLayerSpec) -> FeatureMap<T> {
    assert_eq!(x.channels, spec.in_channels, "conv input channels");
    assert_eq!(kernel.len(), spec.kernel_len(), "conv kernel length");
    let ho = conv_output_size(x.height, spec).expect("input smaller than kernel");
    let wo = conv_output_size(x.width, spec).expect("input smaller than kernel");
    let mut y = FeatureMap::zeros(spec.out_channels, x.batch, ho, wo);
    let ncols = x.batch * ho * wo;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let kk = cin_g * spec.kernel_size * spec.kernel_size;
    if is_pointwise(spec) {
        T::gemm(
            cout_g, kk, ncols, T::one(), kernel, kk as isize, 1, &x.data, ncols as isize, 1,
            T::zero(), &mut y.data, ncols as isize, 1,
        );
        return y;
    }
    let mut cols = vec![T::zero(); kk * ncols];
    for g in 0..spec.groups {
        im2col(x, spec, g, ho, wo, &mut cols);
        let w = &kernel[g * cout_g * kk..(g + 1) * cout_g * kk];
        let out = &mut y.data[g * cout_g * ncols..(g + 1) * cout_g * ncols];
        T::gemm(
            cout_g, kk, ncols, T::one(), w, kk as isize, 1, &cols, ncols as isize, 1, T::zero(),
            out, ncols as isize, 1,
        );
    }
    y
}

/// Gradients of [`conv2d`]: returns `(d_kernel, d_input)`; the input gradient is
/// skipped when `need_input_grad` is false.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    kernel: &[T],
    dy: &FeatureMap<T>,
    spec: &ConvLayerSpec,
    need_input_grad: bool,
) -> (Vec<T>, Option<FeatureMap<T>>) {
    let (ho, wo) = (dy.height, dy.width);
    let ncols = x.batch * ho * wo;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let kk = cin_g * spec.kernel_size * spec.kernel_size;
    let mut dkernel = vec![T::zero(); spec.kernel_len()];
    let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.channels, x.batch, x.height, x.width));

    if is_pointwise(spec) {
        // dW = dY * X^T
        T::gemm(
            cout_g, ncols, kk, T::one(), &dy.data, ncols as isize, 1, &x.data, 1, ncols as isize,
            T::zero(), &mut dkernel, kk as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            // dX = W^T * dY
            T::gemm(
                kk, cout_g, ncols, T::one(), kernel, 1, kk as isize, &dy.data, ncols as isize, 1,
                T::zero(), &mut dx.data, ncols as isize, 1,
            );
        }
        return (dkernel, dx);
    }

    let mut cols = vec![T::zero(); kk * ncols];
    for g in 0..spec.groups {
        im2col(x, spec, g, ho, wo, &mut cols);
        let dyg = &dy.data[g * cout_g * ncols..(g + 1) * cout_g * ncols];
        T::gemm(
            cout_g, ncols, kk, T::one(), dyg, ncols as isize, 1, &cols, 1, ncols as isize,
            T::zero(), &mut dkernel[g * cout_g * kk..(g + 1) * cout_g * kk], kk as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            let w = &kernel[g * cout_g * kk..(g + 1) * cout_g * kk];
            T::gemm(
                kk, cout_g, ncols, T::one(), w, 1, kk as isize, dyg, ncols as isize, 1, T::zero(),
                &mut cols, ncols as isize, 1,
            );
            col2im(&cols, spec, g, ho, wo, dx);
        }
    }
    (dkernel, dx)
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut FeatureMap<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero the gradient wherever the (post-activation) output was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar>(output: &FeatureMap<T>, grad: &mut FeatureMap<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Global average pooling to an `N x C` feature matrix.
pub(crate) fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Matrix<T> {
    let plane = x.plane();
    let inv = T::one() / cast::<T>(plane as f64);
    let mut out = Matrix::zeros(x.batch, x.channels);
    for c in 0..x.channels {
        let chan = x.channel(c);
        for n in 0..x.batch {
            let s: T = chan[n * plane..(n + 1) * plane].iter().copied().sum();
            out.data[n * x.channels + c] = s * inv;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(
    d_features: &Matrix<T>,
    channels: usize,
    batch: usize,
    height: usize,
    width: usize,
) -> FeatureMap<T> {
    let plane = height * width;
    let inv = T::one() / cast::<T>(plane as f64);
    let mut dx = FeatureMap::zeros(channels, batch, height, width);
    for c in 0..channels {
        let chan = dx.channel_mut(c);
        for n in 0..batch {
            let g = d_features.data[n * channels + c] * inv;
            chan[n * plane..(n + 1) * plane].fill(g);
        }
    }
    dx
}

/// `features (N x C) * weight^T (C x K) + bias`.
pub(crate) fn linear<T: Scalar>(features: &Matrix<T>, weight: &Matrix<T>, bias: &[T]) -> Matrix<T> {
    let (n, c, k) = (features.rows, features.cols, weight.rows);
    assert_eq!(weight.cols, c, "classifier input width");
    let mut out = Matrix::zeros(n, k);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(bias);
    }
    T::gemm(
        n, c, k, T::one(), &features.data, c as isize, 1, &weight.data, 1, c as isize, T::one(),
        &mut out.data, k as isize, 1,
    );
    out
}

/// Returns `(d_features, d_weight, d_bias)`.
pub(crate) fn linear_backward<T: Scalar>(
    features: &Matrix<T>,
    weight: &Matrix<T>,
    d_out: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Vec<T>) {
    let (n, c, k) = (features.rows, features.cols, weight.rows);
    let mut d_features = Matrix::zeros(n, c);
    T::gemm(
        n, k, c, T::one(), &d_out.data, k as isize, 1, &weight.data, c as isize, 1, T::zero(),
        &mut d_features.data, c as isize, 1,
    );
    let mut d_weight = Matrix::zeros(k, c);
    T::gemm(
        k, n, c, T::one(), &d_out.data, 1, k as isize, &features.data, c as isize, 1, T::zero(),
        &mut d_weight.data, c as isize, 1,
    );
    let mut d_bias = vec![T::zero(); k];
    for r in 0..n {
        for (db, &g) in d_bias.iter_mut().zip(d_out.row(r)) {
            *db += g;
        }
    }
    (d_features, d_weight, d_bias)
}

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> ConvLayerSpec {
        ConvLayerSpec {
            layer_id: 0,
            name: "t".into(),
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride,
            padding: pad,
            groups,
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &FeatureMap<f64>, w: &[f64], s: &ConvLayerSpec) -> FeatureMap<f64> {
        let ho = conv_output_size(x.height, s).unwrap();
        let wo = conv_output_size(x.width, s).unwrap();
        let mut y = FeatureMap::zeros(s.out_channels, x.batch, ho, wo);
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let k = s.kernel_size;
        for co in 0..s.out_channels {
            let g = co / cout_g;
            for n in 0..x.batch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                        continue;
                                    }
                                    let xv = x.data[((g * cin_g + ci) * x.batch + n) * x.plane()
                                        + iy as usize * x.width
                                        + ix as usize];
                                    acc += xv * w[((co * cin_g + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        y.data[(co * x.batch + n) * ho * wo + oy * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for s in [
            spec(3, 4, 3, 1, 1, 1),
            spec(4, 6, 3, 2, 1, 2),
            spec(4, 4, 3, 2, 1, 4),
            spec(5, 3, 1, 1, 0, 1),
            spec(4, 8, 1, 2, 0, 1),
        ] {
            let mut x = FeatureMap::zeros(s.in_channels, 2, 7, 7);
            x.data = ramp(x.data.len(), 0.1);
            let w = ramp(s.kernel_len(), 0.05);
            let fast = conv2d(&x, &w, &s);
            let slow = naive_conv(&x, &w, &s);
            assert_eq!((fast.height, fast.width), (slow.height, slow.width));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let s = spec(4, 4, 3, 2, 1, 2);
        let mut x = FeatureMap::zeros(4, 2, 6, 6);
        x.data = ramp(x.data.len(), 0.1);
        let w = ramp(s.kernel_len(), 0.05);
        let y = conv2d(&x, &w, &s);
        // loss = sum(y * r) for a fixed r
        let r = ramp(y.data.len(), 0.3);
        let mut dy = y.clone();
        dy.data = r.clone();
        let (dw, dx) = conv2d_backward(&x, &w, &dy, &s, true);
        let dx = dx.unwrap();
        let loss = |x: &FeatureMap<f64>, w: &[f64]| -> f64 {
            conv2d(x, w, &s).data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in [0, 5, 17, w.len() - 1] {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", dw[i]);
        }
        for i in [0, 13, 40, x.data.len() - 1] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0f64, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        let lp = log_softmax(&[1000.0f64, 0.0]);
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn linear_backward_is_transpose_of_forward() {
        let f = Matrix::<f64>::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let w = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let out = linear(&f, &w, &[1.0, -1.0]);
        assert!((out.data[0] - (0.1 + 0.4 + 0.9 + 1.0)).abs() < 1e-12);
        let d = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let (df, dw, db) = linear_backward(&f, &w, &d);
        assert_eq!(df.row(0), &[0.1, 0.2, 0.3]);
        assert_eq!(dw.row(1), &[-1.0, 0.5, 0.0]);
        assert_eq!(db, vec![1.0, 1.0]);
    }
}
