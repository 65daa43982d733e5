//! Convolution, batch normalization and max pooling as tape primitives.
//!
//! All three operate on `[N, C, H, W]` tensors; the time axis of spiking
//! activations is folded into `N` by the caller, since the same weights are
//! applied at every time step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{matmul_nn, matmul_nt, matmul_tn, Tape, Var};
use crate::tensor::Tensor;
use std::rc::Rc;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if self.kh > hp || self.kw > wp || self.stride == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!(
                    "kernel {}x{} (stride {}) does not fit padded input {}x{}",
                    self.kh, self.kw, self.stride, hp, wp
                ),
            });
        }
        Ok(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    /// Dense multiply-accumulate count for one image.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.out_hw(h, w)?;
        Ok((oh * ow * self.kh * self.kw * self.in_ch * self.out_ch) as u64)
    }
}

fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    let out_base = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..ow {
                            cols[out_base + ox] = S::zero();
                        }
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride) as isize + kj as isize - pad;
                        cols[out_base + ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            x[in_base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride) as isize + kj as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[in_base + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Exact synaptic-operation count for a conv layer on this input: one
/// accumulate per (nonzero input element, covering output tap, out channel).
/// Equals nnz(im2col) * out_ch without materializing the matrix.
pub fn conv_sops<S: Scalar>(x: &Tensor<S>, g: &ConvGeom) -> Result<u64> {
    let (n, c, h, w) = unpack4(x)?;
    let (oh, ow) = g.out_hw(h, w)?;
    let taps_1d = |i: usize, k: usize, o_len: usize| -> u64 {
        // count oy with oy*stride <= i + pad and oy*stride + k - 1 >= i + pad
        let ip = i + g.padding;
        let lo = if ip + 1 > k { (ip + 1 - k).div_ceil(g.stride) } else { 0 };
        let hi = (ip / g.stride).min(o_len.saturating_sub(1));
        if hi >= lo { (hi - lo + 1) as u64 } else { 0 }
    };
    let mut sops = 0u64;
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                let base = ((ni * c + ci) * h + i) * w;
                let rows = taps_1d(i, g.kh, oh);
                if rows == 0 {
                    continue;
                }
                for j in 0..w {
                    if x.data[base + j] != S::zero() {
                        sops += rows * taps_1d(j, g.kw, ow);
                    }
                }
            }
        }
    }
    Ok(sops * g.out_ch as u64)
}

fn unpack4<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    if x.shape.len() != 4 {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("expected rank-4 input, got {:?}", x.shape),
        });
    }
    Ok((x.shape[0], x.shape[1], x.shape[2], x.shape[3]))
}

impl<S: Scalar> Tape<S> {
    /// 2D convolution, no bias (bias lives in the following batch norm).
    pub fn conv2d(&self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(weight);
        let (n, c, h, w) = unpack4(&vx)?;
        if vw.shape.len() != 4 || vw.shape[1] != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vx.shape.clone(),
                rhs: vw.shape.clone(),
            });
        }
        let geom = ConvGeom {
            in_ch: c,
            out_ch: vw.shape[0],
            kh: vw.shape[2],
            kw: vw.shape[3],
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw(h, w)?;
        let o = geom.out_ch;
        let ck = c * geom.kh * geom.kw;
        let p = oh * ow;
        let pointwise = geom.kh == 1 && geom.kw == 1 && stride == 1 && padding == 0;

        let mut out = vec![S::zero(); n * o * p];
        let mut cols = if pointwise { Vec::new() } else { vec![S::zero(); ck * p] };
        for ni in 0..n {
            let x_img = &vx.data[ni * c * h * w..(ni + 1) * c * h * w];
            let y_img = &mut out[ni * o * p..(ni + 1) * o * p];
            if pointwise {
                matmul_nn(&vw.data, x_img, y_img, o, ck, p);
            } else {
                im2col(x_img, c, h, w, &geom, oh, ow, &mut cols);
                matmul_nn(&vw.data, &cols, y_img, o, ck, p);
            }
        }
        let out = Tensor { shape: vec![n, o, oh, ow], data: out };
        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        Ok(self.push(
            out,
            &[x, weight],
            Some(Box::new(move |g| {
                let mut dx = vec![S::zero(); cx.data.len()];
                let mut dw = vec![S::zero(); cw.data.len()];
                let mut cols = if pointwise { Vec::new() } else { vec![S::zero(); ck * p] };
                let mut dcols = if pointwise { Vec::new() } else { vec![S::zero(); ck * p] };
                for ni in 0..n {
                    let x_img = &cx.data[ni * c * h * w..(ni + 1) * c * h * w];
                    let g_img = &g[ni * o * p..(ni + 1) * o * p];
                    if pointwise {
                        // dW += dY @ X^T ; dX = W^T @ dY
                        matmul_nt(g_img, x_img, &mut dw, o, p, ck);
                        let dx_img = &mut dx[ni * c * h * w..(ni + 1) * c * h * w];
                        matmul_tn(&cw.data, g_img, dx_img, ck, o, p);
                    } else {
                        im2col(x_img, c, h, w, &geom, oh, ow, &mut cols);
                        matmul_nt(g_img, &cols, &mut dw, o, p, ck);
                        dcols.iter_mut().for_each(|v| *v = S::zero());
                        matmul_tn(&cw.data, g_img, &mut dcols, ck, o, p);
                        let dx_img = &mut dx[ni * c * h * w..(ni + 1) * c * h * w];
                        col2im_add(&dcols, c, h, w, &geom, oh, ow, dx_img);
                    }
                }
                vec![Some(dx), Some(dw)]
            })),
        ))
    }

    /// Batch normalization over `[N, C, H, W]`, per-channel statistics.
    ///
    /// Train mode normalizes by batch statistics and updates the running
    /// buffers in place with the given momentum; eval mode normalizes by the
    /// running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [S],
        running_var: &mut [S],
        train: bool,
    ) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = unpack4(&vx)?;
        let vg = self.value(gamma);
        let vb = self.value(beta);
        if vg.shape != vec![c] || vb.shape != vec![c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                lhs: vx.shape.clone(),
                rhs: vg.shape.clone(),
            });
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension {
                op: "batchnorm2d",
                msg: "running stat length != channel count".into(),
            });
        }
        let hw = h * w;
        let m = n * hw;
        let eps = S::of_f64(BN_EPS);
        let mom = S::of_f64(BN_MOMENTUM);

        let (mean, var): (Vec<S>, Vec<S>) = if train {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let mut s = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        s += vx.data[base + i];
                    }
                }
                let mu = s / S::of_usize(m);
                let mut v = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        let d = vx.data[base + i] - mu;
                        v += d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = v / S::of_usize(m);
                running_mean[ci] = (S::one() - mom) * running_mean[ci] + mom * mu;
                running_var[ci] = (S::one() - mom) * running_var[ci] + mom * var[ci];
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); vx.data.len()];
        let mut out = vec![S::zero(); vx.data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xh = (vx.data[base + i] - mean[ci]) * inv_std[ci];
                    xhat[base + i] = xh;
                    out[base + i] = vg.data[ci] * xh + vb.data[ci];
                }
            }
        }
        let out = Tensor { shape: vx.shape.clone(), data: out };
        let xhat = Rc::new(xhat);
        let cg = Rc::clone(&vg);
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Some(Box::new(move |g| {
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dgamma[ci] += g[base + i] * xhat[base + i];
                            dbeta[ci] += g[base + i];
                        }
                    }
                }
                let mut dx = vec![S::zero(); xhat.len()];
                if train {
                    // dx = gamma*inv_std/m * (m*g - sum(g) - xhat*sum(g*xhat))
                    let mf = S::of_usize(m);
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = cg.data[ci] * inv_std[ci] / mf;
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                dx[base + i] = k
                                    * (mf * g[base + i]
                                        - dbeta[ci]
                                        - xhat[base + i] * dgamma[ci]);
                            }
                        }
                    }
                } else {
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = cg.data[ci] * inv_std[ci];
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                dx[base + i] = k * g[base + i];
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            })),
        ))
    }

    /// Max pooling with square window `k` and the given stride. Ties route
    /// the gradient to the first maximal element in scan order.
    pub fn maxpool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = unpack4(&vx)?;
        if k > h || k > w || k == 0 || stride == 0 {
            return Err(Error::Dimension {
                op: "maxpool2d",
                msg: format!("window {} (stride {}) does not fit input {}x{}", k, stride, h, w),
            });
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let p = oh * ow;
        let mut out = vec![S::zero(); n * c * p];
        let mut argmax = vec![0usize; n * c * p];
        for ni in 0..n {
            for ci in 0..c {
                let in_base = (ni * c + ci) * h * w;
                let out_base = (ni * c + ci) * p;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0usize;
                        for ki in 0..k {
                            for kj in 0..k {
                                let idx = in_base + (oy * stride + ki) * w + ox * stride + kj;
                                if vx.data[idx] > best {
                                    best = vx.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[out_base + oy * ow + ox] = best;
                        argmax[out_base + oy * ow + ox] = best_idx;
                    }
                }
            }
        }
        let out = Tensor { shape: vec![n, c, oh, ow], data: out };
        let xn = vx.data.len();
        Ok(self.push(
            out,
            &[x],
            Some(Box::new(move |g| {
                let mut dx = vec![S::zero(); xn];
                for (gi, &ai) in g.iter().zip(argmax.iter()) {
                    dx[ai] += *gi;
                }
                vec![Some(dx)]
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_check;
    use proptest::prelude::*;

    type T64 = Tensor<f64>;

    fn t(shape: &[usize], data: &[f64]) -> T64 {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data, vec![1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn conv_hand_2x2() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1., 1., 1., 1.]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        let vy = tape.value(y);
        assert_eq!(vy.shape, vec![1, 1, 1, 1]);
        assert_eq!(vy.data, vec![2.]);
    }

    #[test]
    fn conv_zero_input() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let w = tape.constant(Tensor::from_fn(&[5, 3, 3, 3], |i| (i as f64).sin()));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_too_large() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = T64::from_fn(&[2, 2, 5, 4], |i| ((i * 37 % 11) as f64 - 5.0) * 0.2);
        let w0 = T64::from_fn(&[3, 2, 3, 3], |i| ((i * 17 % 13) as f64 - 6.0) * 0.1);
        // w.r.t. input
        let wc = w0.clone();
        let err = finite_diff_check(
            move |t, v| {
                let w = t.constant(wc.clone());
                let y = t.conv2d(v, w, 2, 1).unwrap();
                let s = t.sigmoid(y);
                t.sum(s)
            },
            &x,
            1e-3,
            None,
        );
        assert!(err < 1e-3, "input grad err = {err}");
        // w.r.t. weights
        let xc = x.clone();
        let err = finite_diff_check(
            move |t, v| {
                let xv = t.constant(xc.clone());
                let y = t.conv2d(xv, v, 2, 1).unwrap();
                let s = t.sigmoid(y);
                t.sum(s)
            },
            &w0,
            1e-3,
            None,
        );
        assert!(err < 1e-3, "weight grad err = {err}");
    }

    #[test]
    fn pointwise_conv_matches_general_path() {
        // 1x1 stride-1 takes the fast path; check it against padding=0 3D math
        let tape: Tape<f64> = Tape::new();
        let x = T64::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.31).sin());
        let w = T64::from_fn(&[5, 3, 1, 1], |i| (i as f64 * 0.17).cos());
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, 1, 0).unwrap();
        let vy = tape.value(y);
        // brute force
        for ni in 0..2 {
            for o in 0..5 {
                for pos in 0..16 {
                    let mut s = 0.0;
                    for c in 0..3 {
                        s += w.data[o * 3 + c] * x.data[(ni * 3 + c) * 16 + pos];
                    }
                    let got = vy.data[(ni * 5 + o) * 16 + pos];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bn_passthrough_on_standardized_input() {
        let tape: Tape<f64> = Tape::new();
        // already zero-mean unit-variance per channel: {-1, +1}
        let x = t(&[2, 1, 1, 1], &[-1., 1.]);
        let xv = tape.constant(x);
        let g = tape.constant(t(&[1], &[1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = tape.batchnorm2d(xv, g, b, &mut rm, &mut rv, true).unwrap();
        let vy = tape.value(y);
        assert!((vy.data[0] + 1.0).abs() < 1e-5 && (vy.data[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bn_constant_channel_is_zeroed() {
        let tape: Tape<f64> = Tape::new();
        let xv = tape.constant(Tensor::full(&[3, 2, 2, 2], 7.5));
        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let y = tape.batchnorm2d(xv, g, b, &mut rm, &mut rv, true).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn bn_two_element_batch() {
        let tape: Tape<f64> = Tape::new();
        let xv = tape.constant(t(&[2, 1, 1, 1], &[0., 2.]));
        let g = tape.constant(t(&[1], &[1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = tape.batchnorm2d(xv, g, b, &mut rm, &mut rv, true).unwrap();
        let vy = tape.value(y);
        assert!((vy.data[0] + 1.0).abs() < 1e-4 && (vy.data[1] - 1.0).abs() < 1e-4);
        // running stats moved toward batch stats with momentum 0.1
        assert!((rm[0] - 0.1).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let x = T64::from_fn(&[3, 2, 2, 2], |i| ((i * 29 % 17) as f64 - 8.0) * 0.25);
        let err = finite_diff_check(
            |t, v| {
                let g = t.constant(Tensor::new(vec![2], vec![1.3, 0.7]).unwrap());
                let b = t.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
                let mut rm = vec![0.0; 2];
                let mut rv = vec![1.0; 2];
                let y = t.batchnorm2d(v, g, b, &mut rm, &mut rv, true).unwrap();
                let s = t.sigmoid(y);
                t.sum(s)
            },
            &x,
            1e-3,
            None,
        );
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn maxpool_constant_input() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 3.0));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_hand_2x2() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data, vec![4.]);
    }

    #[test]
    fn maxpool_binary_stays_binary() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(T64::from_fn(&[2, 3, 6, 6], |i| ((i * 7 % 3) % 2) as f64));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).is_binary());
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), true);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first_in_scan_order() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 5.0), true);
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn conv_sops_toy_example() {
        // single interior spike, 3x3 kernel stride 1 pad 1: contributes to
        // 9 output positions per out channel
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data[12] = 1.0f64; // center
        let g = ConvGeom { in_ch: 1, out_ch: 4, kh: 3, kw: 3, stride: 1, padding: 1 };
        assert_eq!(conv_sops(&x, &g).unwrap(), 9 * 4);
    }

    #[test]
    fn conv_sops_zero_input() {
        let x: T64 = Tensor::zeros(&[2, 3, 8, 8]);
        let g = ConvGeom { in_ch: 3, out_ch: 16, kh: 3, kw: 3, stride: 1, padding: 1 };
        assert_eq!(conv_sops(&x, &g).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn conv_output_shape_law(
            h in 1usize..12, w in 1usize..12,
            kh in 1usize..5, kw in 1usize..5,
            stride in 1usize..4, padding in 0usize..3,
        ) {
            prop_assume!(kh <= h + 2 * padding && kw <= w + 2 * padding);
            let tape: Tape<f64> = Tape::new();
            let x = tape.constant(Tensor::zeros(&[1, 1, h, w]));
            let wv = tape.constant(Tensor::zeros(&[2, 1, kh, kw]));
            let y = tape.conv2d(x, wv, stride, padding).unwrap();
            let s = tape.shape(y);
            prop_assert_eq!(s[2], (h + 2 * padding - kh) / stride + 1);
            prop_assert_eq!(s[3], (w + 2 * padding - kw) / stride + 1);
        }

        #[test]
        fn binary_conv_outputs_are_integers(seed in 0u64..1000) {
            let tape: Tape<f64> = Tape::new();
            let x = tape.constant(T64::from_fn(&[1, 2, 5, 5], |i| {
                ((i as u64).wrapping_mul(seed + 7) % 3 == 0) as u64 as f64
            }));
            let w = tape.constant(T64::from_fn(&[3, 2, 3, 3], |i| {
                ((i as u64).wrapping_mul(seed + 13) % 2) as f64
            }));
            let y = tape.conv2d(x, w, 1, 1).unwrap();
            for &v in &tape.value(y).data {
                prop_assert_eq!(v, v.round());
            }
        }

        #[test]
        fn sops_match_im2col_nnz(seed in 0u64..300) {
            let x = T64::from_fn(&[2, 2, 6, 5], |i| {
                ((i as u64).wrapping_mul(seed.wrapping_mul(2654435761).wrapping_add(11)) % 4 == 0) as u64 as f64
            });
            let g = ConvGeom { in_ch: 2, out_ch: 3, kh: 3, kw: 2, stride: 2, padding: 1 };
            let (oh, ow) = g.out_hw(6, 5).unwrap();
            let mut nnz = 0u64;
            let mut cols = vec![0.0f64; 2 * 3 * 2 * oh * ow];
            for ni in 0..2 {
                im2col(&x.data[ni * 60..(ni + 1) * 60], 2, 6, 5, &g, oh, ow, &mut cols);
                nnz += cols.iter().filter(|&&v| v != 0.0).count() as u64;
            }
            prop_assert_eq!(conv_sops(&x, &g).unwrap(), nnz * 3);
        }
    }
}
