//! Stride-1 2-d convolution via im2col + matmul.

use super::{dims4, Tensor};
use ndarray::{Array2, Axis, IxDyn};

fn out_dims(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> (usize, usize) {
    (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw)
}

/// Unfold `(B, C, H, W)` into `(B*OH*OW, C*KH*KW)` patch rows.
fn im2col(x: &Tensor, kh: usize, kw: usize, pad: usize) -> Array2<f32> {
    let (b, c, h, w) = dims4(x);
    let (oh, ow) = out_dims(h, w, kh, kw, pad);
    let mut col = Array2::<f32>::zeros((b * oh * ow, c * kh * kw));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut ci_off = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            ci_off += kw;
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix >= pad && ix < w + pad {
                                col[[row, ci_off + kx]] = x[[bi, ci, iy, ix - pad]];
                            }
                        }
                        ci_off += kw;
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add patch rows back into an input-shaped tensor.
fn col2im(
    col: &Array2<f32>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Tensor {
    let (oh, ow) = out_dims(h, w, kh, kw, pad);
    let mut x = Tensor::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut ci_off = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            ci_off += kw;
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix >= pad && ix < w + pad {
                                x[[bi, ci, iy, ix - pad]] += col[[row, ci_off + kx]];
                            }
                        }
                        ci_off += kw;
                    }
                }
            }
        }
    }
    x
}

pub fn forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (bs, c, h, wd) = dims4(x);
    let ws = w.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    debug_assert_eq!(ws[1], c, "kernel input channels");
    let (oh, ow) = out_dims(h, wd, kh, kw, pad);
    let col = im2col(x, kh, kw, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((oc, c * kh * kw))
        .expect("kernel reshape");
    let mut y_mat = col.dot(&w_mat.t()); // (B*OH*OW, OC)
    let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    y_mat += &b1;
    let y = y_mat
        .into_shape_with_order((bs, oh, ow, oc))
        .expect("conv output reshape");
    y.permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
        .into_dyn()
}

pub fn backward(x: &Tensor, w: &Tensor, pad: usize, grad_y: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, c, h, wd) = dims4(x);
    let ws = w.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = out_dims(h, wd, kh, kw, pad);
    let col = im2col(x, kh, kw, pad);
    let g_mat = grad_y
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((bs * oh * ow, oc))
        .expect("grad reshape");
    let w_mat = w
        .view()
        .into_shape_with_order((oc, c * kh * kw))
        .expect("kernel reshape");
    let dw = g_mat
        .t()
        .dot(&col)
        .into_shape_with_order(IxDyn(&[oc, c, kh, kw]))
        .expect("dw reshape");
    let db = g_mat.sum_axis(Axis(0)).into_dyn();
    let dcol = g_mat.dot(&w_mat);
    let dx = col2im(&dcol, bs, c, h, wd, kh, kw, pad);
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct (nested-loop) convolution oracle for cross-checking im2col.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let (bs, c, h, wd) = dims4(x);
        let ws = w.shape();
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = out_dims(h, wd, kh, kw, pad);
        let mut y = Tensor::zeros(IxDyn(&[bs, oc, oh, ow]));
        for bi in 0..bs {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[[o]];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy + ky;
                                    let ix = ox + kx;
                                    if iy >= pad && iy < h + pad && ix >= pad && ix < wd + pad {
                                        acc += x[[bi, ci, iy - pad, ix - pad]]
                                            * w[[o, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[bi, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_matches_naive_convolution() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_shape_vec(
            IxDyn(&[2, 3, 6, 6]),
            (0..2 * 3 * 36).map(|_| rng.random::<f32>() - 0.5).collect(),
        )
        .unwrap();
        let w = Tensor::from_shape_vec(
            IxDyn(&[4, 3, 3, 3]),
            (0..4 * 3 * 9).map(|_| rng.random::<f32>() - 0.5).collect(),
        )
        .unwrap();
        let b = Tensor::from_shape_vec(IxDyn(&[4]), vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        for pad in [0usize, 1] {
            let fast = forward(&x, &w, &b, pad);
            let slow = conv_naive(&x, &w, &b, pad);
            let max_err = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err < 1e-4, "pad={pad} max_err={max_err}");
        }
    }
}
