//! Dense numeric kernels shared by the autodiff graph and the data pipeline.
//!
//! Everything here is plain `f64` array math with deterministic loop order;
//! the graph layer owns differentiation and composes these for forward and
//! backward passes.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView4, ArrayViewD, ArrayD, Axis};

/// Convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let eff = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding).saturating_sub(eff) / self.stride + 1
    }
}

/// Unfold `x` [B,C,H,W] into columns [C*kh*kw, B*OH*OW].
pub fn im2col(x: &ArrayView4<f64>, kh: usize, kw: usize, spec: ConvSpec) -> Array2<f64> {
    let (b, cin, h, w) = x.dim();
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let ncols = b * oh * ow;
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ncols));
    let xs = x.as_slice().expect("im2col: non-standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let rbase = row * ncols;
                for bi in 0..b {
                    let xbase = (bi * cin + ci) * h * w;
                    let cbase = rbase + bi * oh * ow;
                    for oi in 0..oh {
                        let iy = (oi * s + ki * d) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let crow = cbase + oi * ow;
                        for oj in 0..ow {
                            let ix = (oj * s + kj * d) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[crow + oj] = xs[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns back onto the input grid (adjoint of [`im2col`]).
pub fn col2im(
    cols: &Array2<f64>,
    input_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> Array4<f64> {
    let (b, cin, h, w) = input_dim;
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let ncols = b * oh * ow;
    let mut x = Array4::<f64>::zeros(input_dim);
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im: non-standard layout");
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let rbase = row * ncols;
                for bi in 0..b {
                    let xbase = (bi * cin + ci) * h * w;
                    let cbase = rbase + bi * oh * ow;
                    for oi in 0..oh {
                        let iy = (oi * s + ki * d) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let crow = cbase + oi * ow;
                        for oj in 0..ow {
                            let ix = (oj * s + kj * d) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[xrow + ix as usize] += cs[crow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// conv2d forward: `x` [B,Cin,H,W] * `w` [Cout,Cin,kh,kw] + `b`.
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: &ArrayView1<f64>,
    spec: ConvSpec,
) -> Array4<f64> {
    let (b, _cin, h, w) = x.dim();
    let (cout, cin_w, kh, kw) = weight.dim();
    debug_assert_eq!(_cin, cin_w, "conv2d: channel mismatch");
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let cols = im2col(x, kh, kw, spec);
    let w2 = weight
        .view()
        .into_shape_with_order((cout, cin_w * kh * kw))
        .unwrap();
    let out2 = w2.dot(&cols); // [Cout, B*OH*OW]
    let mut out = Array4::<f64>::zeros((b, cout, oh, ow));
    let os = out.as_slice_mut().unwrap();
    let o2 = out2.as_slice().unwrap();
    let plane = oh * ow;
    let ncols = b * plane;
    for co in 0..cout {
        let bval = bias[co];
        let src = co * ncols;
        for bi in 0..b {
            let dst = (bi * cout + co) * plane;
            let sb = src + bi * plane;
            for i in 0..plane {
                os[dst + i] = o2[sb + i] + bval;
            }
        }
    }
    out
}

/// conv2d backward. Returns (dx if requested, dw, db).
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    spec: ConvSpec,
    gout: &ArrayView4<f64>,
    need_dx: bool,
) -> (Option<Array4<f64>>, Array4<f64>, Array1<f64>) {
    let (b, cin, _h, _w) = x.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = gout.dim();
    let plane = oh * ow;
    let ncols = b * plane;

    // [Cout, B*OH*OW] view of the output gradient.
    let mut g2 = Array2::<f64>::zeros((cout, ncols));
    {
        let gs = gout.as_slice().expect("conv2d_backward: layout");
        let g2s = g2.as_slice_mut().unwrap();
        for bi in 0..b {
            for co in 0..cout {
                let src = (bi * cout + co) * plane;
                let dst = co * ncols + bi * plane;
                g2s[dst..dst + plane].copy_from_slice(&gs[src..src + plane]);
            }
        }
    }

    let cols = im2col(x, kh, kw, spec);
    let dw2 = g2.dot(&cols.t());
    let dw = dw2
        .into_shape_with_order((cout, cin, kh, kw))
        .unwrap();
    let db = g2.sum_axis(Axis(1));

    let dx = if need_dx {
        let w2 = weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let dcols = w2.t().dot(&g2);
        Some(col2im(&dcols, x.dim(), kh, kw, spec))
    } else {
        None
    };
    (dx, dw, db)
}

/// Per-axis sample positions for bilinear interpolation (half-pixel centers).
fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let i0 = base.max(0.0).min((n_in - 1) as f64) as usize;
            let i1 = (base + 1.0).max(0.0).min((n_in - 1) as f64) as usize;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of [B,C,H,W] to (th, tw).
pub fn bilinear_resize(x: &ArrayView4<f64>, th: usize, tw: usize) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    if (h, w) == (th, tw) {
        return x.to_owned();
    }
    let ys = bilinear_axis(h, th);
    let xs_ax = bilinear_axis(w, tw);
    let mut out = Array4::<f64>::zeros((b, c, th, tw));
    let src = x.as_slice().expect("bilinear_resize: layout");
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let sp = (bi * c + ci) * h * w;
            let dp = (bi * c + ci) * th * tw;
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let r0 = sp + y0 * w;
                let r1 = sp + y1 * w;
                let drow = dp + oy * tw;
                for (ox, &(x0, x1, wx)) in xs_ax.iter().enumerate() {
                    let top = src[r0 + x0] * (1.0 - wx) + src[r0 + x1] * wx;
                    let bot = src[r1 + x0] * (1.0 - wx) + src[r1 + x1] * wx;
                    dst[drow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatter the output gradient back to (h, w).
pub fn bilinear_resize_backward(gout: &ArrayView4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c, th, tw) = gout.dim();
    if (h, w) == (th, tw) {
        return gout.to_owned();
    }
    let ys = bilinear_axis(h, th);
    let xs_ax = bilinear_axis(w, tw);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let g = gout.as_slice().expect("bilinear_resize_backward: layout");
    let d = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let sp = (bi * c + ci) * h * w;
            let gp = (bi * c + ci) * th * tw;
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let grow = gp + oy * tw;
                for (ox, &(x0, x1, wx)) in xs_ax.iter().enumerate() {
                    let gv = g[grow + ox];
                    d[sp + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    d[sp + y0 * w + x1] += gv * (1.0 - wy) * wx;
                    d[sp + y1 * w + x0] += gv * wy * (1.0 - wx);
                    d[sp + y1 * w + x1] += gv * wy * wx;
                }
            }
        }
    }
    dx
}

/// Bilinear resize of a single 2-D plane.
pub fn bilinear_resize_2d(x: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let x4 = x.view().into_shape_with_order((1, 1, h, w)).unwrap();
    bilinear_resize(&x4, th, tw)
        .into_shape_with_order((th, tw))
        .unwrap()
}

/// Nearest-neighbor resize of a single 2-D plane (half-pixel centers).
pub fn nearest_resize_2d(x: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    if (h, w) == (th, tw) {
        return x.clone();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(oy, ox)| {
        let iy = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let ix = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        x[(iy, ix)]
    })
}

/// Softmax over the last axis of an arbitrary-rank array.
pub fn softmax_lastdim(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut y = x.clone();
    let k = *x.shape().last().expect("softmax: scalar input");
    let ys = y.as_slice_mut().expect("softmax: layout");
    for row in ys.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Backward of softmax over the last axis: dx = y * (g - <g, y>).
pub fn softmax_lastdim_backward(y: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    let k = *y.shape().last().unwrap();
    let mut dx = g.clone();
    let ys = y.as_slice().expect("softmax backward: layout");
    let ds = dx.as_slice_mut().unwrap();
    for (drow, yrow) in ds.chunks_mut(k).zip(ys.chunks(k)) {
        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
        for (d, y) in drow.iter_mut().zip(yrow) {
            *d = *y * (*d - dot);
        }
    }
    dx
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits: mean(max(x,0) - x*y + ln(1+e^{-|x|})).
pub fn bce_with_logits_mean(logits: &ArrayViewD<f64>, targets: &ArrayViewD<f64>) -> f64 {
    let n = logits.len();
    debug_assert_eq!(n, targets.len());
    let mut acc = 0.0;
    for (&x, &y) in logits.iter().zip(targets.iter()) {
        acc += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    acc / n as f64
}

/// Gradient of [`bce_with_logits_mean`] w.r.t. the logits, scaled by `gout`.
pub fn bce_with_logits_backward(
    logits: &ArrayD<f64>,
    targets: &ArrayD<f64>,
    gout: f64,
) -> ArrayD<f64> {
    let n = logits.len() as f64;
    let mut dx = logits.clone();
    for (d, &y) in dx.iter_mut().zip(targets.iter()) {
        *d = (sigmoid(*d) - y) * gout / n;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let b = Array1::zeros(1);
        let y = conv2d_forward(&x.view(), &w.view(), &b.view(), ConvSpec::unit());
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shapes_with_stride_and_padding() {
        let x = Array4::<f64>::zeros((2, 3, 8, 8));
        let w = Array4::<f64>::zeros((5, 3, 3, 3));
        let b = Array1::<f64>::zeros(5);
        let spec = ConvSpec {
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        let y = conv2d_forward(&x.view(), &w.view(), &b.view(), spec);
        assert_eq!(y.dim(), (2, 5, 4, 4));
    }

    #[test]
    fn conv_matches_naive_reference() {
        // Cross-check im2col gemm against a direct nested-loop convolution.
        let mut state = 1u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = Array4::from_shape_fn((2, 3, 5, 6), |_| next());
        let w = Array4::from_shape_fn((4, 3, 3, 3), |_| next());
        let b = Array1::from_shape_fn(4, |_| next());
        let spec = ConvSpec {
            stride: 2,
            padding: 1,
            dilation: 2,
        };
        let y = conv2d_forward(&x.view(), &w.view(), &b.view(), spec);
        let (bs, _, h, wi) = x.dim();
        let (cout, cin, kh, kw) = w.dim();
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(wi, kw);
        assert_eq!(y.dim(), (bs, cout, oh, ow));
        for bi in 0..bs {
            for co in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oi * spec.stride + ki * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (oj * spec.stride + kj * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wi as isize {
                                        acc += x[(bi, ci, iy as usize, ix as usize)]
                                            * w[(co, ci, ki, kj)];
                                    }
                                }
                            }
                        }
                        let got = y[(bi, co, oi, oj)];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(bilinear_resize_2d(&x, 2, 2), x);
    }

    #[test]
    fn bilinear_preserves_value_range() {
        let x = Array2::from_shape_fn((7, 5), |(i, j)| ((i * 31 + j * 17) % 11) as f64 / 10.0);
        let y = bilinear_resize_2d(&x, 23, 13);
        for &v in y.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = ArrayD::from_shape_vec(
            ndarray::IxDyn(&[2, 3]),
            vec![0.5, -1.0, 2.0, 10.0, 10.0, 10.0],
        )
        .unwrap();
        let y = softmax_lastdim(&x);
        for row in y.as_slice().unwrap().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let x = ArrayD::zeros(ndarray::IxDyn(&[4, 4]));
        let y = ArrayD::from_elem(ndarray::IxDyn(&[4, 4]), 1.0);
        let v = bce_with_logits_mean(&x.view(), &y.view());
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }
}
