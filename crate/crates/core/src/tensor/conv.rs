use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn, Zip};

use super::ops::dims3;
use super::{Elem, Tape, TensorRef};

/// Unfold `(C,H,W)` into `(C*kh*kw, OH*OW)` columns for a stride-1
/// convolution with zero padding `(ph,pw)`.
fn im2col<F: Elem>(x: &ArrayD<F>, kh: usize, kw: usize, ph: usize, pw: usize) -> Array2<F> {
    let (c, h, w) = dims3(x);
    let oh = h + 2 * ph + 1 - kh;
    let ow = w + 2 * pw + 1 - kw;
    let xs = x.as_slice().expect("im2col: contiguous input");
    let mut cols = Array2::<F>::zeros((c * kh * kw, oh * ow));
    let cs = cols.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let row_base = row * oh * ow;
                // valid output rows: 0 <= oy + dy - ph < h
                let oy_lo = ph.saturating_sub(dy);
                let oy_hi = (h + ph - dy).min(oh);
                let ox_lo = pw.saturating_sub(dx);
                let ox_hi = (w + pw - dx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy + dy - ph;
                    let src = ci * h * w + iy * w + (ox_lo + dx - pw);
                    let dst = row_base + oy * ow + ox_lo;
                    let len = ox_hi - ox_lo;
                    cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: scatter-add columns back into `(C,H,W)`.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Elem>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) -> ArrayD<F> {
    let oh = h + 2 * ph + 1 - kh;
    let ow = w + 2 * pw + 1 - kw;
    let mut x = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
    let xs = x.as_slice_mut().expect("contiguous");
    let cs = cols.as_slice().expect("contiguous");
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let row_base = row * oh * ow;
                let oy_lo = ph.saturating_sub(dy);
                let oy_hi = (h + ph - dy).min(oh);
                let ox_lo = pw.saturating_sub(dx);
                let ox_hi = (w + pw - dx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy + dy - ph;
                    let dst = ci * h * w + iy * w + (ox_lo + dx - pw);
                    let src = row_base + oy * ow + ox_lo;
                    for k in 0..(ox_hi - ox_lo) {
                        xs[dst + k] += cs[src + k];
                    }
                }
            }
        }
    }
    x
}

impl<F: Elem> Tape<F> {
    /// Stride-1 2-d convolution: `x (Cin,H,W)`, `w (Cout,Cin,kh,kw)`,
    /// optional bias `(Cout)`, zero padding `(ph,pw)`.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
        pad: (usize, usize),
    ) -> TensorRef {
        let (vx, vw) = (self.rc(x), self.rc(w));
        let (cin, h, wd) = dims3(&vx);
        let wdims = vw.shape().to_vec();
        assert_eq!(wdims.len(), 4, "conv2d: weight rank");
        let (cout, wcin, kh, kw) = (wdims[0], wdims[1], wdims[2], wdims[3]);
        assert_eq!(cin, wcin, "conv2d: input channels");
        let (ph, pw) = pad;
        let oh = h + 2 * ph + 1 - kh;
        let ow = wd + 2 * pw + 1 - kw;
        let wmat_owned = super::ops::reshaped(&vw, &[cout, cin * kh * kw]);
        let wmat = wmat_owned.view().into_dimensionality::<Ix2>().unwrap();

        let one_by_one = kh == 1 && kw == 1 && ph == 0 && pw == 0;
        // For 1x1 kernels the input itself is the column matrix.
        let cols: Rc<Array2<F>> = if one_by_one {
            Rc::new(
                super::ops::reshaped(&vx, &[cin, h * wd])
                    .into_dimensionality::<Ix2>()
                    .unwrap(),
            )
        } else {
            Rc::new(im2col(&vx, kh, kw, ph, pw))
        };
        let mut y = wmat.dot(&*cols);
        if let Some(b) = b {
            let vb = self.rc(b);
            let b1 = vb.view().into_dimensionality::<Ix1>().expect("conv bias");
            assert_eq!(b1.len(), cout, "conv2d: bias len");
            for (mut row, &bv) in y.rows_mut().into_iter().zip(b1.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let value = y
            .into_shape_with_order(IxDyn(&[cout, oh, ow]))
            .expect("conv2d: output shape");

        let (fx, fw) = (self.wants_grad(x), self.wants_grad(w));
        let fb = b.map(|b| self.wants_grad(b)).unwrap_or(false);
        self.push_op(value, fx || fw || fb, move |g, sink| {
            let gmat_owned = super::ops::reshaped(g, &[cout, oh * ow]);
            let gmat = gmat_owned.view().into_dimensionality::<Ix2>().unwrap();
            if fb {
                sink.add(b.unwrap().0, gmat.sum_axis(Axis(1)).into_dyn());
            }
            if fw {
                let dw = gmat.dot(&cols.t());
                sink.add(
                    w.0,
                    dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .expect("conv2d: dw shape"),
                );
            }
            if fx {
                let wmat_owned = super::ops::reshaped(&vw, &[cout, cin * kh * kw]);
                let wmat = wmat_owned.view().into_dimensionality::<Ix2>().unwrap();
                let dcols = wmat.t().dot(&gmat);
                let dx = if one_by_one {
                    dcols
                        .into_shape_with_order(IxDyn(&[cin, h, wd]))
                        .expect("conv2d: dx shape")
                } else {
                    col2im(&dcols, cin, h, wd, kh, kw, ph, pw)
                };
                sink.add(x.0, dx);
            }
        })
    }

    /// 2x2 max pooling with stride 2. Requires even spatial dims; gradient
    /// routes to the argmax (first maximum on ties).
    pub fn maxpool2(&mut self, x: TensorRef) -> TensorRef {
        let vx = self.rc(x);
        let (c, h, w) = dims3(&vx);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut value = ArrayD::<F>::zeros(IxDyn(&[c, oh, ow]));
        let mut arg = vec![0u32; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut bidx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                            let v = vx[[ci, iy, ix]];
                            if v > best {
                                best = v;
                                bidx = (iy * w + ix) as u32;
                            }
                        }
                    }
                    value[[ci, oy, ox]] = best;
                    arg[(ci * oh + oy) * ow + ox] = bidx;
                }
            }
        }
        let fx = self.wants_grad(x);
        self.push_op(value, fx, move |g, sink| {
            if fx {
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
                let ds = dx.as_slice_mut().expect("contiguous");
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = arg[(ci * oh + oy) * ow + ox] as usize;
                            ds[ci * h * w + idx] += g[[ci, oy, ox]];
                        }
                    }
                }
                sink.add(x.0, dx);
            }
        })
    }

    /// Bilinear 2x upsampling of `(C,H,W)` (half-pixel centers, clamped
    /// borders — the align_corners=false convention).
    pub fn upsample_bilinear2(&mut self, x: TensorRef) -> TensorRef {
        let vx = self.rc(x);
        let (c, h, w) = dims3(&vx);
        let (oh, ow) = (h * 2, w * 2);
        let ytab = axis_table::<F>(h, oh);
        let xtab = axis_table::<F>(w, ow);
        let mut value = ArrayD::<F>::zeros(IxDyn(&[c, oh, ow]));
        for ci in 0..c {
            let lane = vx.index_axis(Axis(0), ci);
            let mut out = value.index_axis_mut(Axis(0), ci);
            for oy in 0..oh {
                let (y0, y1, wy) = ytab[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = xtab[ox];
                    let a = lane[[y0, x0]];
                    let b = lane[[y0, x1]];
                    let d = lane[[y1, x0]];
                    let e = lane[[y1, x1]];
                    let top = a + (b - a) * wx;
                    let bot = d + (e - d) * wx;
                    out[[oy, ox]] = top + (bot - top) * wy;
                }
            }
        }
        let fx = self.wants_grad(x);
        self.push_op(value, fx, move |g, sink| {
            if fx {
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let glane = g.index_axis(Axis(0), ci);
                    let mut dlane = dx.index_axis_mut(Axis(0), ci);
                    for oy in 0..oh {
                        let (y0, y1, wy) = ytab[oy];
                        for ox in 0..ow {
                            let (x0, x1, wx) = xtab[ox];
                            let gv = glane[[oy, ox]];
                            let one = F::one();
                            dlane[[y0, x0]] += gv * (one - wy) * (one - wx);
                            dlane[[y0, x1]] += gv * (one - wy) * wx;
                            dlane[[y1, x0]] += gv * wy * (one - wx);
                            dlane[[y1, x1]] += gv * wy * wx;
                        }
                    }
                }
                sink.add(x.0, dx);
            }
        })
    }
}

/// Per-output-index `(i0, i1, frac)` sampling table for one axis of a 2x
/// bilinear upsample.
fn axis_table<F: Elem>(n_in: usize, n_out: usize) -> Vec<(usize, usize, F)> {
    let mut tab = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let floor = src.floor();
        let frac = src - floor;
        let i0 = (floor.max(0.0) as usize).min(n_in - 1);
        let i1 = ((floor + 1.0).max(0.0) as usize).min(n_in - 1);
        tab.push((i0, i1, F::from_f64(frac)));
    }
    tab
}

/// Direct (nested-loop) reference convolution used by tests as an oracle for
/// the gemm-backed path.
pub fn conv2d_reference<F: Elem>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    b: Option<&Array1<F>>,
    pad: (usize, usize),
) -> ArrayD<F> {
    let (cin, h, wd) = dims3(x);
    let wdims = w.shape();
    let (cout, kh, kw) = (wdims[0], wdims[2], wdims[3]);
    assert_eq!(wdims[1], cin);
    let (ph, pw) = pad;
    let oh = h + 2 * ph + 1 - kh;
    let ow = wd + 2 * pw + 1 - kw;
    let mut y = ArrayD::<F>::zeros(IxDyn(&[cout, oh, ow]));
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map(|b| b[co]).unwrap_or_else(F::zero);
                for ci in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = oy + dy;
                            let ix = ox + dx;
                            if iy < ph || ix < pw {
                                continue;
                            }
                            let (iy, ix) = (iy - ph, ix - pw);
                            if iy >= h || ix >= wd {
                                continue;
                            }
                            acc += x[[ci, iy, ix]] * w[[co, ci, dy, dx]];
                        }
                    }
                }
                y[[co, oy, ox]] = acc;
            }
        }
    }
    y
}

/// Elementwise max-abs difference between two arrays.
pub fn max_abs_diff<F: Elem>(a: &ArrayD<F>, b: &ArrayD<F>) -> f64 {
    let mut m = 0.0f64;
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = (x - y).abs().to_f64();
        if d > m {
            m = d;
        }
    });
    m
}
