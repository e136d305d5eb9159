use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice, Zip};

use super::{Elem, Tape, TensorRef};

/// One matched (proposal cell, anchor, ground-truth) triple for the
/// regression term of the matching loss.
#[derive(Clone, Copy, Debug)]
pub struct MatchPair<F> {
    /// Flat index into the stride-2 grid (row-major).
    pub cell: usize,
    pub anchor: (F, F),
    pub gt: (F, F),
}

/// Reshape `a` to `dims`, copying if the layout demands it.
pub(crate) fn reshaped<F: Elem>(a: &ArrayD<F>, dims: &[usize]) -> ArrayD<F> {
    if let Some(slice) = a.as_slice() {
        ArrayD::from_shape_vec(IxDyn(dims), slice.to_vec()).expect("reshape: element count")
    } else {
        a.to_shape(IxDyn(dims)).expect("reshape").to_owned()
    }
}

/// Sum `g` down to `target` shape (same rank, broadcast axes have dim 1).
fn reduce_to<F: Elem>(g: &ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    let mut out = g.to_owned();
    for (ax, &t) in target.iter().enumerate() {
        if t == 1 && out.shape()[ax] > 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

impl<F: Elem> Tape<F> {
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let value = &*va + &*vb;
        let (fa, fb) = (self.wants_grad(a), self.wants_grad(b));
        self.push_op(value, fa || fb, move |g, sink| {
            if fa {
                sink.add(a.0, g.clone());
            }
            if fb {
                sink.add(b.0, g.clone());
            }
        })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let value = &*va - &*vb;
        let (fa, fb) = (self.wants_grad(a), self.wants_grad(b));
        self.push_op(value, fa || fb, move |g, sink| {
            if fa {
                sink.add(a.0, g.clone());
            }
            if fb {
                sink.add(b.0, g.mapv(|x| -x));
            }
        })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let value = &*va * &*vb;
        let (fa, fb) = (self.wants_grad(a), self.wants_grad(b));
        self.push_op(value, fa || fb, move |g, sink| {
            if fa {
                sink.add(a.0, g * &*vb);
            }
            if fb {
                sink.add(b.0, g * &*va);
            }
        })
    }

    /// `a + b` where `b` broadcasts against `a` (same rank, dim 1 axes).
    pub fn add_bcast(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.rc(a), self.rc(b));
        let bshape: Vec<usize> = vb.shape().to_vec();
        let value = &*va + &vb.broadcast(va.raw_dim()).expect("add_bcast: broadcast");
        let (fa, fb) = (self.wants_grad(a), self.wants_grad(b));
        self.push_op(value, fa || fb, move |g, sink| {
            if fa {
                sink.add(a.0, g.clone());
            }
            if fb {
                sink.add(b.0, reduce_to(g, &bshape));
            }
        })
    }

    /// `a * b` where `b` broadcasts against `a` (same rank, dim 1 axes).
    pub fn mul_bcast(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.rc(a), self.rc(b));
        let bshape: Vec<usize> = vb.shape().to_vec();
        let value = &*va * &vb.broadcast(va.raw_dim()).expect("mul_bcast: broadcast");
        let (fa, fb) = (self.wants_grad(a), self.wants_grad(b));
        self.push_op(value, fa || fb, move |g, sink| {
            if fa {
                sink.add(a.0, g * &vb.broadcast(g.raw_dim()).expect("bcast"));
            }
            if fb {
                sink.add(b.0, reduce_to(&(g * &*va), &bshape));
            }
        })
    }

    pub fn scale(&mut self, a: TensorRef, c: F) -> TensorRef {
        let va = self.rc(a);
        let value = va.mapv(|x| x * c);
        let fa = self.wants_grad(a);
        self.push_op(value, fa, move |g, sink| {
            if fa {
                sink.add(a.0, g.mapv(|x| x * c));
            }
        })
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        let value = va.mapv(|x| if x > F::zero() { x } else { F::zero() });
        let fa = self.wants_grad(a);
        self.push_op(value, fa, move |g, sink| {
            if fa {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(&*va).for_each(|d, &x| {
                    if x <= F::zero() {
                        *d = F::zero();
                    }
                });
                sink.add(a.0, dx);
            }
        })
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        let value = va.mapv(sigmoid_scalar);
        let fa = self.wants_grad(a);
        let saved = value.clone();
        self.push_op(value, fa, move |g, sink| {
            if fa {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(&saved).for_each(|d, &y| {
                    *d = *d * y * (F::one() - y);
                });
                sink.add(a.0, dx);
            }
        })
    }

    pub fn mean_all(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        let n = va.len();
        let inv = F::from_f64(1.0 / n as f64);
        let mut acc = F::zero();
        for &x in va.iter() {
            acc += x;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), acc * inv);
        let fa = self.wants_grad(a);
        let shape = va.raw_dim();
        self.push_op(value, fa, move |g, sink| {
            if fa {
                let gv = *g.first().expect("scalar grad");
                sink.add(a.0, ArrayD::from_elem(shape, gv * inv));
            }
        })
    }

    /// Global average over the spatial axes: `(C,H,W) -> (C,1,1)`.
    pub fn spatial_mean(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        let (c, h, w) = dims3(&va);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let mut value = ArrayD::zeros(IxDyn(&[c, 1, 1]));
        for ci in 0..c {
            let mut acc = F::zero();
            for &x in va.index_axis(Axis(0), ci).iter() {
                acc += x;
            }
            value[[ci, 0, 0]] = acc * inv;
        }
        let fa = self.wants_grad(a);
        self.push_op(value, fa, move |g, sink| {
            if fa {
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let gv = g[[ci, 0, 0]] * inv;
                    dx.index_axis_mut(Axis(0), ci).fill(gv);
                }
                sink.add(a.0, dx);
            }
        })
    }

    /// Per-position maximum across channels: `(C,H,W) -> (1,H,W)`.
    /// Ties route the gradient to the lowest channel index.
    pub fn channel_max(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        let (c, h, w) = dims3(&va);
        let mut value = ArrayD::zeros(IxDyn(&[1, h, w]));
        let mut arg = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut best = va[[0, y, x]];
                let mut bi = 0u32;
                for ci in 1..c {
                    let v = va[[ci, y, x]];
                    if v > best {
                        best = v;
                        bi = ci as u32;
                    }
                }
                value[[0, y, x]] = best;
                arg[y * w + x] = bi;
            }
        }
        let fa = self.wants_grad(a);
        self.push_op(value, fa, move |g, sink| {
            if fa {
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for y in 0..h {
                    for x in 0..w {
                        dx[[arg[y * w + x] as usize, y, x]] = g[[0, y, x]];
                    }
                }
                sink.add(a.0, dx);
            }
        })
    }

    /// Per-position mean across channels: `(C,H,W) -> (1,H,W)`.
    pub fn channel_mean(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        let (c, h, w) = dims3(&va);
        let inv = F::from_f64(1.0 / c as f64);
        let value = va
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .mapv(|x| x * inv)
            .into_dyn();
        let fa = self.wants_grad(a);
        self.push_op(value, fa, move |g, sink| {
            if fa {
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let mut lane = dx.index_axis_mut(Axis(0), ci);
                    lane.assign(&g.index_axis(Axis(0), 0));
                    lane.mapv_inplace(|x| x * inv);
                }
                sink.add(a.0, dx);
            }
        })
    }

    pub fn reshape(&mut self, a: TensorRef, dims: &[usize]) -> TensorRef {
        let va = self.rc(a);
        assert_eq!(
            va.len(),
            dims.iter().product::<usize>(),
            "reshape: element count"
        );
        let value = reshaped(&va, dims);
        let fa = self.wants_grad(a);
        let orig: Vec<usize> = va.shape().to_vec();
        self.push_op(value, fa, move |g, sink| {
            if fa {
                sink.add(a.0, reshaped(g, &orig));
            }
        })
    }

    /// Transpose of a 2-d tensor (materialized in standard layout).
    pub fn transpose2(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        assert_eq!(va.ndim(), 2, "transpose2: rank");
        let value = va.t().as_standard_layout().into_owned();
        let fa = self.wants_grad(a);
        self.push_op(value, fa, move |g, sink| {
            if fa {
                sink.add(a.0, g.t().as_standard_layout().into_owned());
            }
        })
    }

    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> TensorRef {
        assert!(!parts.is_empty(), "concat: no parts");
        let vals: Vec<_> = parts.iter().map(|p| self.rc(*p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat: shapes");
        let flags: Vec<bool> = parts.iter().map(|p| self.wants_grad(*p)).collect();
        let any = flags.iter().any(|&f| f);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push_op(value, any, move |g, sink| {
            let mut start = 0isize;
            for i in 0..ids.len() {
                let len = lens[i] as isize;
                if flags[i] {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + len), 1))
                        .to_owned();
                    sink.add(ids[i], piece);
                }
                start += len;
            }
        })
    }

    pub fn slice_axis_op(
        &mut self,
        a: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    ) -> TensorRef {
        let va = self.rc(a);
        let value = va
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        let fa = self.wants_grad(a);
        let shape = va.raw_dim();
        self.push_op(value, fa, move |g, sink| {
            if fa {
                let mut dx = ArrayD::zeros(shape);
                dx.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                sink.add(a.0, dx);
            }
        })
    }

    /// `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.rc(a), self.rc(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims");
        let value = a2.dot(&b2).into_dyn();
        let (fa, fb) = (self.wants_grad(a), self.wants_grad(b));
        self.push_op(value, fa || fb, move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul grad");
            if fa {
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(a.0, g2.dot(&b2.t()).into_dyn());
            }
            if fb {
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(b.0, a2.t().dot(&g2).into_dyn());
            }
        })
    }

    /// Affine map of row features: `x (t,in) . w^T (in,out) + b -> (t,out)`.
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: Option<TensorRef>) -> TensorRef {
        let (vx, vw) = (self.rc(x), self.rc(w));
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("linear x");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear w");
        assert_eq!(x2.ncols(), w2.ncols(), "linear: in features");
        let mut value = x2.dot(&w2.t());
        if let Some(b) = b {
            let vb = self.rc(b);
            let b1 = vb.view().into_dimensionality::<Ix1>().expect("linear b");
            value += &b1;
        }
        let (fx, fw) = (self.wants_grad(x), self.wants_grad(w));
        let fb = b.map(|b| self.wants_grad(b)).unwrap_or(false);
        self.push_op(value.into_dyn(), fx || fw || fb, move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("linear grad");
            if fx {
                let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(x.0, g2.dot(&w2).into_dyn());
            }
            if fw {
                let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(w.0, g2.t().dot(&x2).into_dyn());
            }
            if fb {
                sink.add(b.unwrap().0, g2.sum_axis(Axis(0)).into_dyn());
            }
        })
    }

    /// Row-wise softmax of a 2-d tensor.
    pub fn softmax_rows(&mut self, a: TensorRef) -> TensorRef {
        let va = self.rc(a);
        let a2 = va.view().into_dimensionality::<Ix2>().expect("softmax");
        let mut value = Array2::<F>::zeros(a2.raw_dim());
        for (mut orow, irow) in value.rows_mut().into_iter().zip(a2.rows()) {
            let mut mx = irow[0];
            for &v in irow.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::zero();
            for (o, &v) in orow.iter_mut().zip(irow.iter()) {
                let e = (v - mx).exp();
                *o = e;
                denom += e;
            }
            let inv = F::one() / denom;
            orow.mapv_inplace(|x| x * inv);
        }
        let fa = self.wants_grad(a);
        let saved = value.clone();
        self.push_op(value.into_dyn(), fa, move |g, sink| {
            if fa {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<F>::zeros(g2.raw_dim());
                for ((mut drow, grow), yrow) in
                    dx.rows_mut().into_iter().zip(g2.rows()).zip(saved.rows())
                {
                    let mut dot = F::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow.iter()) {
                        dot += gv * yv;
                    }
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *d = (gv - dot) * yv;
                    }
                }
                sink.add(a.0, dx.into_dyn());
            }
        })
    }

    /// Layer normalization over the last axis of `(t,c)` rows.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    ) -> TensorRef {
        let (vx, vg, vb) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("ln x");
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("ln gamma");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("ln beta");
        let (t, c) = x2.dim();
        assert_eq!(g1.len(), c, "ln: gamma len");
        let epsf = F::from_f64(eps);
        let cinv = F::from_f64(1.0 / c as f64);
        let mut xhat = Array2::<F>::zeros((t, c));
        let mut inv_std = Array1::<F>::zeros(t);
        let mut value = Array2::<F>::zeros((t, c));
        for ti in 0..t {
            let row = x2.row(ti);
            let mut mu = F::zero();
            for &v in row.iter() {
                mu += v;
            }
            mu *= cinv;
            let mut var = F::zero();
            for &v in row.iter() {
                let d = v - mu;
                var += d * d;
            }
            var *= cinv;
            let inv = F::one() / (var + epsf).sqrt();
            inv_std[ti] = inv;
            for ci in 0..c {
                let xh = (row[ci] - mu) * inv;
                xhat[[ti, ci]] = xh;
                value[[ti, ci]] = xh * g1[ci] + b1[ci];
            }
        }
        let (fx, fg, fb) = (
            self.wants_grad(x),
            self.wants_grad(gamma),
            self.wants_grad(beta),
        );
        self.push_op(value.into_dyn(), fx || fg || fb, move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if fg {
                let mut dg = Array1::<F>::zeros(c);
                for ti in 0..t {
                    for ci in 0..c {
                        dg[ci] += g2[[ti, ci]] * xhat[[ti, ci]];
                    }
                }
                sink.add(gamma.0, dg.into_dyn());
            }
            if fb {
                sink.add(beta.0, g2.sum_axis(Axis(0)).into_dyn());
            }
            if fx {
                let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::<F>::zeros((t, c));
                for ti in 0..t {
                    let mut mean_dxh = F::zero();
                    let mut mean_dxh_xh = F::zero();
                    for ci in 0..c {
                        let dxh = g2[[ti, ci]] * g1[ci];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[[ti, ci]];
                    }
                    mean_dxh *= cinv;
                    mean_dxh_xh *= cinv;
                    let inv = inv_std[ti];
                    for ci in 0..c {
                        let dxh = g2[[ti, ci]] * g1[ci];
                        dx[[ti, ci]] = (dxh - mean_dxh - xhat[[ti, ci]] * mean_dxh_xh) * inv;
                    }
                }
                sink.add(x.0, dx.into_dyn());
            }
        })
    }

    /// Batch normalization of `(C,H,W)` using batch statistics; returns the
    /// node plus the per-channel mean and biased variance so the caller can
    /// maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    ) -> (TensorRef, Array1<F>, Array1<F>) {
        let (vx, vg, vb) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let (c, h, w) = dims3(&vx);
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("bn gamma");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bn beta");
        assert_eq!(g1.len(), c, "bn: gamma len");
        let n = h * w;
        let ninv = F::from_f64(1.0 / n as f64);
        let epsf = F::from_f64(eps);
        let mut mean = Array1::<F>::zeros(c);
        let mut var = Array1::<F>::zeros(c);
        let mut inv_std = Array1::<F>::zeros(c);
        let mut xhat = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
        let mut value = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            let lane = vx.index_axis(Axis(0), ci);
            let mut mu = F::zero();
            for &v in lane.iter() {
                mu += v;
            }
            mu *= ninv;
            let mut vr = F::zero();
            for &v in lane.iter() {
                let d = v - mu;
                vr += d * d;
            }
            vr *= ninv;
            mean[ci] = mu;
            var[ci] = vr;
            let inv = F::one() / (vr + epsf).sqrt();
            inv_std[ci] = inv;
            let (ga, be) = (g1[ci], b1[ci]);
            let mut xh_lane = xhat.index_axis_mut(Axis(0), ci);
            let mut out_lane = value.index_axis_mut(Axis(0), ci);
            Zip::from(&mut xh_lane)
                .and(&mut out_lane)
                .and(&lane)
                .for_each(|xh, o, &v| {
                    let z = (v - mu) * inv;
                    *xh = z;
                    *o = z * ga + be;
                });
        }
        let (fx, fg, fb) = (
            self.wants_grad(x),
            self.wants_grad(gamma),
            self.wants_grad(beta),
        );
        let saved_xhat = xhat;
        let saved_inv = inv_std;
        let node = self.push_op(value, fx || fg || fb, move |g, sink| {
            if fg {
                let mut dg = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let glane = g.index_axis(Axis(0), ci);
                    let xlane = saved_xhat.index_axis(Axis(0), ci);
                    let mut acc = F::zero();
                    Zip::from(&glane).and(&xlane).for_each(|&gv, &xh| {
                        acc += gv * xh;
                    });
                    dg[ci] = acc;
                }
                sink.add(gamma.0, dg.into_dyn());
            }
            if fb {
                let mut db = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let mut acc = F::zero();
                    for &gv in g.index_axis(Axis(0), ci).iter() {
                        acc += gv;
                    }
                    db[ci] = acc;
                }
                sink.add(beta.0, db.into_dyn());
            }
            if fx {
                let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let glane = g.index_axis(Axis(0), ci);
                    let xlane = saved_xhat.index_axis(Axis(0), ci);
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    Zip::from(&glane).and(&xlane).for_each(|&gv, &xh| {
                        let d = gv * g1[ci];
                        mean_d += d;
                        mean_dx += d * xh;
                    });
                    mean_d *= ninv;
                    mean_dx *= ninv;
                    let inv = saved_inv[ci];
                    let mut dlane = dx.index_axis_mut(Axis(0), ci);
                    Zip::from(&mut dlane)
                        .and(&glane)
                        .and(&xlane)
                        .for_each(|o, &gv, &xh| {
                            *o = (gv * g1[ci] - mean_d - xh * mean_dx) * inv;
                        });
                }
                sink.add(x.0, dx);
            }
        });
        (node, mean, var)
    }

    /// Batch normalization of `(C,H,W)` using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        mean: &Array1<F>,
        var: &Array1<F>,
        eps: f64,
    ) -> TensorRef {
        let (vx, vg, vb) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let (c, h, w) = dims3(&vx);
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("bn gamma");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bn beta");
        let epsf = F::from_f64(eps);
        let inv: Array1<F> = var.mapv(|v| F::one() / (v + epsf).sqrt());
        let mut value = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            let (mu, iv, ga, be) = (mean[ci], inv[ci], g1[ci], b1[ci]);
            let lane = vx.index_axis(Axis(0), ci);
            let mut out = value.index_axis_mut(Axis(0), ci);
            Zip::from(&mut out).and(&lane).for_each(|o, &v| {
                *o = (v - mu) * iv * ga + be;
            });
        }
        let (fx, fg, fb) = (
            self.wants_grad(x),
            self.wants_grad(gamma),
            self.wants_grad(beta),
        );
        let mean = mean.clone();
        let saved_inv = inv;
        self.push_op(value, fx || fg || fb, move |g, sink| {
            let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
            if fx {
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let k = g1[ci] * saved_inv[ci];
                    let glane = g.index_axis(Axis(0), ci);
                    let mut dlane = dx.index_axis_mut(Axis(0), ci);
                    Zip::from(&mut dlane).and(&glane).for_each(|o, &gv| {
                        *o = gv * k;
                    });
                }
                sink.add(x.0, dx);
            }
            if fg {
                let mut dg = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let (mu, iv) = (mean[ci], saved_inv[ci]);
                    let glane = g.index_axis(Axis(0), ci);
                    let xlane = vx.index_axis(Axis(0), ci);
                    let mut acc = F::zero();
                    Zip::from(&glane).and(&xlane).for_each(|&gv, &xv| {
                        acc += gv * (xv - mu) * iv;
                    });
                    dg[ci] = acc;
                }
                sink.add(gamma.0, dg.into_dyn());
            }
            if fb {
                let mut db = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let mut acc = F::zero();
                    for &gv in g.index_axis(Axis(0), ci).iter() {
                        acc += gv;
                    }
                    db[ci] = acc;
                }
                sink.add(beta.0, db.into_dyn());
            }
        })
    }

    /// Mean binary cross-entropy between `logits` and constant `labels`,
    /// computed with the numerically stable log-sum-exp form.
    pub fn bce_with_logits_mean(&mut self, logits: TensorRef, labels: ArrayD<F>) -> TensorRef {
        let vz = self.rc(logits);
        assert_eq!(vz.shape(), labels.shape(), "bce: label shape");
        let n = vz.len();
        let ninv = F::from_f64(1.0 / n as f64);
        let mut acc = F::zero();
        Zip::from(&*vz).and(&labels).for_each(|&z, &y| {
            let pos = if z > F::zero() { z } else { F::zero() };
            acc = acc + pos - z * y + (F::one() + (-z.abs()).exp()).ln();
        });
        let value = ArrayD::from_elem(IxDyn(&[]), acc * ninv);
        let fz = self.wants_grad(logits);
        self.push_op(value, fz, move |g, sink| {
            if fz {
                let gv = *g.first().expect("scalar grad") * ninv;
                let mut dz = ArrayD::zeros(vz.raw_dim());
                Zip::from(&mut dz)
                    .and(&*vz)
                    .and(&labels)
                    .for_each(|d, &z, &y| {
                        *d = (sigmoid_scalar(z) - y) * gv;
                    });
                sink.add(logits.0, dz);
            }
        })
    }

    /// Mean squared Euclidean distance between decoded matched proposals and
    /// their ground-truth points. `offsets` is the `(2,h,w)` offset map; each
    /// pair contributes `|anchor + offset - gt|^2`. Empty pair lists yield a
    /// constant zero.
    pub fn matched_sq_dist_mean(
        &mut self,
        offsets: TensorRef,
        pairs: Vec<MatchPair<F>>,
    ) -> TensorRef {
        let vo = self.rc(offsets);
        let dims = vo.shape().to_vec();
        assert_eq!(dims[0], 2, "matched_sq_dist_mean: offsets rank");
        let cells = dims[1] * dims[2];
        if pairs.is_empty() {
            return self.constant(ArrayD::zeros(IxDyn(&[])));
        }
        let m = pairs.len();
        let minv = F::from_f64(1.0 / m as f64);
        let flat = vo.as_slice().expect("offsets contiguous");
        let mut acc = F::zero();
        for p in &pairs {
            let dx = p.anchor.0 + flat[p.cell] - p.gt.0;
            let dy = p.anchor.1 + flat[cells + p.cell] - p.gt.1;
            acc = acc + dx * dx + dy * dy;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), acc * minv);
        let fo = self.wants_grad(offsets);
        let shape = vo.raw_dim();
        self.push_op(value, fo, move |g, sink| {
            if fo {
                let gv = *g.first().expect("scalar grad") * minv;
                let two = F::from_f64(2.0);
                let mut dx = ArrayD::<F>::zeros(shape);
                let flat = vo.as_slice().expect("offsets contiguous");
                let dflat = dx.as_slice_mut().expect("grad contiguous");
                for p in &pairs {
                    let ex = p.anchor.0 + flat[p.cell] - p.gt.0;
                    let ey = p.anchor.1 + flat[cells + p.cell] - p.gt.1;
                    dflat[p.cell] += two * ex * gv;
                    dflat[cells + p.cell] += two * ey * gv;
                }
                sink.add(offsets.0, dx);
            }
        })
    }
}

pub fn sigmoid_scalar<F: Elem>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn dims3<F: Elem>(a: &ArrayD<F>) -> (usize, usize, usize) {
    let v = a
        .view()
        .into_dimensionality::<Ix3>()
        .expect("expected (C,H,W) tensor");
    v.dim()
}
