//! Differentiable tensor operations.
//!
//! Shape errors are programming errors here and panic with the offending
//! shapes; user-facing validation happens in the model code.

use std::rc::Rc;

use crate::gemm::gemm;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut counter = vec![0usize; nd - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut pa, mut pb) = (base_a, base_b);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ia;
            pb += ib;
        }
        // advance the outer odometer
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if counter[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to `target` along broadcast axes.
fn reduce_to(g: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return g.to_vec();
    }
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    let mut r = vec![0.0; target.iter().product()];
    for_each_broadcast(out, &st, &zeros, |o, t, _| r[t] += g[o]);
    r
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, kind: BinKind) -> Tensor {
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    let same = a.shape() == b.shape();
    macro_rules! apply {
        ($op:expr) => {{
            let op = $op;
            if same {
                for i in 0..n {
                    out[i] = op(ad[i], bd[i]);
                }
            } else {
                let sa = broadcast_strides(a.shape(), &out_shape);
                let sb = broadcast_strides(b.shape(), &out_shape);
                for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = op(ad[i], bd[j]));
            }
        }};
    }
    match kind {
        BinKind::Add => apply!(|x: f64, y: f64| x + y),
        BinKind::Sub => apply!(|x: f64, y: f64| x - y),
        BinKind::Mul => apply!(|x: f64, y: f64| x * y),
        BinKind::Div => apply!(|x: f64, y: f64| x / y),
    }
    let a_shape = a.shape().to_vec();
    let b_shape = b.shape().to_vec();
    let (a_rc, b_rc) = (a.data_rc(), b.data_rc());
    let os = out_shape.clone();
    let need_a = a.requires_grad();
    let need_b = b.requires_grad();
    Tensor::from_op(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let sa = broadcast_strides(&a_shape, &os);
            let sb = broadcast_strides(&b_shape, &os);
            match kind {
                BinKind::Add => vec![
                    need_a.then(|| reduce_to(g, &os, &a_shape)),
                    need_b.then(|| reduce_to(g, &os, &b_shape)),
                ],
                BinKind::Sub => vec![
                    need_a.then(|| reduce_to(g, &os, &a_shape)),
                    need_b.then(|| reduce_to(g, &os, &b_shape).into_iter().map(|v| -v).collect()),
                ],
                BinKind::Mul => {
                    let mut ga = need_a.then(|| vec![0.0; a_rc.len()]);
                    let mut gb = need_b.then(|| vec![0.0; b_rc.len()]);
                    for_each_broadcast(&os, &sa, &sb, |o, i, j| {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] += g[o] * b_rc[j];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] += g[o] * a_rc[i];
                        }
                    });
                    vec![ga, gb]
                }
                BinKind::Div => {
                    let mut ga = need_a.then(|| vec![0.0; a_rc.len()]);
                    let mut gb = need_b.then(|| vec![0.0; b_rc.len()]);
                    for_each_broadcast(&os, &sa, &sb, |o, i, j| {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] += g[o] / b_rc[j];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] -= g[o] * a_rc[i] / (b_rc[j] * b_rc[j]);
                        }
                    });
                    vec![ga, gb]
                }
            }
        }),
    )
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xs = x.data_rc();
    let ys = Rc::new(out.clone());
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            let gx = g.iter().zip(xs.iter().zip(ys.iter())).map(|(g, (&x, &y))| g * df(x, y)).collect();
            vec![Some(gx)]
        }),
    )
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, BinKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, BinKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, BinKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, BinKind::Div)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        unary(self, |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn sqr(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        unary(
            self,
            |v| v / (1.0 + (-v).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            |x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over `axis`, keeping it with size one.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len());
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape()
        );
        self.with_shared_data(shape.to_vec())
    }

    /// Reorders axes; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let shape = self.shape().to_vec();
        assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
        let out = permute_data(self.data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let os = out_shape.clone();
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| vec![Some(permute_data(g, &os, &inv))]),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Tensor {
        let n = self.dims();
        assert!(n >= 2);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(&perm)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range on {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `[.., m, k] @ [k, n]` or `[b.., m, k] @ [b.., k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (ash, bsh) = (self.shape().to_vec(), rhs.shape().to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2: {ash:?} @ {bsh:?}");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims differ: {ash:?} @ {bsh:?}");
        let a_rc = self.data_rc();
        let b_rc = rhs.data_rc();
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        if bsh.len() == 2 {
            // Shared right operand: fold all leading axes of the lhs into rows.
            let rows = self.numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, &a_rc, false, &b_rc, false, 0.0, &mut out);
            let mut out_shape = ash[..ash.len() - 1].to_vec();
            out_shape.push(n);
            return Tensor::from_op(
                out,
                out_shape,
                vec![self.clone(), rhs.clone()],
                Box::new(move |g| {
                    let ga = need_a.then(|| {
                        let mut ga = vec![0.0; rows * k];
                        gemm(rows, n, k, g, false, &b_rc, true, 0.0, &mut ga);
                        ga
                    });
                    let gb = need_b.then(|| {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, rows, n, &a_rc, true, g, false, 0.0, &mut gb);
                        gb
                    });
                    vec![ga, gb]
                }),
            );
        }
        assert_eq!(
            ash[..ash.len() - 2],
            bsh[..bsh.len() - 2],
            "batched matmul batch dims differ: {ash:?} @ {bsh:?}"
        );
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for b in 0..batch {
            gemm(
                m,
                k,
                n,
                &a_rc[b * m * k..(b + 1) * m * k],
                false,
                &b_rc[b * k * n..(b + 1) * k * n],
                false,
                0.0,
                &mut out[b * m * n..(b + 1) * m * n],
            );
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let ga = need_a.then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for b in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[b * m * n..(b + 1) * m * n],
                            false,
                            &b_rc[b * k * n..(b + 1) * k * n],
                            true,
                            0.0,
                            &mut ga[b * m * k..(b + 1) * m * k],
                        );
                    }
                    ga
                });
                let gb = need_b.then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for b in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &a_rc[b * m * k..(b + 1) * m * k],
                            true,
                            &g[b * m * n..(b + 1) * m * n],
                            false,
                            0.0,
                            &mut gb[b * k * n..(b + 1) * k * n],
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("softmax on scalar");
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - mx).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        }
        let y = Rc::new(out.clone());
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), gxr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((gxi, &yi), &gi) in gxr.iter_mut().zip(yr).zip(gr) {
                        *gxi = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Row-major permutation of a raw buffer.
pub fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; nd];
    let mut out = vec![0.0; x.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, s, _| out[o] = x[s]);
    out
}

/// Concatenates along `axis`.
pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty(), "cat of nothing");
    let first = parts[0].shape().to_vec();
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), first.len(), "cat rank mismatch");
        for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
            assert!(i == axis || a == b, "cat shape mismatch {s:?} vs {first:?}");
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &l) in parts.iter().zip(&lens) {
            out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let lens_c = lens.clone();
    Tensor::from_op(
        out,
        out_shape,
        parts.to_vec(),
        Box::new(move |g| {
            let mut grads: Vec<Vec<f64>> = lens_c.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens_c) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}

/// Mean squared error between two same-shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    a.sub(b).sqr().mean_all()
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw_o = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * hw_o..(row + 1) * hw_o];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + i) as isize - self.pad as isize;
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + j) as isize - self.pad as isize;
                            dst[oh * self.wo + ow] =
                                if ih >= 0 && iw >= 0 && (ih as usize) < self.h && (iw as usize) < self.w {
                                    x[(c * self.h + ih as usize) * self.w + iw as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw_o = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * hw_o..(row + 1) * hw_o];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + i) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + j) as isize - self.pad as isize;
                            if iw >= 0 && (iw as usize) < self.w {
                                dx[(c * self.h + ih as usize) * self.w + iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation with zero padding. `x: [N,C,H,W]`, `w: [O,C,kh,kw]`,
/// `bias: [O]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, ho, wo };
    let ckk = c * kh * kw;
    let hw_o = ho * wo;
    let x_rc = x.data_rc();
    let w_rc = w.data_rc();
    let mut out = vec![0.0; n * o * hw_o];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; ckk * hw_o] };
    for s in 0..n {
        let xin = &x_rc[s * c * h * wd..(s + 1) * c * h * wd];
        let col: &[f64] = if geom.is_pointwise() {
            xin
        } else {
            geom.im2col(xin, &mut cols);
            &cols
        };
        gemm(o, ckk, hw_o, &w_rc, false, col, false, 0.0, &mut out[s * o * hw_o..(s + 1) * o * hw_o]);
    }
    if let Some(b) = bias {
        assert_eq!(b.shape(), [o], "conv2d bias must be [{o}]");
        let bd = b.data();
        for s in 0..n {
            for oc in 0..o {
                for v in out[(s * o + oc) * hw_o..(s * o + oc + 1) * hw_o].iter_mut() {
                    *v += bd[oc];
                }
            }
        }
    }
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let need_x = x.requires_grad();
    let need_w = w.requires_grad();
    let has_bias = bias.is_some();
    Tensor::from_op(
        out,
        vec![n, o, ho, wo],
        parents,
        Box::new(move |g| {
            let mut gx = need_x.then(|| vec![0.0; n * c * h * wd]);
            let mut gw = need_w.then(|| vec![0.0; o * ckk]);
            let mut cols = vec![0.0; ckk * hw_o];
            let mut dcols = vec![0.0; ckk * hw_o];
            for s in 0..n {
                let gs = &g[s * o * hw_o..(s + 1) * o * hw_o];
                let xin = &x_rc[s * c * h * wd..(s + 1) * c * h * wd];
                if let Some(gw) = gw.as_mut() {
                    let col: &[f64] = if geom.is_pointwise() {
                        xin
                    } else {
                        geom.im2col(xin, &mut cols);
                        &cols
                    };
                    gemm(o, hw_o, ckk, gs, false, col, true, 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
                    if geom.is_pointwise() {
                        gemm(ckk, o, hw_o, &w_rc, true, gs, false, 0.0, dst);
                    } else {
                        gemm(ckk, o, hw_o, &w_rc, true, gs, false, 0.0, &mut dcols);
                        geom.col2im(&dcols, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![0.0; o];
                for s in 0..n {
                    for (oc, gbo) in gb.iter_mut().enumerate() {
                        *gbo += g[(s * o + oc) * hw_o..(s * o + oc + 1) * hw_o].iter().sum::<f64>();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    )
}

/// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "upsample expects NCHW");
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let xd = x.data();
    let mut out = vec![0.0; nc * 4 * h * w];
    for p in 0..nc {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[(p * 2 * h + i) * 2 * w + j] = xd[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    Tensor::from_op(
        out,
        vec![s[0], s[1], 2 * h, 2 * w],
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; nc * h * w];
            for p in 0..nc {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        gx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// normalization

/// Normalizes `count` contiguous groups of `len` values, then applies a
/// per-channel affine map; `chan_of(group, offset)` gives the channel.
fn normalize_groups(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    count: usize,
    len: usize,
    eps: f64,
    chan_of: Rc<dyn Fn(usize, usize) -> usize>,
) -> Tensor {
    let xd = x.data();
    let gd = gamma.data_rc();
    let bd = beta.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; count];
    let mut out = vec![0.0; xd.len()];
    for gi in 0..count {
        let seg = &xd[gi * len..(gi + 1) * len];
        let mean = seg.iter().sum::<f64>() / len as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[gi] = r;
        for off in 0..len {
            let xh = (seg[off] - mean) * r;
            xhat[gi * len + off] = xh;
            let ch = chan_of(gi, off);
            out[gi * len + off] = xh * gd[ch] + bd[ch];
        }
    }
    let xhat = Rc::new(xhat);
    let n_ch = gamma.numel();
    let (need_x, need_g, need_b) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let mut gx = need_x.then(|| vec![0.0; g.len()]);
            let mut gg = vec![0.0; n_ch];
            let mut gb = vec![0.0; n_ch];
            let mut dxh = vec![0.0; len];
            for gi in 0..count {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for off in 0..len {
                    let idx = gi * len + off;
                    let ch = chan_of(gi, off);
                    gg[ch] += g[idx] * xhat[idx];
                    gb[ch] += g[idx];
                    let d = g[idx] * gd[ch];
                    dxh[off] = d;
                    mean_d += d;
                    mean_dx += d * xhat[idx];
                }
                if let Some(gx) = gx.as_mut() {
                    mean_d /= len as f64;
                    mean_dx /= len as f64;
                    for off in 0..len {
                        let idx = gi * len + off;
                        gx[idx] = rstd[gi] * (dxh[off] - mean_d - xhat[idx] * mean_dx);
                    }
                }
            }
            vec![gx, need_g.then_some(gg), need_b.then_some(gb)]
        }),
    )
}

/// Group normalization of `[N,C,...]` with per-channel affine parameters.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let s = x.shape();
    assert!(s.len() >= 2, "group_norm expects [N,C,...]");
    let (n, c) = (s[0], s[1]);
    assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
    assert_eq!(gamma.numel(), c);
    assert_eq!(beta.numel(), c);
    let spatial: usize = s[2..].iter().product();
    let cpg = c / groups;
    let len = cpg * spatial;
    let chan_of = Rc::new(move |gi: usize, off: usize| (gi % groups) * cpg + off / spatial);
    normalize_groups(x, gamma, beta, n * groups, len, eps, chan_of)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().expect("layer_norm on scalar");
    assert_eq!(gamma.numel(), d);
    assert_eq!(beta.numel(), d);
    let count = x.numel() / d;
    normalize_groups(x, gamma, beta, count, d, eps, Rc::new(|_, off| off))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx against backward.
    fn check_grad(shape: &[usize], f: impl Fn(&Tensor) -> Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_vec(&mut rng, shape.iter().product());
        let x = Tensor::variable(x0.clone(), shape);
        let y = f(&x);
        let probe = Tensor::from_vec(rand_vec(&mut rng, y.numel()), y.shape());
        let loss = y.mul(&probe).sum_all();
        let grads = loss.backward();
        let g = grads.get(&x).expect("gradient").to_vec();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[i] += delta;
                let t = Tensor::from_vec(xp, shape);
                f(&t).mul(&probe).sum_all().item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {}", g[i]);
        }
    }

    #[test]
    fn broadcast_binary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Tensor::from_vec(rand_vec(&mut rng, 3), &[1, 3, 1]);
        check_grad(&[2, 3, 4], |x| x.mul(&b).add(&b).div(&b.add_scalar(3.0)), 1);
        let a = Tensor::from_vec(rand_vec(&mut rng, 24), &[2, 3, 4]);
        check_grad(&[3, 1], |x| a.mul(x).sub(x), 2);
    }

    #[test]
    fn activation_gradients() {
        check_grad(&[5, 4], |x| x.gelu(), 4);
        check_grad(&[5, 4], |x| x.silu(), 5);
        check_grad(&[5, 4], |x| x.scale(3.0).softmax_last(), 6);
        check_grad(&[5, 4], |x| x.sigmoid().exp(), 7);
    }

    #[test]
    fn shape_op_gradients() {
        check_grad(&[2, 3, 4], |x| x.permute(&[2, 0, 1]).reshape(&[4, 6]).narrow(1, 1, 3), 8);
        check_grad(&[2, 3, 4], |x| cat(&[x.clone(), x.narrow(1, 0, 2)], 1), 9);
        check_grad(&[2, 3, 4], |x| x.sum_axis_keep(1), 10);
        check_grad(&[1, 2, 3, 3], upsample_nearest2x, 11);
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Tensor::from_vec(rand_vec(&mut rng, 12), &[4, 3]);
        check_grad(&[2, 5, 4], |x| x.matmul(&w), 13);
        let a = Tensor::from_vec(rand_vec(&mut rng, 40), &[2, 5, 4]);
        check_grad(&[4, 3], |x| a.matmul(x), 14);
        let bb = Tensor::from_vec(rand_vec(&mut rng, 24), &[2, 4, 3]);
        check_grad(&[2, 5, 4], |x| x.matmul(&bb), 15);
        check_grad(&[2, 4, 3], |x| a.matmul(x), 16);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = Tensor::from_vec(rand_vec(&mut rng, 3 * 2 * 9), &[3, 2, 3, 3]);
        let b = Tensor::from_vec(rand_vec(&mut rng, 3), &[3]);
        check_grad(&[2, 2, 5, 4], |x| conv2d(x, &w, Some(&b), 1, 1), 18);
        check_grad(&[2, 2, 6, 6], |x| conv2d(x, &w, None, 2, 1), 19);
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 2 * 5 * 5), &[2, 2, 5, 5]);
        check_grad(&[3, 2, 3, 3], |w| conv2d(&x, w, Some(&b), 1, 1), 20);
        let w1 = Tensor::from_vec(rand_vec(&mut rng, 6), &[3, 2, 1, 1]);
        check_grad(&[2, 2, 3, 3], |x| conv2d(x, &w1, Some(&b), 1, 0), 21);
        check_grad(&[3], |b| conv2d(&x, &w, Some(b), 1, 1), 22);
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let gamma = Tensor::from_vec(rand_vec(&mut rng, 4), &[4]);
        let beta = Tensor::from_vec(rand_vec(&mut rng, 4), &[4]);
        check_grad(&[2, 4, 3, 2], |x| group_norm(x, 2, &gamma, &beta, 1e-5), 24);
        check_grad(&[3, 4], |x| layer_norm(x, &gamma, &beta, 1e-5), 25);
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 4 * 6), &[2, 4, 6]);
        check_grad(&[4], |g| group_norm(&x, 2, g, &beta, 1e-5), 26);
        check_grad(&[4], |b| group_norm(&x, 4, &gamma, b, 1e-5), 27);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (n, c, h, w, o) = (1, 2, 5, 6, 3);
        let x = rand_vec(&mut rng, n * c * h * w);
        let k = rand_vec(&mut rng, o * c * 9);
        let y = conv2d(&Tensor::from_vec(x.clone(), &[n, c, h, w]), &Tensor::from_vec(k.clone(), &[o, c, 3, 3]), None, 1, 1);
        for oc in 0..o {
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    s += k[((oc * c + ic) * 3 + di) * 3 + dj] * x[(ic * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(oc * h + i) * w + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn no_grad_drops_history() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]);
        let _g = crate::no_grad();
        let y = x.sqr();
        assert!(!y.requires_grad());
    }
}
