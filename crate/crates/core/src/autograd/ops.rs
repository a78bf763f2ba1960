use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::{numel, strides, Tensor};

/// Gather index that produces a zero instead of reading the source.
pub const PAD: usize = usize::MAX;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    (0..rank)
        .map(|i| {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let natural = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                natural[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let nb = numel(b);
    if a == out && out.ends_with(b) {
        (0..n).for_each(|i| f(i, i, i % nb));
        return;
    }
    let na = numel(a);
    if b == out && out.ends_with(a) {
        (0..n).for_each(|i| f(i, i % na, i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `c[i] += op(a[i]) · op(b[i])` over `batch` row-major matrices. A zero step
/// shares the operand across the batch (or, for `c`, accumulates into it).
#[allow(clippy::too_many_arguments)]
fn gemm(
    batch: usize,
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    a_step: usize,
    ta: bool,
    b: &[f64],
    b_step: usize,
    tb: bool,
    c: &mut [f64],
    c_step: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        let a = &a[i * a_step..i * a_step + m * k];
        let b = &b[i * b_step..i * b_step + k * n];
        let c = &mut c[i * c_step..i * c_step + m * n];
        // SAFETY: the slices above bound every element addressed by the
        // (rows, cols, strides) triples passed to dgemm.
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
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Graph {
    fn binary(&self, a: Var, b: Var, op: Binary) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out_shape = broadcast_shape(av.shape(), bv.shape());
        let mut out = vec![0.0; numel(&out_shape)];
        {
            let (x, y) = (av.data(), bv.data());
            for_each_broadcast(&out_shape, av.shape(), bv.shape(), |i, ia, ib| {
                out[i] = match op {
                    Binary::Add => x[ia] + y[ib],
                    Binary::Sub => x[ia] - y[ib],
                    Binary::Mul => x[ia] * y[ib],
                    Binary::Div => x[ia] / y[ib],
                };
            });
        }
        let value = Rc::new(Tensor::new(out_shape.clone(), out));
        self.push(value, vec![a, b], move |g, needs| {
            let mut ga = needs[0].then(|| vec![0.0; av.len()]);
            let mut gb = needs[1].then(|| vec![0.0; bv.len()]);
            let (x, y, g) = (av.data(), bv.data(), g.data());
            for_each_broadcast(&out_shape, av.shape(), bv.shape(), |i, ia, ib| {
                let (da, db) = match op {
                    Binary::Add => (g[i], g[i]),
                    Binary::Sub => (g[i], -g[i]),
                    Binary::Mul => (g[i] * y[ib], g[i] * x[ia]),
                    Binary::Div => (g[i] / y[ib], -g[i] * x[ia] / (y[ib] * y[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            vec![
                ga.map(|d| Tensor::new(av.shape().to_vec(), d)),
                gb.map(|d| Tensor::new(bv.shape().to_vec(), d)),
            ]
        })
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` returns dy/dx at input `x`, output `y`.
    pub fn unary(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x);
        let yv = Rc::new(xv.map(f));
        let y = Rc::clone(&yv);
        self.push(yv, vec![x], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), d))]
        })
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let yv = Rc::new(self.value_ref(x).map(|v| v * c));
        self.push(yv, vec![x], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let yv = Rc::new(self.value_ref(x).map(|v| v + c));
        self.push(yv, vec![x], |g, _| vec![Some(g.clone())])
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Swish / SiLU: `x · sigmoid(x)`.
    pub fn silu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let yv = Rc::new(Tensor::scalar(xv.sum()));
        self.push(yv, vec![x], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value_ref(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&self, x: Var, axis: usize, keepdim: bool) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let yv = Rc::new(Tensor::new(reduced_shape(&in_shape, axis, keepdim), out));
        self.push(yv, vec![x], move |g, _| {
            let g = g.data();
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx))]
        })
    }

    pub fn mean_axis(&self, x: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.value_ref(x).shape()[axis] as f64;
        let s = self.sum_axis(x, axis, keepdim);
        self.scale(s, 1.0 / n)
    }

    /// Maximum along `axis`; ties resolve to the first maximal element.
    pub fn max_axis(&self, x: Var, axis: usize, keepdim: bool) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        assert!(n > 0, "max over an empty axis");
        let d = xv.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let v = d[(o * n + j) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = (o * n + j) * inner + i;
                    }
                }
            }
        }
        let yv = Rc::new(Tensor::new(reduced_shape(&in_shape, axis, keepdim), out));
        self.push(yv, vec![x], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for (slot, &src) in arg.iter().enumerate() {
                gx[src] += g.data()[slot];
            }
            vec![Some(Tensor::new(in_shape.clone(), gx))]
        })
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let yv = Rc::new(xv.as_ref().clone().reshape(shape));
        self.push(yv, vec![x], move |g, _| {
            vec![Some(g.clone().reshape(in_shape.clone()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let xv = self.value(x);
        let yv = Rc::new(permute_tensor(&xv, perm));
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(yv, vec![x], move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, x: Var) -> Var {
        let r = self.value_ref(x).ndim();
        assert!(r >= 2);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        assert!(start + len <= n, "narrow {start}+{len} exceeds axis length {n}");
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let yv = Rc::new(Tensor::new(out_shape, out));
        self.push(yv, vec![x], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(in_shape.clone(), gx))]
        })
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let values: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let first = values[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let lens: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len());
                assert!(
                    s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                    "concat shape mismatch"
                );
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let yv = Rc::new(Tensor::new(out_shape, out));
        self.push(yv, xs.to_vec(), move |g, needs| {
            let g = g.data();
            let mut offset = 0;
            let mut result = Vec::with_capacity(lens.len());
            for (k, &l) in lens.iter().enumerate() {
                if needs[k] {
                    let mut gx = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + l * inner]);
                    }
                    result.push(Some(Tensor::new(shapes[k].clone(), gx)));
                } else {
                    result.push(None);
                }
                offset += l;
            }
            result
        })
    }

    /// `out[i] = x[index[i]]` over flat storage, with [`PAD`] producing zero.
    pub fn gather(&self, x: Var, index: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        assert_eq!(numel(&shape), index.len());
        let xv = self.value(x);
        let d = xv.data();
        let out = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { d[i] })
            .collect();
        let in_shape = xv.shape().to_vec();
        let n_in = xv.len();
        let yv = Rc::new(Tensor::new(shape, out));
        self.push(yv, vec![x], move |g, _| {
            let mut gx = vec![0.0; n_in];
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != PAD {
                    gx[i] += gv;
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx))]
        })
    }

    /// Matrix product over the last two axes with batch broadcasting.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes the last two axes when its flag is
    /// set. Leading axes are batch axes; a batch of one is shared.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dims differ: {sa:?} x {sb:?}");
        let batch_a = numel(&sa[..sa.len() - 2]);
        let batch_b = numel(&sb[..sb.len() - 2]);
        assert!(
            batch_a == batch_b || batch_a == 1 || batch_b == 1,
            "matmul batch mismatch: {sa:?} x {sb:?}"
        );
        let batch = batch_a.max(batch_b);
        let mut out_shape = if batch_a == batch {
            sa[..sa.len() - 2].to_vec()
        } else {
            sb[..sb.len() - 2].to_vec()
        };
        out_shape.extend([m, n]);
        let step_a = if batch_a == 1 { 0 } else { m * k };
        let step_b = if batch_b == 1 { 0 } else { k * n };
        let mut out = vec![0.0; batch * m * n];
        gemm(
            batch,
            (m, k, n),
            av.data(),
            step_a,
            ta,
            bv.data(),
            step_b,
            tb,
            &mut out,
            m * n,
        );
        let yv = Rc::new(Tensor::new(out_shape, out));
        self.push(yv, vec![a, b], move |g, needs| {
            let g = g.data();
            let mut ga = None;
            let mut gb = None;
            if needs[0] {
                let mut d = vec![0.0; av.len()];
                if ta {
                    // dA (stored k×m) = op(B) · dCᵀ
                    gemm(batch, (k, n, m), bv.data(), step_b, tb, g, m * n, true, &mut d, step_a);
                } else {
                    // dA = dC · op(B)ᵀ
                    gemm(batch, (m, n, k), g, m * n, false, bv.data(), step_b, !tb, &mut d, step_a);
                }
                ga = Some(Tensor::new(sa.clone(), d));
            }
            if needs[1] {
                let mut d = vec![0.0; bv.len()];
                if tb {
                    // dB (stored n×k) = dCᵀ · op(A)
                    gemm(batch, (n, m, k), g, m * n, true, av.data(), step_a, ta, &mut d, step_b);
                } else {
                    // dB = op(A)ᵀ · dC
                    gemm(batch, (k, m, n), av.data(), step_a, !ta, g, m * n, false, &mut d, step_b);
                }
                gb = Some(Tensor::new(sb.clone(), d));
            }
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax on a scalar");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let yv = Rc::new(Tensor::new(xv.shape().to_vec(), out));
        let y = Rc::clone(&yv);
        self.push(yv, vec![x], move |g, _| {
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g
                .data()
                .chunks(n.max(1))
                .zip(y.data().chunks(n.max(1)))
                .zip(gx.chunks_mut(n.max(1)))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), gx))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("log_softmax on a scalar");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let yv = Rc::new(Tensor::new(xv.shape().to_vec(), out));
        let y = Rc::clone(&yv);
        self.push(yv, vec![x], move |g, _| {
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g
                .data()
                .chunks(n.max(1))
                .zip(y.data().chunks(n.max(1)))
                .zip(gx.chunks_mut(n.max(1)))
            {
                let total: f64 = gr.iter().sum();
                for ((o, &gv), &lp) in out.iter_mut().zip(gr).zip(yr) {
                    *o = gv - lp.exp() * total;
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), gx))]
        })
    }

    /// Zero-mean, unit-variance rows over the last axis (layer norm without
    /// the affine part).
    pub fn standardize_last(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("standardize on a scalar");
        let rows = xv.len() / n.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in xv.data().chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let yv = Rc::new(Tensor::new(xv.shape().to_vec(), xhat));
        let y = Rc::clone(&yv);
        self.push(yv, vec![x], move |g, _| {
            let mut gx = vec![0.0; y.len()];
            for (r, ((gr, yr), out)) in g
                .data()
                .chunks(n)
                .zip(y.data().chunks(n))
                .zip(gx.chunks_mut(n))
                .enumerate()
            {
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[r] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), gx))]
        })
    }

    /// Standardizes every last-axis channel over all leading positions (batch
    /// norm statistics). Also returns the per-channel mean and population
    /// variance used.
    pub fn standardize_channels(&self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let c = *xv.shape().last().expect("standardize on a scalar");
        let rows = xv.len() / c.max(1);
        let d = xv.data();
        let mut mean = vec![0.0; c];
        for row in d.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in d.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for (src, dst) in d.chunks(c).zip(xhat.chunks_mut(c)) {
            for j in 0..c {
                dst[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let yv = Rc::new(Tensor::new(xv.shape().to_vec(), xhat));
        let y = Rc::clone(&yv);
        let var_out = var.clone();
        let mean_out = mean.clone();
        let v = self.push(yv, vec![x], move |g, _| {
            let mut mg = vec![0.0; c];
            let mut mgy = vec![0.0; c];
            for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                for j in 0..c {
                    mg[j] += gr[j];
                    mgy[j] += gr[j] * yr[j];
                }
            }
            let nr = rows as f64;
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g.data().chunks(c).zip(y.data().chunks(c)).zip(gx.chunks_mut(c)) {
                for j in 0..c {
                    out[j] = inv_std[j] * (gr[j] - mg[j] / nr - yr[j] * mgy[j] / nr);
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), gx))]
        });
        (v, mean_out, var_out)
    }

    /// Additive angular margin applied to a `[rows, classes]` cosine matrix.
    ///
    /// Cosines are clamped to `[-1 + 1e-7, 1 - 1e-7]` and multiplied by
    /// `scale`. When `targets` is given, the target entry of each row becomes
    /// `scale · cos(θ + margin)`, or `scale · (cos θ − margin · sin margin)`
    /// once `θ > π − margin`.
    pub fn angular_margin(
        &self,
        cosines: Var,
        targets: Option<&[usize]>,
        margin: f64,
        scale: f64,
    ) -> Var {
        const CLAMP: f64 = 1e-7;
        let cv = self.value(cosines);
        assert_eq!(cv.ndim(), 2, "angular_margin expects [rows, classes]");
        let (rows, classes) = (cv.shape()[0], cv.shape()[1]);
        let targets: Option<Vec<usize>> = targets.map(|t| {
            assert_eq!(t.len(), rows);
            assert!(t.iter().all(|&y| y < classes), "target out of range");
            t.to_vec()
        });
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        let threshold = (std::f64::consts::PI - margin).cos();
        let mut out = vec![0.0; rows * classes];
        let mut deriv = vec![0.0; rows * classes];
        for r in 0..rows {
            for j in 0..classes {
                let i = r * classes + j;
                let raw = cv.data()[i];
                let c = raw.clamp(-1.0 + CLAMP, 1.0 - CLAMP);
                let inside = if raw == c { 1.0 } else { 0.0 };
                let is_target = targets.as_ref().is_some_and(|t| t[r] == j);
                let (v, dv) = if !is_target {
                    (c, 1.0)
                } else if c >= threshold {
                    // θ ≤ π − m
                    let s = (1.0 - c * c).sqrt();
                    (c * cos_m - s * sin_m, cos_m + c * sin_m / s)
                } else {
                    (c - margin * sin_m, 1.0)
                };
                out[i] = scale * v;
                deriv[i] = scale * dv * inside;
            }
        }
        let yv = Rc::new(Tensor::new(vec![rows, classes], out));
        self.push(yv, vec![cosines], move |g, _| {
            let d = g.data().iter().zip(&deriv).map(|(a, b)| a * b).collect();
            vec![Some(Tensor::new(vec![rows, classes], d))]
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    assert_eq!(perm.len(), in_shape.len(), "permutation rank mismatch");
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let rank = out_shape.len();
    let d = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(d[off]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            off += step[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= step[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
