//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::graph::Var;
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn same_graph(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.graph, b.graph), "operands recorded on different graphs");
}

// Named arithmetic methods back the operator impls below.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    fn unary(self, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'g> {
        self.graph
            .record(value, &[self.id], move |g, _| vec![Some(backward(g))])
    }

    /// Elementwise map with a derivative computed from the input and output.
    fn pointwise(self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = Rc::clone(&y);
        self.unary((*y).clone(), move |g| {
            let d = x.zip_map(&y_keep, df);
            g.zip_map(&d, |a, b| a * b)
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph
            .record(v, &[self.id, other.id], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.record(v, &[self.id, other.id], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.record(v, &[self.id, other.id], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |u, y| u * y)),
                needs[1].then(|| g.zip_map(&a, |u, x| u * x)),
            ]
        })
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x / y);
        self.graph.record(v, &[self.id, other.id], move |g, needs| {
            let ga = needs[0].then(|| g.zip_map(&b, |u, y| u / y));
            let gb = needs[1].then(|| {
                let mut t = g.zip_map(&a, |u, x| u * x);
                for (t, y) in t.data_mut().iter_mut().zip(b.data()) {
                    *t = -*t / (y * y);
                }
                t
            });
            vec![ga, gb]
        })
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.unary(v, move |g| g.scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, |g| g.clone())
    }

    pub fn relu(self) -> Var<'g> {
        self.pointwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.pointwise(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.pointwise(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(self) -> Var<'g> {
        self.pointwise(softplus, |x, _| sigmoid(x))
    }

    pub fn log_sigmoid(self) -> Var<'g> {
        self.pointwise(log_sigmoid, |x, _| sigmoid(-x))
    }

    pub fn exp(self) -> Var<'g> {
        self.pointwise(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.pointwise(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'g> {
        self.pointwise(|x| x * x, |x, _| 2.0 * x)
    }

    /// Add a vector along the last axis.
    pub fn add_bias(self, bias: Var<'g>) -> Var<'g> {
        same_graph(&self, &bias);
        let x = self.value();
        let b = bias.value();
        let d = x.last_dim();
        assert_eq!(b.numel(), d, "bias length {} vs last dim {d}", b.numel());
        let mut v = (*x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let bshape = b.shape().to_vec();
        self.graph.record(v, &[self.id, bias.id], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (a, r) in acc.iter_mut().zip(row) {
                        *a += r;
                    }
                }
                Tensor::from_vec(&bshape, acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    /// `[.., d] x [d, m] -> [.., m]`, treating all leading axes as rows.
    pub fn matmul(self, w: Var<'g>) -> Var<'g> {
        same_graph(&self, &w);
        let x = self.value();
        let wv = w.value();
        assert_eq!(wv.ndim(), 2, "matmul weight must be 2-D");
        let (d, m) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(x.last_dim(), d, "matmul inner dims {:?} x {:?}", x.shape(), wv.shape());
        let rows = x.rows();
        let mut out = vec![0.0; rows * m];
        kernels::gemm(rows, d, m, x.data(), false, wv.data(), false, &mut out, 0.0);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let xshape = x.shape().to_vec();
        self.graph
            .record(Tensor::from_vec(&shape, out), &[self.id, w.id], move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * d];
                    kernels::gemm(rows, m, d, g.data(), false, wv.data(), true, &mut gx, 0.0);
                    Tensor::from_vec(&xshape, gx)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; d * m];
                    kernels::gemm(d, rows, m, x.data(), true, g.data(), false, &mut gw, 0.0);
                    Tensor::from_vec(&[d, m], gw)
                });
                vec![gx, gw]
            })
    }

    /// 2-D convolution: input NHWC, kernel `[kh, kw, c_in, c_out]`.
    pub fn conv2d(self, kernel: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: Padding) -> Var<'g> {
        same_graph(&self, &kernel);
        let x = self.value();
        let k = kernel.value();
        assert_eq!(x.ndim(), 4, "conv2d input must be NHWC, got {:?}", x.shape());
        assert_eq!(k.ndim(), 4, "conv2d kernel must be HWIO, got {:?}", k.shape());
        let xs = x.shape();
        let ks = k.shape();
        let geom = ConvGeom::new(
            [xs[0], xs[1], xs[2], xs[3]],
            [ks[0], ks[1], ks[2], ks[3]],
            stride,
            padding,
        )
        .unwrap_or_else(|| panic!("conv2d geometry invalid: input {xs:?}, kernel {ks:?}"));
        let (rows, plen, oc) = (geom.out_rows(), geom.patch_len(), geom.out_c);
        let mut out = vec![0.0; rows * oc];
        if geom.is_pointwise() {
            kernels::gemm(rows, plen, oc, x.data(), false, k.data(), false, &mut out, 0.0);
        } else {
            let col = kernels::im2col(x.data(), &geom);
            kernels::gemm(rows, plen, oc, &col, false, k.data(), false, &mut out, 0.0);
        }
        let y = Tensor::from_vec(&[geom.n, geom.oh, geom.ow, oc], out);
        let y = self.graph.record(y, &[self.id, kernel.id], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gcol = vec![0.0; rows * plen];
                kernels::gemm(rows, oc, plen, g.data(), false, k.data(), true, &mut gcol, 0.0);
                let gx = if geom.is_pointwise() {
                    gcol
                } else {
                    kernels::col2im(&gcol, &geom)
                };
                Tensor::from_vec(&[geom.n, geom.h, geom.w, geom.c], gx)
            });
            let gk = needs[1].then(|| {
                let mut gk = vec![0.0; plen * oc];
                if geom.is_pointwise() {
                    kernels::gemm(plen, rows, oc, x.data(), true, g.data(), false, &mut gk, 0.0);
                } else {
                    let col = kernels::im2col(x.data(), &geom);
                    kernels::gemm(plen, rows, oc, &col, true, g.data(), false, &mut gk, 0.0);
                }
                Tensor::from_vec(&[geom.kh, geom.kw, geom.c, oc], gk)
            });
            vec![gx, gk]
        });
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    fn permute_with(self, map: Vec<usize>, out_shape: Vec<usize>) -> Var<'g> {
        let x = self.value();
        let v = Tensor::from_vec(&out_shape, kernels::gather(x.data(), &map));
        let in_shape = x.shape().to_vec();
        let len = x.numel();
        self.unary(v, move |g| {
            Tensor::from_vec(&in_shape, kernels::scatter(g.data(), &map, len))
        })
    }

    /// `[n, h, w, c] -> [n, h/k, w/k, c*k*k]`.
    pub fn space_to_depth(self, k: usize) -> Var<'g> {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[1].is_multiple_of(k) && s[2].is_multiple_of(k),
            "space_to_depth({k}) on {s:?}"
        );
        let map = kernels::space_to_depth_map(s[0], s[1], s[2], s[3], k);
        self.permute_with(map, vec![s[0], s[1] / k, s[2] / k, s[3] * k * k])
    }

    /// `[n, h, w, c] -> [n, h*k, w*k, c/(k*k)]`; inverse of [`Var::space_to_depth`].
    pub fn depth_to_space(self, k: usize) -> Var<'g> {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[3].is_multiple_of(k * k),
            "depth_to_space({k}) on {s:?}"
        );
        let (n, oh, ow, oc) = (s[0], s[1] * k, s[2] * k, s[3] / (k * k));
        // Inverse of the forward map of the output-shaped space_to_depth.
        let fwd = kernels::space_to_depth_map(n, oh, ow, oc, k);
        let mut map = vec![0; fwd.len()];
        for (i, &j) in fwd.iter().enumerate() {
            map[j] = i;
        }
        self.permute_with(map, vec![n, oh, ow, oc])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let v = (*x).clone().reshape(shape);
        self.unary(v, move |g| g.clone().reshape(&in_shape))
    }

    /// Flatten all but the first axis.
    pub fn flatten(self) -> Var<'g> {
        let s = self.shape();
        let inner = s[1..].iter().product();
        self.reshape(&[s[0], inner])
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].ndim() - 1];
        for v in &values {
            assert_eq!(&v.shape()[..v.ndim() - 1], lead, "concat_last leading shape mismatch");
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = values[0].rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.record(Tensor::from_vec(&shape, out), &ids, move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for ((&w, shape), &need) in widths.iter().zip(&shapes).zip(needs) {
                if need {
                    let mut gi = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let base = r * total + offset;
                        gi.extend_from_slice(&g.data()[base..base + w]);
                    }
                    grads.push(Some(Tensor::from_vec(shape, gi)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        })
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let d = x.last_dim();
        assert!(start + len <= d, "narrow_last({start}, {len}) of width {d}");
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let in_shape = x.shape().to_vec();
        self.unary(Tensor::from_vec(&shape, out), move |g| {
            let mut gx = vec![0.0; rows * d];
            for r in 0..rows {
                gx[r * d + start..r * d + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            Tensor::from_vec(&in_shape, gx)
        })
    }

    /// Concatenate along axis 0.
    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat_rows(&refs);
        let counts: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.record(out, &ids, move |g, needs| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(counts.len());
            for (&c, &need) in counts.iter().zip(needs) {
                grads.push(need.then(|| g.narrow_rows(start, c)));
                start += c;
            }
            grads
        })
    }

    /// Slice `[start, start+len)` of axis 0.
    pub fn narrow_rows(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let v = x.narrow_rows(start, len);
        let in_shape = x.shape().to_vec();
        let inner: usize = in_shape[1..].iter().product();
        self.unary(v, move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            gx
        })
    }

    /// Repeat each row `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Var<'g> {
        let x = self.value();
        let v = x.repeat_rows(times);
        let in_shape = x.shape().to_vec();
        let inner: usize = in_shape[1..].iter().product();
        self.unary(v, move |g| {
            let mut gx = vec![0.0; in_shape[0] * inner];
            for (r, chunk) in g.data().chunks(inner * times).enumerate() {
                for rep in chunk.chunks(inner) {
                    for (a, b) in gx[r * inner..(r + 1) * inner].iter_mut().zip(rep) {
                        *a += b;
                    }
                }
            }
            Tensor::from_vec(&in_shape, gx)
        })
    }

    /// `[n, d] -> [n, h, w, d]`, every spatial position a copy of the row.
    pub fn tile_spatial(self, h: usize, w: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "tile_spatial expects [n, d], got {:?}", x.shape());
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(n * h * w * d);
        for row in x.data().chunks(d.max(1)) {
            for _ in 0..h * w {
                out.extend_from_slice(row);
            }
        }
        self.unary(Tensor::from_vec(&[n, h, w, d], out), move |g| {
            let mut gx = vec![0.0; n * d];
            for (b, img) in g.data().chunks(h * w * d).enumerate() {
                for px in img.chunks(d) {
                    for (a, v) in gx[b * d..(b + 1) * d].iter_mut().zip(px) {
                        *a += v;
                    }
                }
            }
            Tensor::from_vec(&[n, d], gx)
        })
    }

    /// Per-channel maximum over the spatial axes: `[n, h, w, c] -> [n, c]`.
    /// The gradient goes to the first position attaining the maximum.
    pub fn max_spatial(self) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "max_spatial expects NHWC");
        let s = x.shape().to_vec();
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut arg = vec![0usize; n * c];
        for b in 0..n {
            for p in 0..hw {
                let base = (b * hw + p) * c;
                for ch in 0..c {
                    let v = x.data()[base + ch];
                    if v > out[b * c + ch] {
                        out[b * c + ch] = v;
                        arg[b * c + ch] = base + ch;
                    }
                }
            }
        }
        let len = x.numel();
        self.unary(Tensor::from_vec(&[n, c], out), move |g| {
            let mut gx = vec![0.0; len];
            for (&i, &v) in arg.iter().zip(g.data()) {
                gx[i] += v;
            }
            Tensor::from_vec(&s, gx)
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over every axis but the first: `[n, ...] -> [n]`.
    pub fn sum_rows(self) -> Var<'g> {
        let x = self.value();
        let n = x.shape()[0];
        let inner = x.numel() / n.max(1);
        let out: Vec<f64> = x.data().chunks(inner.max(1)).map(|c| c.iter().sum()).collect();
        let shape = x.shape().to_vec();
        self.unary(Tensor::from_vec(&[n], out), move |g| {
            let mut gx = Vec::with_capacity(n * inner);
            for &v in g.data() {
                gx.extend(std::iter::repeat_n(v, inner));
            }
            Tensor::from_vec(&shape, gx)
        })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Var<'g> {
        let x = self.value();
        let d = x.last_dim();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let y = Rc::new(out);
        let yk = Rc::clone(&y);
        self.unary((*y).clone(), move |g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(yk.data().chunks(d)) {
                let s: f64 = grow.iter().sum();
                for (gv, yv) in grow.iter_mut().zip(yrow) {
                    *gv -= yv.exp() * s;
                }
            }
            gx
        })
    }

    pub fn softmax(self) -> Var<'g> {
        self.log_softmax().exp()
    }

    /// `[n, d]` -> `[n]` picking column `idx[i]` of row `i`.
    pub fn pick(self, idx: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "pick expects [n, d]");
        let (n, d) = (x.shape()[0], x.shape()[1]);
        assert_eq!(idx.len(), n, "pick index count");
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| x.data()[r * d + i]).collect();
        let idx = idx.to_vec();
        self.unary(Tensor::from_vec(&[n], out), move |g| {
            let mut gx = vec![0.0; n * d];
            for (r, &i) in idx.iter().enumerate() {
                gx[r * d + i] = g.data()[r];
            }
            Tensor::from_vec(&[n, d], gx)
        })
    }

    /// Per-row Bernoulli log-likelihood of (soft) targets `p` under
    /// `sigmoid(self)`: `sum p ln q + (1 - p) ln(1 - q)` over every axis but
    /// the first. Returns `[n]`.
    pub fn bernoulli_log_prob(self, targets: &Tensor) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "bernoulli_log_prob shape mismatch");
        let n = x.shape()[0];
        let inner = x.numel() / n.max(1);
        let mut out = vec![0.0; n];
        for (r, o) in out.iter_mut().enumerate() {
            let xs = &x.data()[r * inner..(r + 1) * inner];
            let ps = &targets.data()[r * inner..(r + 1) * inner];
            *o = xs
                .iter()
                .zip(ps)
                .map(|(&l, &p)| p * log_sigmoid(l) + (1.0 - p) * log_sigmoid(-l))
                .sum();
        }
        let t = targets.clone();
        self.unary(Tensor::from_vec(&[n], out), move |g| {
            let mut gx = Vec::with_capacity(n * inner);
            for r in 0..n {
                let gr = g.data()[r];
                let xs = &x.data()[r * inner..(r + 1) * inner];
                let ps = &t.data()[r * inner..(r + 1) * inner];
                gx.extend(xs.iter().zip(ps).map(|(&l, &p)| gr * (p - sigmoid(l))));
            }
            Tensor::from_vec(x.shape(), gx)
        })
    }
}

macro_rules! impl_binop {
    ($tr:ident, $method:ident, $inner:ident) => {
        impl<'g> std::ops::$tr for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                Var::$inner(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}
