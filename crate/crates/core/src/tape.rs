//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding the forward value and a backward
//! closure. Nodes are created in topological order, so a single reverse sweep
//! from the loss accumulates gradients into every leaf. Leaves are registered
//! with [`Tape::leaf`]; which of them are trainable is the caller's concern.
//!
//! A tape built with [`Tape::no_grad`] computes the same forward values but
//! stores no backward closures.

// kernels below index several buffers with one loop variable
#![allow(clippy::needless_range_loop)]

use crate::tensor::{self, Tensor};
use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut dyn FnMut(usize, Tensor))>;

pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Option<BackFn>>,
    grad_enabled: bool,
}

/// Registers model tensors as tape leaves once per step and remembers
/// which of them are trainable, in registration order.
#[derive(Default)]
pub struct ParamRegistry {
    entries: Vec<(String, Var)>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Tensor, trainable: bool) -> Var {
        let v = tape.leaf(value.clone());
        if trainable {
            self.entries.push((name.to_string(), v));
        }
        v
    }

    pub fn trainable(&self) -> &[(String, Var)] {
        &self.entries
    }
}

/// Gradients indexed by tape variable, produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape; backward closures are not recorded.
    pub fn no_grad() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.nodes.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, back: BackFn) -> Var {
        self.values.push(value);
        self.nodes
            .push(if self.grad_enabled { Some(back) } else { None });
        Var(self.values.len() - 1)
    }

    /// Reverse sweep from a scalar root. Leaf gradients stay resident and can
    /// be read out of the returned [`Grads`]; interior gradients are dropped
    /// as soon as they have been propagated.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.values[root.0].numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[id] {
                let g = grads[id].take().unwrap();
                let mut sink = |pid: usize, t: Tensor| match &mut grads[pid] {
                    Some(acc) => acc.axpy(1.0, &t),
                    slot @ None => *slot = Some(t),
                };
                back(&self.values, &g, &mut sink);
            }
        }
        Grads(grads)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = ta.clone();
        out.axpy(1.0, tb);
        self.push(
            out,
            Box::new(move |_, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let mut out = ta.clone();
        out.axpy(-1.0, tb);
        self.push(
            out,
            Box::new(move |_, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.map(|v| -v));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let mut da = g.clone();
                for (x, y) in da.data_mut().iter_mut().zip(vals[b.0].data()) {
                    *x *= y;
                }
                let mut db = g.clone();
                for (x, y) in db.data_mut().iter_mut().zip(vals[a.0].data()) {
                    *x *= y;
                }
                sink(a.0, da);
                sink(b.0, db);
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].map(|v| v * c);
        self.push(out, Box::new(move |_, g, sink| sink(a.0, g.map(|v| v * c))))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].map(|v| v + c);
        self.push(out, Box::new(move |_, g, sink| sink(a.0, g.clone())))
    }

    /// Broadcast-add a length-C bias to every row of an R×C matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let tx = &self.values[x.0];
        let tb = &self.values[bias.0];
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tb.numel(), c, "bias length mismatch");
        let mut out = tx.clone();
        for i in 0..r {
            for j in 0..c {
                let v = out.at2(i, j) + tb.data()[j];
                out.set2(i, j, v);
            }
        }
        self.push(
            out,
            Box::new(move |_, g, sink| {
                sink(x.0, g.clone());
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g.at2(i, j);
                    }
                }
                sink(bias.0, Tensor::new([c], db));
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.values[x.0].data().iter().sum();
        let shape = self.values[x.0].shape().to_vec();
        self.push(
            Tensor::scalar(s),
            Box::new(move |_, g, sink| sink(x.0, Tensor::filled(shape.clone(), g.item()))),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(&self.values[a.0], &self.values[b.0]);
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                sink(a.0, tensor::matmul_nt(g, &vals[b.0]));
                sink(b.0, tensor::matmul_tn(&vals[a.0], g));
            }),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = tensor::transpose(&self.values[x.0]);
        self.push(
            out,
            Box::new(move |_, g, sink| sink(x.0, tensor::transpose(g))),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let out = self.values[x.0].reshaped(shape);
        let orig = self.values[x.0].shape().to_vec();
        self.push(
            out,
            Box::new(move |_, g, sink| sink(x.0, g.reshaped(orig.clone()))),
        )
    }

    // ---- nonlinearities ----

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros([r, c]);
        for i in 0..r {
            let row = tx.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out.set2(i, j, e);
                sum += e;
            }
            for j in 0..c {
                let v = out.at2(i, j) / sum;
                out.set2(i, j, v);
            }
        }
        let out_id = self.values.len();
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let s = &vals[out_id];
                let mut dx = Tensor::zeros([r, c]);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g.at2(i, j) * s.at2(i, j)).sum();
                    for j in 0..c {
                        dx.set2(i, j, s.at2(i, j) * (g.at2(i, j) - dot));
                    }
                }
                sink(x.0, dx);
            }),
        )
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = &self.values[x.0];
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(self.values[gamma.0].numel(), c);
        assert_eq!(self.values[beta.0].numel(), c);
        let tg = self.values[gamma.0].data().to_vec();
        let tb = self.values[beta.0].data().to_vec();
        let mut out = Tensor::zeros([r, c]);
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out.set2(i, j, tg[j] * (row[j] - mean) * inv + tb[j]);
            }
        }
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let tx = &vals[x.0];
                let tg = vals[gamma.0].data();
                let mut dx = Tensor::zeros([r, c]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = tx.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> = (0..c).map(|j| g.at2(i, j) * tg[j]).collect();
                    let mean_gg = gg.iter().sum::<f64>() / c as f64;
                    let mean_ggx = gg
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        dx.set2(i, j, inv * (gg[j] - mean_gg - xhat[j] * mean_ggx));
                        dgamma[j] += g.at2(i, j) * xhat[j];
                        dbeta[j] += g.at2(i, j);
                    }
                }
                sink(x.0, dx);
                sink(gamma.0, Tensor::new([c], dgamma));
                sink(beta.0, Tensor::new([c], dbeta));
            }),
        )
    }

    /// GELU via the tanh approximation; the backward pass differentiates the
    /// approximation itself, so gradient checks are exact.
    pub fn gelu(&mut self, x: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let out = self.values[x.0].map(|v| {
            let u = C * (v + A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(vals[x.0].data()) {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * v * v);
                    *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                }
                sink(x.0, dx);
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.values[x.0].map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(vals[x.0].data()) {
                    if v < 0.0 {
                        *d *= slope;
                    }
                }
                sink(x.0, dx);
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| 1.0 / (1.0 + (-v).exp()));
        let out_id = self.values.len();
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let s = &vals[out_id];
                let mut dx = g.clone();
                for (d, &sv) in dx.data_mut().iter_mut().zip(s.data()) {
                    *d *= sv * (1.0 - sv);
                }
                sink(x.0, dx);
            }),
        )
    }

    /// Inverted dropout; `p == 0` is a pass-through.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep = 1.0 - p;
        let n = self.values[x.0].numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng.next_u64() as f64 / u64::MAX as f64;
                if u < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.values[x.0].clone();
        for (v, m) in out.data_mut().iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        self.push(
            out,
            Box::new(move |_, g, sink| {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                    *d *= m;
                }
                sink(x.0, dx);
            }),
        )
    }

    // ---- layout ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.values[parts[0].0].cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.values[p.0];
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            row_counts.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let total: usize = row_counts.iter().sum();
        let out = Tensor::new([total, c], data);
        let parts = parts.to_vec();
        self.push(
            out,
            Box::new(move |_, g, sink| {
                let mut start = 0;
                for (p, &rc) in parts.iter().zip(row_counts.iter()) {
                    let slice = g.data()[start * c..(start + rc) * c].to_vec();
                    sink(p.0, Tensor::new([rc, c], slice));
                    start += rc;
                }
            }),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.values[x.0];
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start + len <= r, "slice_rows out of range");
        let out = Tensor::new([len, c], tx.data()[start * c..(start + len) * c].to_vec());
        self.push(
            out,
            Box::new(move |_, g, sink| {
                let mut dx = Tensor::zeros([r, c]);
                dx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                sink(x.0, dx);
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.values[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros([r, total]);
        let mut off = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            let t = &self.values[p.0];
            assert_eq!(t.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                for j in 0..w {
                    out.set2(i, off + j, t.at2(i, j));
                }
            }
            off += w;
        }
        let parts = parts.to_vec();
        self.push(
            out,
            Box::new(move |_, g, sink| {
                let mut off = 0;
                for (p, &w) in parts.iter().zip(widths.iter()) {
                    let mut dp = Tensor::zeros([r, w]);
                    for i in 0..r {
                        for j in 0..w {
                            dp.set2(i, j, g.at2(i, off + j));
                        }
                    }
                    sink(p.0, dp);
                    off += w;
                }
            }),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.values[x.0];
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Tensor::zeros([r, len]);
        for i in 0..r {
            for j in 0..len {
                out.set2(i, j, tx.at2(i, start + j));
            }
        }
        self.push(
            out,
            Box::new(move |_, g, sink| {
                let mut dx = Tensor::zeros([r, c]);
                for i in 0..r {
                    for j in 0..len {
                        dx.set2(i, start + j, g.at2(i, j));
                    }
                }
                sink(x.0, dx);
            }),
        )
    }

    // ---- spatial ops over [C, H, W] maps ----

    /// Stride-1 convolution with square kernel and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let tx = &self.values[x.0];
        let tw = &self.values[w.0];
        let (cin, h, wd) = chw(tx);
        let ws = tw.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,k,k]");
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[3], k);
        assert_eq!(wcin, cin, "conv channel mismatch");
        assert_eq!(self.values[b.0].numel(), cout);
        let tb = self.values[b.0].data().to_vec();
        let mut out = Tensor::zeros([cout, h, wd]);
        {
            let od = out.data_mut();
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = tb[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                let sy = y as isize + ky as isize - pad as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let sx = xx as isize + kx as isize - pad as isize;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += tw.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * tx.data()[(ci * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        od[(co * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let tx = &vals[x.0];
                let tw = &vals[w.0];
                let mut dx = Tensor::zeros([cin, h, wd]);
                let mut dw = Tensor::zeros([cout, cin, k, k]);
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for y in 0..h {
                        for xx in 0..wd {
                            let gv = g.data()[(co * h + y) * wd + xx];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ci in 0..cin {
                                for ky in 0..k {
                                    let sy = y as isize + ky as isize - pad as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let sx = xx as isize + kx as isize - pad as isize;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + sy as usize) * wd + sx as usize;
                                        let wi = ((co * cin + ci) * k + ky) * k + kx;
                                        dx.data_mut()[xi] += gv * tw.data()[wi];
                                        dw.data_mut()[wi] += gv * tx.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                sink(x.0, dx);
                sink(w.0, dw);
                sink(b.0, Tensor::new([cout], db));
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of a [C, H, W] map.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        let (c, h, w) = chw(tx);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([c, oh, ow]);
        {
            let od = out.data_mut();
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        od[(ci * oh + y) * ow + xx] = tx.data()[(ci * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |_, g, sink| {
                let mut dx = Tensor::zeros([c, h, w]);
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx.data_mut()[(ci * h + y / 2) * w + xx / 2] +=
                                g.data()[(ci * oh + y) * ow + xx];
                        }
                    }
                }
                sink(x.0, dx);
            }),
        )
    }

    /// Bilinear resize of a [C, H, W] map (half-pixel centers). Identity when
    /// the target equals the source resolution.
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let tx = &self.values[x.0];
        let (c, h, w) = chw(tx);
        // (src index, weight) pairs per output coordinate
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                        .clamp(0.0, (n_in - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let ty = taps(h, oh);
        let txx = taps(w, ow);
        let mut out = Tensor::zeros([c, oh, ow]);
        {
            let od = out.data_mut();
            for ci in 0..c {
                for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (xo, &(x0, x1, wx)) in txx.iter().enumerate() {
                        let v00 = tx.data()[(ci * h + y0) * w + x0];
                        let v01 = tx.data()[(ci * h + y0) * w + x1];
                        let v10 = tx.data()[(ci * h + y1) * w + x0];
                        let v11 = tx.data()[(ci * h + y1) * w + x1];
                        od[(ci * oh + y) * ow + xo] = v00 * (1.0 - wy) * (1.0 - wx)
                            + v01 * (1.0 - wy) * wx
                            + v10 * wy * (1.0 - wx)
                            + v11 * wy * wx;
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |_, g, sink| {
                let mut dx = Tensor::zeros([c, h, w]);
                for ci in 0..c {
                    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (xo, &(x0, x1, wx)) in txx.iter().enumerate() {
                            let gv = g.data()[(ci * oh + y) * ow + xo];
                            dx.data_mut()[(ci * h + y0) * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dx.data_mut()[(ci * h + y0) * w + x1] += gv * (1.0 - wy) * wx;
                            dx.data_mut()[(ci * h + y1) * w + x0] += gv * wy * (1.0 - wx);
                            dx.data_mut()[(ci * h + y1) * w + x1] += gv * wy * wx;
                        }
                    }
                }
                sink(x.0, dx);
            }),
        )
    }

    /// Batch normalization over the spatial extent of a [C, H, W] map using
    /// the map's own statistics. Returns the per-channel (mean, var) so the
    /// caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> (Var, (Vec<f64>, Vec<f64>)) {
        let tx = &self.values[x.0];
        let (c, h, w) = chw(tx);
        let n = (h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let plane = &tx.data()[ci * h * w..(ci + 1) * h * w];
            mean[ci] = plane.iter().sum::<f64>() / n;
            var[ci] = plane.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>() / n;
        }
        let out = bn_forward(tx, self.values[gamma.0].data(), self.values[beta.0].data(), &mean, &var);
        let (bm, bv) = (mean.clone(), var.clone());
        let v = self.push(
            out,
            Box::new(move |vals, g, sink| {
                let tx = &vals[x.0];
                let tg = vals[gamma.0].data();
                let mut dx = Tensor::zeros([c, h, w]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ci in 0..c {
                    let inv = 1.0 / (bv[ci] + BN_EPS).sqrt();
                    let plane = &tx.data()[ci * h * w..(ci + 1) * h * w];
                    let gp = &g.data()[ci * h * w..(ci + 1) * h * w];
                    let xhat: Vec<f64> = plane.iter().map(|v| (v - bm[ci]) * inv).collect();
                    let mean_g = gp.iter().sum::<f64>() / n;
                    let mean_gx = gp
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n;
                    for i in 0..(h * w) {
                        dx.data_mut()[ci * h * w + i] =
                            tg[ci] * inv * (gp[i] - mean_g - xhat[i] * mean_gx);
                        dgamma[ci] += gp[i] * xhat[i];
                        dbeta[ci] += gp[i];
                    }
                }
                sink(x.0, dx);
                sink(gamma.0, Tensor::new([c], dgamma));
                sink(beta.0, Tensor::new([c], dbeta));
            }),
        );
        (v, (mean, var))
    }

    /// Batch normalization against externally supplied (frozen) statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        let tx = &self.values[x.0];
        let (c, h, w) = chw(tx);
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let out = bn_forward(tx, self.values[gamma.0].data(), self.values[beta.0].data(), mean, var);
        let (fm, fv) = (mean.to_vec(), var.to_vec());
        self.push(
            out,
            Box::new(move |vals, g, sink| {
                let tx = &vals[x.0];
                let tg = vals[gamma.0].data();
                let mut dx = Tensor::zeros([c, h, w]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ci in 0..c {
                    let inv = 1.0 / (fv[ci] + BN_EPS).sqrt();
                    for i in 0..(h * w) {
                        let idx = ci * h * w + i;
                        let gv = g.data()[idx];
                        dx.data_mut()[idx] = gv * tg[ci] * inv;
                        dgamma[ci] += gv * (tx.data()[idx] - fm[ci]) * inv;
                        dbeta[ci] += gv;
                    }
                }
                sink(x.0, dx);
                sink(gamma.0, Tensor::new([c], dgamma));
                sink(beta.0, Tensor::new([c], dbeta));
            }),
        )
    }

    /// Custom single-input operation supplied with an analytic backward pass:
    /// `back(parent_value, upstream_grad) -> parent_grad`.
    pub fn unary_custom(
        &mut self,
        parent: Var,
        value: Tensor,
        back: impl Fn(&Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var {
        self.push(
            value,
            Box::new(move |vals, g, sink| sink(parent.0, back(&vals[parent.0], g))),
        )
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [C,H,W], got {:?}", s);
    (s[0], s[1], s[2])
}

fn bn_forward(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Tensor {
    let (c, h, w) = chw(x);
    let mut out = Tensor::zeros([c, h, w]);
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + BN_EPS).sqrt();
        for i in 0..(h * w) {
            let idx = ci * h * w + i;
            out.data_mut()[idx] = gamma[ci] * (x.data()[idx] - mean[ci]) * inv + beta[ci];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check, rel_err};
    use rand_chacha::rand_core::SeedableRng;

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.next_u64() as f64 / u64::MAX as f64 * 2.0 - 1.0)
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = rng_tensor(&[3, 4], 1);
        let b = rng_tensor(&[4, 2], 2);
        fd_check(
            &[a, b],
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1]);
                tape.sum_all(c)
            },
            1e-7,
        );
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let a = rng_tensor(&[2, 3], 3);
        let b = rng_tensor(&[2, 3], 4);
        fd_check(
            &[a, b],
            |tape, vars| {
                let s = tape.mul(vars[0], vars[1]);
                let s = tape.add(s, vars[0]);
                let s = tape.sub(s, vars[1]);
                let s = tape.scale(s, 1.7);
                let s = tape.add_scalar(s, 0.3);
                tape.sum_all(s)
            },
            1e-7,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradcheck() {
        let x = rng_tensor(&[3, 5], 5);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = tape.softmax_rows(v);
        for i in 0..3 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // weighted sum so gradient is not trivially zero
        let w = rng_tensor(&[3, 5], 6);
        fd_check(
            &[x],
            move |tape, vars| {
                let s = tape.softmax_rows(vars[0]);
                let wv = tape.leaf(w.clone());
                let p = tape.mul(s, wv);
                tape.sum_all(p)
            },
            1e-7,
        );
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = rng_tensor(&[1, 6], 9);
        let shifted = x.map(|v| v + 3.25);
        let mut tape = Tape::no_grad();
        let a = tape.leaf(x);
        let b = tape.leaf(shifted);
        let sa = tape.softmax_rows(a);
        let sb = tape.softmax_rows(b);
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-6);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let x = rng_tensor(&[3, 4], 7);
        let gamma = rng_tensor(&[4], 8).map(|v| v + 1.5);
        let beta = rng_tensor(&[4], 9);
        let w = rng_tensor(&[3, 4], 10);
        fd_check(
            &[x, gamma, beta],
            move |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2]);
                let wv = tape.leaf(w.clone());
                let p = tape.mul(y, wv);
                tape.sum_all(p)
            },
            1e-6,
        );
    }

    #[test]
    fn nonlinearity_gradchecks() {
        let x = rng_tensor(&[2, 6], 11);
        fd_check(
            std::slice::from_ref(&x),
            |tape, vars| {
                let y = tape.gelu(vars[0]);
                tape.sum_all(y)
            },
            1e-7,
        );
        fd_check(
            std::slice::from_ref(&x),
            |tape, vars| {
                let y = tape.sigmoid(vars[0]);
                tape.sum_all(y)
            },
            1e-7,
        );
        // keep inputs away from the kink
        let far = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        fd_check(
            &[far],
            |tape, vars| {
                let y = tape.leaky_relu(vars[0], 0.01);
                tape.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_gradcheck_3x3_and_1x1() {
        let x = rng_tensor(&[2, 4, 4], 12);
        let w3 = rng_tensor(&[3, 2, 3, 3], 13);
        let b3 = rng_tensor(&[3], 14);
        fd_check(
            &[x.clone(), w3, b3],
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 1);
                tape.sum_all(y)
            },
            1e-6,
        );
        let w1 = rng_tensor(&[1, 2, 1, 1], 15);
        let b1 = rng_tensor(&[1], 16);
        fd_check(
            &[x, w1, b1],
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 0);
                tape.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn upsample_and_bilinear_gradcheck() {
        let x = rng_tensor(&[2, 3, 3], 17);
        fd_check(
            std::slice::from_ref(&x),
            |tape, vars| {
                let y = tape.upsample2x(vars[0]);
                tape.sum_all(y)
            },
            1e-7,
        );
        let w = rng_tensor(&[2, 7, 5], 18);
        fd_check(
            &[x],
            move |tape, vars| {
                let y = tape.bilinear(vars[0], 7, 5);
                let wv = tape.leaf(w.clone());
                let p = tape.mul(y, wv);
                tape.sum_all(p)
            },
            1e-6,
        );
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = rng_tensor(&[1, 5, 4], 19);
        let mut tape = Tape::no_grad();
        let v = tape.leaf(x.clone());
        let y = tape.bilinear(v, 5, 4);
        assert!(tape.value(y).max_abs_diff(&x.reshaped([1, 5, 4])) < 1e-12);
    }

    #[test]
    fn batch_norm_gradchecks() {
        let x = rng_tensor(&[2, 3, 3], 20);
        let gamma = rng_tensor(&[2], 21).map(|v| v + 1.5);
        let beta = rng_tensor(&[2], 22);
        fd_check(
            &[x.clone(), gamma.clone(), beta.clone()],
            |tape, vars| {
                let (y, _) = tape.batch_norm_train(vars[0], vars[1], vars[2]);
                let s = tape.gelu(y);
                tape.sum_all(s)
            },
            1e-6,
        );
        fd_check(
            &[x, gamma, beta],
            |tape, vars| {
                let y = tape.batch_norm_frozen(vars[0], vars[1], vars[2], &[0.1, -0.2], &[0.9, 1.3]);
                let s = tape.gelu(y);
                tape.sum_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn layout_ops_gradcheck() {
        let a = rng_tensor(&[2, 3], 23);
        let b = rng_tensor(&[4, 3], 24);
        fd_check(
            &[a.clone(), b.clone()],
            |tape, vars| {
                let c = tape.concat_rows(&[vars[0], vars[1]]);
                let s = tape.slice_rows(c, 1, 3);
                let g = tape.gelu(s);
                tape.sum_all(g)
            },
            1e-6,
        );
        let d = rng_tensor(&[4, 2], 27);
        fd_check(
            &[a, d],
            |tape, vars| {
                let t = tape.transpose(vars[1]);
                let c = tape.concat_cols(&[vars[0], t]);
                let s = tape.slice_cols(c, 2, 4);
                let g = tape.gelu(s);
                tape.sum_all(g)
            },
            1e-6,
        );
    }

    #[test]
    fn add_row_bias_gradcheck() {
        let x = rng_tensor(&[3, 4], 25);
        let b = rng_tensor(&[4], 26);
        fd_check(
            &[x, b],
            |tape, vars| {
                let y = tape.add_row(vars[0], vars[1]);
                let g = tape.gelu(y);
                tape.sum_all(g)
            },
            1e-6,
        );
    }

    #[test]
    fn dropout_deterministic_and_scaled() {
        let x = Tensor::filled([64, 4], 1.0);
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let v1 = t1.leaf(x.clone());
        let v2 = t2.leaf(x.clone());
        let d1 = t1.dropout(v1, 0.25, &mut r1);
        let d2 = t2.dropout(v2, 0.25, &mut r2);
        assert_eq!(t1.value(d1), t2.value(d2));
        let mean: f64 =
            t1.value(d1).data().iter().sum::<f64>() / t1.value(d1).numel() as f64;
        assert!(rel_err(mean, 1.0) < 0.25, "mean {mean} too far from 1");
        // p = 0 passes straight through
        let mut t3 = Tape::new();
        let v3 = t3.leaf(x.clone());
        let d3 = t3.dropout(v3, 0.0, &mut r1);
        assert_eq!(d3, v3);
    }

    #[test]
    fn backward_accumulates_through_shared_subexpressions() {
        // f = sum(x*x + x) => df/dx = 2x + 1
        let x = Tensor::new([2], vec![1.5, -0.5]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v);
        let s = tape.add(sq, v);
        let root = tape.sum_all(s);
        let grads = tape.backward(root);
        let g = grads.wrt(v).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-12);
        assert!((g.data()[1] - 0.0).abs() < 1e-12);
    }
}
