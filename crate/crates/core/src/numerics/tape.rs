//! Reverse-mode differentiation over a linear operation tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly in `f64`; [`Tape::backward`] replays the record in
//! reverse and accumulates one gradient contribution per use of each input.
//! A tape is single-threaded; independent tapes may run on separate threads.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::numerics::kernels as k;
use crate::numerics::tensor::numel;
use crate::numerics::Tensor;
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Ln(usize),
    Gelu(usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        input: (usize, usize, usize),
        kernel: (usize, usize, usize),
    },
    ConvT2x2 {
        x: usize,
        w: usize,
        b: Option<usize>,
        input: (usize, usize, usize),
        cout: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        d: usize,
    },
    LogSoftmax {
        x: usize,
        d: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        scale: f64,
    },
    SmoothL1 {
        pred: usize,
        target: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanRows {
        x: usize,
        rows: usize,
    },
    RowNorms {
        x: usize,
        d: usize,
    },
    L2Normalize {
        x: usize,
        d: usize,
        norms: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Resize {
        x: usize,
        from: (usize, usize, usize),
        to: (usize, usize),
    },
    HaarForward(usize),
    HaarInverse(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    MixRows {
        a: usize,
        b: usize,
        take_b: Vec<bool>,
    },
    RankDot {
        x: usize,
        bank: usize,
        kk: usize,
        m: usize,
        d: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.dims())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat needs at least one input".into()))?;
        let base = first.dims();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                dims: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let d = p.dims();
            let compatible = d.len() == base.len()
                && d.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: d,
                });
            }
            sizes.push(d[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = k::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (p, &s) in parts.iter().zip(&sizes) {
                    let src = nodes[p.id].value.data();
                    out.extend_from_slice(&src[o * s * inner..(o + 1) * s * inner]);
                }
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(
            "concat",
            Tensor::from_parts(dims, out),
            Op::Concat {
                inputs: ids.clone(),
                axis,
                sizes,
            },
            &ids,
        )
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.dims().to_vec()));
        }
        if !root.needs_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.dims(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop_node(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let dims = nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_parts(nodes[id].value.dims().to_vec(), g));
        }
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let val = |i: usize| nodes[i].value.data();
    let mut acc = |i: usize, v: Vec<f64>| accumulate(nodes, grads, i, v);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, gd.to_vec());
            acc(*b, gd.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, gd.to_vec());
            acc(*b, gd.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(*a, gd.iter().zip(bv).map(|(g, b)| g * b).collect());
            acc(*b, gd.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Scale(a, s) => acc(*a, gd.iter().map(|v| v * s).collect()),
        Op::Shift(a) => acc(*a, gd.to_vec()),
        Op::Exp(a) => {
            let out = nodes[id].value.data();
            acc(*a, gd.iter().zip(out).map(|(g, y)| g * y).collect());
        }
        Op::Ln(a) => acc(*a, gd.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
        Op::Gelu(a) => acc(
            *a,
            gd.iter()
                .zip(val(*a))
                .map(|(g, &x)| g * k::gelu_grad(x))
                .collect(),
        ),
        Op::AddBias { x, bias } => {
            acc(*x, gd.to_vec());
            acc(*bias, k::sum_rows(gd, nodes[*bias].value.len()));
        }
        Op::MatMul { a, b, m, k: kk, n } => {
            acc(*a, k::matmul_nt(gd, val(*b), *m, *n, *kk));
            acc(*b, k::matmul_tn(val(*a), gd, *m, *kk, *n));
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            cin,
            cout,
        } => {
            acc(*x, k::matmul_nt(gd, val(*w), *rows, *cout, *cin));
            acc(*w, k::matmul_tn(val(*x), gd, *rows, *cin, *cout));
            if let Some(b) = b {
                acc(*b, k::sum_rows(gd, *cout));
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            input,
            kernel,
        } => {
            let (dx, dw, db) = k::conv2d_backward(val(*x), val(*w), gd, *input, *kernel);
            acc(*x, dx);
            acc(*w, dw);
            if let Some(b) = b {
                acc(*b, db);
            }
        }
        Op::ConvT2x2 {
            x,
            w,
            b,
            input,
            cout,
        } => {
            let (dx, dw, db) = k::conv_transpose2x2_backward(val(*x), val(*w), gd, *input, *cout);
            acc(*x, dx);
            acc(*w, dw);
            if let Some(b) = b {
                acc(*b, db);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (dx, dg, db) = k::layer_norm_backward(gd, xhat, inv_std, val(*gamma));
            acc(*x, dx);
            acc(*gamma, dg);
            acc(*beta, db);
        }
        Op::Softmax { x, d } => {
            let y = nodes[id].value.data();
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(*d).zip(gd.chunks(*d)).zip(dx.chunks_mut(*d)) {
                let s = k::dot(yr, gr);
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - s);
                }
            }
            acc(*x, dx);
        }
        Op::LogSoftmax { x, d } => {
            let y = nodes[id].value.data();
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(*d).zip(gd.chunks(*d)).zip(dx.chunks_mut(*d)) {
                let s: f64 = gr.iter().sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * s;
                }
            }
            acc(*x, dx);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            scale,
        } => {
            let c = probs.len() / labels.len();
            let mut dx: Vec<f64> = probs.iter().map(|p| p * scale * gd[0]).collect();
            for (r, &l) in labels.iter().enumerate() {
                dx[r * c + l] -= scale * gd[0];
            }
            acc(*logits, dx);
        }
        Op::SmoothL1 { pred, target } => {
            let dp: Vec<f64> = val(*pred)
                .iter()
                .zip(val(*target))
                .map(|(p, t)| k::smooth_l1_grad(p - t) * gd[0])
                .collect();
            acc(*target, dp.iter().map(|v| -v).collect());
            acc(*pred, dp);
        }
        Op::Sum(a) => acc(*a, vec![gd[0]; nodes[*a].value.len()]),
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            acc(*a, vec![gd[0] / n as f64; n]);
        }
        Op::MeanRows { x, rows } => {
            let scale = 1.0 / *rows as f64;
            let row: Vec<f64> = gd.iter().map(|v| v * scale).collect();
            acc(*x, row.repeat(*rows));
        }
        Op::RowNorms { x, d } => {
            let out = nodes[id].value.data();
            let xv = val(*x);
            let mut dx = vec![0.0; xv.len()];
            for (r, (&n, &gv)) in out.iter().zip(gd).enumerate() {
                if n > 0.0 {
                    for c in 0..*d {
                        dx[r * d + c] = gv * xv[r * d + c] / n;
                    }
                }
            }
            acc(*x, dx);
        }
        Op::L2Normalize { x, d, norms } => {
            let y = nodes[id].value.data();
            let mut dx = vec![0.0; y.len()];
            for (r, &n) in norms.iter().enumerate() {
                if n > 0.0 {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let s = k::dot(yr, gr);
                    for c in 0..*d {
                        dx[r * d + c] = (gr[c] - yr[c] * s) / n;
                    }
                }
            }
            acc(*x, dx);
        }
        Op::Concat {
            inputs,
            axis,
            sizes,
        } => {
            let total: usize = sizes.iter().sum();
            let (outer, _, inner) = k::axis_split(nodes[id].value.dims(), *axis);
            let mut offset = 0;
            for (&input, &s) in inputs.iter().zip(sizes) {
                let mut part = Vec::with_capacity(outer * s * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    part.extend_from_slice(&gd[start..start + s * inner]);
                }
                acc(input, part);
                offset += s;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_dims = nodes[*x].value.dims();
            let (outer, full, inner) = k::axis_split(in_dims, *axis);
            let len = nodes[id].value.dims()[*axis];
            let mut dx = vec![0.0; numel(in_dims)];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                dx[dst..dst + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            acc(*x, dx);
        }
        Op::Reshape(a) => acc(*a, gd.to_vec()),
        Op::Resize { x, from, to } => acc(*x, k::resize_nearest_backward(gd, *from, *to)),
        // The orthonormal Haar matrix is its own transpose's inverse, so the
        // adjoint of each direction is the other direction.
        Op::HaarForward(a) => acc(
            *a,
            wavelet::inverse_packed(g)
                .expect("gradient matches output shape")
                .into_data(),
        ),
        Op::HaarInverse(a) => acc(
            *a,
            wavelet::forward_packed(g)
                .expect("gradient matches output shape")
                .into_data(),
        ),
        Op::GatherRows { x, idx } => {
            let d = *nodes[*x].value.dims().last().unwrap_or(&1);
            let mut dx = vec![0.0; nodes[*x].value.len()];
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..d {
                    dx[src * d + c] += gd[r * d + c];
                }
            }
            acc(*x, dx);
        }
        Op::MixRows { a, b, take_b } => {
            let d = gd.len() / take_b.len();
            let mut da = gd.to_vec();
            let mut db = vec![0.0; gd.len()];
            for (r, &tb) in take_b.iter().enumerate() {
                if tb {
                    db[r * d..(r + 1) * d].copy_from_slice(&gd[r * d..(r + 1) * d]);
                    da[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            acc(*a, da);
            acc(*b, db);
        }
        Op::RankDot { x, bank, kk, m, d } => {
            let (xv, bv) = (val(*x), val(*bank));
            let mut dx = vec![0.0; kk * d];
            let mut dbank = vec![0.0; m * kk * d];
            for r in 0..*kk {
                for e in 0..*m {
                    let gv = gd[r * m + e];
                    let off = (e * kk + r) * d;
                    for c in 0..*d {
                        dx[r * d + c] += gv * bv[off + c];
                        dbank[off + c] += gv * xv[r * d + c];
                    }
                }
            }
            acc(*x, dx);
            acc(*bank, dbank);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let out = self.value().map(f);
        self.tape.push(name, out, op(self.id), &[self.id])
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let out = self.value().zip_map(&other.value(), name, f)?;
        self.tape
            .push(name, out, op(self.id, other.id), &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * s, |a| Op::Scale(a, s))
    }

    pub fn shift(&self, s: f64) -> Result<Var<'t>> {
        self.unary("shift", |v| v + s, Op::Shift)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, Op::Ln)
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary("gelu", k::gelu, Op::Gelu)
    }

    /// Broadcast-add a `(c)` vector along the last axis.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (x, b) = (self.value(), bias.value());
            if b.rank() != 1 || x.dims().last() != b.dims().last() {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    left: x.dims().to_vec(),
                    right: b.dims().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            k::add_rows(&mut data, b.data());
            Tensor::from_parts(x.dims().to_vec(), data)
        };
        self.tape.push(
            "add_bias",
            out,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            &[self.id, bias.id],
        )
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, m, kk, n) = {
            let (a, b) = (self.value(), other.value());
            let (m, ka) = a.matrix()?;
            let (kb, n) = b.matrix()?;
            if ka != kb {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: a.dims().to_vec(),
                    right: b.dims().to_vec(),
                });
            }
            (k::matmul(a.data(), b.data(), m, ka, n), m, ka, n)
        };
        self.tape.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k: kk,
                n,
            },
            &[self.id, other.id],
        )
    }

    /// Channel-wise affine map over the last axis: `x (..., cin) @ w (cin, cout) + b`.
    pub fn linear(&self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let (out, dims, rows, cin, cout) = {
            let (x, wv) = (self.value(), w.value());
            let (wi, wo) = wv.matrix()?;
            let cin = *x.dims().last().unwrap_or(&1);
            if cin != wi || x.rank() == 0 {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    left: x.dims().to_vec(),
                    right: wv.dims().to_vec(),
                });
            }
            let rows = x.len() / cin;
            let mut out = k::matmul(x.data(), wv.data(), rows, cin, wo);
            if let Some(b) = b {
                let bv = b.value();
                if bv.dims() != [wo] {
                    return Err(Error::ShapeMismatch {
                        op: "linear bias",
                        left: vec![wo],
                        right: bv.dims().to_vec(),
                    });
                }
                k::add_rows(&mut out, bv.data());
            }
            let mut dims = x.dims().to_vec();
            *dims.last_mut().unwrap() = wo;
            (out, dims, rows, cin, wo)
        };
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        self.tape.push(
            "linear",
            Tensor::from_parts(dims, out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                cin,
                cout,
            },
            &inputs,
        )
    }

    /// Same-padded convolution of a `(h, w, cin)` map with an odd
    /// `(kh, kw, cin, cout)` kernel.
    pub fn conv2d(&self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let (out, input, kernel) = {
            let (x, wv) = (self.value(), w.value());
            let (h, wd, cin) = x.hwc()?;
            let [kh, kw, wci, cout] = wv.dims()[..] else {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    dims: wv.dims().to_vec(),
                    reason: "kernel must be (kh, kw, cin, cout)".into(),
                });
            };
            if wci != cin || kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: x.dims().to_vec(),
                    right: wv.dims().to_vec(),
                });
            }
            let bias = b.map(|b| b.value().data().to_vec());
            if bias.as_ref().is_some_and(|v| v.len() != cout) {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![cout],
                    right: b.unwrap().dims(),
                });
            }
            let out = k::conv2d(
                x.data(),
                wv.data(),
                bias.as_deref(),
                (h, wd, cin),
                (kh, kw, cout),
            );
            (
                Tensor::from_parts(vec![h, wd, cout], out),
                (h, wd, cin),
                (kh, kw, cout),
            )
        };
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        self.tape.push(
            "conv2d",
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                input,
                kernel,
            },
            &inputs,
        )
    }

    /// 2x2 stride-2 transposed convolution, doubling both spatial sides.
    pub fn conv_transpose2x2(&self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let (out, input, cout) = {
            let (x, wv) = (self.value(), w.value());
            let (h, wd, cin) = x.hwc()?;
            let [2, 2, wci, cout] = wv.dims()[..] else {
                return Err(Error::InvalidShape {
                    op: "conv_transpose2x2",
                    dims: wv.dims().to_vec(),
                    reason: "kernel must be (2, 2, cin, cout)".into(),
                });
            };
            if wci != cin {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2x2",
                    left: x.dims().to_vec(),
                    right: wv.dims().to_vec(),
                });
            }
            let bias = b.map(|b| b.value().data().to_vec());
            if bias.as_ref().is_some_and(|v| v.len() != cout) {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2x2 bias",
                    left: vec![cout],
                    right: b.unwrap().dims(),
                });
            }
            let out =
                k::conv_transpose2x2(x.data(), wv.data(), bias.as_deref(), (h, wd, cin), cout);
            (
                Tensor::from_parts(vec![2 * h, 2 * wd, cout], out),
                (h, wd, cin),
                cout,
            )
        };
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        self.tape.push(
            "conv_transpose2x2",
            out,
            Op::ConvT2x2 {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                input,
                cout,
            },
            &inputs,
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let d = *x.dims().last().unwrap_or(&1);
            if g.dims() != [d] || b.dims() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: x.dims().to_vec(),
                    right: g.dims().to_vec(),
                });
            }
            let (y, xhat, inv) = k::layer_norm(x.data(), g.data(), b.data());
            (Tensor::from_parts(x.dims().to_vec(), y), xhat, inv)
        };
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    fn last_dim(&self) -> usize {
        *self.value().dims().last().unwrap_or(&1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let d = self.last_dim();
        let out = {
            let x = self.value();
            Tensor::from_parts(x.dims().to_vec(), k::softmax_rows(x.data(), d))
        };
        self.tape
            .push("softmax", out, Op::Softmax { x: self.id, d }, &[self.id])
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let d = self.last_dim();
        let out = {
            let x = self.value();
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let lse = k::log_sum_exp(row);
                data.extend(row.iter().map(|v| v - lse));
            }
            Tensor::from_parts(x.dims().to_vec(), data)
        };
        self.tape.push(
            "log_softmax",
            out,
            Op::LogSoftmax { x: self.id, d },
            &[self.id],
        )
    }

    /// Cross-entropy of `(n, classes)` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize], reduction: Reduction) -> Result<Var<'t>> {
        let (loss, probs, scale) = {
            let x = self.value();
            let (n, c) = x.matrix()?;
            if labels.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    left: x.dims().to_vec(),
                    right: vec![labels.len()],
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
            let mut total = 0.0;
            for (row, &l) in x.data().chunks(c).zip(labels) {
                total += k::log_sum_exp(row) - row[l];
            }
            let scale = match reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / n as f64,
            };
            (total * scale, k::softmax_rows(x.data(), c), scale)
        };
        self.tape.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
                scale,
            },
            &[self.id],
        )
    }

    /// Summed smooth-L1 distance to `target`.
    pub fn smooth_l1(&self, target: Var<'t>) -> Result<Var<'t>> {
        let loss = {
            let (p, t) = (self.value(), target.value());
            p.expect_same_dims(&t, "smooth_l1")?;
            p.data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| k::smooth_l1(a - b))
                .sum::<f64>()
        };
        self.tape.push(
            "smooth_l1",
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred: self.id,
                target: target.id,
            },
            &[self.id, target.id],
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape
            .push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let m = {
            let v = self.value();
            v.sum() / v.len() as f64
        };
        self.tape
            .push("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Mean over the leading axis: `(n, ...) -> (...)`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let (out, rows) = {
            let x = self.value();
            if x.rank() < 2 {
                return Err(Error::InvalidShape {
                    op: "mean_rows",
                    dims: x.dims().to_vec(),
                    reason: "need rank >= 2".into(),
                });
            }
            let rows = x.dims()[0];
            let width = x.len() / rows;
            let mut m = k::sum_rows(x.data(), width);
            m.iter_mut().for_each(|v| *v /= rows as f64);
            (Tensor::from_parts(x.dims()[1..].to_vec(), m), rows)
        };
        self.tape.push(
            "mean_rows",
            out,
            Op::MeanRows { x: self.id, rows },
            &[self.id],
        )
    }

    /// L2 norm of every row along the last axis.
    pub fn row_norms(&self) -> Result<Var<'t>> {
        let d = self.last_dim();
        let out = {
            let x = self.value();
            let norms: Vec<f64> = x.data().chunks(d).map(|r| k::dot(r, r).sqrt()).collect();
            let dims = x.dims()[..x.rank().saturating_sub(1)].to_vec();
            Tensor::from_parts(dims, norms)
        };
        self.tape
            .push("row_norms", out, Op::RowNorms { x: self.id, d }, &[self.id])
    }

    /// Scales every row along the last axis to unit L2 norm. Zero rows stay
    /// zero and pass no gradient.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let d = self.last_dim();
        let (out, norms) = {
            let x = self.value();
            let mut data = x.data().to_vec();
            let mut norms = Vec::with_capacity(x.len() / d);
            for row in data.chunks_mut(d) {
                let n = k::dot(row, row).sqrt();
                norms.push(n);
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                } else {
                    log::warn!("zero-norm row in l2 normalization; treating as zero vector");
                }
            }
            (Tensor::from_parts(x.dims().to_vec(), data), norms)
        };
        self.tape.push(
            "l2_normalize_rows",
            out,
            Op::L2Normalize {
                x: self.id,
                d,
                norms,
            },
            &[self.id],
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if axis >= x.rank() || len == 0 || start + len > x.dims()[axis] {
                return Err(Error::InvalidShape {
                    op: "narrow",
                    dims: x.dims().to_vec(),
                    reason: format!("axis {axis} range {start}..{}", start + len),
                });
            }
            let (outer, full, inner) = k::axis_split(x.dims(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                data.extend_from_slice(&x.data()[s..s + len * inner]);
            }
            let mut dims = x.dims().to_vec();
            dims[axis] = len;
            Tensor::from_parts(dims, data)
        };
        self.tape.push(
            "narrow",
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(dims)?;
        self.tape
            .push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Nearest-neighbour spatial resize of a `(h, w, c)` map.
    pub fn resize_nearest(&self, ht: usize, wt: usize) -> Result<Var<'t>> {
        let (out, from) = {
            let x = self.value();
            let hwc = x.hwc()?;
            if ht == 0 || wt == 0 {
                return Err(Error::InvalidArgument(format!(
                    "resize target ({ht}, {wt}) must be positive"
                )));
            }
            let data = k::resize_nearest(x.data(), hwc, (ht, wt));
            (Tensor::from_parts(vec![ht, wt, hwc.2], data), hwc)
        };
        self.tape.push(
            "resize_nearest",
            out,
            Op::Resize {
                x: self.id,
                from,
                to: (ht, wt),
            },
            &[self.id],
        )
    }

    /// Single-level Haar transform into the packed `(h/2, w/2, 4c)` layout
    /// (channel blocks LL, LH, HL, HH).
    pub fn haar_forward(&self) -> Result<Var<'t>> {
        let out = wavelet::forward_packed(&self.value())?;
        self.tape
            .push("haar_forward", out, Op::HaarForward(self.id), &[self.id])
    }

    pub fn haar_inverse(&self) -> Result<Var<'t>> {
        let out = wavelet::inverse_packed(&self.value())?;
        self.tape
            .push("haar_inverse", out, Op::HaarInverse(self.id), &[self.id])
    }

    /// Selects rows (leading axis) of a `(n, d)` tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (n, d) = x.matrix()?;
            if idx.is_empty() || idx.iter().any(|&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "row indices {idx:?} invalid for {n} rows"
                )));
            }
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            Tensor::from_parts(vec![idx.len(), d], data)
        };
        self.tape.push(
            "gather_rows",
            out,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        )
    }

    /// Row-wise select: row `r` comes from `other` where `take_other[r]`.
    pub fn mix_rows(&self, other: Var<'t>, take_other: &[bool]) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            a.expect_same_dims(&b, "mix_rows")?;
            let (n, d) = a.matrix()?;
            if take_other.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "mix_rows",
                    left: a.dims().to_vec(),
                    right: vec![take_other.len()],
                });
            }
            let mut data = a.data().to_vec();
            for (r, &t) in take_other.iter().enumerate() {
                if t {
                    data[r * d..(r + 1) * d].copy_from_slice(b.row(r));
                }
            }
            Tensor::from_parts(vec![n, d], data)
        };
        self.tape.push(
            "mix_rows",
            out,
            Op::MixRows {
                a: self.id,
                b: other.id,
                take_b: take_other.to_vec(),
            },
            &[self.id, other.id],
        )
    }

    /// Rank-paired dot products: `self (K, d)` against `bank (M, K, d)`
    /// gives `(K, M)` with `out[k, m] = <self[k], bank[m, k]>`.
    pub fn rank_dot(&self, bank: Var<'t>) -> Result<Var<'t>> {
        let (out, kk, m, d) = {
            let (x, b) = (self.value(), bank.value());
            let (kk, d) = x.matrix()?;
            let [m, bk, bd] = b.dims()[..] else {
                return Err(Error::InvalidShape {
                    op: "rank_dot",
                    dims: b.dims().to_vec(),
                    reason: "bank must be (entries, K, d)".into(),
                });
            };
            if bk != kk || bd != d {
                return Err(Error::ShapeMismatch {
                    op: "rank_dot",
                    left: x.dims().to_vec(),
                    right: b.dims().to_vec(),
                });
            }
            let mut out = vec![0.0; kk * m];
            for r in 0..kk {
                for e in 0..m {
                    let off = (e * kk + r) * d;
                    out[r * m + e] = k::dot(x.row(r), &b.data()[off..off + d]);
                }
            }
            (Tensor::from_parts(vec![kk, m], out), kk, m, d)
        };
        self.tape.push(
            "rank_dot",
            out,
            Op::RankDot {
                x: self.id,
                bank: bank.id,
                kk,
                m,
                d,
            },
            &[self.id, bank.id],
        )
    }
}
