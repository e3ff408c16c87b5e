//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]. A node only keeps its
//! backward rule when at least one input requires a gradient, so inference
//! runs on the same code path without recording anything to unwind.
//!
//! Binary elementwise ops broadcast only when one operand's shape is a
//! suffix of the other's (a leading batch axis, or several). The token axis
//! is always the second-to-last axis.
//!
//! Leaf gradients accumulate: calling [`Tape::backward`] twice without
//! [`Tape::zero_grads`] doubles them.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Pow(usize, f64),
    MaxScalar(usize, f64),
    Sigmoid(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm(usize, f64),
    L2Normalize(usize),
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    Matmul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>),
    Slice(usize, usize),
    ExpandLeading(usize),
    GatherLast(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.op.is_none()
    }
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// Registers a leaf. Gradients are tracked for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Option<Op>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { None },
            grad: None,
        });
        Var { tape: self, id }
    }

    /// Accumulated gradient of a leaf, if one has been computed.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(root)/d(node) to every leaf that requires a gradient.
    ///
    /// Leaves without a path from `root` receive a zero gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                None => {
                    grads[id] = Some(g);
                }
                Some(op) => {
                    backward_op(op, &nodes, &node.value, &g, &mut grads);
                }
            }
        }
        for (id, node) in nodes.iter_mut().enumerate() {
            if !(node.requires_grad && node.is_leaf()) {
                continue;
            }
            let acc = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
            if let Some(Some(g)) = grads.get(id) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums a gradient over the leading axes it was broadcast across.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn backward_op(
    op: &Op,
    nodes: &[Node],
    out: &Tensor,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |id: usize| &nodes[id].value;
    match *op {
        Op::Add(a, b) => {
            let ga = reduce_to(g, val(a).len());
            let gb = reduce_to(g, val(b).len());
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        Op::Sub(a, b) => {
            let ga = reduce_to(g, val(a).len());
            let gb: Vec<f64> = reduce_to(g, val(b).len()).into_iter().map(|v| -v).collect();
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            if nodes[a].requires_grad {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bv[i % bv.len()])
                    .collect();
                accumulate(grads, nodes, a, reduce_to(&full, av.len()));
            }
            if nodes[b].requires_grad {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * av[i % av.len()])
                    .collect();
                accumulate(grads, nodes, b, reduce_to(&full, bv.len()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, a, g.iter().map(|v| -v).collect()),
        Op::AddScalar(a) => accumulate(grads, nodes, a, g.to_vec()),
        Op::MulScalar(a, s) => accumulate(grads, nodes, a, g.iter().map(|v| v * s).collect()),
        Op::Exp(a) => {
            let ga = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::Log(a) => {
            let ga = g.iter().zip(val(a).data()).map(|(gi, x)| gi / x).collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::Pow(a, p) => {
            let ga = g
                .iter()
                .zip(val(a).data())
                .map(|(gi, x)| if p == 0.0 { 0.0 } else { gi * p * x.powf(p - 1.0) })
                .collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::MaxScalar(a, s) => {
            let ga = g
                .iter()
                .zip(val(a).data())
                .map(|(gi, x)| if *x > s { *gi } else { 0.0 })
                .collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g
                .iter()
                .zip(out.data())
                .map(|(gi, y)| gi * y * (1.0 - y))
                .collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::Gelu(a) => {
            let ga = g
                .iter()
                .zip(val(a).data())
                .map(|(gi, x)| gi * gelu_grad(*x))
                .collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::LayerNorm(a, eps) => {
            let x = val(a);
            let n = *x.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; g.len()];
            for ((xr, gr), dst) in x.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                let (mean, inv_std) = moments(xr, eps);
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv_std).collect();
                let g_mean = gr.iter().sum::<f64>() / n as f64;
                let gx_mean = gr.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((d, gi), xh) in dst.iter_mut().zip(gr).zip(&xhat) {
                    *d = inv_std * (gi - g_mean - xh * gx_mean);
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::L2Normalize(a) => {
            let x = val(a);
            let n = *x.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; g.len()];
            for (((xr, yr), gr), dst) in x
                .data()
                .chunks(n)
                .zip(out.data().chunks(n))
                .zip(g.chunks(n))
                .zip(ga.chunks_mut(n))
            {
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = (gi - yi * dot) / norm;
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::SumAll(a) => accumulate(grads, nodes, a, vec![g[0]; val(a).len()]),
        Op::MeanAll(a) => {
            let n = val(a).len();
            accumulate(grads, nodes, a, vec![g[0] / n as f64; n]);
        }
        Op::SumLast(a) => {
            let x = val(a);
            let n = *x.shape().last().unwrap_or(&1);
            let ga = (0..x.len()).map(|i| g[i / n]).collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::Matmul(a, b) => {
            let (ga, gb) = matmul_backward(val(a), val(b), g, nodes[a].requires_grad, nodes[b].requires_grad);
            if let Some(ga) = ga {
                accumulate(grads, nodes, a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, nodes, b, gb);
            }
        }
        Op::Reshape(a) => accumulate(grads, nodes, a, g.to_vec()),
        Op::Permute(a, ref axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let ga = permute_data(g, out.shape(), &inverse);
            accumulate(grads, nodes, a, ga);
        }
        Op::Concat(ref parts) => {
            let shape = out.shape();
            let cols = shape[shape.len() - 1];
            let total_rows = shape[shape.len() - 2];
            let outer = out.len() / (cols * total_rows);
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).shape()[shape.len() - 2];
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(val(p).len());
                    for o in 0..outer {
                        let start = (o * total_rows + offset) * cols;
                        gp.extend_from_slice(&g[start..start + rows * cols]);
                    }
                    accumulate(grads, nodes, p, gp);
                }
                offset += rows;
            }
        }
        Op::Slice(a, start) => {
            let x = val(a);
            let shape = x.shape();
            let cols = shape[shape.len() - 1];
            let total_rows = shape[shape.len() - 2];
            let rows = out.shape()[shape.len() - 2];
            let outer = x.len() / (cols * total_rows);
            let mut ga = vec![0.0; x.len()];
            for o in 0..outer {
                let src = o * rows * cols;
                let dst = (o * total_rows + start) * cols;
                ga[dst..dst + rows * cols].copy_from_slice(&g[src..src + rows * cols]);
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::ExpandLeading(a) => accumulate(grads, nodes, a, reduce_to(g, val(a).len())),
        Op::GatherLast(a, ref idx) => {
            let x = val(a);
            let n = *x.shape().last().unwrap_or(&1);
            let k = idx.len();
            let mut ga = vec![0.0; x.len()];
            for (r, gr) in g.chunks(k).enumerate() {
                for (j, &i) in idx.iter().enumerate() {
                    ga[r * n + i] += gr[j];
                }
            }
            accumulate(grads, nodes, a, ga);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", a, b));
    }
    let lead = &a[..a.len() - 2];
    let mut out = lead.to_vec();
    out.extend([m, n]);
    if b.len() == 2 {
        let rows = lead.iter().product::<usize>() * m;
        return Ok((
            MatmulDims {
                batch: 1,
                m: rows,
                k,
                n,
                shared_rhs: true,
            },
            out,
        ));
    }
    if lead != &b[..b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((
        MatmulDims {
            batch: lead.iter().product(),
            m,
            k,
            n,
            shared_rhs: false,
        },
        out,
    ))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, shape) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let a_s = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let b_s = if d.shared_rhs {
            b.data()
        } else {
            &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        };
        gemm_acc(a_s, b_s, &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n], d.m, d.k, d.n);
    }
    Tensor::new(shape, out)
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (d, _) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    for bi in 0..d.batch {
        let a_s = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let (b_off, b_len) = if d.shared_rhs {
            (0, b.len())
        } else {
            (bi * d.k * d.n, d.k * d.n)
        };
        let b_s = &b.data()[b_off..b_off + b_len];
        let g_s = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        if let Some(ga) = ga.as_mut() {
            let bt = transpose2(b_s, d.k, d.n);
            gemm_acc(g_s, &bt, &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k], d.m, d.n, d.k);
        }
        if let Some(gb) = gb.as_mut() {
            let at = transpose2(a_s, d.m, d.k);
            gemm_acc(&at, g_s, &mut gb[b_off..b_off + b_len], d.k, d.m, d.n);
        }
    }
    (ga, gb)
}

fn permute_data(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(op, a, b));
    }
    Ok(long.to_vec())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on shape {:?}", v.shape());
        v.data()[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let data = x.value.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::new(x.value.shape().to_vec(), data).expect("same shape"),
                x.requires_grad,
            )
        };
        self.tape.push(value, rg, Some(op))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(name, a.value.shape(), b.value.shape())?;
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.value.data(), b.value.data());
            let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
            (
                Tensor::new(shape, data)?,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, rg, Some(op)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|v| -v, Op::Neg(self.id))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(|v| v + s, Op::AddScalar(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(|v| v * s, Op::MulScalar(self.id, s))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some((index, &value)) = nodes[self.id]
                .value
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| !(**v > 0.0))
            {
                return Err(Error::NonPositiveLog { index, value });
            }
        }
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(|v| v.powf(p), Op::Pow(self.id, p))
    }

    /// `max(x, s)` elementwise. The gradient at `x == s` is zero.
    pub fn max_scalar(&self, s: f64) -> Var<'t> {
        self.unary(|v| v.max(s), Op::MaxScalar(self.id, s))
    }

    pub fn min_scalar(&self, s: f64) -> Var<'t> {
        self.neg().max_scalar(-s).neg()
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.max_scalar(lo).min_scalar(hi)
    }

    pub fn relu(&self) -> Var<'t> {
        self.max_scalar(0.0)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu, Op::Gelu(self.id))
    }

    fn rowwise(&self, name: &'static str, op: Op, f: impl Fn(&[f64], &mut [f64])) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            let Some(&n) = shape.last() else {
                return Err(Error::invalid(name, "needs rank >= 1"));
            };
            let mut out = vec![0.0; x.value.len()];
            for (src, dst) in x.value.data().chunks(n).zip(out.chunks_mut(n)) {
                f(src, dst);
            }
            (Tensor::new(shape.to_vec(), out)?, x.requires_grad)
        };
        Ok(self.tape.push(value, rg, Some(op)))
    }

    pub fn softmax(&self) -> Result<Var<'t>> {
        self.rowwise("softmax", Op::Softmax(self.id), |src, dst| {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        })
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        self.rowwise("layer_norm", Op::LayerNorm(self.id, eps), |src, dst| {
            let (mean, inv_std) = moments(src, eps);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv_std;
            }
        })
    }

    /// Scales each row over the last axis to unit L2 norm.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let n = *v.shape().last().unwrap_or(&1);
            if let Some(row) = v.data().chunks(n).position(|r| r.iter().all(|x| *x == 0.0)) {
                return Err(Error::invalid("l2_normalize", format!("row {row} has zero norm")));
            }
        }
        self.rowwise("l2_normalize", Op::L2Normalize(self.id), |src, dst| {
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s / norm;
            }
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            (Tensor::scalar(x.value.data().iter().sum()), x.requires_grad)
        };
        self.tape.push(value, rg, Some(Op::SumAll(self.id)))
    }

    pub fn mean(&self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let n = x.value.len() as f64;
            (Tensor::scalar(x.value.data().iter().sum::<f64>() / n), x.requires_grad)
        };
        self.tape.push(value, rg, Some(Op::MeanAll(self.id)))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            let Some(&n) = shape.last() else {
                return Err(Error::invalid("sum_last", "needs rank >= 1"));
            };
            let data = x.value.data().chunks(n).map(|r| r.iter().sum()).collect();
            (Tensor::new(shape[..shape.len() - 1].to_vec(), data)?, x.requires_grad)
        };
        Ok(self.tape.push(value, rg, Some(Op::SumLast(self.id))))
    }

    /// `[.., m, k] x [k, n]` (shared right operand) or `[.., m, k] x [.., k, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (matmul_forward(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, rg, Some(Op::Matmul(self.id, other.id))))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            (x.value.clone().reshape(shape)?, x.requires_grad)
        };
        Ok(self.tape.push(value, rg, Some(Op::Reshape(self.id))))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let shape = x.value.shape();
            let mut seen = vec![false; shape.len()];
            if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::shape("permute", shape, axes));
            }
            let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
            let data = permute_data(x.value.data(), shape, axes);
            (Tensor::new(out_shape, data)?, x.requires_grad)
        };
        Ok(self.tape.push(value, rg, Some(Op::Permute(self.id, axes.to_vec()))))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Concatenates along the token (second-to-last) axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes.borrow();
            let s0 = nodes[first.id].value.shape().to_vec();
            if s0.len() < 2 {
                return Err(Error::invalid("concat", "needs rank >= 2"));
            }
            let r = s0.len();
            let mut rows = 0;
            for p in parts {
                first.same_tape(p);
                let s = nodes[p.id].value.shape();
                if s.len() != r || s[..r - 2] != s0[..r - 2] || s[r - 1] != s0[r - 1] {
                    return Err(Error::shape("concat", &s0, s));
                }
                rows += s[r - 2];
            }
            let cols = s0[r - 1];
            let outer: usize = s0[..r - 2].iter().product();
            let mut data = Vec::with_capacity(outer * rows * cols);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let pr = v.shape()[r - 2];
                    data.extend_from_slice(&v.data()[o * pr * cols..(o + 1) * pr * cols]);
                }
            }
            let mut shape = s0.clone();
            shape[r - 2] = rows;
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (Tensor::new(shape, data)?, rg)
        };
        Ok(tape.push(value, rg, Some(Op::Concat(parts.iter().map(|p| p.id).collect()))))
    }

    /// Rows `start..end` of the token (second-to-last) axis.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let s = x.value.shape();
            if s.len() < 2 || start > end || end > s[s.len() - 2] {
                return Err(Error::invalid(
                    "slice_tokens",
                    format!("range {start}..{end} out of bounds for shape {s:?}"),
                ));
            }
            let r = s.len();
            let (total, cols) = (s[r - 2], s[r - 1]);
            let outer: usize = s[..r - 2].iter().product();
            let mut data = Vec::with_capacity(outer * (end - start) * cols);
            for o in 0..outer {
                let base = (o * total + start) * cols;
                data.extend_from_slice(&x.value.data()[base..base + (end - start) * cols]);
            }
            let mut shape = s.to_vec();
            shape[r - 2] = end - start;
            (Tensor::new(shape, data)?, x.requires_grad)
        };
        Ok(self.tape.push(value, rg, Some(Op::Slice(self.id, start))))
    }

    /// Repeats the tensor along a new leading axis of length `count`.
    pub fn expand_leading(&self, count: usize) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let mut shape = vec![count];
            shape.extend_from_slice(x.value.shape());
            let data = x.value.data().repeat(count);
            (Tensor::new(shape, data).expect("expanded shape"), x.requires_grad)
        };
        self.tape.push(value, rg, Some(Op::ExpandLeading(self.id)))
    }

    /// Selects entries of the last axis by index.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let s = x.value.shape();
            let Some(&n) = s.last() else {
                return Err(Error::invalid("gather_last", "needs rank >= 1"));
            };
            if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
                return Err(Error::invalid("gather_last", format!("index {bad} >= {n}")));
            }
            let data = x
                .value
                .data()
                .chunks(n)
                .flat_map(|row| indices.iter().map(move |&i| row[i]))
                .collect();
            let mut shape = s.to_vec();
            *shape.last_mut().unwrap() = indices.len();
            (Tensor::new(shape, data)?, x.requires_grad)
        };
        Ok(self.tape.push(value, rg, Some(Op::GatherLast(self.id, indices.to_vec()))))
    }
}
