//! The tape: every operation appends a node whose inputs are earlier nodes,
//! so reverse insertion order is a valid topological order for backward.

use std::collections::HashMap;

use super::conv::{self, Conv1dSpec, ConvDims};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

/// Numerical guard in the global layer norm.
pub const GLN_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    ScaleBy(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Narrow { x: Tensor, axis: usize, start: usize },
    GatherRows { x: Tensor, rows: Vec<usize> },
    BroadcastRows(Tensor),
    Conv1d { x: Tensor, w: Tensor, b: Option<Tensor>, spec: Conv1dSpec },
    ConvTranspose1d { x: Tensor, w: Tensor, b: Option<Tensor>, stride: usize },
    Relu(Tensor),
    Prelu(Tensor, Tensor),
    Sigmoid(Tensor),
    Abs(Tensor),
    Square(Tensor),
    Log(Tensor),
    GlobalLayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<f64>, inv_std: f64 },
    Sum(Tensor),
    Mean(Tensor),
    Mse(Tensor, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward pass. Not shared between threads while in use;
/// build one graph per pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: HashMap<ParamId, Tensor>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::InvalidArgument(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(value, shape, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(value, shape, true)
    }

    fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if value.len() != numel(shape) {
            return Err(shape_err("leaf", format!("{} values for shape {shape:?}", value.len())));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![v], vec![1], Op::Leaf, false)
    }

    /// Binds a parameter as a differentiable leaf. Binding the same parameter
    /// twice returns the same tensor.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        if let Some(t) = self.bindings.get(&id) {
            return *t;
        }
        let p = store.get(id);
        let t = self.push(p.values.clone(), p.shape.clone(), Op::Leaf, true);
        self.bindings.insert(id, t);
        t
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn item(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[0]
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn same_shape(&self, op: &str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, self.shape(a).to_vec(), op, rg))
    }

    fn map(&mut self, a: Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let v = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(v, self.shape(a).to_vec(), op, rg)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", format!("scale has shape {:?}", self.shape(s))));
        }
        let c = self.item(s);
        let v = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(v, self.shape(a).to_vec(), Op::ScaleBy(a, s), rg))
    }

    fn dims2(&self, op: &str, t: Tensor) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose", a)?;
        let out = transpose_raw(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(out, vec![c, r], Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} to {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(v, shape.to_vec(), Op::Reshape(a), rg))
    }

    /// Slice `start..start+len` along `axis` of a matrix.
    pub fn narrow(&mut self, x: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("narrow", x)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(shape_err("narrow", format!("{start}+{len} on axis {axis} of {r}x{c}")));
        }
        let src = self.value(x);
        let (out, shape) = if axis == 0 {
            (src[start * c..(start + len) * c].to_vec(), vec![len, c])
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + start + len]);
            }
            (out, vec![r, len])
        };
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Narrow { x, axis, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Tensor, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("gather_rows", x)?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![rows.len(), c], Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, x: Tensor, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("broadcast_rows", x)?;
        if r != 1 {
            return Err(shape_err("broadcast_rows", format!("expected one row, got {r}")));
        }
        let row = self.value(x).to_vec();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![n, c], Op::BroadcastRows(x), rg))
    }

    /// Cross-correlation of `x: [c_in, t]` with `w: [c_out, c_in/groups, k]`
    /// plus optional bias `[c_out]`.
    pub fn conv1d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>, spec: Conv1dSpec) -> Result<Tensor> {
        let (c_in, t_in) = self.dims2("conv1d", x)?;
        let (c_out, cin_g, kernel) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(shape_err("conv1d", format!("weight shape {s:?}"))),
        };
        if spec.groups == 0 || spec.dilation == 0 || spec.stride == 0 || kernel == 0 {
            return Err(shape_err("conv1d", "groups, dilation, stride and kernel must be >= 1".into()));
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 || cin_g != c_in / spec.groups {
            return Err(shape_err("conv1d", format!("{c_in} -> {c_out} channels with {} groups and weight {:?}", spec.groups, self.shape(w))));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let t_out = spec
            .output_len(t_in, kernel)
            .ok_or_else(|| shape_err("conv1d", format!("input length {t_in} too short")))?;
        let dims = ConvDims {
            c_in,
            c_out,
            t_in,
            t_out,
            kernel,
        };
        let out = conv::conv1d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), dims, &spec);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, vec![c_out, t_out], Op::Conv1d { x, w, b, spec }, rg))
    }

    /// Transposed convolution of `x: [c_in, t]` with `w: [c_in, c_out, k]`.
    pub fn conv_transpose1d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>, stride: usize) -> Result<Tensor> {
        let (c_in, t_in) = self.dims2("conv_transpose1d", x)?;
        let (wc_in, c_out, kernel) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(shape_err("conv_transpose1d", format!("weight shape {s:?}"))),
        };
        if wc_in != c_in || stride == 0 || t_in == 0 {
            return Err(shape_err("conv_transpose1d", format!("input {c_in}x{t_in}, weight {:?}", self.shape(w))));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv_transpose1d", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let t_out = (t_in - 1) * stride + kernel;
        let dims = ConvDims {
            c_in,
            c_out,
            t_in,
            t_out,
            kernel,
        };
        let out = conv::conv_transpose1d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), dims, stride);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, vec![c_out, t_out], Op::ConvTranspose1d { x, w, b, stride }, rg))
    }

    /// Fully connected layer on the rows of `x: [n, d_in]`, `w: [d_out, d_in]`.
    pub fn dense(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let n = self.shape(y)[0];
                let d = self.value(b).len();
                let row = self.reshape(b, &[1, d])?;
                let rows = self.broadcast_rows(row, n)?;
                self.add(y, rows)
            }
        }
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Leaky rectifier with a learned single-element slope.
    pub fn prelu(&mut self, a: Tensor, alpha: Tensor) -> Result<Tensor> {
        if self.value(alpha).len() != 1 {
            return Err(shape_err("prelu", format!("slope shape {:?}", self.shape(alpha))));
        }
        let s = self.item(alpha);
        let v = self.value(a).iter().map(|&x| if x > 0.0 { x } else { s * x }).collect();
        let rg = self.rg(a) || self.rg(alpha);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Prelu(a, alpha), rg))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        self.map(a, f64::ln, Op::Log(a))
    }

    /// Normalizes `x: [c, t]` by the mean and variance over all entries, then
    /// applies per-channel `gamma` and `beta`.
    pub fn global_layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        let (c, t) = self.dims2("global_layer_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("global_layer_norm", format!("affine shapes for {c} channels")));
        }
        let xs = self.value(x);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + GLN_EPS).sqrt();
        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv_std).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            for i in 0..t {
                out[ch * t + i] = g[ch] * xhat[ch * t + i] + b[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            vec![c, t],
            Op::GlobalLayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(vec![m], vec![1], Op::Mean(a), rg)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len().max(1) as f64;
        let m = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m], vec![1], Op::Mse(a, b), rg))
    }

    /// Stops gradient flow: a constant copy of `a`.
    pub fn detach(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).to_vec();
        let s = self.shape(a).to_vec();
        self.push(v, s, Op::Leaf, false)
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every node
    /// that requires them.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds gradients of all bound parameters into `store`. Bound parameters
    /// that the loss did not reach receive zeros.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut ids: Vec<_> = self.bindings.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, t) in ids {
            let p = store.get_mut(*id);
            let acc = p.grad.get_or_insert_with(|| vec![0.0; p.values.len()]);
            if let Some(g) = self.grad(*t) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |t: Tensor| nodes[t.0].value.as_slice();
        let mut acc = |t: Tensor, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[t.0].requires_grad {
                let slot = grads[t.0].get_or_insert_with(|| vec![0.0; nodes[t.0].value.len()]);
                f(slot);
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_assign(ga, g)),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                let va = val(*a);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(va).map(|(x, y)| x * y).sum::<f64>());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    // ga += g · bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb += aᵀ · g
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (x, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *x += av * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                // g is c x r
                acc(*a, &mut |ga| add_assign(ga, &transpose_raw(g, c, r)));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_assign(ga, g)),
            Op::Narrow { x, axis, start } => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let out_shape = &nodes[id].shape;
                acc(*x, &mut |gx| {
                    if *axis == 0 {
                        add_assign(&mut gx[start * c..(start + out_shape[0]) * c], g);
                    } else {
                        let len = out_shape[1];
                        for i in 0..r {
                            add_assign(&mut gx[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = nodes[x.0].shape[1];
                acc(*x, &mut |gx| {
                    for (j, &i) in rows.iter().enumerate() {
                        add_assign(&mut gx[i * c..(i + 1) * c], &g[j * c..(j + 1) * c]);
                    }
                });
            }
            Op::BroadcastRows(x) => {
                let c = nodes[x.0].shape[1];
                acc(*x, &mut |gx| {
                    for row in g.chunks(c) {
                        add_assign(gx, row);
                    }
                });
            }
            Op::Conv1d { x, w, b, spec } => {
                let (c_in, t_in) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let wshape = &nodes[w.0].shape;
                let dims = ConvDims {
                    c_in,
                    c_out: wshape[0],
                    t_in,
                    t_out: nodes[id].shape[1],
                    kernel: wshape[2],
                };
                let (vx, vw) = (val(*x), val(*w));
                if let Some(b) = b {
                    acc(*b, &mut |gb| conv::conv1d_backward(vx, vw, g, dims, spec, None, None, Some(gb)));
                }
                acc(*w, &mut |gw| conv::conv1d_backward(vx, vw, g, dims, spec, None, Some(gw), None));
                acc(*x, &mut |gx| conv::conv1d_backward(vx, vw, g, dims, spec, Some(gx), None, None));
            }
            Op::ConvTranspose1d { x, w, b, stride } => {
                let (c_in, t_in) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let wshape = &nodes[w.0].shape;
                let dims = ConvDims {
                    c_in,
                    c_out: wshape[1],
                    t_in,
                    t_out: nodes[id].shape[1],
                    kernel: wshape[2],
                };
                let (vx, vw) = (val(*x), val(*w));
                if let Some(b) = b {
                    acc(*b, &mut |gb| conv::conv_transpose1d_backward(vx, vw, g, dims, *stride, None, None, Some(gb)));
                }
                acc(*w, &mut |gw| conv::conv_transpose1d_backward(vx, vw, g, dims, *stride, None, Some(gw), None));
                acc(*x, &mut |gx| conv::conv_transpose1d_backward(vx, vw, g, dims, *stride, Some(gx), None, None));
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Prelu(a, alpha) => {
                let va = val(*a);
                let s = val(*alpha)[0];
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        } else if va[i] < 0.0 {
                            ga[i] += s * g[i];
                        }
                    }
                });
                acc(*alpha, &mut |gs| {
                    gs[0] += va.iter().zip(g).filter(|(x, _)| **x < 0.0).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Sigmoid(a) => {
                let out = &nodes[id].value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * if va[i] > 0.0 { 1.0 } else if va[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += 2.0 * va[i] * g[i];
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / va[i];
                    }
                });
            }
            Op::GlobalLayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, t) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let gv = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for ch in 0..c {
                        gg[ch] += (0..t).map(|i| g[ch * t + i] * xhat[ch * t + i]).sum::<f64>();
                    }
                });
                acc(*beta, &mut |gb| {
                    for ch in 0..c {
                        gb[ch] += g[ch * t..(ch + 1) * t].iter().sum::<f64>();
                    }
                });
                acc(*x, &mut |gx| {
                    let n = (c * t) as f64;
                    let mut dxhat = vec![0.0; c * t];
                    for ch in 0..c {
                        for i in 0..t {
                            dxhat[ch * t + i] = g[ch * t + i] * gv[ch];
                        }
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
                    for i in 0..c * t {
                        gx[i] += inv_std * (dxhat[i] - s1 / n - xhat[i] * s2 / n);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = va.len().max(1) as f64;
                let k = 2.0 * g[0] / n;
                acc(*a, &mut |ga| {
                    for i in 0..va.len() {
                        ga[i] += k * (va[i] - vb[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..va.len() {
                        gb[i] -= k * (va[i] - vb[i]);
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
