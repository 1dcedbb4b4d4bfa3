//! Tape-based reverse-mode differentiation.
//!
//! Every primitive applied through a [`Tape`] appends a node holding its
//! output value and the state its vector-Jacobian product needs. Backward
//! replays the nodes in reverse recording order, which is a reverse
//! topological order because a node can only consume earlier nodes.
//!
//! Index selections (KNN tables, max routing) are constants of the forward
//! pass. A tape can record them and a later tape can replay them, which is
//! how finite-difference checks hold the graph fixed while perturbing
//! parameters.

use std::collections::HashMap;
use std::sync::Arc;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{self, gelu_grad_scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Vector-Jacobian product of a custom op: `(grad_out, inputs, output) -> grads per input`.
pub type VjpFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

enum Op {
    Input,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    RowDot { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Sigmoid(Var),
    Gelu(Var),
    RowNormalize(Var, f64),
    Concat(Vec<Var>),
    MeanPoolRows(Var),
    WindowPool { x: Var, grid: (usize, usize) },
    MaxOverSet { xs: Vec<Var>, argmax: Arc<[usize]> },
    GroupGather(GatherSpec),
    Reshape(Var),
    Custom { inputs: Vec<Var>, vjp: VjpFn },
}

#[derive(Clone)]
struct GatherSpec {
    src: Var,
    table: Arc<[usize]>,
    groups: usize,
    k: usize,
    slot: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered list of index tables captured from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct RoutingLog(pub Vec<Arc<[usize]>>);

enum Routing {
    Free,
    Record(Vec<Arc<[usize]>>),
    Replay { log: RoutingLog, cursor: usize },
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    routing: Routing,
    gelu_fault: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            routing: Routing::Free,
            gelu_fault: false,
        }
    }

    /// A tape that only evaluates; backward is unavailable.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// A tape that records every index table it routes through.
    pub fn recording() -> Self {
        Self {
            routing: Routing::Record(Vec::new()),
            ..Self::new()
        }
    }

    /// A tape that reuses index tables from an earlier recording, in order.
    pub fn replaying(log: RoutingLog) -> Self {
        Self {
            routing: Routing::Replay { log, cursor: 0 },
            ..Self::new()
        }
    }

    /// Turns off recording for backward on an existing configuration.
    pub fn without_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Breaks the GELU derivative on purpose. Used as a negative control for
    /// gradient checks.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.gelu_fault = true;
    }

    /// Returns the recorded routing (empty unless the tape was recording).
    pub fn take_routing(&mut self) -> RoutingLog {
        match std::mem::replace(&mut self.routing, Routing::Free) {
            Routing::Record(v) => RoutingLog(v),
            _ => RoutingLog::default(),
        }
    }

    /// Produces an index table: computes it, or takes the next one from a
    /// replayed log. Recording tapes keep a copy.
    pub fn routed(
        &mut self,
        compute: impl FnOnce() -> Result<Vec<usize>>,
    ) -> Result<Arc<[usize]>> {
        match &mut self.routing {
            Routing::Free => Ok(compute()?.into()),
            Routing::Record(log) => {
                let t: Arc<[usize]> = compute()?.into();
                log.push(t.clone());
                Ok(t)
            }
            Routing::Replay { log, cursor } => {
                let t = log.0.get(*cursor).cloned().ok_or_else(|| {
                    Error::Contract("replayed routing log exhausted".into())
                })?;
                *cursor += 1;
                Ok(t)
            }
        }
    }

    pub fn is_replaying(&self) -> bool {
        matches!(self.routing, Routing::Replay { .. })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let op = if needs_grad { op } else { Op::Input };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = tensor::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// `out[r] = x[r] . w[r] + b[r]` for matrices `x`, `w` of equal shape.
    pub fn row_dot(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape() != wv.shape() || xv.shape().len() != 2 {
            return Err(Error::shape("row_dot", xv.shape(), wv.shape()));
        }
        if bv.numel() != xv.rows() {
            return Err(Error::shape("row_dot bias", xv.shape(), bv.shape()));
        }
        let out: Vec<f64> = (0..xv.rows())
            .map(|r| {
                xv.row(r).iter().zip(wv.row(r)).map(|(a, b)| a * b).sum::<f64>() + bv.data()[r]
            })
            .collect();
        let n = out.len();
        Ok(self.push(Tensor::new(&[n], out)?, Op::RowDot { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = tensor::add(self.value(x), self.value(y))?;
        Ok(self.push(out, Op::Add(x, y), &[x, y]))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = tensor::sub(self.value(x), self.value(y))?;
        Ok(self.push(out, Op::Sub(x, y), &[x, y]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let out = tensor::row_normalize(self.value(x), eps)?;
        Ok(self.push(out, Op::RowNormalize(x, eps), &[x]))
    }

    pub fn concat_last_dim(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_last_dim(&vals)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::mean_pool_rows(self.value(x))?;
        Ok(self.push(out, Op::MeanPoolRows(x), &[x]))
    }

    pub fn window_mean_pool(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let out = tensor::window_mean_pool(self.value(x), grid)?;
        Ok(self.push(out, Op::WindowPool { x, grid }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Elementwise maximum over `xs`; the per-element winner is a routed
    /// index table, so it is frozen under replay.
    pub fn max_over_set(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Argument("max_over_set needs at least one tensor".into()));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let argmax = if self.is_replaying() {
            None
        } else {
            let vals: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
            Some(tensor::max_over_set(&vals)?)
        };
        let (out, arg) = match argmax {
            Some((out, arg)) => {
                let arg = self.routed(|| Ok(arg))?;
                (out, arg)
            }
            None => {
                let arg = self.routed(|| unreachable!("replay never computes"))?;
                let n: usize = shape.iter().product();
                if arg.len() != n || arg.iter().any(|&a| a >= xs.len()) {
                    return Err(Error::Contract("replayed argmax table does not fit".into()));
                }
                for v in xs {
                    if self.value(*v).shape() != shape.as_slice() {
                        return Err(Error::shape("max_over_set", &shape, self.value(*v).shape()));
                    }
                }
                let data = arg
                    .iter()
                    .enumerate()
                    .map(|(e, &a)| self.value(xs[a]).data()[e])
                    .collect();
                (Tensor::new(&shape, data)?, arg)
            }
        };
        Ok(self.push(
            out,
            Op::MaxOverSet {
                xs: xs.to_vec(),
                argmax: arg,
            },
            xs,
        ))
    }

    /// Gathers, for every destination row `i` and group `g`, the group-`g`
    /// column slice of source row `table[(g * n_dest + i) * k + slot]`.
    /// Output is `[n_dest, C]`.
    pub fn group_gather(
        &mut self,
        src: Var,
        table: Arc<[usize]>,
        groups: usize,
        k: usize,
        slot: usize,
    ) -> Result<Var> {
        let sv = self.value(src);
        let (n_src, c) = (sv.rows(), sv.cols());
        if groups == 0 || c % groups != 0 || k == 0 || slot >= k || table.len() % (groups * k) != 0
        {
            return Err(Error::Argument(format!(
                "group_gather: C={c} groups={groups} k={k} slot={slot} table={}",
                table.len()
            )));
        }
        let n_dest = table.len() / (groups * k);
        let cg = c / groups;
        let mut out = vec![0.0; n_dest * c];
        for g in 0..groups {
            for i in 0..n_dest {
                let s = table[(g * n_dest + i) * k + slot];
                assert!(s < n_src, "neighbor index {s} out of range {n_src}");
                out[i * c + g * cg..i * c + (g + 1) * cg]
                    .copy_from_slice(&sv.row(s)[g * cg..(g + 1) * cg]);
            }
        }
        let spec = GatherSpec {
            src,
            table,
            groups,
            k,
            slot,
        };
        Ok(self.push(Tensor::new(&[n_dest, c], out)?, Op::GroupGather(spec), &[src]))
    }

    /// Records an op whose value the caller already computed, with its own VJP.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: VjpFn) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar node. Returns gradients for every parameter
    /// leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let max_param = self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut out = Gradients(vec![None; max_param]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.vjp(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vjp(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut out.0[id.0] {
                Some(a) => a.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            },
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, cin) = (xv.rows(), xv.cols());
                let cout = wv.cols();
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * cin];
                    for r in 0..n {
                        let grow = g.row(r);
                        for i in 0..cin {
                            let wrow = &wv.data()[i * cout..(i + 1) * cout];
                            dx[r * cin + i] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(*x, Tensor::new(xv.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; cin * cout];
                    for r in 0..n {
                        let grow = g.row(r);
                        for (i, &xi) in xv.row(r).iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, gv) in dw[i * cout..(i + 1) * cout].iter_mut().zip(grow) {
                                *d += xi * gv;
                            }
                        }
                    }
                    acc(*w, Tensor::new(wv.shape(), dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; cout];
                    for r in 0..n {
                        for (d, gv) in db.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape(), db)?);
                }
            }
            Op::RowDot { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = xv.cols();
                let gd = g.data();
                if self.needs(*x) {
                    let mut dx = wv.clone();
                    for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|v| *v *= gd[r]);
                    }
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = xv.clone();
                    for (r, row) in dw.data_mut().chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|v| *v *= gd[r]);
                    }
                    acc(*w, dw);
                }
                if self.needs(*b) {
                    acc(*b, Tensor::new(self.value(*b).shape(), gd.to_vec())?);
                }
            }
            Op::Add(x, y) => {
                acc(*x, g.clone());
                acc(*y, g.clone());
            }
            Op::Sub(x, y) => {
                acc(*x, g.clone());
                acc(*y, g.map(|v| -v));
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gv)| gv * y * (1.0 - y))
                    .collect();
                acc(*x, Tensor::new(g.shape(), data)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let fault = self.gelu_fault;
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, gv)| {
                        let d = gelu_grad_scalar(xi);
                        gv * if fault { d * 1.01 } else { d }
                    })
                    .collect();
                acc(*x, Tensor::new(g.shape(), data)?);
            }
            Op::RowNormalize(x, eps) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let yr = node.value.row(r);
                    let gr = g.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let d = &mut dx[r * c..(r + 1) * c];
                    if norm > *eps {
                        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] = (gr[j] - yr[j] * yg) / norm;
                        }
                    } else {
                        for j in 0..c {
                            d[j] = gr[j] / eps;
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Concat(xs) => {
                let rows = g.rows();
                let mut offset = 0;
                for v in xs {
                    let w = self.value(*v).cols();
                    if self.needs(*v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(*v, Tensor::new(&[rows, w], d)?);
                    }
                    offset += w;
                }
            }
            Op::MeanPoolRows(x) => {
                let xv = self.value(*x);
                let inv = 1.0 / xv.rows() as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                let data = row.iter().copied().cycle().take(xv.numel()).collect();
                acc(*x, Tensor::new(xv.shape(), data)?);
            }
            Op::WindowPool { x, grid } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let (h, w) = *grid;
                let ow = w / 2;
                let mut dx = vec![0.0; xv.numel()];
                for y in 0..h {
                    for x_ in 0..w {
                        let src = g.row((y / 2) * ow + x_ / 2);
                        let d = &mut dx[(y * w + x_) * c..(y * w + x_ + 1) * c];
                        for (a, b) in d.iter_mut().zip(src) {
                            *a = 0.25 * b;
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::MaxOverSet { xs, argmax } => {
                let mut parts: Vec<Option<Vec<f64>>> = vec![None; xs.len()];
                for (e, (&a, gv)) in argmax.iter().zip(g.data()).enumerate() {
                    if self.needs(xs[a]) {
                        parts[a].get_or_insert_with(|| vec![0.0; g.numel()])[e] += gv;
                    }
                }
                for (v, p) in xs.iter().zip(parts) {
                    if let Some(p) = p {
                        acc(*v, Tensor::new(g.shape(), p)?);
                    }
                }
            }
            Op::GroupGather(spec) => {
                let sv = self.value(spec.src);
                let c = sv.cols();
                let cg = c / spec.groups;
                let n_dest = g.rows();
                let mut d = vec![0.0; sv.numel()];
                for grp in 0..spec.groups {
                    for i in 0..n_dest {
                        let s = spec.table[(grp * n_dest + i) * spec.k + spec.slot];
                        let dst = &mut d[s * c + grp * cg..s * c + (grp + 1) * cg];
                        for (a, b) in dst.iter_mut().zip(&g.row(i)[grp * cg..(grp + 1) * cg]) {
                            *a += b;
                        }
                    }
                }
                acc(spec.src, Tensor::new(sv.shape(), d)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(&shape)?);
            }
            Op::Custom { inputs, vjp } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = vjp(g, &vals, &node.value)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Contract("custom vjp arity mismatch".into()));
                }
                for (v, t) in inputs.iter().zip(gs) {
                    if t.shape() != self.value(*v).shape() {
                        return Err(Error::shape("custom vjp", self.value(*v).shape(), t.shape()));
                    }
                    acc(*v, t);
                }
            }
        }
        Ok(())
    }
}

/// Runs backward from `loss` and adds the result into `store`'s gradients.
pub fn backward(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    let grads = tape.backward(loss)?;
    store.accumulate(&grads, 1.0);
    Ok(())
}
