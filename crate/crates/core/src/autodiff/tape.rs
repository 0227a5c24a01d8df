use super::special;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    AddRow(Var, Var),
    Outer(Var, Var),
    SumRows(Var),
    RepeatCols(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    StopGrad,
    Lgamma(Var),
    Digamma(Var),
    Gather(Vec<Var>, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    // Some ancestor (or the node itself) is a leaf that wants a gradient.
    tracked: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tracked node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Accumulates the gradient reaching `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        debug_assert!(is_scalar(self.shape(v)));
        self.nodes[v.0].value[0]
    }

    /// Copies a node's value out as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let tracked = match &op {
            Op::Leaf | Op::StopGrad => false,
            Op::Gather(inputs, _) => inputs.iter().any(|v| self.nodes[v.0].tracked),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Outer(a, b) => self.nodes[a.0].tracked || self.nodes[b.0].tracked,
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::RepeatCols(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Lgamma(a)
            | Op::Digamma(a) => self.nodes[a.0].tracked,
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self
            .push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
            .expect("tensor values are finite");
        self.nodes[v.0].tracked = t.requires_grad();
        v
    }

    /// Records a tensor as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].tracked = true;
        v
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].tracked = false;
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not a matrix")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(a), r, c);
        self.push("transpose", vec![c, r], out, Op::Transpose(a))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || is_scalar(sb) {
            Ok(sa.to_vec())
        } else if is_scalar(sa) {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        let shape = self.binary_shape(op, a, b)?;
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..n)
            .map(|i| f(va[if va.len() == 1 { 0 } else { i }], vb[if vb.len() == 1 { 0 } else { i }]))
            .collect();
        self.push(op, shape, out, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + c).collect();
        self.push("add_scalar", self.shape(a).to_vec(), out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.push("exp", self.shape(a).to_vec(), out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        self.push("log", self.shape(a).to_vec(), out, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push("relu", self.shape(a).to_vec(), out, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a))
    }

    /// `a[B×n] + b[n]`, adding `b` to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || numel(sb) != sa[1] {
            return Err(Error::shape("add_row", format!("{sa:?} + row {sb:?}")));
        }
        let n = sa[1];
        let vb = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb[i % n])
            .collect();
        self.push("add_row", sa.to_vec(), out, Op::AddRow(a, b))
    }

    /// Outer product `a bᵀ` of two vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, n) = (va.len(), vb.len());
        let mut out = Vec::with_capacity(m * n);
        for x in va {
            out.extend(vb.iter().map(|y| x * y));
        }
        self.push("outer", vec![m, n], out, Op::Outer(a, b))
    }

    /// Row sums of a matrix: `[B×K] -> [B]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("sum_rows", format!("{s:?} is not a matrix")));
        }
        let (r, c) = (s[0], s[1]);
        let out = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        self.push("sum_rows", vec![r], out, Op::SumRows(a))
    }

    /// Repeats a length-`B` vector across `cols` columns: `[B] -> [B×cols]`.
    pub fn repeat_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        if cols == 0 {
            return Err(Error::shape("repeat_cols", "zero columns"));
        }
        let v = self.value(a);
        let r = v.len();
        let out = v.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        self.push("repeat_cols", vec![r, cols], out, Op::RepeatCols(a))
    }

    fn check_tau(op: &'static str, tau: f64) -> Result<()> {
        if tau > 0.0 && tau.is_finite() {
            Ok(())
        } else {
            Err(Error::domain(op, format!("temperature must be > 0, got {tau}")))
        }
    }

    fn rows_of(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match self.shape(a) {
            [k] => Ok((1, *k)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("{s:?}"))),
        }
    }

    /// Row-wise `softmax(a / tau)` with max-subtraction.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        Self::check_tau("softmax", tau)?;
        let (_, c) = self.rows_of("softmax", a)?;
        let out = softmax_rows(self.value(a), c, tau);
        self.push("softmax", self.shape(a).to_vec(), out, Op::Softmax(a, tau))
    }

    /// Row-wise `log softmax(a / tau)`.
    pub fn log_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        Self::check_tau("log_softmax", tau)?;
        let (_, c) = self.rows_of("log_softmax", a)?;
        let out = log_softmax_rows(self.value(a), c, tau);
        self.push("log_softmax", self.shape(a).to_vec(), out, Op::LogSoftmax(a, tau))
    }

    /// Forward identity that blocks gradient flow to its input.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).to_vec();
        self.push("stop_grad", self.shape(a).to_vec(), out, Op::StopGrad)
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| special::lgamma(x))
            .collect::<Result<Vec<_>>>()?;
        self.push("lgamma", self.shape(a).to_vec(), out, Op::Lgamma(a))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| special::digamma(x))
            .collect::<Result<Vec<_>>>()?;
        self.push("digamma", self.shape(a).to_vec(), out, Op::Digamma(a))
    }

    /// Per-row selection across same-shaped matrices: row `b` of the output
    /// is row `b` of `inputs[choice[b]]`.
    pub fn gather_rows(&mut self, inputs: &[Var], choice: &[usize]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("gather_rows", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        if inputs.iter().any(|&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::shape("gather_rows", "input shapes differ"));
        }
        let (r, c) = self.rows_of("gather_rows", first)?;
        if choice.len() != r {
            return Err(Error::shape("gather_rows", format!("{} choices for {r} rows", choice.len())));
        }
        if let Some(bad) = choice.iter().find(|&&m| m >= inputs.len()) {
            return Err(Error::shape("gather_rows", format!("choice {bad} out of range")));
        }
        let mut out = Vec::with_capacity(r * c);
        for (b, &m) in choice.iter().enumerate() {
            out.extend_from_slice(&self.value(inputs[m])[b * c..(b + 1) * c]);
        }
        self.push("gather_rows", shape, out, Op::Gather(inputs.to_vec(), choice.to_vec()))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if !is_scalar(self.shape(out)) {
            return Err(Error::shape("backward", format!("output shape {:?} is not scalar", self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Untracked leaves (constants) never receive gradients.
        for (i, n) in self.nodes.iter().enumerate().take(out.0 + 1) {
            if !n.tracked {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if tracked(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if tracked(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                send(*a, transpose_raw(g, s[1], s[0]));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, reduce_broadcast(g, self.value(*a).len()));
                let gb = reduce_broadcast(g, self.value(*b).len());
                send(*b, gb.into_iter().map(|x| sign * x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let at = |v: &[f64], i: usize| v[if v.len() == 1 { 0 } else { i }];
                if tracked(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(vb, i)).collect();
                    send(*a, reduce_broadcast(&full, va.len()));
                }
                if tracked(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(va, i)).collect();
                    send(*b, reduce_broadcast(&full, vb.len()));
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Exp(a) => send(*a, g.iter().zip(&node.value).map(|(gi, y)| gi * y).collect()),
            Op::Log(a) => send(*a, g.iter().zip(self.value(*a)).map(|(gi, x)| gi / x).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::AddRow(a, b) => {
                send(*a, g.to_vec());
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                send(*b, gb);
            }
            Op::Outer(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = vb.len();
                if tracked(*a) {
                    let ga = g.chunks(n).map(|row| row.iter().zip(vb).map(|(x, y)| x * y).sum()).collect();
                    send(*a, ga);
                }
                if tracked(*b) {
                    let mut gb = vec![0.0; n];
                    for (row, x) in g.chunks(n).zip(va) {
                        gb.iter_mut().zip(row).for_each(|(s, r)| *s += r * x);
                    }
                    send(*b, gb);
                }
            }
            Op::SumRows(a) => {
                let c = self.shape(*a)[1];
                send(*a, g.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect());
            }
            Op::RepeatCols(a) => {
                let c = node.shape[1];
                send(*a, g.chunks(c).map(|row| row.iter().sum()).collect());
            }
            Op::Softmax(a, tau) => {
                let c = *node.shape.last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(node.value.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot) / tau));
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a, tau) => {
                let c = *node.shape.last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, lr) in g.chunks(c).zip(node.value.chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(lr).map(|(x, l)| (x - l.exp() * total) / tau));
                }
                send(*a, ga);
            }
            Op::Lgamma(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gi, &x)| gi * special::digamma(x).expect("validated in forward"))
                    .collect();
                send(*a, ga);
            }
            Op::Digamma(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gi, &x)| gi * special::trigamma(x).expect("validated in forward"))
                    .collect();
                send(*a, ga);
            }
            Op::Gather(inputs, choice) => {
                let c = *node.shape.last().unwrap();
                for (m, &v) in inputs.iter().enumerate() {
                    if !tracked(v) {
                        continue;
                    }
                    let mut gm = vec![0.0; g.len()];
                    for (b, _) in choice.iter().enumerate().filter(|(_, &k)| k == m) {
                        gm[b * c..(b + 1) * c].copy_from_slice(&g[b * c..(b + 1) * c]);
                    }
                    send(v, gm);
                }
            }
        }
    }
}

fn reduce_broadcast(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
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

pub(crate) fn softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| ((v - max) / tau).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|p| *p /= z);
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| (v - max) / tau - lse));
    }
    out
}
