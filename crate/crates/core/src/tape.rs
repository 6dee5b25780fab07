//! A small reverse-mode automatic differentiation tape over `f64` matrices.
//!
//! Every value is a 2D array. Parameters live in a [`ParamStore`] and are
//! referenced by the tape without copying; intermediate values are owned by
//! the tape. [`Tape::backward`] seeds the gradient of one output node with an
//! arbitrary upstream matrix, which lets losses with hand-written gradients
//! (see [`crate::loss::RelativeObjective`]) drive the network.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Overwrites values by name; every stored name must be present in
    /// `other` with the same shape.
    pub fn load_from(&mut self, other: &[(String, Array2<f64>)]) -> Result<()> {
        let lookup: HashMap<&str, &Array2<f64>> =
            other.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            if src.dim() != value.dim() {
                return Err(Error::Incompatible(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    value.dim(),
                    src.dim()
                )));
            }
            value.assign(src);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape bookkeeping for batched multi-head attention over row-stacked
/// sequences: queries are `batch * q_len` rows, keys/values `batch * k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    AddRow(usize, usize),
    AddConst(usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: AttnSpec,
        probs: Vec<Array2<f64>>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    FillRows {
        fill: usize,
        rows: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Array2<f64>,
    },
    CrossEntropy {
        logits: usize,
        probs: Array2<f64>,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients for every parameter touched by a tape, indexed by [`ParamId`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds these gradients into dense per-parameter buffers.
    pub fn accumulate_into(&self, buffers: &mut [Array2<f64>]) {
        for (g, buf) in self.grads.iter().zip(buffers.iter_mut()) {
            if let Some(g) = g {
                *buf += g;
            }
        }
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.val(v.0)
    }

    fn val(&self, v: usize) -> &Array2<f64> {
        match (&self.nodes[v].value, &self.nodes[v].op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// The parameter as a tape leaf; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a.0).dot(self.val(b.0));
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::MatMul(a.0, b.0), rg)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.val(x.0).dot(self.val(w.0));
        if let Some(b) = b {
            out += &self.val(b.0).row(0);
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a.0) + self.val(b.0);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Add(a.0, b.0), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.val(a.0) + &self.val(row.0).row(0);
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(out, Op::AddRow(a.0, row.0), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let out = self.val(a.0) + c;
        let rg = self.rg(a.0);
        self.push(out, Op::AddConst(a.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a.0) * self.val(b.0);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a.0) * s;
        let rg = self.rg(a.0);
        self.push(out, Op::Scale(a.0, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a.0).mapv(|v| v.max(0.0));
        let rg = self.rg(a.0);
        self.push(out, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a.0).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(a.0);
        self.push(out, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a.0).mapv(f64::tanh);
        let rg = self.rg(a.0);
        self.push(out, Op::Tanh(a.0), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.val(x.0);
        let n = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * &self.val(gamma.0).row(0) + self.val(beta.0).row(0);
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Scaled dot-product attention for every `(sequence, head)` pair.
    /// `q`, `k`, `v` are already projected; heads split the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        let d = qv.ncols();
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible into {} heads",
                spec.heads
            )));
        }
        if qv.nrows() != spec.batch * spec.q_len
            || kv.nrows() != spec.batch * spec.k_len
            || vv.nrows() != kv.nrows()
            || kv.ncols() != d
            || vv.ncols() != d
        {
            return Err(Error::shape(
                format!(
                    "q {}x{d}, k/v {}x{d}",
                    spec.batch * spec.q_len,
                    spec.batch * spec.k_len
                ),
                format!("q {:?}, k {:?}, v {:?}", qv.dim(), kv.dim(), vv.dim()),
            ));
        }
        if spec.causal && spec.q_len != spec.k_len {
            return Err(Error::Contract(
                "causal attention needs equal query and key lengths".into(),
            ));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(spec.batch * spec.heads);
        for b in 0..spec.batch {
            let (q0, k0) = (b * spec.q_len, b * spec.k_len);
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![q0..q0 + spec.q_len, cols.clone()]);
                let ks = kv.slice(s![k0..k0 + spec.k_len, cols.clone()]);
                let vs = vv.slice(s![k0..k0 + spec.k_len, cols.clone()]);
                let mut scores = qs.dot(&ks.t());
                scores *= scale;
                softmax_rows(&mut scores, spec.causal);
                out.slice_mut(s![q0..q0 + spec.q_len, cols])
                    .assign(&scores.dot(&vs));
                probs.push(scores);
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                spec,
                probs,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.val(x.0).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x.0);
        self.push(out, Op::SliceCols { x: x.0, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.val(p.0).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    /// Row `r` of the output is row `rows[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.val(x.0).select(Axis(0), rows);
        let rg = self.rg(x.0);
        self.push(
            out,
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// `base` with each row listed in `rows` overwritten by the single row of
    /// `fill`.
    pub fn fill_rows(&mut self, base: Array2<f64>, fill: Var, rows: &[usize]) -> Var {
        let mut out = base;
        {
            let f = self.val(fill.0).row(0);
            for &r in rows {
                out.row_mut(r).assign(&f);
            }
        }
        let rg = self.rg(fill.0);
        self.push(
            out,
            Op::FillRows {
                fill: fill.0,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or
    /// `1 / keep_prob`).
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let out = self.val(x.0) * &mask;
        let rg = self.rg(x.0);
        self.push(out, Op::Dropout { x: x.0, mask }, rg)
    }

    /// Mean softmax cross-entropy of each logits row against its target
    /// class; returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.val(logits.0);
        if lv.nrows() != targets.len() {
            return Err(Error::shape(lv.nrows(), targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.ncols()) {
            return Err(Error::Contract(format!("target class {t} out of range")));
        }
        let mut probs = lv.to_owned();
        softmax_rows(&mut probs, false);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[[r, t]].max(1e-300).ln())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits.0);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates `seed` (same shape as `out`) through the tape.
    pub fn backward(mut self, out: Var, seed: Array2<f64>) -> Result<Gradients> {
        if seed.dim() != self.val(out.0).dim() {
            return Err(Error::shape(
                format!("{:?}", self.val(out.0).dim()),
                format!("{:?}", seed.dim()),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=out.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
            match &op {
                Op::Constant => {}
                Op::Param(id) => {
                    param_grads[id.0] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.val(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.val(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    if self.rg(*x) {
                        let gx = g.dot(&self.val(*w).t());
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        let gw = self.val(*x).t().dot(&g);
                        acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = &g * self.val(*b);
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = &g * self.val(*a);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.val(*a))
                        .for_each(|gv, &x| {
                            if x <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.rg(*x) {
                        let n = xhat.ncols() as f64;
                        let dxhat = &g * &self.val(*gamma).row(0);
                        let sum_d = dxhat.sum_axis(Axis(1));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(1));
                        let mut gx = dxhat * n;
                        gx -= &sum_d.insert_axis(Axis(1));
                        gx -= &(xhat * &sum_dx.insert_axis(Axis(1)));
                        gx *= &(inv_std / n).insert_axis(Axis(1));
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        self.val(*q),
                        self.val(*k),
                        self.val(*v),
                        spec,
                        probs,
                    );
                    if self.rg(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if self.rg(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.val(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.val(p).ncols();
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let mut gx = Array2::zeros(self.val(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::FillRows { fill, rows } => {
                    let mut gf = Array2::zeros((1, g.ncols()));
                    for &r in rows {
                        let mut dst = gf.row_mut(0);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *fill, gf);
                }
                Op::Dropout { x, mask } => acc(&mut grads, *x, g * mask),
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= 1.0;
                    }
                    gl *= scale;
                    acc(&mut grads, *logits, gl);
                }
            }
            self.nodes[i].op = op;
        }
        Ok(Gradients { grads: param_grads })
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// In-place numerically stable softmax over each row, optionally masking
/// entries above the diagonal.
pub(crate) fn softmax_rows(m: &mut Array2<f64>, causal: bool) {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row
            .iter()
            .take(limit)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn attention_backward(
    g: &Array2<f64>,
    qv: &Array2<f64>,
    kv: &Array2<f64>,
    vv: &Array2<f64>,
    spec: &AttnSpec,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = qv.ncols();
    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Array2::zeros(qv.raw_dim());
    let mut gk = Array2::zeros(kv.raw_dim());
    let mut gv = Array2::zeros(vv.raw_dim());
    for b in 0..spec.batch {
        let (q0, k0) = (b * spec.q_len, b * spec.k_len);
        for h in 0..spec.heads {
            let p = &probs[b * spec.heads + h];
            let cols = h * dh..(h + 1) * dh;
            let qrows = q0..q0 + spec.q_len;
            let krows = k0..k0 + spec.k_len;
            let go = g.slice(s![qrows.clone(), cols.clone()]);
            let qs = qv.slice(s![qrows.clone(), cols.clone()]);
            let ks = kv.slice(s![krows.clone(), cols.clone()]);
            let vs = vv.slice(s![krows.clone(), cols.clone()]);

            gv.slice_mut(s![krows.clone(), cols.clone()])
                .assign(&p.t().dot(&go));
            let dp = go.dot(&vs.t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp - &row_dot.insert_axis(Axis(1));
            ds *= p;
            ds *= scale;
            gq.slice_mut(s![qrows, cols.clone()]).assign(&ds.dot(&ks));
            gk.slice_mut(s![krows, cols]).assign(&ds.t().dot(&qs));
        }
    }
    (gq, gk, gv)
}
