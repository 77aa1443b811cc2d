//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are read
//! from a [`ParamStore`] without copying; [`Tape::backward`] returns gradients
//! for every parameter the pass touched.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

/// Named parameter matrices. Vectors are stored as `1 × n` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }
}

/// Gradient per parameter; `None` when the pass never used it.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Node handle on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a + 1·b` with `b` a single row
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Input handle and the elementwise derivative at the input.
    Gelu(Var, Array2<f64>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<f64>, rstd: Vec<f64> },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    RepeatRow(Var),
    CrossEntropy { logits: Var, label: usize, probs: Array2<f64> },
    MeanSquare(Var),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-6;

/// Value and derivative of the tanh-approximated GELU.
fn gelu(x: f64) -> (f64, f64) {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(512) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a.view(),
            (None, Op::Param(id)) => self.params.get(*id).view(),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) - &self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).mapv(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros(x.dim());
        let mut d = Array2::zeros(x.dim());
        ndarray::Zip::from(&mut v).and(&mut d).and(&x).for_each(|v, d, &x| (*v, *d) = gelu(x));
        self.push(v, Op::Gelu(a, d))
    }

    /// Per-row normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, f) = xv.dim();
        let mut xhat = Array2::zeros((n, f));
        let mut rstd = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Row-wise softmax. With `causal`, entry `(r, c)` is excluded for `c > r + offset`
    /// where `offset = cols - rows`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let av = self.value(a);
        let (n, m) = av.dim();
        let offset = m as isize - n as isize;
        let mut out = Array2::zeros((n, m));
        for r in 0..n {
            let limit = if causal { ((r as isize + offset + 1).max(0) as usize).min(m) } else { m };
            let row = av.row(r);
            let max = row.slice(s![..limit]).fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut sum = 0.0;
            for c in 0..limit {
                let e = (row[c] - max).exp();
                out[[r, c]] = e;
                sum += e;
            }
            for c in 0..limit {
                out[[r, c]] /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::GatherRows(a, rows))
    }

    /// Output row `r` is the mean of input rows `groups[r]` (each nonempty).
    pub fn group_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let av = self.value(a);
        let f = av.ncols();
        let mut out = Array2::zeros((groups.len(), f));
        for (r, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "group_mean with an empty group");
            let mut row = out.row_mut(r);
            for &i in g {
                row += &av.row(i);
            }
            row /= g.len() as f64;
        }
        self.push(out, Op::GroupMean(a, groups))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        self.group_mean(a, vec![(0..n).collect()])
    }

    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1);
        let v = Array2::from_shape_fn((n, row.ncols()), |(_, c)| row[[0, c]]);
        self.push(v, Op::RepeatRow(a))
    }

    /// Negative log-likelihood of `label` under softmax of a `1 × C` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), 1);
        let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps = z.mapv(|v| (v - max).exp());
        let sum = exps.sum();
        let loss = max + sum.ln() - z[[0, label]];
        let probs = exps / sum;
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy { logits, label, probs })
    }

    /// Mean of squared entries, as a `1 × 1` value.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av.iter().map(|x| x * x).sum::<f64>() / av.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSquare(a))
    }

    /// Backpropagates from the scalar `output` and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::zeros_like(self.params);
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(&self.value(*b));
                    let gb = g.t().dot(&self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.mapv(|v| v * s)),
                Op::Gelu(a, d) => {
                    let mut ga = g;
                    ga *= d;
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gamma = self.value(*gain);
                    let f = xhat.ncols() as f64;
                    acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * &gamma;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = dr.sum() / f;
                        let m2 = dr.dot(&xr) / f;
                        for ((o, &d), &xh) in gx.row_mut(r).iter_mut().zip(dr).zip(xr) {
                            *o = rstd[r] * (d - m1 - xh * m2);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let p = self.nodes[idx].value.as_ref().unwrap();
                    let mut ga = &g * p;
                    for (mut row, prow) in ga.rows_mut().into_iter().zip(p.rows()) {
                        let dot = row.sum();
                        row.scaled_add(-dot, &prow);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (n, m) = self.shape(*a);
                    let mut ga = Array2::zeros((n, m));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GroupMean(a, groups) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, grp) in groups.iter().enumerate() {
                        let w = 1.0 / grp.len() as f64;
                        for &i in grp {
                            ga.row_mut(i).scaled_add(w, &g.row(r));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RepeatRow(a) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let mut gz = probs.clone();
                    gz[[0, *label]] -= 1.0;
                    gz *= g[[0, 0]];
                    acc(&mut grads, *logits, gz);
                }
                Op::MeanSquare(a) => {
                    let av = self.value(*a);
                    let w = 2.0 * g[[0, 0]] / av.len() as f64;
                    acc(&mut grads, *a, av.mapv(|v| v * w));
                }
            }
        }
        out
    }
}
