use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use super::gumbel::GumbelMode;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        a: Var,
        start: usize,
        len: usize,
    },
    LogSoftmax(Var),
    PairLogSoftmax(Var),
    Pick {
        a: Var,
        cols: Vec<usize>,
    },
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    KlBernoulli {
        logq: Var,
        prior: Var,
    },
    Gumbel {
        logq: Var,
        tau: Var,
        perturbed: Array2<f64>,
        soft: Array2<f64>,
        tau_eff: f64,
        clamped: bool,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameters, which are read through the store.
    value: Option<Array2<f64>>,
}

/// Record of a forward computation.
///
/// Values are matrices whose rows index the batch. The tape borrows the
/// parameter store for its whole lifetime; [`Tape::backward`] consumes it.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Array2<f64>)>,
    leaves: HashMap<Var, Array2<f64>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient with respect to a value created by [`Tape::leaf`].
    pub fn wrt(&self, var: Var) -> Option<&Array2<f64>> {
        self.leaves.get(&var)
    }
}

fn shape_of(a: &Array2<f64>) -> Vec<usize> {
    a.shape().to_vec()
}

fn pair_log_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        for pair in row.as_slice_mut().expect("row-major").chunks_exact_mut(2) {
            let m = pair[0].max(pair[1]);
            let lse = m + ((pair[0] - m).exp() + (pair[1] - m).exp()).ln();
            pair[0] -= lse;
            pair[1] -= lse;
        }
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// ln σ(x) computed without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0] {
            Node {
                op: Op::Param(id), ..
            } => self.store.value(*id),
            Node {
                value: Some(val), ..
            } => val,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(Error::InvalidArgument(format!(
                "variable {} does not belong to this tape",
                v.0
            ))),
            None => Ok(()),
        }
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Constant, value)
    }

    /// Input whose gradient is reported through [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Records (once) a reference to a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `y = x Wᵀ + b` for a batch of row vectors `x` and `W` of shape
    /// `out × in`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(&[x, w])?;
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.ncols() {
            return Err(Error::Shape {
                op: "affine",
                lhs: shape_of(xv),
                rhs: shape_of(wv),
            });
        }
        let mut y = xv.dot(&wv.t());
        if let Some(b) = b {
            self.check(&[b])?;
            let bv = self.value(b);
            if bv.shape() != [1, wv.nrows()] {
                return Err(Error::Shape {
                    op: "affine bias",
                    lhs: shape_of(bv),
                    rhs: vec![1, wv.nrows()],
                });
            }
            y += bv;
        }
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    /// Plain matrix product `a b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: shape_of(av),
                rhs: shape_of(bv),
            });
        }
        let y = av.dot(bv);
        Ok(self.push(Op::MatMul { a, b }, y))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(&[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                lhs: shape_of(av),
                rhs: shape_of(bv),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a, b), y))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(&[a])?;
        let y = self.value(a) * k;
        Ok(self.push(Op::Scale(a, k), y))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let y = self.value(a).mapv(sigmoid);
        Ok(self.push(Op::Sigmoid(a), y))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let y = self.value(a).mapv(f64::tanh);
        Ok(self.push(Op::Tanh(a), y))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let y = self.value(a).mapv(f64::exp);
        Ok(self.push(Op::Exp(a), y))
    }

    /// Row lookup: output row `r` is `table[rows[r]]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let tv = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= tv.nrows()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for table with {} rows",
                tv.nrows()
            )));
        }
        let y = tv.select(Axis(0), rows);
        Ok(self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            y,
        ))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let rows = self.value(parts[0]).nrows();
        for &p in parts {
            if self.value(p).nrows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: shape_of(self.value(parts[0])),
                    rhs: shape_of(self.value(p)),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(Op::Concat(parts.to_vec()), y))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let av = self.value(a);
        if start + len > av.ncols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: shape_of(av),
                rhs: vec![start, len],
            });
        }
        let y = av.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(Op::Slice { a, start, len }, y))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let y = log_softmax_rows(self.value(a));
        Ok(self.push(Op::LogSoftmax(a), y))
    }

    /// Log-softmax over consecutive column pairs `(2t, 2t+1)`.
    pub fn pair_log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let av = self.value(a);
        if !av.ncols().is_multiple_of(2) {
            return Err(Error::Shape {
                op: "pair_log_softmax",
                lhs: shape_of(av),
                rhs: vec![2],
            });
        }
        let y = pair_log_softmax(av);
        Ok(self.push(Op::PairLogSoftmax(a), y))
    }

    /// Column `cols[r]` of each row `r`, as a column vector.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let av = self.value(a);
        if cols.len() != av.nrows() {
            return Err(Error::Shape {
                op: "pick",
                lhs: shape_of(av),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= av.ncols()) {
            return Err(Error::InvalidArgument(format!(
                "pick column {bad} out of range for {} columns",
                av.ncols()
            )));
        }
        let y = Array2::from_shape_fn((av.nrows(), 1), |(r, _)| av[[r, cols[r]]]);
        Ok(self.push(
            Op::Pick {
                a,
                cols: cols.to_vec(),
            },
            y,
        ))
    }

    /// Row sums as a column vector.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let y = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(Op::SumCols(a), y))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        Ok(self.push(Op::Sum(a), y))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::InvalidArgument("mean of empty value".into()));
        }
        let y = Array2::from_elem((1, 1), av.sum() / av.len() as f64);
        Ok(self.push(Op::Mean(a), y))
    }

    /// Per-row KL divergence between factorized Bernoulli posteriors and a
    /// factorized Bernoulli prior.
    ///
    /// `logq` holds pair log-probabilities `(ln q_t(0), ln q_t(1))` laid out
    /// as columns `(2t, 2t+1)`; `prior` is `1 × l` logits with
    /// `p_t(1) = σ(prior_t)`. The result is a `B × 1` column in nats.
    pub fn kl_bernoulli(&mut self, logq: Var, prior: Var) -> Result<Var> {
        self.check(&[logq, prior])?;
        let (qv, pv) = (self.value(logq), self.value(prior));
        if pv.nrows() != 1 || qv.ncols() != 2 * pv.ncols() {
            return Err(Error::Shape {
                op: "kl_bernoulli",
                lhs: shape_of(qv),
                rhs: shape_of(pv),
            });
        }
        let l = pv.ncols();
        let log_p: Vec<(f64, f64)> = pv
            .row(0)
            .iter()
            .map(|&lam| (log_sigmoid(-lam), log_sigmoid(lam)))
            .collect();
        let y = Array2::from_shape_fn((qv.nrows(), 1), |(r, _)| {
            (0..l)
                .map(|t| {
                    let (lq0, lq1) = (qv[[r, 2 * t]], qv[[r, 2 * t + 1]]);
                    let (lp0, lp1) = log_p[t];
                    lq0.exp() * (lq0 - lp0) + lq1.exp() * (lq1 - lp1)
                })
                .sum()
        });
        Ok(self.push(Op::KlBernoulli { logq, prior }, y))
    }

    /// Gumbel-Softmax over bit pairs with fixed noise.
    ///
    /// `perturbed = logq + noise`; the relaxed sample is the pair softmax of
    /// `perturbed / max(τ, TAU_MIN)`. In straight-through mode the forward
    /// value is the hard one-hot argmax while gradients flow through the
    /// relaxed sample.
    pub fn gumbel_softmax(
        &mut self,
        logq: Var,
        tau: Var,
        noise: &Array2<f64>,
        mode: GumbelMode,
    ) -> Result<Var> {
        self.check(&[logq, tau])?;
        let qv = self.value(logq);
        if qv.shape() != noise.shape() || !qv.ncols().is_multiple_of(2) {
            return Err(Error::Shape {
                op: "gumbel_softmax",
                lhs: shape_of(qv),
                rhs: noise.shape().to_vec(),
            });
        }
        let tau_raw = self.scalar(tau);
        if !(tau_raw > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {tau_raw}"
            )));
        }
        let clamped = tau_raw < super::gumbel::TAU_MIN;
        let tau_eff = tau_raw.max(super::gumbel::TAU_MIN);
        let perturbed = qv + noise;
        let soft = pair_log_softmax(&(&perturbed / tau_eff)).mapv(f64::exp);
        let value = match mode {
            GumbelMode::Relaxed => soft.clone(),
            GumbelMode::StraightThrough => {
                let mut hard = Array2::zeros(perturbed.raw_dim());
                for (r, row) in perturbed.rows().into_iter().enumerate() {
                    for t in 0..row.len() / 2 {
                        // Ties go to class 0.
                        let k = if row[2 * t + 1] > row[2 * t] { 1 } else { 0 };
                        hard[[r, 2 * t + k]] = 1.0;
                    }
                }
                hard
            }
        };
        Ok(self.push(
            Op::Gumbel {
                logq,
                tau,
                perturbed,
                soft,
                tau_eff,
                clamped,
            },
            value,
        ))
    }

    /// Reverse-mode accumulation from the scalar `loss`.
    ///
    /// Each recorded op is visited once, in reverse order. Intermediate
    /// values are dropped with the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument(
                "backward called on an empty tape".into(),
            ));
        }
        self.check(&[loss])?;
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape_of(self.value(loss)),
                rhs: vec![1, 1],
            });
        }

        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at node {i} ({})",
                    self.describe(i)
                )));
            }
            let y = self.nodes[i].value.as_ref();
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    acc(&mut grads, *x, g.dot(wv));
                    acc(&mut grads, *w, g.t().dot(xv));
                    if let Some(b) = b {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.dot(&bv.t()));
                    acc(&mut grads, *b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(y.expect("value"))
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(y.expect("value"))
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * y.expect("value")),
                Op::Gather { table, rows } => {
                    let tv = self.value(*table);
                    let mut d = Array2::zeros(tv.raw_dim());
                    for (r, &row) in rows.iter().enumerate() {
                        let mut target = d.row_mut(row);
                        target += &g.row(r);
                    }
                    acc(&mut grads, *table, d);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Slice { a, start, len } => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let yv = y.expect("value");
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(yv.rows()) {
                        let total = drow.sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &ly| *d -= ly.exp() * total);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::PairLogSoftmax(a) => {
                    let yv = y.expect("value");
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(yv.rows()) {
                        for t in 0..yrow.len() / 2 {
                            let total = drow[2 * t] + drow[2 * t + 1];
                            drow[2 * t] -= yrow[2 * t].exp() * total;
                            drow[2 * t + 1] -= yrow[2 * t + 1].exp() * total;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Pick { a, cols } => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (r, &c) in cols.iter().enumerate() {
                        d[[r, c]] = g[[r, 0]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let d = Array2::from_shape_fn(av.raw_dim(), |(r, _)| g[[r, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let d = Array2::from_elem(av.raw_dim(), g[[0, 0]] / av.len() as f64);
                    acc(&mut grads, *a, d);
                }
                Op::KlBernoulli { logq, prior } => {
                    let (qv, pv) = (self.value(*logq), self.value(*prior));
                    let l = pv.ncols();
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dp = Array2::zeros(pv.raw_dim());
                    for t in 0..l {
                        let lam = pv[[0, t]];
                        let (lp0, lp1) = (log_sigmoid(-lam), log_sigmoid(lam));
                        let p1 = sigmoid(lam);
                        for r in 0..qv.nrows() {
                            let gr = g[[r, 0]];
                            let (lq0, lq1) = (qv[[r, 2 * t]], qv[[r, 2 * t + 1]]);
                            let (q0, q1) = (lq0.exp(), lq1.exp());
                            dq[[r, 2 * t]] = gr * q0 * (lq0 - lp0 + 1.0);
                            dq[[r, 2 * t + 1]] = gr * q1 * (lq1 - lp1 + 1.0);
                            dp[[0, t]] += gr * (p1 - q1);
                        }
                    }
                    acc(&mut grads, *logq, dq);
                    acc(&mut grads, *prior, dp);
                }
                Op::Gumbel {
                    logq,
                    tau,
                    perturbed,
                    soft,
                    tau_eff,
                    clamped,
                } => {
                    let mut du = Array2::zeros(soft.raw_dim());
                    let mut dtau = 0.0;
                    for r in 0..soft.nrows() {
                        for t in 0..soft.ncols() / 2 {
                            let (s0, s1) = (soft[[r, 2 * t]], soft[[r, 2 * t + 1]]);
                            let (g0, g1) = (g[[r, 2 * t]], g[[r, 2 * t + 1]]);
                            let dot = s0 * g0 + s1 * g1;
                            let d0 = s0 * (g0 - dot) / tau_eff;
                            let d1 = s1 * (g1 - dot) / tau_eff;
                            du[[r, 2 * t]] = d0;
                            du[[r, 2 * t + 1]] = d1;
                            dtau -= (d0 * perturbed[[r, 2 * t]] + d1 * perturbed[[r, 2 * t + 1]])
                                / tau_eff;
                        }
                    }
                    acc(&mut grads, *logq, du);
                    if !clamped {
                        acc(&mut grads, *tau, Array2::from_elem((1, 1), dtau));
                    }
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn describe(&self, i: usize) -> String {
        match &self.nodes[i].op {
            Op::Param(id) => format!("param {}", self.store.get(*id).name),
            op => {
                let dbg = format!("{op:?}");
                dbg.split(|c: char| !c.is_alphanumeric())
                    .next()
                    .unwrap_or("op")
                    .to_string()
            }
        }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(values: &[(&str, Array2<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(*n, v.clone()).unwrap();
        }
        s
    }

    /// Central differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(x: &Array2<f64>, eps: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn affine_identity_and_scalar() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[3.0, 4.0]]);
        let w = tape.constant(Array2::eye(2));
        let b = tape.constant(Array2::zeros((1, 2)));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &array![[3.0, 4.0]]);

        let x = tape.constant(array![[3.0]]);
        let w = tape.constant(array![[2.0]]);
        let b = tape.constant(array![[1.0]]);
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &array![[7.0]]);
    }

    #[test]
    fn affine_shape_mismatch_reports_both_shapes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Array2::zeros((1, 3)));
        let w = tape.constant(Array2::zeros((2, 2)));
        match tape.affine(x, w, None) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let x0 = array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]];
        let w0 = array![[0.2, -0.4, 0.9], [1.3, 0.1, -0.7]];
        let b0 = array![[0.05, -0.3]];
        // Nonlinear scalar readout so gradients are not constant.
        let loss = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| {
            let y = x.dot(&w.t()) + b;
            y.mapv(|v| v.tanh()).sum()
        };

        let store = store_with(&[("w", w0.clone()), ("b", b0.clone())]);
        let mut tape = Tape::new(&store);
        let x = tape.leaf(x0.clone());
        let (w, b) = (
            tape.param(store.id("w").unwrap()),
            tape.param(store.id("b").unwrap()),
        );
        let y = tape.affine(x, w, Some(b)).unwrap();
        let t = tape.tanh(y).unwrap();
        let l = tape.sum(t).unwrap();
        let grads = tape.backward(l).unwrap();

        let eps = 1e-6;
        let gw = numeric_grad(&w0, eps, |w| loss(&x0, w, &b0));
        let gx = numeric_grad(&x0, eps, |x| loss(x, &w0, &b0));
        let gb = numeric_grad(&b0, eps, |b| loss(&x0, &w0, b));
        assert!(max_rel_err(grads.param(store.id("w").unwrap()).unwrap(), &gw) < 1e-6);
        assert!(max_rel_err(grads.param(store.id("b").unwrap()).unwrap(), &gb) < 1e-6);
        assert!(max_rel_err(grads.wrt(x).unwrap(), &gx) < 1e-6);
    }

    #[test]
    fn sum_of_doubled_input_has_gradient_two() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(array![[1.0, -2.0, 5.0]]);
        let y = tape.scale(x, 2.0).unwrap();
        let l = tape.sum(y).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &array![[2.0, 2.0, 2.0]]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(array![[0.0]]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar(y), 0.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap()[[0, 0]], 0.25);
    }

    #[test]
    fn backward_errors() {
        let store = ParamStore::new();
        let tape = Tape::new(&store);
        assert!(tape.backward(Var(0)).is_err());

        let mut tape = Tape::new(&store);
        let x = tape.leaf(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));

        let mut tape = Tape::new(&store);
        let x = tape.leaf(array![[f64::INFINITY]]);
        let y = tape.tanh(x).unwrap();
        let z = tape.mul(x, y).unwrap();
        assert!(matches!(tape.backward(z), Err(Error::Numerical(_))));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // Exercises gather, concat, slice, mul, sub, exp, log-softmax, pair
        // log-softmax, pick, sum_cols and mean in one graph.
        let table0 = array![[0.1, -0.3, 0.8], [0.5, 0.2, -0.6], [-0.9, 0.4, 0.3]];
        let w0 = array![
            [0.3, -0.2, 0.5, 0.1, -0.4, 0.2],
            [0.7, 0.1, -0.3, 0.2, 0.6, -0.5]
        ];
        let rows = [2usize, 0, 2];
        let targets = [1usize, 0, 1];

        let build = |tape: &mut Tape<'_>, table: Var, w: Var| -> Var {
            let e = tape.gather(table, &rows).unwrap();
            let sq = tape.mul(e, e).unwrap();
            let c = tape.concat(&[e, sq]).unwrap();
            let h = tape.affine(c, w, None).unwrap();
            let ls = tape.log_softmax(h).unwrap();
            let picked = tape.pick(ls, &targets).unwrap();
            let pl = tape.pair_log_softmax(c).unwrap();
            let first = tape.slice_cols(pl, 0, 4).unwrap();
            let ex = tape.exp(first).unwrap();
            let diff = tape.sub(ex, first).unwrap();
            let rs = tape.sum_cols(diff).unwrap();
            let tot = tape.add(rs, picked).unwrap();
            tape.mean(tot).unwrap()
        };

        let store = store_with(&[("table", table0.clone()), ("w", w0.clone())]);
        let (tid, wid) = (store.id("table").unwrap(), store.id("w").unwrap());
        let eval = |t: &Array2<f64>, w: &Array2<f64>| {
            let s = store_with(&[("table", t.clone()), ("w", w.clone())]);
            let mut tape = Tape::new(&s);
            let (tv, wv) = (tape.param(tid), tape.param(wid));
            let l = build(&mut tape, tv, wv);
            tape.scalar(l)
        };

        let mut tape = Tape::new(&store);
        let (tv, wv) = (tape.param(tid), tape.param(wid));
        let l = build(&mut tape, tv, wv);
        let grads = tape.backward(l).unwrap();

        let gt = numeric_grad(&table0, 1e-6, |t| eval(t, &w0));
        let gw = numeric_grad(&w0, 1e-6, |w| eval(&table0, w));
        assert!(max_rel_err(grads.param(tid).unwrap(), &gt) < 1e-6);
        assert!(max_rel_err(grads.param(wid).unwrap(), &gw) < 1e-6);
    }

    #[test]
    fn kl_node_value_and_gradients() {
        let logits0 = array![[0.3, -0.8, 1.2, 0.1], [-0.5, 0.4, 0.0, 2.0]];
        let prior0 = array![[0.7, -1.1]];
        let store = store_with(&[("q", logits0.clone()), ("p", prior0.clone())]);
        let (qid, pid) = (store.id("q").unwrap(), store.id("p").unwrap());
        let eval = |q: &Array2<f64>, p: &Array2<f64>| {
            let s = store_with(&[("q", q.clone()), ("p", p.clone())]);
            let mut tape = Tape::new(&s);
            let (qv, pv) = (tape.param(qid), tape.param(pid));
            let lq = tape.pair_log_softmax(qv).unwrap();
            let kl = tape.kl_bernoulli(lq, pv).unwrap();
            let l = tape.sum(kl).unwrap();
            tape.scalar(l)
        };

        // Direct formula for row 0 bit 0.
        let q1 = sigmoid(-0.8 - 0.3);
        let p1 = sigmoid(0.7);
        let direct = (1.0 - q1) * ((1.0 - q1) / (1.0 - p1)).ln() + q1 * (q1 / p1).ln();
        let mut tape = Tape::new(&store);
        let (qv, pv) = (tape.param(qid), tape.param(pid));
        let lq = tape.pair_log_softmax(qv).unwrap();
        let kl = tape.kl_bernoulli(lq, pv).unwrap();
        let bit0 = {
            let v = tape.value(lq);
            let (lq0, lq1) = (v[[0, 0]], v[[0, 1]]);
            lq0.exp() * (lq0 - log_sigmoid(-0.7)) + lq1.exp() * (lq1 - log_sigmoid(0.7))
        };
        assert!((bit0 - direct).abs() < 1e-14);
        assert!(tape.value(kl).iter().all(|&k| k >= 0.0));
        let l = tape.sum(kl).unwrap();
        let grads = tape.backward(l).unwrap();
        let gq = numeric_grad(&logits0, 1e-6, |q| eval(q, &prior0));
        let gp = numeric_grad(&prior0, 1e-6, |p| eval(&logits0, p));
        assert!(max_rel_err(grads.param(qid).unwrap(), &gq) < 1e-6);
        assert!(max_rel_err(grads.param(pid).unwrap(), &gp) < 1e-6);
    }

    #[test]
    fn relaxed_gumbel_gradients_match_finite_differences() {
        let logits0 = array![[0.3, -0.8, 1.2, 0.1], [-0.5, 0.4, 0.0, 2.0]];
        let tau0 = array![[0.8]];
        let noise = array![[0.1, -0.4, 0.9, 0.2], [1.3, -0.2, 0.05, 0.6]];
        let readout = array![[0.5, -1.0, 2.0, 0.3], [-0.7, 0.2, 1.1, -0.4]];
        let store = store_with(&[("q", logits0.clone()), ("tau", tau0.clone())]);
        let (qid, tid) = (store.id("q").unwrap(), store.id("tau").unwrap());
        let run = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let (qv, tv) = (tape.param(qid), tape.param(tid));
            let lq = tape.pair_log_softmax(qv).unwrap();
            let z = tape
                .gumbel_softmax(lq, tv, &noise, GumbelMode::Relaxed)
                .unwrap();
            let r = tape.constant(readout.clone());
            let m = tape.mul(z, r).unwrap();
            let l = tape.sum(m).unwrap();
            (tape.scalar(l), tape.backward(l).unwrap())
        };
        let (_, grads) = run(&store);
        let gq = numeric_grad(&logits0, 1e-6, |q| {
            run(&store_with(&[("q", q.clone()), ("tau", tau0.clone())])).0
        });
        let gt = numeric_grad(&tau0, 1e-6, |t| {
            run(&store_with(&[("q", logits0.clone()), ("tau", t.clone())])).0
        });
        assert!(max_rel_err(grads.param(qid).unwrap(), &gq) < 1e-6);
        assert!(max_rel_err(grads.param(tid).unwrap(), &gt) < 1e-6);
    }

    #[test]
    fn straight_through_forward_is_one_hot_with_soft_gradient() {
        let logits0 = array![[0.3, -0.8, 1.2, 0.1]];
        let noise = array![[0.1, -0.4, 0.9, 0.2]];
        let store = store_with(&[("q", logits0), ("tau", array![[1.0]])]);
        let (qid, tid) = (store.id("q").unwrap(), store.id("tau").unwrap());
        let mut tape = Tape::new(&store);
        let (qv, tv) = (tape.param(qid), tape.param(tid));
        let z = tape
            .gumbel_softmax(qv, tv, &noise, GumbelMode::StraightThrough)
            .unwrap();
        assert_eq!(tape.value(z), &array![[1.0, 0.0, 1.0, 0.0]]);
        let r = tape.constant(array![[0.0, 1.0, 0.0, 1.0]]);
        let m = tape.mul(z, r).unwrap();
        let l = tape.sum(m).unwrap();
        let grads = tape.backward(l).unwrap();
        let gq = grads.param(qid).unwrap();
        // Gradient of the soft class-1 mass: pushes class 1 up, class 0 down.
        assert!(gq[[0, 1]] > 0.0 && gq[[0, 0]] < 0.0);
        assert!((gq[[0, 0]] + gq[[0, 1]]).abs() < 1e-15);
    }

    #[test]
    fn clamped_temperature_gets_no_gradient() {
        let store = store_with(&[("q", array![[0.2, 0.1]]), ("tau", array![[0.05]])]);
        let (qid, tid) = (store.id("q").unwrap(), store.id("tau").unwrap());
        let mut tape = Tape::new(&store);
        let (qv, tv) = (tape.param(qid), tape.param(tid));
        let z = tape
            .gumbel_softmax(qv, tv, &array![[0.0, 0.0]], GumbelMode::Relaxed)
            .unwrap();
        let r = tape.constant(array![[1.0, -1.0]]);
        let m = tape.mul(z, r).unwrap();
        let l = tape.sum(m).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.param(tid).is_none());
        assert!(grads.param(qid).is_some());
    }

    #[test]
    fn shared_param_is_recorded_once_and_accumulates() {
        let store = store_with(&[("w", array![[2.0]])]);
        let id = store.id("w").unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let m = tape.mul(a, b).unwrap();
        let l = tape.sum(m).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.param(id).unwrap()[[0, 0]], 4.0);
    }
}
