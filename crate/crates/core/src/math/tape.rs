use std::sync::Arc;

use super::kernels::{bce, bce_grad, sigmoid, softmax_backward, softmax_weights, softplus};
use super::solve::{symmetric_outer_adjoint, SpdFactor};
use super::{DenseMatrix, MathError};

/// Index of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

/// Named, owned parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DenseMatrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }
}

/// Gradients keyed by [`ParamId`]; entries are allocated on first write.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    entries: Vec<Option<DenseMatrix>>,
}

impl Grads {
    pub fn new(num_params: usize) -> Self {
        Self {
            entries: vec![None; num_params],
        }
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut DenseMatrix {
        if self.entries.len() <= id {
            self.entries.resize(id + 1, None);
        }
        self.entries[id].get_or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &DenseMatrix) {
        let slot = self.slot(id, g.shape());
        for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    /// Gradient of a parameter; `None` means it was never touched (zero).
    pub fn get(&self, id: ParamId) -> Option<&DenseMatrix> {
        self.entries.get(id).and_then(Option::as_ref)
    }

    /// Dense gradient, materializing zeros for untouched parameters.
    pub fn dense(&self, id: ParamId, params: &ParamStore) -> DenseMatrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = params.get(id).shape();
            DenseMatrix::zeros(r, c)
        })
    }

    pub fn merge(&mut self, other: &Grads) {
        for (id, g) in other.entries.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.entries.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().flatten().all(DenseMatrix::is_finite)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    ScaleBy(Var, Var),
    AddScaledIdentity(Var, Var),
    SolveSpd {
        m: Var,
        b: Var,
        factor: Arc<SpdFactor>,
    },
    ConcatCols(Var, Var),
    RowSum(Var),
    Gather {
        table: ParamId,
        rows: Vec<usize>,
        fields: usize,
    },
    FmPool {
        x: Var,
        fields: usize,
    },
    PairwiseAbsSim {
        q: Var,
        s: Var,
        w: Var,
        b: Var,
    },
    SoftmaxRows(Var),
    BceSum {
        p: Var,
        labels: Vec<f64>,
        scale: f64,
    },
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Records kernel applications against a parameter store and replays their
/// adjoints in reverse order.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: DenseMatrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.params.get(id).clone();
        self.push(v, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let v = self.value(a).matmul_tn(self.value(b))?;
        Ok(self.push(v, Op::MatMulTn(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, MathError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(MathError::shape("add_row_bias", xv, bv));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRowBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x))
    }

    /// Multiplies `x` by the `1×1` value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, MathError> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(MathError::shape("scale_by", self.value(x), sv));
        }
        let v = self.value(x).scaled(sv.item());
        Ok(self.push(v, Op::ScaleBy(x, s)))
    }

    /// `m + s·I` for square `m` and `1×1` `s`.
    pub fn add_scaled_identity(&mut self, m: Var, s: Var) -> Result<Var, MathError> {
        let (mv, sv) = (self.value(m), self.value(s));
        if mv.rows() != mv.cols() || sv.shape() != (1, 1) {
            return Err(MathError::shape("add_scaled_identity", mv, sv));
        }
        let shift = sv.item();
        let mut v = mv.clone();
        for i in 0..v.rows() {
            v.set(i, i, v.get(i, i) + shift);
        }
        Ok(self.push(v, Op::AddScaledIdentity(m, s)))
    }

    /// `M⁻¹·b` via Cholesky with jitter escalation.
    pub fn solve_spd(&mut self, m: Var, b: Var) -> Result<Var, MathError> {
        let factor = SpdFactor::new(self.value(m))?;
        let v = factor.solve(self.value(b))?;
        Ok(self.push(
            v,
            Op::SolveSpd {
                m,
                b,
                factor: Arc::new(factor),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(MathError::shape("concat_cols", av, bv));
        }
        let cols = av.cols() + bv.cols();
        let mut v = DenseMatrix::zeros(av.rows(), cols);
        for r in 0..av.rows() {
            let row = v.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    /// Sums each row to an `n×1` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect::<Vec<_>>();
        let v = DenseMatrix::column(&data);
        self.push(v, Op::RowSum(x))
    }

    /// Looks up `fields` rows of `table` per output row and concatenates
    /// them. `rows.len()` must be a multiple of `fields`.
    pub fn gather(&mut self, table: ParamId, rows: Vec<usize>, fields: usize) -> Result<Var, MathError> {
        let t = self.params.get(table);
        let d = t.cols();
        if fields == 0 || !rows.len().is_multiple_of(fields) {
            return Err(MathError::Shape {
                op: "gather",
                left: t.shape(),
                right: (rows.len(), fields),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(MathError::Shape {
                op: "gather",
                left: t.shape(),
                right: (bad, d),
            });
        }
        let n = rows.len() / fields;
        let mut v = DenseMatrix::zeros(n, fields * d);
        for (i, chunk) in rows.chunks(fields).enumerate() {
            let out = v.row_mut(i);
            for (f, &r) in chunk.iter().enumerate() {
                out[f * d..(f + 1) * d].copy_from_slice(t.row(r));
            }
        }
        Ok(self.push(v, Op::Gather { table, rows, fields }))
    }

    /// Factorization-machine pooling over `fields` blocks of each row.
    pub fn fm_pool(&mut self, x: Var, fields: usize) -> Result<Var, MathError> {
        let xv = self.value(x);
        if fields == 0 || !xv.cols().is_multiple_of(fields) {
            return Err(MathError::Shape {
                op: "fm_pool",
                left: xv.shape(),
                right: (fields, 0),
            });
        }
        let d = xv.cols() / fields;
        let mut v = DenseMatrix::zeros(xv.rows(), d);
        for r in 0..xv.rows() {
            fm_pool_row(xv.row(r), fields, v.row_mut(r));
        }
        Ok(self.push(v, Op::FmPool { x, fields }))
    }

    /// `G[i,j] = wᵀ|q_i − s_j| + b` for every query row `i` and support row
    /// `j`; `w` is `1×K`, `b` is `1×1`.
    pub fn pairwise_abs_sim(&mut self, q: Var, s: Var, w: Var, b: Var) -> Result<Var, MathError> {
        let (qv, sv, wv, bv) = (self.value(q), self.value(s), self.value(w), self.value(b));
        if qv.cols() != sv.cols() {
            return Err(MathError::shape("pairwise_abs_sim", qv, sv));
        }
        if wv.shape() != (1, qv.cols()) || bv.shape() != (1, 1) {
            return Err(MathError::shape("pairwise_abs_sim", wv, qv));
        }
        let mut v = DenseMatrix::zeros(qv.rows(), sv.rows());
        let bias = bv.item();
        for i in 0..qv.rows() {
            for j in 0..sv.rows() {
                v.set(i, j, abs_sim(qv.row(i), sv.row(j), wv.data(), bias));
            }
        }
        Ok(self.push(v, Op::PairwiseAbsSim { q, s, w, b }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = DenseMatrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&softmax_weights(xv.row(r)));
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// `scale · Σᵢ bce(labelᵢ, pᵢ)` over an `n×1` column of probabilities.
    pub fn bce_sum(&mut self, p: Var, labels: Vec<f64>, scale: f64) -> Result<Var, MathError> {
        let pv = self.value(p);
        if pv.cols() != 1 || pv.rows() != labels.len() {
            return Err(MathError::Shape {
                op: "bce_sum",
                left: pv.shape(),
                right: (labels.len(), 1),
            });
        }
        let total: f64 = labels.iter().zip(pv.data()).map(|(&y, &p)| bce(y, p)).sum();
        Ok(self.push(DenseMatrix::scalar(scale * total), Op::BceSum { p, labels, scale }))
    }

    /// Reverse sweep from a `1×1` output. Returns parameter gradients only.
    pub fn backward(&self, output: Var) -> Result<Grads, MathError> {
        let mut adj: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(DenseMatrix::filled(
            self.value(output).rows(),
            self.value(output).cols(),
            1.0,
        ));
        let mut grads = Grads::new(self.params.len());
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    send(&mut adj, *a, da);
                    send(&mut adj, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_tn(self.value(*a))?;
                    send(&mut adj, *a, da);
                    send(&mut adj, *b, db);
                }
                Op::MatMulTn(a, b) => {
                    // C = Aᵀ B: dA = B dCᵀ, dB = A dC
                    let da = self.value(*b).matmul_nt(&g)?;
                    let db = self.value(*a).matmul(&g)?;
                    send(&mut adj, *a, da);
                    send(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    send(&mut adj, *a, g.clone());
                    send(&mut adj, *b, g);
                }
                Op::AddRowBias(x, bias) => {
                    let mut db = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(&mut adj, *x, g);
                    send(&mut adj, *bias, db);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, &s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= s * (1.0 - s);
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Softplus(x) => {
                    let mut dx = g;
                    for (d, &a) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d *= sigmoid(a);
                    }
                    send(&mut adj, *x, dx);
                }
                Op::ScaleBy(x, s) => {
                    let xv = self.value(*x);
                    let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    let dx = g.scaled(self.value(*s).item());
                    send(&mut adj, *x, dx);
                    send(&mut adj, *s, DenseMatrix::scalar(ds));
                }
                Op::AddScaledIdentity(m, s) => {
                    let ds = g.trace();
                    send(&mut adj, *m, g);
                    send(&mut adj, *s, DenseMatrix::scalar(ds));
                }
                Op::SolveSpd { m, b, factor } => {
                    let db = factor.solve(&g)?;
                    let dm = symmetric_outer_adjoint(&db, &node.value)?;
                    send(&mut adj, *m, dm);
                    send(&mut adj, *b, db);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    let mut da = DenseMatrix::zeros(g.rows(), ac);
                    let mut db = DenseMatrix::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    send(&mut adj, *a, da);
                    send(&mut adj, *b, db);
                }
                Op::RowSum(x) => {
                    let xv = self.value(*x);
                    let mut dx = DenseMatrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let gr = g.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|v| *v = gr);
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Gather { table, rows, fields } => {
                    let t = self.params.get(*table);
                    let d = t.cols();
                    let mut dt = DenseMatrix::zeros(t.rows(), d);
                    for (i, chunk) in rows.chunks(*fields).enumerate() {
                        let gr = g.row(i);
                        for (f, &r) in chunk.iter().enumerate() {
                            for (o, v) in dt.row_mut(r).iter_mut().zip(&gr[f * d..(f + 1) * d]) {
                                *o += v;
                            }
                        }
                    }
                    grads.accumulate(*table, &dt);
                }
                Op::FmPool { x, fields } => {
                    let xv = self.value(*x);
                    let d = xv.cols() / fields;
                    let mut dx = DenseMatrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let mut sum = vec![0.0; d];
                        for f in 0..*fields {
                            for k in 0..d {
                                sum[k] += xr[f * d + k];
                            }
                        }
                        let gr = g.row(r);
                        let dr = dx.row_mut(r);
                        for f in 0..*fields {
                            for k in 0..d {
                                dr[f * d + k] = 2.0 * gr[k] * (sum[k] - xr[f * d + k]);
                            }
                        }
                    }
                    send(&mut adj, *x, dx);
                }
                Op::PairwiseAbsSim { q, s, w, b } => {
                    let (qv, sv, wv) = (self.value(*q), self.value(*s), self.value(*w));
                    let k = qv.cols();
                    let mut dq = DenseMatrix::zeros(qv.rows(), k);
                    let mut ds = DenseMatrix::zeros(sv.rows(), k);
                    let mut dw = DenseMatrix::zeros(1, k);
                    let mut db = 0.0;
                    for i in 0..qv.rows() {
                        for j in 0..sv.rows() {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            db += gij;
                            let (qr, sr) = (qv.row(i), sv.row(j));
                            for c in 0..k {
                                let diff = qr[c] - sr[c];
                                dw.data_mut()[c] += gij * diff.abs();
                                let t = gij * wv.data()[c] * sign(diff);
                                dq.row_mut(i)[c] += t;
                                ds.row_mut(j)[c] -= t;
                            }
                        }
                    }
                    send(&mut adj, *q, dq);
                    send(&mut adj, *s, ds);
                    send(&mut adj, *w, dw);
                    send(&mut adj, *b, DenseMatrix::scalar(db));
                }
                Op::SoftmaxRows(x) => {
                    let alpha = &node.value;
                    let mut dx = DenseMatrix::zeros(alpha.rows(), alpha.cols());
                    for r in 0..alpha.rows() {
                        dx.row_mut(r)
                            .copy_from_slice(&softmax_backward(alpha.row(r), g.row(r)));
                    }
                    send(&mut adj, *x, dx);
                }
                Op::BceSum { p, labels, scale } => {
                    let pv = self.value(*p);
                    let up = g.item() * scale;
                    let data = labels
                        .iter()
                        .zip(pv.data())
                        .map(|(&y, &p)| up * bce_grad(y, p))
                        .collect::<Vec<_>>();
                    send(&mut adj, *p, DenseMatrix::column(&data));
                }
            }
        }
        Ok(grads)
    }
}

fn send(adj: &mut [Option<DenseMatrix>], to: Var, g: DenseMatrix) {
    match &mut adj[to.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn abs_sim(q: &[f64], s: &[f64], w: &[f64], b: f64) -> f64 {
    q.iter()
        .zip(s)
        .zip(w)
        .map(|((a, c), w)| w * (a - c).abs())
        .sum::<f64>()
        + b
}

/// `(Σ e_f)² − Σ e_f²` over `fields` consecutive blocks of `x`.
#[inline]
pub(crate) fn fm_pool_row(x: &[f64], fields: usize, out: &mut [f64]) {
    let d = out.len();
    for k in 0..d {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for f in 0..fields {
            let v = x[f * d + k];
            sum += v;
            sq += v * v;
        }
        out[k] = sum * sum - sq;
    }
}
