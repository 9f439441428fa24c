//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the handles it read. `backward` walks the nodes in exact reverse order of
//! recording. Nodes that cannot reach a parameter are skipped.
//!
//! `stop_grad` records its forward value. A tape built with
//! [`Tape::replaying`] substitutes those recorded values back in, which is how
//! the finite-difference checker keeps frozen branches frozen while it
//! perturbs parameters.

use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::param::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One row of a cross-entropy over a subset of logit columns. The first
/// column is the target; the rest are the competing candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRow {
    pub row: usize,
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Square(Var),
    StopGrad,
    GatherRows(Var, Vec<usize>),
    EmbeddingBag(Var, Vec<Vec<usize>>),
    Reshape(Var),
    ConcatCols(Var, Var),
    RowDot(Var, Var),
    RowNorm(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    SoftmaxXent { logits: Var, rows: Vec<CandidateRow>, probs: Vec<Vec<T>> },
    SigmoidBce { logits: Var, labels: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    frozen_record: Vec<Tensor<T>>,
    replay: Option<Vec<Tensor<T>>>,
    replay_cursor: usize,
}

/// Parameter gradients produced by one backward pass, keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T: Real = f64> {
    pub by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    /// Adds every gradient into the store, in name order.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.by_param {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { what: op.to_string() })
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), frozen_record: Vec::new(), replay: None, replay_cursor: 0 }
    }

    /// A tape whose `stop_grad` calls return `frozen[k]` for the k-th call
    /// instead of their argument's value.
    pub fn replaying(frozen: Vec<Tensor<T>>) -> Self {
        Self { replay: Some(frozen), ..Self::new() }
    }

    /// Forward values of every `stop_grad` call, in call order.
    pub fn frozen_values(&self) -> &[Tensor<T>] {
        &self.frozen_record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Names of the parameters read by this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Repeated calls with one name share a node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x[B×m] · w[m×n]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(mismatch("matmul", xs, ws));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &t)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::MatMul(x, w), rg))
    }

    /// `a[B×d] · b[M×d]ᵀ`, the matrix of all pairwise inner products.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(mismatch("matmul_nt", as_, bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[0]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul_nt", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMulNT(a, b), rg))
    }

    /// Adds a length-n bias vector to every row of `x[B×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(mismatch("add_bias", xs, bs));
        }
        let mut t = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..t.rows() {
            for (v, &bv) in t.row_mut(r).iter_mut().zip(&bias) {
                *v = *v + bv;
            }
        }
        check_finite("add_bias", &t)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// `x·W + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        check_finite(name, &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine_scalar(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        check_finite("affine_scalar", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Affine(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.affine_scalar(x, c, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        check_finite("square", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Square(x), rg))
    }

    /// Identity on values; contributes no gradient to `x`.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let value = match &self.replay {
            Some(frozen) => {
                let v = frozen
                    .get(self.replay_cursor)
                    .cloned()
                    .ok_or_else(|| NumericsError::Invalid("replay: more stop_grad calls than recorded".into()))?;
                self.replay_cursor += 1;
                if v.shape() != self.shape(x) {
                    return Err(mismatch("stop_grad replay", v.shape(), self.shape(x)));
                }
                v
            }
            None => self.value(x).clone(),
        };
        self.frozen_record.push(value.clone());
        Ok(self.push(value, Op::StopGrad, false))
    }

    /// Selects rows of `table[V×d]`; gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(mismatch("gather_rows", ts, &[idx.len()]));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Invalid(format!(
                "gather_rows: index {bad} out of range for table with {v} rows"
            )));
        }
        if idx.is_empty() {
            return Err(NumericsError::Invalid("gather_rows: no indices".into()));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec()), rg))
    }

    /// Row `k` of the result is the sum of `table` rows listed in `bags[k]`
    /// (a zero row for an empty bag).
    pub fn embedding_bag(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(mismatch("embedding_bag", ts, &[bags.len()]));
        }
        let (v, d) = (ts[0], ts[1]);
        if bags.is_empty() {
            return Err(NumericsError::Invalid("embedding_bag: no bags".into()));
        }
        if let Some(&bad) = bags.iter().flatten().find(|&&i| i >= v) {
            return Err(NumericsError::Invalid(format!(
                "embedding_bag: index {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.value(table);
        let mut t = Tensor::zeros(&[bags.len(), d]);
        for (k, bag) in bags.iter().enumerate() {
            let out = t.row_mut(k);
            for &i in bag {
                for (o, &x) in out.iter_mut().zip(src.row(i)) {
                    *o = *o + x;
                }
            }
        }
        check_finite("embedding_bag", &t)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::EmbeddingBag(table, bags.to_vec()), rg))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(mismatch("concat_cols", as_, bs));
        }
        let (rows, ca, cb) = (as_[0], as_[1], bs[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let t = Tensor::new(vec![rows, ca + cb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatCols(a, b), rg))
    }

    /// Per-row inner products of two `B×d` matrices, giving a length-B vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_ != bs || as_.len() != 2 {
            return Err(mismatch("row_dot", as_, bs));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = (0..va.rows()).map(|r| crate::tensor::dot(va.row(r), vb.row(r))).collect();
        let t = Tensor::vector(data);
        check_finite("row_dot", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::RowDot(a, b), rg))
    }

    /// Per-row Euclidean norms. A zero row is rejected.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(mismatch("row_norm", xs, &[]));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let n = crate::tensor::dot(vx.row(r), vx.row(r)).sqrt();
            if n == T::zero() {
                return Err(NumericsError::ZeroNorm { op: "row_norm", row: r });
            }
            data.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::RowNorm(x), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let t = Tensor::scalar(s);
        check_finite("sum", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// `Σ wₖ·xₖ` over scalar nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, w) in terms {
            if !self.shape(v).iter().all(|&d| d == 1) {
                return Err(mismatch("weighted_sum", self.shape(v), &[]));
            }
            acc = acc + w * self.scalar(v);
        }
        let t = Tensor::scalar(acc);
        check_finite("weighted_sum", &t)?;
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(t, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Mean over `rows` of `−log softmax(logits[row, columns])[0]`.
    pub fn softmax_xent(&mut self, logits: Var, rows: Vec<CandidateRow>) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 {
            return Err(mismatch("softmax_xent", ls, &[]));
        }
        if rows.is_empty() {
            return Err(NumericsError::Invalid("softmax_xent: no rows".into()));
        }
        let (nr, nc) = (ls[0], ls[1]);
        let lv = self.value(logits);
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(rows.len());
        for cr in &rows {
            if cr.row >= nr || cr.columns.is_empty() || cr.columns.iter().any(|&c| c >= nc) {
                return Err(NumericsError::Invalid(format!(
                    "softmax_xent: candidate row {} / columns {:?} out of range for {nr}×{nc}",
                    cr.row, cr.columns
                )));
            }
            let row = lv.row(cr.row);
            let max = cr.columns.iter().map(|&c| row[c]).fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = cr.columns.iter().map(|&c| (row[c] - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total = total + (z.ln() + max - row[cr.columns[0]]);
            probs.push(exps.into_iter().map(|e| e / z).collect());
        }
        let t = Tensor::scalar(total / T::from_f64(rows.len() as f64));
        check_finite("softmax_xent", &t)?;
        let rg = self.rg(logits);
        Ok(self.push(t, Op::SoftmaxXent { logits, rows, probs }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    pub fn sigmoid_bce(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(mismatch("sigmoid_bce", lv.shape(), &[labels.len()]));
        }
        let mut total = T::zero();
        for (&x, &y) in lv.data().iter().zip(labels) {
            // log(1 + e^x) - y x, evaluated stably
            let softplus = if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
            total = total + softplus - y * x;
        }
        let t = Tensor::scalar(total / T::from_f64(labels.len() as f64));
        check_finite("sigmoid_bce", &t)?;
        let rg = self.rg(logits);
        Ok(self.push(t, Op::SigmoidBce { logits, labels: labels.to_vec() }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf
    /// recorded on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant | Op::StopGrad => {}
                Op::Param(name) => {
                    out.by_param.insert(name.clone(), g);
                }
                Op::MatMul(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    if self.rg(*x) {
                        // dX = dY · Wᵀ
                        let mut dx = vec![T::zero(); m * k];
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g.data(),
                            n as isize,
                            1,
                            wv.data(),
                            1,
                            n as isize,
                            T::zero(),
                            &mut dx,
                            k as isize,
                            1,
                        );
                        acc(&mut grads, *x, Tensor::new(vec![m, k], dx)?);
                    }
                    if self.rg(*w) {
                        // dW = Xᵀ · dY
                        let mut dw = vec![T::zero(); k * n];
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            xv.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            T::zero(),
                            &mut dw,
                            n as isize,
                            1,
                        );
                        acc(&mut grads, *w, Tensor::new(vec![k, n], dw)?);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if self.rg(*a) {
                        // dA = dY · B
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g.data(),
                            n as isize,
                            1,
                            bv.data(),
                            k as isize,
                            1,
                            T::zero(),
                            &mut da,
                            k as isize,
                            1,
                        );
                        acc(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.rg(*b) {
                        // dB = dYᵀ · A
                        let mut db = vec![T::zero(); n * k];
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g.data(),
                            1,
                            n as isize,
                            av.data(),
                            k as isize,
                            1,
                            T::zero(),
                            &mut db,
                            k as isize,
                            1,
                        );
                        acc(&mut grads, *b, Tensor::new(vec![n, k], db)?);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let cols = g.cols();
                        let mut db = vec![T::zero(); cols];
                        for r in 0..g.rows() {
                            for (d, &v) in db.iter_mut().zip(g.row(r)) {
                                *d = *d + v;
                            }
                        }
                        acc(&mut grads, *b, Tensor::vector(db));
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, zip_map(&g, self.value(*b), |gv, bv| gv * bv));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, zip_map(&g, self.value(*a), |gv, av| gv * av));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.rg(*a) {
                        acc(&mut grads, *a, zip_map(&g, bv, |gv, d| gv / d));
                    }
                    if self.rg(*b) {
                        // d(a/b)/db = -a/b² = -out/b
                        let q = &node.value;
                        let gb = zip_map(&zip_map(&g, q, |gv, qv| gv * qv), bv, |x, d| -x / d);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Affine(x, c) => {
                    let c = *c;
                    acc(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Relu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                    acc(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let two = T::from_f64(2.0);
                    acc(&mut grads, *x, zip_map(&g, self.value(*x), |gv, xv| two * gv * xv));
                }
                Op::GatherRows(table, idx) => {
                    let mut dt = Tensor::zeros(self.shape(*table));
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d = *d + v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::EmbeddingBag(table, bags) => {
                    let mut dt = Tensor::zeros(self.shape(*table));
                    for (k, bag) in bags.iter().enumerate() {
                        for &i in bag {
                            for (d, &v) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                                *d = *d + v;
                            }
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Reshape(x) => {
                    acc(&mut grads, *x, g.reshape(self.shape(*x).to_vec())?);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let rows = g.rows();
                    if self.rg(*a) {
                        let mut da = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            da.extend_from_slice(&g.row(r)[..ca]);
                        }
                        acc(&mut grads, *a, Tensor::new(vec![rows, ca], da)?);
                    }
                    if self.rg(*b) {
                        let cb = self.value(*b).cols();
                        let mut db = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            db.extend_from_slice(&g.row(r)[ca..]);
                        }
                        acc(&mut grads, *b, Tensor::new(vec![rows, cb], db)?);
                    }
                }
                Op::RowDot(a, b) => {
                    let scale_rows = |other: &Tensor<T>| {
                        let mut t = other.clone();
                        for r in 0..t.rows() {
                            let gr = g.data()[r];
                            t.row_mut(r).iter_mut().for_each(|v| *v = *v * gr);
                        }
                        t
                    };
                    if self.rg(*a) {
                        acc(&mut grads, *a, scale_rows(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, scale_rows(self.value(*a)));
                    }
                }
                Op::RowNorm(x) => {
                    let mut t = self.value(*x).clone();
                    for r in 0..t.rows() {
                        let k = g.data()[r] / node.value.data()[r];
                        t.row_mut(r).iter_mut().for_each(|v| *v = *v * k);
                    }
                    acc(&mut grads, *x, t);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    acc(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, w) in terms {
                        if self.rg(v) {
                            acc(&mut grads, v, Tensor::full(self.shape(v), gv * w));
                        }
                    }
                }
                Op::SoftmaxXent { logits, rows, probs } => {
                    let mut dl = Tensor::zeros(self.shape(*logits));
                    let k = g.item() / T::from_f64(rows.len() as f64);
                    for (cr, p) in rows.iter().zip(probs) {
                        let row = dl.row_mut(cr.row);
                        for (j, (&c, &pj)) in cr.columns.iter().zip(p).enumerate() {
                            let target = if j == 0 { T::one() } else { T::zero() };
                            row[c] = row[c] + k * (pj - target);
                        }
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::SigmoidBce { logits, labels } => {
                    let k = g.item() / T::from_f64(labels.len() as f64);
                    let lv = self.value(*logits);
                    let data = lv.data().iter().zip(labels).map(|(&x, &y)| k * (sigmoid(x) - y)).collect();
                    acc(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), data)?);
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map preserves shape")
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
