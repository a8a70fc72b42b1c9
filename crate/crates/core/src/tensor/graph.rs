use super::{dot, matmul_into, matmul_t_into, t_matmul_into, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRowBlocks(Var, usize),
    Mse(Var, Var),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        scale: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; zeros when no path reaches it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::L2NormalizeRows(a)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRowBlocks(a, _) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::BlockAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// A trainable input; gradients are reported for it.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t, "leaf")
    }

    /// A non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t, "constant")
    }

    /// Copies the current value of `v` into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows() {
                return Err(mismatch("matmul", ta, tb));
            }
            ta.matmul(tb)?
        };
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.cols() {
                return Err(mismatch("matmul_t", ta, tb));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            let mut out = vec![0.0; m * n];
            matmul_t_into(ta.data(), tb.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        self.push(Op::MatMulT(a, b), out, "matmul_t")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    /// Adds a bias vector (length = cols) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let (tx, tb) = (self.value(x), self.value(bias));
            let c = tx.cols();
            if tb.numel() != c || tx.shape().len() != 2 {
                return Err(mismatch("add_row", tx, tb));
            }
            let mut data = tx.data().to_vec();
            for row in data.chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(tb.data()) {
                    *o += b;
                }
            }
            Tensor::new(tx.shape().to_vec(), data)?
        };
        self.push(Op::AddRow(x, bias), out, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(ta.cols()) {
                softmax_in_place(row);
            }
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.push(Op::SoftmaxRows(a), out, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(ta.cols()) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.push(Op::LogSoftmaxRows(a), out, "log_softmax_rows")
    }

    /// Scales each row to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let mut data = ta.data().to_vec();
            for (i, row) in data.chunks_mut(ta.cols()).enumerate() {
                let n = dot(row, row).sqrt();
                if n == 0.0 {
                    return Err(TensorError::Invalid {
                        op: "l2_normalize_rows",
                        msg: format!("row {i} has zero norm"),
                    });
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.push(Op::L2NormalizeRows(a), out, "l2_normalize_rows")
    }

    /// Stacks matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let first = self.value(*parts.first().ok_or(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            })?);
            let c = first.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let t = self.value(p);
                if t.cols() != c || t.shape().len() != 2 {
                    return Err(mismatch("concat_rows", first, t));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c], data)?
        };
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let first = self.value(*parts.first().ok_or(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            })?);
            let r = first.rows();
            let mut total = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rows() != r || t.shape().len() != 2 {
                    return Err(mismatch("concat_cols", first, t));
                }
                total += t.cols();
            }
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r, total], data)?
        };
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat_cols")
    }

    /// Selects (and possibly repeats) rows by index.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let c = ta.cols();
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= ta.rows() {
                    return Err(TensorError::Invalid {
                        op: "gather_rows",
                        msg: format!("row {i} out of range for shape {:?}", ta.shape()),
                    });
                }
                data.extend_from_slice(ta.row(i));
            }
            Tensor::new(vec![indices.len(), c], data)?
        };
        self.push(Op::GatherRows(a, indices.to_vec()), out, "gather_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), out, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(a), out, "mean")
    }

    /// Averages consecutive groups of `block` rows: `(n·block)×d → n×d`.
    pub fn mean_row_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            if block == 0 || ta.rows() % block != 0 {
                return Err(TensorError::Invalid {
                    op: "mean_row_blocks",
                    msg: format!("{} rows not divisible into blocks of {block}", ta.rows()),
                });
            }
            let (n, c) = (ta.rows() / block, ta.cols());
            let mut data = vec![0.0; n * c];
            for (r, row) in ta.data().chunks(c).enumerate() {
                let o = &mut data[(r / block) * c..(r / block + 1) * c];
                for (x, &y) in o.iter_mut().zip(row) {
                    *x += y;
                }
            }
            data.iter_mut().for_each(|v| *v /= block as f64);
            Tensor::new(vec![n, c], data)?
        };
        self.push(Op::MeanRowBlocks(a, block), out, "mean_row_blocks")
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip_same(a, b, "mse", |x, y| x - y)?;
        let out = Tensor::scalar(dot(d.data(), d.data()) / d.numel() as f64);
        self.push(Op::Mse(a, b), out, "mse")
    }

    /// Scaled dot-product attention applied independently to each group of
    /// `block` consecutive rows of `q`, `k`, `v`.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize, scale: f64) -> Result<Var> {
        let (out, probs) = {
            let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
            if tq.shape() != tk.shape() {
                return Err(mismatch("block_attention", tq, tk));
            }
            if tv.rows() != tq.rows() || tv.shape().len() != 2 {
                return Err(mismatch("block_attention", tq, tv));
            }
            if block == 0 || tq.rows() % block != 0 {
                return Err(TensorError::Invalid {
                    op: "block_attention",
                    msg: format!("{} rows not divisible into blocks of {block}", tq.rows()),
                });
            }
            let (dk, dv) = (tq.cols(), tv.cols());
            let nb = tq.rows() / block;
            let mut probs = vec![0.0; nb * block * block];
            let mut out = vec![0.0; tq.rows() * dv];
            for b in 0..nb {
                let qb = &tq.data()[b * block * dk..(b + 1) * block * dk];
                let kb = &tk.data()[b * block * dk..(b + 1) * block * dk];
                let vb = &tv.data()[b * block * dv..(b + 1) * block * dv];
                let pb = &mut probs[b * block * block..(b + 1) * block * block];
                matmul_t_into(qb, kb, pb, block, dk, block);
                for row in pb.chunks_mut(block) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                matmul_into(pb, vb, &mut out[b * block * dv..(b + 1) * block * dv], block, block, dv);
            }
            (Tensor::new(vec![tq.rows(), dv], out)?, probs)
        };
        self.push(
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                probs,
            },
            out,
            "block_attention",
        )
    }

    /// Reverse sweep from a scalar `root`. A graph can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Keep leaf gradients only.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(da) = self.acc(grads, *a) {
                    matmul_t_into(gd, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    t_matmul_into(ta.data(), gd, db, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(da) = self.acc(grads, *a) {
                    matmul_into(gd, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    t_matmul_into(gd, ta.data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if let Some(d) = self.acc(grads, p) {
                        axpy(d, gd, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(d, gd, 1.0);
                }
                if let Some(d) = self.acc(grads, *b) {
                    axpy(d, gd, -1.0);
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(d, gd, 1.0);
                }
                if let Some(d) = self.acc(grads, *bias) {
                    let c = d.len();
                    for row in gd.chunks(c) {
                        axpy(d, row, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &gv), &bv) in d.iter_mut().zip(gd).zip(tb) {
                        *o += gv * bv;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((o, &gv), &av) in d.iter_mut().zip(gd).zip(ta) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(d, gd, *c);
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in d.iter_mut().zip(gd).zip(out) {
                        *o += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(x) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)) {
                        let s = dot(grow, yrow);
                        for ((o, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gv - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for ((o, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - y.exp() * s;
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let c = node.value.cols();
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for (((drow, grow), yrow), xrow) in
                        d.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)).zip(x.chunks(c))
                    {
                        let n = dot(xrow, xrow).sqrt();
                        let s = dot(grow, yrow);
                        for ((o, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gv - y * s) / n;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(d) = self.acc(grads, p) {
                        axpy(d, &gd[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(d) = self.acc(grads, p) {
                        for (drow, grow) in d.chunks_mut(c).zip(gd.chunks(total)) {
                            axpy(drow, &grow[col..col + c], 1.0);
                        }
                    }
                    col += c;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut d[src * c..(src + 1) * c], &gd[r * c..(r + 1) * c], 1.0);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(d, gd, 1.0);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let s = gd[0] / d.len() as f64;
                    d.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanRowBlocks(a, block) => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    let inv = 1.0 / *block as f64;
                    for (r, drow) in d.chunks_mut(c).enumerate() {
                        axpy(drow, &gd[(r / block) * c..(r / block + 1) * c], inv);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * gd[0] / ta.len() as f64;
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &x), &y) in d.iter_mut().zip(ta).zip(tb) {
                        *o += s * (x - y);
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((o, &x), &y) in d.iter_mut().zip(ta).zip(tb) {
                        *o -= s * (x - y);
                    }
                }
            }
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                probs,
            } => self.backprop_attention(*q, *k, *v, *block, *scale, probs, gd, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        scale: f64,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (dk, dv) = (tq.cols(), tv.cols());
        let nb = tq.rows() / block;
        let mut dq = vec![0.0; tq.numel()];
        let mut dkk = vec![0.0; tk.numel()];
        let mut dvv = vec![0.0; tv.numel()];
        let mut dp = vec![0.0; block * block];
        for b in 0..nb {
            let qs = b * block * dk..(b + 1) * block * dk;
            let vs = b * block * dv..(b + 1) * block * dv;
            let pb = &probs[b * block * block..(b + 1) * block * block];
            let gb = &gd[vs.clone()];
            // dV = Pᵀ g ; dP = g Vᵀ
            t_matmul_into(pb, gb, &mut dvv[vs.clone()], block, block, dv);
            dp.iter_mut().for_each(|x| *x = 0.0);
            matmul_t_into(gb, &tv.data()[vs], &mut dp, block, dv, block);
            // dS = scale · P ⊙ (dP − rowsum(dP ⊙ P))
            for (dprow, prow) in dp.chunks_mut(block).zip(pb.chunks(block)) {
                let s = dot(dprow, prow);
                for (x, &p) in dprow.iter_mut().zip(prow) {
                    *x = scale * p * (*x - s);
                }
            }
            matmul_into(&dp, &tk.data()[qs.clone()], &mut dq[qs.clone()], block, block, dk);
            t_matmul_into(&dp, &tq.data()[qs.clone()], &mut dkk[qs], block, block, dk);
        }
        for (var, d) in [(q, dq), (k, dkk), (v, dvv)] {
            if let Some(acc) = self.acc(grads, var) {
                axpy(acc, &d, 1.0);
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        Some(g.data_mut())
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn row_softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.l2_normalize_rows(x).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.7)).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn mse_gradient_of_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let z = g.constant(Tensor::zeros(&[1])).unwrap();
        let l = g.mse(x, z).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).data(), &[4.0]);

        // central difference with step 1e-5
        let f = |v: f64| v * v;
        let fd = (f(2.0 + 1e-5) - f(2.0 - 1e-5)) / 2e-5;
        assert!((fd - 4.0).abs() < 1e-8);
    }

    #[test]
    fn backward_rejects_second_call_and_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0)).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        let err = g.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap()).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2], 0.5)).unwrap();
        let c = g.constant(Tensor::full(&[1, 2], 2.0)).unwrap();
        let m = g.mul(x, c).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x).data(), &[2.0, 2.0]);
    }

    /// Finite-difference check for each differentiable op on inputs in [-1, 1].
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                let t = g.tanh(y)?;
                g.sum(t)
            })),
            ("matmul_t", vec![vec![3, 4], vec![5, 4]], Box::new(|g, v| {
                let y = g.matmul_t(v[0], v[1])?;
                let t = g.tanh(y)?;
                g.sum(t)
            })),
            ("add_sub_mul", vec![vec![2, 3], vec![2, 3], vec![2, 3]], Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.sub(a, v[2])?;
                let c = g.mul(b, v[0])?;
                g.sum(c)
            })),
            ("add_row_scale", vec![vec![3, 2], vec![2]], Box::new(|g, v| {
                let a = g.add_row(v[0], v[1])?;
                let b = g.scale(a, -1.7)?;
                let c = g.tanh(b)?;
                g.mean(c)
            })),
            ("relu", vec![vec![4, 3]], Box::new(|g, v| {
                let a = g.relu(v[0])?;
                let b = g.mul(a, a)?;
                g.sum(b)
            })),
            ("softmax", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| {
                let a = g.softmax_rows(v[0])?;
                let b = g.mul(a, v[1])?;
                g.sum(b)
            })),
            ("log_softmax_xent", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| {
                let a = g.log_softmax_rows(v[0])?;
                let w = g.softmax_rows(v[1])?;
                let b = g.mul(a, w)?;
                let s = g.sum(b)?;
                g.scale(s, -1.0)
            })),
            ("l2_normalize", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| {
                let a = g.l2_normalize_rows(v[0])?;
                let b = g.mul(a, v[1])?;
                g.sum(b)
            })),
            ("concat_gather_reshape", vec![vec![2, 3], vec![1, 3], vec![3, 2]], Box::new(|g, v| {
                let a = g.concat_rows(&[v[0], v[1]])?;
                let b = g.gather_rows(a, &[2, 0, 0, 1])?;
                let r = g.reshape(v[2], &[2, 3])?;
                let c = g.concat_rows(&[b, r])?;
                let d = g.tanh(c)?;
                let e = g.mul(d, c)?;
                g.sum(e)
            })),
            ("concat_cols", vec![vec![2, 3], vec![2, 1]], Box::new(|g, v| {
                let a = g.concat_cols(&[v[0], v[1], v[0]])?;
                let b = g.tanh(a)?;
                let c = g.mul(b, a)?;
                g.sum(c)
            })),
            ("mean_row_blocks", vec![vec![6, 2]], Box::new(|g, v| {
                let a = g.mean_row_blocks(v[0], 3)?;
                let b = g.tanh(a)?;
                g.sum(b)
            })),
            ("mse", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.mse(v[0], v[1]))),
            ("block_attention", vec![vec![6, 4], vec![6, 4], vec![6, 3], vec![6, 3]], Box::new(|g, v| {
                let a = g.block_attention(v[0], v[1], v[2], 3, 0.5)?;
                let b = g.mul(a, v[3])?;
                g.sum(b)
            })),
        ];
        for (name, shapes, build) in cases {
            let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let report = finite_diff_check(&params, 1e-5, None, |g, v| build(g, v)).unwrap();
            assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, &[4, 7]).map(|v| 10.0 * v)).unwrap();
            let y = g.softmax_rows(x).unwrap();
            for r in 0..4 {
                let row = g.value(y).row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}
