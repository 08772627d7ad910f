use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::math;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SqEuclidean(Var, Var),
    Euclidean(Var, Var),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    NormalizeRows(Var, f64),
    GradReverse(Var, f64),
    ClampMin(Var, f64),
    XLogX(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede outputs and
/// a single reverse sweep visits every operation exactly once.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Leaf)
    }

    /// Records an input that requires a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.requiring_grad())
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Copy of a node's value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut t = self.value(v).clone();
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.value(*v).requires_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_matrix("matmul", ta)?;
        let (k2, n) = check_matrix("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.derived(shape, out, &[a, b], op))
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

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, n) = check_matrix("add_row", tx)?;
        if tr.rank() != 1 || tr.numel() != n {
            return Err(dim_err("add_row", tx, tr));
        }
        let r = tr.data();
        let out = tx
            .data()
            .chunks(n)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = tx.shape().to_vec();
        Ok(self.derived(shape, out, &[x, row], Op::AddRow(x, row)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.derived(shape, out, &[a], op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so a corrupted input surfaces in the loss.
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, math::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x > 0.0))
        {
            return Err(Error::Domain { index, value });
        }
        Ok(self.unary(a, math::ln, Op::Log(a)))
    }

    /// `max(x, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| if x < floor { floor } else { x }, Op::ClampMin(a, floor))
    }

    /// `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x * math::ln(x) } else { 0.0 },
            Op::XLogX(a),
        )
    }

    /// Identity forward; backward multiplies the incoming gradient by `-coeff`.
    pub fn gradient_reversal(&mut self, a: Var, coeff: f64) -> Result<Var> {
        if !(coeff >= 0.0) {
            return Err(Error::Parameter(format!(
                "gradient reversal coefficient must be >= 0, got {coeff}"
            )));
        }
        Ok(self.unary(a, |x| x, Op::GradReverse(a, coeff)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = math::sum(self.value(a).data());
        self.derived(Vec::new(), vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = math::sum(t.data()) / t.numel() as f64;
        self.derived(Vec::new(), vec![s], &[a], Op::Mean(a))
    }

    /// Sum over the last dimension: `m×n → m`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().chunks(t.cols()).map(math::sum).collect();
        let n = out.len();
        self.derived(vec![n], out, &[a], Op::RowSum(a))
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if let Some(i) = self.value(a).data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op}: non-finite input at index {i}"
            )));
        }
        Ok(())
    }

    /// Softmax along the last dimension (each row of a matrix, or a whole vector).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(t.cols()) {
            out.extend(softmax_row(row));
        }
        let shape = t.shape().to_vec();
        Ok(self.derived(shape, out, &[a], Op::Softmax(a)))
    }

    /// Log-softmax along the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(t.cols()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += math::exp(x - max);
            }
            let lz = max + math::ln(z);
            out.extend(row.iter().map(|&x| x - lz));
        }
        let shape = t.shape().to_vec();
        Ok(self.derived(shape, out, &[a], Op::LogSoftmax(a)))
    }

    fn pairwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        squared: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, d) = check_matrix(name, ta)?;
        let (n, d2) = check_matrix(name, tb)?;
        if d != d2 {
            return Err(dim_err(name, ta, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ra = ta.row(i);
            for j in 0..n {
                let rb = tb.row(j);
                let mut s = 0.0;
                for k in 0..d {
                    let diff = ra[k] - rb[k];
                    s += diff * diff;
                }
                out.push(if squared { s } else { math::sqrt(s) });
            }
        }
        Ok((vec![m, n], out))
    }

    /// `(i, j) → Σ_k (a[i,k] − b[j,k])²`.
    pub fn sq_euclidean_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.pairwise("sq_euclidean_rows", a, b, true)?;
        Ok(self.derived(shape, out, &[a, b], Op::SqEuclidean(a, b)))
    }

    /// `(i, j) → ‖a[i] − b[j]‖₂`. The gradient at zero distance is taken as 0.
    pub fn euclidean_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.pairwise("euclidean_rows", a, b, false)?;
        Ok(self.derived(shape, out, &[a, b], Op::Euclidean(a, b)))
    }

    /// Selects rows (matrix) or entries (vector) by index, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = if t.rank() == 2 {
            (t.shape()[0], t.shape()[1])
        } else if t.rank() == 1 {
            (t.shape()[0], 1)
        } else {
            return Err(Error::Shape(format!(
                "gather_rows expects rank 1 or 2, got {:?}",
                t.shape()
            )));
        };
        if indices.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let shape = if t.rank() == 2 {
            vec![indices.len(), cols]
        } else {
            vec![indices.len()]
        };
        Ok(self.derived(shape, out, &[a], Op::GatherRows(a, indices.to_vec())))
    }

    /// `m×n → m`, taking entry `cols[i]` from row `i`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = check_matrix("pick_per_row", t)?;
        if cols.len() != m {
            return Err(Error::Shape(format!(
                "pick_per_row: {} indices for {m} rows",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Shape(format!(
                "column index {bad} out of range for {n} columns"
            )));
        }
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| t.data()[i * n + c])
            .collect();
        Ok(self.derived(vec![m], out, &[a], Op::PickPerRow(a, cols.to_vec())))
    }

    /// `x / (‖x‖₂ + eps)` per row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        check_matrix("normalize_rows", t)?;
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(t.cols()) {
            let norm = math::sqrt(row.iter().map(|x| x * x).fold(0.0, |s, x| s + x));
            let denom = norm + eps;
            out.extend(row.iter().map(|x| x / denom));
        }
        let shape = t.shape().to_vec();
        Ok(self.derived(shape, out, &[a], Op::NormalizeRows(a, eps)))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Afterwards every node that requires a gradient has one; nodes that the
    /// loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Shape("loss is not on this tape".to_string()));
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if lt.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                let n = node.value.numel();
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            } else {
                node.value.grad = None;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let val = |v: Var| &nodes[v.0].value;
        // Adds `contrib` into the gradient slot of `v`, skipping constants.
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].value.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            contrib(slot);
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &|ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let row = &mut ga[i * k..(i + 1) * k];
                        for (p, slot) in row.iter_mut().enumerate() {
                            let br = &tb.data()[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gr[j] * br[j];
                            }
                            *slot += s;
                        }
                    }
                });
                acc(*b, &|gb| {
                    // dB = Aᵀ · dC
                    let skip_zeros = g.iter().all(|v| v.is_finite());
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 && skip_zeros {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                row[j] += av * gr[j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *d += s * y;
                    }
                });
                acc(*b, &|gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = val(*row).numel();
                acc(*x, &|gx| add_into(gx, g));
                acc(*row, &|gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += c * s;
                }
            }),
            Op::Neg(a) => acc(*a, &|ga| {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d -= s;
                }
            }),
            Op::Relu(a) => {
                let ta = val(*a);
                acc(*a, &|ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y;
                }
            }),
            Op::Log(a) => {
                let ta = val(*a);
                acc(*a, &|ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *d += s / x;
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let ta = val(*a);
                acc(*a, &|ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *x >= *floor {
                            *d += s;
                        }
                    }
                });
            }
            Op::XLogX(a) => {
                let ta = val(*a);
                acc(*a, &|ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += s * (math::ln(*x) + 1.0);
                        }
                    }
                });
            }
            Op::GradReverse(a, c) => acc(*a, &|ga| {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d -= c * s;
                }
            }),
            Op::Sum(a) => acc(*a, &|ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &|ga| {
                    for d in ga.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::RowSum(a) => {
                let c = val(*a).cols();
                acc(*a, &|ga| {
                    for (chunk, s) in ga.chunks_mut(c).zip(g) {
                        for d in chunk {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                acc(*a, &|ga| {
                    for ((gd, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gy[j] * y[j];
                        }
                        for j in 0..c {
                            gd[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                acc(*a, &|ga| {
                    for ((gd, gy), ly) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let total = math::sum(gy);
                        for j in 0..c {
                            gd[j] += gy[j] - math::exp(ly[j]) * total;
                        }
                    }
                });
            }
            Op::SqEuclidean(a, b) | Op::Euclidean(a, b) => {
                let squared = matches!(nodes[idx].op, Op::SqEuclidean(..));
                let (ta, tb) = (val(*a), val(*b));
                let (m, d) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                // Coefficient on (a_i − b_j) for output entry (i, j).
                let coeff = |i: usize, j: usize| -> f64 {
                    let gij = g[i * n + j];
                    if squared {
                        2.0 * gij
                    } else {
                        let dist = out.data()[i * n + j];
                        if dist > 0.0 {
                            gij / dist
                        } else {
                            0.0
                        }
                    }
                };
                acc(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = coeff(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                ga[i * d + k] += w * (ta.data()[i * d + k] - tb.data()[j * d + k]);
                            }
                        }
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = coeff(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                gb[j * d + k] -= w * (ta.data()[i * d + k] - tb.data()[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let c = if val(*a).rank() == 2 { val(*a).cols() } else { 1 };
                acc(*a, &|ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::PickPerRow(a, cols) => {
                let n = val(*a).cols();
                acc(*a, &|ga| {
                    for (i, &c) in cols.iter().enumerate() {
                        ga[i * n + c] += g[i];
                    }
                });
            }
            Op::NormalizeRows(a, eps) => {
                let ta = val(*a);
                let c = ta.cols();
                acc(*a, &|ga| {
                    for ((gd, gy), x) in ga.chunks_mut(c).zip(g.chunks(c)).zip(ta.data().chunks(c)) {
                        let norm = math::sqrt(x.iter().map(|v| v * v).fold(0.0, |s, v| s + v));
                        let denom = norm + eps;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gy[j] * x[j];
                        }
                        // y = x / (‖x‖ + ε):  dy/dx = I/den − x xᵀ / (‖x‖ den²)
                        let tail = if norm > 0.0 {
                            dot / (norm * denom * denom)
                        } else {
                            0.0
                        };
                        for j in 0..c {
                            gd[j] += gy[j] / denom - x[j] * tail;
                        }
                    }
                });
            }
        }
    }
}

/// Numerically safe softmax of one row (max-subtracted).
pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| math::exp(x - max)).collect();
    let z = math::sum(&exps);
    exps.into_iter().map(|e| e / z).collect()
}

/// Plain `m×k · k×n` product, i-k-j loop order. Zero entries of `a` are
/// skipped unless `b` holds a non-finite value that must propagate.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let skip_zeros = b.iter().all(|v| v.is_finite());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 && skip_zeros {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * br[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::seed::rng_for;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut crate::seed::Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2).unwrap());
        let x = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = t.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let v = t.constant(m(&[&[5.0], &[7.0]]));
        let y = t.matmul(p, v).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 1]);
        assert_eq!(t.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rng_for([7, 0, 0, 1]);
        for _ in 0..10 {
            let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = t.matmul(va, vb).unwrap();
            for i in 0..3 {
                for j in 0..2 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += a.get2(i, k) * b.get2(k, j);
                    }
                    assert!((t.value(y).get2(i, j) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_propagates_nan_past_zero_entries() {
        let mut t = Tape::new();
        let a = t.param(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let b = t.param(Tensor::matrix(2, 1, vec![f64::NAN, 2.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert!(t.value(c).data()[0].is_nan());
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = t.constant(Tensor::zeros(vec![2, 3]).unwrap());
        match t.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected a dimension error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let nan = t.constant(Tensor::vector(vec![f64::NAN]).unwrap());
        let r = t.relu(nan);
        assert!(t.value(r).data()[0].is_nan());

        let h = t.constant(Tensor::vector(vec![0.5]).unwrap());
        let e = t.exp(h);
        let l = t.log(e).unwrap();
        assert!((t.value(l).data()[0] - 0.5).abs() < 1e-12);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 2.0]).unwrap());
        let r = t.relu(x);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0]).unwrap());
        let r = t.relu(x);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn log_of_non_positive_names_the_index() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 0.0, -1.0]).unwrap());
        assert_eq!(t.log(x), Err(Error::Domain { index: 2, value: 0.0 }));
    }

    #[test]
    fn binary_ops_need_equal_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2]).unwrap());
        let b = t.constant(Tensor::zeros(vec![3]).unwrap());
        assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(t.sub(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(t.mul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let p = t.softmax(z).unwrap();
        assert_eq!(t.value(p).data(), &[0.5, 0.5]);

        let z = t.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let p = t.softmax(z).unwrap();
        let d = t.value(p).data();
        assert!(d.iter().all(|x| x.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);

        let z = t.constant(Tensor::vector(vec![0.0, f64::NAN]).unwrap());
        assert!(matches!(t.softmax(z), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = rng_for([7, 0, 0, 2]);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            // naive exp/sum with compensated summation
            let exps: Vec<f64> = z.iter().map(|x| x.exp()).collect();
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for &e in &exps {
                let t = s + e;
                c += if s.abs() >= e.abs() { (s - t) + e } else { (e - t) + s };
                s = t;
            }
            let total = s + c;
            let mut t = Tape::new();
            let v = t.constant(Tensor::vector(z.clone()).unwrap());
            let p = t.softmax(v).unwrap();
            for (got, e) in t.value(p).data().iter().zip(&exps) {
                assert!((got - e / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_examples() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0]]));
        let d = t.sq_euclidean_rows(a, a).unwrap();
        assert_eq!(t.value(d).data(), &[0.0]);
        let a = t.constant(m(&[&[0.0, 0.0]]));
        let b = t.constant(m(&[&[3.0, 4.0]]));
        let d = t.sq_euclidean_rows(a, b).unwrap();
        assert_eq!(t.value(d).data(), &[25.0]);
        let c = t.constant(m(&[&[3.0, 4.0, 0.0]]));
        assert!(matches!(t.sq_euclidean_rows(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn distances_match_double_loop() {
        let mut rng = rng_for([7, 0, 0, 3]);
        for _ in 0..10 {
            let (a, b) = (random(&mut rng, &[4, 3]), random(&mut rng, &[5, 3]));
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let d = t.sq_euclidean_rows(va, vb).unwrap();
            for i in 0..4 {
                for j in 0..5 {
                    let s: f64 = (0..3).map(|k| (a.get2(i, k) - b.get2(j, k)).powi(2)).sum();
                    assert!((t.value(d).get2(i, j) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn every_grad_ancestor_gets_a_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = t.param(Tensor::vector(vec![5.0]).unwrap());
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.grad(unused).unwrap(), &[0.0]);
        assert!(t.grad(c).is_none());
        for i in 0..t.len() {
            let v = t.value(Var(i));
            if let Some(g) = v.grad() {
                assert_eq!(g.len(), v.numel());
            }
        }
    }

    #[test]
    fn clearing_releases_every_node() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0));
        let _ = t.exp(x);
        assert_eq!(t.len(), 2);
        t.clear();
        assert!(t.is_empty());
    }

    #[test]
    fn gradient_reversal_flips_and_scales() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let r = t.gradient_reversal(x, 0.5).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, -2.0]);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-0.5, -0.5]);
        assert!(matches!(t.gradient_reversal(x, -1.0), Err(Error::Parameter(_))));
    }

    /// Every differentiable operation against central differences on 20
    /// random inputs.
    #[test]
    fn every_op_matches_finite_differences() {
        type Case = (&'static str, usize, fn(&mut Tape, &[Var]) -> Result<Var>);
        let cases: &[Case] = &[
            ("matmul", 2, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                Ok(t.sum(y))
            }),
            ("add", 0, |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            ("sub", 0, |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            ("mul", 0, |t, v| {
                let y = t.mul(v[0], v[1])?;
                Ok(t.sum(y))
            }),
            ("scale_neg", 0, |t, v| {
                let y = t.scale(v[0], 2.5);
                let y = t.neg(y);
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
            ("relu", 0, |t, v| {
                let y = t.relu(v[0]);
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
            ("exp_log", 0, |t, v| {
                let y = t.exp(v[0]);
                let y = t.log(y)?;
                let e = t.exp(v[1]);
                let y = t.mul(y, e)?;
                Ok(t.mean(y))
            }),
            ("softmax", 0, |t, v| {
                let p = t.softmax(v[0])?;
                let y = t.mul(p, v[1])?;
                Ok(t.sum(y))
            }),
            ("log_softmax", 0, |t, v| {
                let p = t.log_softmax(v[0])?;
                let y = t.mul(p, v[1])?;
                Ok(t.sum(y))
            }),
            ("sq_euclidean_rows", 1, |t, v| {
                let d = t.sq_euclidean_rows(v[0], v[1])?;
                let d = t.mul(d, d)?;
                Ok(t.sum(d))
            }),
            ("euclidean_rows", 1, |t, v| {
                let d = t.euclidean_rows(v[0], v[1])?;
                let d = t.mul(d, d)?;
                Ok(t.sum(d))
            }),
            ("normalize_rows", 0, |t, v| {
                let n = t.normalize_rows(v[0], 1e-8)?;
                let y = t.mul(n, v[1])?;
                Ok(t.sum(y))
            }),
            ("row_sum_pick_gather", 0, |t, v| {
                let y = t.mul(v[0], v[1])?;
                let g = t.gather_rows(y, &[1, 0, 1])?;
                let p = t.pick_per_row(g, &[0, 1, 0])?;
                let r = t.row_sum(y);
                let r = t.mul(r, r)?;
                let a = t.sum(p);
                let b = t.sum(r);
                let s = t.add(a, b)?;
                Ok(s)
            }),
            ("add_row", 3, |t, v| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            ("xlogx_clamp", 0, |t, v| {
                let p = t.softmax(v[0])?;
                let y = t.xlogx(p);
                let c = t.clamp_min(v[1], 0.0);
                let y = t.mul(y, c)?;
                Ok(t.sum(y))
            }),
        ];
        let mut rng = rng_for([7, 0, 0, 4]);
        for (name, kind, f) in cases {
            for _ in 0..20 {
                let r = rng.random_range(2..=4);
                let c = rng.random_range(2..=4);
                let inputs = match kind {
                    // matmul: r×c · c×r
                    2 => vec![random(&mut rng, &[r, c]), random(&mut rng, &[c, r])],
                    // pairwise / row broadcast: shared column count
                    1 => vec![random(&mut rng, &[r, c]), random(&mut rng, &[r + 1, c])],
                    // matrix plus a row vector
                    3 => vec![random(&mut rng, &[r, c]), random(&mut rng, &[c])],
                    _ => vec![random(&mut rng, &[r, c]), random(&mut rng, &[r, c])],
                };
                let report = gradcheck::check(name, &inputs, &[], f).unwrap();
                assert!(report.passed(), "{name}: {report:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
            let mut t = Tape::new();
            let v = t.constant(Tensor::vector(z).unwrap());
            let p = t.softmax(v).unwrap();
            let d = t.value(p).data();
            prop_assert!(d.iter().all(|&x| x >= 0.0));
            prop_assert!((math::sum(d) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn replay_is_bit_identical(seed in any::<u64>()) {
            let run = || {
                let mut rng = rng_for([seed, 0, 0, 5]);
                let (a, b) = (random(&mut rng, &[4, 3]), random(&mut rng, &[3, 5]));
                let mut t = Tape::new();
                let (va, vb) = (t.param(a), t.param(b));
                let y = t.matmul(va, vb).unwrap();
                let p = t.softmax(y).unwrap();
                let l = t.log(p).unwrap();
                let s = t.mean(l);
                t.backward(s).unwrap();
                (t.value(s).data().to_vec(), t.grad(va).unwrap().to_vec(), t.grad(vb).unwrap().to_vec())
            };
            prop_assert_eq!(run(), run());
        }

        #[test]
        fn shape_matches_data(shape in proptest::collection::vec(1usize..4, 0..4), extra in 0usize..2) {
            let n: usize = shape.iter().product();
            let ok = Tensor::new(shape.clone(), vec![0.0; n + extra]);
            prop_assert_eq!(ok.is_ok(), extra == 0);
            if let Ok(t) = ok {
                prop_assert_eq!(t.numel(), t.data().len());
            }
        }
    }
}
