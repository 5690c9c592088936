//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during the forward pass. Leaves
//! are either tracked parameters ([`Tape::param`]) or constants
//! ([`Tape::constant`]); [`Tape::backward`] walks the tape in reverse and
//! returns gradients for the tracked leaves only. Subgraphs that do not depend
//! on any tracked leaf are skipped entirely, which is what keeps frozen base
//! weights cheap during adapter training.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Rows whose norm falls at or below this are treated as degenerate.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Ids are assigned in recording order, so
/// every input id is smaller than the id of the node that consumes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Tanh(Var),
    RowL2Normalize { x: Var, norms: Vec<f64> },
    LogSoftmaxRows(Var),
    PickPerRow { x: Var, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    GatherRows { table: Var, ids: Vec<usize> },
    SegmentMean { x: Var, lens: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of tracked leaves, keyed by their node id.
#[derive(Debug, Default, Clone)]
pub struct GradMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            tracked: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Tracked leaf: its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`, the similarity-matrix product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng, "sub")
    }

    /// Adds a bias vector of length `d` to every row of an `n×d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.cols();
        if bv.len() != d || xv.shape().len() != 2 {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddBias(x, bias), ng, "add_bias")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c)?;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng, "scale")
    }

    /// `x * s` for a single-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = self.value(x).scale(sv)?;
        let ng = self.ng(x) || self.ng(s);
        self.push(value, Op::MulScalar(x, s), ng, "mul_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp, "exp")?;
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng, "exp")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh, "tanh")?;
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng, "tanh")
    }

    /// Divides each row by its Euclidean norm.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms = xv.row_norms();
        let value = xv.l2_normalize_rows()?;
        let ng = self.ng(x);
        self.push(value, Op::RowL2Normalize { x, norms }, ng, "row_l2_normalize")
    }

    /// Row-wise log-softmax, computed with max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = log_softmax_rows(self.value(x))?;
        let ng = self.ng(x);
        self.push(value, Op::LogSoftmaxRows(x), ng, "log_softmax_rows")
    }

    /// Vector whose entry `i` is `x[i, cols[i]]`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if cols.len() != xv.rows() || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(Error::InvalidArgument(format!(
                "pick_per_row: {} indices for a {:?} tensor",
                cols.len(),
                xv.shape()
            )));
        }
        let out = cols.iter().enumerate().map(|(i, &c)| xv.get(i, c)).collect();
        let value = Tensor::from_parts(vec![cols.len()], out);
        let ng = self.ng(x);
        let op = Op::PickPerRow {
            x,
            cols: cols.to_vec(),
        };
        self.push(value, op, ng, "pick_per_row")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::from_parts(vec![1], vec![self.value(a).sum()]);
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng, "sum")
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::from_parts(vec![1], vec![self.value(a).mean()]);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng, "reduce_mean")
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        let sq: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::from_parts(vec![1], vec![sq / av.len() as f64]);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mse(a, b), ng, "mse")
    }

    /// Rows of `table` at `ids`, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::OutOfVocabulary {
                token: bad,
                vocab: tv.rows(),
            });
        }
        let value = tv.select_rows(ids)?;
        let ng = self.ng(table);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(value, op, ng, "gather_rows")
    }

    /// Averages consecutive runs of rows: output row `s` is the mean of the
    /// next `lens[s]` input rows.
    pub fn segment_mean(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if lens.iter().sum::<usize>() != xv.rows() {
            return Err(Error::InvalidArgument(format!(
                "segment lengths sum to {} but input has {} rows",
                lens.iter().sum::<usize>(),
                xv.rows()
            )));
        }
        if let Some(index) = lens.iter().position(|&l| l == 0) {
            return Err(Error::EmptySequence { index });
        }
        let c = xv.cols();
        let mut out = vec![0.0; lens.len() * c];
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            let orow = &mut out[s * c..(s + 1) * c];
            for r in start..start + len {
                for (o, v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / len as f64;
            orow.iter_mut().for_each(|o| *o *= inv);
            start += len;
        }
        let value = Tensor::from_parts(vec![lens.len(), c], out);
        let ng = self.ng(x);
        let op = Op::SegmentMean {
            x,
            lens: lens.to_vec(),
        };
        self.push(value, op, ng, "segment_mean")
    }

    /// Reverse pass from a scalar node. Returns gradients for every tracked
    /// leaf, including zero gradients for leaves the loss does not touch.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let mut grads = GradMap::default();
        if self.nodes.is_empty() {
            return Ok(grads);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if node.tracked {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                t.check_finite("backward")?;
                grads.grads.insert(Var(id), t);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.tracked {
                grads
                    .grads
                    .entry(Var(id))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &|s| gemm_nt(g, bv.data(), s, r, c, k));
                acc(*b, &|s| gemm_tn(av.data(), g, s, r, k, c));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.rows());
                acc(*a, &|s| gemm_nn(g, bv.data(), s, r, c, k));
                acc(*b, &|s| gemm_tn(g, av.data(), s, r, c, k));
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::AddBias(x, b) => {
                let d = val(*b).len();
                acc(*x, &|s| add_into(s, g));
                acc(*b, &|s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            Op::MulScalar(x, sc) => {
                let sv = val(*sc).item();
                let xv = val(*x);
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v));
                acc(*sc, &|s| s[0] += g.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::RowL2Normalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &|s| {
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[i * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &|s| {
                    for i in 0..y.rows() {
                        let gr = &g[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for (j, yv) in y.row(i).iter().enumerate() {
                            s[i * c + j] += gr[j] - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::PickPerRow { x, cols } => {
                let c = val(*x).cols();
                acc(*x, &|s| {
                    for (i, &col) in cols.iter().enumerate() {
                        s[i * c + col] += g[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let inv = g[0] / val(*a).len() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|o| *o += inv));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = 2.0 * g[0] / av.len() as f64;
                acc(*a, &|s| {
                    for ((o, x), y) in s.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o += k * (x - y);
                    }
                });
                acc(*b, &|s| {
                    for ((o, x), y) in s.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o -= k * (x - y);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let c = val(*table).cols();
                acc(*table, &|s| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::SegmentMean { x, lens } => {
                let c = val(*x).cols();
                acc(*x, &|s| {
                    let mut start = 0;
                    for (seg, &len) in lens.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        let gr = &g[seg * c..(seg + 1) * c];
                        for r in start..start + len {
                            for (o, v) in s[r * c..(r + 1) * c].iter_mut().zip(gr) {
                                *o += v * inv;
                            }
                        }
                        start += len;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

/// Row-wise log-softmax of a matrix (or a single row).
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    let t = Tensor::from_parts(x.shape().to_vec(), out);
    debug_assert_eq!(t.cols(), c);
    t.check_finite("log_softmax_rows")?;
    Ok(t)
}

/// Central-difference gradient of a scalar function, used as a test oracle.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}
