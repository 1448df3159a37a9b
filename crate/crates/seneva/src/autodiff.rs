//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of a forward pass as a node on a tape.
//! Calling [`Graph::backward`] seeds the gradient of a scalar output and
//! sweeps the tape in reverse, accumulating gradients for every node.
//! Parameters are registered through [`Graph::param`] so their gradients can
//! be collected by parameter index after the sweep.
//!
//! The op set is intentionally small: dense linear algebra, element-wise maps,
//! column-wise softmax/layer-norm, row-wise max pooling, and shape surgery.
//! Everything the model needs is composed from these.

use nalgebra::DMatrix;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Constant or input; `param` is `Some(i)` for trainable parameter `i`.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Element-wise (Hadamard) product.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `a + b` where `b` is an `m x 1` column broadcast over the columns of `a`.
    AddBroadcastCol(NodeId, NodeId),
    /// `a .* b` where `b` is an `m x 1` column broadcast over the columns of `a`.
    MulBroadcastCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    /// Hard clamp; gradient passes only where the input lies inside `[lo, hi]`.
    Clamp(NodeId, f64, f64),
    /// Softmax applied independently to each column.
    SoftmaxCols(NodeId),
    /// Zero-mean unit-variance normalization of each column (no affine part).
    LayerNormCols(NodeId, f64),
    /// Per-row maximum over columns; `m x n -> m x 1`.
    RowMax(NodeId),
    /// Vertical stacking; both operands must share the column count.
    ConcatRows(NodeId, NodeId),
    /// Rows `start .. start + len` of the input.
    SliceRows(NodeId, usize, usize),
    Column(NodeId, usize),
    /// Sum of all entries; result is `1 x 1`.
    Sum(NodeId),
    Transpose(NodeId),
}

struct Node {
    op: Op,
    value: DMatrix<f64>,
}

/// A tape of recorded operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Nodes already registered for a given parameter index, so repeated
    /// `param` calls within one pass share a single leaf.
    param_nodes: Vec<(usize, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: DMatrix<f64>) -> NodeId {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite node value");
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[(0, 0)]
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(DMatrix::from_element(1, 1, value))
    }

    /// Registers parameter `index` with the given current value as a leaf.
    /// Repeated registration of the same index returns the same node.
    pub fn param(&mut self, index: usize, value: &DMatrix<f64>) -> NodeId {
        if let Some(&(_, id)) = self.param_nodes.iter().find(|(p, _)| *p == index) {
            return id;
        }
        let id = self.push(Op::Leaf, value.clone());
        self.param_nodes.push((index, id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.component_mul(&self.nodes[b].value);
        self.push(Op::Mul(a, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add_broadcast_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = &self.nodes[b].value;
        debug_assert_eq!(bv.ncols(), 1);
        let mut v = self.nodes[a].value.clone();
        for mut col in v.column_iter_mut() {
            col += bv.column(0);
        }
        self.push(Op::AddBroadcastCol(a, b), v)
    }

    pub fn mul_broadcast_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = &self.nodes[b].value;
        debug_assert_eq!(bv.ncols(), 1);
        let mut v = self.nodes[a].value.clone();
        for mut col in v.column_iter_mut() {
            col.component_mul_assign(&bv.column(0));
        }
        self.push(Op::MulBroadcastCol(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(Op::AddConst(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        debug_assert!(
            self.nodes[a].value.iter().all(|&x| x < 30.0),
            "exp argument exceeds 30; expected log-space computation upstream"
        );
        let v = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn softmax_cols(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut col in v.column_iter_mut() {
            let m = col.max();
            col.apply(|e| *e = (*e - m).exp());
            let s = col.sum();
            col /= s;
        }
        self.push(Op::SoftmaxCols(a), v)
    }

    pub fn layer_norm_cols(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut col in v.column_iter_mut() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            col.apply(|e| *e = (*e - mean) / denom);
        }
        self.push(Op::LayerNormCols(a, eps), v)
    }

    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let v = DMatrix::from_fn(x.nrows(), 1, |i, _| x.row(i).max());
        self.push(Op::RowMax(a), v)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        debug_assert_eq!(av.ncols(), bv.ncols());
        let mut v = DMatrix::zeros(av.nrows() + bv.nrows(), av.ncols());
        v.rows_mut(0, av.nrows()).copy_from(av);
        v.rows_mut(av.nrows(), bv.nrows()).copy_from(bv);
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a].value.rows(start, len).into_owned();
        self.push(Op::SliceRows(a, start, len), v)
    }

    pub fn column(&mut self, a: NodeId, j: usize) -> NodeId {
        let v = DMatrix::from_column_slice(
            self.nodes[a].value.nrows(),
            1,
            self.nodes[a].value.column(j).into_owned().as_slice(),
        );
        self.push(Op::Column(a, j), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.nodes[a].value.sum());
        self.push(Op::Sum(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), v)
    }

    /// `log(sum_i exp(x_i))` of scalar nodes, max-subtracted for stability.
    pub fn log_sum_exp(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let m = xs
            .iter()
            .map(|&id| self.scalar_value(id))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut acc = None;
        for &x in xs {
            let shifted = self.add_const(x, -m);
            let e = self.exp(shifted);
            acc = Some(match acc {
                None => e,
                Some(a) => self.add(a, e),
            });
        }
        let s = self.ln(acc.unwrap());
        self.add_const(s, m)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    /// Runs the reverse sweep from scalar node `loss` and returns, for every
    /// registered parameter, `(param_index, gradient)`.
    pub fn backward(&self, loss: NodeId) -> Vec<(usize, DMatrix<f64>)> {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(DMatrix::from_element(1, 1, 1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        self.param_nodes
            .iter()
            .map(|&(p, id)| {
                let shape = &self.nodes[id].value;
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| DMatrix::zeros(shape.nrows(), shape.ncols()));
                (p, g)
            })
            .collect()
    }

    fn accumulate(&self, id: NodeId, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let add_to = |grads: &mut [Option<DMatrix<f64>>], target: NodeId, delta: DMatrix<f64>| {
            match &mut grads[target] {
                Some(acc) => *acc += delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, a, g.clone());
                add_to(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, a, g.clone());
                add_to(grads, b, -g);
            }
            Op::Mul(a, b) => {
                add_to(grads, a, g.component_mul(&self.nodes[b].value));
                add_to(grads, b, g.component_mul(&self.nodes[a].value));
            }
            Op::MatMul(a, b) => {
                add_to(grads, a, g * self.nodes[b].value.transpose());
                add_to(grads, b, self.nodes[a].value.transpose() * g);
            }
            Op::AddBroadcastCol(a, b) => {
                add_to(grads, a, g.clone());
                let mut db = DMatrix::zeros(g.nrows(), 1);
                for col in g.column_iter() {
                    db.column_mut(0).zip_apply(&col, |acc, c| *acc += c);
                }
                add_to(grads, b, db);
            }
            Op::MulBroadcastCol(a, b) => {
                let bv = &self.nodes[b].value;
                let mut da = g.clone();
                for mut col in da.column_iter_mut() {
                    col.component_mul_assign(&bv.column(0));
                }
                add_to(grads, a, da);
                let av = &self.nodes[a].value;
                let prod = g.component_mul(av);
                let mut db = DMatrix::zeros(g.nrows(), 1);
                for col in prod.column_iter() {
                    db.column_mut(0).zip_apply(&col, |acc, c| *acc += c);
                }
                add_to(grads, b, db);
            }
            Op::Scale(a, c) => add_to(grads, a, g * c),
            Op::AddConst(a) => add_to(grads, a, g.clone()),
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)));
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, a, g.component_mul(y));
            }
            Op::Ln(a) => {
                let x = &self.nodes[a].value;
                add_to(grads, a, g.zip_map(x, |gi, xi| gi / xi));
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a].value;
                add_to(
                    grads,
                    a,
                    g.zip_map(x, |gi, xi| if (lo..=hi).contains(&xi) { gi } else { 0.0 }),
                );
            }
            Op::SoftmaxCols(a) => {
                let y = &self.nodes[id].value;
                let mut da = DMatrix::zeros(g.nrows(), g.ncols());
                for j in 0..g.ncols() {
                    let dot = g.column(j).dot(&y.column(j));
                    for i in 0..g.nrows() {
                        da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                add_to(grads, a, da);
            }
            Op::LayerNormCols(a, eps) => {
                let x = &self.nodes[a].value;
                let y = &self.nodes[id].value;
                let n = x.nrows() as f64;
                let mut da = DMatrix::zeros(g.nrows(), g.ncols());
                for j in 0..g.ncols() {
                    let mean = x.column(j).sum() / n;
                    let var = x.column(j).iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
                    let denom = (var + eps).sqrt();
                    let g_mean = g.column(j).sum() / n;
                    let gy_mean = g.column(j).dot(&y.column(j)) / n;
                    for i in 0..g.nrows() {
                        da[(i, j)] = (g[(i, j)] - g_mean - y[(i, j)] * gy_mean) / denom;
                    }
                }
                add_to(grads, a, da);
            }
            Op::RowMax(a) => {
                let x = &self.nodes[a].value;
                let mut da = DMatrix::zeros(x.nrows(), x.ncols());
                for i in 0..x.nrows() {
                    // First occurrence wins on ties; matches forward `max`.
                    let mut jmax = 0;
                    for j in 1..x.ncols() {
                        if x[(i, j)] > x[(i, jmax)] {
                            jmax = j;
                        }
                    }
                    da[(i, jmax)] = g[(i, 0)];
                }
                add_to(grads, a, da);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a].value.nrows();
                let nb = self.nodes[b].value.nrows();
                add_to(grads, a, g.rows(0, na).into_owned());
                add_to(grads, b, g.rows(na, nb).into_owned());
            }
            Op::SliceRows(a, start, len) => {
                let x = &self.nodes[a].value;
                let mut da = DMatrix::zeros(x.nrows(), x.ncols());
                da.rows_mut(start, len).copy_from(g);
                add_to(grads, a, da);
            }
            Op::Column(a, j) => {
                let x = &self.nodes[a].value;
                let mut da = DMatrix::zeros(x.nrows(), x.ncols());
                da.column_mut(j).copy_from(g);
                add_to(grads, a, da);
            }
            Op::Sum(a) => {
                let x = &self.nodes[a].value;
                add_to(
                    grads,
                    a,
                    DMatrix::from_element(x.nrows(), x.ncols(), g[(0, 0)]),
                );
            }
            Op::Transpose(a) => add_to(grads, a, g.transpose()),
        }
    }
}
