//! Parameter storage and the small set of layers the model is built from:
//! linear maps, MLPs, an LSTM cell, layer norm, and multi-head attention.
//!
//! Every layer stores indices into a [`ParamStore`] and offers a graph
//! forward (for training) plus, where inference needs it, a value forward
//! that performs the identical arithmetic without recording a tape.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{Graph, NodeId};

/// Named, shaped parameter tensors; the single owner of all learned state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DMatrix<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: DMatrix<f64>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &DMatrix<f64> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut DMatrix<f64> {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DMatrix<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Flattens all tensors into one vector (registration order, column-major).
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for t in &self.tensors {
            out.extend(t.iter().copied());
        }
        DVector::from_vec(out)
    }

    pub fn unflatten(&mut self, flat: &DVector<f64>) {
        let mut offset = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        assert_eq!(offset, flat.len());
    }
}

/// Per-tensor gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer(pub Vec<DMatrix<f64>>);

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(
            (0..store.len())
                .map(|i| {
                    let t = store.get(i);
                    DMatrix::zeros(t.nrows(), t.ncols())
                })
                .collect(),
        )
    }

    pub fn accumulate(&mut self, grads: Vec<(usize, DMatrix<f64>)>) {
        for (idx, g) in grads {
            self.0[idx] += g;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.0 {
            *g *= c;
        }
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for t in &self.0 {
            out.extend(t.iter().copied());
        }
        DVector::from_vec(out)
    }
}

/// Glorot-uniform weight init.
pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), xavier(out_dim, in_dim, rng));
        let b = store.register(format!("{name}.b"), DMatrix::zeros(out_dim, 1));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(self.w, store.get(self.w));
        let b = g.param(self.b, store.get(self.b));
        let wx = g.matmul(w, x);
        g.add_broadcast_col(wx, b)
    }

    pub fn forward_value(&self, store: &ParamStore, x: &DVector<f64>) -> DVector<f64> {
        store.get(self.w) * x + store.get(self.b).column(0)
    }
}

/// Feed-forward network with tanh hidden activations and a linear head.
/// An empty `hidden` list yields a plain linear map.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, rng, &format!("{name}.{i}"), prev, h));
            prev = h;
        }
        layers.push(Linear::new(
            store,
            rng,
            &format!("{name}.{}", hidden.len()),
            prev,
            out_dim,
        ));
        Self { layers }
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_graph(g, store, h);
            if i != last {
                h = g.tanh(h);
            }
        }
        h
    }

    pub fn forward_value(&self, store: &ParamStore, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_value(store, &h);
            if i != last {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }
}

/// Single-layer LSTM cell. Gate layout in the fused projection is
/// `[input, forget, candidate, output]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub proj: Linear,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Hidden and cell state of an [`LstmCell`], as graph nodes.
#[derive(Clone, Copy)]
pub struct LstmStateGraph {
    pub h: NodeId,
    pub c: NodeId,
}

/// Hidden and cell state of an [`LstmCell`], as plain values.
#[derive(Debug, Clone)]
pub struct LstmStateValue {
    pub h: DVector<f64>,
    pub c: DVector<f64>,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let proj = Linear::new(store, rng, name, in_dim + hidden, 4 * hidden);
        Self { proj, in_dim, hidden }
    }

    pub fn zero_state_graph(&self, g: &mut Graph) -> LstmStateGraph {
        let h = g.constant(DMatrix::zeros(self.hidden, 1));
        let c = g.constant(DMatrix::zeros(self.hidden, 1));
        LstmStateGraph { h, c }
    }

    pub fn zero_state_value(&self) -> LstmStateValue {
        LstmStateValue {
            h: DVector::zeros(self.hidden),
            c: DVector::zeros(self.hidden),
        }
    }

    pub fn step_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: NodeId,
        state: LstmStateGraph,
    ) -> LstmStateGraph {
        let xh = g.concat_rows(input, state.h);
        let z = self.proj.forward_graph(g, store, xh);
        let d = self.hidden;
        let zi = g.slice_rows(z, 0, d);
        let zf = g.slice_rows(z, d, d);
        let zg = g.slice_rows(z, 2 * d, d);
        let zo = g.slice_rows(z, 3 * d, d);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, state.c);
        let ig = g.mul(i, cand);
        let c = g.add(fc, ig);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmStateGraph { h, c }
    }

    pub fn step_value(
        &self,
        store: &ParamStore,
        input: &DVector<f64>,
        state: &LstmStateValue,
    ) -> LstmStateValue {
        let mut xh = DVector::zeros(self.in_dim + self.hidden);
        xh.rows_mut(0, self.in_dim).copy_from(input);
        xh.rows_mut(self.in_dim, self.hidden).copy_from(&state.h);
        let z = self.proj.forward_value(store, &xh);
        let d = self.hidden;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut c = DVector::zeros(d);
        let mut h = DVector::zeros(d);
        for j in 0..d {
            let i = sig(z[j]);
            let f = sig(z[d + j]);
            let cand = z[2 * d + j].tanh();
            let o = sig(z[3 * d + j]);
            c[j] = f * state.c[j] + i * cand;
            h[j] = o * c[j].tanh();
        }
        LstmStateValue { h, c }
    }
}

/// Layer norm with learned gain and bias, applied per column.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.register(format!("{name}.gain"), DMatrix::from_element(dim, 1, 1.0));
        let bias = store.register(format!("{name}.bias"), DMatrix::zeros(dim, 1));
        Self { gain, bias, dim }
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gain = g.param(self.gain, store.get(self.gain));
        let bias = g.param(self.bias, store.get(self.bias));
        let n = g.layer_norm_cols(x, Self::EPS);
        let scaled = g.mul_broadcast_col(n, gain);
        g.add_broadcast_col(scaled, bias)
    }
}

/// Multi-head scaled dot-product attention over token columns.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide by n_heads");
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d_model, d_model),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d_model, d_model),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d_model, d_model),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d_model, d_model),
            n_heads,
            d_model,
        }
    }

    /// Attends the `queries` tokens (d_model x n_q) over the `keys` tokens
    /// (d_model x n_kv). Returns d_model x n_q.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        keys: NodeId,
    ) -> NodeId {
        let q = self.wq.forward_graph(g, store, queries);
        let k = self.wk.forward_graph(g, store, keys);
        let v = self.wv.forward_graph(g, store, keys);
        let dh = self.d_model / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_rows(q, h * dh, dh);
            let kh = g.slice_rows(k, h * dh, dh);
            let vh = g.slice_rows(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(kt, qh);
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_cols(scaled);
            heads.push(g.matmul(vh, attn));
        }
        let mut cat = heads[0];
        for &h in &heads[1..] {
            cat = g.concat_rows(cat, h);
        }
        self.wo.forward_graph(g, store, cat)
    }
}
