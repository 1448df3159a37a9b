//! Scene feature encoding: per-entity subgraph encoders over vectorized
//! tracks and map polylines, followed by a cascade of interaction attention
//! blocks (agent-to-map, map-to-map, map-to-agent, agent-to-agent). The
//! output is the target agent's token after the last level, the context
//! feature `x`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::scene::{split_long_polylines, AgentTrack, MapPolyline, Scene, MAX_POLYLINE_VECTORS};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("empty {0}: subgraph input must contain at least one vector")]
    EmptyEntity(&'static str),
    #[error("too many {kind}: got {got}, limit {limit}")]
    TooManyEntities {
        kind: &'static str,
        got: usize,
        limit: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub subgraph_depth: usize,
    pub n_levels: usize,
    pub n_heads: usize,
    pub max_neighbors: usize,
    pub max_polylines: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            subgraph_depth: 3,
            n_levels: 2,
            n_heads: 4,
            max_neighbors: 32,
            max_polylines: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err("d_model must be a positive even number".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.subgraph_depth == 0 || self.n_levels == 0 || self.n_heads == 0 {
            return Err("all depth/level/head counts must be >= 1".into());
        }
        if self.max_neighbors == 0 || self.max_polylines == 0 {
            return Err("entity limits must be >= 1".into());
        }
        Ok(())
    }
}

const AGENT_FEATURE_WIDTH: usize = 7;
const MAP_FEATURE_WIDTH: usize = 4;

/// VectorNet-style subgraph: per-vector feed-forward layers with max-pool
/// message passing, then a max-pool readout to one entity feature.
#[derive(Debug, Clone)]
struct Subgraph {
    layers: Vec<(Linear, LayerNorm)>,
}

impl Subgraph {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_width: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let half = cfg.d_model / 2;
        let mut layers = Vec::new();
        let mut prev = in_width;
        for i in 0..cfg.subgraph_depth {
            let lin = Linear::new(store, rng, &format!("{name}.layer{i}"), prev, half);
            let ln = LayerNorm::new(store, &format!("{name}.norm{i}"), half);
            layers.push((lin, ln));
            prev = cfg.d_model;
        }
        Self { layers }
    }

    /// `features` is width x n_vectors; returns a d_model x 1 entity feature.
    fn forward(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> NodeId {
        let mut tokens = features;
        for (lin, ln) in &self.layers {
            let h = lin.forward_graph(g, store, tokens);
            let n = ln.forward_graph(g, store, h);
            let a = g.tanh(n);
            let pooled = g.row_max(a);
            // Broadcast the pooled half back onto every vector token.
            let ncols = g.value(a).ncols();
            let ones = g.constant(DMatrix::from_element(1, ncols, 1.0));
            let tiled = g.matmul(pooled, ones);
            tokens = g.concat_rows(a, tiled);
        }
        g.row_max(tokens)
    }
}

/// One pre-norm residual attention block: `q + MHA(LN(q), LN(kv))`.
#[derive(Debug, Clone)]
struct AttnBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    mha: MultiHeadAttention,
}

impl AttnBlock {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &EncoderConfig) -> Self {
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), cfg.d_model),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), cfg.d_model),
            mha: MultiHeadAttention::new(store, rng, name, cfg.d_model, cfg.n_heads),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Option<NodeId>,
        keys: Option<NodeId>,
    ) -> Option<NodeId> {
        let q = queries?;
        let Some(kv) = keys else {
            // No entities to attend over; the block degenerates to identity.
            return Some(q);
        };
        let qn = self.ln_q.forward_graph(g, store, q);
        let kn = self.ln_kv.forward_graph(g, store, kv);
        let attended = self.mha.forward_graph(g, store, qn, kn);
        Some(g.add(q, attended))
    }
}

struct InteractionLevel {
    a2m: AttnBlock,
    m2m: AttnBlock,
    m2a: AttnBlock,
    a2a: AttnBlock,
}

/// The full scene encoder; all parameters live in the shared [`ParamStore`].
pub struct SceneEncoder {
    pub cfg: EncoderConfig,
    agent_subgraph: Subgraph,
    map_subgraph: Subgraph,
    levels: Vec<InteractionLevel>,
    out_norm: LayerNorm,
}

impl SceneEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: EncoderConfig) -> Self {
        let agent_subgraph = Subgraph::new(store, rng, "enc.agent_sub", AGENT_FEATURE_WIDTH, &cfg);
        let map_subgraph = Subgraph::new(store, rng, "enc.map_sub", MAP_FEATURE_WIDTH, &cfg);
        let levels = (0..cfg.n_levels)
            .map(|l| InteractionLevel {
                a2m: AttnBlock::new(store, rng, &format!("enc.l{l}.a2m"), &cfg),
                m2m: AttnBlock::new(store, rng, &format!("enc.l{l}.m2m"), &cfg),
                m2a: AttnBlock::new(store, rng, &format!("enc.l{l}.m2a"), &cfg),
                a2a: AttnBlock::new(store, rng, &format!("enc.l{l}.a2a"), &cfg),
            })
            .collect();
        let out_norm = LayerNorm::new(store, "enc.out_norm", cfg.d_model);
        Self {
            cfg,
            agent_subgraph,
            map_subgraph,
            levels,
            out_norm,
        }
    }

    /// Per-vector features for an agent track: position, heading encoded as
    /// (cos, sin), velocity, and a normalized timestep index.
    fn agent_features(track: &AgentTrack) -> DMatrix<f64> {
        let h = track.states.len();
        DMatrix::from_fn(AGENT_FEATURE_WIDTH, h, |row, t| {
            let s = &track.states[t];
            match row {
                0 => s.x,
                1 => s.y,
                2 => s.heading.cos(),
                3 => s.heading.sin(),
                4 => s.vx,
                5 => s.vy,
                _ => t as f64 / h as f64,
            }
        })
    }

    fn map_features(poly: &MapPolyline) -> DMatrix<f64> {
        let n = poly.vectors.len();
        DMatrix::from_fn(MAP_FEATURE_WIDTH, n, |row, j| poly.vectors[j][row])
    }

    /// Encodes a single agent track with the agent subgraph parameters.
    pub fn encode_agent_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        track: &AgentTrack,
    ) -> Result<NodeId, EncoderError> {
        if track.states.is_empty() {
            return Err(EncoderError::EmptyEntity("agent track"));
        }
        let feats = g.constant(Self::agent_features(track));
        Ok(self.agent_subgraph.forward(g, store, feats))
    }

    /// Encodes a single map polyline with the map subgraph parameters.
    pub fn encode_polyline_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        poly: &MapPolyline,
    ) -> Result<NodeId, EncoderError> {
        if poly.vectors.is_empty() {
            return Err(EncoderError::EmptyEntity("polyline"));
        }
        let feats = g.constant(Self::map_features(poly));
        Ok(self.map_subgraph.forward(g, store, feats))
    }

    /// Encodes a normalized scene into the context feature `x`
    /// (d_model x 1). The target agent is token zero.
    pub fn encode_scene_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &Scene,
    ) -> Result<NodeId, EncoderError> {
        if scene.neighbors.len() > self.cfg.max_neighbors {
            return Err(EncoderError::TooManyEntities {
                kind: "neighbors",
                got: scene.neighbors.len(),
                limit: self.cfg.max_neighbors,
            });
        }
        let map = split_long_polylines(&scene.map, MAX_POLYLINE_VECTORS);
        if map.len() > self.cfg.max_polylines {
            return Err(EncoderError::TooManyEntities {
                kind: "polylines",
                got: map.len(),
                limit: self.cfg.max_polylines,
            });
        }

        let mut agent_tokens = vec![self.encode_agent_graph(g, store, &scene.target)?];
        for n in &scene.neighbors {
            agent_tokens.push(self.encode_agent_graph(g, store, n)?);
        }
        let mut agents = Some(concat_cols(g, &agent_tokens));

        let map_tokens: Vec<NodeId> = map
            .iter()
            .map(|p| self.encode_polyline_graph(g, store, p))
            .collect::<Result<_, _>>()?;
        let mut maps = if map_tokens.is_empty() {
            None
        } else {
            Some(concat_cols(g, &map_tokens))
        };

        for level in &self.levels {
            maps = level.a2m.forward(g, store, maps, agents);
            maps = level.m2m.forward(g, store, maps, maps);
            agents = level.m2a.forward(g, store, agents, maps);
            agents = level.a2a.forward(g, store, agents, agents);
        }

        let agents = agents.expect("target token always present");
        let normed = self.out_norm.forward_graph(g, store, agents);
        Ok(g.column(normed, 0))
    }

    /// Value-level convenience wrapper around [`Self::encode_scene_graph`].
    pub fn encode_scene_value(
        &self,
        store: &ParamStore,
        scene: &Scene,
    ) -> Result<DVector<f64>, EncoderError> {
        let mut g = Graph::new();
        let x = self.encode_scene_graph(&mut g, store, scene)?;
        Ok(DVector::from_column_slice(g.value(x).as_slice()))
    }
}

/// Horizontal concatenation of column nodes via transpose + row concat.
fn concat_cols(g: &mut Graph, cols: &[NodeId]) -> NodeId {
    let mut acc = g.transpose(cols[0]);
    for &c in &cols[1..] {
        let t = g.transpose(c);
        acc = g.concat_rows(acc, t);
    }
    g.transpose(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{MotionState, SceneMeta};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            subgraph_depth: 2,
            n_levels: 1,
            n_heads: 2,
            max_neighbors: 4,
            max_polylines: 8,
        }
    }

    fn build(cfg: EncoderConfig) -> (SceneEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let enc = SceneEncoder::new(&mut store, &mut rng, cfg);
        (enc, store)
    }

    fn track(id: &str, y: f64, h: usize) -> AgentTrack {
        AgentTrack {
            agent_id: id.into(),
            states: (0..h)
                .map(|i| MotionState {
                    x: i as f64 * 0.5 - 2.0,
                    y,
                    heading: 0.1 * y,
                    vx: 5.0,
                    vy: 0.2 * y,
                })
                .collect(),
        }
    }

    fn polyline(y: f64, n: usize) -> MapPolyline {
        MapPolyline {
            vectors: (0..n)
                .map(|i| [i as f64, y, (i + 1) as f64, y])
                .collect(),
        }
    }

    fn toy_scene() -> Scene {
        Scene {
            target: track("t", 0.0, 5),
            neighbors: vec![track("n1", 3.0, 5), track("n2", -3.0, 5)],
            map: vec![polyline(1.0, 6), polyline(-1.0, 6), polyline(5.0, 3)],
            future: None,
            meta: SceneMeta {
                geometry: "test".into(),
                ood: false,
            },
        }
    }

    #[test]
    fn subgraph_feature_is_permutation_invariant_over_vectors() {
        let (enc, store) = build(toy_config());
        // Chaining is irrelevant to the subgraph math; feed a polyline with
        // reordered vectors directly to the subgraph encoder.
        let poly = polyline(1.0, 6);
        let mut reordered = poly.clone();
        reordered.vectors.reverse();

        let mut g = Graph::new();
        let a = enc.encode_polyline_graph(&mut g, &store, &poly).unwrap();
        let b = enc
            .encode_polyline_graph(&mut g, &store, &reordered)
            .unwrap();
        let (av, bv) = (g.value(a).clone(), g.value(b));
        assert_relative_eq!(av, *bv, epsilon = 1e-6);
    }

    #[test]
    fn identical_entities_give_identical_features() {
        let (enc, store) = build(toy_config());
        let poly = polyline(2.0, 4);
        let mut g = Graph::new();
        let a = enc.encode_polyline_graph(&mut g, &store, &poly).unwrap();
        let b = enc.encode_polyline_graph(&mut g, &store, &poly).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn subgraph_output_width_is_d_model_for_any_length() {
        let (enc, store) = build(toy_config());
        for n in [1usize, 5, 50] {
            let mut g = Graph::new();
            let f = enc
                .encode_polyline_graph(&mut g, &store, &polyline(0.5, n))
                .unwrap();
            assert_eq!(g.value(f).shape(), (16, 1));
        }
    }

    #[test]
    fn empty_entity_is_rejected() {
        let (enc, store) = build(toy_config());
        let mut g = Graph::new();
        let empty = MapPolyline { vectors: vec![] };
        assert!(matches!(
            enc.encode_polyline_graph(&mut g, &store, &empty),
            Err(EncoderError::EmptyEntity(_))
        ));
    }

    #[test]
    fn scene_with_no_neighbors_and_one_polyline_encodes_finite() {
        let (enc, store) = build(toy_config());
        let mut scene = toy_scene();
        scene.neighbors.clear();
        scene.map.truncate(1);
        let x = enc.encode_scene_value(&store, &scene).unwrap();
        assert_eq!(x.len(), 16);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scene_with_empty_map_encodes_finite() {
        let (enc, store) = build(toy_config());
        let mut scene = toy_scene();
        scene.map.clear();
        let x = enc.encode_scene_value(&store, &scene).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn context_feature_is_permutation_invariant_over_entities() {
        let (enc, store) = build(toy_config());
        let scene = toy_scene();
        let mut permuted = scene.clone();
        permuted.neighbors.swap(0, 1);
        permuted.map.swap(0, 2);

        let a = enc.encode_scene_value(&store, &scene).unwrap();
        let b = enc.encode_scene_value(&store, &permuted).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-6);
    }

    #[test]
    fn duplicated_neighbor_still_gives_finite_feature() {
        let (enc, store) = build(toy_config());
        let mut scene = toy_scene();
        scene.neighbors.push(scene.neighbors[0].clone());
        let x = enc.encode_scene_value(&store, &scene).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_many_entities_error_names_the_limit() {
        let (enc, store) = build(toy_config());
        let mut scene = toy_scene();
        for i in 0..10 {
            scene.neighbors.push(track(&format!("x{i}"), i as f64, 5));
        }
        let err = enc.encode_scene_value(&store, &scene).unwrap_err();
        assert!(err.to_string().contains("limit 4"), "{err}");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (enc, mut store) = build(toy_config());
        let scene = toy_scene();

        let loss_value = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let x = enc.encode_scene_graph(&mut g, store, &scene).unwrap();
            let l = g.sum(x);
            g.scalar_value(l)
        };

        let mut g = Graph::new();
        let x = enc.encode_scene_graph(&mut g, &store, &scene).unwrap();
        let loss = g.sum(x);
        let grads = g.backward(loss);

        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for (idx, grad) in &grads {
            let mut max_abs_a: f64 = 0.0;
            let mut max_abs_err: f64 = 0.0;
            for i in 0..grad.nrows() {
                for j in 0..grad.ncols() {
                    let orig = store.get(*idx)[(i, j)];
                    store.get_mut(*idx)[(i, j)] = orig + eps;
                    let fp = loss_value(&store);
                    store.get_mut(*idx)[(i, j)] = orig - eps;
                    let fm = loss_value(&store);
                    store.get_mut(*idx)[(i, j)] = orig;
                    let numeric = (fp - fm) / (2.0 * eps);
                    max_abs_a = max_abs_a.max(grad[(i, j)].abs()).max(numeric.abs());
                    max_abs_err = max_abs_err.max((grad[(i, j)] - numeric).abs());
                }
            }
            if max_abs_a > 1e-8 {
                max_rel = max_rel.max(max_abs_err / max_abs_a);
            }
        }
        assert!(max_rel <= 1e-4, "encoder grad check failed: {max_rel}");
    }
}
