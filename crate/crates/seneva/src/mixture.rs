//! The probabilistic core: K-component sequential latent prior, bivariate
//! Gaussian displacement decoder, recurrent variational posterior with
//! reparameterized sampling, the Bayes-rule z-posterior, and the assignment
//! network.
//!
//! Every operation exists in two forms that perform the same arithmetic: a
//! value form for inference and Monte-Carlo work, and a graph form used by
//! training to obtain gradients. A test pins the two against each other.

use nalgebra::{DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{EncoderConfig, SceneEncoder};
use crate::nn::{Linear, LstmCell, Mlp, ParamStore};

/// Clamp range for every predicted log standard deviation.
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 4.0;

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("component index {k} out of range for K={n_components}")]
    ComponentOutOfRange { k: usize, n_components: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Number of mixture components K.
    pub k: usize,
    /// Latent width per step.
    pub d_v: usize,
    /// Context feature width; must equal the encoder's d_model.
    pub d_x: usize,
    /// Prediction horizon T.
    pub t: usize,
    /// History horizon H.
    pub h: usize,
    /// Hidden width of the feed-forward nets; 0 makes them plain linear maps.
    pub d_hidden: usize,
    /// Width of the recurrent summary of the observed future.
    pub d_summary: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            k: 6,
            d_v: 2,
            d_x: 64,
            t: 12,
            h: 10,
            d_hidden: 32,
            d_summary: 16,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 1 {
            return Err("K must be >= 1".into());
        }
        if self.d_v < 1 || self.d_x < 1 {
            return Err("latent and context widths must be >= 1".into());
        }
        if self.t < 1 || self.h < 1 {
            return Err("horizons must be >= 1".into());
        }
        if self.d_summary < 1 {
            return Err("d_summary must be >= 1".into());
        }
        Ok(())
    }

    fn hidden_spec(&self) -> Vec<usize> {
        if self.d_hidden == 0 {
            vec![]
        } else {
            vec![self.d_hidden]
        }
    }
}

/// Diagonal Gaussian over a latent step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: DVector<f64>,
    pub log_std: DVector<f64>,
}

impl GaussianDiag {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, v: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let ls = self.log_std[i];
            let z = (v[i] - self.mean[i]) * (-ls).exp();
            acc += -ls - 0.5 * LN_2PI - 0.5 * z * z;
        }
        acc
    }

    /// Location-scale sample `mean + std .* eps`.
    pub fn sample_with(&self, eps: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            self.mean[i] + self.log_std[i].exp() * eps[i]
        })
    }
}

/// Bivariate Gaussian with a full covariance stored as its lower Cholesky
/// factor; diagonal entries are kept in log space so the covariance is
/// positive-definite for every parameter value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2Full {
    pub mean: Vector2<f64>,
    pub log_l11: f64,
    pub l21: f64,
    pub log_l22: f64,
}

impl Gaussian2Full {
    pub fn chol_lower(&self) -> Matrix2<f64> {
        Matrix2::new(self.log_l11.exp(), 0.0, self.l21, self.log_l22.exp())
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        let l = self.chol_lower();
        l * l.transpose()
    }

    pub fn log_pdf(&self, s: Vector2<f64>) -> f64 {
        let d = s - self.mean;
        let u1 = d[0] * (-self.log_l11).exp();
        let u2 = (d[1] - self.l21 * u1) * (-self.log_l22).exp();
        -LN_2PI - self.log_l11 - self.log_l22 - 0.5 * (u1 * u1 + u2 * u2)
    }
}

/// A sampled latent path `v = [v_1, ..., v_T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath(pub Vec<DVector<f64>>);

/// A point on the K-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights {
    probs: DVector<f64>,
}

impl MixtureWeights {
    pub fn new(probs: DVector<f64>) -> Self {
        debug_assert!(probs.iter().all(|&p| p >= 0.0));
        debug_assert!((probs.sum() - 1.0).abs() < 1e-9, "weights must sum to 1");
        Self { probs }
    }

    pub fn uniform(k: usize) -> Self {
        Self::new(DVector::from_element(k, 1.0 / k as f64))
    }

    pub fn probs(&self) -> &DVector<f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Stable softmax of log scores; invariant to a constant shift.
pub fn weights_from_log_scores(scores: &[f64]) -> MixtureWeights {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = DVector::from_fn(scores.len(), |i, _| (scores[i] - m).exp());
    let s = w.sum();
    w /= s;
    MixtureWeights::new(w)
}

/// `log(mean_i(exp(x_i)))`, max-subtracted.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

/// All learned sub-networks of the mixture.
pub struct ComponentNetworks {
    /// Per-component first-step nets: x -> (mean, log_std).
    pub init_nets: Vec<Mlp>,
    /// Per-component recurrent prior cells over `[v_prev, x]`.
    pub recur_cells: Vec<LstmCell>,
    pub recur_heads: Vec<Linear>,
    /// Displacement decoder `[v_t, x] -> bivariate Gaussian parameters`.
    pub decoder: Mlp,
    /// Runs over observed displacements to summarize the future for q.
    pub post_summary: LstmCell,
    /// Posterior recurrent cell over `[v_prev, x, summary]`.
    pub post_cell: LstmCell,
    pub post_head: Linear,
    /// Assignment network: x -> K logits.
    pub assignment: Mlp,
}

impl ComponentNetworks {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &MixtureConfig) -> Self {
        let hidden = cfg.hidden_spec();
        let rec_hidden = 2 * cfg.d_v;
        let init_nets = (0..cfg.k)
            .map(|k| {
                Mlp::new(
                    store,
                    rng,
                    &format!("mix.init{k}"),
                    cfg.d_x,
                    &hidden,
                    2 * cfg.d_v,
                )
            })
            .collect();
        let recur_cells = (0..cfg.k)
            .map(|k| {
                LstmCell::new(
                    store,
                    rng,
                    &format!("mix.recur{k}"),
                    cfg.d_v + cfg.d_x,
                    rec_hidden,
                )
            })
            .collect();
        let recur_heads = (0..cfg.k)
            .map(|k| {
                Linear::new(
                    store,
                    rng,
                    &format!("mix.recur_head{k}"),
                    rec_hidden,
                    2 * cfg.d_v,
                )
            })
            .collect();
        let decoder = Mlp::new(
            store,
            rng,
            "mix.decoder",
            cfg.d_v + cfg.d_x,
            &hidden,
            5,
        );
        let post_summary = LstmCell::new(store, rng, "mix.post_summary", 2, cfg.d_summary);
        let post_cell = LstmCell::new(
            store,
            rng,
            "mix.post_cell",
            cfg.d_v + cfg.d_x + cfg.d_summary,
            rec_hidden,
        );
        let post_head = Linear::new(store, rng, "mix.post_head", rec_hidden, 2 * cfg.d_v);
        let assignment = Mlp::new(store, rng, "mix.assign", cfg.d_x, &hidden, cfg.k);
        Self {
            init_nets,
            recur_cells,
            recur_heads,
            decoder,
            post_summary,
            post_cell,
            post_head,
            assignment,
        }
    }
}

/// The complete model: encoder plus mixture networks sharing one store.
pub struct MixtureModel {
    pub encoder_cfg: EncoderConfig,
    pub mixture_cfg: MixtureConfig,
    pub encoder: SceneEncoder,
    pub nets: ComponentNetworks,
    pub store: ParamStore,
}

impl MixtureModel {
    pub fn new(encoder_cfg: EncoderConfig, mixture_cfg: MixtureConfig, seed: u64) -> Self {
        assert_eq!(
            encoder_cfg.d_model, mixture_cfg.d_x,
            "context width must match encoder d_model"
        );
        encoder_cfg.validate().expect("invalid encoder config");
        mixture_cfg.validate().expect("invalid mixture config");
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = SceneEncoder::new(&mut store, &mut rng, encoder_cfg);
        let nets = ComponentNetworks::new(&mut store, &mut rng, &mixture_cfg);
        Self {
            encoder_cfg,
            mixture_cfg,
            encoder,
            nets,
            store,
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.store.n_scalars()
    }

    fn check_component(&self, k: usize) -> Result<(), MixtureError> {
        if k >= self.mixture_cfg.k {
            return Err(MixtureError::ComponentOutOfRange {
                k,
                n_components: self.mixture_cfg.k,
            });
        }
        Ok(())
    }

    fn split_gaussian(&self, out: &DVector<f64>) -> GaussianDiag {
        let d = self.mixture_cfg.d_v;
        GaussianDiag {
            mean: out.rows(0, d).into_owned(),
            log_std: out
                .rows(d, d)
                .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)),
        }
    }

    // ------------------------------------------------------------------
    // Value-level operations
    // ------------------------------------------------------------------

    /// Rolls component `k`'s prior forward feeding per-step means, returning
    /// the step distributions and the (deterministic) mean latent path.
    pub fn prior_rollout_mean(
        &self,
        x: &DVector<f64>,
        k: usize,
    ) -> Result<(Vec<GaussianDiag>, LatentPath), MixtureError> {
        self.check_component(k)?;
        let t = self.mixture_cfg.t;
        let mut dists = Vec::with_capacity(t);
        let mut path = Vec::with_capacity(t);
        let mut state = self.nets.recur_cells[k].zero_state_value();
        for step in 0..t {
            let dist = if step == 0 {
                self.split_gaussian(&self.nets.init_nets[k].forward_value(&self.store, x))
            } else {
                let prev: &DVector<f64> = &path[step - 1];
                let input = stack(&[prev.as_slice(), x.as_slice()]);
                state = self.nets.recur_cells[k].step_value(&self.store, &input, &state);
                self.split_gaussian(&self.nets.recur_heads[k].forward_value(&self.store, &state.h))
            };
            path.push(dist.mean.clone());
            dists.push(dist);
        }
        Ok((dists, LatentPath(path)))
    }

    /// Rolls component `k`'s prior forward feeding sampled latents
    /// `v_t = mean + std .* eps_t`.
    pub fn prior_rollout_sample(
        &self,
        x: &DVector<f64>,
        k: usize,
        eps: &[DVector<f64>],
    ) -> Result<(Vec<GaussianDiag>, LatentPath), MixtureError> {
        self.check_component(k)?;
        let t = self.mixture_cfg.t;
        if eps.len() != t {
            return Err(MixtureError::LengthMismatch {
                expected: t,
                got: eps.len(),
            });
        }
        let mut dists = Vec::with_capacity(t);
        let mut path = Vec::with_capacity(t);
        let mut state = self.nets.recur_cells[k].zero_state_value();
        for step in 0..t {
            let dist = if step == 0 {
                self.split_gaussian(&self.nets.init_nets[k].forward_value(&self.store, x))
            } else {
                let prev: &DVector<f64> = &path[step - 1];
                let input = stack(&[prev.as_slice(), x.as_slice()]);
                state = self.nets.recur_cells[k].step_value(&self.store, &input, &state);
                self.split_gaussian(&self.nets.recur_heads[k].forward_value(&self.store, &state.h))
            };
            path.push(dist.sample_with(&eps[step]));
            dists.push(dist);
        }
        Ok((dists, LatentPath(path)))
    }

    /// Per-step prior distributions of component `k` conditioned on the
    /// given latent path (the recurrence is fed with `v` itself).
    pub fn prior_dists_along(
        &self,
        x: &DVector<f64>,
        k: usize,
        v: &LatentPath,
    ) -> Result<Vec<GaussianDiag>, MixtureError> {
        self.check_component(k)?;
        let t = self.mixture_cfg.t;
        if v.0.len() != t {
            return Err(MixtureError::LengthMismatch {
                expected: t,
                got: v.0.len(),
            });
        }
        let mut dists = Vec::with_capacity(t);
        let mut state = self.nets.recur_cells[k].zero_state_value();
        for step in 0..t {
            let dist = if step == 0 {
                self.split_gaussian(&self.nets.init_nets[k].forward_value(&self.store, x))
            } else {
                let input = stack(&[v.0[step - 1].as_slice(), x.as_slice()]);
                state = self.nets.recur_cells[k].step_value(&self.store, &input, &state);
                self.split_gaussian(&self.nets.recur_heads[k].forward_value(&self.store, &state.h))
            };
            dists.push(dist);
        }
        Ok(dists)
    }

    /// Summarizes the observed future displacements for the posterior.
    fn future_summary(&self, s_f: &[[f64; 2]]) -> DVector<f64> {
        let mut state = self.nets.post_summary.zero_state_value();
        for s in s_f {
            let input = DVector::from_column_slice(s);
            state = self.nets.post_summary.step_value(&self.store, &input, &state);
        }
        state.h
    }

    /// Recurrent posterior rollout with injected reparameterization noise;
    /// `eps = 0` returns the per-step posterior means as the sample.
    pub fn posterior_rollout(
        &self,
        x: &DVector<f64>,
        s_f: &[[f64; 2]],
        eps: &[DVector<f64>],
    ) -> Result<(Vec<GaussianDiag>, LatentPath), MixtureError> {
        let t = self.mixture_cfg.t;
        if s_f.len() != t {
            return Err(MixtureError::LengthMismatch {
                expected: t,
                got: s_f.len(),
            });
        }
        if eps.len() != t {
            return Err(MixtureError::LengthMismatch {
                expected: t,
                got: eps.len(),
            });
        }
        let summary = self.future_summary(s_f);
        let mut dists = Vec::with_capacity(t);
        let mut path: Vec<DVector<f64>> = Vec::with_capacity(t);
        let mut state = self.nets.post_cell.zero_state_value();
        for step in 0..t {
            let prev = if step == 0 {
                DVector::zeros(self.mixture_cfg.d_v)
            } else {
                path[step - 1].clone()
            };
            let input = stack(&[prev.as_slice(), x.as_slice(), summary.as_slice()]);
            state = self.nets.post_cell.step_value(&self.store, &input, &state);
            let dist =
                self.split_gaussian(&self.nets.post_head.forward_value(&self.store, &state.h));
            path.push(dist.sample_with(&eps[step]));
            dists.push(dist);
        }
        Ok((dists, LatentPath(path)))
    }

    /// Full bivariate displacement distribution for one step.
    pub fn decode_step(&self, v_t: &DVector<f64>, x: &DVector<f64>) -> Gaussian2Full {
        let input = stack(&[v_t.as_slice(), x.as_slice()]);
        let out = self.nets.decoder.forward_value(&self.store, &input);
        Gaussian2Full {
            mean: Vector2::new(out[0], out[1]),
            log_l11: out[2].clamp(LOG_STD_MIN, LOG_STD_MAX),
            l21: out[3],
            log_l22: out[4].clamp(LOG_STD_MIN, LOG_STD_MAX),
        }
    }

    /// `sum_t log N(s_t; decode(v_t, x))` in nats.
    pub fn log_lik_future(
        &self,
        s_f: &[[f64; 2]],
        v: &LatentPath,
        x: &DVector<f64>,
    ) -> Result<f64, MixtureError> {
        if s_f.len() != v.0.len() {
            return Err(MixtureError::LengthMismatch {
                expected: v.0.len(),
                got: s_f.len(),
            });
        }
        Ok(s_f
            .iter()
            .zip(&v.0)
            .map(|(s, v_t)| {
                self.decode_step(v_t, x)
                    .log_pdf(Vector2::new(s[0], s[1]))
            })
            .sum())
    }

    /// `log p(v | x, z=k)` along the provided path, in nats.
    pub fn log_prior_v(
        &self,
        v: &LatentPath,
        x: &DVector<f64>,
        k: usize,
    ) -> Result<f64, MixtureError> {
        let dists = self.prior_dists_along(x, k, v)?;
        Ok(dists
            .iter()
            .zip(&v.0)
            .map(|(d, v_t)| d.log_pdf(v_t))
            .sum())
    }

    /// Reparameterized posterior over the component indicator:
    /// `softmax_k(log p(z=k) + log p(v|x,z=k))` with the uniform prior.
    pub fn z_posterior(
        &self,
        v: &LatentPath,
        x: &DVector<f64>,
    ) -> Result<MixtureWeights, MixtureError> {
        let k = self.mixture_cfg.k;
        let log_prior_z = -(k as f64).ln();
        let scores: Vec<f64> = (0..k)
            .map(|c| self.log_prior_v(v, x, c).map(|lp| log_prior_z + lp))
            .collect::<Result<_, _>>()?;
        Ok(weights_from_log_scores(&scores))
    }

    /// Assignment network forward: log-softmax-normalized log weights and
    /// the corresponding simplex.
    pub fn assignment_forward(&self, x: &DVector<f64>) -> (DVector<f64>, MixtureWeights) {
        let logits = self.nets.assignment.forward_value(&self.store, x);
        let m = logits.max();
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let log_w = logits.map(|l| l - lse);
        let probs = log_w.map(f64::exp);
        (log_w, MixtureWeights::new(probs))
    }

    /// Importance-weighted estimate of the target assignment weights
    /// `p(z=k | x, s_f)`, treated as a constant during training.
    pub fn assignment_target<R: Rng>(
        &self,
        s_f: &[[f64; 2]],
        x: &DVector<f64>,
        n_mc: usize,
        rng: &mut R,
    ) -> Result<MixtureWeights, MixtureError> {
        assert!(n_mc >= 1);
        let k = self.mixture_cfg.k;
        let mut per_component: Vec<Vec<f64>> = vec![Vec::with_capacity(n_mc); k];
        for _ in 0..n_mc {
            let eps = draw_eps(rng, self.mixture_cfg.t, self.mixture_cfg.d_v);
            let (q_dists, v) = self.posterior_rollout(x, s_f, &eps)?;
            let log_q: f64 = q_dists
                .iter()
                .zip(&v.0)
                .map(|(d, v_t)| d.log_pdf(v_t))
                .sum();
            let log_lik = self.log_lik_future(s_f, &v, x)?;
            for (c, bucket) in per_component.iter_mut().enumerate() {
                let lp = self.log_prior_v(&v, x, c)?;
                bucket.push(log_lik + lp - log_q);
            }
        }
        let scores: Vec<f64> = per_component.iter().map(|b| log_mean_exp(b)).collect();
        Ok(weights_from_log_scores(&scores))
    }

    // ------------------------------------------------------------------
    // Graph-level operations (training path)
    // ------------------------------------------------------------------

    fn split_gaussian_graph(&self, g: &mut Graph, out: NodeId) -> (NodeId, NodeId) {
        let d = self.mixture_cfg.d_v;
        let mean = g.slice_rows(out, 0, d);
        let raw = g.slice_rows(out, d, d);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        (mean, log_std)
    }

    /// Posterior rollout on the graph with fixed noise values; returns the
    /// per-step `(mean, log_std)` nodes and the sampled latent nodes.
    pub fn posterior_rollout_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        s_f: &[[f64; 2]],
        eps: &[DVector<f64>],
    ) -> (Vec<(NodeId, NodeId)>, Vec<NodeId>) {
        let t = self.mixture_cfg.t;
        assert_eq!(s_f.len(), t);
        assert_eq!(eps.len(), t);
        let mut state = self.nets.post_summary.zero_state_graph(g);
        for s in s_f {
            let input = g.constant(nalgebra::DMatrix::from_column_slice(2, 1, s));
            state = self.nets.post_summary.step_graph(g, &self.store, input, state);
        }
        let summary = state.h;

        let mut dists = Vec::with_capacity(t);
        let mut latents = Vec::with_capacity(t);
        let mut cell = self.nets.post_cell.zero_state_graph(g);
        for step in 0..t {
            let prev = if step == 0 {
                g.constant(nalgebra::DMatrix::zeros(self.mixture_cfg.d_v, 1))
            } else {
                latents[step - 1]
            };
            let with_x = g.concat_rows(prev, x);
            let input = g.concat_rows(with_x, summary);
            cell = self.nets.post_cell.step_graph(g, &self.store, input, cell);
            let out = self.nets.post_head.forward_graph(g, &self.store, cell.h);
            let (mean, log_std) = self.split_gaussian_graph(g, out);
            let std = g.exp(log_std);
            let e = g.constant(nalgebra::DMatrix::from_column_slice(
                self.mixture_cfg.d_v,
                1,
                eps[step].as_slice(),
            ));
            let noise = g.mul(std, e);
            let v = g.add(mean, noise);
            latents.push(v);
            dists.push((mean, log_std));
        }
        (dists, latents)
    }

    /// Per-step prior distributions of component `k` on the graph,
    /// conditioned on the provided latent path nodes.
    pub fn prior_dists_along_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        k: usize,
        v: &[NodeId],
    ) -> Vec<(NodeId, NodeId)> {
        let t = self.mixture_cfg.t;
        assert_eq!(v.len(), t);
        let mut dists = Vec::with_capacity(t);
        let mut state = self.nets.recur_cells[k].zero_state_graph(g);
        for step in 0..t {
            let out = if step == 0 {
                self.nets.init_nets[k].forward_graph(g, &self.store, x)
            } else {
                let input = g.concat_rows(v[step - 1], x);
                state = self.nets.recur_cells[k].step_graph(g, &self.store, input, state);
                self.nets.recur_heads[k].forward_graph(g, &self.store, state.h)
            };
            dists.push(self.split_gaussian_graph(g, out));
        }
        dists
    }

    /// Graph log-density of a diagonal Gaussian at node `v`.
    pub fn gaussian_diag_logp_graph(
        g: &mut Graph,
        mean: NodeId,
        log_std: NodeId,
        v: NodeId,
    ) -> NodeId {
        let d = g.value(mean).nrows();
        let diff = g.sub(v, mean);
        let sq = g.mul(diff, diff);
        let neg2ls = g.scale(log_std, -2.0);
        let inv_var = g.exp(neg2ls);
        let quad = g.mul(sq, inv_var);
        let quad_sum = g.sum(quad);
        let ls_sum = g.sum(log_std);
        let half_quad = g.scale(quad_sum, -0.5);
        let neg_ls = g.neg(ls_sum);
        let a = g.add(half_quad, neg_ls);
        g.add_const(a, -0.5 * LN_2PI * d as f64)
    }

    /// Graph log-density of the decoded bivariate Gaussian at displacement `s_t`.
    pub fn decode_logp_graph(&self, g: &mut Graph, v_t: NodeId, x: NodeId, s_t: [f64; 2]) -> NodeId {
        let input = g.concat_rows(v_t, x);
        let out = self.nets.decoder.forward_graph(g, &self.store, input);
        let mean = g.slice_rows(out, 0, 2);
        let la_raw = g.slice_rows(out, 2, 1);
        let la = g.clamp(la_raw, LOG_STD_MIN, LOG_STD_MAX);
        let l21 = g.slice_rows(out, 3, 1);
        let lc_raw = g.slice_rows(out, 4, 1);
        let lc = g.clamp(lc_raw, LOG_STD_MIN, LOG_STD_MAX);

        let s = g.constant(nalgebra::DMatrix::from_column_slice(2, 1, &s_t));
        let d = g.sub(s, mean);
        let d1 = g.slice_rows(d, 0, 1);
        let d2 = g.slice_rows(d, 1, 1);
        let inv_l11 = {
            let n = g.neg(la);
            g.exp(n)
        };
        let u1 = g.mul(d1, inv_l11);
        let lu = g.mul(l21, u1);
        let r = g.sub(d2, lu);
        let inv_l22 = {
            let n = g.neg(lc);
            g.exp(n)
        };
        let u2 = g.mul(r, inv_l22);
        let u1s = g.mul(u1, u1);
        let u2s = g.mul(u2, u2);
        let quad = g.add(u1s, u2s);
        let half_quad = g.scale(quad, -0.5);
        let la_lc = g.add(la, lc);
        let neg_det = g.neg(la_lc);
        let a = g.add(half_quad, neg_det);
        g.add_const(a, -LN_2PI)
    }

    /// Graph assignment-network log weights (log-softmax of the logits).
    pub fn assignment_log_weights_graph(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let logits = self.nets.assignment.forward_graph(g, &self.store, x);
        let m = g.value(logits).max();
        let shifted = g.add_const(logits, -m);
        let e = g.exp(shifted);
        let total = g.sum(e);
        let log_total = g.ln(total);
        // log_softmax = shifted - log(sum(exp(shifted)))
        let neg = g.neg(log_total);
        let ones = g.constant(nalgebra::DMatrix::from_element(self.mixture_cfg.k, 1, 1.0));
        let spread = g.matmul(ones, neg);
        g.add(shifted, spread)
    }
}

/// Concatenates slices into one vector.
fn stack(parts: &[&[f64]]) -> DVector<f64> {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        out.extend_from_slice(p);
    }
    DVector::from_vec(out)
}

/// Draws `t` standard-normal noise vectors of width `d_v`.
pub fn draw_eps<R: Rng>(rng: &mut R, t: usize, d_v: usize) -> Vec<DVector<f64>> {
    (0..t)
        .map(|_| DVector::from_fn(d_v, |_, _| StandardNormal.sample(rng)))
        .collect()
}

/// Zero noise for deterministic (mean) posterior samples.
pub fn zero_eps(t: usize, d_v: usize) -> Vec<DVector<f64>> {
    (0..t).map(|_| DVector::zeros(d_v)).collect()
}
