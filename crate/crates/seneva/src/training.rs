//! Loss assembly and optimization: closed-form KL terms, the Monte-Carlo
//! evidence lower bound, the focal assignment loss, an Adam loop with step
//! decay, binary checkpoints, and finite-difference gradient verification.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{EncoderConfig, EncoderError};
use crate::mixture::{
    draw_eps, log_mean_exp, weights_from_log_scores, GaussianDiag, LatentPath, MixtureConfig,
    MixtureError, MixtureModel, MixtureWeights,
};
use crate::nn::{GradBuffer, ParamStore};
use crate::scene::{positions_to_displacements, to_target_frame, Scene, SceneError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("width mismatch: q has {q}, p has {p}")]
    WidthMismatch { q: usize, p: usize },
    #[error("infinite divergence: p[{k}] = 0 where q[{k}] > 0")]
    InfiniteDivergence { k: usize },
    #[error("scene {index} has no future")]
    MissingFuture { index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between learning-rate decays.
    pub decay_step: usize,
    pub decay_rate: f64,
    /// Weight of the assignment loss in the total.
    pub alpha: f64,
    pub gamma_focal: f64,
    /// Monte-Carlo samples per scene per step.
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            decay_step: 5,
            decay_rate: 0.3,
            alpha: 1.0,
            gamma_focal: 2.0,
            n_mc: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 || self.n_mc == 0 || self.decay_step == 0 {
            return Err("batch_size, n_mc, and decay_step must be positive".into());
        }
        if self.lr <= 0.0 || self.decay_rate <= 0.0 {
            return Err("lr and decay_rate must be positive".into());
        }
        if self.alpha < 0.0 || self.gamma_focal < 0.0 {
            return Err("alpha and gamma_focal must be nonnegative".into());
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Closed-form divergences
// ----------------------------------------------------------------------

/// KL(q ‖ p) for diagonal Gaussians, summed over coordinates, in nats.
pub fn kl_diag(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64, TrainingError> {
    if q.dim() != p.dim() {
        return Err(TrainingError::WidthMismatch {
            q: q.dim(),
            p: p.dim(),
        });
    }
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mean[i], q.log_std[i]);
        let (mp, lp) = (p.mean[i], p.log_std[i]);
        let var_ratio = (2.0 * (lq - lp)).exp();
        let mean_term = (mq - mp).powi(2) * (-2.0 * lp).exp();
        acc += lp - lq + 0.5 * (var_ratio + mean_term - 1.0);
    }
    Ok(acc)
}

/// Graph version of [`kl_diag`] over per-step `(mean, log_std)` node pairs.
pub fn kl_diag_graph(
    g: &mut Graph,
    q: (NodeId, NodeId),
    p: (NodeId, NodeId),
) -> NodeId {
    let (qm, qls) = q;
    let (pm, pls) = p;
    let d = g.value(qm).nrows();
    let diff = g.sub(qm, pm);
    let d2 = g.mul(diff, diff);
    let two_qls = g.scale(qls, 2.0);
    let q_var = g.exp(two_qls);
    let num = g.add(q_var, d2);
    let neg_two_pls = g.scale(pls, -2.0);
    let inv_p_var = g.exp(neg_two_pls);
    let quad = g.mul(num, inv_p_var);
    let half_quad = g.scale(quad, 0.5);
    let ls_diff = g.sub(pls, qls);
    let per_coord = g.add(half_quad, ls_diff);
    let total = g.sum(per_coord);
    g.add_const(total, -0.5 * d as f64)
}

/// KL(q ‖ p) for categorical weights, in nats, with 0·log 0 = 0.
pub fn kl_categorical(q: &MixtureWeights, p: &MixtureWeights) -> Result<f64, TrainingError> {
    if q.len() != p.len() {
        return Err(TrainingError::WidthMismatch {
            q: q.len(),
            p: p.len(),
        });
    }
    let mut acc = 0.0;
    for k in 0..q.len() {
        let qk = q.probs()[k];
        if qk == 0.0 {
            continue;
        }
        let pk = p.probs()[k];
        if pk == 0.0 {
            return Err(TrainingError::InfiniteDivergence { k });
        }
        acc += qk * (qk / pk).ln();
    }
    Ok(acc)
}

// ----------------------------------------------------------------------
// Focal assignment loss
// ----------------------------------------------------------------------

/// Focal loss −Σ_k (1−π̂_k)^γ · target_k · log π̂_k. The boolean reports
/// whether any log had to be clamped at −30 while its target mass was
/// positive.
pub fn focal_loss(
    pi_hat: &MixtureWeights,
    target: &MixtureWeights,
    gamma: f64,
) -> Result<(f64, bool), TrainingError> {
    if pi_hat.len() != target.len() {
        return Err(TrainingError::WidthMismatch {
            q: pi_hat.len(),
            p: target.len(),
        });
    }
    let mut acc = 0.0;
    let mut clamped = false;
    for k in 0..pi_hat.len() {
        let t = target.probs()[k];
        if t == 0.0 {
            continue;
        }
        let p = pi_hat.probs()[k];
        let mut logp = p.ln();
        if logp < -30.0 {
            logp = -30.0;
            clamped = true;
        }
        acc -= (1.0 - p).powf(gamma) * t * logp;
    }
    Ok((acc, clamped))
}

// ----------------------------------------------------------------------
// Scene preparation and per-scene loss terms
// ----------------------------------------------------------------------

/// A scene normalized into the target frame with its ground-truth future
/// expressed as per-step displacements.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub s_f: Vec<[f64; 2]>,
}

/// Normalizes one scene for training or evaluation; requires a future.
pub fn prepare_scene(scene: &Scene, index: usize) -> Result<PreparedScene, TrainingError> {
    if scene.future.is_none() {
        return Err(TrainingError::MissingFuture { index });
    }
    let (norm, _) = to_target_frame(scene)?;
    let future = norm.future.clone().expect("checked above");
    let s_f = positions_to_displacements(&future, [0.0, 0.0]);
    Ok(PreparedScene { scene: norm, s_f })
}

pub fn prepare_scenes(scenes: &[Scene]) -> Result<Vec<PreparedScene>, TrainingError> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| prepare_scene(s, i))
        .collect()
}

/// Per-scene value-level loss terms, averaged over the given noise draws.
struct SceneTerms {
    term1: f64,
    term2: f64,
    term3: f64,
    /// Importance-weighted log scores per component, one entry per sample,
    /// used to form the gradient-stopped assignment target.
    iw_scores: Vec<Vec<f64>>,
}

fn scene_terms_value(
    model: &MixtureModel,
    prep: &PreparedScene,
    eps_sets: &[Vec<DVector<f64>>],
) -> Result<SceneTerms, TrainingError> {
    let k = model.mixture_cfg.k;
    let x = model.encoder.encode_scene_value(&model.store, &prep.scene)?;
    let log_prior_z = -(k as f64).ln();
    let uniform = MixtureWeights::uniform(k);

    let n = eps_sets.len();
    let (mut t1, mut t2, mut t3) = (0.0, 0.0, 0.0);
    let mut iw_scores = vec![Vec::with_capacity(n); k];
    for eps in eps_sets {
        let (q_dists, v) = model.posterior_rollout(&x, &prep.s_f, eps)?;
        let log_q: f64 = q_dists
            .iter()
            .zip(&v.0)
            .map(|(d, vt)| d.log_pdf(vt))
            .sum();
        let ll = model.log_lik_future(&prep.s_f, &v, &x)?;
        t1 += ll;

        let mut log_p = Vec::with_capacity(k);
        let mut d_k = Vec::with_capacity(k);
        for c in 0..k {
            let p_dists = model.prior_dists_along(&x, c, &v)?;
            let lp: f64 = p_dists
                .iter()
                .zip(&v.0)
                .map(|(d, vt)| d.log_pdf(vt))
                .sum();
            let mut d = 0.0;
            for (qd, pd) in q_dists.iter().zip(&p_dists) {
                d += kl_diag(qd, pd)?;
            }
            log_p.push(lp);
            d_k.push(d);
            iw_scores[c].push(ll + lp - log_q);
        }
        let scores: Vec<f64> = log_p.iter().map(|lp| log_prior_z + lp).collect();
        let w = weights_from_log_scores(&scores);
        t2 += w.probs().iter().zip(&d_k).map(|(wk, dk)| wk * dk).sum::<f64>();
        t3 += kl_categorical(&w, &uniform)?;
    }
    Ok(SceneTerms {
        term1: t1 / n as f64,
        term2: t2 / n as f64,
        term3: t3 / n as f64,
        iw_scores,
    })
}

fn target_from_scores(iw_scores: &[Vec<f64>]) -> MixtureWeights {
    let scores: Vec<f64> = iw_scores.iter().map(|b| log_mean_exp(b)).collect();
    weights_from_log_scores(&scores)
}

/// ELBO term means over the batch.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ElboBreakdown {
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

impl ElboBreakdown {
    pub fn elbo(&self) -> f64 {
        self.term1 - self.term2 - self.term3
    }
}

/// Monte-Carlo ELBO over a batch of prepared scenes; the returned scalar is
/// the batch mean.
pub fn elbo<R: Rng>(
    model: &MixtureModel,
    batch: &[PreparedScene],
    n_mc: usize,
    rng: &mut R,
) -> Result<(f64, ElboBreakdown), TrainingError> {
    assert!(n_mc >= 1);
    if batch.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let (t, d_v) = (model.mixture_cfg.t, model.mixture_cfg.d_v);
    let (mut t1, mut t2, mut t3) = (0.0, 0.0, 0.0);
    for prep in batch {
        let eps_sets: Vec<_> = (0..n_mc).map(|_| draw_eps(rng, t, d_v)).collect();
        let terms = scene_terms_value(model, prep, &eps_sets)?;
        t1 += terms.term1;
        t2 += terms.term2;
        t3 += terms.term3;
    }
    let n = batch.len() as f64;
    let breakdown = ElboBreakdown {
        term1: t1 / n,
        term2: t2 / n,
        term3: t3 / n,
    };
    Ok((breakdown.elbo(), breakdown))
}

/// Batch loss breakdown (all terms are batch means).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub elbo: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub focal: f64,
}

/// Value-level total loss −ELBO + α·focal over a batch.
pub fn total_loss<R: Rng>(
    model: &MixtureModel,
    batch: &[PreparedScene],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown, TrainingError> {
    if batch.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let (t, d_v) = (model.mixture_cfg.t, model.mixture_cfg.d_v);
    let (mut t1, mut t2, mut t3, mut focal) = (0.0, 0.0, 0.0, 0.0);
    for prep in batch {
        let eps_sets: Vec<_> = (0..cfg.n_mc).map(|_| draw_eps(rng, t, d_v)).collect();
        let terms = scene_terms_value(model, prep, &eps_sets)?;
        t1 += terms.term1;
        t2 += terms.term2;
        t3 += terms.term3;
        let target = target_from_scores(&terms.iw_scores);
        let x = model.encoder.encode_scene_value(&model.store, &prep.scene)?;
        let (_, pi_hat) = model.assignment_forward(&x);
        focal += focal_loss(&pi_hat, &target, cfg.gamma_focal)?.0;
    }
    let n = batch.len() as f64;
    let breakdown = ElboBreakdown {
        term1: t1 / n,
        term2: t2 / n,
        term3: t3 / n,
    };
    Ok(LossBreakdown {
        total: -breakdown.elbo() + cfg.alpha * focal / n,
        elbo: breakdown.elbo(),
        term1: breakdown.term1,
        term2: breakdown.term2,
        term3: breakdown.term3,
        focal: focal / n,
    })
}

/// Builds the per-scene training loss on the tape and returns the loss node
/// plus its already-computed breakdown values.
fn scene_loss_graph(
    model: &MixtureModel,
    g: &mut Graph,
    prep: &PreparedScene,
    eps_sets: &[Vec<DVector<f64>>],
    alpha: f64,
    gamma: f64,
) -> Result<(NodeId, LossBreakdown), TrainingError> {
    let k = model.mixture_cfg.k;
    let n = eps_sets.len();
    let log_prior_z = -(k as f64).ln();
    let x = model.encoder.encode_scene_graph(g, &model.store, &prep.scene)?;

    let mut t1_nodes = Vec::with_capacity(n);
    let mut t2_nodes = Vec::with_capacity(n);
    let mut t3_nodes = Vec::with_capacity(n);
    let mut iw_scores = vec![Vec::with_capacity(n); k];
    for eps in eps_sets {
        let (q_dists, v) = model.posterior_rollout_graph(g, x, &prep.s_f, eps);
        let mut ll = g.scalar(0.0);
        let mut log_q_value = 0.0;
        for (step, s) in prep.s_f.iter().enumerate() {
            let term = model.decode_logp_graph(g, v[step], x, *s);
            ll = g.add(ll, term);
        }
        for ((qm, qls), vt) in q_dists.iter().zip(&v) {
            let q = GaussianDiag {
                mean: DVector::from_column_slice(g.value(*qm).as_slice()),
                log_std: DVector::from_column_slice(g.value(*qls).as_slice()),
            };
            log_q_value += q.log_pdf(&DVector::from_column_slice(g.value(*vt).as_slice()));
        }
        t1_nodes.push(ll);

        // Component log-priors and per-component KL sums.
        let mut lp_nodes = Vec::with_capacity(k);
        let mut d_nodes = Vec::with_capacity(k);
        for c in 0..k {
            let p_dists = model.prior_dists_along_graph(g, x, c, &v);
            let mut lp = g.scalar(0.0);
            let mut d = g.scalar(0.0);
            for (step, (pm, pls)) in p_dists.iter().enumerate() {
                let term = MixtureModel::gaussian_diag_logp_graph(g, *pm, *pls, v[step]);
                lp = g.add(lp, term);
                let kl = kl_diag_graph(g, q_dists[step], (*pm, *pls));
                d = g.add(d, kl);
            }
            iw_scores[c].push(g.scalar_value(ll) + g.scalar_value(lp) - log_q_value);
            lp_nodes.push(g.add_const(lp, log_prior_z));
            d_nodes.push(d);
        }

        // z-posterior weights in-graph (softmax over the K log scores).
        let mut scores = lp_nodes[0];
        for &lp in &lp_nodes[1..] {
            scores = g.concat_rows(scores, lp);
        }
        let lse = g.log_sum_exp(&lp_nodes);
        let ones = g.constant(DMatrix::from_element(k, 1, 1.0));
        let spread = g.matmul(ones, lse);
        let log_w = g.sub(scores, spread);
        let w = g.exp(log_w);

        let mut d_vec = d_nodes[0];
        for &d in &d_nodes[1..] {
            d_vec = g.concat_rows(d_vec, d);
        }
        let weighted = g.mul(w, d_vec);
        t2_nodes.push(g.sum(weighted));

        // KL(w ‖ uniform) = Σ w log w + log K.
        let w_log_w = g.mul(w, log_w);
        let s = g.sum(w_log_w);
        t3_nodes.push(g.add_const(s, (k as f64).ln()));
    }

    let term1 = g.mean(&t1_nodes);
    let term2 = g.mean(&t2_nodes);
    let term3 = g.mean(&t3_nodes);

    // Focal assignment loss with a gradient-stopped target.
    let target = target_from_scores(&iw_scores);
    let log_pi = model.assignment_log_weights_graph(g, x);
    let log_pi_clamped = g.clamp(log_pi, -30.0, 0.0);
    let pi = g.exp(log_pi);
    let ones = g.constant(DMatrix::from_element(k, 1, 1.0));
    let one_minus = g.sub(ones, pi);
    let focus = if gamma == 0.0 {
        g.constant(DMatrix::from_element(k, 1, 1.0))
    } else {
        let safe = g.clamp(one_minus, 1e-12, 1.0);
        let lg = g.ln(safe);
        let scaled = g.scale(lg, gamma);
        g.exp(scaled)
    };
    let t_node = g.constant(DMatrix::from_column_slice(k, 1, target.probs().as_slice()));
    let weighted = g.mul(focus, t_node);
    let weighted = g.mul(weighted, log_pi_clamped);
    let focal_sum = g.sum(weighted);
    let focal = g.scale(focal_sum, -1.0);

    let neg_t1 = g.neg(term1);
    let neg_elbo_a = g.add(neg_t1, term2);
    let neg_elbo = g.add(neg_elbo_a, term3);
    let alpha_focal = g.scale(focal, alpha);
    let total = g.add(neg_elbo, alpha_focal);

    let breakdown = LossBreakdown {
        total: g.scalar_value(total),
        elbo: g.scalar_value(term1) - g.scalar_value(term2) - g.scalar_value(term3),
        term1: g.scalar_value(term1),
        term2: g.scalar_value(term2),
        term3: g.scalar_value(term3),
        focal: g.scalar_value(focal),
    };
    Ok((total, breakdown))
}

// ----------------------------------------------------------------------
// Optimizer and training loop
// ----------------------------------------------------------------------

/// Adam with the common (0.9, 0.999) moment defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<DMatrix<f64>> = (0..store.len())
            .map(|i| {
                let t = store.get(i);
                DMatrix::zeros(t.nrows(), t.ncols())
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..store.len() {
            let g = &grads.0[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(i);
            for j in 0..g.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub focal: f64,
}

/// Trains a fresh model on the dataset; single-threaded and bitwise
/// reproducible for a fixed seed.
pub fn train(
    scenes: &[Scene],
    train_cfg: &TrainConfig,
    mixture_cfg: MixtureConfig,
    encoder_cfg: EncoderConfig,
) -> Result<(MixtureModel, Adam, Vec<EpochRecord>), TrainingError> {
    let model = MixtureModel::new(encoder_cfg, mixture_cfg, train_cfg.seed);
    let adam = Adam::new(&model.store);
    train_resume(scenes, train_cfg, model, adam, 0)
}

/// Continues training from a checkpointed model, optimizer, and epoch
/// index. The random stream is fast-forwarded through the completed
/// epochs, so a resumed run is bit-identical to an uninterrupted one.
pub fn train_resume(
    scenes: &[Scene],
    train_cfg: &TrainConfig,
    mut model: MixtureModel,
    mut adam: Adam,
    start_epoch: usize,
) -> Result<(MixtureModel, Adam, Vec<EpochRecord>), TrainingError> {
    train_cfg.validate().expect("invalid train config");
    if scenes.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let prepared = prepare_scenes(scenes)?;
    let mut rng = ChaCha12Rng::seed_from_u64(train_cfg.seed.wrapping_add(0xE1B0));
    let mut records = Vec::with_capacity(train_cfg.epochs.saturating_sub(start_epoch));
    let (t, d_v) = (model.mixture_cfg.t, model.mixture_cfg.d_v);

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    // Replay the random draws of the completed epochs without touching
    // the parameters: one shuffle plus n_mc noise sets per scene.
    for _ in 0..start_epoch.min(train_cfg.epochs) {
        order.shuffle(&mut rng);
        for _ in 0..prepared.len() {
            for _ in 0..train_cfg.n_mc {
                draw_eps(&mut rng, t, d_v);
            }
        }
    }
    for epoch in start_epoch..train_cfg.epochs {
        let lr = train_cfg.lr * train_cfg.decay_rate.powi((epoch / train_cfg.decay_step) as i32);
        order.shuffle(&mut rng);
        let mut sums = EpochRecord {
            epoch,
            lr,
            total: 0.0,
            term1: 0.0,
            term2: 0.0,
            term3: 0.0,
            focal: 0.0,
        };
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut grads = GradBuffer::zeros_like(&model.store);
            let mut batch_total = 0.0;
            let mut batch = LossBreakdown {
                total: 0.0,
                elbo: 0.0,
                term1: 0.0,
                term2: 0.0,
                term3: 0.0,
                focal: 0.0,
            };
            for &i in chunk {
                let eps_sets: Vec<_> =
                    (0..train_cfg.n_mc).map(|_| draw_eps(&mut rng, t, d_v)).collect();
                let mut g = Graph::new();
                let (loss, bd) = scene_loss_graph(
                    &model,
                    &mut g,
                    &prepared[i],
                    &eps_sets,
                    train_cfg.alpha,
                    train_cfg.gamma_focal,
                )?;
                if !bd.total.is_finite() {
                    return Err(TrainingError::NanLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                grads.accumulate(g.backward(loss));
                batch_total += bd.total;
                batch.term1 += bd.term1;
                batch.term2 += bd.term2;
                batch.term3 += bd.term3;
                batch.focal += bd.focal;
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.scale(inv);
            adam.step(&mut model.store, &grads, lr);
            sums.total += batch_total * inv;
            sums.term1 += batch.term1 * inv;
            sums.term2 += batch.term2 * inv;
            sums.term3 += batch.term3 * inv;
            sums.focal += batch.focal * inv;
            n_batches += 1;
        }
        let inv = 1.0 / n_batches as f64;
        sums.total *= inv;
        sums.term1 *= inv;
        sums.term2 *= inv;
        sums.term3 *= inv;
        sums.focal *= inv;
        records.push(sums);
    }
    Ok((model, adam, records))
}

// ----------------------------------------------------------------------
// Gradient verification
// ----------------------------------------------------------------------

/// Compares the analytic gradient of the training loss against central
/// finite differences over every parameter and returns the max relative
/// error `max_i |a_i − n_i| / max(‖a‖_∞, ‖n‖_∞, 1e-10)`.
pub fn grad_check(
    model: &mut MixtureModel,
    scenes: &[Scene],
    cfg: &TrainConfig,
    fd_eps: f64,
) -> Result<f64, TrainingError> {
    let prepared = prepare_scenes(scenes)?;
    if prepared.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let (t, d_v) = (model.mixture_cfg.t, model.mixture_cfg.d_v);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let eps_sets: Vec<Vec<Vec<DVector<f64>>>> = prepared
        .iter()
        .map(|_| (0..cfg.n_mc).map(|_| draw_eps(&mut rng, t, d_v)).collect())
        .collect();

    // Freeze the assignment targets at the base point; they are
    // gradient-stopped, so finite differences must hold them fixed too.
    let mut targets = Vec::with_capacity(prepared.len());
    for (prep, eps) in prepared.iter().zip(&eps_sets) {
        let terms = scene_terms_value(model, prep, eps)?;
        targets.push(target_from_scores(&terms.iw_scores));
    }

    // Analytic gradient of the batch-mean loss.
    let mut grads = GradBuffer::zeros_like(&model.store);
    for (prep, eps) in prepared.iter().zip(&eps_sets) {
        let mut g = Graph::new();
        let (loss, _) = scene_loss_graph(model, &mut g, prep, eps, cfg.alpha, cfg.gamma_focal)?;
        grads.accumulate(g.backward(loss));
    }
    grads.scale(1.0 / prepared.len() as f64);
    let analytic = grads.flatten();

    let loss_value = |model: &MixtureModel| -> Result<f64, TrainingError> {
        let mut total = 0.0;
        for ((prep, eps), target) in prepared.iter().zip(&eps_sets).zip(&targets) {
            let terms = scene_terms_value(model, prep, eps)?;
            let x = model.encoder.encode_scene_value(&model.store, &prep.scene)?;
            let (_, pi_hat) = model.assignment_forward(&x);
            let (f, _) = focal_loss(&pi_hat, target, cfg.gamma_focal)?;
            total += -(terms.term1 - terms.term2 - terms.term3) + cfg.alpha * f;
        }
        Ok(total / prepared.len() as f64)
    };

    let flat = model.store.flatten();
    let n = flat.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut numeric = DVector::zeros(n);
    let mut work = flat.clone();
    for i in 0..n {
        work[i] = flat[i] + fd_eps;
        model.store.unflatten(&work);
        let up = loss_value(model)?;
        work[i] = flat[i] - fd_eps;
        model.store.unflatten(&work);
        let down = loss_value(model)?;
        work[i] = flat[i];
        numeric[i] = (up - down) / (2.0 * fd_eps);
    }
    model.store.unflatten(&flat);

    let scale = analytic.amax().max(numeric.amax()).max(1e-10);
    let mut max_err: f64 = 0.0;
    for i in 0..n {
        max_err = max_err.max((analytic[i] - numeric[i]).abs() / scale);
    }
    Ok(max_err)
}

// ----------------------------------------------------------------------
// Checkpointing
// ----------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"SNVA";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    mixture: MixtureConfig,
    encoder: EncoderConfig,
    epoch: Option<usize>,
    adam_t: Option<usize>,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.nrows() as u64).to_le_bytes())?;
    w.write_all(&(t.ncols() as u64).to_le_bytes())?;
    for v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, DMatrix<f64>), CheckpointError> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let name_len = u64::from_le_bytes(b8) as usize;
    if name_len > 4096 {
        return Err(CheckpointError::Corrupt("tensor name too long".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| CheckpointError::Corrupt("tensor name not UTF-8".into()))?;
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(CheckpointError::Corrupt("tensor too large".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok((name, DMatrix::from_vec(rows, cols, data)))
}

/// Saves the model (and optionally the optimizer state) to a versioned
/// binary file. Tensors are little-endian 64-bit reals, column-major.
pub fn save_checkpoint(
    path: &Path,
    model: &MixtureModel,
    train_state: Option<(usize, &Adam)>,
) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = CheckpointHeader {
        mixture: model.mixture_cfg,
        encoder: model.encoder_cfg,
        epoch: train_state.map(|(e, _)| e),
        adam_t: train_state.map(|(_, a)| a.t),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Corrupt(format!("header encode: {e}")))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;

    w.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for (name, t) in model.store.iter() {
        write_tensor(&mut w, name, t)?;
    }

    match train_state {
        Some((_, adam)) => {
            w.write_all(&[1u8])?;
            for (i, m) in adam.m.iter().enumerate() {
                write_tensor(&mut w, &format!("m{i}"), m)?;
            }
            for (i, v) in adam.v.iter().enumerate() {
                write_tensor(&mut w, &format!("v{i}"), v)?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(
    path: &Path,
) -> Result<(MixtureModel, Option<(usize, Adam)>), CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            got: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let json_len = u64::from_le_bytes(b8) as usize;
    if json_len > 1 << 20 {
        return Err(CheckpointError::Corrupt("header too large".into()));
    }
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| CheckpointError::Corrupt(format!("header decode: {e}")))?;

    let mut model = MixtureModel::new(header.encoder, header.mixture, 0);
    r.read_exact(&mut b8)?;
    let n_tensors = u64::from_le_bytes(b8) as usize;
    if n_tensors != model.store.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} tensors, found {n_tensors}",
            model.store.len()
        )));
    }
    for _ in 0..n_tensors {
        let (name, t) = read_tensor(&mut r)?;
        let idx = model
            .store
            .index_of(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor '{name}'")))?;
        if model.store.get(idx).shape() != t.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "shape mismatch for tensor '{name}'"
            )));
        }
        *model.store.get_mut(idx) = t;
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let state = if flag[0] == 1 {
        let mut adam = Adam::new(&model.store);
        adam.t = header
            .adam_t
            .ok_or_else(|| CheckpointError::Corrupt("missing optimizer step count".into()))?;
        for m in adam.m.iter_mut() {
            let (_, t) = read_tensor(&mut r)?;
            if t.shape() != m.shape() {
                return Err(CheckpointError::Corrupt("optimizer shape mismatch".into()));
            }
            *m = t;
        }
        for v in adam.v.iter_mut() {
            let (_, t) = read_tensor(&mut r)?;
            if t.shape() != v.shape() {
                return Err(CheckpointError::Corrupt("optimizer shape mismatch".into()));
            }
            *v = t;
        }
        let epoch = header
            .epoch
            .ok_or_else(|| CheckpointError::Corrupt("missing epoch".into()))?;
        Some((epoch, adam))
    } else {
        None
    };
    Ok((model, state))
}

/// Value-level per-scene loss used by the deterministic evaluation paths.
pub fn scene_loss_value(
    model: &MixtureModel,
    prep: &PreparedScene,
    eps_sets: &[Vec<DVector<f64>>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainingError> {
    let terms = scene_terms_value(model, prep, eps_sets)?;
    let target = target_from_scores(&terms.iw_scores);
    let x = model.encoder.encode_scene_value(&model.store, &prep.scene)?;
    let (_, pi_hat) = model.assignment_forward(&x);
    let (focal, _) = focal_loss(&pi_hat, &target, cfg.gamma_focal)?;
    let elbo = terms.term1 - terms.term2 - terms.term3;
    Ok(LossBreakdown {
        total: -elbo + cfg.alpha * focal,
        elbo,
        term1: terms.term1,
        term2: terms.term2,
        term3: terms.term3,
        focal,
    })
}

/// Latent paths and helpers re-exported for the evaluation module.
pub fn sample_posterior_path<R: Rng>(
    model: &MixtureModel,
    x: &DVector<f64>,
    s_f: &[[f64; 2]],
    rng: &mut R,
) -> Result<LatentPath, TrainingError> {
    let eps = draw_eps(rng, model.mixture_cfg.t, model.mixture_cfg.d_v);
    let (_, v) = model.posterior_rollout(x, s_f, &eps)?;
    Ok(v)
}
