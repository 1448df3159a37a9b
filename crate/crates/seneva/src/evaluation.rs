//! Uncertainty quantification and accuracy metrics: entropy decomposition
//! of the generative model, ID/OOD entropy reporting, displacement metrics
//! (minADE/minFDE, miss rates), and occupancy log-density heatmaps.

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::mixture::{draw_eps, MixtureError, MixtureModel};
use crate::sampling::{predict_top_m, EndpointDistribution, SamplingError};
use crate::scene::{to_target_frame, Scene, SceneError};

const LN_2PI_E: f64 = 2.8378770664093453; // ln(2*pi*e)

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("length mismatch: prediction has {got} steps, ground truth {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no predictions supplied")]
    NoPredictions,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("scene {index} has no future")]
    MissingFuture { index: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// Entropy decomposition of the generative model at one scene, in nats.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EntropyReport {
    /// Expected entropy of the decoded displacement laws.
    pub term_s: f64,
    /// Expected entropy of the latent prior along sampled paths.
    pub term_v: f64,
    /// Entropy of the uniform component prior, log K.
    pub term_z: f64,
    pub total: f64,
}

/// Gaussian differential entropy ½·log((2πe)^d·|Σ|), computed from the log
/// diagonal of a triangular factor of Σ (so no determinant expansion).
pub fn gaussian_entropy(factor_log_diag: &[f64]) -> f64 {
    let d = factor_log_diag.len() as f64;
    0.5 * d * LN_2PI_E + factor_log_diag.iter().sum::<f64>()
}

/// Monte-Carlo total entropy under the generative model: sample the
/// component uniformly and the latents from its prior rollout.
pub fn total_entropy<R: Rng>(
    model: &MixtureModel,
    x: &DVector<f64>,
    n_mc: usize,
    rng: &mut R,
) -> Result<EntropyReport, MixtureError> {
    assert!(n_mc >= 1);
    let k = model.mixture_cfg.k;
    let (t, d_v) = (model.mixture_cfg.t, model.mixture_cfg.d_v);
    let mut term_s = 0.0;
    let mut term_v = 0.0;
    for _ in 0..n_mc {
        let z = rng.gen_range(0..k);
        let eps = draw_eps(rng, t, d_v);
        let (dists, path) = model.prior_rollout_sample(x, z, &eps)?;
        for (dist, v_t) in dists.iter().zip(&path.0) {
            term_v += gaussian_entropy(dist.log_std.as_slice());
            let step = model.decode_step(v_t, x);
            term_s += gaussian_entropy(&[step.log_l11, step.log_l22]);
        }
    }
    let term_s = term_s / n_mc as f64;
    let term_v = term_v / n_mc as f64;
    let term_z = (k as f64).ln();
    Ok(EntropyReport {
        term_s,
        term_v,
        term_z,
        total: term_s + term_v + term_z,
    })
}

/// One ID-or-OOD group in the entropy report.
#[derive(Debug, Clone, Serialize)]
pub struct EntropyGroup {
    pub geometry: String,
    pub ood: bool,
    pub n_scenes: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeometryChange {
    pub geometry: String,
    pub id_mean: f64,
    pub ood_mean: f64,
    pub percent_change: f64,
}

/// Per-geometry ID vs OOD entropy table.
#[derive(Debug, Clone, Serialize)]
pub struct OodReport {
    pub groups: Vec<EntropyGroup>,
    pub changes: Vec<GeometryChange>,
    /// Geometries for which one side (ID or OOD) had no scenes.
    pub omitted: Vec<String>,
}

/// Groups scenes by geometry and the OOD flag and reports mean (std) total
/// entropy plus the relative ID→OOD change per geometry.
pub fn ood_report<R: Rng>(
    model: &MixtureModel,
    scenes: &[Scene],
    n_mc: usize,
    rng: &mut R,
) -> Result<OodReport, EvaluationError> {
    if scenes.is_empty() {
        return Err(EvaluationError::EmptyDataset);
    }
    // Keyed by (geometry, ood) in first-seen order for determinism.
    let mut keys: Vec<(String, bool)> = Vec::new();
    let mut buckets: Vec<Vec<f64>> = Vec::new();
    for scene in scenes {
        let (norm, _) = to_target_frame(scene)?;
        let x = model.encoder.encode_scene_value(&model.store, &norm)?;
        let report = total_entropy(model, &x, n_mc, rng)?;
        let key = (scene.meta.geometry.clone(), scene.meta.ood);
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                buckets.push(Vec::new());
                keys.len() - 1
            }
        };
        buckets[idx].push(report.total);
    }

    let stats = |vals: &[f64]| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };

    let groups: Vec<EntropyGroup> = keys
        .iter()
        .zip(&buckets)
        .map(|((geometry, ood), vals)| {
            let (mean, std) = stats(vals);
            EntropyGroup {
                geometry: geometry.clone(),
                ood: *ood,
                n_scenes: vals.len(),
                mean,
                std,
            }
        })
        .collect();

    let mut geometries: Vec<String> = Vec::new();
    for (g, _) in &keys {
        if !geometries.contains(g) {
            geometries.push(g.clone());
        }
    }
    let mut changes = Vec::new();
    let mut omitted = Vec::new();
    for g in &geometries {
        let id = groups.iter().find(|e| &e.geometry == g && !e.ood);
        let ood = groups.iter().find(|e| &e.geometry == g && e.ood);
        match (id, ood) {
            (Some(id), Some(ood)) => changes.push(GeometryChange {
                geometry: g.clone(),
                id_mean: id.mean,
                ood_mean: ood.mean,
                percent_change: 100.0 * (ood.mean - id.mean) / id.mean,
            }),
            _ => omitted.push(g.clone()),
        }
    }
    Ok(OodReport {
        groups,
        changes,
        omitted,
    })
}

fn check_lengths(
    predictions: &[Vec<[f64; 2]>],
    gt: &[[f64; 2]],
) -> Result<(), EvaluationError> {
    if predictions.is_empty() {
        return Err(EvaluationError::NoPredictions);
    }
    for p in predictions {
        if p.len() != gt.len() {
            return Err(EvaluationError::LengthMismatch {
                expected: gt.len(),
                got: p.len(),
            });
        }
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Minimum over predictions of the average per-step displacement error.
pub fn min_ade(predictions: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<f64, EvaluationError> {
    check_lengths(predictions, gt)?;
    Ok(predictions
        .iter()
        .map(|p| {
            p.iter()
                .zip(gt)
                .map(|(a, b)| dist(*a, *b))
                .sum::<f64>()
                / gt.len() as f64
        })
        .fold(f64::INFINITY, f64::min))
}

/// Minimum over predictions of the final-step displacement error.
pub fn min_fde(predictions: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> Result<f64, EvaluationError> {
    check_lengths(predictions, gt)?;
    let last = *gt.last().unwrap();
    Ok(predictions
        .iter()
        .map(|p| dist(*p.last().unwrap(), last))
        .fold(f64::INFINITY, f64::min))
}

/// Speed-dependent longitudinal miss threshold in meters.
pub fn threshold_lon(v: f64) -> f64 {
    if v < 1.4 {
        1.0
    } else if v <= 11.0 {
        1.0 + (v - 1.4) / (11.0 - 1.4)
    } else {
        2.0
    }
}

/// Endpoint miss test with the speed-dependent longitudinal box: endpoints
/// are rotated by the ground-truth final yaw so x is longitudinal; a scene
/// is a miss when every prediction exceeds the lateral (1 m) or
/// longitudinal threshold.
pub fn is_miss_interaction(
    predictions: &[Vec<[f64; 2]>],
    gt: &[[f64; 2]],
    final_yaw: f64,
    speed: f64,
) -> Result<bool, EvaluationError> {
    check_lengths(predictions, gt)?;
    let thr_lon = threshold_lon(speed);
    let g = *gt.last().unwrap();
    let (sin, cos) = (-final_yaw).sin_cos();
    let hit = predictions.iter().any(|p| {
        let e = *p.last().unwrap();
        let dx = e[0] - g[0];
        let dy = e[1] - g[1];
        let lon = cos * dx - sin * dy;
        let lat = sin * dx + cos * dy;
        lon.abs() <= thr_lon && lat.abs() <= 1.0
    });
    Ok(!hit)
}

/// Endpoint miss test with a fixed 2 m radius.
pub fn is_miss_argoverse(
    predictions: &[Vec<[f64; 2]>],
    gt: &[[f64; 2]],
) -> Result<bool, EvaluationError> {
    check_lengths(predictions, gt)?;
    let g = *gt.last().unwrap();
    Ok(!predictions.iter().any(|p| dist(*p.last().unwrap(), g) <= 2.0))
}

/// Which miss-rate definition an evaluation run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissRateKind {
    /// Speed-dependent longitudinal/lateral box around the endpoint.
    Interaction,
    /// Fixed 2 m endpoint radius.
    Argoverse,
}

impl std::str::FromStr for MissRateKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interaction" => Ok(MissRateKind::Interaction),
            "argoverse" => Ok(MissRateKind::Argoverse),
            other => Err(format!("unknown miss-rate kind '{other}'")),
        }
    }
}

/// Aggregate accuracy metrics over a dataset.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub n_scenes: usize,
    pub k_used: usize,
}

/// Runs the full prediction pipeline on every scene and averages the
/// displacement metrics. `step_seconds` is needed to derive the
/// ground-truth final speed for the interaction miss threshold.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &MixtureModel,
    scenes: &[Scene],
    m: usize,
    r: f64,
    iou_threshold: f64,
    resolution: f64,
    mr_kind: MissRateKind,
    step_seconds: f64,
) -> Result<MetricsReport, EvaluationError> {
    if scenes.is_empty() {
        return Err(EvaluationError::EmptyDataset);
    }
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    let mut misses = 0usize;
    for (index, scene) in scenes.iter().enumerate() {
        let gt = scene
            .future
            .as_ref()
            .ok_or(EvaluationError::MissingFuture { index })?;
        let preds = predict_top_m(model, scene, m, r, iou_threshold, resolution)?;
        sum_ade += min_ade(&preds.trajectories, gt)?;
        sum_fde += min_fde(&preds.trajectories, gt)?;
        let miss = match mr_kind {
            MissRateKind::Argoverse => is_miss_argoverse(&preds.trajectories, gt)?,
            MissRateKind::Interaction => {
                let n = gt.len();
                let (yaw, speed) = if n >= 2 {
                    let a = gt[n - 2];
                    let b = gt[n - 1];
                    (
                        (b[1] - a[1]).atan2(b[0] - a[0]),
                        dist(a, b) / step_seconds,
                    )
                } else {
                    let last = scene.target.states.last().unwrap();
                    (last.heading, (last.vx.powi(2) + last.vy.powi(2)).sqrt())
                };
                is_miss_interaction(&preds.trajectories, gt, yaw, speed)?
            }
        };
        if miss {
            misses += 1;
        }
    }
    let n = scenes.len() as f64;
    Ok(MetricsReport {
        min_ade: sum_ade / n,
        min_fde: sum_fde / n,
        miss_rate: misses as f64 / n,
        n_scenes: scenes.len(),
        k_used: model.mixture_cfg.k,
    })
}

/// Rectangular heatmap region in target-frame meters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// Dense grid of log-density values, row-major with y varying fastest.
#[derive(Debug, Clone, Serialize)]
pub struct Heatmap {
    pub region: Region,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

/// Occupancy log-density: for every cell, the log of the maximum over
/// future steps of the cumulative-position mixture density.
pub fn heatmap(dist: &EndpointDistribution, region: Region, resolution: f64) -> Heatmap {
    assert!(resolution > 0.0, "resolution must be positive");
    let nx = ((region.x_max - region.x_min) / resolution + 1e-9).floor() as usize + 1;
    let ny = ((region.y_max - region.y_min) / resolution + 1e-9).floor() as usize + 1;
    let t_len = dist.components[0].means.len();
    let mut values = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let p = [
                region.x_min + i as f64 * resolution,
                region.y_min + j as f64 * resolution,
            ];
            let mut best = 0.0f64;
            for t in 0..t_len {
                let density: f64 = dist
                    .components
                    .iter()
                    .map(|c| c.weight * gauss2_density(&c.means[t], &c.covs[t], p))
                    .sum();
                best = best.max(density);
            }
            values.push(best.max(f64::MIN_POSITIVE).ln());
        }
    }
    Heatmap {
        region,
        resolution,
        nx,
        ny,
        values,
    }
}

fn gauss2_density(
    mean: &nalgebra::Vector2<f64>,
    cov: &nalgebra::Matrix2<f64>,
    p: [f64; 2],
) -> f64 {
    let det = cov.determinant();
    let inv = cov.try_inverse().expect("positive-definite covariance");
    let d = nalgebra::Vector2::new(p[0], p[1]) - mean;
    let quad = (d.transpose() * inv * d)[(0, 0)];
    (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::mixture::MixtureConfig;
    use crate::sampling::EndpointComponent;
    use crate::synthetic::{generate_dataset, GeneratorConfig};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, Vector2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn gaussian_entropy_closed_forms() {
        // 2-D identity covariance: log(2πe).
        assert_relative_eq!(gaussian_entropy(&[0.0, 0.0]), LN_2PI_E, epsilon = 1e-12);
        assert_relative_eq!(LN_2PI_E, 2.8379, epsilon = 1e-4);

        // Scaling a 2-D covariance by 4 adds log 4 (factor diag scales by 2).
        let base = gaussian_entropy(&[0.3, -0.1]);
        let scaled = gaussian_entropy(&[0.3 + 2.0f64.ln(), -0.1 + 2.0f64.ln()]);
        assert_relative_eq!(scaled - base, 4.0f64.ln(), epsilon = 1e-12);

        // 1-D unit variance: ½log(2πe).
        assert_relative_eq!(gaussian_entropy(&[0.0]), 0.5 * LN_2PI_E, epsilon = 1e-12);
        assert_relative_eq!(0.5 * LN_2PI_E, 1.4189, epsilon = 1e-4);
    }

    fn toy_model(k: usize, d_v: usize, t: usize) -> MixtureModel {
        let encoder_cfg = EncoderConfig {
            d_model: 8,
            subgraph_depth: 1,
            n_levels: 1,
            n_heads: 2,
            max_neighbors: 4,
            max_polylines: 4,
        };
        let mixture_cfg = MixtureConfig {
            k,
            d_v,
            d_x: 8,
            t,
            h: 4,
            d_hidden: 6,
            d_summary: 4,
        };
        MixtureModel::new(encoder_cfg, mixture_cfg, 55)
    }

    fn zero_mixture_params(model: &mut MixtureModel) {
        for i in 0..model.store.len() {
            if model.store.name(i).starts_with("mix.") {
                model.store.get_mut(i).fill(0.0);
            }
        }
    }

    fn test_x() -> DVector<f64> {
        DVector::from_fn(8, |i, _| 0.15 * i as f64 - 0.4)
    }

    #[test]
    fn degenerate_entropy_decomposition() {
        // K=1, unit variances everywhere, d_v=1, T=2.
        let mut model = toy_model(1, 1, 2);
        zero_mixture_params(&mut model);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let report = total_entropy(&model, &test_x(), 4, &mut rng).unwrap();
        assert_eq!(report.term_z, 0.0);
        assert_relative_eq!(report.term_s, 2.0 * LN_2PI_E, epsilon = 1e-12);
        assert_relative_eq!(report.term_v, 2.0 * 0.5 * LN_2PI_E, epsilon = 1e-12);
        assert_relative_eq!(
            report.total,
            report.term_s + report.term_v + report.term_z,
            epsilon = 1e-15
        );
    }

    #[test]
    fn doubling_decoder_variances_increases_total_entropy() {
        let mut model = toy_model(2, 2, 3);
        let mut rng_a = ChaCha12Rng::seed_from_u64(2);
        let before = total_entropy(&model, &test_x(), 8, &mut rng_a).unwrap();
        let b = model.store.index_of("mix.decoder.1.b").unwrap();
        let bias = model.store.get_mut(b);
        bias[(2, 0)] += 0.5 * 2.0f64.ln();
        bias[(4, 0)] += 0.5 * 2.0f64.ln();
        let mut rng_b = ChaCha12Rng::seed_from_u64(2);
        let after = total_entropy(&model, &test_x(), 8, &mut rng_b).unwrap();
        assert!(after.total > before.total);
    }

    #[test]
    fn total_entropy_is_bitwise_repeatable() {
        let model = toy_model(3, 2, 4);
        let mut rng_a = ChaCha12Rng::seed_from_u64(3);
        let mut rng_b = ChaCha12Rng::seed_from_u64(3);
        let a = total_entropy(&model, &test_x(), 6, &mut rng_a).unwrap();
        let b = total_entropy(&model, &test_x(), 6, &mut rng_b).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.term_z, (3.0f64).ln());
    }

    #[test]
    fn identical_groups_give_zero_percent_change() {
        let cfg = GeneratorConfig {
            seed: 5,
            n_scenes: 4,
            h: 4,
            t: 6,
            step_seconds: 0.2,
            mode_separation: 3.0,
            ..GeneratorConfig::default()
        };
        let base = generate_dataset(&cfg).unwrap();
        let mut scenes = base.clone();
        for s in &mut scenes.iter_mut() {
            s.meta.ood = false;
        }
        let mut dup = base;
        for s in &mut dup {
            s.meta.ood = true;
        }
        scenes.extend(dup);

        let model = toy_model(2, 2, 6);
        // Same rng stream position matters; use plenty of samples so the
        // two identical groups agree through their own draws.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let report = ood_report(&model, &scenes, 64, &mut rng).unwrap();
        assert_eq!(report.groups.len(), 2);
        let change = &report.changes[0];
        assert!(
            change.percent_change.abs() < 1.0,
            "expected ~0% change, got {}",
            change.percent_change
        );
        assert!(report.omitted.is_empty());
    }

    #[test]
    fn min_ade_and_fde_hand_cases() {
        let gt = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let exact = vec![gt.clone()];
        assert_eq!(min_ade(&exact, &gt).unwrap(), 0.0);
        assert_eq!(min_fde(&exact, &gt).unwrap(), 0.0);

        let offset: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        assert_relative_eq!(min_ade(&[offset].to_vec(), &gt).unwrap(), 1.0, epsilon = 1e-12);

        let far: Vec<[f64; 2]> = gt.iter().map(|p| [p[0], p[1] + 3.0]).collect();
        let near: Vec<[f64; 2]> = gt.iter().map(|p| [p[0], p[1] + 1.0]).collect();
        assert_relative_eq!(
            min_fde(&[far, near].to_vec(), &gt).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn min_metrics_match_brute_force_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let t = 5;
            let gt: Vec<[f64; 2]> = (0..t)
                .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                .collect();
            let preds: Vec<Vec<[f64; 2]>> = (0..6)
                .map(|_| {
                    (0..t)
                        .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                        .collect()
                })
                .collect();
            // Independent two-loop re-computation.
            let mut best_ade = f64::INFINITY;
            let mut best_fde = f64::INFINITY;
            for p in &preds {
                let mut acc = 0.0;
                for (a, b) in p.iter().zip(&gt) {
                    acc += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                }
                best_ade = best_ade.min(acc / t as f64);
                let (a, b) = (p[t - 1], gt[t - 1]);
                best_fde =
                    best_fde.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
            assert_relative_eq!(min_ade(&preds, &gt).unwrap(), best_ade, epsilon = 1e-12);
            assert_relative_eq!(min_fde(&preds, &gt).unwrap(), best_fde, epsilon = 1e-12);
        }
    }

    #[test]
    fn metrics_are_invariant_under_rigid_motion_of_both_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let t = 4;
        let gt: Vec<[f64; 2]> = (0..t)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let preds: Vec<Vec<[f64; 2]>> = (0..3)
            .map(|_| {
                (0..t)
                    .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
                    .collect()
            })
            .collect();
        let theta = 0.83f64;
        let (s, c) = theta.sin_cos();
        let mv = |p: [f64; 2]| [c * p[0] - s * p[1] + 7.0, s * p[0] + c * p[1] - 2.0];
        let gt2: Vec<[f64; 2]> = gt.iter().map(|p| mv(*p)).collect();
        let preds2: Vec<Vec<[f64; 2]>> = preds
            .iter()
            .map(|tr| tr.iter().map(|p| mv(*p)).collect())
            .collect();
        assert_relative_eq!(
            min_ade(&preds, &gt).unwrap(),
            min_ade(&preds2, &gt2).unwrap(),
            epsilon = 1e-10
        );
        assert_relative_eq!(
            min_fde(&preds, &gt).unwrap(),
            min_fde(&preds2, &gt2).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn longitudinal_threshold_boundaries_and_continuity() {
        assert_eq!(threshold_lon(0.5), 1.0);
        assert_eq!(threshold_lon(11.0), 2.0);
        assert_relative_eq!(threshold_lon(6.2), 1.5, epsilon = 1e-12);
        // Continuity at both joints.
        assert_relative_eq!(threshold_lon(1.4 - 1e-12), threshold_lon(1.4), epsilon = 1e-9);
        assert_relative_eq!(threshold_lon(11.0 + 1e-12), threshold_lon(11.0), epsilon = 1e-9);
    }

    #[test]
    fn exact_endpoint_is_never_a_miss() {
        let gt = vec![[0.0, 0.0], [1.0, 1.0]];
        let pred = vec![gt.clone()];
        for v in [0.0, 1.4, 6.2, 11.0, 20.0] {
            assert!(!is_miss_interaction(&pred, &gt, 0.7, v).unwrap());
        }
        assert!(!is_miss_argoverse(&pred, &gt).unwrap());
    }

    #[test]
    fn argoverse_miss_is_a_two_meter_knife_edge() {
        let gt = vec![[0.0, 0.0], [0.0, 0.0]];
        let near = vec![vec![[0.0, 0.0], [1.99, 0.0]]];
        let far = vec![vec![[0.0, 0.0], [2.01, 0.0]]];
        assert!(!is_miss_argoverse(&near, &gt).unwrap());
        assert!(is_miss_argoverse(&far, &gt).unwrap());
    }

    #[test]
    fn interaction_miss_uses_the_rotated_box() {
        // gt endpoint at origin, yaw along +y: longitudinal is +y.
        let gt = vec![[0.0, -1.0], [0.0, 0.0]];
        let yaw = std::f64::consts::FRAC_PI_2;
        // 1.8 m along the heading at v=11 (threshold 2): hit.
        let lon_ok = vec![vec![[0.0, 0.0], [0.0, 1.8]]];
        assert!(!is_miss_interaction(&lon_ok, &gt, yaw, 11.0).unwrap());
        // Same offset laterally (x): 1.8 > 1 m: miss.
        let lat_bad = vec![vec![[0.0, 0.0], [1.8, 0.0]]];
        assert!(is_miss_interaction(&lat_bad, &gt, yaw, 11.0).unwrap());
    }

    fn two_component_dist() -> EndpointDistribution {
        EndpointDistribution {
            components: vec![
                EndpointComponent {
                    weight: 0.7,
                    index: 0,
                    means: vec![Vector2::new(0.5, 0.0), Vector2::new(1.5, 0.2)],
                    covs: vec![Matrix2::identity() * 0.4, Matrix2::identity() * 0.9],
                },
                EndpointComponent {
                    weight: 0.3,
                    index: 1,
                    means: vec![Vector2::new(0.4, -0.4), Vector2::new(1.0, -1.2)],
                    covs: vec![Matrix2::identity() * 0.5, Matrix2::identity() * 1.1],
                },
            ],
        }
    }

    #[test]
    fn heatmap_matches_direct_density_evaluation() {
        let dist = two_component_dist();
        let region = Region {
            x_min: -1.0,
            x_max: 3.0,
            y_min: -2.0,
            y_max: 2.0,
        };
        let hm = heatmap(&dist, region, 0.5);
        assert_eq!(hm.nx, 9);
        assert_eq!(hm.ny, 9);
        for i in 0..hm.nx {
            for j in 0..hm.ny {
                let p = [
                    region.x_min + i as f64 * 0.5,
                    region.y_min + j as f64 * 0.5,
                ];
                let mut best = 0.0f64;
                for t in 0..2 {
                    let d: f64 = dist
                        .components
                        .iter()
                        .map(|c| c.weight * gauss2_density(&c.means[t], &c.covs[t], p))
                        .sum();
                    best = best.max(d);
                }
                assert_relative_eq!(
                    hm.values[i * hm.ny + j],
                    best.ln(),
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn halving_resolution_roughly_quadruples_cells() {
        let dist = two_component_dist();
        let region = Region {
            x_min: 0.0,
            x_max: 2.0,
            y_min: 0.0,
            y_max: 2.0,
        };
        let coarse = heatmap(&dist, region, 0.5);
        let fine = heatmap(&dist, region, 0.25);
        assert_eq!(coarse.values.len(), 25);
        assert_eq!(fine.values.len(), 81);
    }

    #[test]
    fn single_component_heatmap_peaks_on_the_mean_path() {
        let comp = EndpointComponent {
            weight: 1.0,
            index: 0,
            means: vec![Vector2::new(1.0, 1.0)],
            covs: vec![Matrix2::identity() * 0.5],
        };
        let dist = EndpointDistribution {
            components: vec![comp],
        };
        let region = Region {
            x_min: -2.0,
            x_max: 4.0,
            y_min: -2.0,
            y_max: 4.0,
        };
        let hm = heatmap(&dist, region, 0.5);
        let (best_idx, _) = hm
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let i = best_idx / hm.ny;
        let j = best_idx % hm.ny;
        let p = [
            region.x_min + i as f64 * 0.5,
            region.y_min + j as f64 * 0.5,
        ];
        assert_eq!(p, [1.0, 1.0]);
    }

    #[test]
    fn evaluate_runs_end_to_end_on_a_toy_dataset() {
        let cfg = GeneratorConfig {
            seed: 11,
            n_scenes: 4,
            h: 4,
            t: 6,
            step_seconds: 0.2,
            mode_separation: 3.0,
            ..GeneratorConfig::default()
        };
        let scenes = generate_dataset(&cfg).unwrap();
        let model = toy_model(2, 2, 6);
        for kind in [MissRateKind::Argoverse, MissRateKind::Interaction] {
            let report = evaluate(&model, &scenes, 6, 1.4, 0.0, 0.5, kind, 0.2).unwrap();
            assert!(report.min_ade >= 0.0 && report.min_ade.is_finite());
            assert!(report.min_fde >= 0.0 && report.min_fde.is_finite());
            assert!((0.0..=1.0).contains(&report.miss_rate));
            assert_eq!(report.n_scenes, 4);
            assert_eq!(report.k_used, 2);
        }
    }
}
