//! From distribution to trajectories: the cumulative endpoint distribution,
//! a dense candidate grid, non-maximum-suppression destination selection,
//! and backward completion of intermediate waypoints.

use nalgebra::{DVector, Matrix2, Vector2};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::mixture::{MixtureError, MixtureModel};
use crate::scene::{from_target_frame, to_target_frame, Scene, SceneError};

pub const DEFAULT_TOP_C: usize = 6;
pub const DEFAULT_NMS_RADIUS: f64 = 1.4;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.0;
pub const DEFAULT_GRID_RESOLUTION: f64 = 0.5;
pub const DEFAULT_GRID_SIGMA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("top_c {top_c} exceeds component count {k}")]
    TopCTooLarge { top_c: usize, k: usize },
    #[error("singular final covariance in completion")]
    SingularCovariance,
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// One selected component of the endpoint distribution: cumulative Gaussian
/// position laws `y_t ~ N(mean_t, cov_t)` for t = 1..T in the target frame.
#[derive(Debug, Clone)]
pub struct EndpointComponent {
    /// Renormalized assignment probability.
    pub weight: f64,
    /// Original component index in the mixture.
    pub index: usize,
    pub means: Vec<Vector2<f64>>,
    pub covs: Vec<Matrix2<f64>>,
}

#[derive(Debug, Clone)]
pub struct EndpointDistribution {
    pub components: Vec<EndpointComponent>,
}

/// A scored destination candidate in the target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub position: [f64; 2],
    pub score: f64,
}

/// M completed trajectories in the world frame.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub scores: Vec<f64>,
    pub component_of: Vec<usize>,
    /// True when fewer than the requested M candidates survived.
    pub truncated: bool,
}

fn gauss2_pdf(mean: &Vector2<f64>, cov: &Matrix2<f64>, p: [f64; 2]) -> f64 {
    let det = cov.determinant();
    let inv = cov.try_inverse().expect("positive-definite covariance");
    let d = Vector2::new(p[0], p[1]) - mean;
    let quad = (d.transpose() * inv * d)[(0, 0)];
    (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

impl EndpointDistribution {
    /// Final-step mixture density at a point.
    pub fn endpoint_density(&self, p: [f64; 2]) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * gauss2_pdf(c.means.last().unwrap(), c.covs.last().unwrap(), p))
            .sum()
    }
}

/// Builds the endpoint distribution for the `top_c` components ranked by
/// the assignment weights. Each component's latent path is its
/// maximum-likelihood (mean) rollout; the position law is the running sum
/// of decoded displacement Gaussians.
pub fn endpoint_distribution(
    model: &MixtureModel,
    x: &DVector<f64>,
    top_c: usize,
) -> Result<EndpointDistribution, SamplingError> {
    let k = model.mixture_cfg.k;
    if top_c > k {
        return Err(SamplingError::TopCTooLarge { top_c, k });
    }
    let (_, pi) = model.assignment_forward(x);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        pi.probs()[b]
            .total_cmp(&pi.probs()[a])
            .then(a.cmp(&b))
    });
    let selected = &order[..top_c];
    let total: f64 = selected.iter().map(|&i| pi.probs()[i]).sum();

    let mut components = Vec::with_capacity(top_c);
    for &idx in selected {
        let (_, path) = model.prior_rollout_mean(x, idx)?;
        let mut means = Vec::with_capacity(path.0.len());
        let mut covs = Vec::with_capacity(path.0.len());
        let mut mean_acc = Vector2::zeros();
        let mut cov_acc = Matrix2::zeros();
        for v_t in &path.0 {
            let step = model.decode_step(v_t, x);
            mean_acc += step.mean;
            cov_acc += step.covariance();
            means.push(mean_acc);
            covs.push(cov_acc);
        }
        debug_assert!(
            covs.windows(2).all(|w| w[1].trace() >= w[0].trace()),
            "cumulative covariance trace must be non-decreasing"
        );
        components.push(EndpointComponent {
            weight: pi.probs()[idx] / total,
            index: idx,
            means,
            covs,
        });
    }
    Ok(EndpointDistribution { components })
}

/// Scores a dense axis-aligned grid over the union of per-component boxes
/// `mean ± n_sigma·std` (final step, per-axis std).
pub fn dense_grid(
    dist: &EndpointDistribution,
    resolution: f64,
    n_sigma: f64,
) -> Vec<Candidate> {
    assert!(resolution > 0.0, "resolution must be positive");
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in &dist.components {
        let mean = c.means.last().unwrap();
        let cov = c.covs.last().unwrap();
        let sx = cov[(0, 0)].sqrt();
        let sy = cov[(1, 1)].sqrt();
        x_min = x_min.min(mean[0] - n_sigma * sx);
        x_max = x_max.max(mean[0] + n_sigma * sx);
        y_min = y_min.min(mean[1] - n_sigma * sy);
        y_max = y_max.max(mean[1] + n_sigma * sy);
    }
    let nx = ((x_max - x_min) / resolution + 1e-9).floor() as usize + 1;
    let ny = ((y_max - y_min) / resolution + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let p = [x_min + i as f64 * resolution, y_min + j as f64 * resolution];
            out.push(Candidate {
                position: p,
                score: dist.endpoint_density(p),
            });
        }
    }
    out
}

/// Exact area IoU of two circles of equal radius `r` via the lens formula.
pub fn circle_iou(a: [f64; 2], b: [f64; 2], r: f64) -> f64 {
    assert!(r > 0.0, "radius must be positive");
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    if d >= 2.0 * r {
        return 0.0;
    }
    if d == 0.0 {
        return 1.0;
    }
    let lens = 2.0 * r * r * (d / (2.0 * r)).acos() - 0.5 * d * (4.0 * r * r - d * d).sqrt();
    let union = 2.0 * std::f64::consts::PI * r * r - lens;
    lens / union
}

/// Greedy non-maximum suppression over destination candidates: take the
/// best-scoring candidate, drop every remaining one whose circle IoU with it
/// strictly exceeds the threshold, repeat up to `m` selections. Ties in
/// score break toward lower x, then lower y, so the result is independent
/// of input order.
pub fn nms_select(
    candidates: &[Candidate],
    r: f64,
    iou_threshold: f64,
    m: usize,
) -> Vec<Candidate> {
    let mut pool: Vec<Candidate> = candidates.to_vec();
    pool.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.position[0].total_cmp(&b.position[0]))
            .then(a.position[1].total_cmp(&b.position[1]))
    });
    let mut out = Vec::with_capacity(m);
    while out.len() < m && !pool.is_empty() {
        let top = pool.remove(0);
        pool.retain(|c| circle_iou(top.position, c.position, r) <= iou_threshold);
        out.push(top);
    }
    out
}

/// Completes a trajectory backward from a destination: a single normalized
/// residual `u = L_T⁻¹ (y − μ_T)` is propagated through every intermediate
/// step's factor, so displacement uncertainty is spread uniformly over time
/// and the final waypoint hits the candidate exactly.
pub fn complete_trajectory(
    candidate: &Candidate,
    component: &EndpointComponent,
) -> Result<Vec<[f64; 2]>, SamplingError> {
    let t_len = component.means.len();
    let final_cov = *component.covs.last().unwrap();
    let chol = final_cov
        .cholesky()
        .ok_or(SamplingError::SingularCovariance)?;
    let l_final = chol.l();
    let y = Vector2::new(candidate.position[0], candidate.position[1]);
    let diff = y - component.means[t_len - 1];
    let u = l_final
        .solve_lower_triangular(&diff)
        .ok_or(SamplingError::SingularCovariance)?;

    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len - 1 {
        let l_t = component.covs[t]
            .cholesky()
            .ok_or(SamplingError::SingularCovariance)?
            .l();
        let p = component.means[t] + l_t * u;
        out.push([p[0], p[1]]);
    }
    out.push(candidate.position);
    Ok(out)
}

/// Full prediction pipeline for one scene: normalize, encode, build the
/// endpoint distribution over the top components, grid, NMS, complete, and
/// map back to world coordinates.
pub fn predict_top_m(
    model: &MixtureModel,
    scene: &Scene,
    m: usize,
    r: f64,
    iou_threshold: f64,
    resolution: f64,
) -> Result<PredictionSet, SamplingError> {
    let (norm, pose) = to_target_frame(scene)?;
    let x = model.encoder.encode_scene_value(&model.store, &norm)?;
    let top_c = DEFAULT_TOP_C.min(model.mixture_cfg.k);
    let dist = endpoint_distribution(model, &x, top_c)?;
    let grid = dense_grid(&dist, resolution, DEFAULT_GRID_SIGMA);
    let picked = nms_select(&grid, r, iou_threshold, m);

    let mut trajectories = Vec::with_capacity(picked.len());
    let mut scores = Vec::with_capacity(picked.len());
    let mut component_of = Vec::with_capacity(picked.len());
    for cand in &picked {
        // Argmax responsibility at the candidate endpoint.
        let (ci, _) = dist
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    i,
                    c.weight * gauss2_pdf(c.means.last().unwrap(), c.covs.last().unwrap(), cand.position),
                )
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        let local = complete_trajectory(cand, &dist.components[ci])?;
        trajectories.push(from_target_frame(&local, &pose));
        scores.push(cand.score);
        component_of.push(dist.components[ci].index);
    }
    let truncated = trajectories.len() < m;
    Ok(PredictionSet {
        trajectories,
        scores,
        component_of,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::mixture::MixtureConfig;
    use crate::synthetic::{generate_dataset, GeneratorConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn toy_model(k: usize, t: usize) -> MixtureModel {
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
            d_v: 2,
            d_x: 8,
            t,
            h: 4,
            d_hidden: 6,
            d_summary: 4,
        };
        MixtureModel::new(encoder_cfg, mixture_cfg, 77)
    }

    fn zero_mixture_params(model: &mut MixtureModel) {
        for i in 0..model.store.len() {
            if model.store.name(i).starts_with("mix.") {
                model.store.get_mut(i).fill(0.0);
            }
        }
    }

    fn test_x() -> DVector<f64> {
        DVector::from_fn(8, |i, _| 0.1 * i as f64 - 0.3)
    }

    #[test]
    fn independent_step_sums_compose() {
        // Two steps decoded as N((1,0), 0.1·I) must sum to N((2,0), 0.2·I).
        let mut model = toy_model(1, 2);
        zero_mixture_params(&mut model);
        let b = model.store.index_of("mix.decoder.1.b").unwrap();
        let bias = model.store.get_mut(b);
        bias[(0, 0)] = 1.0;
        bias[(2, 0)] = 0.5 * 0.1f64.ln();
        bias[(4, 0)] = 0.5 * 0.1f64.ln();

        let dist = endpoint_distribution(&model, &test_x(), 1).unwrap();
        let c = &dist.components[0];
        assert_relative_eq!(c.means[1], Vector2::new(2.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(c.covs[1], Matrix2::identity() * 0.2, epsilon = 1e-12);
        assert_relative_eq!(c.weight, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_step_distribution_is_the_decoded_step() {
        let model = toy_model(2, 1);
        let x = test_x();
        let dist = endpoint_distribution(&model, &x, 2).unwrap();
        for c in &dist.components {
            let (_, path) = model.prior_rollout_mean(&x, c.index).unwrap();
            let step = model.decode_step(&path.0[0], &x);
            assert_relative_eq!(c.means[0], step.mean, epsilon = 1e-12);
            assert_relative_eq!(c.covs[0], step.covariance(), epsilon = 1e-12);
        }
    }

    #[test]
    fn cumulative_covariance_differences_recover_step_covariances() {
        let model = toy_model(2, 4);
        let x = test_x();
        let dist = endpoint_distribution(&model, &x, 2).unwrap();
        for c in &dist.components {
            let (_, path) = model.prior_rollout_mean(&x, c.index).unwrap();
            let step3 = model.decode_step(&path.0[2], &x).covariance();
            let diff = c.covs[2] - c.covs[1];
            assert_relative_eq!(diff, step3, epsilon = 1e-12);
        }
    }

    #[test]
    fn endpoint_trace_is_nondecreasing() {
        let model = toy_model(3, 6);
        let dist = endpoint_distribution(&model, &test_x(), 3).unwrap();
        for c in &dist.components {
            for w in c.covs.windows(2) {
                assert!(w[1].trace() >= w[0].trace());
            }
        }
    }

    #[test]
    fn top_c_beyond_k_is_rejected() {
        let model = toy_model(2, 2);
        assert!(matches!(
            endpoint_distribution(&model, &test_x(), 3),
            Err(SamplingError::TopCTooLarge { top_c: 3, k: 2 })
        ));
    }

    fn unit_dist(mean: [f64; 2]) -> EndpointDistribution {
        EndpointDistribution {
            components: vec![EndpointComponent {
                weight: 1.0,
                index: 0,
                means: vec![Vector2::new(mean[0], mean[1])],
                covs: vec![Matrix2::identity()],
            }],
        }
    }

    #[test]
    fn unit_grid_has_81_points() {
        let grid = dense_grid(&unit_dist([0.0, 0.0]), 0.5, 2.0);
        assert_eq!(grid.len(), 81);
        for c in &grid {
            assert!(c.position[0] >= -2.0 - 1e-12 && c.position[0] <= 2.0 + 1e-12);
            assert!(c.position[1] >= -2.0 - 1e-12 && c.position[1] <= 2.0 + 1e-12);
            assert!(c.score >= 0.0 && c.score.is_finite());
        }
    }

    #[test]
    fn grid_scores_are_symmetric_and_peak_at_the_mean() {
        let grid = dense_grid(&unit_dist([1.0, -1.0]), 0.5, 2.0);
        let best = grid
            .iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .unwrap();
        assert_relative_eq!(best.position[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(best.position[1], -1.0, epsilon = 1e-12);
        // Mirror symmetry about the mean for the isotropic component.
        for c in &grid {
            let mirrored = [2.0 - c.position[0], -2.0 - c.position[1]];
            let twin = grid
                .iter()
                .find(|d| {
                    (d.position[0] - mirrored[0]).abs() < 1e-9
                        && (d.position[1] - mirrored[1]).abs() < 1e-9
                })
                .unwrap();
            assert_relative_eq!(c.score, twin.score, epsilon = 1e-12);
        }
    }

    #[test]
    fn circle_iou_hand_values() {
        assert_eq!(circle_iou([3.0, 4.0], [3.0, 4.0], 1.4), 1.0);
        assert_eq!(circle_iou([0.0, 0.0], [2.8, 0.0], 1.4), 0.0);
        assert_eq!(circle_iou([0.0, 0.0], [5.0, 0.0], 1.4), 0.0);

        // Distance r with r=1: lens = 2·acos(1/2) − (1/2)·√3.
        let lens = 2.0 * 0.5f64.acos() - 0.5 * 3.0f64.sqrt();
        let expected = lens / (2.0 * std::f64::consts::PI - lens);
        assert_relative_eq!(circle_iou([0.0, 0.0], [1.0, 0.0], 1.0), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.2430, epsilon = 1e-4);
    }

    #[test]
    fn nms_takes_the_top_candidate_for_m_one() {
        let cands = vec![
            Candidate { position: [0.0, 0.0], score: 0.2 },
            Candidate { position: [5.0, 0.0], score: 0.9 },
            Candidate { position: [9.0, 0.0], score: 0.5 },
        ];
        let out = nms_select(&cands, 1.4, 0.0, 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].position, [5.0, 0.0]);
    }

    #[test]
    fn nms_suppresses_overlapping_candidates() {
        let cands = vec![
            Candidate { position: [0.0, 0.0], score: 0.9 },
            Candidate { position: [0.5, 0.0], score: 0.8 },
            Candidate { position: [10.0, 0.0], score: 0.7 },
        ];
        let out = nms_select(&cands, 1.4, 0.0, 2);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].position, [0.0, 0.0]);
        assert_eq!(out[1].position, [10.0, 0.0]);
    }

    #[test]
    fn nms_far_apart_candidates_reduce_to_top_m() {
        let cands: Vec<Candidate> = (0..6)
            .map(|i| Candidate {
                position: [10.0 * i as f64, 0.0],
                score: 0.1 * i as f64,
            })
            .collect();
        let out = nms_select(&cands, 1.4, 0.0, 3);
        let scores: Vec<f64> = out.iter().map(|c| c.score).collect();
        let expected: Vec<f64> = [5, 4, 3].iter().map(|&i| 0.1 * i as f64).collect();
        assert_eq!(scores, expected);
    }

    #[test]
    fn nms_is_input_order_invariant_and_respects_the_threshold() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        for _ in 0..50 {
            let cands: Vec<Candidate> = (0..40)
                .map(|_| Candidate {
                    position: [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)],
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            let out = nms_select(&cands, 1.4, 0.1, 6);
            let mut shuffled = cands.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let out2 = nms_select(&shuffled, 1.4, 0.1, 6);
            assert_eq!(out, out2);
            assert!(out.len() <= 6);
            for w in out.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            for i in 0..out.len() {
                for j in (i + 1)..out.len() {
                    assert!(circle_iou(out[i].position, out[j].position, 1.4) <= 0.1);
                }
            }
        }
    }

    #[test]
    fn tangent_circles_are_not_suppressed_at_threshold_zero() {
        // Exactly 2r apart: IoU is 0, which does not exceed 0.
        let cands = vec![
            Candidate { position: [0.0, 0.0], score: 0.9 },
            Candidate { position: [2.8, 0.0], score: 0.8 },
        ];
        let out = nms_select(&cands, 1.4, 0.0, 2);
        assert_eq!(out.len(), 2);
    }

    fn growth_component(t_len: usize, sigma2: f64) -> EndpointComponent {
        let means = (1..=t_len)
            .map(|t| Vector2::new(t as f64, 0.5 * t as f64))
            .collect();
        let covs = (1..=t_len)
            .map(|t| Matrix2::identity() * (t as f64 * sigma2))
            .collect();
        EndpointComponent {
            weight: 1.0,
            index: 0,
            means,
            covs,
        }
    }

    #[test]
    fn completion_at_the_mean_returns_the_mean_path() {
        let comp = growth_component(5, 0.3);
        let cand = Candidate {
            position: [comp.means[4][0], comp.means[4][1]],
            score: 1.0,
        };
        let path = complete_trajectory(&cand, &comp).unwrap();
        for (p, m) in path.iter().zip(&comp.means) {
            assert_relative_eq!(p[0], m[0], epsilon = 1e-12);
            assert_relative_eq!(p[1], m[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn completion_hits_the_candidate_exactly_and_follows_the_closed_form() {
        let t_len = 6;
        let comp = growth_component(t_len, 0.4);
        let cand = Candidate {
            position: [8.0, -1.0],
            score: 1.0,
        };
        let path = complete_trajectory(&cand, &comp).unwrap();
        assert_eq!(*path.last().unwrap(), cand.position);

        // Isotropic growth cov_t = t·σ²·I ⇒ waypoint t = μ_t + √(t/T)(y−μ_T).
        let y = Vector2::new(cand.position[0], cand.position[1]);
        let resid = y - comp.means[t_len - 1];
        for (i, p) in path.iter().enumerate() {
            let t = (i + 1) as f64;
            let expected = comp.means[i] + (t / t_len as f64).sqrt() * resid;
            assert_relative_eq!(p[0], expected[0], epsilon = 1e-10);
            assert_relative_eq!(p[1], expected[1], epsilon = 1e-10);
        }
    }

    #[test]
    fn predict_pipeline_is_deterministic_and_spreads_endpoints() {
        let cfg = GeneratorConfig {
            seed: 9,
            n_scenes: 3,
            h: 4,
            t: 6,
            step_seconds: 0.2,
            mode_separation: 3.0,
            ..GeneratorConfig::default()
        };
        let scenes = generate_dataset(&cfg).unwrap();
        let model = toy_model(2, 6);
        for scene in &scenes {
            let a = predict_top_m(&model, scene, 6, 1.4, 0.0, 0.5).unwrap();
            let b = predict_top_m(&model, scene, 6, 1.4, 0.0, 0.5).unwrap();
            assert_eq!(a.trajectories, b.trajectories);
            assert_eq!(a.scores, b.scores);
            for traj in &a.trajectories {
                assert_eq!(traj.len(), 6);
            }
            // Threshold-zero NMS forces endpoint spacing of at least 2r.
            for i in 0..a.trajectories.len() {
                for j in (i + 1)..a.trajectories.len() {
                    let p = a.trajectories[i].last().unwrap();
                    let q = a.trajectories[j].last().unwrap();
                    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    assert!(d >= 2.8 - 1e-9, "endpoint spacing {d}");
                }
            }
            assert_eq!(a.trajectories.len() < 6, a.truncated);
        }
    }
}
