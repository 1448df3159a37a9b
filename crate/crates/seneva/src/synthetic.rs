//! Deterministic generator of multimodal toy scenes.
//!
//! Three road geometries are supported: a lane fork, an arc-following choice
//! (stay on the arc or exit straight), and a ramp merge. Every geometry
//! shares the first `H` steps across modes, so the history alone never
//! reveals the future mode. The out-of-distribution split regenerates scenes
//! with overridden geometry parameters that never occur in the base split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AgentTrack, MapPolyline, MotionState, Scene, SceneMeta, wrap_angle};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Fork,
    ArcChoice,
    Merge,
}

impl Geometry {
    pub fn name(&self) -> &'static str {
        match self {
            Geometry::Fork => "fork",
            Geometry::ArcChoice => "arc_choice",
            Geometry::Merge => "merge",
        }
    }
}

impl std::str::FromStr for Geometry {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fork" => Ok(Geometry::Fork),
            "arc_choice" => Ok(Geometry::ArcChoice),
            "merge" => Ok(Geometry::Merge),
            other => Err(format!("unknown geometry '{other}'")),
        }
    }
}

/// Geometry parameter overrides used only for the OOD split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OodParams {
    pub radius: Option<f64>,
    pub offset: Option<f64>,
    pub separation: Option<f64>,
}

impl OodParams {
    pub fn is_empty(&self) -> bool {
        self.radius.is_none() && self.offset.is_none() && self.separation.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub h: usize,
    pub t: usize,
    pub step_seconds: f64,
    pub geometry: Geometry,
    pub mode_count: usize,
    /// Endpoint distance between adjacent mode centroids, meters.
    pub mode_separation: f64,
    pub speed_range: (f64, f64),
    pub noise_std: f64,
    /// Arc radius for `arc_choice`, meters.
    pub radius: f64,
    /// Ramp lateral offset for `merge`, meters.
    pub offset: f64,
    pub ood_params: Option<OodParams>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 100,
            h: 10,
            t: 20,
            step_seconds: 0.1,
            geometry: Geometry::Fork,
            mode_count: 2,
            mode_separation: 8.0,
            speed_range: (4.0, 6.0),
            noise_std: 0.05,
            radius: 20.0,
            offset: 6.0,
            ood_params: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if !(2..=3).contains(&self.mode_count) {
            return Err(GeneratorError::InvalidConfig(format!(
                "mode_count must be 2 or 3, got {}",
                self.mode_count
            )));
        }
        if self.mode_separation <= 0.0 {
            return Err(GeneratorError::InvalidConfig(
                "mode_separation must be > 0".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(GeneratorError::InvalidConfig("noise_std must be >= 0".into()));
        }
        if !(self.speed_range.0 > 0.0 && self.speed_range.0 <= self.speed_range.1) {
            return Err(GeneratorError::InvalidConfig(
                "speed_range must satisfy 0 < min <= max".into(),
            ));
        }
        if self.h < 2 || self.t < 1 {
            return Err(GeneratorError::InvalidConfig("need h >= 2 and t >= 1".into()));
        }
        if self.step_seconds <= 0.0 {
            return Err(GeneratorError::InvalidConfig(
                "step_seconds must be > 0".into(),
            ));
        }
        if self.radius <= 0.0 {
            return Err(GeneratorError::InvalidConfig("radius must be > 0".into()));
        }
        if blend_longitudinal(self).is_none() {
            return Err(GeneratorError::InvalidConfig(
                "mode_separation is not reachable within the prediction horizon \
                 at the minimum speed; increase t or speed_range, or reduce \
                 mode_separation"
                    .into(),
            ));
        }
        Ok(())
    }

    /// The tuple of geometry parameters that defines distribution membership.
    pub fn geometry_tuple(&self) -> (f64, f64, f64) {
        (self.radius, self.offset, self.mode_separation)
    }

    fn with_ood_overrides(&self) -> Result<Self, GeneratorError> {
        let ood = self.ood_params.ok_or_else(|| {
            GeneratorError::InvalidConfig("ood_params required for the OOD split".into())
        })?;
        if ood.is_empty() {
            return Err(GeneratorError::InvalidConfig(
                "ood_params must override at least one geometry parameter".into(),
            ));
        }
        let mut cfg = self.clone();
        if let Some(r) = ood.radius {
            cfg.radius = r;
        }
        if let Some(o) = ood.offset {
            cfg.offset = o;
        }
        if let Some(s) = ood.separation {
            cfg.mode_separation = s;
        }
        if cfg.geometry_tuple() == self.geometry_tuple() {
            return Err(GeneratorError::InvalidConfig(
                "ood_params are identical to the base geometry parameters".into(),
            ));
        }
        Ok(cfg)
    }
}

/// A fine polyline parameterized by true arc length. `s = 0` is the target's
/// last observed position with tangent +x; negative `s` is history.
struct Centerline {
    points: Vec<[f64; 2]>,
    /// Cumulative arc length at each point, zero at `origin_idx`.
    arclen: Vec<f64>,
}

const FINE_STEP: f64 = 0.02;

impl Centerline {
    fn from_points(points: Vec<[f64; 2]>, origin_idx: usize) -> Self {
        let mut arclen = vec![0.0; points.len()];
        for i in 1..points.len() {
            let d = ((points[i][0] - points[i - 1][0]).powi(2)
                + (points[i][1] - points[i - 1][1]).powi(2))
            .sqrt();
            arclen[i] = arclen[i - 1] + d;
        }
        let shift = arclen[origin_idx];
        for a in &mut arclen {
            *a -= shift;
        }
        Self { points, arclen }
    }

    fn sample(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let i = match self.arclen.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let seg = self.arclen[i + 1] - self.arclen[i];
        let frac = ((s - self.arclen[i]) / seg).clamp(0.0, 1.0);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let p = [
            a[0] + (b[0] - a[0]) * frac,
            a[1] + (b[1] - a[1]) * frac,
        ];
        let tangent = [(b[0] - a[0]) / seg, (b[1] - a[1]) / seg];
        (p, tangent)
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Lateral spacing between adjacent mode centerlines; slightly wider than
/// the requested separation so endpoint centroids clear it under noise.
fn lateral_spacing(cfg: &GeneratorConfig) -> f64 {
    1.1 * cfg.mode_separation
}

/// Longitudinal distance over which the lateral split blends in, chosen so
/// the arc length of the sharpest mode path stays inside the shortest
/// possible future travel. `None` when the separation cannot be reached
/// before the prediction horizon ends.
fn blend_longitudinal(cfg: &GeneratorConfig) -> Option<f64> {
    let min_travel = cfg.speed_range.0 * cfg.t as f64 * cfg.step_seconds;
    let budget = 0.9 * min_travel;
    let l_max = lateral_spacing(cfg) * (cfg.mode_count - 1) as f64 / 2.0;
    // Inflate the lateral term to cover the smoothstep arc exceeding the
    // straight diagonal.
    let b2 = budget * budget - (1.15 * l_max).powi(2);
    if b2 <= 0.0 {
        return None;
    }
    let b = b2.sqrt();
    (b >= 0.2 * budget).then_some(b)
}

/// Builds the mode-`m` centerline for the configured geometry. The portion
/// with `s <= 0` is identical across modes.
fn mode_centerline(cfg: &GeneratorConfig, mode: usize, back: f64, forward: f64) -> Centerline {
    let lateral = (mode as f64 - (cfg.mode_count - 1) as f64 / 2.0) * lateral_spacing(cfg);
    let blend_dist = blend_longitudinal(cfg).expect("config validated");
    let n_back = (back / FINE_STEP).ceil() as usize;
    let n_fwd = (forward / FINE_STEP).ceil() as usize;

    let base = |s: f64| -> ([f64; 2], [f64; 2]) {
        match cfg.geometry {
            Geometry::Fork => ([s, 0.0], [0.0, 1.0]),
            Geometry::ArcChoice => {
                if s <= 0.0 || mode == 0 {
                    // On the arc of radius R centered at (0, R).
                    let a = s / cfg.radius;
                    let p = [cfg.radius * a.sin(), cfg.radius * (1.0 - a.cos())];
                    let normal = [-a.sin(), a.cos()];
                    (p, normal)
                } else {
                    // Exit: straight along the tangent at the origin.
                    ([s, 0.0], [0.0, 1.0])
                }
            }
            Geometry::Merge => {
                // History approaches along a ramp offset laterally; merge
                // completes at the origin.
                let ramp_len = (4.0 * cfg.offset).max(12.0);
                let y = if s >= 0.0 {
                    0.0
                } else {
                    cfg.offset * smoothstep(-s / ramp_len)
                };
                ([s, y], [0.0, 1.0])
            }
        }
    };

    let mut points = Vec::with_capacity(n_back + n_fwd + 1);
    for i in 0..=(n_back + n_fwd) {
        let s = (i as f64 - n_back as f64) * FINE_STEP;
        let (b, normal) = base(s);
        let off = if s > 0.0 {
            lateral * smoothstep(s / blend_dist)
        } else {
            0.0
        };
        points.push([b[0] + normal[0] * off, b[1] + normal[1] * off]);
    }
    Centerline::from_points(points, n_back)
}

fn scene_rng(seed: u64, index: usize, ood: bool) -> ChaCha12Rng {
    // splitmix-style derivation so scenes are independent of generation order.
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1))
        .wrapping_add(if ood { 0x517cc1b727220a95 } else { 0 });
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}

fn rigid(theta: f64, shift: [f64; 2], p: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [
        c * p[0] - s * p[1] + shift[0],
        s * p[0] + c * p[1] + shift[1],
    ]
}

fn generate_one(cfg: &GeneratorConfig, index: usize, ood: bool) -> Scene {
    let mut rng = scene_rng(cfg.seed, index, ood);
    let mode = index % cfg.mode_count;
    let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
    let ds = speed * cfg.step_seconds;
    let back = cfg.h as f64 * ds + 5.0;
    let forward = cfg.t as f64 * cfg.speed_range.1 * cfg.step_seconds + lateral_spacing(cfg) + 5.0;

    // Random world placement so normalization is exercised end to end.
    let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let shift = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
    let place = |p: [f64; 2]| rigid(theta, shift, p);

    let line = mode_centerline(cfg, mode, back, forward);
    let state_at = |s: f64| -> MotionState {
        let (p, tangent) = line.sample(s);
        let world = place(p);
        let heading = wrap_angle(tangent[1].atan2(tangent[0]) + theta);
        let v = rigid(theta, [0.0, 0.0], [tangent[0] * speed, tangent[1] * speed]);
        MotionState {
            x: world[0],
            y: world[1],
            heading,
            vx: v[0],
            vy: v[1],
        }
    };

    let target = AgentTrack {
        agent_id: format!("target-{index}"),
        states: (0..cfg.h)
            .map(|i| state_at(-((cfg.h - 1 - i) as f64) * ds))
            .collect(),
    };

    // One leading neighbor on the shared stem, a fixed headway ahead.
    let headway = 8.0;
    let neighbor = AgentTrack {
        agent_id: format!("lead-{index}"),
        states: (0..cfg.h)
            .map(|i| state_at(headway - ((cfg.h - 1 - i) as f64) * ds))
            .collect(),
    };

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let future: Vec<[f64; 2]> = (1..=cfg.t)
        .map(|j| {
            let (p, _) = line.sample(j as f64 * ds);
            let noisy = if cfg.noise_std > 0.0 {
                [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]
            } else {
                p
            };
            place(noisy)
        })
        .collect();

    // Map: one lane centerline per mode, coarsened to ~4 m vectors.
    let map = (0..cfg.mode_count)
        .map(|m| {
            let ml = mode_centerline(cfg, m, back, forward);
            let coarse = 4.0;
            let n_seg = ((back + forward) / coarse).floor() as usize;
            let vectors = (0..n_seg)
                .map(|i| {
                    let s0 = -back + i as f64 * coarse;
                    let s1 = s0 + coarse;
                    let (h, _) = ml.sample(s0);
                    let (t, _) = ml.sample(s1);
                    let hw = place(h);
                    let tw = place(t);
                    [hw[0], hw[1], tw[0], tw[1]]
                })
                .collect();
            MapPolyline { vectors }
        })
        .collect();

    Scene {
        target,
        neighbors: vec![neighbor],
        map,
        future: Some(future),
        meta: SceneMeta {
            geometry: cfg.geometry.name().to_string(),
            ood,
        },
    }
}

/// Generates the in-distribution dataset; a pure function of the config.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<Scene>, GeneratorError> {
    cfg.validate()?;
    Ok((0..cfg.n_scenes)
        .map(|i| generate_one(cfg, i, false))
        .collect())
}

/// Generates `n_scenes` OOD scenes with the overridden geometry parameters.
pub fn generate_ood_split(cfg: &GeneratorConfig) -> Result<Vec<Scene>, GeneratorError> {
    cfg.validate()?;
    let ood_cfg = cfg.with_ood_overrides()?;
    ood_cfg.validate()?;
    Ok((0..ood_cfg.n_scenes)
        .map(|i| generate_one(&ood_cfg, i, true))
        .collect())
}

/// The canonical (noise-free) mode endpoints in the target frame, useful for
/// evaluating how well a model covers the generator's modes.
pub fn canonical_mode_endpoints(cfg: &GeneratorConfig, speed: f64) -> Vec<[f64; 2]> {
    let ds = speed * cfg.step_seconds;
    let back = cfg.h as f64 * ds + 5.0;
    let forward = cfg.t as f64 * cfg.speed_range.1 * cfg.step_seconds + lateral_spacing(cfg) + 5.0;
    (0..cfg.mode_count)
        .map(|m| {
            let line = mode_centerline(cfg, m, back, forward);
            line.sample(cfg.t as f64 * ds).0
        })
        .collect()
}
