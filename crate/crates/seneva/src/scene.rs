//! Domain types for traffic scenes, target-centric normalization,
//! displacement/position conversion, and the line-delimited scene file format.
//!
//! A scene file is JSON Lines: the first record is a [`SceneHeader`] fixing
//! the history horizon `H`, prediction horizon `T`, and the time step; every
//! following record is one [`Scene`]. Field order follows the struct
//! definitions below.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// Polylines longer than this many vectors are split at ingest.
pub const MAX_POLYLINE_VECTORS: usize = 32;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid {field}: {detail}")]
    Invariant { field: String, detail: String },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SceneError {
    fn invariant(field: &str, detail: impl Into<String>) -> Self {
        Self::Invariant {
            field: field.to_string(),
            detail: detail.into(),
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}

/// Position, heading, and velocity of an agent at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
}

impl MotionState {
    pub fn validate(&self, field: &str) -> Result<(), SceneError> {
        let vals = [self.x, self.y, self.heading, self.vx, self.vy];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::invariant(field, "non-finite motion state"));
        }
        if self.heading <= -std::f64::consts::PI || self.heading > std::f64::consts::PI {
            return Err(SceneError::invariant(
                field,
                format!("heading {} outside (-pi, pi]", self.heading),
            ));
        }
        Ok(())
    }
}

/// One agent's observed history, exactly `H` states long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: String,
    pub states: Vec<MotionState>,
}

/// A chained sequence of map vectors; each vector is `[head_x, head_y, tail_x, tail_y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub vectors: Vec<[f64; 4]>,
}

impl MapPolyline {
    pub fn validate(&self, field: &str) -> Result<(), SceneError> {
        if self.vectors.is_empty() {
            return Err(SceneError::invariant(field, "polyline has no vectors"));
        }
        for v in &self.vectors {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(SceneError::invariant(field, "non-finite polyline vector"));
            }
        }
        for (i, pair) in self.vectors.windows(2).enumerate() {
            let (tail, head) = ((pair[0][2], pair[0][3]), (pair[1][0], pair[1][1]));
            let gap = ((tail.0 - head.0).powi(2) + (tail.1 - head.1).powi(2)).sqrt();
            if gap > 1e-6 {
                return Err(SceneError::invariant(
                    field,
                    format!("vectors {i} and {} do not chain (gap {gap:.3e} m)", i + 1),
                ));
            }
        }
        Ok(())
    }
}

/// Splits any polyline with more than `max_vectors` vectors into chained pieces.
pub fn split_long_polylines(map: &[MapPolyline], max_vectors: usize) -> Vec<MapPolyline> {
    let mut out = Vec::new();
    for poly in map {
        if poly.vectors.len() <= max_vectors {
            out.push(poly.clone());
        } else {
            for chunk in poly.vectors.chunks(max_vectors) {
                out.push(MapPolyline {
                    vectors: chunk.to_vec(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub geometry: String,
    pub ood: bool,
}

/// One prediction instance: target history, neighbor histories, map, and an
/// optional ground-truth future (training only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub target: AgentTrack,
    pub neighbors: Vec<AgentTrack>,
    pub map: Vec<MapPolyline>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<[f64; 2]>>,
    pub meta: SceneMeta,
}

impl Scene {
    /// Checks all type invariants against the file horizons.
    /// Neighbor tracks shorter than `H` are rejected at ingest.
    pub fn validate(&self, h: usize, t: usize) -> Result<(), SceneError> {
        if self.target.states.is_empty() {
            return Err(SceneError::invariant("target", "empty target track"));
        }
        if self.target.states.len() != h {
            return Err(SceneError::invariant(
                "target length",
                format!("expected {h} states, got {}", self.target.states.len()),
            ));
        }
        for (i, s) in self.target.states.iter().enumerate() {
            s.validate(&format!("target state {i}"))?;
        }
        for (n, track) in self.neighbors.iter().enumerate() {
            if track.states.len() != h {
                return Err(SceneError::invariant(
                    &format!("neighbor {n} length"),
                    format!("expected {h} states, got {}", track.states.len()),
                ));
            }
            for (i, s) in track.states.iter().enumerate() {
                s.validate(&format!("neighbor {n} state {i}"))?;
            }
        }
        for (i, poly) in self.map.iter().enumerate() {
            poly.validate(&format!("polyline {i}"))?;
        }
        if let Some(future) = &self.future {
            if future.len() != t {
                return Err(SceneError::invariant(
                    "future length",
                    format!("expected {t} points, got {}", future.len()),
                ));
            }
            if future.iter().flatten().any(|v| !v.is_finite()) {
                return Err(SceneError::invariant("future", "non-finite point"));
            }
        }
        Ok(())
    }
}

/// Rigid transform recovered by [`to_target_frame`]; maps frame coordinates
/// back to the original world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl Pose2 {
    pub fn identity() -> Self {
        Self {
            origin: [0.0, 0.0],
            heading: 0.0,
        }
    }
}

fn rotate(theta: f64, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Rigidly transforms the scene so the target's last observed state sits at
/// the origin with heading zero (+x axis along the target heading).
///
/// The target heading field defines the frame, not the velocity direction, so
/// zero-speed targets normalize deterministically. Velocities rotate with the
/// frame.
pub fn to_target_frame(scene: &Scene) -> Result<(Scene, Pose2), SceneError> {
    let last = scene
        .target
        .states
        .last()
        .ok_or_else(|| SceneError::invariant("target", "empty target track"))?;
    let pose = Pose2 {
        origin: [last.x, last.y],
        heading: last.heading,
    };
    let to_frame_point = |p: [f64; 2]| rotate(-pose.heading, [p[0] - pose.origin[0], p[1] - pose.origin[1]]);
    let to_frame_state = |s: &MotionState| {
        let p = to_frame_point([s.x, s.y]);
        let v = rotate(-pose.heading, [s.vx, s.vy]);
        MotionState {
            x: p[0],
            y: p[1],
            heading: wrap_angle(s.heading - pose.heading),
            vx: v[0],
            vy: v[1],
        }
    };
    let map_track = |t: &AgentTrack| AgentTrack {
        agent_id: t.agent_id.clone(),
        states: t.states.iter().map(to_frame_state).collect(),
    };
    let normalized = Scene {
        target: map_track(&scene.target),
        neighbors: scene.neighbors.iter().map(map_track).collect(),
        map: scene
            .map
            .iter()
            .map(|poly| MapPolyline {
                vectors: poly
                    .vectors
                    .iter()
                    .map(|v| {
                        let head = to_frame_point([v[0], v[1]]);
                        let tail = to_frame_point([v[2], v[3]]);
                        [head[0], head[1], tail[0], tail[1]]
                    })
                    .collect(),
            })
            .collect(),
        future: scene
            .future
            .as_ref()
            .map(|pts| pts.iter().map(|&p| to_frame_point(p)).collect()),
        meta: scene.meta.clone(),
    };
    Ok((normalized, pose))
}

/// Maps frame points back to the world frame captured in `pose`.
pub fn from_target_frame(points: &[[f64; 2]], pose: &Pose2) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|&p| {
            let r = rotate(pose.heading, p);
            [r[0] + pose.origin[0], r[1] + pose.origin[1]]
        })
        .collect()
}

/// Converts positions to per-step displacements, with
/// `displacement[0] = position[0] - anchor`.
pub fn positions_to_displacements(positions: &[[f64; 2]], anchor: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(positions.len());
    let mut prev = anchor;
    for &p in positions {
        out.push([p[0] - prev[0], p[1] - prev[1]]);
        prev = p;
    }
    out
}

/// Inverse of [`positions_to_displacements`]: cumulative sum from the anchor.
pub fn displacements_to_positions(displacements: &[[f64; 2]], anchor: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(displacements.len());
    let mut acc = anchor;
    for &d in displacements {
        acc = [acc[0] + d[0], acc[1] + d[1]];
        out.push(acc);
    }
    out
}

/// Header record fixing the horizons of every scene in a file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub h: usize,
    pub t: usize,
    pub step_seconds: f64,
}

/// Reads a scene file, validating every record against the header horizons.
pub fn load_scene_file(path: &Path) -> Result<(SceneHeader, Vec<Scene>), SceneError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header: SceneHeader = match lines.next() {
        None => {
            return Err(SceneError::Parse {
                line: 1,
                detail: "missing header record".into(),
            })
        }
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| SceneError::Parse {
            line: 1,
            detail: format!("bad header: {e}"),
        })?,
    };
    let mut scenes = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| SceneError::Parse {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        scene.validate(header.h, header.t).map_err(|e| match e {
            SceneError::Invariant { field, detail } => SceneError::Parse {
                line: idx + 1,
                detail: format!("invalid {field}: {detail}"),
            },
            other => other,
        })?;
        scenes.push(scene);
    }
    Ok((header, scenes))
}

/// Writes a scene file in the format read by [`load_scene_file`].
pub fn save_scene_file(
    path: &Path,
    header: &SceneHeader,
    scenes: &[Scene],
) -> Result<(), SceneError> {
    let mut buf = String::new();
    writeln!(buf, "{}", serde_json::to_string(header).unwrap())
        .expect("string write cannot fail");
    for scene in scenes {
        writeln!(buf, "{}", serde_json::to_string(scene).unwrap())
            .expect("string write cannot fail");
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(buf.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn straight_scene(h: usize, t: usize) -> Scene {
        let states = (0..h)
            .map(|i| MotionState {
                x: i as f64,
                y: 0.0,
                heading: 0.0,
                vx: 1.0,
                vy: 0.0,
            })
            .collect();
        Scene {
            target: AgentTrack {
                agent_id: "target".into(),
                states,
            },
            neighbors: vec![],
            map: vec![MapPolyline {
                vectors: vec![[0.0, 1.0, 5.0, 1.0], [5.0, 1.0, 10.0, 1.0]],
            }],
            future: Some((1..=t).map(|i| [(h - 1 + i) as f64, 0.0]).collect()),
            meta: SceneMeta {
                geometry: "test".into(),
                ood: false,
            },
        }
    }

    #[test]
    fn target_frame_matches_rigid_transform_identity() {
        // Target last state at (10, 5) heading pi/2; world point (10, 7) is
        // 2 m ahead along heading, so it lands at (2, 0) in the frame.
        let mut scene = straight_scene(3, 2);
        let last = scene.target.states.last_mut().unwrap();
        last.x = 10.0;
        last.y = 5.0;
        last.heading = FRAC_PI_2;
        scene.future = Some(vec![[10.0, 7.0], [10.0, 8.0]]);

        let (normalized, pose) = to_target_frame(&scene).unwrap();
        let f = normalized.future.as_ref().unwrap();
        assert_relative_eq!(f[0][0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(f[0][1], 0.0, epsilon = 1e-12);

        let world = from_target_frame(&[[2.0, 0.0]], &pose);
        assert_relative_eq!(world[0][0], 10.0, epsilon = 1e-12);
        assert_relative_eq!(world[0][1], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn already_normalized_scene_maps_to_itself() {
        let scene = straight_scene(3, 2);
        // Shift so the last target state is exactly at the origin.
        let mut scene = scene;
        for s in &mut scene.target.states {
            s.x -= 2.0;
        }
        let (normalized, pose) = to_target_frame(&scene).unwrap();
        assert_eq!(pose, Pose2::identity());
        assert_eq!(normalized, scene);
    }

    #[test]
    fn empty_target_track_is_invalid_input() {
        let mut scene = straight_scene(3, 2);
        scene.target.states.clear();
        assert!(matches!(
            to_target_frame(&scene),
            Err(SceneError::Invariant { .. })
        ));
    }

    #[test]
    fn speeds_are_rotation_invariant_under_normalization() {
        let mut scene = straight_scene(4, 2);
        for (i, s) in scene.target.states.iter_mut().enumerate() {
            s.vx = 1.0 + i as f64;
            s.vy = -0.5 * i as f64;
            s.heading = wrap_angle(0.3 * i as f64 + 1.0);
        }
        let (normalized, _) = to_target_frame(&scene).unwrap();
        for (a, b) in scene.target.states.iter().zip(&normalized.target.states) {
            let sa = (a.vx * a.vx + a.vy * a.vy).sqrt();
            let sb = (b.vx * b.vx + b.vy * b.vy).sqrt();
            assert_relative_eq!(sa, sb, epsilon = 1e-12);
        }
    }

    #[test]
    fn displacement_conversion_examples() {
        let d = positions_to_displacements(&[[1.0, 0.0], [2.0, 0.0]], [0.0, 0.0]);
        assert_eq!(d, vec![[1.0, 0.0], [1.0, 0.0]]);

        let d = positions_to_displacements(&[[3.0, 4.0], [3.0, 4.0]], [3.0, 4.0]);
        assert_eq!(d, vec![[0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn scene_file_round_trip_and_error_loci() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        let header = SceneHeader {
            h: 3,
            t: 2,
            step_seconds: 0.1,
        };
        let scenes = vec![straight_scene(3, 2)];
        save_scene_file(&path, &header, &scenes).unwrap();
        let (h2, loaded) = load_scene_file(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(loaded, scenes);
        assert_eq!(loaded[0].neighbors.len(), 0);
        assert_eq!(loaded[0].map.len(), 1);

        // Empty scene list: header only.
        let empty = dir.path().join("empty.jsonl");
        save_scene_file(&empty, &header, &[]).unwrap();
        let (_, loaded) = load_scene_file(&empty).unwrap();
        assert!(loaded.is_empty());

        // A future with T-1 points must name the offending field.
        let mut bad = straight_scene(3, 2);
        bad.future = Some(vec![[1.0, 1.0]]);
        let bad_path = dir.path().join("bad.jsonl");
        save_scene_file(&bad_path, &header, &[bad]).unwrap();
        let err = load_scene_file(&bad_path).unwrap_err();
        assert!(err.to_string().contains("future length"), "{err}");
    }

    #[test]
    fn short_neighbor_tracks_are_rejected() {
        let mut scene = straight_scene(3, 2);
        scene.neighbors.push(AgentTrack {
            agent_id: "n0".into(),
            states: scene.target.states[..2].to_vec(),
        });
        let err = scene.validate(3, 2).unwrap_err();
        assert!(err.to_string().contains("neighbor 0 length"), "{err}");
    }

    #[test]
    fn long_polylines_split_not_truncated() {
        let vectors: Vec<[f64; 4]> = (0..80)
            .map(|i| [i as f64, 0.0, (i + 1) as f64, 0.0])
            .collect();
        let split = split_long_polylines(&[MapPolyline { vectors }], 32);
        assert_eq!(split.len(), 3);
        let total: usize = split.iter().map(|p| p.vectors.len()).sum();
        assert_eq!(total, 80);
        for p in &split {
            p.validate("split").unwrap();
        }
    }

    proptest! {
        #[test]
        fn frame_round_trip_is_identity(
            ox in -100.0..100.0f64,
            oy in -100.0..100.0f64,
            heading in -3.1f64..3.1,
            pts in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..40),
        ) {
            let mut scene = straight_scene(3, 2);
            {
                let last = scene.target.states.last_mut().unwrap();
                last.x = ox;
                last.y = oy;
                last.heading = heading;
            }
            let world: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            scene.future = None;
            let (_, pose) = to_target_frame(&scene).unwrap();
            let frame: Vec<[f64; 2]> = world
                .iter()
                .map(|&p| {
                    let r = [p[0] - pose.origin[0], p[1] - pose.origin[1]];
                    let (s, c) = (-pose.heading).sin_cos();
                    [c * r[0] - s * r[1], s * r[0] + c * r[1]]
                })
                .collect();
            let back = from_target_frame(&frame, &pose);
            for (a, b) in world.iter().zip(&back) {
                prop_assert!((a[0] - b[0]).abs() < 1e-9);
                prop_assert!((a[1] - b[1]).abs() < 1e-9);
            }
        }

        #[test]
        fn displacement_bijection(
            anchor in (-10.0..10.0f64, -10.0..10.0f64),
            pts in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 1..30),
        ) {
            let anchor = [anchor.0, anchor.1];
            let positions: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let disp = positions_to_displacements(&positions, anchor);
            let back = displacements_to_positions(&disp, anchor);
            for (a, b) in positions.iter().zip(&back) {
                prop_assert!((a[0] - b[0]).abs() < 1e-12);
                prop_assert!((a[1] - b[1]).abs() < 1e-12);
            }
        }
    }
}
