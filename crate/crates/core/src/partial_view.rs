//! Partial-view sequence generation: camera trajectories on a sphere around
//! the scene, z-buffer occlusion culling, and the random-sampling baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    self, add, centroid, look_at, norm, project, scale, sub, unproject, CameraIntrinsics,
    CameraPose, DepthImage, FrameCamera, PointCloudFrame, Sequence, Vec3, EMPTY_INDEX,
};
use crate::rng::{self, Pcg32};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepDirection {
    /// Azimuth offsets increase along the trajectory.
    LeftToRight,
    RightToLeft,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub sweep_degrees: f64,
    pub vertical_jitter_degrees: f64,
    /// Bound on each step of the elevation random walk.
    pub elevation_step_degrees: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    /// Bound on each step of the zoom random walk.
    pub zoom_step: f64,
    pub direction: SweepDirection,
    /// Base camera position relative to the centroid of the first frame.
    pub camera_offset: Vec3,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            sweep_degrees: 150.0,
            vertical_jitter_degrees: 5.0,
            elevation_step_degrees: 1.0,
            zoom_min: 0.8,
            zoom_max: 1.2,
            zoom_step: 0.05,
            direction: SweepDirection::Random,
            camera_offset: [0.0, -5.0, 1.5],
            width: 64,
            height: 64,
            fx: 64.0,
            fy: 64.0,
            cx: 32.0,
            cy: 32.0,
        }
    }
}

impl TrajectoryConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sweep_degrees > 0.0 && self.sweep_degrees <= 360.0) {
            return Err(Error::config("sweep_degrees must be in (0, 360]"));
        }
        if !(self.vertical_jitter_degrees >= 0.0) || !(self.elevation_step_degrees >= 0.0) {
            return Err(Error::config("elevation jitter and step must be >= 0"));
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max) || !(self.zoom_step >= 0.0) {
            return Err(Error::config("zoom range must satisfy 0 < min <= max"));
        }
        if !self.zoom_max.is_finite() || !self.camera_offset.iter().all(|c| c.is_finite()) {
            return Err(Error::config("trajectory values must be finite"));
        }
        self.intrinsics().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    /// Azimuth offset from the base camera, radians.
    pub theta: f64,
    /// Elevation offset from the base camera, radians.
    pub phi: f64,
    pub radius: f64,
    pub pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    pub entries: Vec<TrajectoryEntry>,
    pub center: Vec3,
    pub base_radius: f64,
}

/// Samples one camera per frame on the sphere through `base_camera_pos`
/// centred on the first frame's centroid.
pub fn sample_trajectory(
    seq: &Sequence,
    base_camera_pos: Vec3,
    cfg: &TrajectoryConfig,
    seed: u64,
) -> Result<CameraTrajectory> {
    cfg.validate()?;
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::EmptyInput("sequence has no frames".into()))?;
    let center = centroid(first)?;
    let rel = sub(base_camera_pos, center);
    let base_radius = norm(rel);
    if !(base_radius > 0.0) || !base_radius.is_finite() {
        return Err(Error::Degenerate(
            "base camera coincides with the scene center".into(),
        ));
    }
    let base_azimuth = rel[1].atan2(rel[0]);
    let base_elevation = (rel[2] / base_radius).clamp(-1.0, 1.0).asin();

    let mut rng = Pcg32::from_seed(seed);
    let increasing = match cfg.direction {
        SweepDirection::LeftToRight => true,
        SweepDirection::RightToLeft => false,
        SweepDirection::Random => rng.coin(),
    };

    let n = seq.len();
    let sweep = cfg.sweep_degrees.to_radians();
    let jitter = cfg.vertical_jitter_degrees.to_radians();
    let phi_step = cfg.elevation_step_degrees.to_radians();
    let step = if n > 1 { sweep / (n - 1) as f64 } else { 0.0 };

    let mut entries = Vec::with_capacity(n);
    let mut phi: f64 = 0.0;
    let mut zoom: f64 = 1.0f64.clamp(cfg.zoom_min, cfg.zoom_max);
    for i in 0..n {
        let theta = if n > 1 {
            let t = -0.5 * sweep + step * i as f64;
            if increasing {
                t
            } else {
                -t
            }
        } else {
            0.0
        };
        if i > 0 {
            phi = (phi + rng.uniform(-phi_step, phi_step)).clamp(-jitter, jitter);
            zoom = (zoom + rng.uniform(-cfg.zoom_step, cfg.zoom_step))
                .clamp(cfg.zoom_min, cfg.zoom_max);
        }
        let radius = base_radius * zoom;
        let az = base_azimuth + theta;
        let el = base_elevation + phi;
        let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
        let position = add(center, scale(dir, radius));
        let pose = look_at(position, center, [0.0, 0.0, 1.0])?;
        entries.push(TrajectoryEntry {
            theta,
            phi,
            radius,
            pose,
        });
    }
    Ok(CameraTrajectory {
        entries,
        center,
        base_radius,
    })
}

/// Nearest-depth z-buffer. Ties at equal depth keep the lowest point index.
pub fn render_depth(
    frame: &PointCloudFrame,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> DepthImage {
    let mut img = DepthImage::empty(intr.width, intr.height);
    for (i, &p) in frame.points.iter().enumerate() {
        let Some(hit) = project(pose.apply(p), intr) else {
            continue;
        };
        let o = img.offset(hit.u, hit.v);
        // Points are visited in index order, so strict `<` keeps the lowest index on ties.
        if hit.depth < img.depth[o] {
            img.depth[o] = hit.depth;
            img.index[o] = i as u32;
        }
    }
    img
}

/// Keeps exactly the points that win a pixel in the z-buffer, in ascending
/// index order, with their original coordinates.
pub fn occlusion_sample(
    frame: &PointCloudFrame,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> (PointCloudFrame, Vec<usize>) {
    let img = render_depth(frame, pose, intr);
    let mut kept: Vec<usize> = img
        .index
        .iter()
        .filter(|&&i| i != EMPTY_INDEX)
        .map(|&i| i as usize)
        .collect();
    kept.sort_unstable();
    let points = kept.iter().map(|&i| frame.points[i]).collect();
    (PointCloudFrame::new(points), kept)
}

/// Reconstructs world points from pixel centres of a depth image.
pub fn back_project(
    depth: &DepthImage,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> PointCloudFrame {
    let inv = pose.inverse();
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            if let Some((z, _)) = depth.get(u, v) {
                points.push(inv.apply(unproject(u, v, z, intr)));
            }
        }
    }
    PointCloudFrame::new(points)
}

/// Occlusion-culls each frame with its own camera along a sampled trajectory.
/// The output carries the cameras and the input labels.
pub fn generate_partial_sequence(
    seq: &Sequence,
    cfg: &TrajectoryConfig,
    seed: u64,
) -> Result<(Sequence, CameraTrajectory)> {
    seq.validate()?;
    let traj = if seq.frames[0].is_empty() {
        // No centroid for an empty first frame: orbit the first non-empty one
        // (or the origin) instead.
        let center = match seq.frames.iter().find(|f| !f.is_empty()) {
            Some(f) => centroid(f)?,
            None => [0.0; 3],
        };
        let mut anchored = seq.clone();
        anchored.frames[0] = PointCloudFrame::new(vec![center]);
        sample_trajectory(&anchored, add(center, cfg.camera_offset), cfg, seed)?
    } else {
        let center = centroid(&seq.frames[0])?;
        sample_trajectory(seq, add(center, cfg.camera_offset), cfg, seed)?
    };
    let intr = cfg.intrinsics();
    let frames = seq
        .frames
        .iter()
        .zip(&traj.entries)
        .map(|(f, e)| occlusion_sample(f, &e.pose, &intr).0)
        .collect();
    let cameras = traj
        .entries
        .iter()
        .map(|e| FrameCamera {
            intrinsics: intr,
            pose: e.pose,
        })
        .collect();
    Ok((
        Sequence {
            frames,
            labels: seq.labels.clone(),
            cameras: Some(cameras),
        },
        traj,
    ))
}

/// Uniform subset without replacement of `round(keep_ratio * N)` points,
/// returned in ascending index order.
pub fn random_sample(frame: &PointCloudFrame, keep_ratio: f64, seed: u64) -> Result<PointCloudFrame> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::config(format!(
            "keep ratio {keep_ratio} outside (0, 1]"
        )));
    }
    let n = frame.len();
    let keep = ((keep_ratio * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Pcg32::from_seed(seed);
    // Partial Fisher-Yates: the first `keep` slots become the sample.
    for i in 0..keep {
        let j = i + rng.below((n - i) as u32) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    Ok(PointCloudFrame::new(
        chosen.into_iter().map(|i| frame.points[i]).collect(),
    ))
}

/// Random-sampling baseline applied per frame with per-frame streams.
pub fn random_sample_sequence(seq: &Sequence, keep_ratio: f64, seed: u64) -> Result<Sequence> {
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| random_sample(f, keep_ratio, rng::derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        frames,
        labels: seq.labels.clone(),
        cameras: None,
    })
}

/// Fraction of points that survived, per frame; empty complete frames count as 0.
pub fn survival_ratios(complete: &Sequence, partial: &Sequence) -> Vec<f64> {
    complete
        .frames
        .iter()
        .zip(&partial.frames)
        .map(|(c, p)| {
            if c.is_empty() {
                0.0
            } else {
                p.len() as f64 / c.len() as f64
            }
        })
        .collect()
}

#[doc(hidden)]
pub fn pixel_footprint(depth: f64, intr: &CameraIntrinsics) -> f64 {
    // Half-diagonal of the pixel's back-projected square at `depth`.
    0.5 * geometry::norm([depth / intr.fx, depth / intr.fy, 0.0])
}
