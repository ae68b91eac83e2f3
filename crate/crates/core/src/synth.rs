//! Procedural labeled scenes: rigid primitives following scripted motion
//! phases. A frame's label is the motion phase active on the designated
//! foreground primitive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add, mat_vec, rot_z, sub, PointCloudFrame, Sequence, Vec3};
use crate::rng::{derive_seed, stream, Pcg32};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents.
    Box { half: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    /// Translation per frame.
    pub velocity: Vec3,
    /// Rotation about the primitive's vertical axis per frame, radians.
    pub omega: f64,
    pub duration: usize,
    /// Label reported while this phase is active; the phase index if unset.
    pub label: Option<u32>,
}

impl Phase {
    pub fn new(velocity: Vec3, omega: f64, duration: usize) -> Self {
        Phase {
            velocity,
            omega,
            duration,
            label: None,
        }
    }

    pub fn still(duration: usize) -> Self {
        Phase::new([0.0; 3], 0.0, duration)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub points: usize,
    pub phases: Vec<Phase>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub frames: usize,
    /// Index of the primitive whose phases define the labels.
    pub foreground: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("scene needs at least one frame"));
        }
        if self.foreground >= self.primitives.len() {
            return Err(Error::config(format!(
                "foreground index {} with {} primitives",
                self.foreground,
                self.primitives.len()
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.points == 0 {
                return Err(Error::config(format!("primitive {i} has no points")));
            }
            let total: usize = p.phases.iter().map(|ph| ph.duration).sum();
            if total != self.frames {
                return Err(Error::config(format!(
                    "primitive {i}: phase durations sum to {total}, expected {}",
                    self.frames
                )));
            }
            let finite = p.center.iter().all(|c| c.is_finite())
                && p.phases.iter().all(|ph| {
                    ph.omega.is_finite() && ph.velocity.iter().all(|c| c.is_finite())
                });
            let size_ok = match p.shape {
                Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
                Shape::Box { half } => half.iter().all(|h| *h > 0.0 && h.is_finite()),
            };
            if !finite || !size_ok {
                return Err(Error::config(format!("primitive {i} has invalid geometry")));
            }
        }
        Ok(())
    }
}

/// Knobs for the default dataset template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sequences: usize,
    pub frames: usize,
    pub points: usize,
    /// Translation per frame of the sliding and lifting phases.
    pub speed: f64,
    /// Rotation per frame of the spinning phase, radians.
    pub spin: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sequences: 64,
            frames: 8,
            points: 256,
            speed: 0.15,
            spin: 0.35,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames == 0 {
            return Err(Error::config("data needs at least one sequence and one frame"));
        }
        if self.points < 2 {
            return Err(Error::config("data needs at least two points per frame"));
        }
        if !self.speed.is_finite() || !self.spin.is_finite() {
            return Err(Error::config("motion speeds must be finite"));
        }
        Ok(())
    }

    pub fn template(&self) -> SceneSpec {
        default_template(self.frames, self.points, self.speed, self.spin)
    }
}

/// Number of motion classes in the default template.
pub const MOTION_CLASSES: usize = 4;

/// A box next to a static background sphere. The box runs through up to
/// four labeled motions (slide x, lift z, spin, slide y), splitting the
/// frames as evenly as possible.
pub fn default_template(frames: usize, points: usize, speed: f64, spin: f64) -> SceneSpec {
    let motions: [(Vec3, f64); MOTION_CLASSES] = [
        ([speed, 0.0, 0.0], 0.0),
        ([0.0, 0.0, speed], 0.0),
        ([0.0, 0.0, 0.0], spin),
        ([0.0, speed, 0.0], 0.0),
    ];
    let count = MOTION_CLASSES.min(frames.max(1));
    let phases = (0..count)
        .map(|c| {
            let duration = frames / count + usize::from(c < frames % count);
            Phase {
                label: Some(c as u32),
                ..Phase::new(motions[c].0, motions[c].1, duration)
            }
        })
        .collect();
    let fg = points / 2;
    SceneSpec {
        primitives: vec![
            Primitive {
                shape: Shape::Box {
                    half: [0.6, 0.35, 0.3],
                },
                center: [0.0, 0.0, 0.0],
                points: fg.max(1),
                phases,
            },
            Primitive {
                shape: Shape::Sphere { radius: 0.45 },
                center: [0.95, 0.55, 0.1],
                points: (points - fg).max(1),
                phases: vec![Phase::still(frames)],
            },
        ],
        frames,
        foreground: 0,
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Fibonacci spiral over the sphere surface.
pub fn sphere_points(center: Vec3, radius: f64, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let a = i as f64 * GOLDEN_ANGLE;
            add(center, [radius * r * a.cos(), radius * r * a.sin(), radius * z])
        })
        .collect()
}

/// Uniform samples over the box surface, faces chosen by area.
pub fn box_points(center: Vec3, half: Vec3, n: usize, rng: &mut Pcg32) -> Vec<Vec3> {
    let [hx, hy, hz] = half;
    // Face pairs normal to x, y and z.
    let areas = [hy * hz, hx * hz, hx * hy];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let pick = rng.uniform(0.0, total);
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let sign = if rng.coin() { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (k, h) in half.iter().enumerate() {
                p[k] = if k == axis {
                    sign * h
                } else {
                    rng.uniform(-h, *h)
                };
            }
            add(center, p)
        })
        .collect()
}

/// Samples every primitive once, then advects it rigidly: frame 0 is the
/// rest pose and frame `t` applies the phase active at `t` to frame `t-1`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Sequence> {
    spec.validate()?;
    let mut clouds: Vec<Vec<Vec3>> = Vec::with_capacity(spec.primitives.len());
    let mut centers: Vec<Vec3> = Vec::with_capacity(spec.primitives.len());
    for (i, p) in spec.primitives.iter().enumerate() {
        let pts = match p.shape {
            Shape::Sphere { radius } => sphere_points(p.center, radius, p.points),
            Shape::Box { half } => {
                let mut rng = stream(seed, i as u64);
                box_points(p.center, half, p.points, &mut rng)
            }
        };
        clouds.push(pts);
        centers.push(p.center);
    }
    let schedules: Vec<Vec<(usize, &Phase)>> = spec
        .primitives
        .iter()
        .map(|p| {
            p.phases
                .iter()
                .enumerate()
                .flat_map(|(k, ph)| std::iter::repeat((k, ph)).take(ph.duration))
                .collect()
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            for (i, cloud) in clouds.iter_mut().enumerate() {
                let ph = schedules[i][t].1;
                if ph.omega != 0.0 {
                    let r = rot_z(ph.omega);
                    let c = centers[i];
                    for p in cloud.iter_mut() {
                        *p = add(mat_vec(&r, sub(*p, c)), c);
                    }
                }
                if ph.velocity != [0.0; 3] {
                    for p in cloud.iter_mut() {
                        *p = add(*p, ph.velocity);
                    }
                    centers[i] = add(centers[i], ph.velocity);
                }
            }
        }
        let (k, ph) = schedules[spec.foreground][t];
        labels.push(ph.label.unwrap_or(k as u32));
        frames.push(PointCloudFrame::new(clouds.concat()));
    }
    Ok(Sequence {
        frames,
        labels: Some(labels),
        cameras: None,
    })
}

fn permutation(mut index: usize, n: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    let mut fact: usize = (1..n).product::<usize>().max(1);
    for k in (1..=n).rev() {
        let pos = index / fact;
        index %= fact;
        out.push(pool.remove(pos));
        if k > 1 {
            fact /= k - 1;
        }
    }
    out
}

/// Variants of `template`: sequence `s` plays the foreground phases in the
/// `s mod P!`-th order (random order when P > 6) with per-phase speeds
/// jittered by a factor in [0.75, 1.25].
pub fn make_dataset(count: usize, template: &SceneSpec, master_seed: u64) -> Result<Vec<Sequence>> {
    if count == 0 {
        return Err(Error::config("dataset count must be at least 1"));
    }
    template.validate()?;
    (0..count)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(master_seed, s as u64);
            let mut spec = template.clone();
            let fg = &mut spec.primitives[spec.foreground];
            let n = fg.phases.len();
            let order = if n <= 6 {
                let total: usize = (1..=n).product();
                permutation(s % total, n)
            } else {
                let mut o: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut o);
                o
            };
            let base = fg.phases.clone();
            fg.phases = order
                .iter()
                .map(|&j| {
                    let f = rng.uniform(0.75, 1.25);
                    let ph = base[j];
                    Phase {
                        velocity: [ph.velocity[0] * f, ph.velocity[1] * f, ph.velocity[2] * f],
                        omega: ph.omega * f,
                        duration: ph.duration,
                        label: Some(ph.label.unwrap_or(j as u32)),
                    }
                })
                .collect();
            generate_scene(&spec, derive_seed(master_seed, s as u64))
        })
        .collect()
}
