//! Pinhole camera and rigid-transform primitives.
//!
//! Convention: camera coordinates are `R * world + t` and the camera looks
//! down its +z axis. Pixel coordinates are the floor of the continuous
//! projection.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            t[j][i] = x;
        }
    }
    t
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Rotation by `angle` radians about the +z axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// One frame of a sequence: a set of world-space points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloudFrame {
    pub points: Vec<Vec3>,
}

impl PointCloudFrame {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloudFrame { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Errors with the index of the first non-finite coordinate.
    pub fn check_finite(&self) -> Result<()> {
        match self
            .points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            Some(i) => Err(Error::NumericInput(i)),
            None => Ok(()),
        }
    }
}

/// Camera stored alongside a generated frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameCamera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// An ordered list of frames with optional per-frame labels and cameras.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequence {
    pub frames: Vec<PointCloudFrame>,
    pub labels: Option<Vec<u32>>,
    pub cameras: Option<Vec<FrameCamera>>,
}

impl Sequence {
    pub fn new(frames: Vec<PointCloudFrame>) -> Self {
        Sequence {
            frames,
            labels: None,
            cameras: None,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptyInput("sequence has no frames".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.frames.len() {
                return Err(Error::config(format!(
                    "{} labels for {} frames",
                    labels.len(),
                    self.frames.len()
                )));
            }
        }
        if let Some(cams) = &self.cameras {
            if cams.len() != self.frames.len() {
                return Err(Error::config(format!(
                    "{} cameras for {} frames",
                    cams.len(),
                    self.frames.len()
                )));
            }
        }
        for f in &self.frames {
            f.check_finite()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            fx: 64.0,
            fy: 64.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image size must be at least 1x1"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::config("principal point must be finite"));
        }
        Ok(())
    }
}

/// Rigid transform taking world coordinates to camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        CameraPose {
            rotation,
            translation,
        }
    }

    /// Checks `RᵀR = I` and `det R = +1` within `1e-9`.
    pub fn validate(&self) -> Result<()> {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (x - target).abs() > 1e-9 {
                    return Err(Error::Degenerate("rotation is not orthonormal".into()));
                }
            }
        }
        if (det(&self.rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate("rotation determinant is not +1".into()));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Degenerate("non-finite translation".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    /// The pose mapping camera coordinates back to world coordinates.
    pub fn inverse(&self) -> CameraPose {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        CameraPose {
            rotation: rt,
            translation: scale(t, -1.0),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.inverse().translation
    }
}

/// Applies `pose` to every point of `frame`.
pub fn world_to_camera(frame: &PointCloudFrame, pose: &CameraPose) -> Result<Vec<Vec3>> {
    frame.check_finite()?;
    Ok(frame.points.iter().map(|&p| pose.apply(p)).collect())
}

/// Pixel hit of a camera-space point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: u32,
    pub v: u32,
    pub depth: f64,
}

/// Projects a camera-space point; `None` means culled (behind the camera or
/// outside the image).
pub fn project(p: Vec3, intr: &CameraIntrinsics) -> Option<Projection> {
    let z = p[2];
    if !(z > 0.0) {
        return None;
    }
    let uf = (intr.fx * p[0] / z + intr.cx).floor();
    let vf = (intr.fy * p[1] / z + intr.cy).floor();
    if !(uf >= 0.0 && vf >= 0.0 && uf < intr.width as f64 && vf < intr.height as f64) {
        return None;
    }
    Some(Projection {
        u: uf as u32,
        v: vf as u32,
        depth: z,
    })
}

/// Camera-space point through the center of pixel `(u, v)` at depth `z`.
pub fn unproject(u: u32, v: u32, z: f64, intr: &CameraIntrinsics) -> Vec3 {
    [
        (u as f64 + 0.5 - intr.cx) * z / intr.fx,
        (v as f64 + 0.5 - intr.cy) * z / intr.fy,
        z,
    ]
}

/// Builds a pose whose +z axis points from `camera_pos` toward `target`.
///
/// The camera +y axis is `up_hint` made orthogonal to the viewing
/// direction and +x completes a right-handed frame. When the viewing
/// direction is parallel to `up_hint`, `(1, 0, 0)` is used instead.
pub fn look_at(camera_pos: Vec3, target: Vec3, up_hint: Vec3) -> Result<CameraPose> {
    let fwd = sub(target, camera_pos);
    let len = norm(fwd);
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::Degenerate(
            "camera position coincides with target".into(),
        ));
    }
    let z = scale(fwd, 1.0 / len);
    let mut up = up_hint;
    let up_len = norm(up);
    if !(up_len > 0.0) || norm(cross(z, scale(up, 1.0 / up_len))) < 1e-6 {
        up = [1.0, 0.0, 0.0];
        if norm(cross(z, up)) < 1e-6 {
            up = [0.0, 1.0, 0.0];
        }
    }
    let y_raw = sub(up, scale(z, dot(up, z)));
    let y = scale(y_raw, 1.0 / norm(y_raw));
    let x = cross(y, z);
    let rotation = [x, y, z];
    let translation = scale(mat_vec(&rotation, camera_pos), -1.0);
    Ok(CameraPose {
        rotation,
        translation,
    })
}

/// Arithmetic mean of the frame's points.
pub fn centroid(frame: &PointCloudFrame) -> Result<Vec3> {
    if frame.points.is_empty() {
        return Err(Error::EmptyInput("centroid of an empty frame".into()));
    }
    let mut acc = [0.0; 3];
    for p in &frame.points {
        acc = add(acc, *p);
    }
    Ok(scale(acc, 1.0 / frame.points.len() as f64))
}

/// Per-pixel nearest depth and the index of the point that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    /// Row-major; `f64::INFINITY` marks an empty pixel.
    pub depth: Vec<f64>,
    /// Row-major; `u32::MAX` marks an empty pixel.
    pub index: Vec<u32>,
}

pub const EMPTY_INDEX: u32 = u32::MAX;

impl DepthImage {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        DepthImage {
            width,
            height,
            depth: vec![f64::INFINITY; n],
            index: vec![EMPTY_INDEX; n],
        }
    }

    #[inline]
    pub fn offset(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    pub fn get(&self, u: u32, v: u32) -> Option<(f64, u32)> {
        let o = self.offset(u, v);
        (self.index[o] != EMPTY_INDEX).then(|| (self.depth[o], self.index[o]))
    }

    pub fn filled(&self) -> usize {
        self.index.iter().filter(|&&i| i != EMPTY_INDEX).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn world_to_camera_examples() {
        let f = PointCloudFrame::new(vec![[1.0, 2.0, 3.0]]);
        assert_eq!(
            world_to_camera(&f, &CameraPose::default()).unwrap(),
            vec![[1.0, 2.0, 3.0]]
        );
        let f = PointCloudFrame::new(vec![[0.0, 0.0, 0.0]]);
        let pose = CameraPose::new(IDENTITY, [0.0, 0.0, 5.0]);
        assert_eq!(world_to_camera(&f, &pose).unwrap(), vec![[0.0, 0.0, 5.0]]);
        let f = PointCloudFrame::new(vec![[1.0, 0.0, 0.0]]);
        let pose = CameraPose::new(rot_z(std::f64::consts::FRAC_PI_2), [0.0; 3]);
        let out = world_to_camera(&f, &pose).unwrap();
        assert!(close(out[0], [0.0, 1.0, 0.0], 1e-15));
    }

    #[test]
    fn world_to_camera_rejects_nan() {
        let f = PointCloudFrame::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]);
        assert!(matches!(
            world_to_camera(&f, &CameraPose::default()),
            Err(Error::NumericInput(1))
        ));
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::default();
        assert_eq!(
            project([0.0, 0.0, 5.0], &k),
            Some(Projection {
                u: 32,
                v: 32,
                depth: 5.0
            })
        );
        assert_eq!(project([0.0, 0.0, -1.0], &k), None);
        assert_eq!(project([0.0, 0.0, 0.0], &k), None);
        // 64*1/2 + 32 = 64 falls just outside a 64-pixel image.
        assert_eq!(project([1.0, 1.0, 2.0], &k), None);
        let k16 = CameraIntrinsics {
            cx: 16.0,
            cy: 16.0,
            ..k
        };
        assert_eq!(
            project([1.0, 1.0, 2.0], &k16),
            Some(Projection {
                u: 48,
                v: 48,
                depth: 2.0
            })
        );
    }

    #[test]
    fn look_at_canonical() {
        let pose = look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        for i in 0..3 {
            assert!(close(pose.rotation[i], IDENTITY[i], 1e-15));
        }
        assert!(close(pose.translation, [0.0, 0.0, 5.0], 1e-15));
    }

    #[test]
    fn look_at_target_hits_principal_point() {
        let k = CameraIntrinsics::default();
        let pose = look_at([0.0, 0.0, 5.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        let p = project(pose.apply([0.0; 3]), &k).unwrap();
        assert_eq!((p.u, p.v), (32, 32));
        assert!((p.depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn look_at_colinear_uses_fallback() {
        let pose = look_at([0.0, 5.0, 0.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        pose.validate().unwrap();
        assert!(close(pose.rotation[2], [0.0, -1.0, 0.0], 1e-15));
    }

    #[test]
    fn look_at_degenerate() {
        assert!(matches!(
            look_at([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn centroid_examples() {
        let f = PointCloudFrame::new(vec![[0.0; 3], [2.0, 0.0, 0.0]]);
        assert_eq!(centroid(&f).unwrap(), [1.0, 0.0, 0.0]);
        let f = PointCloudFrame::new(vec![[0.3, -2.0, 7.5]]);
        assert_eq!(centroid(&f).unwrap(), [0.3, -2.0, 7.5]);
        assert!(matches!(
            centroid(&PointCloudFrame::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn centroid_matches_summation_oracle() {
        let mut rng = Pcg32::from_seed(1);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| [rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)])
            .collect();
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sz = 0.0;
        for p in &pts {
            sx += p[0];
            sy += p[1];
            sz += p[2];
        }
        let oracle = [sx / 100.0, sy / 100.0, sz / 100.0];
        let c = centroid(&PointCloudFrame::new(pts)).unwrap();
        assert!(close(c, oracle, 1e-12));
    }

    #[test]
    fn pose_round_trip() {
        let mut rng = Pcg32::from_seed(2);
        for _ in 0..100 {
            let cam = [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)];
            let pose = match look_at(cam, [0.1, 0.2, 0.3], [0.0, 0.0, 1.0]) {
                Ok(p) => p,
                Err(_) => continue,
            };
            pose.validate().unwrap();
            let inv = pose.inverse();
            let p = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
            assert!(close(inv.apply(pose.apply(p)), p, 1e-9));
            assert!(close(pose.center(), cam, 1e-9));
        }
    }

    #[test]
    fn unprojection_lands_within_pixel_footprint() {
        let k = CameraIntrinsics::default();
        let pose = look_at([0.3, -4.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        let inv = pose.inverse();
        let mut rng = Pcg32::from_seed(5);
        let mut hits = 0;
        for _ in 0..500 {
            let p = [rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)];
            let pc = pose.apply(p);
            if let Some(hit) = project(pc, &k) {
                hits += 1;
                let back = inv.apply(unproject(hit.u, hit.v, hit.depth, &k));
                // Pixel footprint at depth z: one pixel spans z/f per axis.
                let foot = hit.depth / k.fx.min(k.fy);
                assert!(norm(sub(back, p)) <= foot * 2f64.sqrt() * 0.5 + 1e-12);
            }
        }
        assert!(hits > 100);
    }
}
