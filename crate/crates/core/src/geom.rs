//! Pinhole cameras, rigid poses and the projection primitives shared by the
//! rest of the crate.
//!
//! Conventions:
//! - camera frame is x right, y down, z forward;
//! - poses are world-from-camera (`p_world = R * p_cam + t`);
//! - depth is the camera-frame z coordinate, not the ray length;
//! - the image domain is half-open, `[0, width) x [0, height)`, with pixel
//!   centers at integer coordinates.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera observed at `1/stride` resolution.
    ///
    /// Pixel centers stay at integer coordinates, so a full-resolution pixel
    /// coordinate `u` maps to `(u + 0.5) / stride - 0.5`.
    pub fn downscaled(&self, stride: usize) -> Intrinsics {
        let s = stride as f64;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            width: self.width / stride,
            height: self.height / stride,
        }
    }

    #[inline]
    pub fn contains(&self, px: PixelCoord) -> bool {
        px.u >= 0.0 && px.u < self.width as f64 && px.v >= 0.0 && px.v < self.height as f64
    }

    /// Parses a single line `fx fy cx cy width height`.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(format!("expected 6 fields, found {}", fields.len()));
        }
        let f = |i: usize| -> std::result::Result<f64, String> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| format!("field {}: {e}", i + 1))
        };
        let n = |i: usize| -> std::result::Result<usize, String> {
            fields[i]
                .parse::<usize>()
                .map_err(|e| format!("field {}: {e}", i + 1))
        };
        Intrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, n(4)?, n(5)?).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Integer pixel whose center is closest, if it lies inside `width x height`.
    pub fn nearest(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let x = self.u.round();
        let y = self.v.round();
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::new(x, y, z),
        }
    }

    /// Rotation about `axis` by `angle` radians, no translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let rot = if axis.norm() == 0.0 {
            Rotation3::identity()
        } else {
            Rotation3::new(axis.normalize() * angle)
        };
        Self {
            rotation: *rot.matrix(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` whose optical axis points at `target`; `up` is the
    /// world direction that should appear upward in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye coincides with target".into()));
        }
        let z = forward.normalize();
        let x = (-up).cross(&z);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidPose("up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Ok(Self {
            rotation,
            translation: eye,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).amax();
        if err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (max deviation {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected +1")));
        }
        Ok(())
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// World point expressed in this camera's frame.
    #[inline]
    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Unit vector along the optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Row-major `[R|t]` as 12 whitespace separated numbers.
    pub fn to_line(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let vals = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ];
        vals.iter()
            .map(|v| format!("{v:.17e}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_line(line: &str) -> std::result::Result<Pose, String> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != 12 {
            return Err(format!("expected 12 values, found {}", vals.len()));
        }
        let rotation = Mat3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vec3::new(vals[3], vals[7], vals[11]);
        let pose = Pose {
            rotation,
            translation,
        };
        // Text round trips lose a few ulps; accept a looser orthonormality bound
        // on input and re-orthonormalize.
        let err = (rotation.transpose() * rotation - Mat3::identity()).amax();
        if err > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err("rotation is not a proper orthonormal matrix".into());
        }
        Ok(pose.orthonormalized())
    }

    /// Nearest proper rotation (via SVD) with the same translation.
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }
}

/// Reads a pose file: one `[R|t]` per non-empty line.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let pose =
            Pose::parse_line(line).map_err(|m| Error::parse(path, format!("line {}: {m}", i + 1)))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn save_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        out.push_str(&p.to_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Projects a world point into the image.
///
/// Returns the pixel and camera-frame depth when the point is in front of the
/// camera and inside the half-open image domain.
pub fn project(k: &Intrinsics, pose: &Pose, point: &Vec3) -> Option<(PixelCoord, f64)> {
    let pc = pose.world_to_camera(point);
    project_camera(k, &pc)
}

/// Same as [`project`] for a point already in the camera frame.
#[inline]
pub fn project_camera(k: &Intrinsics, pc: &Vec3) -> Option<(PixelCoord, f64)> {
    let z = pc.z;
    if !(z > 0.0) {
        return None;
    }
    let px = PixelCoord {
        u: k.fx * pc.x / z + k.cx,
        v: k.fy * pc.y / z + k.cy,
    };
    if k.contains(px) {
        Some((px, z))
    } else {
        None
    }
}

pub fn backproject(k: &Intrinsics, pose: &Pose, px: PixelCoord, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(pose.transform_point(&backproject_camera(k, px, depth)))
}

/// Camera-frame point at `depth` along the ray through `px`.
#[inline]
pub fn backproject_camera(k: &Intrinsics, px: PixelCoord, depth: f64) -> Vec3 {
    Vec3::new(
        (px.u - k.cx) / k.fx * depth,
        (px.v - k.cy) / k.fy * depth,
        depth,
    )
}

/// World-frame direction of the ray through `px`, scaled so that its
/// camera-frame z component is 1 (ray parameter equals depth).
#[inline]
pub fn pixel_ray(k: &Intrinsics, pose: &Pose, px: PixelCoord) -> Vec3 {
    pose.rotation * backproject_camera(k, px, 1.0)
}
