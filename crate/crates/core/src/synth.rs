//! Analytic synthetic scenes: boxes, spheres and one-sided plane slabs, with
//! exact raycast depth, ground-truth TSDF, camera trajectories and a scene
//! mesh for evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Mat3, PixelCoord, Pose, Vec3};
use crate::image::{DepthMap, Image, MISSING};
use crate::surface::Mesh;
use crate::volume::{GridSpec, SparseVolume, TsdfVoxel, VoxelKey};

/// Thickness given to planes so they have an inside.
pub const PLANE_THICKNESS: f64 = 0.02;
pub const MAX_STEP_TRANSLATION: f64 = 0.1;
pub const MAX_STEP_ROTATION: f64 = 10.0 * std::f64::consts::PI / 180.0;

/// Scene file entry. `rotation` is an axis-angle vector (radians). A plane
/// is a `size[0] x size[1]` rectangle in its local xy-plane facing local +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PrimitiveSpec {
    Box {
        center: [f64; 3],
        size: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Plane {
        center: [f64; 3],
        size: [f64; 2],
        #[serde(default)]
        rotation: [f64; 3],
    },
}

fn rotation_matrix(aa: [f64; 3]) -> Mat3 {
    let v = Vec3::from(aa);
    let angle = v.norm();
    if angle == 0.0 {
        return Mat3::identity();
    }
    Pose::from_axis_angle(v / angle, angle).rotation
}

/// Solid used for distances and intersections.
#[derive(Debug, Clone, PartialEq)]
pub enum Solid {
    /// Oriented box; `rotation` maps local to world.
    Box { center: Vec3, half: Vec3, rotation: Mat3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Solid {
    fn from_spec(p: &PrimitiveSpec) -> Result<Self> {
        let s = match p {
            PrimitiveSpec::Box { center, size, rotation } => Solid::Box {
                center: Vec3::from(*center),
                half: Vec3::from(*size) * 0.5,
                rotation: rotation_matrix(*rotation),
            },
            PrimitiveSpec::Sphere { center, radius } => Solid::Sphere {
                center: Vec3::from(*center),
                radius: *radius,
            },
            PrimitiveSpec::Plane { center, size, rotation } => {
                let r = rotation_matrix(*rotation);
                let normal = r.column(2).into_owned();
                Solid::Box {
                    center: Vec3::from(*center) - normal * (PLANE_THICKNESS * 0.5),
                    half: Vec3::new(size[0] * 0.5, size[1] * 0.5, PLANE_THICKNESS * 0.5),
                    rotation: r,
                }
            }
        };
        let ok = match &s {
            Solid::Box { half, .. } => half.iter().all(|h| *h > 0.0 && h.is_finite()),
            Solid::Sphere { radius, center } => *radius > 0.0 && center.iter().all(|c| c.is_finite()),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("degenerate primitive {p:?}")));
        }
        Ok(s)
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Solid::Sphere { center, radius } => (p - center).norm() - radius,
            Solid::Box { center, half, rotation } => {
                let local = rotation.transpose() * (p - center);
                let q = local.abs() - half;
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
        }
    }

    /// Nearest ray parameter `t > 0` of `origin + t·dir` on the surface.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match self {
            Solid::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = (-b - s) / a;
                let t1 = (-b + s) / a;
                [t0, t1].into_iter().find(|t| *t > 0.0)
            }
            Solid::Box { center, half, rotation } => {
                let o = rotation.transpose() * (origin - center);
                let d = rotation.transpose() * dir;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let mut n = (-half[a] - o[a]) / d[a];
                    let mut f = (half[a] - o[a]) / d[a];
                    if n > f {
                        std::mem::swap(&mut n, &mut f);
                    }
                    t0 = t0.max(n);
                    t1 = t1.min(f);
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|t| *t > 0.0)
            }
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Solid::Sphere { center, radius } => (center - Vec3::repeat(*radius), center + Vec3::repeat(*radius)),
            Solid::Box { center, half, rotation } => {
                let ext = rotation.abs() * half;
                (center - ext, center + ext)
            }
        }
    }

    /// Closed triangle mesh of the surface, outward-facing.
    pub fn triangulate(&self, segments: usize) -> Mesh {
        match self {
            Solid::Box { center, half, rotation } => {
                let mut verts = Vec::with_capacity(8);
                for i in 0..8 {
                    let s = Vec3::new(
                        if i & 1 == 0 { -1.0 } else { 1.0 },
                        if i & 2 == 0 { -1.0 } else { 1.0 },
                        if i & 4 == 0 { -1.0 } else { 1.0 },
                    );
                    verts.push(center + rotation * s.component_mul(half));
                }
                let quads = [
                    [0, 2, 3, 1],
                    [4, 5, 7, 6],
                    [0, 1, 5, 4],
                    [2, 6, 7, 3],
                    [0, 4, 6, 2],
                    [1, 3, 7, 5],
                ];
                let tris = quads
                    .iter()
                    .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
                    .collect();
                Mesh::new(verts, tris)
            }
            Solid::Sphere { center, radius } => {
                let (nu, nv) = (2 * segments.max(3), segments.max(3));
                let mut verts = vec![center + Vec3::new(0.0, 0.0, *radius)];
                for j in 1..nv {
                    let th = std::f64::consts::PI * j as f64 / nv as f64;
                    for i in 0..nu {
                        let ph = 2.0 * std::f64::consts::PI * i as f64 / nu as f64;
                        verts.push(center + Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()) * *radius);
                    }
                }
                verts.push(center - Vec3::new(0.0, 0.0, *radius));
                let south = (verts.len() - 1) as u32;
                let ring = |j: usize, i: usize| (1 + (j - 1) * nu + i % nu) as u32;
                let mut tris = Vec::new();
                for i in 0..nu {
                    tris.push([0, ring(1, i), ring(1, i + 1)]);
                    tris.push([south, ring(nv - 1, i + 1), ring(nv - 1, i)]);
                }
                for j in 1..nv - 1 {
                    for i in 0..nu {
                        let (a, b, c, d) = (ring(j, i), ring(j, i + 1), ring(j + 1, i), ring(j + 1, i + 1));
                        tris.push([a, c, d]);
                        tris.push([a, d, b]);
                    }
                }
                Mesh::new(verts, tris)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<PrimitiveSpec>,
    solids: Vec<Solid>,
}

impl Scene {
    pub fn new(primitives: Vec<PrimitiveSpec>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::Empty("scene primitives"));
        }
        let solids = primitives.iter().map(Solid::from_spec).collect::<Result<_>>()?;
        Ok(Self { primitives, solids })
    }

    /// Three walls, a floor, a box and a sphere; z is up, the open side is +y.
    pub fn desk_room() -> Self {
        use std::f64::consts::FRAC_PI_2;
        Self::new(vec![
            PrimitiveSpec::Plane {
                center: [0.0, 0.0, 0.0],
                size: [4.0, 4.0],
                rotation: [0.0, 0.0, 0.0],
            },
            PrimitiveSpec::Plane {
                center: [-2.0, 0.0, 1.25],
                size: [2.5, 4.0],
                rotation: [0.0, FRAC_PI_2, 0.0],
            },
            PrimitiveSpec::Plane {
                center: [2.0, 0.0, 1.25],
                size: [2.5, 4.0],
                rotation: [0.0, -FRAC_PI_2, 0.0],
            },
            PrimitiveSpec::Plane {
                center: [0.0, -2.0, 1.25],
                size: [4.0, 2.5],
                rotation: [-FRAC_PI_2, 0.0, 0.0],
            },
            PrimitiveSpec::Box {
                center: [0.45, -0.35, 0.2],
                size: [0.4, 0.5, 0.4],
                rotation: [0.0, 0.0, 0.3],
            },
            PrimitiveSpec::Sphere {
                center: [-0.5, 0.35, 0.35],
                radius: 0.35,
            },
        ])
        .expect("built-in scene is valid")
    }

    pub fn solids(&self) -> &[Solid] {
        &self.solids
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.primitives).expect("scene serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.solids.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for s in &self.solids {
            let (a, b) = s.bounds();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        (lo, hi)
    }

    /// Nearest hit along a ray: `(t, primitive index)`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        self.solids
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.intersect(origin, dir).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }

    /// Triangle mesh of all primitive surfaces.
    pub fn to_mesh(&self) -> Mesh {
        let mut mesh = Mesh::default();
        for s in &self.solids {
            mesh.append(&s.triangulate(48));
        }
        mesh
    }
}

/// Exact z-depth and primitive index (`-1` for no hit) per pixel.
pub fn raycast(scene: &Scene, k: &Intrinsics, pose: &Pose) -> (DepthMap, Vec<i32>) {
    let origin = pose.center();
    let hits: Vec<Option<(f64, usize)>> = (0..k.width * k.height)
        .into_par_iter()
        .map(|i| {
            let px = PixelCoord::new((i % k.width) as f64, (i / k.width) as f64);
            let dir = pose.rotation * Vec3::new((px.u - k.cx) / k.fx, (px.v - k.cy) / k.fy, 1.0);
            scene.intersect(&origin, &dir)
        })
        .collect();
    let depth = DepthMap {
        width: k.width,
        height: k.height,
        data: hits.iter().map(|h| h.map_or(MISSING, |(t, _)| t)).collect(),
    };
    let ids = hits.iter().map(|h| h.map_or(-1, |(_, i)| i as i32)).collect();
    (depth, ids)
}

pub fn raycast_depth(scene: &Scene, k: &Intrinsics, pose: &Pose) -> DepthMap {
    raycast(scene, k, pose).0
}

/// Procedural gray image replicated to three channels, quantized to 8 bits:
/// a per-primitive base level, a depth falloff and a horizontal gradient.
pub fn render_color(scene: &Scene, k: &Intrinsics, pose: &Pose) -> Image {
    let (depth, ids) = raycast(scene, k, pose);
    let mut img = Image::zeros(k.width, k.height, 3);
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let g = if ids[i] < 0 {
                0.05
            } else {
                let base = 0.25 + 0.1 * ((ids[i] as u64 * 2654435761) % 7) as f64;
                let fall = (-depth.data[i] / 4.0).exp();
                (base * (0.5 + 0.5 * fall) + 0.1 * x as f64 / k.width as f64).clamp(0.0, 1.0)
            };
            // same quantization as an 8-bit PGM round trip
            let q = (g * 255.0).round() as u16 as f32 * (1.0 / 255.0f32);
            img.pixel_mut(x, y).fill(q);
        }
    }
    img
}

/// Ground-truth TSDF over the scene bounds: `clamp(sdf / trunc, -1, 1)`,
/// omitting voxels farther than `truncation` outside every surface.
pub fn gt_tsdf(scene: &Scene, spec: &GridSpec, level: u8, truncation: f64) -> SparseVolume<TsdfVoxel> {
    let (lo, hi) = scene.bounds();
    let pad = Vec3::repeat(truncation);
    let a = spec.world_to_key(level, &(lo - pad));
    let b = spec.world_to_key(level, &(hi + pad));
    let entries: Vec<(VoxelKey, TsdfVoxel)> = (a.ix..=b.ix)
        .into_par_iter()
        .flat_map_iter(|x| {
            let mut out = Vec::new();
            for y in a.iy..=b.iy {
                for z in a.iz..=b.iz {
                    let key = VoxelKey::new(level, x, y, z);
                    let d = scene.sdf(&spec.key_center(key));
                    if d <= truncation {
                        out.push((key, TsdfVoxel::new((d / truncation).clamp(-1.0, 1.0) as f32)));
                    }
                }
            }
            out
        })
        .collect();
    SparseVolume::from_entries(level, entries).expect("keys share the level")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryMode {
    Orbit,
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitParams {
    pub target: [f64; 3],
    pub radius: f64,
    pub height: f64,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self {
            target: [0.0, 0.0, 0.3],
            radius: 1.3,
            height: 1.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub timestamps: Vec<f64>,
}

const FRAME_INTERVAL: f64 = 1.0 / 30.0;
const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

/// Orbit: `n` poses evenly spaced on a circle around `target`, spanning the
/// full circle when the step limits allow it and a shorter arc otherwise.
/// Walk: a seeded random walk around the orbit start, still looking at
/// `target`. Both respect the per-step translation and rotation limits.
pub fn make_trajectory(n: usize, mode: TrajectoryMode, params: &OrbitParams, seed: u64) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::InvalidParameter("trajectory needs at least one frame".into()));
    }
    if !(params.radius > 0.0) {
        return Err(Error::InvalidParameter("orbit radius must be positive".into()));
    }
    let target = Vec3::from(params.target);
    let at = |angle: f64| Vec3::new(target.x + params.radius * angle.cos(), target.y + params.radius * angle.sin(), params.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let poses = match mode {
        TrajectoryMode::Orbit => {
            // chord and yaw both bounded with a 5% margin
            let chord_limit = 2.0 * (0.95 * MAX_STEP_TRANSLATION / (2.0 * params.radius)).min(1.0).asin();
            let step = (std::f64::consts::TAU / n as f64)
                .min(chord_limit)
                .min(0.95 * MAX_STEP_ROTATION);
            (0..n)
                .map(|i| Pose::look_at(at(start + step * i as f64), target, UP))
                .collect::<Result<Vec<_>>>()?
        }
        TrajectoryMode::Walk => {
            let mut eye = at(start);
            let mut poses = vec![Pose::look_at(eye, target, UP)?];
            while poses.len() < n {
                let prev = *poses.last().unwrap();
                let mut dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
                if dir.norm() < 1e-6 {
                    dir = Vec3::x();
                }
                let mut len = rng.random_range(0.3..0.9) * MAX_STEP_TRANSLATION;
                let next = loop {
                    let mut cand = eye + dir.normalize() * len;
                    // stay within a band around the orbit
                    let flat = Vec3::new(cand.x - target.x, cand.y - target.y, 0.0);
                    let r = flat.norm().clamp(0.6 * params.radius, 1.3 * params.radius);
                    if flat.norm() > 1e-9 {
                        let f = flat.normalize() * r;
                        cand = Vec3::new(target.x + f.x, target.y + f.y, cand.z);
                    }
                    cand.z = cand.z.clamp(params.height - 0.3, params.height + 0.3);
                    let pose = Pose::look_at(cand, target, UP)?;
                    if (cand - eye).norm() <= MAX_STEP_TRANSLATION
                        && prev.rotation_angle_to(&pose) <= MAX_STEP_ROTATION
                    {
                        break (cand, pose);
                    }
                    len *= 0.5;
                    if len < 1e-6 {
                        break (eye, prev);
                    }
                };
                eye = next.0;
                poses.push(next.1);
            }
            poses
        }
    };
    let timestamps = (0..n).map(|i| i as f64 * FRAME_INTERVAL).collect();
    Ok(Trajectory { poses, timestamps })
}
