use rayon::prelude::*;

use super::Mesh;
use crate::geom::{Intrinsics, PixelCoord, Pose, Vec3};
use crate::image::DepthMap;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    /// Slab test; entry distance if the ray hits within `(0, t_max)`.
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.min[a] - origin[a]) * inv_dir[a];
            let mut far = (self.max[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN from 0 * inf means the ray lies in the slab plane
            if !near.is_nan() {
                t0 = t0.max(near);
            }
            if !far.is_nan() {
                t1 = t1.min(far);
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: `[start, start+count)` into `order`; inner: children indices.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

/// Bounding volume hierarchy over a mesh's triangles (median split on the
/// longest centroid axis).
#[derive(Debug, Clone)]
pub struct Bvh<'m> {
    mesh: &'m Mesh,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl<'m> Bvh<'m> {
    pub fn new(mesh: &'m Mesh) -> Self {
        let mut bvh = Self {
            mesh,
            nodes: Vec::new(),
            order: (0..mesh.triangles.len()).collect(),
        };
        if !bvh.order.is_empty() {
            let centroids: Vec<Vec3> = (0..mesh.triangles.len())
                .map(|i| {
                    let [a, b, c] = mesh.triangle(i);
                    (a + b + c) / 3.0
                })
                .collect();
            let n = bvh.order.len();
            bvh.build(&centroids, 0, n);
        }
        bvh
    }

    fn build(&mut self, centroids: &[Vec3], start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &self.order[start..end] {
            for p in self.mesh.triangle(t) {
                bounds.grow(&p);
            }
            cbounds.grow(&centroids[t]);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            bounds,
            start,
            count: end - start,
            left: 0,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let extent = cbounds.max - cbounds.min;
        let axis = (0..3).max_by(|&a, &b| extent[a].total_cmp(&extent[b])).unwrap();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = self.build(centroids, start, mid);
        let right = self.build(centroids, mid, end);
        let node = &mut self.nodes[id];
        node.count = 0;
        node.left = left;
        node.right = right;
        id
    }

    /// Nearest hit parameter `t > 0` along `origin + t * dir`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.bounds.hit(origin, &inv, best).is_none() {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start..node.start + node.count] {
                    if let Some(h) = ray_triangle(origin, dir, &self.mesh.triangle(t)) {
                        best = best.min(h);
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Möller–Trumbore, two-sided.
fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-12).then_some(t)
}

/// Z-depth of the nearest mesh surface through each pixel center.
pub fn render_depth(mesh: &Mesh, k: &Intrinsics, pose: &Pose) -> DepthMap {
    let bvh = Bvh::new(mesh);
    render_depth_bvh(&bvh, k, pose)
}

pub(crate) fn render_depth_bvh(bvh: &Bvh<'_>, k: &Intrinsics, pose: &Pose) -> DepthMap {
    let (w, h) = (k.width, k.height);
    let origin = pose.center();
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let px = PixelCoord::new((i % w) as f64, (i / w) as f64);
            // ray with unit camera-frame z, so t is z-depth
            let dir = pose.rotation
                * Vec3::new((px.u - k.cx) / k.fx, (px.v - k.cy) / k.fy, 1.0);
            bvh.intersect(&origin, &dir).unwrap_or(crate::image::MISSING)
        })
        .collect();
    DepthMap {
        width: w,
        height: h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project;

    fn quad(z: f64, half: f64) -> Mesh {
        Mesh::new(
            vec![
                Vec3::new(-half, -half, z),
                Vec3::new(half, -half, z),
                Vec3::new(half, half, z),
                Vec3::new(-half, half, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    fn camera() -> Intrinsics {
        Intrinsics::new(20.0, 20.0, 10.0, 8.0, 20, 16).unwrap()
    }

    #[test]
    fn fronto_parallel_square() {
        let d = render_depth(&quad(2.0, 10.0), &camera(), &Pose::identity());
        assert_eq!(d.count_present(), 20 * 16);
        for y in 0..16 {
            for x in 0..20 {
                assert!((d.get(x, y).unwrap() - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn camera_behind_plane_sees_nothing() {
        let behind = Pose::from_translation(0.0, 0.0, 3.0);
        let d = render_depth(&quad(2.0, 10.0), &camera(), &behind);
        assert_eq!(d.count_present(), 0);
    }

    #[test]
    fn nearest_plane_wins() {
        let mut m = quad(2.0, 10.0);
        m.append(&quad(1.0, 10.0));
        let d = render_depth(&m, &camera(), &Pose::identity());
        assert!((d.get(3, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bvh_agrees_with_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut mesh = Mesh::default();
        for _ in 0..300 {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0));
            let base = mesh.vertices.len() as u32;
            for _ in 0..3 {
                mesh.vertices.push(c + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
            }
            mesh.triangles.push([base, base + 1, base + 2]);
        }
        let bvh = Bvh::new(&mesh);
        for _ in 0..500 {
            let dir = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
            let brute = (0..mesh.triangles.len())
                .filter_map(|i| ray_triangle(&Vec3::zeros(), &dir, &mesh.triangle(i)))
                .fold(f64::INFINITY, f64::min);
            let got = bvh.intersect(&Vec3::zeros(), &dir).unwrap_or(f64::INFINITY);
            assert_eq!(got, brute);
        }
    }

    #[test]
    fn projected_vertices_are_not_occluded_by_themselves() {
        let mesh = quad(2.0, 0.5);
        let k = camera();
        let pose = Pose::from_translation(0.1, -0.05, 0.0);
        let d = render_depth(&mesh, &k, &pose);
        for v in &mesh.vertices {
            if let Some((px, z)) = project(&k, &pose, v) {
                if let Some((x, y)) = px.nearest(k.width, k.height) {
                    if let Some(r) = d.get(x, y) {
                        assert!(r <= z + 1e-6);
                    }
                }
            }
        }
    }
}
