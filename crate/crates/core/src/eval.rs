//! 3D mesh metrics, 2D depth metrics, the two training losses with analytic
//! gradients, a finite-difference gradient checker, and mesh point sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::DepthMap;
use crate::surface::Mesh;

pub const DEFAULT_TAU: f64 = 0.05;
/// Mesh sampling density: one point per square centimeter.
pub const SAMPLES_PER_M2: f64 = 10_000.0;

/// Static 3D kd-tree answering nearest-neighbor distance queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<KdNode>,
}

#[derive(Debug, Clone, Copy)]
struct KdNode {
    point: usize,
    axis: u8,
    left: u32,
    right: u32,
}

const NIL: u32 = u32::MAX;

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.build(&mut idx);
        tree
    }

    fn build(&mut self, idx: &mut [usize]) -> u32 {
        if idx.is_empty() {
            return NIL;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in idx.iter() {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let ext = hi - lo;
        let axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).unwrap();
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let id = self.nodes.len() as u32;
        self.nodes.push(KdNode {
            point: idx[mid],
            axis: axis as u8,
            left: NIL,
            right: NIL,
        });
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build(l);
        let right = self.build(&mut r[1..]);
        self.nodes[id as usize].left = left;
        self.nodes[id as usize].right = right;
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Euclidean distance to the nearest stored point.
    pub fn nearest_distance(&self, q: &Vec3) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let n = self.nodes[id as usize];
            let p = &self.points[n.point];
            let d2 = (p - q).norm_squared();
            if d2 < best {
                best = d2;
            }
            let diff = q[n.axis as usize] - p[n.axis as usize];
            let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
            if far != NIL && diff * diff <= best {
                stack.push(far);
            }
            if near != NIL {
                stack.push(near);
            }
        }
        Some(best.sqrt())
    }
}

/// For each query point, distance to the nearest reference point, O(n·m).
pub fn nearest_distances_brute(queries: &[Vec3], reference: &[Vec3]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| {
            reference
                .iter()
                .map(|p| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

pub fn nearest_distances(queries: &[Vec3], reference: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(reference);
    queries
        .par_iter()
        .map(|q| tree.nearest_distance(q).unwrap_or(f64::INFINITY))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport3D {
    pub acc_m: f64,
    pub comp_m: f64,
    pub prec: f64,
    pub recall: f64,
    pub fscore: f64,
    pub tau_m: f64,
}

fn fscore(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn report_3d(to_gt: &[f64], to_pred: &[f64], tau: f64) -> MetricsReport3D {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let frac = |d: &[f64]| d.iter().filter(|x| **x < tau).count() as f64 / d.len() as f64;
    let (prec, recall) = (frac(to_gt), frac(to_pred));
    MetricsReport3D {
        acc_m: mean(to_gt),
        comp_m: mean(to_pred),
        prec,
        recall,
        fscore: fscore(prec, recall),
        tau_m: tau,
    }
}

fn check_sets(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted point set"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth point set"));
    }
    Ok(())
}

/// Accuracy, completeness, precision, recall and F-score at threshold `tau`.
pub fn metrics_3d(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<MetricsReport3D> {
    check_sets(pred, gt)?;
    Ok(report_3d(&nearest_distances(pred, gt), &nearest_distances(gt, pred), tau))
}

/// Same metrics through brute-force nearest neighbors.
pub fn metrics_3d_brute(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<MetricsReport3D> {
    check_sets(pred, gt)?;
    Ok(report_3d(
        &nearest_distances_brute(pred, gt),
        &nearest_distances_brute(gt, pred),
        tau,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport2D {
    pub abs_rel: f64,
    pub abs_diff_m: f64,
    pub sq_rel_m: f64,
    pub rmse_m: f64,
    pub delta_125: f64,
    /// Fraction of valid pixels where a prediction exists.
    pub coverage: f64,
}

/// Depth metrics over pixels with `gt > 0` (and `mask` set, if given).
/// Means run over pixels that also have a prediction; missing predictions
/// fail the δ test. With zero coverage the means are reported as 0.
pub fn metrics_2d(pred: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>) -> Result<MetricsReport2D> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.data.len() {
            return Err(Error::Shape("mask size".into()));
        }
    }
    let (mut valid, mut covered, mut good) = (0usize, 0usize, 0usize);
    let (mut abs_rel, mut abs_diff, mut sq_rel, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..gt.data.len() {
        let g = gt.data[i];
        if !(g > 0.0) || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        valid += 1;
        let p = pred.data[i];
        if !(p > 0.0) {
            continue;
        }
        covered += 1;
        let e = p - g;
        abs_rel += e.abs() / g;
        abs_diff += e.abs();
        sq_rel += e * e / g;
        sq += e * e;
        if (p / g).max(g / p) < 1.25 {
            good += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Empty("valid ground-truth pixels"));
    }
    let n = covered.max(1) as f64;
    Ok(MetricsReport2D {
        abs_rel: abs_rel / n,
        abs_diff_m: abs_diff / n,
        sq_rel_m: sq_rel / n,
        rmse_m: (sq / n).sqrt(),
        delta_125: good as f64 / valid as f64,
        coverage: covered as f64 / valid as f64,
    })
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
pub fn loss_occupancy(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape("occupancy loss inputs".into()));
    }
    if let Some(p) = pred.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::ProbabilityOutOfRange(*p));
    }
    let n = pred.len() as f64;
    let loss = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln()))
        .sum::<f64>()
        / n;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g) / (p * (1.0 - p)) / n)
        .collect();
    Ok((loss, grad))
}

/// `sign(t) * ln(1 + |t|)`.
pub fn log_transform(t: f64) -> f64 {
    t.signum() * t.abs().ln_1p()
}

fn log_transform_deriv(t: f64) -> f64 {
    1.0 / (1.0 + t.abs())
}

/// Mean L1 distance between log-transformed TSDF values, with gradient.
pub fn loss_tsdf(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape("tsdf loss inputs".into()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let d = log_transform(*p) - log_transform(*g);
        loss += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push(s * log_transform_deriv(*p) / n);
    }
    Ok((loss / n, grad))
}

/// Largest per-coordinate relative error between the analytic gradient of
/// `f` and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp).0;
        xp[i] = x[i] - h;
        let down = f(&xp).0;
        xp[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

/// Seeded uniform surface samples at `density` points per square meter.
/// Each triangle receives `floor(area·density)` points plus one more with
/// probability equal to the fractional part.
pub fn sample_mesh(mesh: &Mesh, density: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(i);
        let expected = mesh.triangle_area(i) * density;
        let mut n = expected.floor() as usize;
        if rng.random::<f64>() < expected - n as f64 {
            n += 1;
        }
        for _ in 0..n {
            let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(a + (b - a) * u + (c - a) * v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn plane_grid(offset_x: f64, n: usize, step: f64) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Vec3::new(offset_x, i as f64 * step, j as f64 * step));
            }
        }
        pts
    }

    #[test]
    fn identical_sets() {
        let pts = random_points(&mut ChaCha8Rng::seed_from_u64(1), 300);
        let m = metrics_3d(&pts, &pts, DEFAULT_TAU).unwrap();
        assert_eq!((m.acc_m, m.comp_m), (0.0, 0.0));
        assert_eq!((m.prec, m.recall, m.fscore), (1.0, 1.0, 1.0));
    }

    #[test]
    fn shifted_plane() {
        let gt = plane_grid(0.0, 30, 0.01);
        let pred = plane_grid(0.10, 30, 0.01);
        let m = metrics_3d(&pred, &gt, 0.05).unwrap();
        assert!((m.acc_m - 0.10).abs() < 1e-12 && (m.comp_m - 0.10).abs() < 1e-12);
        assert_eq!((m.prec, m.recall, m.fscore), (0.0, 0.0, 0.0));
        assert_eq!(m, metrics_3d_brute(&pred, &gt, 0.05).unwrap());
    }

    #[test]
    fn half_surface() {
        let gt = plane_grid(0.0, 40, 0.01);
        let pred: Vec<Vec3> = gt.iter().filter(|p| p.y < 0.195).copied().collect();
        let m = metrics_3d(&pred, &gt, 0.05).unwrap();
        assert_eq!(m.prec, 1.0);
        assert!(m.recall > 0.5 && m.recall < 0.65, "{}", m.recall);
    }

    #[test]
    fn empty_sets_error() {
        let pts = vec![Vec3::zeros()];
        assert!(metrics_3d(&[], &pts, 0.05).is_err());
        assert!(metrics_3d(&pts, &[], 0.05).is_err());
    }

    #[test]
    fn kdtree_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 2, 7, 100, 2000] {
            let a = random_points(&mut rng, n);
            let b = random_points(&mut rng, 1000);
            assert_eq!(nearest_distances(&b, &a), nearest_distances_brute(&b, &a));
        }
    }

    #[test]
    fn metrics_2d_cases() {
        let gt = DepthMap::from_fn(8, 6, |x, y| 1.0 + 0.1 * x as f64 + 0.05 * y as f64);
        let same = metrics_2d(&gt, &gt, None).unwrap();
        assert_eq!((same.abs_rel, same.rmse_m, same.delta_125, same.coverage), (0.0, 0.0, 1.0, 1.0));

        let scaled = DepthMap::from_fn(8, 6, |x, y| 1.1 * gt.raw(x, y));
        let m = metrics_2d(&scaled, &gt, None).unwrap();
        assert!((m.abs_rel - 0.1).abs() < 1e-12);
        assert_eq!(m.delta_125, 1.0);

        let doubled = DepthMap::from_fn(8, 6, |x, y| 2.0 * gt.raw(x, y));
        assert_eq!(metrics_2d(&doubled, &gt, None).unwrap().delta_125, 0.0);

        let mut holes = gt.clone();
        holes.set(0, 0, crate::image::MISSING);
        let m = metrics_2d(&holes, &gt, None).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert!((m.coverage - 47.0 / 48.0).abs() < 1e-12);
        assert!((m.delta_125 - 47.0 / 48.0).abs() < 1e-12);

        let none = DepthMap::missing(8, 6);
        assert!(metrics_2d(&gt, &none, None).is_err());
    }

    #[test]
    fn loss_examples() {
        let (l, _) = loss_occupancy(&[0.5], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (_, g) = loss_occupancy(&[0.8], &[1.0]).unwrap();
        assert!((g[0] + 1.25).abs() < 1e-12);
        assert!(loss_occupancy(&[1.0], &[1.0]).is_err());
        assert!(loss_occupancy(&[0.0], &[0.0]).is_err());

        let (l, _) = loss_tsdf(&[0.0], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, g) = loss_tsdf(&[0.3, -0.2], &[0.3, -0.2]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_check_calibration() {
        let quad = |x: &[f64]| {
            let f = x.iter().map(|v| 3.0 * v * v).sum::<f64>();
            (f, x.iter().map(|v| 6.0 * v).collect())
        };
        assert!(grad_check(quad, &[0.3, -1.2, 2.0], 1e-5) <= 1e-9);
    }

    #[test]
    fn sampling_density_and_determinism() {
        let mesh = Mesh::new(
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let a = sample_mesh(&mesh, SAMPLES_PER_M2, 4);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, sample_mesh(&mesh, SAMPLES_PER_M2, 4));
        assert!(a.iter().all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y) && p.z == 0.0));
    }

    proptest! {
        #[test]
        fn log_transform_properties(t in -1.0f64..1.0, u in -1.0f64..1.0) {
            prop_assert_eq!(log_transform(-t), -log_transform(t));
            prop_assert!(log_transform(t).abs() <= t.abs());
            if t < u {
                prop_assert!(log_transform(t) < log_transform(u));
            }
        }

        #[test]
        fn swap_symmetry(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(&mut rng, 50);
            let b = random_points(&mut rng, 80);
            let ab = metrics_3d(&a, &b, 0.2).unwrap();
            let ba = metrics_3d(&b, &a, 0.2).unwrap();
            prop_assert_eq!(ab.acc_m, ba.comp_m);
            prop_assert_eq!(ab.prec, ba.recall);
            prop_assert_eq!(ab.fscore, ba.fscore);
        }

        #[test]
        fn losses_nonnegative(p in 0.01f64..0.99, g in prop::bool::ANY, t in -1.0f64..1.0, s in -1.0f64..1.0) {
            let g = if g { 1.0 } else { 0.0 };
            prop_assert!(loss_occupancy(&[p], &[g]).unwrap().0 >= 0.0);
            let (l, _) = loss_tsdf(&[t], &[s]).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, t == s);
        }
    }
}
