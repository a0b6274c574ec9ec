//! Sparse geometry priors from a feature-based SLAM front end: projected
//! sparse depth, per-point reprojection error, and the derived confidence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{DepthMap, MISSING};

/// Sparse depths deeper than this are dropped (meters).
pub const MAX_PRIOR_DEPTH: f64 = 3.0;

/// Default confidence decay per pixel of reprojection error.
pub const DEFAULT_CONFIDENCE_DECAY: f64 = 1.0;

/// Sparse depth map; missing pixels hold [`MISSING`].
pub type SparseDepthMap = DepthMap;

/// Reprojection error map (pixels), defined where the depth is present.
pub type ErrorMap = DepthMap;

/// Per-pixel confidence in `(0, 1]` where depth is present, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ConfidenceMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Two-channel prior (sparse depth, confidence) plus the error map it came
/// from, which the explicit view weights also read.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryPrior {
    pub depth: SparseDepthMap,
    pub error: ErrorMap,
    pub confidence: ConfidenceMap,
}

impl GeometryPrior {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            depth: DepthMap::missing(width, height),
            error: DepthMap::missing(width, height),
            confidence: ConfidenceMap {
                width,
                height,
                data: vec![0.0; width * height],
            },
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    pub fn support(&self) -> usize {
        self.depth.count_present()
    }
}

/// `exp(-decay * E)` where the error is defined, 0 elsewhere.
pub fn confidence_from_error(error: &ErrorMap, decay: f64) -> Result<ConfidenceMap> {
    if !(decay > 0.0) || !decay.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "confidence decay must be positive, got {decay}"
        )));
    }
    Ok(ConfidenceMap {
        width: error.width,
        height: error.height,
        data: error
            .data
            .iter()
            .map(|&e| if e >= 0.0 { (-decay * e).exp() } else { 0.0 })
            .collect(),
    })
}

/// Assembles a prior, dropping depths beyond [`MAX_PRIOR_DEPTH`].
pub fn make_prior(depth: &SparseDepthMap, error: &ErrorMap, decay: f64) -> Result<GeometryPrior> {
    if depth.width != error.width || depth.height != error.height {
        return Err(Error::SupportMismatch);
    }
    if depth
        .data
        .iter()
        .zip(&error.data)
        .any(|(d, e)| (*d >= 0.0) != (*e >= 0.0))
    {
        return Err(Error::SupportMismatch);
    }
    let mut depth = depth.clone();
    let mut error = error.clone();
    for (d, e) in depth.data.iter_mut().zip(error.data.iter_mut()) {
        if *d > MAX_PRIOR_DEPTH || *d == 0.0 {
            *d = MISSING;
            *e = MISSING;
        }
    }
    let confidence = confidence_from_error(&error, decay)?;
    Ok(GeometryPrior {
        depth,
        error,
        confidence,
    })
}

/// Samples `n_points` pixels with valid ground-truth depth and perturbs them
/// the way a SLAM map would: Gaussian depth noise, and reprojection errors
/// whose ranks follow the magnitude of the injected depth error.
pub fn simulate_slam_priors(
    gt_depth: &DepthMap,
    n_points: usize,
    depth_noise_sigma: f64,
    error_scale: f64,
    seed: u64,
) -> Result<(SparseDepthMap, ErrorMap)> {
    if depth_noise_sigma < 0.0 || error_scale < 0.0 {
        return Err(Error::InvalidParameter("noise scales must be non-negative".into()));
    }
    let valid: Vec<usize> = gt_depth
        .data
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, _)| i)
        .collect();
    if n_points > valid.len() {
        return Err(Error::TooManyPoints {
            requested: n_points,
            available: valid.len(),
        });
    }
    let (w, h) = (gt_depth.width, gt_depth.height);
    let mut depth = DepthMap::missing(w, h);
    let mut error = DepthMap::missing(w, h);
    if n_points == 0 {
        return Ok((depth, error));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, valid.len(), n_points)
        .into_iter()
        .map(|i| valid[i])
        .collect();
    picked.sort_unstable();

    let depth_noise = gaussian(depth_noise_sigma);
    let err_noise = gaussian(error_scale);
    let noise: Vec<f64> = picked.iter().map(|_| depth_noise(&mut rng)).collect();
    let mut errors: Vec<f64> = picked.iter().map(|_| err_noise(&mut rng).abs()).collect();
    errors.sort_by(f64::total_cmp);

    // rank points by |injected noise|; the k-th smallest gets the k-th smallest error
    let mut order: Vec<usize> = (0..picked.len()).collect();
    order.sort_by(|&a, &b| noise[a].abs().total_cmp(&noise[b].abs()));

    for (rank, &i) in order.iter().enumerate() {
        let p = picked[i];
        let d = (gt_depth.data[p] + noise[i]).max(1e-6);
        depth.data[p] = d;
        error.data[p] = errors[rank];
    }
    Ok((depth, error))
}

fn gaussian(sigma: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    let dist = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    move |rng| dist.as_ref().map_or(0.0, |d| d.sample(rng))
}

/// Writes the text prior format: `# width height`, then `u v depth error`
/// for every present pixel.
pub fn write_prior_file(path: &Path, depth: &SparseDepthMap, error: &ErrorMap) -> Result<()> {
    let mut out = format!("# {} {}\n", depth.width, depth.height);
    for (x, y) in depth.present_pixels() {
        let e = error.get(x, y).unwrap_or(0.0);
        writeln!(out, "{x} {y} {:.9} {:.9}", depth.raw(x, y), e).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_prior_file(path: &Path) -> Result<(SparseDepthMap, ErrorMap)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (width, height) = loop {
        let Some((_, line)) = lines.next() else {
            return Err(Error::parse(path, "missing '# width height' header"));
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(path, "missing '# width height' header"))?;
        let dims: Vec<usize> = rest
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("header: {e}")))?;
        if dims.len() != 2 {
            return Err(Error::parse(path, "header must be '# width height'"));
        }
        break (dims[0], dims[1]);
    };
    let mut depth = DepthMap::missing(width, height);
    let mut error = DepthMap::missing(width, height);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        if vals.len() != 4 {
            return Err(Error::parse(path, format!("line {}: expected 'u v depth error'", i + 1)));
        }
        let (x, y) = (vals[0].round(), vals[1].round());
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            return Err(Error::parse(path, format!("line {}: pixel outside image", i + 1)));
        }
        if !(vals[2] > 0.0) || vals[3] < 0.0 {
            return Err(Error::parse(
                path,
                format!("line {}: depth must be > 0 and error >= 0", i + 1),
            ));
        }
        depth.set(x as usize, y as usize, vals[2]);
        error.set(x as usize, y as usize, vals[3]);
    }
    Ok((depth, error))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn error_map(vals: &[f64]) -> ErrorMap {
        DepthMap {
            width: vals.len(),
            height: 1,
            data: vals.to_vec(),
        }
    }

    #[test]
    fn confidence_examples() {
        let e = error_map(&[0.0, 2f64.ln(), MISSING]);
        let c = confidence_from_error(&e, 1.0).unwrap();
        assert_eq!(c.data[0], 1.0);
        assert_eq!(c.data[1], 0.5);
        assert_eq!(c.data[2], 0.0);
        assert!(confidence_from_error(&e, 0.0).is_err());
        assert!(confidence_from_error(&e, -1.0).is_err());
    }

    #[test]
    fn confidence_strictly_decreasing_in_error() {
        let errs: Vec<f64> = (0..50).map(|i| i as f64 * 0.3).collect();
        let c = confidence_from_error(&error_map(&errs), 0.7).unwrap();
        for w in c.data.windows(2) {
            assert!(w[0] > w[1]);
            assert!(w[1] > 0.0 && w[0] <= 1.0);
        }
    }

    #[test]
    fn make_prior_filters_deep_points() {
        let sd = error_map(&[1.0, 3.0, 3.5, MISSING]);
        let e = error_map(&[0.1, 0.2, 0.3, MISSING]);
        let g = make_prior(&sd, &e, 1.0).unwrap();
        assert_eq!(g.depth.data, vec![1.0, 3.0, MISSING, MISSING]);
        assert_eq!(g.error.data[2], MISSING);
        assert_eq!(g.confidence.data[2], 0.0);
        assert_eq!(g.confidence.data[3], 0.0);
        assert!(g.confidence.data[0] > 0.0);
        assert!(g.support() <= sd.count_present());

        let empty = DepthMap::missing(4, 4);
        let g = make_prior(&empty, &empty, 1.0).unwrap();
        assert_eq!(g.support(), 0);

        let bad_e = error_map(&[0.1, MISSING, 0.3, MISSING]);
        assert!(matches!(make_prior(&sd, &bad_e, 1.0), Err(Error::SupportMismatch)));
    }

    fn gt() -> DepthMap {
        DepthMap::from_fn(16, 12, |x, y| if x == 0 { MISSING } else { 1.0 + 0.01 * (x + y) as f64 })
    }

    #[test]
    fn noiseless_simulation_is_exact() {
        let g = gt();
        let (sd, e) = simulate_slam_priors(&g, 40, 0.0, 0.0, 1).unwrap();
        assert_eq!(sd.count_present(), 40);
        for (x, y) in sd.present_pixels() {
            assert_eq!(sd.raw(x, y), g.raw(x, y));
            assert_eq!(e.raw(x, y), 0.0);
        }
    }

    #[test]
    fn simulation_edge_cases() {
        let g = gt();
        let (sd, e) = simulate_slam_priors(&g, 0, 0.01, 1.0, 1).unwrap();
        assert_eq!(sd.count_present() + e.count_present(), 0);
        assert!(matches!(
            simulate_slam_priors(&g, 16 * 12, 0.0, 0.0, 1),
            Err(Error::TooManyPoints { available: 180, .. })
        ));
        let a = simulate_slam_priors(&g, 50, 0.01, 1.0, 42).unwrap();
        let b = simulate_slam_priors(&g, 50, 0.01, 1.0, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulated_error_tracks_depth_noise_rank() {
        let g = gt();
        let (sd, e) = simulate_slam_priors(&g, 100, 0.05, 2.0, 9).unwrap();
        let mut pairs: Vec<(f64, f64)> = sd
            .present_pixels()
            .into_iter()
            .map(|(x, y)| ((sd.raw(x, y) - g.raw(x, y)).abs(), e.raw(x, y)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn prior_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let (sd, e) = simulate_slam_priors(&gt(), 25, 0.01, 1.0, 3).unwrap();
        write_prior_file(&path, &sd, &e).unwrap();
        let (sd2, e2) = read_prior_file(&path).unwrap();
        assert_eq!(sd2.present_pixels(), sd.present_pixels());
        for (x, y) in sd.present_pixels() {
            assert!((sd2.raw(x, y) - sd.raw(x, y)).abs() < 1e-8);
            assert!((e2.raw(x, y) - e.raw(x, y)).abs() < 1e-8);
        }
        fs::write(&path, "1 2 3 4\n").unwrap();
        assert!(read_prior_file(&path).is_err());
    }
}
