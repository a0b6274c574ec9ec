//! Local fusion of the N views of a fragment into one feature per voxel.
//!
//! Each voxel sees a stack of per-view features (color + geometry). A single
//! attention head mixes the views; the value rows are scaled by explicit
//! per-view weights derived from how well the voxel's projected depth agrees
//! with the sparse SLAM depth at its pixel. The N output tokens are reduced
//! by a mean over visible views and passed through a feed-forward layer.

use rayon::prelude::*;

use crate::encode::{view_channels, ViewSample, COLOR_CHANNELS};
use crate::error::{Error, Result};
use crate::geom::{project, Intrinsics, PixelCoord, Pose};
use crate::image::DepthMap;
use crate::nn::{leaky_relu, Initializer, Linear, WeightStore};
use crate::priors::{ErrorMap, GeometryPrior, SparseDepthMap};
use crate::volume::{GridSpec, SparseVolume, VoxelKey, NUM_LEVELS};

/// Default number of frames per fragment.
pub const DEFAULT_FRAGMENT_SIZE: usize = 9;

/// Width of the Gaussian on the sparse-depth gap:
/// `sigma = sigma_base * (1 + E / error_ref)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExplicitWeightParams {
    /// Meters.
    pub sigma_base: f64,
    /// Pixels.
    pub error_ref: f64,
}

impl Default for ExplicitWeightParams {
    fn default() -> Self {
        Self {
            sigma_base: 0.04,
            error_ref: 2.0,
        }
    }
}

impl ExplicitWeightParams {
    #[inline]
    pub fn sigma(&self, error: f64) -> f64 {
        self.sigma_base * (1.0 + error / self.error_ref)
    }
}

/// Weight of a view for a voxel projecting to `px` at depth `d`.
///
/// 1 when the nearest pixel carries no sparse depth; otherwise an
/// unnormalized Gaussian of the gap between sparse depth and `d`.
pub fn explicit_weight(
    depth: &SparseDepthMap,
    error: &ErrorMap,
    px: PixelCoord,
    d: f64,
    params: &ExplicitWeightParams,
) -> f64 {
    let Some((x, y)) = px.nearest(depth.width, depth.height) else {
        return 1.0;
    };
    let Some(sd) = depth.get(x, y) else {
        return 1.0;
    };
    let e = error.get(x, y).unwrap_or(0.0);
    let sigma = params.sigma(e);
    let gap = sd - d;
    (-(gap * gap) / (2.0 * sigma * sigma)).exp()
}

/// Per-key explicit weights over the views of a fragment; invisible views
/// get 0.
pub fn explicit_weights_for_fragment(
    keys: &[VoxelKey],
    priors: &[GeometryPrior],
    cameras: &[(Intrinsics, Pose)],
    spec: &GridSpec,
    params: &ExplicitWeightParams,
) -> Result<Vec<Vec<f64>>> {
    if priors.len() != cameras.len() {
        return Err(Error::Shape(format!(
            "{} priors for {} cameras",
            priors.len(),
            cameras.len()
        )));
    }
    Ok(keys
        .par_iter()
        .map(|key| {
            let c = spec.key_center(*key);
            cameras
                .iter()
                .zip(priors)
                .map(|((k, pose), prior)| match project(k, pose, &c) {
                    Some((px, d)) => explicit_weight(&prior.depth, &prior.error, px, d, params),
                    None => 0.0,
                })
                .collect()
        })
        .collect())
}

/// The N per-view observations of one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewStack {
    pub channels: usize,
    /// Row-major `N x channels`; rows of invisible views are zero.
    pub features: Vec<f32>,
    pub mask: Vec<bool>,
    /// Explicit weights in `[0, 1]`, 0 for invisible views.
    pub weights: Vec<f64>,
}

impl ViewStack {
    pub fn new(channels: usize, features: Vec<f32>, mask: Vec<bool>, weights: Vec<f64>) -> Result<Self> {
        let n = mask.len();
        if n == 0 || features.len() != n * channels || weights.len() != n {
            return Err(Error::Shape(format!(
                "view stack: {} features, {} mask, {} weights for C={channels}",
                features.len(),
                n,
                weights.len()
            )));
        }
        Ok(Self {
            channels,
            features,
            mask,
            weights,
        })
    }

    pub fn from_samples(samples: &[&ViewSample], weights: Vec<f64>) -> Result<Self> {
        let channels = samples.first().map_or(0, |s| s.feature.len());
        let mut features = Vec::with_capacity(samples.len() * channels);
        let mut mask = Vec::with_capacity(samples.len());
        for s in samples {
            features.extend_from_slice(&s.feature);
            mask.push(s.visible);
        }
        Self::new(channels, features, mask, weights)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f32] {
        &self.features[t * self.channels..(t + 1) * self.channels]
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Cross-view attention with explicit spatial weights.
    #[default]
    Attention,
    /// Plain mean of visible view features (ablation baseline).
    Averaging,
}

/// Attention and feed-forward parameters for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub ff: Linear,
}

impl AttnParams {
    pub fn new(channels: usize, out_channels: usize, init: &mut Initializer) -> Self {
        let mut proj = || {
            let mut l = Linear::new(channels, channels, init);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
            l
        };
        let (w_q, w_k, w_v) = (proj(), proj(), proj());
        Self {
            w_q,
            w_k,
            w_v,
            ff: Linear::new(channels, out_channels, init),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.in_dim
    }

    pub fn out_channels(&self) -> usize {
        self.ff.out_dim
    }

    fn export(&self, name: &str, store: &mut WeightStore) {
        self.w_q.export(&format!("{name}.q"), store);
        self.w_k.export(&format!("{name}.k"), store);
        self.w_v.export(&format!("{name}.v"), store);
        self.ff.export(&format!("{name}.ff"), store);
    }

    fn import(&mut self, name: &str, store: &WeightStore) -> Result<()> {
        self.w_q.import(&format!("{name}.q"), store)?;
        self.w_k.import(&format!("{name}.k"), store)?;
        self.w_v.import(&format!("{name}.v"), store)?;
        self.ff.import(&format!("{name}.ff"), store)
    }

    /// `leaky_relu(ff(x))`.
    pub fn feed_forward(&self, x: &[f64]) -> Vec<f32> {
        self.ff
            .forward_f64(x)
            .into_iter()
            .map(|v| leaky_relu(v as f32))
            .collect()
    }
}

/// Intermediate results of fusing one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Indices of visible views, in stack order.
    pub visible: Vec<usize>,
    /// Implicit attention, `|visible| x |visible|` row-major; each row sums to 1.
    /// Empty in averaging mode.
    pub implicit: Vec<f64>,
    /// Reduced feature before the feed-forward layer.
    pub pre_ff: Vec<f64>,
    pub fused: Vec<f32>,
}

/// Single-head masked attention over the views of one voxel.
pub fn cross_modal_attention(stack: &ViewStack, params: &AttnParams) -> Result<AttentionOutput> {
    fuse_stack(stack, params, FusionMode::Attention)
}

pub fn fuse_stack(stack: &ViewStack, params: &AttnParams, mode: FusionMode) -> Result<AttentionOutput> {
    let c = stack.channels;
    if c != params.channels() {
        return Err(Error::ChannelMismatch {
            expected: params.channels(),
            actual: c,
        });
    }
    let visible: Vec<usize> = (0..stack.len()).filter(|&t| stack.mask[t]).collect();
    if visible.is_empty() {
        return Err(Error::NoVisibleViews);
    }
    let n = visible.len();
    let rows: Vec<Vec<f64>> = visible
        .iter()
        .map(|&t| stack.row(t).iter().map(|v| *v as f64).collect())
        .collect();

    let (implicit, pre_ff) = match mode {
        FusionMode::Averaging => {
            let mut mean = vec![0.0; c];
            for r in &rows {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            (Vec::new(), mean)
        }
        FusionMode::Attention => {
            let q: Vec<Vec<f64>> = rows.iter().map(|r| params.w_q.forward_f64(r)).collect();
            let k: Vec<Vec<f64>> = rows.iter().map(|r| params.w_k.forward_f64(r)).collect();
            let v: Vec<Vec<f64>> = rows.iter().map(|r| params.w_v.forward_f64(r)).collect();
            let scale = 1.0 / (c as f64).sqrt();
            let mut implicit = vec![0.0; n * n];
            for i in 0..n {
                let row = &mut implicit[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot64(&q[i], &k[j]) * scale;
                }
                softmax_in_place(row);
            }
            // A_out = implicit * diag(w_ex) * V, then mean over the n rows
            let mut pre_ff = vec![0.0; c];
            for i in 0..n {
                for j in 0..n {
                    let w = implicit[i * n + j] * stack.weights[visible[j]];
                    for (o, vj) in pre_ff.iter_mut().zip(&v[j]) {
                        *o += w * vj;
                    }
                }
            }
            pre_ff.iter_mut().for_each(|o| *o /= n as f64);
            (implicit, pre_ff)
        }
    };
    let fused = params.feed_forward(&pre_ff);
    Ok(AttentionOutput {
        visible,
        implicit,
        pre_ff,
        fused,
    })
}

#[inline]
fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in row.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in row.iter_mut() {
        *s /= sum;
    }
}

/// Fuses precomputed stacks; keys without visible views are dropped.
pub fn fuse_fragment(
    level: u8,
    keys: &[VoxelKey],
    stacks: &[ViewStack],
    params: &AttnParams,
    mode: FusionMode,
) -> Result<SparseVolume<Vec<f32>>> {
    if keys.is_empty() {
        return Err(Error::EmptyFragment);
    }
    if keys.len() != stacks.len() {
        return Err(Error::Shape(format!("{} keys, {} stacks", keys.len(), stacks.len())));
    }
    let fused: Vec<Option<Vec<f32>>> = stacks
        .par_iter()
        .map(|s| match fuse_stack(s, params, mode) {
            Ok(out) => Ok(Some(out.fused)),
            Err(Error::NoVisibleViews) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    SparseVolume::from_entries(
        level,
        keys.iter()
            .zip(fused)
            .filter_map(|(k, f)| f.map(|f| (*k, f))),
    )
}

/// Fuses directly from per-view back-projections (`views[t][i]` is view
/// `t` observing `keys[i]`), computing explicit weights from `priors`.
pub fn fuse_views(
    level: u8,
    keys: &[VoxelKey],
    views: &[Vec<ViewSample>],
    priors: &[&GeometryPrior],
    params: &AttnParams,
    weight_params: &ExplicitWeightParams,
    mode: FusionMode,
) -> Result<SparseVolume<Vec<f32>>> {
    if keys.is_empty() {
        return Err(Error::EmptyFragment);
    }
    if views.len() != priors.len() || views.iter().any(|v| v.len() != keys.len()) {
        return Err(Error::Shape("views, priors and keys disagree".into()));
    }
    let fused: Vec<Option<Vec<f32>>> = (0..keys.len())
        .into_par_iter()
        .map(|i| {
            let samples: Vec<&ViewSample> = views.iter().map(|v| &v[i]).collect();
            if !samples.iter().any(|s| s.visible) {
                return Ok(None);
            }
            let weights = samples
                .iter()
                .zip(priors)
                .map(|(s, p)| {
                    if s.visible {
                        explicit_weight(&p.depth, &p.error, s.pixel, s.depth, weight_params)
                    } else {
                        0.0
                    }
                })
                .collect();
            let stack = ViewStack::from_samples(&samples, weights)?;
            Ok(Some(fuse_stack(&stack, params, mode)?.fused))
        })
        .collect::<Result<_>>()?;
    SparseVolume::from_entries(
        level,
        keys.iter()
            .zip(fused)
            .filter_map(|(k, f)| f.map(|f| (*k, f))),
    )
}

/// Attention parameters for every level.
#[derive(Debug, Clone, PartialEq)]
pub struct LstfParams {
    pub levels: [AttnParams; NUM_LEVELS],
}

impl LstfParams {
    pub fn new(init: &mut Initializer) -> Self {
        let levels = std::array::from_fn(|l| {
            AttnParams::new(view_channels(l as u8), COLOR_CHANNELS[l], init)
        });
        Self { levels }
    }

    pub fn export(&self, store: &mut WeightStore) {
        for (l, p) in self.levels.iter().enumerate() {
            p.export(&format!("lstf.{l}"), store);
        }
    }

    pub fn import(&mut self, store: &WeightStore) -> Result<()> {
        for (l, p) in self.levels.iter_mut().enumerate() {
            p.import(&format!("lstf.{l}"), store)?;
        }
        Ok(())
    }
}

/// Nearest-pixel read helper shared with tests.
pub fn sparse_depth_at(depth: &DepthMap, px: PixelCoord) -> Option<f64> {
    px.nearest(depth.width, depth.height)
        .and_then(|(x, y)| depth.get(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::MISSING;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps_with(sd: f64, e: f64) -> (DepthMap, DepthMap) {
        let mut d = DepthMap::missing(8, 8);
        let mut er = DepthMap::missing(8, 8);
        d.set(3, 4, sd);
        er.set(3, 4, e);
        (d, er)
    }

    #[test]
    fn explicit_weight_branches() {
        let p = ExplicitWeightParams::default();
        let (d, e) = maps_with(1.5, 0.0);
        assert_eq!(explicit_weight(&d, &e, PixelCoord::new(0.0, 0.0), 1.0, &p), 1.0);
        assert_eq!(explicit_weight(&d, &e, PixelCoord::new(3.2, 3.9), 1.5, &p), 1.0);
        let w = explicit_weight(&d, &e, PixelCoord::new(3.0, 4.0), 1.5 - p.sigma(0.0), &p);
        assert!((w - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn explicit_weight_monotonicity() {
        let p = ExplicitWeightParams::default();
        let (d, e) = maps_with(2.0, 1.0);
        let px = PixelCoord::new(3.0, 4.0);
        let ws: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|g| explicit_weight(&d, &e, px, 2.0 + g, &p))
            .collect();
        assert!(ws[0] > ws[1] && ws[1] > ws[2]);
        assert!(ws.iter().all(|w| *w > 0.0 && *w <= 1.0));

        let lo = maps_with(2.0, 0.5);
        let hi = maps_with(2.0, 4.0);
        assert!(
            explicit_weight(&hi.0, &hi.1, px, 2.1, &p) > explicit_weight(&lo.0, &lo.1, px, 2.1, &p)
        );
    }

    fn random_stack(rng: &mut ChaCha8Rng, n: usize, c: usize) -> ViewStack {
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[rng.random_range(0..n)] = true;
        let mut features = vec![0.0f32; n * c];
        let mut weights = vec![0.0; n];
        for t in 0..n {
            if mask[t] {
                for v in &mut features[t * c..(t + 1) * c] {
                    *v = rng.random_range(-1.0..1.0);
                }
                weights[t] = rng.random_range(0.05..1.0);
            }
        }
        ViewStack::new(c, features, mask, weights).unwrap()
    }

    #[test]
    fn single_view_reduces_to_value_projection() {
        let params = AttnParams::new(6, 4, &mut Initializer::new(1));
        let f = vec![0.3f32, -0.2, 0.5, 0.1, 0.0, 0.9];
        let stack = ViewStack::new(6, f.clone(), vec![true], vec![1.0]).unwrap();
        let out = cross_modal_attention(&stack, &params).unwrap();
        assert_eq!(out.implicit, vec![1.0]);
        let v = params.w_v.forward_f64(&f.iter().map(|x| *x as f64).collect::<Vec<_>>());
        for (a, b) in out.pre_ff.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.fused, params.feed_forward(&v));
    }

    #[test]
    fn identical_views_match_single_view() {
        let params = AttnParams::new(5, 3, &mut Initializer::new(2));
        let f = vec![0.1f32, 0.2, -0.3, 0.4, -0.5];
        let one = ViewStack::new(5, f.clone(), vec![true], vec![1.0]).unwrap();
        let many = ViewStack::new(5, f.repeat(9), vec![true; 9], vec![1.0; 9]).unwrap();
        let a = cross_modal_attention(&one, &params).unwrap();
        let b = cross_modal_attention(&many, &params).unwrap();
        for (x, y) in a.pre_ff.iter().zip(&b.pre_ff) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.fused.iter().zip(&b.fused) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn averaging_mode_is_plain_mean() {
        let params = AttnParams::new(4, 2, &mut Initializer::new(3));
        let features = vec![1.0f32, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0, 3.0, 4.0, 5.0, 6.0];
        let stack = ViewStack::new(4, features, vec![true, false, true], vec![0.2, 0.0, 0.9]).unwrap();
        let out = fuse_stack(&stack, &params, FusionMode::Averaging).unwrap();
        assert_eq!(out.pre_ff, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn all_invisible_is_an_error_and_dropped_from_fragment() {
        let params = AttnParams::new(3, 2, &mut Initializer::new(4));
        let dead = ViewStack::new(3, vec![0.0; 6], vec![false, false], vec![0.0, 0.0]).unwrap();
        assert!(matches!(cross_modal_attention(&dead, &params), Err(Error::NoVisibleViews)));
        let live = ViewStack::new(3, vec![1.0; 6], vec![true, false], vec![1.0, 0.0]).unwrap();
        let keys = [VoxelKey::new(1, 0, 0, 0), VoxelKey::new(1, 1, 0, 0)];
        let vol = fuse_fragment(1, &keys, &[dead, live], &params, FusionMode::Attention).unwrap();
        assert_eq!(vol.len(), 1);
        assert!(vol.contains(&keys[1]));
        assert!(matches!(
            fuse_fragment(1, &[], &[], &params, FusionMode::Attention),
            Err(Error::EmptyFragment)
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = AttnParams::new(24, 24, &mut Initializer::new(8));
        for _ in 0..20 {
            let s = random_stack(&mut rng, 9, 24);
            let out = cross_modal_attention(&s, &params).unwrap();
            let n = out.visible.len();
            for i in 0..n {
                let sum: f64 = out.implicit[i * n..(i + 1) * n].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            let mut perm: Vec<usize> = (0..9).collect();
            perm.reverse();
            perm.swap(0, 4);
            let shuffled = ViewStack::new(
                24,
                perm.iter().flat_map(|&t| s.row(t).to_vec()).collect(),
                perm.iter().map(|&t| s.mask[t]).collect(),
                perm.iter().map(|&t| s.weights[t]).collect(),
            )
            .unwrap();
            let out2 = cross_modal_attention(&shuffled, &params).unwrap();
            for (a, b) in out.fused.iter().zip(&out2.fused) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn explicit_weights_for_fragment_cases() {
        let spec = GridSpec::default();
        let k = Intrinsics::new(20.0, 20.0, 10.0, 10.0, 20, 20).unwrap();
        let cams = vec![(k, Pose::identity()); 2];
        let key = VoxelKey::new(2, 0, 0, 30);
        let behind = VoxelKey::new(2, 0, 0, -30);
        let empty = GeometryPrior::empty(20, 20);
        let p = ExplicitWeightParams::default();
        let w = explicit_weights_for_fragment(&[key, behind], &[empty.clone(), empty.clone()], &cams, &spec, &p)
            .unwrap();
        assert_eq!(w[0], vec![1.0, 1.0]);
        assert_eq!(w[1], vec![0.0, 0.0]);

        // a sparse point exactly at the voxel's projected pixel and depth
        let (px, d) = project(&k, &Pose::identity(), &spec.key_center(key)).unwrap();
        let (x, y) = px.nearest(20, 20).unwrap();
        let mut hit = GeometryPrior::empty(20, 20);
        hit.depth.set(x, y, d);
        hit.error.set(x, y, 0.7);
        let w = explicit_weights_for_fragment(&[key], &[hit.clone(), empty], &cams, &spec, &p).unwrap();
        assert_eq!(w[0], vec![1.0, 1.0]);
        assert_eq!(sparse_depth_at(&hit.depth, px), Some(d));
        assert_eq!(hit.depth.raw(0, 0), MISSING);
    }
}
