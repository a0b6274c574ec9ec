//! Global fusion: a sparse convolutional GRU that folds each fragment's
//! feature volume into a persistent hidden-state volume, per-voxel heads that
//! read occupancy and TSDF off the hidden state, and the coarse-to-fine loop
//! in which each level's occupancy decides where the next level is evaluated.
//!
//! Also hosts the classical weighted-average TSDF integration used as the
//! geometric oracle path.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::encode::COLOR_CHANNELS;
use crate::error::{Error, Result};
use crate::geom::{project, Intrinsics, Pose};
use crate::image::DepthMap;
use crate::nn::{leaky_relu, sigmoid, Initializer, Linear, WeightStore};
use crate::volume::{
    allocate_fragment_keys, merge_local_into_global, upsample_occupied, GridSpec, MergePolicy,
    SparseVolume, TsdfVoxel, VoxelKey, NUM_LEVELS,
};

/// Default occupancy threshold for coarse-to-fine sparsification.
pub const DEFAULT_OCCUPANCY_THRESHOLD: f32 = 0.5;
/// TSDF truncation distance (meters).
pub const DEFAULT_TRUNCATION: f64 = 0.12;

const NEIGHBORS: usize = 27;
const ABSENT: u32 = u32::MAX;

#[inline]
fn tap_index(dx: i32, dy: i32, dz: i32) -> usize {
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

/// Sorted active keys with precomputed 3x3x3 neighbor indices.
#[derive(Debug, Clone)]
pub struct ActiveSet {
    keys: Vec<VoxelKey>,
    neighbors: Vec<[u32; NEIGHBORS]>,
}

impl ActiveSet {
    pub fn new(mut keys: Vec<VoxelKey>) -> Self {
        keys.sort_unstable();
        keys.dedup();
        let index: crate::volume::KeyMap<u32> =
            keys.iter().enumerate().map(|(i, k)| (*k, i as u32)).collect();
        let neighbors = keys
            .par_iter()
            .map(|k| {
                let mut nb = [ABSENT; NEIGHBORS];
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            if let Some(&i) = index.get(&k.offset(dx, dy, dz)) {
                                nb[tap_index(dx, dy, dz)] = i;
                            }
                        }
                    }
                }
                nb
            })
            .collect();
        Self { keys, neighbors }
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Dense `n x channels` rows aligned with an [`ActiveSet`].
fn gather<V: AsRef<[f32]>>(vol: &SparseVolume<V>, set: &ActiveSet, channels: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; set.len() * channels];
    for (i, k) in set.keys().iter().enumerate() {
        if let Some(v) = vol.get(k) {
            let v = v.as_ref();
            if v.len() != channels {
                return Err(Error::ChannelMismatch {
                    expected: channels,
                    actual: v.len(),
                });
            }
            out[i * channels..(i + 1) * channels].copy_from_slice(v);
        }
    }
    Ok(out)
}

fn scatter(level: u8, set: &ActiveSet, rows: &[f32], channels: usize) -> SparseVolume<Vec<f32>> {
    let mut vol = SparseVolume::with_capacity(level, set.len());
    for (i, k) in set.keys().iter().enumerate() {
        vol.insert(*k, rows[i * channels..(i + 1) * channels].to_vec())
            .expect("active set keys share a level");
    }
    vol
}

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Submanifold 3x3x3 sparse convolution. Weights are `[tap][out][in]`,
/// tap index `(dx+1)*9 + (dy+1)*3 + (dz+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConv3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl SparseConv3d {
    pub fn new(in_ch: usize, out_ch: usize, init: &mut Initializer) -> Self {
        let fan_in = NEIGHBORS * in_ch;
        Self {
            in_ch,
            out_ch,
            weight: init.uniform(NEIGHBORS * in_ch * out_ch, fan_in),
            bias: init.uniform(out_ch, fan_in),
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![0.0; NEIGHBORS * in_ch * out_ch],
            bias: vec![0.0; out_ch],
        }
    }

    /// Center tap is the identity, everything else zero.
    pub fn identity(channels: usize) -> Self {
        let mut c = Self::zeros(channels, channels);
        let center = tap_index(0, 0, 0);
        for i in 0..channels {
            c.weight[(center * channels + i) * channels + i] = 1.0;
        }
        c
    }

    #[inline]
    pub fn tap_mut(&mut self, dx: i32, dy: i32, dz: i32) -> &mut [f32] {
        let n = self.in_ch * self.out_ch;
        let t = tap_index(dx, dy, dz);
        &mut self.weight[t * n..(t + 1) * n]
    }

    /// Applies the convolution to dense rows over `set`.
    pub fn apply(&self, set: &ActiveSet, input: &[f32]) -> Vec<f32> {
        let (ic, oc) = (self.in_ch, self.out_ch);
        assert_eq!(input.len(), set.len() * ic, "sparse conv input rows");
        let mut out = vec![0f32; set.len() * oc];
        out.par_chunks_mut(oc)
            .zip(set.neighbors.par_iter())
            .for_each(|(acc, nb)| {
                acc.copy_from_slice(&self.bias);
                for (t, &j) in nb.iter().enumerate() {
                    if j == ABSENT {
                        continue;
                    }
                    let x = &input[j as usize * ic..(j as usize + 1) * ic];
                    let w = &self.weight[t * oc * ic..(t + 1) * oc * ic];
                    for (o, a) in acc.iter_mut().enumerate() {
                        *a += dot8(&w[o * ic..(o + 1) * ic], x);
                    }
                }
            });
        out
    }

    fn export(&self, name: &str, store: &mut WeightStore) {
        store.put(
            format!("{name}.weight"),
            vec![NEIGHBORS, self.out_ch, self.in_ch],
            self.weight.clone(),
        );
        store.put(format!("{name}.bias"), vec![self.out_ch], self.bias.clone());
    }

    fn import(&mut self, name: &str, store: &WeightStore) -> Result<()> {
        self.weight = store.take(&format!("{name}.weight"), &[NEIGHBORS, self.out_ch, self.in_ch])?;
        self.bias = store.take(&format!("{name}.bias"), &[self.out_ch])?;
        Ok(())
    }
}

/// Submanifold sparse convolution of a feature volume; the active set of the
/// output equals that of the input.
pub fn sparse_conv3d(vol: &SparseVolume<Vec<f32>>, conv: &SparseConv3d) -> Result<SparseVolume<Vec<f32>>> {
    let set = ActiveSet::new(vol.keys().copied().collect());
    let input = gather(vol, &set, conv.in_ch)?;
    Ok(scatter(vol.level(), &set, &conv.apply(&set, &input), conv.out_ch))
}

/// Two-layer per-voxel head: `C -> C/2 -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    pub fn new(channels: usize, init: &mut Initializer) -> Self {
        let mid = (channels / 2).max(1);
        let mut out = Linear::new(mid, 1, init);
        // untrained heads start centered on sigmoid/tanh zero
        out.bias[0] = 0.0;
        Self {
            hidden: Linear::new(channels, mid, init),
            out,
        }
    }

    /// Pre-activation scalar.
    pub fn logit(&self, h: &[f32]) -> f32 {
        let mid: Vec<f32> = self.hidden.forward(h).into_iter().map(leaky_relu).collect();
        self.out.forward(&mid)[0]
    }

    fn export(&self, name: &str, store: &mut WeightStore) {
        self.hidden.export(&format!("{name}.0"), store);
        self.out.export(&format!("{name}.1"), store);
    }

    fn import(&mut self, name: &str, store: &WeightStore) -> Result<()> {
        self.hidden.import(&format!("{name}.0"), store)?;
        self.out.import(&format!("{name}.1"), store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub occupancy: Head,
    pub tsdf: Head,
}

/// Recurrent unit and heads for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub channels: usize,
    /// Two conv + leaky-ReLU blocks producing the surface feature.
    pub input: [SparseConv3d; 2],
    pub update_gate: SparseConv3d,
    pub reset_gate: SparseConv3d,
    pub candidate: SparseConv3d,
    pub heads: Heads,
}

impl LevelParams {
    pub fn new(channels: usize, init: &mut Initializer) -> Self {
        Self {
            channels,
            input: [
                SparseConv3d::new(channels, channels, init),
                SparseConv3d::new(channels, channels, init),
            ],
            update_gate: SparseConv3d::new(2 * channels, channels, init),
            reset_gate: SparseConv3d::new(2 * channels, channels, init),
            candidate: SparseConv3d::new(2 * channels, channels, init),
            heads: Heads {
                occupancy: Head::new(channels, init),
                tsdf: Head::new(channels, init),
            },
        }
    }

    fn export(&self, name: &str, store: &mut WeightStore) {
        self.input[0].export(&format!("{name}.input.0"), store);
        self.input[1].export(&format!("{name}.input.1"), store);
        self.update_gate.export(&format!("{name}.gru.z"), store);
        self.reset_gate.export(&format!("{name}.gru.r"), store);
        self.candidate.export(&format!("{name}.gru.h"), store);
        self.heads.occupancy.export(&format!("{name}.head.occ"), store);
        self.heads.tsdf.export(&format!("{name}.head.tsdf"), store);
    }

    fn import(&mut self, name: &str, store: &WeightStore) -> Result<()> {
        self.input[0].import(&format!("{name}.input.0"), store)?;
        self.input[1].import(&format!("{name}.input.1"), store)?;
        self.update_gate.import(&format!("{name}.gru.z"), store)?;
        self.reset_gate.import(&format!("{name}.gru.r"), store)?;
        self.candidate.import(&format!("{name}.gru.h"), store)?;
        self.heads.occupancy.import(&format!("{name}.head.occ"), store)?;
        self.heads.tsdf.import(&format!("{name}.head.tsdf"), store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GstfParams {
    pub levels: [LevelParams; NUM_LEVELS],
}

impl GstfParams {
    pub fn new(init: &mut Initializer) -> Self {
        Self {
            levels: std::array::from_fn(|l| LevelParams::new(COLOR_CHANNELS[l], init)),
        }
    }

    pub fn export(&self, store: &mut WeightStore) {
        for (l, p) in self.levels.iter().enumerate() {
            p.export(&format!("gstf.{l}"), store);
        }
    }

    pub fn import(&mut self, store: &WeightStore) -> Result<()> {
        for (l, p) in self.levels.iter_mut().enumerate() {
            p.import(&format!("gstf.{l}"), store)?;
        }
        Ok(())
    }
}

fn apply_block(conv: &SparseConv3d, set: &ActiveSet, x: &[f32]) -> Vec<f32> {
    let mut y = conv.apply(set, x);
    y.iter_mut().for_each(|v| *v = leaky_relu(*v));
    y
}

/// Surface feature of a fragment volume: two sparse conv + leaky-ReLU blocks.
pub fn extract_surface_feature(
    fragment: &SparseVolume<Vec<f32>>,
    params: &LevelParams,
) -> Result<SparseVolume<Vec<f32>>> {
    let set = ActiveSet::new(fragment.keys().copied().collect());
    let x = gather(fragment, &set, params.channels)?;
    let s = surface_rows(params, &set, &x);
    Ok(scatter(fragment.level(), &set, &s, params.channels))
}

fn surface_rows(params: &LevelParams, set: &ActiveSet, x: &[f32]) -> Vec<f32> {
    let h = apply_block(&params.input[0], set, x);
    apply_block(&params.input[1], set, &h)
}

fn concat_rows(a: &[f32], b: &[f32], c: usize) -> Vec<f32> {
    let n = a.len() / c;
    let mut out = Vec::with_capacity(2 * a.len());
    for i in 0..n {
        out.extend_from_slice(&a[i * c..(i + 1) * c]);
        out.extend_from_slice(&b[i * c..(i + 1) * c]);
    }
    out
}

/// Gate values produced by one GRU step, exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStep {
    pub update: Vec<f32>,
    pub reset: Vec<f32>,
    pub candidate: Vec<f32>,
    pub hidden: Vec<f32>,
}

/// One convolutional GRU step on dense rows over `set`.
pub fn gru_rows(params: &LevelParams, set: &ActiveSet, hidden: &[f32], surface: &[f32]) -> GruStep {
    let c = params.channels;
    let hs = concat_rows(hidden, surface, c);
    let mut update = params.update_gate.apply(set, &hs);
    update.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut reset = params.reset_gate.apply(set, &hs);
    reset.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rh: Vec<f32> = reset.iter().zip(hidden).map(|(r, h)| r * h).collect();
    let mut candidate = params.candidate.apply(set, &concat_rows(&rh, surface, c));
    candidate.iter_mut().for_each(|v| *v = v.tanh());
    let out = hidden
        .iter()
        .zip(&update)
        .zip(&candidate)
        .map(|((h, z), ht)| (1.0 - z) * h + z * ht)
        .collect();
    GruStep {
        update,
        reset,
        candidate,
        hidden: out,
    }
}

/// Updates the hidden state over the fragment's keys; keys missing from
/// `hidden` start from zero. The result holds exactly the keys of `surface`.
pub fn gru_update(
    hidden: &SparseVolume<Vec<f32>>,
    surface: &SparseVolume<Vec<f32>>,
    params: &LevelParams,
) -> Result<SparseVolume<Vec<f32>>> {
    if hidden.level() != surface.level() {
        return Err(Error::LevelMismatch {
            expected: surface.level(),
            actual: hidden.level(),
        });
    }
    let set = ActiveSet::new(surface.keys().copied().collect());
    let h = gather(hidden, &set, params.channels)?;
    let s = gather(surface, &set, params.channels)?;
    let step = gru_rows(params, &set, &h, &s);
    Ok(scatter(surface.level(), &set, &step.hidden, params.channels))
}

/// Per-voxel `(occupancy, tsdf)` from hidden rows.
fn predict_rows(heads: &Heads, hidden: &[f32], c: usize) -> Vec<(f32, f32)> {
    hidden
        .par_chunks(c)
        .map(|h| (sigmoid(heads.occupancy.logit(h)), heads.tsdf.logit(h).tanh()))
        .collect()
}

pub fn predict(
    hidden: &SparseVolume<Vec<f32>>,
    heads: &Heads,
) -> Result<(SparseVolume<f32>, SparseVolume<TsdfVoxel>)> {
    let keys = hidden.sorted_keys();
    let c = heads.occupancy.hidden.in_dim;
    let mut rows = Vec::with_capacity(keys.len() * c);
    for k in &keys {
        let h = &hidden.get(k).expect("key from volume")[..];
        if h.len() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: h.len(),
            });
        }
        rows.extend_from_slice(h);
    }
    let preds = predict_rows(heads, &rows, c);
    let mut occ = SparseVolume::with_capacity(hidden.level(), keys.len());
    let mut tsdf = SparseVolume::with_capacity(hidden.level(), keys.len());
    for (k, (o, t)) in keys.iter().zip(preds) {
        occ.insert(*k, o)?;
        tsdf.insert(*k, TsdfVoxel::new(t))?;
    }
    Ok((occ, tsdf))
}

/// Persistent global model: hidden state, occupancy and TSDF per level.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVolumes {
    pub hidden: [SparseVolume<Vec<f32>>; NUM_LEVELS],
    pub occupancy: [SparseVolume<f32>; NUM_LEVELS],
    pub tsdf: [SparseVolume<TsdfVoxel>; NUM_LEVELS],
}

impl Default for GlobalVolumes {
    fn default() -> Self {
        Self {
            hidden: std::array::from_fn(|l| SparseVolume::new(l as u8)),
            occupancy: std::array::from_fn(|l| SparseVolume::new(l as u8)),
            tsdf: std::array::from_fn(|l| SparseVolume::new(l as u8)),
        }
    }
}

impl GlobalVolumes {
    pub fn active_voxels(&self) -> usize {
        self.hidden.iter().map(|h| h.len()).sum()
    }
}

/// What one fragment touched at each level.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FragmentLevels {
    /// Keys offered to each level before feature fusion (level 0: the
    /// allocation; level l > 0: children of occupied level l-1 keys).
    pub candidates: [Vec<VoxelKey>; NUM_LEVELS],
    /// Keys actually fused (candidates with at least one visible view).
    pub fused: [Vec<VoxelKey>; NUM_LEVELS],
    /// This fragment's occupancy predictions per level.
    pub occupancy: [Vec<(VoxelKey, f32)>; NUM_LEVELS],
}

impl FragmentLevels {
    pub fn total_fused(&self) -> usize {
        self.fused.iter().map(Vec::len).sum()
    }
}

/// Coarse-to-fine global fusion of one fragment.
///
/// `provide(level, candidates)` returns the fragment feature volume at
/// `level` restricted to (a subset of) `candidates`. Level 0 candidates are
/// `level0_keys`; level `l > 0` candidates are the children of this
/// fragment's level `l-1` keys with occupancy `>= theta`.
pub fn fuse_fragment_global_with<F>(
    global: &mut GlobalVolumes,
    params: &GstfParams,
    theta: f32,
    level0_keys: Vec<VoxelKey>,
    mut provide: F,
) -> Result<FragmentLevels>
where
    F: FnMut(u8, &[VoxelKey]) -> Result<SparseVolume<Vec<f32>>>,
{
    let mut report = FragmentLevels::default();
    let mut candidates = level0_keys;
    for level in 0..NUM_LEVELS as u8 {
        let l = level as usize;
        candidates.sort_unstable();
        candidates.dedup();
        report.candidates[l] = candidates.clone();
        if candidates.is_empty() {
            candidates = Vec::new();
            continue;
        }
        let fragment = provide(level, &candidates)?;
        if fragment.level() != level {
            return Err(Error::LevelMismatch {
                expected: level,
                actual: fragment.level(),
            });
        }
        if let Some(k) = fragment.keys().find(|k| candidates.binary_search(k).is_err()) {
            return Err(Error::Shape(format!("fragment key {k:?} outside candidates")));
        }
        let p = &params.levels[l];
        let set = ActiveSet::new(fragment.keys().copied().collect());
        report.fused[l] = set.keys().to_vec();
        if set.is_empty() {
            candidates = Vec::new();
            continue;
        }
        let x = gather(&fragment, &set, p.channels)?;
        let surface = surface_rows(p, &set, &x);
        let h_prev = gather(&global.hidden[l], &set, p.channels)?;
        let step = gru_rows(p, &set, &h_prev, &surface);
        let preds = predict_rows(&p.heads, &step.hidden, p.channels);

        let local_h = scatter(level, &set, &step.hidden, p.channels);
        let mut local_occ = SparseVolume::with_capacity(level, set.len());
        let mut local_tsdf = SparseVolume::with_capacity(level, set.len());
        for (k, (o, t)) in set.keys().iter().zip(&preds) {
            local_occ.insert(*k, *o)?;
            local_tsdf.insert(*k, TsdfVoxel::new(*t))?;
        }
        merge_local_into_global(&local_h, &mut global.hidden[l], MergePolicy::Replace)?;
        merge_local_into_global(&local_occ, &mut global.occupancy[l], MergePolicy::Replace)?;
        merge_local_into_global(&local_tsdf, &mut global.tsdf[l], MergePolicy::Replace)?;
        report.occupancy[l] = set.keys().iter().copied().zip(preds.iter().map(|p| p.0)).collect();

        candidates = if l + 1 < NUM_LEVELS {
            upsample_occupied(&local_occ, theta)?.into_iter().collect()
        } else {
            Vec::new()
        };
    }
    Ok(report)
}

/// Coarse-to-fine global fusion from precomputed fragment volumes (one per
/// level). Level 0 uses all keys of `fragment[0]`; finer levels are
/// restricted to children of occupied coarse keys.
pub fn fuse_fragment_global(
    fragment: &[SparseVolume<Vec<f32>>; NUM_LEVELS],
    global: &mut GlobalVolumes,
    params: &GstfParams,
    theta: f32,
) -> Result<FragmentLevels> {
    let level0 = fragment[0].sorted_keys();
    fuse_fragment_global_with(global, params, theta, level0, |level, candidates| {
        let src = &fragment[level as usize];
        let mut out = SparseVolume::new(level);
        for k in candidates {
            if let Some(v) = src.get(k) {
                out.insert(*k, v.clone())?;
            }
        }
        Ok(out)
    })
}

/// One depth observation for classical integration.
#[derive(Debug, Clone, Copy)]
pub struct DepthView<'a> {
    pub intrinsics: &'a Intrinsics,
    pub pose: &'a Pose,
    pub depth: &'a DepthMap,
}

/// Weighted running-average TSDF integration of a fragment's depth maps into
/// a finest-level volume. Voxels are allocated from the fragment frustums;
/// each view contributes `clamp(depth(p) - d, .., trunc) / trunc` at the
/// nearest pixel, skipped when the voxel lies more than `trunc` behind the
/// observed surface or the pixel has no depth. Voxels no view updates are
/// left untouched.
pub fn classical_fusion_step(
    views: &[DepthView<'_>],
    global: &mut SparseVolume<TsdfVoxel>,
    spec: &GridSpec,
    truncation: f64,
    max_depth: f64,
) -> Result<usize> {
    if !(truncation > 0.0) {
        return Err(Error::InvalidParameter("truncation must be positive".into()));
    }
    let cameras: Vec<(Intrinsics, Pose)> =
        views.iter().map(|v| (*v.intrinsics, *v.pose)).collect();
    let level = global.level();
    let keys: Vec<VoxelKey> = allocate_fragment_keys(spec, level, &cameras, max_depth)?
        .into_iter()
        .collect();
    let updates: Vec<Option<TsdfVoxel>> = keys
        .par_iter()
        .map(|key| {
            let c = spec.key_center(*key);
            let mut vox = global.get(key).copied().unwrap_or(TsdfVoxel {
                tsdf: 0.0,
                weight: 0.0,
            });
            let mut touched = false;
            for v in views {
                let Some((px, d)) = project(v.intrinsics, v.pose, &c) else {
                    continue;
                };
                let Some((x, y)) = px.nearest(v.depth.width, v.depth.height) else {
                    continue;
                };
                let Some(obs) = v.depth.get(x, y) else {
                    continue;
                };
                if obs <= 0.0 {
                    continue;
                }
                let sdf = (obs - d) / truncation;
                if sdf < -1.0 {
                    continue;
                }
                let s = sdf.min(1.0) as f32;
                vox.tsdf = (vox.weight * vox.tsdf + s) / (vox.weight + 1.0);
                vox.weight += 1.0;
                touched = true;
            }
            touched.then_some(vox)
        })
        .collect();
    let mut local = SparseVolume::new(level);
    for (k, u) in keys.iter().zip(updates) {
        if let Some(v) = u {
            local.insert(*k, v)?;
        }
    }
    let n = local.len();
    merge_local_into_global(&local, global, MergePolicy::Replace)?;
    Ok(n)
}

/// Keys of `fine` whose parents are not among the θ-passing keys of
/// `coarse_occupancy`. Empty when coarse-to-fine containment holds.
pub fn containment_violations(
    fine: &[VoxelKey],
    coarse_occupancy: &[(VoxelKey, f32)],
    theta: f32,
) -> Vec<VoxelKey> {
    let passing: BTreeSet<VoxelKey> = coarse_occupancy
        .iter()
        .filter(|(_, o)| *o >= theta)
        .map(|(k, _)| *k)
        .collect();
    fine.iter()
        .filter(|k| k.parent().is_none_or(|p| !passing.contains(&p)))
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature_volume(level: u8, items: &[((i32, i32, i32), Vec<f32>)]) -> SparseVolume<Vec<f32>> {
        SparseVolume::from_entries(
            level,
            items
                .iter()
                .map(|((x, y, z), v)| (VoxelKey::new(level, *x, *y, *z), v.clone())),
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let v = feature_volume(2, &[((0, 0, 0), vec![1.0, 2.0]), ((1, 0, 0), vec![-3.0, 4.0])]);
        let out = sparse_conv3d(&v, &SparseConv3d::identity(2)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn single_voxel_sees_only_itself() {
        let v = feature_volume(2, &[((4, 4, 4), vec![2.0])]);
        let mut conv = SparseConv3d::zeros(1, 1);
        conv.weight.iter_mut().for_each(|w| *w = 1.0);
        let out = sparse_conv3d(&v, &conv).unwrap();
        assert_eq!(out.get(&VoxelKey::new(2, 4, 4, 4)), Some(&vec![2.0]));
    }

    #[test]
    fn two_voxel_line_by_hand() {
        // averaging kernel over the x-neighbors and center, weight 1/3 each
        let v = feature_volume(1, &[((0, 0, 0), vec![3.0]), ((1, 0, 0), vec![6.0])]);
        let mut conv = SparseConv3d::zeros(1, 1);
        for dx in -1..=1 {
            conv.tap_mut(dx, 0, 0)[0] = 1.0 / 3.0;
        }
        let out = sparse_conv3d(&v, &conv).unwrap();
        // each voxel gathers itself and its one active neighbor
        assert_eq!(out.get(&VoxelKey::new(1, 0, 0, 0)), Some(&vec![3.0 / 3.0 + 6.0 / 3.0]));
        assert_eq!(out.get(&VoxelKey::new(1, 1, 0, 0)), Some(&vec![6.0 / 3.0 + 3.0 / 3.0]));

        // a directional kernel distinguishes the two neighbors
        let mut conv = SparseConv3d::zeros(1, 1);
        conv.tap_mut(1, 0, 0)[0] = 1.0;
        let out = sparse_conv3d(&v, &conv).unwrap();
        assert_eq!(out.get(&VoxelKey::new(1, 0, 0, 0)), Some(&vec![6.0]));
        assert_eq!(out.get(&VoxelKey::new(1, 1, 0, 0)), Some(&vec![0.0]));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let v = feature_volume(1, &[((0, 0, 0), vec![1.0, 2.0])]);
        assert!(matches!(
            sparse_conv3d(&v, &SparseConv3d::zeros(3, 1)),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn random_volumes_keep_active_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = SparseConv3d::new(3, 5, &mut Initializer::new(1));
        for _ in 0..10 {
            let n = rng.random_range(1..60);
            let items: Vec<_> = (0..n)
                .map(|_| {
                    (
                        (rng.random_range(-4..4), rng.random_range(-4..4), rng.random_range(-4..4)),
                        vec![rng.random_range(-1.0..1.0); 3],
                    )
                })
                .collect();
            let v = feature_volume(0, &items);
            let out = sparse_conv3d(&v, &conv).unwrap();
            assert_eq!(out.key_set(), v.key_set());
        }
    }

    #[test]
    fn dot8_matches_naive_sum() {
        let a: Vec<f32> = (0..37).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.0 - i as f32 * 0.01).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        assert!((dot8(&a, &b) as f64 - naive).abs() < 1e-3);
    }

    fn small_params(c: usize, seed: u64) -> LevelParams {
        LevelParams::new(c, &mut Initializer::new(seed))
    }

    #[test]
    fn zero_input_zero_bias_surface_is_zero() {
        let mut p = small_params(4, 2);
        p.input.iter_mut().for_each(|c| c.bias.iter_mut().for_each(|b| *b = 0.0));
        let v = feature_volume(2, &[((0, 0, 0), vec![0.0; 4]), ((0, 1, 0), vec![0.0; 4])]);
        let s = extract_surface_feature(&v, &p).unwrap();
        assert_eq!(s, v);
        let again = extract_surface_feature(&v, &p).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn first_visit_closed_form() {
        let c = 2;
        let mut p = small_params(c, 5);
        // zero hidden state: z = sigmoid(Wz_S * s + bz), candidate = tanh(Wh_S * s + bh)
        let s_val = vec![0.4f32, -0.7];
        let surface = feature_volume(0, &[((0, 0, 0), s_val.clone())]);
        let hidden = SparseVolume::new(0);
        p.input = [SparseConv3d::identity(c), SparseConv3d::identity(c)];
        let out = gru_update(&hidden, &surface, &p).unwrap();
        let h = out.get(&VoxelKey::new(0, 0, 0, 0)).unwrap();
        let center = tap_index(0, 0, 0);
        for o in 0..c {
            let pre = |conv: &SparseConv3d| {
                let w = &conv.weight[center * 2 * c * c..][..2 * c * c];
                // input rows are [h; s] with h = 0
                conv.bias[o] + (0..c).map(|i| w[o * 2 * c + c + i] * s_val[i]).sum::<f32>()
            };
            let z = sigmoid(pre(&p.update_gate));
            let cand = pre(&p.candidate).tanh();
            assert!((h[o] - z * cand).abs() < 1e-6, "{} vs {}", h[o], z * cand);
        }
    }

    #[test]
    fn forced_gates() {
        let c = 3;
        let mut p = small_params(c, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let items: Vec<_> = (0..10)
            .map(|i| ((i, 0, 0), (0..c).map(|_| rng.random_range(-0.9..0.9)).collect::<Vec<f32>>()))
            .collect();
        let hidden = feature_volume(1, &items);
        let surface = feature_volume(
            1,
            &items.iter().map(|(k, _)| (*k, vec![0.3f32; c])).collect::<Vec<_>>(),
        );
        p.update_gate.bias.iter_mut().for_each(|b| *b = -1e4);
        let closed = gru_update(&hidden, &surface, &p).unwrap();
        for (k, v) in hidden.iter() {
            let out = closed.get(k).unwrap();
            for (a, b) in out.iter().zip(v) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        p.update_gate.bias.iter_mut().for_each(|b| *b = 1e4);
        let set = ActiveSet::new(hidden.sorted_keys());
        let h = gather(&hidden, &set, c).unwrap();
        let s = gather(&surface, &set, c).unwrap();
        let step = gru_rows(&p, &set, &h, &s);
        for (a, b) in step.hidden.iter().zip(&step.candidate) {
            assert!((a - b).abs() < 1e-6);
            assert!(a.abs() < 1.0);
        }
    }

    #[test]
    fn zero_heads_predict_half_and_zero() {
        let c = 4;
        let heads = Heads {
            occupancy: Head {
                hidden: Linear::zeros(c, 2),
                out: Linear::zeros(2, 1),
            },
            tsdf: Head {
                hidden: Linear::zeros(c, 2),
                out: Linear::zeros(2, 1),
            },
        };
        let h = feature_volume(2, &[((0, 0, 0), vec![0.0; c])]);
        let (occ, tsdf) = predict(&h, &heads).unwrap();
        assert_eq!(occ.get(&VoxelKey::new(2, 0, 0, 0)), Some(&0.5));
        assert_eq!(tsdf.get(&VoxelKey::new(2, 0, 0, 0)).unwrap().tsdf, 0.0);
    }

    #[test]
    fn predictions_stay_in_range() {
        let p = small_params(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items: Vec<_> = (0..50)
            .map(|i| ((i, i, 0), (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>()))
            .collect();
        let h = feature_volume(0, &items);
        let (occ, tsdf) = predict(&h, &p.heads).unwrap();
        assert!(occ.iter().all(|(_, o)| *o > 0.0 && *o < 1.0));
        assert!(tsdf.iter().all(|(_, t)| t.tsdf > -1.0 && t.tsdf < 1.0));
        let (occ2, _) = predict(&h, &p.heads).unwrap();
        assert_eq!(occ, occ2);
    }

    fn random_fragment(rng: &mut ChaCha8Rng, n0: i32) -> [SparseVolume<Vec<f32>>; NUM_LEVELS] {
        std::array::from_fn(|l| {
            let c = COLOR_CHANNELS[l];
            let span = n0 << l;
            let mut v = SparseVolume::new(l as u8);
            for x in 0..span {
                for y in 0..span {
                    for z in 0..2 << l {
                        let f: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                        v.insert(VoxelKey::new(l as u8, x, y, z), f).unwrap();
                    }
                }
            }
            v
        })
    }

    #[test]
    fn global_fusion_first_fragment_and_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = GstfParams::new(&mut Initializer::new(12));
        let frag = random_fragment(&mut rng, 3);
        let mut global = GlobalVolumes::default();
        let report = fuse_fragment_global(&frag, &mut global, &params, 0.5).unwrap();
        assert_eq!(report.fused[0].len(), frag[0].len());
        for l in 0..NUM_LEVELS {
            assert_eq!(global.hidden[l].len(), report.fused[l].len());
            assert_eq!(global.occupancy[l].len(), report.fused[l].len());
        }
        for l in 1..NUM_LEVELS {
            assert!(containment_violations(&report.fused[l], &report.occupancy[l - 1], 0.5).is_empty());
        }

        // second pass over the same fragment runs the recurrence again
        let before = global.clone();
        fuse_fragment_global(&frag, &mut global, &params, 0.5).unwrap();
        assert_ne!(before.hidden[0], global.hidden[0]);
    }

    #[test]
    fn coarse_all_below_threshold_empties_finer_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = GstfParams::new(&mut Initializer::new(13));
        params.levels[0].heads.occupancy.out.bias[0] = -1e4;
        let frag = random_fragment(&mut rng, 2);
        let mut global = GlobalVolumes::default();
        let report = fuse_fragment_global(&frag, &mut global, &params, 0.5).unwrap();
        assert!(!report.fused[0].is_empty());
        assert!(report.fused[1].is_empty() && report.fused[2].is_empty());
        assert!(global.hidden[1].is_empty() && global.hidden[2].is_empty());
    }

    fn wall_view(z: f64) -> (Intrinsics, Pose, DepthMap) {
        let k = Intrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        let d = DepthMap::from_fn(16, 16, |_, _| z);
        (k, Pose::identity(), d)
    }

    #[test]
    fn classical_fusion_wall() {
        let spec = GridSpec::default();
        let (k, pose, depth) = wall_view(2.02);
        let views = [DepthView {
            intrinsics: &k,
            pose: &pose,
            depth: &depth,
        }];
        let mut vol = SparseVolume::new(2);
        classical_fusion_step(&views, &mut vol, &spec, 0.12, 3.0).unwrap();
        // voxel centered on the wall plane (z = 2.02)
        let on = vol.get(&VoxelKey::new(2, 0, 0, 50)).unwrap();
        assert!(on.tsdf.abs() < 1e-6, "{}", on.tsdf);
        assert_eq!(on.weight, 1.0);
        // 0.12 m in front: center z = 1.90
        let front = vol.get(&VoxelKey::new(2, 0, 0, 47)).unwrap();
        assert!((front.tsdf - 1.0).abs() < 1e-6);
        // far behind the wall: never updated
        assert!(vol.get(&VoxelKey::new(2, 0, 0, 60)).is_none());
        // out of the frustum entirely
        let before = vol.clone();
        let (k2, _, d2) = wall_view(2.02);
        let away = Pose::from_translation(100.0, 0.0, 0.0);
        classical_fusion_step(
            &[DepthView {
                intrinsics: &k2,
                pose: &away,
                depth: &d2,
            }],
            &mut vol,
            &spec,
            0.12,
            3.0,
        )
        .unwrap();
        assert_eq!(vol.get(&VoxelKey::new(2, 0, 0, 50)), before.get(&VoxelKey::new(2, 0, 0, 50)));
    }

    #[test]
    fn weights_round_trip() {
        let p = GstfParams::new(&mut Initializer::new(3));
        let mut store = WeightStore::new();
        p.export(&mut store);
        let mut q = GstfParams::new(&mut Initializer::new(4));
        q.import(&store).unwrap();
        assert_eq!(p, q);
    }
}
