//! Sparse multi-level voxel volumes.
//!
//! All levels share one world-aligned grid (common origin and axes); level
//! `l + 1` halves the voxel size of level `l`. Fragment-local volumes are plain
//! subsets of the global index space, so moving data between a fragment and
//! the global model is a key lookup, never a resampling.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::hash::{BuildHasherDefault, Hash, Hasher};
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geom::{project, Intrinsics, Pose, Vec3};

pub const NUM_LEVELS: usize = 3;
pub const FINEST_LEVEL: u8 = (NUM_LEVELS - 1) as u8;

/// Multiplicative hasher for packed voxel keys.
#[derive(Default, Clone, Copy)]
pub struct KeyHasher(u64);

impl Hasher for KeyHasher {
    #[inline]
    fn finish(&self) -> u64 {
        self.0
    }

    #[inline]
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    #[inline]
    fn write_u64(&mut self, v: u64) {
        let x = (self.0.rotate_left(5) ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.0 = x ^ (x >> 29);
    }
}

pub type KeyMap<V> = HashMap<VoxelKey, V, BuildHasherDefault<KeyHasher>>;
pub type KeySet = HashSet<VoxelKey, BuildHasherDefault<KeyHasher>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vec3,
    /// Voxel edge length per level, coarse to fine (meters).
    pub voxel_sizes: [f64; NUM_LEVELS],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::with_finest(Vec3::zeros(), 0.04)
    }
}

impl GridSpec {
    pub fn with_finest(origin: Vec3, finest: f64) -> Self {
        let mut voxel_sizes = [0.0; NUM_LEVELS];
        for (l, s) in voxel_sizes.iter_mut().enumerate() {
            *s = finest * (1u32 << (NUM_LEVELS - 1 - l)) as f64;
        }
        Self {
            origin,
            voxel_sizes,
        }
    }

    #[inline]
    pub fn voxel_size(&self, level: u8) -> f64 {
        self.voxel_sizes[level as usize]
    }

    pub fn world_to_key(&self, level: u8, point: &Vec3) -> VoxelKey {
        let s = self.voxel_size(level);
        let rel = (point - self.origin) / s;
        VoxelKey::new(
            level,
            rel.x.floor() as i32,
            rel.y.floor() as i32,
            rel.z.floor() as i32,
        )
    }

    #[inline]
    pub fn key_center(&self, key: VoxelKey) -> Vec3 {
        let s = self.voxel_size(key.level);
        self.origin
            + Vec3::new(
                (key.ix as f64 + 0.5) * s,
                (key.iy as f64 + 0.5) * s,
                (key.iz as f64 + 0.5) * s,
            )
    }
}

/// Integer voxel index at one pyramid level. Ordered by level, then x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct VoxelKey {
    pub level: u8,
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl Hash for VoxelKey {
    #[inline]
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.pack());
    }
}

const AXIS_BITS: u32 = 20;
const AXIS_MASK: u64 = (1 << AXIS_BITS) - 1;

impl VoxelKey {
    #[inline]
    pub const fn new(level: u8, ix: i32, iy: i32, iz: i32) -> Self {
        Self { level, ix, iy, iz }
    }

    /// Packs the key into 64 bits (level in the top bits, 20 bits per axis,
    /// two's complement truncated). Unique for |index| < 2^19.
    #[inline]
    pub fn pack(&self) -> u64 {
        ((self.level as u64) << (3 * AXIS_BITS))
            | (((self.ix as u64) & AXIS_MASK) << (2 * AXIS_BITS))
            | (((self.iy as u64) & AXIS_MASK) << AXIS_BITS)
            | ((self.iz as u64) & AXIS_MASK)
    }

    #[inline]
    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.level, self.ix + dx, self.iy + dy, self.iz + dz)
    }

    /// The 8 keys at `level + 1` covering this voxel.
    pub fn children(&self) -> [VoxelKey; 8] {
        let (x, y, z) = (2 * self.ix, 2 * self.iy, 2 * self.iz);
        let l = self.level + 1;
        let mut out = [VoxelKey::new(l, 0, 0, 0); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = VoxelKey::new(
                l,
                x + (i & 1) as i32,
                y + ((i >> 1) & 1) as i32,
                z + ((i >> 2) & 1) as i32,
            );
        }
        out
    }

    pub fn parent(&self) -> Option<VoxelKey> {
        if self.level == 0 {
            return None;
        }
        Some(VoxelKey::new(
            self.level - 1,
            self.ix.div_euclid(2),
            self.iy.div_euclid(2),
            self.iz.div_euclid(2),
        ))
    }
}

/// Per-voxel TSDF sample, normalized by the truncation distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfVoxel {
    pub tsdf: f32,
    /// Integration count (classical fusion only; 0 for predicted values).
    pub weight: f32,
}

impl TsdfVoxel {
    pub fn new(tsdf: f32) -> Self {
        Self { tsdf, weight: 0.0 }
    }
}

/// Sparse map from voxel keys of a single level to payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVolume<V> {
    level: u8,
    entries: KeyMap<V>,
}

impl<V> SparseVolume<V> {
    pub fn new(level: u8) -> Self {
        Self {
            level,
            entries: KeyMap::default(),
        }
    }

    pub fn with_capacity(level: u8, capacity: usize) -> Self {
        Self {
            level,
            entries: KeyMap::with_capacity_and_hasher(capacity, Default::default()),
        }
    }

    /// Builds a volume from `(key, value)` pairs; every key must be at `level`.
    pub fn from_entries(level: u8, entries: impl IntoIterator<Item = (VoxelKey, V)>) -> Result<Self> {
        let mut v = Self::new(level);
        for (k, val) in entries {
            v.insert(k, val)?;
        }
        Ok(v)
    }

    #[inline]
    pub fn level(&self) -> u8 {
        self.level
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: VoxelKey, value: V) -> Result<Option<V>> {
        if key.level != self.level {
            return Err(Error::LevelMismatch {
                expected: self.level,
                actual: key.level,
            });
        }
        Ok(self.entries.insert(key, value))
    }

    #[inline]
    pub fn get(&self, key: &VoxelKey) -> Option<&V> {
        self.entries.get(key)
    }

    #[inline]
    pub fn get_mut(&mut self, key: &VoxelKey) -> Option<&mut V> {
        self.entries.get_mut(key)
    }

    #[inline]
    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &VoxelKey) -> Option<V> {
        self.entries.remove(key)
    }

    pub fn retain(&mut self, mut f: impl FnMut(&VoxelKey, &mut V) -> bool) {
        self.entries.retain(|k, v| f(k, v));
    }

    /// Unordered iteration. Use [`SparseVolume::sorted_keys`] when order
    /// matters downstream.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &V)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VoxelKey> {
        self.entries.keys()
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.entries.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn key_set(&self) -> BTreeSet<VoxelKey> {
        self.entries.keys().copied().collect()
    }

    /// Entries in key order.
    pub fn sorted_entries(&self) -> Vec<(VoxelKey, &V)> {
        let mut e: Vec<(VoxelKey, &V)> = self.entries.iter().map(|(k, v)| (*k, v)).collect();
        e.sort_unstable_by_key(|(k, _)| *k);
        e
    }

    pub fn map<U>(&self, mut f: impl FnMut(&VoxelKey, &V) -> U) -> SparseVolume<U> {
        SparseVolume {
            level: self.level,
            entries: self.entries.iter().map(|(k, v)| (*k, f(k, v))).collect(),
        }
    }
}

impl<V: PartialEq> SparseVolume<V> {
    /// Same level, keys and values.
    pub fn same_as(&self, other: &Self) -> bool {
        self == other
    }
}

/// Conflict resolution for overlapping keys in [`merge_local_into_global`].
pub enum MergePolicy<'a, V> {
    /// The local value wins.
    Replace,
    /// `f(global_value, local_value)` becomes the new global value.
    Combine(&'a dyn Fn(&V, &V) -> V),
}

pub fn merge_local_into_global<V: Clone>(
    local: &SparseVolume<V>,
    global: &mut SparseVolume<V>,
    policy: MergePolicy<'_, V>,
) -> Result<()> {
    if local.level != global.level {
        return Err(Error::LevelMismatch {
            expected: global.level,
            actual: local.level,
        });
    }
    for (k, v) in local.iter() {
        match (&policy, global.entries.get_mut(k)) {
            (MergePolicy::Combine(f), Some(existing)) => {
                let merged = f(existing, v);
                *existing = merged;
            }
            (_, Some(existing)) => *existing = v.clone(),
            (_, None) => {
                global.entries.insert(*k, v.clone());
            }
        }
    }
    Ok(())
}

/// Whether a world point lies in the camera frustum truncated at `max_depth`.
#[inline]
pub fn in_frustum(k: &Intrinsics, pose: &Pose, p: &Vec3, max_depth: f64) -> bool {
    matches!(project(k, pose, p), Some((_, d)) if d <= max_depth)
}

/// Keys of `level` whose centers fall inside at least one camera frustum
/// (depth in `(0, max_depth]`), dilated by one voxel in all 26 directions.
pub fn allocate_fragment_keys(
    spec: &GridSpec,
    level: u8,
    cameras: &[(Intrinsics, Pose)],
    max_depth: f64,
) -> Result<BTreeSet<VoxelKey>> {
    if cameras.is_empty() {
        return Err(Error::NoCameras);
    }
    let mut inside = KeySet::default();
    if max_depth > 0.0 {
        for (k, pose) in cameras {
            let (lo, hi) = frustum_key_bounds(spec, level, k, pose, max_depth);
            for ix in lo[0]..=hi[0] {
                for iy in lo[1]..=hi[1] {
                    for iz in lo[2]..=hi[2] {
                        let key = VoxelKey::new(level, ix, iy, iz);
                        if !inside.contains(&key)
                            && in_frustum(k, pose, &spec.key_center(key), max_depth)
                        {
                            inside.insert(key);
                        }
                    }
                }
            }
        }
    }
    Ok(dilate(&inside))
}

/// Inclusive key range covering the camera center and far-plane corners.
fn frustum_key_bounds(
    spec: &GridSpec,
    level: u8,
    k: &Intrinsics,
    pose: &Pose,
    max_depth: f64,
) -> ([i32; 3], [i32; 3]) {
    let corners = [
        (0.0, 0.0),
        (k.width as f64, 0.0),
        (0.0, k.height as f64),
        (k.width as f64, k.height as f64),
    ];
    let mut lo = pose.center();
    let mut hi = pose.center();
    for (u, v) in corners {
        let pc = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0) * max_depth;
        let pw = pose.transform_point(&pc);
        lo = lo.inf(&pw);
        hi = hi.sup(&pw);
    }
    let a = spec.world_to_key(level, &lo);
    let b = spec.world_to_key(level, &hi);
    ([a.ix, a.iy, a.iz], [b.ix, b.iy, b.iz])
}

/// 26-neighborhood dilation, returned in key order.
pub fn dilate(keys: &KeySet) -> BTreeSet<VoxelKey> {
    let mut out = KeySet::with_capacity_and_hasher(keys.len() * 2, Default::default());
    for k in keys {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    out.insert(k.offset(dx, dy, dz));
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Children of every coarse key whose occupancy is at least `theta`.
pub fn upsample_occupied(coarse: &SparseVolume<f32>, theta: f32) -> Result<BTreeSet<VoxelKey>> {
    if coarse.level() as usize >= NUM_LEVELS - 1 {
        return Err(Error::FinestLevel(coarse.level()));
    }
    let mut out = BTreeSet::new();
    for (k, occ) in coarse.iter() {
        if *occ >= theta {
            out.extend(k.children());
        }
    }
    Ok(out)
}

const DUMP_MAGIC: &[u8; 4] = b"SSTV";
const DUMP_VERSION: u32 = 1;

/// Writes a TSDF volume as little-endian binary.
///
/// Layout: magic `SSTV`, `u32` version, `u32` level, `f64` voxel size,
/// `3 x f64` origin, `u64` record count, then per voxel in key order
/// `i32 ix, i32 iy, i32 iz, f32 tsdf`.
pub fn write_tsdf_dump<W: Write>(
    w: &mut W,
    spec: &GridSpec,
    vol: &SparseVolume<TsdfVoxel>,
) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_u32::<LittleEndian>(DUMP_VERSION)?;
    w.write_u32::<LittleEndian>(vol.level() as u32)?;
    w.write_f64::<LittleEndian>(spec.voxel_size(vol.level()))?;
    for i in 0..3 {
        w.write_f64::<LittleEndian>(spec.origin[i])?;
    }
    w.write_u64::<LittleEndian>(vol.len() as u64)?;
    for (k, v) in vol.sorted_entries() {
        w.write_i32::<LittleEndian>(k.ix)?;
        w.write_i32::<LittleEndian>(k.iy)?;
        w.write_i32::<LittleEndian>(k.iz)?;
        w.write_f32::<LittleEndian>(v.tsdf)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfDump {
    pub voxel_size: f64,
    pub origin: Vec3,
    pub volume: SparseVolume<TsdfVoxel>,
}

pub fn read_tsdf_dump<R: Read>(r: &mut R) -> Result<TsdfDump> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("not an SSTV volume dump".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported SSTV version {version}")));
    }
    let level = r.read_u32::<LittleEndian>()?;
    if level as usize >= NUM_LEVELS {
        return Err(Error::Format(format!("level {level} out of range")));
    }
    let level = level as u8;
    let voxel_size = r.read_f64::<LittleEndian>()?;
    let mut origin = Vec3::zeros();
    for i in 0..3 {
        origin[i] = r.read_f64::<LittleEndian>()?;
    }
    let count = r.read_u64::<LittleEndian>()?;
    let mut volume = SparseVolume::with_capacity(level, count.min(1 << 24) as usize);
    for _ in 0..count {
        let ix = r.read_i32::<LittleEndian>()?;
        let iy = r.read_i32::<LittleEndian>()?;
        let iz = r.read_i32::<LittleEndian>()?;
        let tsdf = r.read_f32::<LittleEndian>()?;
        volume.insert(VoxelKey::new(level, ix, iy, iz), TsdfVoxel::new(tsdf))?;
    }
    Ok(TsdfDump {
        voxel_size,
        origin,
        volume,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_spec_levels() {
        let spec = GridSpec::default();
        assert_eq!(spec.voxel_sizes, [0.16, 0.08, 0.04]);
        for l in 0..NUM_LEVELS - 1 {
            assert_eq!(spec.voxel_sizes[l], 2.0 * spec.voxel_sizes[l + 1]);
        }
    }

    #[test]
    fn key_center_examples() {
        let spec = GridSpec::default();
        assert_eq!(
            spec.world_to_key(2, &Vec3::new(0.02, 0.02, 0.02)),
            VoxelKey::new(2, 0, 0, 0)
        );
        let c = spec.key_center(VoxelKey::new(2, 0, 0, 0));
        assert!((c - Vec3::new(0.02, 0.02, 0.02)).amax() < 1e-15);
        assert_eq!(spec.world_to_key(2, &Vec3::new(-0.01, 0.0, 0.0)).ix, -1);
    }

    proptest! {
        #[test]
        fn key_center_round_trip(ix in -5000i32..5000, iy in -5000i32..5000, iz in -5000i32..5000,
                                 level in 0u8..3, ox in -3.0f64..3.0) {
            let spec = GridSpec::with_finest(Vec3::new(ox, -ox, 0.5 * ox), 0.04);
            let k = VoxelKey::new(level, ix, iy, iz);
            prop_assert_eq!(spec.world_to_key(level, &spec.key_center(k)), k);
        }

        #[test]
        fn pack_is_injective_in_range(a in (-1000i32..1000, -1000i32..1000, -1000i32..1000, 0u8..3),
                                      b in (-1000i32..1000, -1000i32..1000, -1000i32..1000, 0u8..3)) {
            let ka = VoxelKey::new(a.3, a.0, a.1, a.2);
            let kb = VoxelKey::new(b.3, b.0, b.1, b.2);
            prop_assert_eq!(ka == kb, ka.pack() == kb.pack());
        }
    }

    #[test]
    fn children_and_parent() {
        let k = VoxelKey::new(0, -1, 2, 0);
        let kids = k.children();
        let set: BTreeSet<_> = kids.iter().copied().collect();
        assert_eq!(set.len(), 8);
        for c in kids {
            assert_eq!(c.parent(), Some(k));
        }
        assert_eq!(VoxelKey::new(0, 0, 0, 0).parent(), None);
    }

    #[test]
    fn upsample_cases() {
        let empty: SparseVolume<f32> = SparseVolume::new(0);
        assert!(upsample_occupied(&empty, 0.5).unwrap().is_empty());

        let mut one = SparseVolume::new(0);
        one.insert(VoxelKey::new(0, 1, 1, 1), 0.9f32).unwrap();
        one.insert(VoxelKey::new(0, 5, 5, 5), 0.1f32).unwrap();
        let fine = upsample_occupied(&one, 0.5).unwrap();
        assert_eq!(fine, VoxelKey::new(0, 1, 1, 1).children().into_iter().collect());

        let mut two = SparseVolume::new(1);
        two.insert(VoxelKey::new(1, 0, 0, 0), 0.7f32).unwrap();
        two.insert(VoxelKey::new(1, 1, 0, 0), 0.5f32).unwrap();
        let fine = upsample_occupied(&two, 0.5).unwrap();
        let mut expected = BTreeSet::new();
        for k in [VoxelKey::new(1, 0, 0, 0), VoxelKey::new(1, 1, 0, 0)] {
            for c in k.children() {
                assert!(expected.insert(c), "children overlap");
            }
        }
        assert_eq!(fine.len(), 16);
        assert_eq!(fine, expected);

        let finest: SparseVolume<f32> = SparseVolume::new(2);
        assert!(matches!(upsample_occupied(&finest, 0.5), Err(Error::FinestLevel(2))));
    }

    fn vol(level: u8, items: &[((i32, i32, i32), i32)]) -> SparseVolume<i32> {
        SparseVolume::from_entries(
            level,
            items
                .iter()
                .map(|((x, y, z), v)| (VoxelKey::new(level, *x, *y, *z), *v)),
        )
        .unwrap()
    }

    #[test]
    fn merge_cases() {
        let local = vol(1, &[((0, 0, 0), 1), ((1, 0, 0), 2)]);
        let mut global = SparseVolume::new(1);
        merge_local_into_global(&local, &mut global, MergePolicy::Replace).unwrap();
        assert_eq!(global, local);

        let mut global = vol(1, &[((5, 5, 5), 9)]);
        merge_local_into_global(&local, &mut global, MergePolicy::Replace).unwrap();
        assert_eq!(global.len(), 3);
        assert_eq!(global.get(&VoxelKey::new(1, 5, 5, 5)), Some(&9));

        let mut global = vol(1, &[((0, 0, 0), 7)]);
        merge_local_into_global(&local, &mut global, MergePolicy::Replace).unwrap();
        assert_eq!(global.get(&VoxelKey::new(1, 0, 0, 0)), Some(&1));

        let add = |a: &i32, b: &i32| a + b;
        let mut global = vol(1, &[((0, 0, 0), 7)]);
        merge_local_into_global(&local, &mut global, MergePolicy::Combine(&add)).unwrap();
        assert_eq!(global.get(&VoxelKey::new(1, 0, 0, 0)), Some(&8));

        let mut wrong = SparseVolume::new(2);
        assert!(matches!(
            merge_local_into_global(&local, &mut wrong, MergePolicy::Replace),
            Err(Error::LevelMismatch { .. })
        ));
    }

    #[test]
    fn merge_replace_is_idempotent() {
        let local = vol(0, &[((0, 0, 0), 1), ((2, 0, 0), 3)]);
        let mut once = vol(0, &[((0, 0, 0), 4), ((9, 9, 9), 5)]);
        merge_local_into_global(&local, &mut once, MergePolicy::Replace).unwrap();
        let mut twice = once.clone();
        merge_local_into_global(&local, &mut twice, MergePolicy::Replace).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn insert_rejects_foreign_level() {
        let mut v: SparseVolume<i32> = SparseVolume::new(0);
        assert!(v.insert(VoxelKey::new(1, 0, 0, 0), 1).is_err());
    }

    fn cam90() -> (Intrinsics, Pose) {
        // 90 degree horizontal and vertical field of view
        let k = Intrinsics::new(8.0, 8.0, 8.0, 8.0, 16, 16).unwrap();
        (k, Pose::identity())
    }

    #[test]
    fn allocation_edge_cases() {
        let cam = cam90();
        assert!(allocate_fragment_keys(&GridSpec::default(), 0, &[cam], 0.0)
            .unwrap()
            .is_empty());
        let keys = allocate_fragment_keys(&GridSpec::default(), 0, &[cam], 3.0).unwrap();
        let far = GridSpec::default().world_to_key(0, &Vec3::new(0.0, 0.0, 10.0));
        assert!(!keys.contains(&far));
        assert!(matches!(
            allocate_fragment_keys(&GridSpec::default(), 0, &[], 3.0),
            Err(Error::NoCameras)
        ));
    }

    #[test]
    fn allocation_matches_exhaustive_oracle() {
        let spec = GridSpec::default();
        let (k, pose) = cam90();
        let max_depth = 3.0;
        let keys = allocate_fragment_keys(&spec, 0, &[(k, pose)], max_depth).unwrap();

        // Independent frustum test written with slopes instead of projection:
        // a point is inside iff 0 < z <= max_depth and -1 <= x/z < 1 (same for y),
        // since u = 8 x / z + 8 must lie in [0, 16).
        let inside = |c: Vec3| {
            c.z > 0.0
                && c.z <= max_depth
                && c.x / c.z >= -1.0
                && c.x / c.z < 1.0
                && c.y / c.z >= -1.0
                && c.y / c.z < 1.0
        };
        let n = 25;
        let mut expected = BTreeSet::new();
        for ix in -n..=n {
            for iy in -n..=n {
                for iz in -n..=n {
                    let key = VoxelKey::new(0, ix, iy, iz);
                    let any = (-1..=1).any(|dx| {
                        (-1..=1).any(|dy| {
                            (-1..=1).any(|dz| inside(spec.key_center(key.offset(dx, dy, dz))))
                        })
                    });
                    if any {
                        expected.insert(key);
                    }
                }
            }
        }
        assert!(!expected.is_empty());
        assert_eq!(keys.len(), expected.len());
        assert_eq!(keys, expected);
    }

    #[test]
    fn tsdf_dump_round_trip() {
        let spec = GridSpec::with_finest(Vec3::new(0.1, -0.2, 0.3), 0.04);
        let mut v = SparseVolume::new(2);
        v.insert(VoxelKey::new(2, -3, 4, 5), TsdfVoxel::new(-0.25)).unwrap();
        v.insert(VoxelKey::new(2, 0, 0, 0), TsdfVoxel::new(1.0)).unwrap();
        let mut buf = Vec::new();
        write_tsdf_dump(&mut buf, &spec, &v).unwrap();
        assert_eq!(&buf[..4], b"SSTV");
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 24 + 8 + 2 * 16);
        let back = read_tsdf_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back.volume, v);
        assert_eq!(back.voxel_size, 0.04);
        assert_eq!(back.origin, spec.origin);

        buf[0] = b'X';
        assert!(read_tsdf_dump(&mut buf.as_slice()).is_err());
    }
}
