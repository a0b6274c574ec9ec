use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use super::tables::{EDGE_TABLE, TRI_TABLE};
use super::Mesh;
use crate::geom::Vec3;
use crate::volume::{GridSpec, SparseVolume, TsdfVoxel, VoxelKey};

const CORNERS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// How cube corners absent from the sparse volume are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingCorner {
    /// As `+1`, outside the truncation band.
    #[default]
    Outside,
    /// Cubes with any absent corner produce no triangles.
    Skip,
}

/// Welding key: either a lattice point (crossing exactly at a corner) or the
/// edge from a lattice point along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum VertexKey {
    Corner([i32; 3]),
    Edge([i32; 3], u8),
}

fn add(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Crossing on the lattice edge `lo -> hi` (hi = lo + unit axis).
fn crossing(spec: &GridSpec, level: u8, lo: [i32; 3], hi: [i32; 3], vl: f64, vh: f64) -> (VertexKey, Vec3) {
    let pl = spec.key_center(VoxelKey::new(level, lo[0], lo[1], lo[2]));
    let ph = spec.key_center(VoxelKey::new(level, hi[0], hi[1], hi[2]));
    let t = vl / (vl - vh);
    if t <= 0.0 {
        return (VertexKey::Corner(lo), pl);
    }
    if t >= 1.0 {
        return (VertexKey::Corner(hi), ph);
    }
    let axis = (0..3).find(|&a| lo[a] != hi[a]).expect("distinct endpoints") as u8;
    (VertexKey::Edge(lo, axis), pl + (ph - pl) * t)
}

pub fn marching_cubes(tsdf: &SparseVolume<TsdfVoxel>, spec: &GridSpec) -> Mesh {
    marching_cubes_with(tsdf, spec, MissingCorner::Outside)
}

/// Marching cubes at the zero level set; negative values are inside.
/// Output is deterministic: cubes are visited in key order and vertices are
/// numbered by first use.
pub fn marching_cubes_with(tsdf: &SparseVolume<TsdfVoxel>, spec: &GridSpec, missing: MissingCorner) -> Mesh {
    let level = tsdf.level();
    let anchors: Vec<[i32; 3]> = match missing {
        MissingCorner::Skip => tsdf.sorted_keys().iter().map(|k| [k.ix, k.iy, k.iz]).collect(),
        MissingCorner::Outside => {
            let mut set = BTreeSet::new();
            for k in tsdf.keys() {
                for c in CORNERS {
                    set.insert([k.ix - c[0], k.iy - c[1], k.iz - c[2]]);
                }
            }
            set.into_iter().collect()
        }
    };
    let value = |p: [i32; 3]| -> Option<f64> {
        tsdf.get(&VoxelKey::new(level, p[0], p[1], p[2]))
            .map(|v| v.tsdf as f64)
    };

    let cubes: Vec<Vec<[(VertexKey, Vec3); 3]>> = anchors
        .par_iter()
        .map(|&a| {
            let mut vals = [0f64; 8];
            for (i, c) in CORNERS.iter().enumerate() {
                vals[i] = match (value(add(a, *c)), missing) {
                    (Some(v), _) => v,
                    (None, MissingCorner::Outside) => 1.0,
                    (None, MissingCorner::Skip) => return Vec::new(),
                };
            }
            let mut index = 0usize;
            for (i, v) in vals.iter().enumerate() {
                if *v < 0.0 {
                    index |= 1 << i;
                }
            }
            if EDGE_TABLE[index] == 0 {
                return Vec::new();
            }
            let mut edge_vertex: [Option<(VertexKey, Vec3)>; 12] = [None; 12];
            for (e, &(i, j)) in EDGES.iter().enumerate() {
                if EDGE_TABLE[index] & (1 << e) == 0 {
                    continue;
                }
                let (pi, pj) = (add(a, CORNERS[i]), add(a, CORNERS[j]));
                // canonical direction so shared edges interpolate identically
                edge_vertex[e] = Some(if pi <= pj {
                    crossing(spec, level, pi, pj, vals[i], vals[j])
                } else {
                    crossing(spec, level, pj, pi, vals[j], vals[i])
                });
            }
            TRI_TABLE[index]
                .chunks(3)
                .take_while(|t| t[0] >= 0)
                .map(|t| [t[0], t[1], t[2]].map(|e| edge_vertex[e as usize].expect("edge flagged in table")))
                .map(|[x, y, z]| [x, z, y])
                .collect()
        })
        .collect();

    let mut mesh = Mesh::default();
    let mut index: HashMap<VertexKey, u32> = HashMap::new();
    for tri in cubes.into_iter().flatten() {
        let ids = tri.map(|(key, pos)| {
            *index.entry(key).or_insert_with(|| {
                mesh.vertices.push(pos);
                (mesh.vertices.len() - 1) as u32
            })
        });
        if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
            continue;
        }
        let [p, q, r] = ids.map(|i| mesh.vertices[i as usize]);
        if (q - p).cross(&(r - p)).norm_squared() == 0.0 {
            continue;
        }
        mesh.triangles.push(ids);
    }
    mesh
}

/// Interpolated zero crossings along lattice edges between present voxels.
pub fn zero_crossings(tsdf: &SparseVolume<TsdfVoxel>, spec: &GridSpec) -> Vec<Vec3> {
    let level = tsdf.level();
    let mut out = Vec::new();
    for (k, v) in tsdf.sorted_entries() {
        let lo = [k.ix, k.iy, k.iz];
        for axis in 0..3 {
            let mut hi = lo;
            hi[axis] += 1;
            let Some(w) = tsdf.get(&VoxelKey::new(level, hi[0], hi[1], hi[2])) else {
                continue;
            };
            let (a, b) = (v.tsdf as f64, w.tsdf as f64);
            if (a < 0.0) != (b < 0.0) {
                out.push(crossing(spec, level, lo, hi, a, b).1);
            }
        }
    }
    out
}
