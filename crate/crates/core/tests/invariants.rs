use fragrecon::geom::{backproject, project, Intrinsics, PixelCoord, Pose, Vec3};
use fragrecon::gstf::{sparse_conv3d, SparseConv3d};
use fragrecon::lstf::{fuse_stack, AttnParams, FusionMode, ViewStack};
use fragrecon::nn::Initializer;
use fragrecon::pipeline::schedule_fragments;
use fragrecon::synth::{make_trajectory, OrbitParams, TrajectoryMode, MAX_STEP_ROTATION, MAX_STEP_TRANSLATION};
use fragrecon::volume::{GridSpec, SparseVolume, VoxelKey};
use proptest::prelude::*;

fn intrinsics() -> Intrinsics {
    Intrinsics::new(80.0, 80.0, 31.5, 23.5, 64, 48).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backprojected_points_reproject(
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in -3.0f64..3.0,
        t in prop::array::uniform3(-4.0f64..4.0),
        u in 0.0f64..63.0,
        v in 0.0f64..47.0,
        d in 0.05f64..20.0,
    ) {
        prop_assume!(Vec3::from(axis).norm() > 1e-3);
        let mut pose = Pose::from_axis_angle(Vec3::from(axis).normalize(), angle);
        pose.translation = Vec3::from(t);
        let k = intrinsics();
        let p = backproject(&k, &pose, PixelCoord::new(u, v), d).unwrap();
        let (px, depth) = project(&k, &pose, &p).unwrap();
        prop_assert!((px.u - u).abs() < 1e-9 && (px.v - v).abs() < 1e-9);
        prop_assert!((depth - d).abs() < 1e-9);
    }

    #[test]
    fn voxel_children_point_back_to_parent(level in 0u8..2, ix in -500i32..500, iy in -500i32..500, iz in -500i32..500) {
        let key = VoxelKey::new(level, ix, iy, iz);
        let children = key.children();
        for c in children {
            prop_assert_eq!(c.parent(), Some(key));
        }
        let spec = GridSpec::default();
        // the parent center is the mean of its children's centers
        let mean = children.iter().map(|c| spec.key_center(*c)).sum::<Vec3>() / 8.0;
        prop_assert!((mean - spec.key_center(key)).norm() < 1e-9);
    }

    #[test]
    fn schedule_partitions_frames(n in 1usize..200, size in 1usize..20) {
        let frags = schedule_fragments(n, size).unwrap();
        let flat: Vec<usize> = frags.iter().flat_map(|r| r.clone()).collect();
        prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
        prop_assert!(frags.iter().all(|r| !r.is_empty() && r.len() <= size));
    }

    #[test]
    fn sparse_conv_never_dilates(
        raw in prop::collection::vec((prop::array::uniform3(-5i32..5), -1.0f32..1.0), 1..80),
        seed in 0u64..1000,
    ) {
        let vol = SparseVolume::from_entries(
            2,
            raw.iter().map(|(k, v)| (VoxelKey::new(2, k[0], k[1], k[2]), vec![*v, -*v])),
        ).unwrap();
        let out = sparse_conv3d(&vol, &SparseConv3d::new(2, 3, &mut Initializer::new(seed))).unwrap();
        prop_assert_eq!(out.key_set(), vol.key_set());
    }

    #[test]
    fn averaging_is_the_visible_mean(
        rows in prop::collection::vec((prop::collection::vec(-2.0f32..2.0, 6), any::<bool>()), 1..10),
    ) {
        prop_assume!(rows.iter().any(|(_, m)| *m));
        let features: Vec<f32> = rows.iter().flat_map(|(f, m)| if *m { f.clone() } else { vec![0.0; 6] }).collect();
        let mask: Vec<bool> = rows.iter().map(|(_, m)| *m).collect();
        let weights = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
        let stack = ViewStack::new(6, features, mask.clone(), weights).unwrap();
        let params = AttnParams::new(6, 4, &mut Initializer::new(0));
        let out = fuse_stack(&stack, &params, FusionMode::Averaging).unwrap();
        let n = mask.iter().filter(|m| **m).count() as f64;
        for ch in 0..6 {
            let mean = rows.iter().filter(|(_, m)| *m).map(|(f, _)| f[ch] as f64).sum::<f64>() / n;
            prop_assert!((out.pre_ff[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectories_respect_step_limits(n in 2usize..60, seed in 0u64..1000, walk in any::<bool>()) {
        let mode = if walk { TrajectoryMode::Walk } else { TrajectoryMode::Orbit };
        let traj = make_trajectory(n, mode, &OrbitParams::default(), seed).unwrap();
        prop_assert_eq!(traj.poses.len(), n);
        for w in traj.poses.windows(2) {
            prop_assert!((w[1].translation - w[0].translation).norm() <= MAX_STEP_TRANSLATION + 1e-9);
            prop_assert!(w[0].rotation_angle_to(&w[1]) <= MAX_STEP_ROTATION + 1e-9);
        }
    }
}
