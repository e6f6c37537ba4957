use ctxforest_core::distance::{extract_band, signed_distance_transform};
use ctxforest_core::features::precompute_context;
use ctxforest_core::phantom::{generate_phantom, PhantomSpec};
use ctxforest_core::{Bone, Geometry, LabelVolume, Palette, VoxelIndex};
use proptest::prelude::*;

/// Distance to the nearest voxel centre of the opposite class, negative inside.
fn brute_force_sdt(mask: &LabelVolume, label: u8) -> Vec<f64> {
    let g = mask.geometry();
    let pos: Vec<[f64; 3]> = (0..g.len())
        .map(|i| {
            let v = g.voxel(i);
            [
                v.x as f64 * g.spacing[0],
                v.y as f64 * g.spacing[1],
                v.z as f64 * g.spacing[2],
            ]
        })
        .collect();
    (0..g.len())
        .map(|i| {
            let inside = mask.at(i) == label;
            let d2 = (0..g.len())
                .filter(|&j| (mask.at(j) == label) != inside)
                .map(|j| (0..3).map(|a| (pos[i][a] - pos[j][a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if inside {
                -d2.sqrt()
            } else {
                d2.sqrt()
            }
        })
        .collect()
}

fn mask_strategy() -> impl Strategy<Value = (Geometry, Vec<u8>)> {
    (
        1usize..=7,
        1usize..=7,
        1usize..=7,
        0.3f64..2.5,
        0.3f64..2.5,
        0.3f64..2.5,
        0.05f64..0.9,
    )
        .prop_flat_map(|(nx, ny, nz, sx, sy, sz, p)| {
            let g = Geometry::new([nx, ny, nz], [sx, sy, sz], [0.0; 3]).unwrap();
            let n = g.len();
            (Just(g), proptest::collection::vec(proptest::bool::weighted(p), n))
                .prop_map(|(g, bits)| (g, bits.into_iter().map(u8::from).collect()))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sdt_matches_brute_force((g, labels) in mask_strategy()) {
        let ones = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(ones > 0 && ones < labels.len());
        let mask = LabelVolume::new(g, labels, Palette::bones()).unwrap();
        let fast = signed_distance_transform(&mask, 1).unwrap();
        let oracle = brute_force_sdt(&mask, 1);
        for (a, b) in fast.data().iter().zip(&oracle) {
            prop_assert!((f64::from(*a) - b).abs() <= 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn band_equals_predicate_scan() {
    let spec = PhantomSpec::with_dims([16, 16, 16]);
    let p = generate_phantom(&spec, 0).unwrap();
    let maps: Vec<_> = Bone::ALL
        .iter()
        .map(|b| signed_distance_transform(&p.bone_mask, b.label()).unwrap())
        .collect();
    let band = extract_band([&maps[0], &maps[1], &maps[2]], 2.0, 10.0).unwrap();
    let g = p.bone_mask.geometry();
    let expected: Vec<usize> = (0..g.len())
        .filter(|&i| maps.iter().any(|m| (-2.0..=10.0).contains(&f64::from(m.at(i)))))
        .collect();
    assert_eq!(band.voxels(), expected.as_slice());
    assert!(!band.is_empty());
}

#[test]
fn phantom_distance_maps_negative_exactly_inside() {
    let spec = PhantomSpec::with_dims([32, 32, 32]);
    let p = generate_phantom(&spec, 1).unwrap();
    let ctx = precompute_context(&p.intensity, &p.bone_mask, &p.landmarks, None).unwrap();
    for bone in Bone::ALL {
        let d = ctx.distance(bone);
        for i in 0..d.data().len() {
            assert_eq!(d.at(i) < 0.0, p.bone_mask.at(i) == bone.label());
        }
    }
}

#[test]
fn anisotropic_line() {
    let g = Geometry::new([1, 1, 4], [1.0, 1.0, 2.5], [0.0; 3]).unwrap();
    let mask = LabelVolume::new(g, vec![1, 0, 0, 0], Palette::bones()).unwrap();
    let d = signed_distance_transform(&mask, 1).unwrap();
    assert_eq!(d.data(), &[-2.5, 2.5, 5.0, 7.5]);
    assert_eq!(d.get(VoxelIndex::new(0, 0, 3)), 7.5);
}
