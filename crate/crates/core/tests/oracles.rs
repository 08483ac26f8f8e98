mod common;

use common::*;
use esoseg_core::inference::{label_components, largest_component};
use esoseg_core::metrics::{dice_coefficient, evaluate_scan, hausdorff, hausdorff95, mean_surface_distance};
use esoseg_core::{BinaryMask, Geometry};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(seed: u64, max_dim: usize) -> (BinaryMask, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = random_geometry(&mut rng, max_dim);
    (random_mask(&mut rng, geom), random_mask(&mut rng, geom))
}

#[test]
fn metrics_match_brute_force() {
    for seed in 0..60 {
        let (a, b) = pair(seed, 10);
        check_metrics(&a, &b).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn signed_distance_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    while checked < 30 {
        let geom = random_geometry(&mut rng, 9);
        let m = random_mask(&mut rng, geom);
        if m.count() == m.voxels().len() {
            continue;
        }
        check_sdf(&m).unwrap();
        checked += 1;
    }
}

#[test]
fn components_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let geom = random_geometry(&mut rng, 12);
        check_components(&random_noise(&mut rng, geom)).unwrap();
    }
}

#[test]
fn hand_checked_pair() {
    // Two single voxels 3 apart along z with 2 mm slices.
    let geom = Geometry::new([4, 4, 6], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
    let mut a = vec![false; geom.len()];
    let mut b = vec![false; geom.len()];
    a[geom.index(1, 1, 1)] = true;
    b[geom.index(1, 1, 4)] = true;
    let (a, b) = (BinaryMask::new(geom, a).unwrap(), BinaryMask::new(geom, b).unwrap());
    let m = evaluate_scan(&a, &b).unwrap();
    assert_eq!(m.dsc, 0.0);
    assert_eq!(m.msd, Some(6.0));
    assert_eq!(m.hd95, Some(6.0));
    assert_eq!(m.crd, Some(6.0));
    assert_eq!(m.cad, Some(6.0));
}

#[test]
fn diagonal_components_join() {
    let geom = Geometry::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
    let mut v = vec![false; geom.len()];
    v[geom.index(0, 0, 0)] = true;
    v[geom.index(1, 1, 1)] = true;
    v[geom.index(2, 2, 0)] = true;
    let (_, sizes) = label_components(&BinaryMask::new(geom, v).unwrap());
    assert_eq!(sizes, vec![3]);
}

fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    any::<u64>().prop_map(|s| pair(s, 8))
}

fn shift_z(m: &BinaryMask, by: usize) -> BinaryMask {
    let g = m.geometry();
    let [nx, ny, nz] = g.dims;
    let big = Geometry::new([nx, ny, nz + by], g.spacing, g.origin).unwrap();
    let mut v = vec![false; big.len()];
    for c in coords(g.dims) {
        v[big.index(c[0], c[1], c[2] + by)] = m.get(c[0], c[1], c[2]);
    }
    BinaryMask::new(big, v).unwrap()
}

fn pad_z(m: &BinaryMask, by: usize) -> BinaryMask {
    let g = m.geometry();
    let big = Geometry::new([g.dims[0], g.dims[1], g.dims[2] + by], g.spacing, g.origin).unwrap();
    let mut v = m.voxels().to_vec();
    v.resize(big.len(), false);
    BinaryMask::new(big, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_metrics((a, b) in arb_pair()) {
        prop_assert_eq!(dice_coefficient(&a, &b).unwrap(), dice_coefficient(&b, &a).unwrap());
        prop_assert_eq!(mean_surface_distance(&a, &b).unwrap(), mean_surface_distance(&b, &a).unwrap());
        prop_assert_eq!(hausdorff95(&a, &b).unwrap(), hausdorff95(&b, &a).unwrap());
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
    }

    #[test]
    fn hd95_bounded_by_hd((a, b) in arb_pair()) {
        let msd = mean_surface_distance(&a, &b).unwrap();
        let hd95 = hausdorff95(&a, &b).unwrap();
        let hd = hausdorff(&a, &b).unwrap();
        prop_assert!(hd95 <= hd);
        prop_assert!(msd <= hd);
    }

    #[test]
    fn self_comparison_is_perfect((a, _) in arb_pair()) {
        let m = evaluate_scan(&a, &a).unwrap();
        prop_assert_eq!(m.dsc, 1.0);
        prop_assert_eq!(m.msd, Some(0.0));
        prop_assert_eq!(m.hd95, Some(0.0));
        prop_assert_eq!((m.crd, m.cad), (Some(0.0), Some(0.0)));
    }

    /// Once both masks are clear of the z border, moving them together
    /// along z changes nothing.
    #[test]
    fn translation_invariant((a, b) in arb_pair(), by in 1usize..4) {
        let interior = |m: &BinaryMask, n: usize| shift_z(&pad_z(m, n), n);
        let near = evaluate_scan(&interior(&a, 1), &interior(&b, 1)).unwrap();
        let far = evaluate_scan(&interior(&a, 1 + by), &interior(&b, 1 + by)).unwrap();
        prop_assert_eq!(near, far);
    }

    #[test]
    fn largest_component_laws(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = random_geometry(&mut rng, 10);
        let m = random_noise(&mut rng, geom);
        let l = largest_component(&m);
        prop_assert_eq!(&largest_component(&l), &l);
        prop_assert!(l.voxels().iter().zip(m.voxels()).all(|(&x, &y)| !x || y));
        prop_assert!(label_components(&l).1.len() <= 1);
        let biggest = label_components(&m).1.into_iter().max().unwrap_or(0);
        prop_assert_eq!(l.count(), biggest);
    }
}
