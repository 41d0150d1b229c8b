mod common;

use comptrack_core::bev::{bev_entropy, pillarize_raw, GridGeometry};
use comptrack_core::scene::{generate_sequence, ObjectClass, PointCloud, SceneParams};
use common::{entropy_cases, grid_with_occupancy};
use proptest::prelude::*;

#[test]
fn entropy_matches_hand_arithmetic() {
    for (h, w, occ, hfg, bits) in entropy_cases() {
        let g = grid_with_occupancy(h, w, occ);
        assert_eq!(g.occupied_cells(), occ);
        let got = bev_entropy(&g, hfg);
        assert!((got - bits).abs() <= 1e-12 * bits.max(1.0), "{h}x{w} occ {occ}: {got} vs {bits}");
    }
    assert_eq!(bev_entropy(&grid_with_occupancy(32, 32, 0), 5.0), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pillarization_ignores_point_order_and_keeps_counts(seed in 0u64..1000, rot in 1usize..500) {
        let seq = generate_sequence(&SceneParams::new(seed, 2, ObjectClass::Car)).unwrap();
        let geom = GridGeometry::for_class(ObjectClass::Car, 32, 32);
        let mut pts = seq.frames[1].points.clone();
        let reference = pillarize_raw(&PointCloud::new(pts.clone()), &geom);
        let n = pts.len();
        pts.rotate_left(rot % n);
        pts.reverse();
        let shuffled = pillarize_raw(&PointCloud::new(pts.clone()), &geom);
        prop_assert_eq!(&reference, &shuffled);
        let inside = pts.iter().filter(|p| geom.cell_of(p[0], p[1]).is_some()).count();
        prop_assert_eq!(reference.total_points(), inside);
    }
}
