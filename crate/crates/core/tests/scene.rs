use comptrack_core::bev::{pillarize_raw, GridGeometry};
use comptrack_core::linalg::{effective_rank, svd_thin};
use comptrack_core::scene::{crop_search_region, generate_sequence, ObjectClass, PointCloud, SceneParams};
use comptrack_core::DenseMatrix;

/// Effective rank (τ = 0.99) of the pillar features of object cells, pooled over all frames.
fn foreground_rank(seed: u64, surface_bias: f64) -> usize {
    let mut p = SceneParams::new(seed, 8, ObjectClass::Car);
    p.surface_bias = surface_bias;
    let seq = generate_sequence(&p).unwrap();
    let geom = GridGeometry::for_class(ObjectClass::Car, 32, 32);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (t, frame) in seq.frames.iter().enumerate() {
        let n_obj = seq.meta.object_points[t];
        let obj = PointCloud::new(frame.points[..n_obj].to_vec());
        let crop = crop_search_region(&obj, &seq.gt_boxes[t], ObjectClass::Car);
        let raw = pillarize_raw(&crop, &geom);
        for (i, &c) in raw.counts.iter().enumerate() {
            if c > 0 {
                rows.push(raw.raw.row(i).to_vec());
            }
        }
    }
    let x = DenseMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    effective_rank(&svd_thin(&x).unwrap(), 0.99).unwrap().k
}

#[test]
fn planar_surfaces_lower_foreground_rank() {
    let pairs: Vec<(usize, usize)> = (0..50).map(|s| (foreground_rank(s, 1.0), foreground_rank(s, 0.0))).collect();
    let lower = pairs.iter().filter(|(a, b)| a < b).count();
    assert!(lower >= 45, "surface_bias = 1 lower on {lower}/50: {pairs:?}");
}
