mod support;

use std::f64::consts::PI;

use xct_core::geometry::{build_system_matrix, make_geometry, trace_ray, ScanGeometry};

#[test]
fn diagonal_rays_match_ray_marching() {
    let g = ScanGeometry::from_angles(vec![PI / 4.0], 1, 8).unwrap();
    for c in 0..8 {
        let traced = trace_ray(&g, 0, c).unwrap();
        let oracle = support::march_ray(PI / 4.0, g.detector_offset(c), 8, 1.0);
        support::segments_match(&traced.entries, &oracle, 1e-6)
            .unwrap_or_else(|e| panic!("column {c}: {e}"));
    }
}

#[test]
fn every_row_matches_oracle_on_small_scan() {
    let g = make_geometry(12, 1, 16, 0.05, 0.05 + PI)
        .unwrap()
        .with_voxel_size(0.25)
        .unwrap();
    let a = build_system_matrix(&g).unwrap();
    for r in 0..a.nrows() {
        let (k, c) = (r / 16, r % 16);
        let row: Vec<(usize, f64)> = a.row(r).collect();
        let oracle = support::march_ray(g.angles()[k], g.detector_offset(c), 16, 0.25);
        support::segments_match(&row, &oracle, 1e-6).unwrap_or_else(|e| panic!("ray {r}: {e}"));
        let chord = support::chord_length(g.angles()[k], g.detector_offset(c), 16, 0.25);
        let sum: f64 = row.iter().map(|e| e.1).sum();
        assert!((sum - chord).abs() <= 1e-9 * chord);
    }
}
