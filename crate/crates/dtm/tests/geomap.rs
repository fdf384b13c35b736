//! Geometry-map tests: boundary curves, Gordon-Hall patches, patch
//! inversion, region labeling, and the 1D piecewise-linear map.

use approx::{assert_abs_diff_eq, assert_relative_eq};
use dtm::geomap::{
    check_bijectivity, check_corners, f_naca, gordon_hall_eval, gordon_hall_invert,
    precompute_regions, Curve, GordonHallPatch, PiecewiseLinearMap1D, Region, RegionedMap,
};
use dtm::mesh::rect_mesh;
use dtm::quad::gauss_rule;
use rand::{Rng, SeedableRng};

fn seg(a: [f64; 2], b: [f64; 2]) -> Curve {
    Curve::Segment { a, b }
}

/// Unit-square patch with a parameterized bump on the south wall; the map is
/// the identity when the bump height vanishes.
fn bump_patch() -> GordonHallPatch {
    GordonHallPatch {
        south: Curve::BumpWall {
            x_a: 0.0,
            x_b: 1.0,
            sup0: 0.1,
            sup1: 0.9,
            height_idx: 0,
            slant_idx: 1,
        },
        north: seg([0.0, 1.0], [1.0, 1.0]),
        west: Curve::BumpVertical {
            x: 0.0,
            y_top: 1.0,
            sup0: 0.1,
            sup1: 0.9,
            height_idx: 0,
            slant_idx: 1,
        },
        east: Curve::BumpVertical {
            x: 1.0,
            y_top: 1.0,
            sup0: 0.1,
            sup1: 0.9,
            height_idx: 0,
            slant_idx: 1,
        },
    }
}

#[test]
fn segment_endpoints_and_midpoint() {
    let c = seg([1.0, 2.0], [3.0, -2.0]);
    assert_eq!(c.eval(0.0, &[]), [1.0, 2.0]);
    assert_eq!(c.eval(1.0, &[3.0, -2.0]), [3.0, -2.0]);
    assert_eq!(c.eval(0.5, &[]), [2.0, 0.0]);
}

#[test]
fn naca_profile_basics() {
    assert_eq!(f_naca(0.0, 0.12), 0.0);
    // Linear in the thickness parameter.
    assert_relative_eq!(f_naca(0.3, 0.24), 2.0 * f_naca(0.3, 0.12), epsilon = 1e-14);
    // Max thickness of the 0.12 profile is about 0.06 near 30% chord.
    let peak = (0..=100).map(|i| f_naca(i as f64 / 100.0, 0.12)).fold(0.0f64, f64::max);
    assert!((peak - 0.06).abs() < 0.002, "peak {peak}");
    // Closed trailing edge.
    assert_abs_diff_eq!(f_naca(1.0, 0.12), 0.0, epsilon = 1e-14);
}

#[test]
fn naca_side_curve_is_continuous_and_hits_breakpoints() {
    let c = Curve::NacaSide { sign: 1.0, thickness_idx: 0, x_start: -2.0, x_end: 6.0 };
    let mu = [0.12];
    assert_eq!(c.eval(0.0, &mu), [-2.0, 0.0]);
    assert_eq!(c.eval(1.0, &mu), [6.0, 0.0]);
    // Leading edge at the first breakpoint, trailing edge at the second.
    assert_abs_diff_eq!(c.eval(0.25, &mu)[0], 0.0, epsilon = 1e-14);
    assert_abs_diff_eq!(c.eval(0.75, &mu)[0], 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(c.eval(0.75, &mu)[1], 0.0, epsilon = 1e-14);
    // No jumps across the whole parameter range.
    let mut prev = c.eval(0.0, &mu);
    for i in 1..=2000 {
        let p = c.eval(i as f64 / 2000.0, &mu);
        let d = ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
        assert!(d < 0.02, "jump {d} at t={}", i as f64 / 2000.0);
        prev = p;
    }
}

#[test]
fn bump_wall_vanishes_outside_support() {
    let c = Curve::BumpWall {
        x_a: 0.0,
        x_b: 3.0,
        sup0: 0.75,
        sup1: 2.25,
        height_idx: 0,
        slant_idx: 1,
    };
    let mu = [0.2, 1.1];
    assert_eq!(c.eval(0.0, &mu), [0.0, 0.0]);
    assert_eq!(c.eval(1.0, &mu), [3.0, 0.0]);
    assert_eq!(c.eval(0.2, &mu)[1], 0.0); // x = 0.6 < 0.75
    // Interior of the support: positive, bounded by the height parameter.
    let mid = c.eval(0.5, &mu)[1];
    assert!(mid > 0.0 && mid <= 0.2 + 1e-14, "mid {mid}");
}

#[test]
fn transfinite_map_reproduces_straight_sided_quad() {
    // With straight edges the transfinite map reduces to the bilinear map.
    let p = GordonHallPatch {
        south: seg([0.0, 0.0], [2.0, 0.5]),
        north: seg([-0.5, 2.0], [2.5, 3.0]),
        west: seg([0.0, 0.0], [-0.5, 2.0]),
        east: seg([2.0, 0.5], [2.5, 3.0]),
    };
    check_corners(&p, &[]).unwrap();
    let corners = [[0.0, 0.0], [2.0, 0.5], [-0.5, 2.0], [2.5, 3.0]];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (s, t) = (rng.random::<f64>(), rng.random::<f64>());
        let got = gordon_hall_eval(&p, s, t, &[]);
        for d in 0..2 {
            let bilinear = (1.0 - s) * (1.0 - t) * corners[0][d]
                + s * (1.0 - t) * corners[1][d]
                + (1.0 - s) * t * corners[2][d]
                + s * t * corners[3][d];
            assert_abs_diff_eq!(got[d], bilinear, epsilon = 1e-13);
        }
    }
}

#[test]
fn transfinite_map_interpolates_boundary_curves() {
    let p = bump_patch();
    let mu = [0.2, 1.3];
    check_corners(&p, &mu).unwrap();
    for i in 0..=20 {
        let s = i as f64 / 20.0;
        let south = p.south.eval(s, &mu);
        let got = gordon_hall_eval(&p, s, 0.0, &mu);
        assert_abs_diff_eq!(got[0], south[0], epsilon = 1e-13);
        assert_abs_diff_eq!(got[1], south[1], epsilon = 1e-13);
        let north = p.north.eval(s, &mu);
        let got = gordon_hall_eval(&p, s, 1.0, &mu);
        assert_abs_diff_eq!(got[0], north[0], epsilon = 1e-13);
        assert_abs_diff_eq!(got[1], north[1], epsilon = 1e-13);
    }
}

#[test]
fn corner_mismatch_is_rejected() {
    let mut p = bump_patch();
    p.north = seg([0.0, 1.0], [1.0, 1.5]); // east(1) no longer matches
    let err = check_corners(&p, &[0.1, 1.0]).unwrap_err();
    assert!(err.to_string().contains("corner mismatch"), "{err}");
}

#[test]
fn inversion_round_trips_interior_points() {
    let p = bump_patch();
    let mu = [0.18, 0.9];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let st = [rng.random::<f64>(), rng.random::<f64>()];
        let x = gordon_hall_eval(&p, st[0], st[1], &mu);
        let back = gordon_hall_invert(&p, x, &mu).unwrap();
        assert_abs_diff_eq!(back[0], st[0], epsilon = 1e-9);
        assert_abs_diff_eq!(back[1], st[1], epsilon = 1e-9);
        // The defining property holds to the Newton tolerance.
        let fwd = gordon_hall_eval(&p, back[0], back[1], &mu);
        assert_abs_diff_eq!(fwd[0], x[0], epsilon = 1e-11);
        assert_abs_diff_eq!(fwd[1], x[1], epsilon = 1e-11);
    }
}

#[test]
fn inversion_rejects_far_exterior_points() {
    let p = bump_patch();
    assert!(gordon_hall_invert(&p, [5.0, 5.0], &[0.1, 1.0]).is_err());
}

#[test]
fn region_labels_identity_at_reference_parameter() {
    let mesh = rect_mesh(6, 6, [0.0, 1.0, 0.0, 1.0], 2, 1).unwrap();
    let regions = vec![Region::Patch { patch: bump_patch() }];
    // Zero bump height: the patch map is the identity at mu_bar.
    let rmap = precompute_regions(&mesh, regions, vec![0.0, 1.0]).unwrap();
    assert!(rmap.node_labels.iter().all(|&l| l == 0));
    let all: Vec<usize> = (0..mesh.n_nodes()).collect();
    let mapped = rmap.map_nodes(&rmap.mu_bar.clone(), &all);
    for (got, want) in mapped.iter().zip(&mesh.nodes) {
        assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-9);
        assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-9);
    }
}

#[test]
fn region_map_moves_wall_nodes_with_the_bump() {
    let mesh = rect_mesh(8, 8, [0.0, 1.0, 0.0, 1.0], 2, 1).unwrap();
    let regions = vec![Region::Patch { patch: bump_patch() }];
    let rmap = precompute_regions(&mesh, regions, vec![0.0, 1.0]).unwrap();
    let mu = [0.15, 1.0];
    let all: Vec<usize> = (0..mesh.n_nodes()).collect();
    let mapped = rmap.map_nodes(&mu, &all);
    let mut moved = 0usize;
    for (j, x) in mesh.nodes.iter().enumerate() {
        // The top wall is pinned; wall nodes over the bump support move up.
        if (x[1] - 1.0).abs() < 1e-12 {
            assert_abs_diff_eq!(mapped[j][1], 1.0, epsilon = 1e-9);
        }
        if x[1].abs() < 1e-12 && x[0] > 0.2 && x[0] < 0.8 {
            assert!(mapped[j][1] > 0.01, "wall node {j} did not rise: {:?}", mapped[j]);
            moved += 1;
        }
    }
    assert!(moved > 0);
    // Deformed elements stay valid.
    let quad = gauss_rule(2, 4).unwrap();
    let deformed: Vec<_> = (0..mesh.n_elems()).map(|k| rmap.deformed_element(&mesh, &mu, k)).collect();
    let report = check_bijectivity(&mesh, &deformed, &quad);
    assert!(report.min_det > 0.0, "min_det {}", report.min_det);
    assert!(report.offending.is_empty());
}

#[test]
fn identity_region_catches_uncovered_nodes() {
    let mesh = rect_mesh(4, 4, [0.0, 1.0, 0.0, 1.0], 1, 1).unwrap();
    // Patch covers only the lower half of the channel.
    let lower = GordonHallPatch {
        south: seg([0.0, 0.0], [1.0, 0.0]),
        north: seg([0.0, 0.5], [1.0, 0.5]),
        west: seg([0.0, 0.0], [0.0, 0.5]),
        east: seg([1.0, 0.0], [1.0, 0.5]),
    };
    let regions = vec![Region::Identity, Region::Patch { patch: lower }];
    let rmap = precompute_regions(&mesh, regions, vec![]).unwrap();
    for (j, x) in mesh.nodes.iter().enumerate() {
        if x[1] <= 0.5 + 1e-9 {
            assert_eq!(rmap.node_labels[j], 1, "node {j} at {x:?}");
        } else {
            assert_eq!(rmap.node_labels[j], 0, "node {j} at {x:?}");
        }
    }
}

#[test]
fn missing_identity_region_is_an_error() {
    let mesh = rect_mesh(3, 3, [0.0, 2.0, 0.0, 2.0], 1, 1).unwrap();
    let lower = GordonHallPatch {
        south: seg([0.0, 0.0], [2.0, 0.0]),
        north: seg([0.0, 0.5], [2.0, 0.5]),
        west: seg([0.0, 0.0], [0.0, 0.5]),
        east: seg([2.0, 0.0], [2.0, 0.5]),
    };
    let err = precompute_regions(&mesh, vec![Region::Patch { patch: lower }], vec![]).unwrap_err();
    assert!(err.to_string().contains("no declared region"), "{err}");
}

#[test]
fn regioned_map_serde_round_trip() {
    let mesh = rect_mesh(3, 3, [0.0, 1.0, 0.0, 1.0], 1, 1).unwrap();
    let rmap = precompute_regions(
        &mesh,
        vec![Region::Patch { patch: bump_patch() }],
        vec![0.0, 1.0],
    )
    .unwrap();
    let json = serde_json::to_string(&rmap).unwrap();
    let back: RegionedMap = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rmap);
}

#[test]
fn study_map_is_a_continuous_bijection() {
    let phi = PiecewiseLinearMap1D::study_map();
    assert_eq!(phi.eval(0.0), 0.0);
    assert_abs_diff_eq!(phi.eval(1.0), 1.0, epsilon = 1e-15);
    // Continuity at the breakpoint and distinct slopes.
    let left = phi.slope_left * phi.x0;
    assert_abs_diff_eq!(phi.eval(phi.x0), left, epsilon = 1e-15);
    assert!(phi.slope_right > phi.slope_left);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let x = rng.random::<f64>();
        assert_abs_diff_eq!(phi.invert(phi.eval(x)), x, epsilon = 1e-14);
        assert!(phi.deriv(x) > 0.0);
    }
}

#[test]
fn bijectivity_report_flags_inverted_elements() {
    let mesh = rect_mesh(2, 2, [0.0, 1.0, 0.0, 1.0], 1, 1).unwrap();
    let quad = gauss_rule(2, 2).unwrap();
    let mut deformed: Vec<_> = (0..mesh.n_elems()).map(|k| mesh.identity_deformed(k)).collect();
    // Mirror one element to flip its orientation.
    for c in deformed[0].coords.iter_mut() {
        c[0] = -c[0];
    }
    let report = check_bijectivity(&mesh, &deformed, &quad);
    assert!(report.min_det <= 0.0);
    assert_eq!(report.offending, vec![0]);
}
