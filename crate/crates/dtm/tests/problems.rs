//! Problem-definition tests: boundary data, curved mesh generation, region
//! labeling, and high-fidelity solves on the built-in problems.

use approx::assert_abs_diff_eq;
use dtm::fe::{
    gather, global_assemble, hf_solve_linear, hf_solve_newton, identity_shape_tensors,
    local_tensors, shape_tensors, LaplaceKernel, NewtonOptions, Source,
};
use dtm::geomap::{check_bijectivity, precompute_regions};
use dtm::problems::{airfoil_datum, boundary_node_tags, Problem, AIRFOIL_H};
use dtm::quad::gauss_rule;
use nalgebra::DVector;

#[test]
fn problem_ids_round_trip() {
    for p in [Problem::Study1D, Problem::Airfoil, Problem::Burgers] {
        assert_eq!(Problem::from_id(p.id()).unwrap(), p);
    }
    assert!(Problem::from_id("navier-stokes").is_err());
}

// ------------------------------------------------------------------
// Airfoil datum
// ------------------------------------------------------------------

#[test]
fn airfoil_datum_piecewise_values() {
    let mu = [0.12, 0.12, 0.2, 0.7];
    assert_eq!(airfoil_datum("bottom", [1.0, -AIRFOIL_H], &mu).unwrap(), 0.0);
    assert_eq!(airfoil_datum("top", [1.0, AIRFOIL_H], &mu).unwrap(), 1.0);
    assert_eq!(airfoil_datum("naca", [0.3, 0.05], &mu).unwrap(), 1.0);
    assert_abs_diff_eq!(airfoil_datum("outflow", [6.0, 0.0], &mu).unwrap(), 0.5, epsilon = 1e-15);
    // Inflow endpoints are pinned to 0 and 1 by the normalization.
    assert_abs_diff_eq!(
        airfoil_datum("inflow", [-2.0, -AIRFOIL_H], &mu).unwrap(),
        0.0,
        epsilon = 1e-15
    );
    assert_abs_diff_eq!(
        airfoil_datum("inflow", [-2.0, AIRFOIL_H], &mu).unwrap(),
        1.0,
        epsilon = 1e-15
    );
    assert!(airfoil_datum("wing", [0.0, 0.0], &mu).is_err());
}

#[test]
fn airfoil_datum_is_continuous_at_box_corners() {
    let mu = [0.1, 0.14, 0.25, 0.65];
    // Inflow meets bottom and top; outflow meets bottom and top.
    let pairs = [
        ("inflow", "bottom", [-2.0, -AIRFOIL_H]),
        ("inflow", "top", [-2.0, AIRFOIL_H]),
        ("outflow", "bottom", [6.0, -AIRFOIL_H]),
        ("outflow", "top", [6.0, AIRFOIL_H]),
    ];
    for (a, b, x) in pairs {
        let va = airfoil_datum(a, x, &mu).unwrap();
        let vb = airfoil_datum(b, x, &mu).unwrap();
        assert!((va - vb).abs() < 1e-12, "corner {a}/{b}: {va} vs {vb}");
    }
}

#[test]
fn airfoil_datum_inflow_profile_is_monotone() {
    let mu = [0.12, 0.12, 0.1, 0.8];
    let mut prev = -1.0;
    for i in 0..=50 {
        let y = -AIRFOIL_H + 2.0 * AIRFOIL_H * i as f64 / 50.0;
        let v = airfoil_datum("inflow", [-2.0, y], &mu).unwrap();
        assert!(v >= prev, "profile not monotone at y = {y}");
        prev = v;
    }
}

// ------------------------------------------------------------------
// Airfoil mesh and geometry map
// ------------------------------------------------------------------

#[test]
fn airfoil_mesh_is_valid_and_fully_tagged() {
    let mesh = Problem::Airfoil.build_mesh(4).unwrap();
    mesh.validate().unwrap();
    assert_eq!(mesh.order, 3);
    assert_eq!(mesh.geom_order, 3);
    // 2 patches x (4n x n) cells x 2 triangles.
    assert_eq!(mesh.n_elems(), 2 * 16 * 4 * 2);
    let mut tags: Vec<&str> = mesh.facets.iter().map(|f| f.tag.as_str()).collect();
    tags.sort();
    tags.dedup();
    assert_eq!(tags, ["bottom", "inflow", "naca", "outflow", "top"]);
    // Every boundary edge is tagged exactly once.
    assert_eq!(mesh.facets.len(), mesh.boundary_edge_set().len());
    // The airfoil surface sits inside the unit chord box.
    for f in &mesh.facets {
        if f.tag == "naca" {
            for &loc in &mesh.ref_elem.facet_nodes(f.local_facet) {
                let x = mesh.nodes[mesh.elems[f.elem][loc]];
                assert!((0.0..=1.0).contains(&x[0]), "naca node at {x:?}");
                assert!(x[1].abs() < 0.07, "naca node at {x:?}");
            }
        }
    }
}

#[test]
fn airfoil_region_map_is_identity_at_the_reference_parameter() {
    let problem = Problem::Airfoil;
    let mesh = problem.build_mesh(3).unwrap();
    let rmap = precompute_regions(&mesh, problem.regions(), problem.mu_bar()).unwrap();
    let all: Vec<usize> = (0..mesh.n_nodes()).collect();
    let mapped = rmap.map_nodes(&problem.mu_bar(), &all);
    let mut worst = 0.0f64;
    for (got, want) in mapped.iter().zip(&mesh.nodes) {
        let d = ((got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2)).sqrt();
        worst = worst.max(d);
    }
    assert!(worst < 1e-8, "worst identity error {worst:.3e}");
}

#[test]
fn airfoil_deformation_moves_the_surface_and_stays_bijective() {
    let problem = Problem::Airfoil;
    let mesh = problem.build_mesh(3).unwrap();
    let rmap = precompute_regions(&mesh, problem.regions(), problem.mu_bar()).unwrap();
    let quad = gauss_rule(2, 6).unwrap();
    for mu in [[0.09, 0.15, 0.1, 0.6], [0.15, 0.09, 0.3, 0.8], [0.09, 0.09, 0.2, 0.7]] {
        let deformed: Vec<_> =
            (0..mesh.n_elems()).map(|k| rmap.deformed_element(&mesh, &mu, k)).collect();
        let report = check_bijectivity(&mesh, &deformed, &quad);
        assert!(report.min_det > 0.0, "min det {:.3e} at mu {mu:?}", report.min_det);
        // Far-field boundary nodes do not move; surface nodes do when the
        // thickness changes.
        let mut surface_moved = 0usize;
        for (j, x) in mesh.nodes.iter().enumerate() {
            let m = rmap.map_node(&mu, j);
            if x[0].abs() + 2.0 < 1e-9 || (x[1].abs() - AIRFOIL_H).abs() < 1e-9 {
                assert_abs_diff_eq!(m[0], x[0], epsilon = 1e-9);
                assert_abs_diff_eq!(m[1], x[1], epsilon = 1e-9);
            }
            if x[1].abs() < 0.07 && x[0] > 0.1 && x[0] < 0.9 && x[1].abs() > 1e-9 {
                if (m[1] - x[1]).abs() > 1e-4 {
                    surface_moved += 1;
                }
            }
        }
        assert!(surface_moved > 0, "no surface movement at mu {mu:?}");
    }
}

#[test]
fn airfoil_solution_respects_the_datum_range() {
    let problem = Problem::Airfoil;
    let mesh = problem.build_mesh(3).unwrap();
    let rmap = precompute_regions(&mesh, problem.regions(), problem.mu_bar()).unwrap();
    let mu = [0.11, 0.14, 0.15, 0.75];
    let deformed: Vec<_> =
        (0..mesh.n_elems()).map(|k| rmap.deformed_element(&mesh, &mu, k)).collect();
    let quad = gauss_rule(2, 6).unwrap();
    let st = shape_tensors(&mesh, &deformed, &quad).unwrap();
    let dir = mesh.extract_dirichlet_indices(&problem.dirichlet_tags(), 1).unwrap();
    let tags = boundary_node_tags(&mesh);
    let h = problem
        .datum_vector(&mesh, &dir, &tags, &|node| rmap.map_node(&mu, node), &mu)
        .unwrap();
    let kernel = problem.kernel(&mu);
    let u = hf_solve_linear(&mesh, &st, kernel.as_ref(), &dir, &h).unwrap();
    // Potential between the wall data 0 and 1 up to small overshoot.
    let (min, max) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    assert!(min > -0.05 && max < 1.05, "solution range [{min:.3}, {max:.3}]");
    // Interior residual vanishes.
    let t = local_tensors(&mesh, &st, kernel.as_ref(), &u).unwrap();
    let (res, _) = global_assemble(&t, &mesh, None).unwrap();
    assert!(gather(&res, &dir.interior).amax() < 1e-9);
}

// ------------------------------------------------------------------
// Burgers channel
// ------------------------------------------------------------------

#[test]
fn burgers_mesh_is_valid_and_fully_tagged() {
    let mesh = Problem::Burgers.build_mesh(2).unwrap();
    mesh.validate().unwrap();
    assert_eq!(mesh.order, 2);
    assert_eq!(mesh.geom_order, 2);
    let mut tags: Vec<&str> = mesh.facets.iter().map(|f| f.tag.as_str()).collect();
    tags.sort();
    tags.dedup();
    assert_eq!(tags, ["inflow", "outflow", "top", "wall"]);
    assert_eq!(mesh.facets.len(), mesh.boundary_edge_set().len());
    // The reference bump is present: some wall nodes sit above y = 0.1.
    let tags = boundary_node_tags(&mesh);
    let bump = tags
        .iter()
        .filter(|(&id, t)| t.iter().any(|s| s == "wall") && mesh.nodes[id][1] > 0.1)
        .count();
    assert!(bump > 0, "no bump in the reference wall");
}

#[test]
fn burgers_region_map_identity_and_deformation() {
    let problem = Problem::Burgers;
    let mesh = problem.build_mesh(2).unwrap();
    let rmap = precompute_regions(&mesh, problem.regions(), problem.mu_bar()).unwrap();
    let all: Vec<usize> = (0..mesh.n_nodes()).collect();
    let mapped = rmap.map_nodes(&problem.mu_bar(), &all);
    for (got, want) in mapped.iter().zip(&mesh.nodes) {
        let d = ((got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2)).sqrt();
        assert!(d < 1e-8, "identity error {d:.3e}");
    }
    // Extreme corners of the parameter box stay bijective; the band above
    // the patches never moves.
    let quad = gauss_rule(2, 4).unwrap();
    for mu in [[0.05, 0.7, 0.05], [0.25, 1.4, 0.2], [0.25, 0.7, 0.1]] {
        let deformed: Vec<_> =
            (0..mesh.n_elems()).map(|k| rmap.deformed_element(&mesh, &mu, k)).collect();
        let report = check_bijectivity(&mesh, &deformed, &quad);
        assert!(report.min_det > 0.0, "min det {:.3e} at mu {mu:?}", report.min_det);
        for (j, x) in mesh.nodes.iter().enumerate() {
            if x[1] >= 0.7 - 1e-9 {
                let m = rmap.map_node(&mu, j);
                assert_abs_diff_eq!(m[0], x[0], epsilon = 1e-9);
                assert_abs_diff_eq!(m[1], x[1], epsilon = 1e-9);
            }
        }
    }
}

/// Solve the Burgers problem at the given parameter on a coarse mesh.
fn solve_burgers(mu: [f64; 3]) -> (dtm::mesh::Mesh, DVector<f64>) {
    let problem = Problem::Burgers;
    let mesh = problem.build_mesh(1).unwrap();
    let rmap = precompute_regions(&mesh, problem.regions(), problem.mu_bar()).unwrap();
    let deformed: Vec<_> =
        (0..mesh.n_elems()).map(|k| rmap.deformed_element(&mesh, &mu, k)).collect();
    let kernel = problem.kernel(&mu);
    let quad = gauss_rule(2, kernel.quad_degree(mesh.order)).unwrap();
    let st = shape_tensors(&mesh, &deformed, &quad).unwrap();
    let dir = mesh.extract_dirichlet_indices(&problem.dirichlet_tags(), 2).unwrap();
    let tags = boundary_node_tags(&mesh);
    let h = problem
        .datum_vector(&mesh, &dir, &tags, &|node| rmap.map_node(&mu, node), &mu)
        .unwrap();
    let mut u0 = DVector::zeros(dir.n_dof);
    for (slot, &gi) in dir.indices.iter().enumerate() {
        u0[gi] = h[slot];
    }
    let opts = NewtonOptions { continuation: true, ..NewtonOptions::default() };
    let (u, _) = hf_solve_newton(&mesh, &st, kernel.as_ref(), &dir, &u0, &opts).unwrap();
    // Solver contract: converged interior residual.
    let t = local_tensors(&mesh, &st, kernel.as_ref(), &u).unwrap();
    let (res, _) = global_assemble(&t, &mesh, None).unwrap();
    assert!(gather(&res, &dir.interior).norm() < 1e-8);
    (mesh, u)
}

#[test]
fn burgers_approaches_the_linear_solution_as_viscosity_grows() {
    let problem = Problem::Burgers;
    let mut gaps = Vec::new();
    for nu in [0.5, 1.0, 2.0] {
        let mu = [0.15, 1.0, nu];
        let (mesh, u) = solve_burgers(mu);
        // Linear (vector Laplace) reference with the same boundary data.
        let st = identity_shape_tensors(&mesh, 2 * mesh.order).unwrap();
        let dir1 = mesh.extract_dirichlet_indices(&problem.dirichlet_tags(), 1).unwrap();
        let tags = boundary_node_tags(&mesh);
        let n = mesh.n_nodes();
        let mut linear = DVector::zeros(2 * n);
        for comp in 0..2 {
            let mut h = DVector::zeros(dir1.m_hf());
            for (slot, &gi) in dir1.indices.iter().enumerate() {
                let tag =
                    dtm::problems::pick_tag(&tags[&gi], &problem.dirichlet_tags()).unwrap();
                h[slot] = problem.datum(tag, mesh.nodes[gi], &mu).unwrap()[comp];
            }
            let kernel = LaplaceKernel { source: Source::Zero };
            let sol = hf_solve_linear(&mesh, &st, &kernel, &dir1, &h).unwrap();
            for i in 0..n {
                linear[i + n * comp] = sol[i];
            }
        }
        gaps.push((&u - &linear).norm() / linear.norm());
    }
    assert!(
        gaps[0] > gaps[1] && gaps[1] > gaps[2],
        "gaps not monotone: {gaps:?}"
    );
}

#[test]
fn burgers_solution_is_physical_at_the_reference_parameter() {
    let (mesh, u) = solve_burgers([0.15, 1.0, 0.125]);
    let n = mesh.n_nodes();
    let (min1, max1) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        (lo.min(u[i]), hi.max(u[i]))
    });
    // Streamwise component stays between no-slip and the inflow peak.
    assert!(min1 > -0.2 && max1 < 1.2, "u1 range [{min1:.3}, {max1:.3}]");
}

#[test]
fn boundary_node_tags_are_deterministic_at_corners() {
    let mesh = Problem::Burgers.build_mesh(1).unwrap();
    let tags = boundary_node_tags(&mesh);
    // Node at the inflow/wall corner (0, 0) carries both adjacent tags.
    let corner = (0..mesh.n_nodes())
        .find(|&j| mesh.nodes[j][0].abs() < 1e-9 && mesh.nodes[j][1].abs() < 1e-9)
        .unwrap();
    assert_eq!(tags[&corner], ["inflow", "wall"]);
}
