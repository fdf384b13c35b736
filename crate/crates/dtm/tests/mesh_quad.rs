//! Tests for quadrature rules, reference elements, meshes, and mesh I/O.

use approx::assert_abs_diff_eq;
use dtm::mesh::{
    perturb_interior, rect_mesh, unit_interval_mesh, DeformedElementNodes, Mesh,
    ReferenceElement,
};
use dtm::quad::{gauss_rule, MAX_DEGREE};
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Analytic monomial integral over the unit triangle: a! b! / (a+b+2)!.
fn tri_monomial(a: u32, b: u32) -> f64 {
    let fact = |n: u32| (1..=n).map(|k| k as f64).product::<f64>();
    fact(a) * fact(b) / fact(a + b + 2)
}

// ---------------------------------------------------------------- quadrature

#[test]
fn quadrature_measures_and_positivity() {
    for degree in 1..=MAX_DEGREE {
        for dim in 1..=2 {
            let rule = gauss_rule(dim, degree).unwrap();
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            let total: f64 = rule.weights.iter().sum();
            let measure = if dim == 1 { 1.0 } else { 0.5 };
            assert_abs_diff_eq!(total, measure, epsilon = 1e-14);
        }
    }
}

#[test]
fn quadrature_exactness_to_declared_degree() {
    for degree in 1..=MAX_DEGREE {
        let rule = gauss_rule(1, degree).unwrap();
        for a in 0..=degree as u32 {
            let num: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(p, w)| w * p[0].powi(a as i32))
                .sum();
            assert_abs_diff_eq!(num, 1.0 / (a as f64 + 1.0), epsilon = 1e-14);
        }
        let rule = gauss_rule(2, degree).unwrap();
        for a in 0..=degree as u32 {
            for b in 0..=(degree as u32 - a) {
                let num: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                    .sum();
                assert_abs_diff_eq!(num, tri_monomial(a, b), epsilon = 1e-14);
            }
        }
    }
}

#[test]
fn quadrature_degree_six_cubic_cross_term() {
    let rule = gauss_rule(2, 6).unwrap();
    let num: f64 = rule
        .points
        .iter()
        .zip(&rule.weights)
        .map(|(p, w)| w * p[0].powi(3) * p[1].powi(3))
        .sum();
    assert_abs_diff_eq!(num, tri_monomial(3, 3), epsilon = 1e-14);
}

#[test]
fn quadrature_first_moment() {
    let rule = gauss_rule(2, 2).unwrap();
    let num: f64 = rule.points.iter().zip(&rule.weights).map(|(p, w)| w * p[0]).sum();
    assert_abs_diff_eq!(num, 1.0 / 6.0, epsilon = 1e-15);
}

#[test]
fn quadrature_rejects_unsupported() {
    assert!(gauss_rule(2, MAX_DEGREE + 1).is_err());
    assert!(gauss_rule(3, 2).is_err());
}

// ---------------------------------------------------------------- reference elements

#[test]
fn reference_element_node_counts() {
    let r = ReferenceElement::build(1, 1).unwrap();
    assert_eq!(r.n_lp, 2);
    assert_eq!(r.nodes, vec![[0.0, 0.0], [1.0, 0.0]]);
    let r = ReferenceElement::build(2, 1).unwrap();
    assert_eq!(r.nodes, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    let r = ReferenceElement::build(2, 3).unwrap();
    assert_eq!(r.n_lp, 10);
    assert!(ReferenceElement::build(3, 1).is_err());
    assert!(ReferenceElement::build(2, 4).is_err());
}

#[test]
fn lagrange_delta_property() {
    for dim in 1..=2 {
        for p in 1..=3 {
            let r = ReferenceElement::build(dim, p).unwrap();
            for (j, &node) in r.nodes.iter().enumerate() {
                let vals = r.eval(node);
                for i in 0..r.n_lp {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(vals[i], expect, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn lagrange_partition_of_unity_and_gradient_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for dim in 1..=2 {
        for p in 1..=3 {
            let r = ReferenceElement::build(dim, p).unwrap();
            for _ in 0..100 {
                let x = if dim == 1 {
                    [rng.random_range(0.0..1.0), 0.0]
                } else {
                    let a: f64 = rng.random_range(0.0..1.0);
                    let b: f64 = rng.random_range(0.0..(1.0 - a));
                    [a, b]
                };
                let vals = r.eval(x);
                assert_abs_diff_eq!(vals.sum(), 1.0, epsilon = 1e-12);
                let grads = r.grad(x);
                for d in 0..dim {
                    assert_abs_diff_eq!(grads.column(d).sum(), 0.0, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn p2_segment_midpoint_basis() {
    // Lattice order on the segment: 0, 1/2, 1 -> midpoint is local node 1.
    let r = ReferenceElement::build(1, 2).unwrap();
    let vals = r.eval([0.5, 0.0]);
    assert_abs_diff_eq!(vals[0], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(vals[2], 0.0, epsilon = 1e-12);
    // Polynomial-fit oracle: endpoint basis is 2X^2 - 3X + 1.
    let at = |x: f64| r.eval([x, 0.0])[0];
    for x in [0.1, 0.3, 0.9] {
        assert_abs_diff_eq!(at(x), 2.0 * x * x - 3.0 * x + 1.0, epsilon = 1e-12);
    }
}

// ---------------------------------------------------------------- elemental maps

fn single_triangle(p: usize, verts: [[f64; 2]; 3]) -> Mesh {
    let r = ReferenceElement::build(2, p).unwrap();
    let nodes: Vec<[f64; 2]> = r
        .nodes
        .iter()
        .map(|n| {
            let (l0, l1, l2) = (1.0 - n[0] - n[1], n[0], n[1]);
            [
                l0 * verts[0][0] + l1 * verts[1][0] + l2 * verts[2][0],
                l0 * verts[0][1] + l1 * verts[1][1] + l2 * verts[2][1],
            ]
        })
        .collect();
    let elems = vec![(0..r.n_lp).collect()];
    Mesh::new(2, p, p, nodes, elems, vec![]).unwrap()
}

#[test]
fn elemental_map_identity_on_reference_triangle() {
    let mesh = single_triangle(1, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    let x = mesh.elemental_map(0, [0.3, 0.4]);
    assert_abs_diff_eq!(x[0], 0.3, epsilon = 1e-14);
    assert_abs_diff_eq!(x[1], 0.4, epsilon = 1e-14);
    let (_, det) = mesh.elemental_map_grad(0, [0.3, 0.4]);
    assert_abs_diff_eq!(det, 1.0, epsilon = 1e-14);
}

#[test]
fn elemental_map_segment_affine() {
    let mesh = unit_interval_mesh(4, 1, 1).unwrap();
    // Element 1 covers [0.25, 0.5].
    let x = mesh.elemental_map(1, [0.5, 0.0]);
    assert_abs_diff_eq!(x[0], 0.375, epsilon = 1e-14);
    let (_, det) = mesh.elemental_map_grad(1, [0.5, 0.0]);
    assert_abs_diff_eq!(det, 0.25, epsilon = 1e-14);
}

#[test]
fn curved_p2_triangle_matches_fd_jacobian() {
    let mut mesh = single_triangle(2, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    // Bend the bottom edge midpoint (local lattice node 1 in P2 ordering).
    mesh.nodes[1] = [0.5, 0.12];
    let x0 = [0.31, 0.27];
    let (g, det) = mesh.elemental_map_grad(0, x0);
    let h = 1e-6;
    for b in 0..2 {
        let mut xp = x0;
        let mut xm = x0;
        xp[b] += h;
        xm[b] -= h;
        let fp = mesh.elemental_map(0, xp);
        let fm = mesh.elemental_map(0, xm);
        for a in 0..2 {
            let fd = (fp[a] - fm[a]) / (2.0 * h);
            assert_abs_diff_eq!(g[(a, b)], fd, epsilon = 1e-6);
        }
    }
    assert!(det > 0.0);
}

#[test]
fn deformed_map_identity_matches_elemental_bitwise() {
    let mesh = rect_mesh(3, 2, [0.0, 1.0, 0.0, 1.0], 2, 2).unwrap();
    for k in 0..mesh.n_elems() {
        let def = mesh.identity_deformed(k);
        for x in [[0.2, 0.1], [0.4, 0.4], [0.05, 0.9]] {
            assert_eq!(mesh.deformed_map(&def, x), mesh.elemental_map(k, x));
            let (ga, da) = mesh.deformed_map_grad(&def, x);
            let (gb, db) = mesh.elemental_map_grad(k, x);
            assert_eq!(da, db);
            assert_eq!(ga, gb);
        }
    }
}

#[test]
fn deformed_map_scaling_doubles_determinant() {
    let mesh = unit_interval_mesh(2, 1, 1).unwrap();
    let def = DeformedElementNodes {
        elem: 0,
        coords: mesh.element_coords(0).iter().map(|c| [2.0 * c[0], 0.0]).collect(),
    };
    let (_, d_def) = mesh.deformed_map_grad(&def, [0.5, 0.0]);
    let (_, d_base) = mesh.elemental_map_grad(0, [0.5, 0.0]);
    assert_abs_diff_eq!(d_def, 2.0 * d_base, epsilon = 1e-14);
}

#[test]
fn degenerate_triangle_has_nonpositive_determinant() {
    let mesh = single_triangle(1, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    // Collapse the third vertex onto the segment between the first two.
    let def = DeformedElementNodes {
        elem: 0,
        coords: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]],
    };
    let (_, det) = mesh.deformed_map_grad(&def, [0.3, 0.3]);
    assert!(det <= 0.0);
}

// ---------------------------------------------------------------- dirichlet / restriction

#[test]
fn dirichlet_indices_1d() {
    let mesh = unit_interval_mesh(4, 2, 1).unwrap();
    let ds = mesh.extract_dirichlet_indices(&["left", "right"], 1).unwrap();
    // First and last nodes of the interval; ids depend on dedup order, so
    // check via coordinates.
    assert_eq!(ds.m_hf(), 2);
    let xs: Vec<f64> = ds.indices.iter().map(|&i| mesh.nodes[i][0]).collect();
    assert!(xs.contains(&0.0) && xs.contains(&1.0));
    assert_eq!(ds.indices.len() + ds.interior.len(), mesh.n_nodes());
}

#[test]
fn dirichlet_block_offset_for_vector_states() {
    let mesh = unit_interval_mesh(4, 1, 1).unwrap();
    let d1 = mesh.extract_dirichlet_indices(&["left"], 1).unwrap();
    let d2 = mesh.extract_dirichlet_indices(&["left"], 2).unwrap();
    assert_eq!(d2.m_hf(), 2 * d1.m_hf());
    assert_eq!(d2.indices[1], d2.indices[0] + mesh.n_nodes());
}

#[test]
fn dirichlet_unknown_tag_errors() {
    let mesh = unit_interval_mesh(4, 1, 1).unwrap();
    assert!(mesh.extract_dirichlet_indices(&["nope"], 1).is_err());
}

#[test]
fn restriction_gather_semantics() {
    let mesh = rect_mesh(2, 2, [0.0, 1.0, 0.0, 1.0], 1, 1).unwrap();
    let ones = DVector::from_element(mesh.n_nodes(), 1.0);
    let idvec = DVector::from_fn(mesh.n_nodes(), |i, _| i as f64);
    for k in 0..mesh.n_elems() {
        let r1 = mesh.element_restriction(k, &ones, 1);
        assert!(r1.iter().all(|&v| v == 1.0));
        let r2 = mesh.element_restriction(k, &idvec, 1);
        for (i, &id) in mesh.elems[k].iter().enumerate() {
            assert_eq!(r2[i], id as f64);
        }
    }
}

#[test]
fn gather_scatter_valence_round_trip() {
    let mesh = rect_mesh(3, 3, [0.0, 1.0, 0.0, 1.0], 2, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = DVector::from_fn(mesh.n_nodes(), |_, _| rng.random_range(-1.0..1.0));
    let mut acc: DVector<f64> = DVector::zeros(mesh.n_nodes());
    let mut valence = vec![0usize; mesh.n_nodes()];
    for k in 0..mesh.n_elems() {
        let local = mesh.element_restriction(k, &v, 1);
        for (i, &id) in mesh.elems[k].iter().enumerate() {
            acc[id] += local[i];
            valence[id] += 1;
        }
    }
    for i in 0..mesh.n_nodes() {
        assert_abs_diff_eq!(acc[i], v[i] * valence[i] as f64, epsilon = 1e-12);
    }
}

#[test]
fn unassemble_matches_restriction() {
    let mesh = rect_mesh(2, 2, [0.0, 1.0, 0.0, 1.0], 2, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let basis =
        nalgebra::DMatrix::from_fn(mesh.n_nodes(), 3, |_, _| rng.random_range(-1.0..1.0));
    let un = mesh.unassemble(&basis, 1);
    for k in 0..mesh.n_elems() {
        for c in 0..3 {
            let col = DVector::from_column_slice(basis.column(c).as_slice());
            let r = mesh.element_restriction(k, &col, 1);
            assert_eq!(un[k].column(c), r.column(0));
        }
    }
}

#[test]
fn geom_order_one_has_constant_determinant() {
    let mesh = rect_mesh(3, 2, [0.0, 2.0, 0.0, 1.0], 3, 1).unwrap();
    for k in 0..mesh.n_elems() {
        let (_, d0) = mesh.elemental_map_grad(k, [0.1, 0.1]);
        let (_, d1) = mesh.elemental_map_grad(k, [0.6, 0.3]);
        assert_abs_diff_eq!(d0, d1, epsilon = 1e-14);
    }
}

// ---------------------------------------------------------------- mesh I/O

#[test]
fn mesh_text_round_trip_byte_exact() {
    let mesh = perturb_interior(&rect_mesh(4, 3, [0.0, 2.0, -1.0, 1.0], 2, 1).unwrap(), 0.15, 9)
        .unwrap();
    mesh.validate().unwrap();
    let text = mesh.write_text();
    let back = Mesh::read_text(&text).unwrap();
    assert_eq!(back.write_text(), text);
    assert_eq!(back.n_nodes(), mesh.n_nodes());
    assert_eq!(back.elems, mesh.elems);
}

#[test]
fn mesh_read_rejects_garbage() {
    assert!(Mesh::read_text("").is_err());
    assert!(Mesh::read_text("not-a-mesh 1 2 2 2").is_err());
    assert!(Mesh::read_text("dtm-mesh 9 2 2 2\nnodes 0\nelements 0\nfacets 0\n").is_err());
    // Truncated node section.
    assert!(Mesh::read_text("dtm-mesh 1 1 1 1\nnodes 2\n0.0\n").is_err());
}

#[test]
fn structured_meshes_validate() {
    unit_interval_mesh(8, 3, 1).unwrap().validate().unwrap();
    rect_mesh(4, 4, [0.0, 1.0, 0.0, 1.0], 3, 3).unwrap().validate().unwrap();
    let p = perturb_interior(&rect_mesh(5, 5, [0.0, 1.0, 0.0, 1.0], 2, 1).unwrap(), 0.2, 3)
        .unwrap();
    p.validate().unwrap();
}
