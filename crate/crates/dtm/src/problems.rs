//! Concrete parameterized problems binding geometry, boundary data, and
//! local assemblers: a 1D convergence-study problem, potential flow past a
//! parameterized airfoil, and a nonlinear viscous Burgers benchmark on a
//! channel with a parameterized wall bump.

use nalgebra::DVector;

use crate::fe::{BurgersSupgKernel, LaplaceKernel, LocalKernel, Source};
use crate::geomap::{Curve, GordonHallPatch, Region};
use crate::mesh::{BoundaryFacet, Mesh, ReferenceElement};
use crate::{Error, Result};

// ------------------------------------------------------------------
// Airfoil problem constants
// ------------------------------------------------------------------

/// Airfoil box: x extent.
pub const AIRFOIL_X_MIN: f64 = -2.0;
/// Airfoil box: x extent.
pub const AIRFOIL_X_MAX: f64 = 6.0;
/// Airfoil box: half-height.
pub const AIRFOIL_H: f64 = 4.0;

/// Normalization profile of the airfoil inflow datum: a double arctan ramp
/// in the scaled wall-normal coordinate `t`, steered by `mu[2]` and `mu[3]`.
fn inflow_profile(t: f64, mu: &[f64]) -> f64 {
    let pi = std::f64::consts::PI;
    0.5 * (1.0
        + (10.0 * (t - mu[2])).atan() / pi
        + (10.0 * (t - mu[3])).atan() / pi)
}

/// Dirichlet datum of the airfoil potential-flow problem at a boundary
/// point with the given tag.
///
/// The datum is 0 on the bottom wall, 1 on the top wall and the airfoil
/// surface, a linear profile on the outflow, and a normalized double-arctan
/// profile on the inflow; the normalization pins the inflow endpoints to 0
/// and 1 exactly, making the datum continuous at the box corners.
pub fn airfoil_datum(tag: &str, x: [f64; 2], mu: &[f64]) -> Result<f64> {
    let t = (x[1] + AIRFOIL_H) / (2.0 * AIRFOIL_H);
    match tag {
        "bottom" => Ok(0.0),
        "top" | "naca" => Ok(1.0),
        "outflow" => Ok(t),
        "inflow" => {
            let h0 = inflow_profile(0.0, mu);
            let h1 = inflow_profile(1.0, mu);
            Ok((inflow_profile(t, mu) - h0) / (h1 - h0))
        }
        other => Err(Error::Config(format!("airfoil_datum: unknown boundary tag '{other}'"))),
    }
}

// ------------------------------------------------------------------
// Patch-lattice mesh generation
// ------------------------------------------------------------------

/// One logically rectangular block of a patch mesh.
#[derive(Debug, Clone)]
pub struct PatchMeshPart {
    /// The transfinite patch providing the geometry at `mu_bar`.
    pub patch: GordonHallPatch,
    /// Cells along `s`.
    pub ns: usize,
    /// Cells along `t`.
    pub nt: usize,
    /// Grading exponent for the `t` levels: 1 is uniform, `g > 1` clusters
    /// toward `t = 0`, `g < -1` clusters toward `t = 1` with exponent `-g`.
    pub t_power: f64,
}

fn grade(t: f64, power: f64) -> f64 {
    if power >= 1.0 {
        t.powf(power)
    } else {
        1.0 - (1.0 - t).powf(-power)
    }
}

/// Triangulate a collection of patch blocks evaluated at `mu_bar`, merging
/// shared interface nodes, and tag boundary facets with the classifier
/// (called with the facet's two vertex positions).
///
/// Every solution node, including high-order lattice nodes, is mapped
/// through its patch, so the resulting elements are genuinely curved when
/// `geom_order > 1`.
pub fn patches_to_mesh(
    parts: &[PatchMeshPart],
    mu_bar: &[f64],
    p: usize,
    geom_order: usize,
    classify: &dyn Fn([f64; 2], [f64; 2]) -> String,
) -> Result<Mesh> {
    let ref_elem = ReferenceElement::build(2, p)?;
    let mut dedup = crate::mesh::NodeDedup::new();
    let mut elems: Vec<Vec<usize>> = Vec::new();
    for part in parts {
        crate::geomap::check_corners(&part.patch, mu_bar)?;
        let sv: Vec<f64> = (0..=part.ns).map(|i| i as f64 / part.ns as f64).collect();
        let tv: Vec<f64> =
            (0..=part.nt).map(|j| grade(j as f64 / part.nt as f64, part.t_power)).collect();
        for i in 0..part.ns {
            for j in 0..part.nt {
                let c = [
                    [sv[i], tv[j]],
                    [sv[i + 1], tv[j]],
                    [sv[i + 1], tv[j + 1]],
                    [sv[i], tv[j + 1]],
                ];
                for tri in [[c[0], c[1], c[2]], [c[0], c[2], c[3]]] {
                    let mut ids = Vec::with_capacity(ref_elem.n_lp);
                    for node in &ref_elem.nodes {
                        let (l0, l1, l2) = (1.0 - node[0] - node[1], node[0], node[1]);
                        let s = l0 * tri[0][0] + l1 * tri[1][0] + l2 * tri[2][0];
                        let t = l0 * tri[0][1] + l1 * tri[1][1] + l2 * tri[2][1];
                        let x = crate::geomap::gordon_hall_eval(&part.patch, s, t, mu_bar);
                        ids.push(dedup.insert(x));
                    }
                    elems.push(ids);
                }
            }
        }
    }
    let nodes = dedup.into_nodes();
    // Find the boundary edges of the merged triangulation and classify them.
    let untagged = Mesh::new(2, p, geom_order, nodes.clone(), elems.clone(), vec![])?;
    let mut facets = Vec::new();
    for ((v0, v1), (elem, local_facet)) in untagged.boundary_edge_set() {
        let tag = classify(nodes[v0], nodes[v1]);
        facets.push(BoundaryFacet { elem, local_facet, tag });
    }
    // Deterministic facet order regardless of hash-map iteration.
    facets.sort_by_key(|f| (f.elem, f.local_facet));
    Mesh::new(2, p, geom_order, nodes, elems, facets)
}

// ------------------------------------------------------------------
// Problem definitions
// ------------------------------------------------------------------

/// The three built-in parameterized problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    /// 1D Poisson problem `-u'' = sin(pi x)` with a kinked geometry map,
    /// used by the convergence study.
    Study1D,
    /// Potential flow past a parameterized airfoil in a box.
    Airfoil,
    /// Steady viscous Burgers flow over a parameterized channel bump.
    Burgers,
}

impl Problem {
    /// Look a problem up by its configuration id.
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "study-1d" => Ok(Problem::Study1D),
            "laplace-airfoil" => Ok(Problem::Airfoil),
            "burgers-bump" => Ok(Problem::Burgers),
            other => Err(Error::Config(format!(
                "unknown problem id '{other}' (expected study-1d, laplace-airfoil, or burgers-bump)"
            ))),
        }
    }

    /// Configuration id.
    pub fn id(&self) -> &'static str {
        match self {
            Problem::Study1D => "study-1d",
            Problem::Airfoil => "laplace-airfoil",
            Problem::Burgers => "burgers-bump",
        }
    }

    /// Number of state components.
    pub fn d_eq(&self) -> usize {
        match self {
            Problem::Burgers => 2,
            _ => 1,
        }
    }

    /// Solution order.
    pub fn order(&self) -> usize {
        match self {
            Problem::Study1D => 3,
            Problem::Airfoil => 3,
            Problem::Burgers => 2,
        }
    }

    /// Geometry order (isoparametric for the curved 2D problems).
    pub fn geom_order(&self) -> usize {
        self.order()
    }

    /// Admissible parameter box, one `[lo, hi]` pair per parameter.
    pub fn param_box(&self) -> Vec<[f64; 2]> {
        match self {
            Problem::Study1D => vec![],
            Problem::Airfoil => {
                vec![[0.09, 0.15], [0.09, 0.15], [0.1, 0.3], [0.6, 0.8]]
            }
            Problem::Burgers => vec![[0.05, 0.25], [0.7, 1.4], [0.05, 0.2]],
        }
    }

    /// Reference parameter (geometry map is the identity there).
    pub fn mu_bar(&self) -> Vec<f64> {
        match self {
            Problem::Study1D => vec![],
            Problem::Airfoil => vec![0.12, 0.12, 0.0, 0.0],
            Problem::Burgers => vec![0.15, 1.0, 0.125],
        }
    }

    /// Tags of the Dirichlet portion of the boundary.
    pub fn dirichlet_tags(&self) -> Vec<&'static str> {
        match self {
            Problem::Study1D => vec!["left", "right"],
            Problem::Airfoil => vec!["bottom", "top", "inflow", "outflow", "naca"],
            Problem::Burgers => vec!["inflow", "wall", "top"],
        }
    }

    /// Default mesh refinement level.
    pub fn default_refinement(&self) -> usize {
        match self {
            Problem::Study1D => 8,
            Problem::Airfoil => 12,
            Problem::Burgers => 4,
        }
    }

    /// SUPG stabilization constant (Burgers only).
    pub fn alpha_supg(&self) -> f64 {
        0.5
    }

    /// Geometry regions for node labeling (2D problems).
    pub fn regions(&self) -> Vec<Region> {
        match self {
            Problem::Study1D => vec![],
            Problem::Airfoil => {
                let (upper, lower) = airfoil_patches();
                vec![Region::Patch { patch: upper }, Region::Patch { patch: lower }]
            }
            Problem::Burgers => {
                let (left, right) = burgers_patches();
                vec![
                    Region::Patch { patch: left },
                    Region::Patch { patch: right },
                    Region::Identity,
                ]
            }
        }
    }

    /// Build the reference mesh at refinement level `n`.
    pub fn build_mesh(&self, n: usize) -> Result<Mesh> {
        if n == 0 {
            return Err(Error::Config("build_mesh: refinement level must be positive".into()));
        }
        match self {
            Problem::Study1D => crate::mesh::unit_interval_mesh(n, self.order(), 1),
            Problem::Airfoil => airfoil_mesh(n, self.order(), self.geom_order()),
            Problem::Burgers => burgers_mesh(n, self.order(), self.geom_order()),
        }
    }

    /// Local assembler at parameter `mu`.
    pub fn kernel(&self, mu: &[f64]) -> Box<dyn LocalKernel> {
        match self {
            Problem::Study1D => Box::new(LaplaceKernel { source: Source::SinPiX1 }),
            Problem::Airfoil => Box::new(LaplaceKernel { source: Source::Zero }),
            Problem::Burgers => {
                Box::new(BurgersSupgKernel { nu: mu[2], alpha: self.alpha_supg() })
            }
        }
    }

    /// Dirichlet datum at a (mapped) boundary point; one value per state
    /// component.
    pub fn datum(&self, tag: &str, x: [f64; 2], mu: &[f64]) -> Result<Vec<f64>> {
        match self {
            Problem::Study1D => Ok(vec![0.0]),
            Problem::Airfoil => Ok(vec![airfoil_datum(tag, x, mu)?]),
            Problem::Burgers => match tag {
                // Parabolic inflow in the first component, zero crossflow.
                "inflow" => Ok(vec![4.0 * x[1] * (1.0 - x[1]), 0.0]),
                "wall" | "top" => Ok(vec![0.0, 0.0]),
                other => {
                    Err(Error::Config(format!("burgers datum: unknown boundary tag '{other}'")))
                }
            },
        }
    }

    /// Dirichlet values for a whole index set, evaluated at the mapped node
    /// positions (`node_tags` lists each boundary node's facet tags).
    pub fn datum_vector(
        &self,
        mesh: &Mesh,
        dir: &crate::mesh::DirichletIndexSet,
        node_tags: &std::collections::HashMap<usize, Vec<String>>,
        mapped: &dyn Fn(usize) -> [f64; 2],
        mu: &[f64],
    ) -> Result<DVector<f64>> {
        let n_hf = mesh.n_nodes();
        let dirichlet = self.dirichlet_tags();
        let mut h = DVector::zeros(dir.m_hf());
        for (slot, &gi) in dir.indices.iter().enumerate() {
            let (node, comp) = (gi % n_hf, gi / n_hf);
            let tags = node_tags.get(&node).ok_or_else(|| {
                Error::Config(format!("datum_vector: node {node} has no boundary tag"))
            })?;
            let tag = pick_tag(tags, &dirichlet).ok_or_else(|| {
                Error::Config(format!("datum_vector: node {node} carries no Dirichlet tag"))
            })?;
            h[slot] = self.datum(tag, mapped(node), mu)?[comp];
        }
        Ok(h)
    }
}

/// First tag of `tags` that belongs to the Dirichlet list.
///
/// Boundary corner nodes carry the tags of every adjacent facet; Dirichlet
/// data win over free-boundary tags there, and the sorted tag order makes the
/// choice deterministic (problem data are continuous across corners, so any
/// Dirichlet tag gives the same value).
pub fn pick_tag<'a>(tags: &'a [String], dirichlet: &[&str]) -> Option<&'a str> {
    tags.iter().map(|t| t.as_str()).find(|t| dirichlet.contains(t))
}

/// Tags of every node lying on a tagged boundary facet, sorted and deduped
/// per node.
pub fn boundary_node_tags(mesh: &Mesh) -> std::collections::HashMap<usize, Vec<String>> {
    let mut tags: std::collections::HashMap<usize, Vec<String>> =
        std::collections::HashMap::new();
    for f in &mesh.facets {
        for &loc in &mesh.ref_elem.facet_nodes(f.local_facet) {
            let id = mesh.elems[f.elem][loc];
            let entry = tags.entry(id).or_default();
            if !entry.contains(&f.tag) {
                entry.push(f.tag.clone());
            }
        }
    }
    for entry in tags.values_mut() {
        entry.sort();
    }
    tags
}

// ------------------------------------------------------------------
// Airfoil geometry
// ------------------------------------------------------------------

/// The two transfinite patches covering the airfoil box: upper half between
/// the upper airfoil side (thickness `mu[1]`) and the top wall, lower half
/// between the bottom wall and the lower side (thickness `mu[0]`).
fn airfoil_patches() -> (GordonHallPatch, GordonHallPatch) {
    let upper = GordonHallPatch {
        south: Curve::NacaSide {
            sign: 1.0,
            thickness_idx: 1,
            x_start: AIRFOIL_X_MIN,
            x_end: AIRFOIL_X_MAX,
        },
        north: Curve::Segment { a: [AIRFOIL_X_MIN, AIRFOIL_H], b: [AIRFOIL_X_MAX, AIRFOIL_H] },
        west: Curve::Segment { a: [AIRFOIL_X_MIN, 0.0], b: [AIRFOIL_X_MIN, AIRFOIL_H] },
        east: Curve::Segment { a: [AIRFOIL_X_MAX, 0.0], b: [AIRFOIL_X_MAX, AIRFOIL_H] },
    };
    let lower = GordonHallPatch {
        south: Curve::Segment { a: [AIRFOIL_X_MIN, -AIRFOIL_H], b: [AIRFOIL_X_MAX, -AIRFOIL_H] },
        north: Curve::NacaSide {
            sign: -1.0,
            thickness_idx: 0,
            x_start: AIRFOIL_X_MIN,
            x_end: AIRFOIL_X_MAX,
        },
        west: Curve::Segment { a: [AIRFOIL_X_MIN, -AIRFOIL_H], b: [AIRFOIL_X_MIN, 0.0] },
        east: Curve::Segment { a: [AIRFOIL_X_MAX, -AIRFOIL_H], b: [AIRFOIL_X_MAX, 0.0] },
    };
    (upper, lower)
}

/// Structured curved mesh of the airfoil box at the reference parameter.
///
/// Each half uses `4n x n` cells with the `t` levels graded toward the
/// airfoil; nodes along the shared chord line merge, so the airfoil surface
/// remains the only interior-looking boundary and is tagged `naca`.
fn airfoil_mesh(n: usize, p: usize, geom_order: usize) -> Result<Mesh> {
    let (upper, lower) = airfoil_patches();
    let parts = vec![
        PatchMeshPart { patch: upper, ns: 4 * n, nt: n, t_power: 1.6 },
        PatchMeshPart { patch: lower, ns: 4 * n, nt: n, t_power: -1.6 },
    ];
    let mu_bar = Problem::Airfoil.mu_bar();
    let eps = 1e-8;
    let classify = move |a: [f64; 2], b: [f64; 2]| -> String {
        let near = |v: f64, c: f64| (v - c).abs() < eps;
        if near(a[1], -AIRFOIL_H) && near(b[1], -AIRFOIL_H) {
            "bottom".into()
        } else if near(a[1], AIRFOIL_H) && near(b[1], AIRFOIL_H) {
            "top".into()
        } else if near(a[0], AIRFOIL_X_MIN) && near(b[0], AIRFOIL_X_MIN) {
            "inflow".into()
        } else if near(a[0], AIRFOIL_X_MAX) && near(b[0], AIRFOIL_X_MAX) {
            "outflow".into()
        } else {
            "naca".into()
        }
    };
    patches_to_mesh(&parts, &mu_bar, p, geom_order, &classify)
}

// ------------------------------------------------------------------
// Burgers channel geometry
// ------------------------------------------------------------------

/// Channel length.
pub const CHANNEL_LENGTH: f64 = 3.0;
/// Channel height.
pub const CHANNEL_HEIGHT: f64 = 1.0;
/// Height of the deforming patch band above the bump wall.
const PATCH_TOP: f64 = 0.7;
/// Bump support.
const BUMP_SUP: [f64; 2] = [0.75, 2.25];

/// The two transfinite patches covering the deforming lower band of the
/// channel, split at mid-length; the band above `y = 0.7` is
/// parameter-independent.
fn burgers_patches() -> (GordonHallPatch, GordonHallPatch) {
    let mid = CHANNEL_LENGTH / 2.0;
    let wall = |x_a: f64, x_b: f64| Curve::BumpWall {
        x_a,
        x_b,
        sup0: BUMP_SUP[0],
        sup1: BUMP_SUP[1],
        height_idx: 0,
        slant_idx: 1,
    };
    let post = |x: f64| Curve::BumpVertical {
        x,
        y_top: PATCH_TOP,
        sup0: BUMP_SUP[0],
        sup1: BUMP_SUP[1],
        height_idx: 0,
        slant_idx: 1,
    };
    let left = GordonHallPatch {
        south: wall(0.0, mid),
        north: Curve::Segment { a: [0.0, PATCH_TOP], b: [mid, PATCH_TOP] },
        west: post(0.0),
        east: post(mid),
    };
    let right = GordonHallPatch {
        south: wall(mid, CHANNEL_LENGTH),
        north: Curve::Segment { a: [mid, PATCH_TOP], b: [CHANNEL_LENGTH, PATCH_TOP] },
        west: post(mid),
        east: post(CHANNEL_LENGTH),
    };
    (left, right)
}

/// Structured curved mesh of the bump channel at the reference parameter:
/// two deforming patches below `y = 0.7` plus two fixed rectangular blocks
/// above, with matching interface spacing.
fn burgers_mesh(n: usize, p: usize, geom_order: usize) -> Result<Mesh> {
    let (left, right) = burgers_patches();
    let mid = CHANNEL_LENGTH / 2.0;
    let rect = |x_a: f64, x_b: f64| GordonHallPatch {
        south: Curve::Segment { a: [x_a, PATCH_TOP], b: [x_b, PATCH_TOP] },
        north: Curve::Segment { a: [x_a, CHANNEL_HEIGHT], b: [x_b, CHANNEL_HEIGHT] },
        west: Curve::Segment { a: [x_a, PATCH_TOP], b: [x_a, CHANNEL_HEIGHT] },
        east: Curve::Segment { a: [x_b, PATCH_TOP], b: [x_b, CHANNEL_HEIGHT] },
    };
    let parts = vec![
        PatchMeshPart { patch: left, ns: 6 * n, nt: 3 * n, t_power: 1.0 },
        PatchMeshPart { patch: right, ns: 6 * n, nt: 3 * n, t_power: 1.0 },
        PatchMeshPart { patch: rect(0.0, mid), ns: 6 * n, nt: 2 * n, t_power: 1.0 },
        PatchMeshPart { patch: rect(mid, CHANNEL_LENGTH), ns: 6 * n, nt: 2 * n, t_power: 1.0 },
    ];
    let mu_bar = Problem::Burgers.mu_bar();
    let eps = 1e-8;
    let classify = move |a: [f64; 2], b: [f64; 2]| -> String {
        let near = |v: f64, c: f64| (v - c).abs() < eps;
        if near(a[0], 0.0) && near(b[0], 0.0) {
            "inflow".into()
        } else if near(a[0], CHANNEL_LENGTH) && near(b[0], CHANNEL_LENGTH) {
            "outflow".into()
        } else if near(a[1], CHANNEL_HEIGHT) && near(b[1], CHANNEL_HEIGHT) {
            "top".into()
        } else {
            "wall".into()
        }
    };
    patches_to_mesh(&parts, &mu_bar, p, geom_order, &classify)
}
