//! Parameterized geometry maps.
//!
//! A deformation `Phi_mu` is described by a coarse partition of the domain
//! into labeled regions: Gordon-Hall transfinite-interpolation patches whose
//! boundary curves depend on the parameter, plus identity regions where the
//! map is the identity for every parameter. The offline stage labels each
//! mesh node with its region and stores its reference coordinates in patch
//! space; online, mapping a node is a single patch evaluation.

use serde::{Deserialize, Serialize};

use crate::mesh::{DeformedElementNodes, Mesh};
use crate::quad::QuadRule;
use crate::{Error, Result};

/// Four-digit-style NACA half-thickness profile.
///
/// `s` is the chord fraction in [0,1], `th` the thickness parameter; the
/// value is the half-thickness at `s`.
pub fn f_naca(s: f64, th: f64) -> f64 {
    let sq = s.max(0.0).sqrt();
    5.0 * th
        * (0.2969 * sq - 0.1260 * s - 0.3516 * s * s + 0.2843 * s * s * s
            - 0.1036 * s * s * s * s)
}

/// Smooth parameterized bump profile used by the nonlinear benchmark's lower
/// wall: height `mu[h]`, slant exponent `mu[c]`, supported on `[sup0, sup1]`.
fn bump_profile(x: f64, sup0: f64, sup1: f64, h: f64, c: f64) -> f64 {
    let xi = (x - sup0) / (sup1 - sup0);
    if !(0.0..=1.0).contains(&xi) {
        return 0.0;
    }
    let arg = std::f64::consts::PI * xi.powf(c);
    h * arg.sin().powi(2)
}

/// Parameterized boundary curve `[0,1] x P -> R^2`.
///
/// Curves are data so that geometry travels inside configurations and
/// bundles; each variant evaluates a named builtin shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Curve {
    /// Straight segment from `a` to `b`, parameter-independent.
    Segment { a: [f64; 2], b: [f64; 2] },
    /// Composite airfoil-side curve along the chord line: leading-edge
    /// extension from `x_start` to 0, the closed-trailing-edge airfoil
    /// surface `sign * f_naca(., mu[thickness_idx])` over chord [0,1], and a
    /// wake segment to `x_end`. Fixed parameter breakpoints 0.25 / 0.75; the
    /// chord fraction is quadratic in the parameter, which clusters points
    /// near the leading edge and keeps the curve smooth there (the square
    /// root in the thickness profile cancels exactly).
    NacaSide { sign: f64, thickness_idx: usize, x_start: f64, x_end: f64 },
    /// Channel bottom wall from `x_a` to `x_b` with the parameterized bump
    /// `bump(x; mu[height_idx], mu[slant_idx])` supported on `[sup0, sup1]`.
    BumpWall {
        x_a: f64,
        x_b: f64,
        sup0: f64,
        sup1: f64,
        height_idx: usize,
        slant_idx: usize,
    },
    /// Vertical segment rising from the bump wall at abscissa `x` up to
    /// `y_top`; used for patch sides that must follow the moving wall.
    BumpVertical {
        x: f64,
        y_top: f64,
        sup0: f64,
        sup1: f64,
        height_idx: usize,
        slant_idx: usize,
    },
}

impl Curve {
    /// Evaluate the curve at parameter `t` in [0,1] for geometry parameter
    /// `mu`.
    pub fn eval(&self, t: f64, mu: &[f64]) -> [f64; 2] {
        match self {
            Curve::Segment { a, b } => {
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            }
            Curve::NacaSide { sign, thickness_idx, x_start, x_end } => {
                const S1: f64 = 0.25;
                const S2: f64 = 0.75;
                let th = mu[*thickness_idx];
                if t <= S1 {
                    let r = t / S1;
                    [x_start + r * (0.0 - x_start), 0.0]
                } else if t <= S2 {
                    let r = (t - S1) / (S2 - S1);
                    // Chord fraction c = r^2, so sqrt(c) = r and the
                    // half-thickness is polynomial in r.
                    let c = r * r;
                    let y = if r >= 1.0 {
                        // The closed-trailing-edge profile vanishes at c = 1
                        // only to rounding; pin it so the wake side is exact.
                        0.0
                    } else {
                        sign * 5.0
                            * th
                            * (0.2969 * r - 0.1260 * c - 0.3516 * c * c + 0.2843 * c * c * c
                                - 0.1036 * c * c * c * c)
                    };
                    [c, y]
                } else {
                    let r = (t - S2) / (1.0 - S2);
                    [1.0 + r * (x_end - 1.0), 0.0]
                }
            }
            Curve::BumpWall { x_a, x_b, sup0, sup1, height_idx, slant_idx } => {
                let x = x_a + t * (x_b - x_a);
                [x, bump_profile(x, *sup0, *sup1, mu[*height_idx], mu[*slant_idx])]
            }
            Curve::BumpVertical { x, y_top, sup0, sup1, height_idx, slant_idx } => {
                let y0 = bump_profile(*x, *sup0, *sup1, mu[*height_idx], mu[*slant_idx]);
                [*x, y0 + t * (y_top - y0)]
            }
        }
    }
}

/// Gordon-Hall transfinite-interpolation patch over `[0,1]^2`.
///
/// The south/north curves are parameterized by `s` (at `t = 0` / `t = 1`),
/// west/east by `t` (at `s = 0` / `s = 1`); the four corner points must match
/// for every admissible parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GordonHallPatch {
    /// Boundary at `t = 0`.
    pub south: Curve,
    /// Boundary at `t = 1`.
    pub north: Curve,
    /// Boundary at `s = 0`.
    pub west: Curve,
    /// Boundary at `s = 1`.
    pub east: Curve,
}

/// Transfinite interpolation at `(s, t)`.
pub fn gordon_hall_eval(patch: &GordonHallPatch, s: f64, t: f64, mu: &[f64]) -> [f64; 2] {
    let cs = patch.south.eval(s, mu);
    let cn = patch.north.eval(s, mu);
    let cw = patch.west.eval(t, mu);
    let ce = patch.east.eval(t, mu);
    let p00 = patch.south.eval(0.0, mu);
    let p10 = patch.south.eval(1.0, mu);
    let p01 = patch.north.eval(0.0, mu);
    let p11 = patch.north.eval(1.0, mu);
    let mut out = [0.0, 0.0];
    for d in 0..2 {
        out[d] = (1.0 - t) * cs[d] + t * cn[d] + (1.0 - s) * cw[d] + s * ce[d]
            - ((1.0 - s) * (1.0 - t) * p00[d]
                + s * (1.0 - t) * p10[d]
                + (1.0 - s) * t * p01[d]
                + s * t * p11[d]);
    }
    out
}

/// Check corner compatibility of a patch at one parameter value.
pub fn check_corners(patch: &GordonHallPatch, mu: &[f64]) -> Result<()> {
    let pairs = [
        (patch.south.eval(0.0, mu), patch.west.eval(0.0, mu), "south(0)/west(0)"),
        (patch.south.eval(1.0, mu), patch.east.eval(0.0, mu), "south(1)/east(0)"),
        (patch.north.eval(0.0, mu), patch.west.eval(1.0, mu), "north(0)/west(1)"),
        (patch.north.eval(1.0, mu), patch.east.eval(1.0, mu), "north(1)/east(1)"),
    ];
    for (a, b, what) in pairs {
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if d > 1e-10 {
            return Err(Error::Geometry(format!(
                "patch corner mismatch at {what}: distance {d:.3e}"
            )));
        }
    }
    Ok(())
}

/// Invert the patch map at a physical point by Newton iteration.
///
/// The initial guess comes from inverting the bilinear corner map; the full
/// map is then solved with a finite-difference Jacobian to residual 1e-12.
/// Fails when the iterate leaves `[-0.1, 1.1]^2` or does not converge in 50
/// iterations.
pub fn gordon_hall_invert(
    patch: &GordonHallPatch,
    x: [f64; 2],
    mu: &[f64],
) -> Result<[f64; 2]> {
    let p00 = patch.south.eval(0.0, mu);
    let p10 = patch.south.eval(1.0, mu);
    let p01 = patch.north.eval(0.0, mu);
    let p11 = patch.north.eval(1.0, mu);
    // Newton on the bilinear corner map from the center.
    let mut st = [0.5, 0.5];
    for _ in 0..20 {
        let (s, t) = (st[0], st[1]);
        let mut r = [0.0, 0.0];
        let mut j = [[0.0; 2]; 2];
        for d in 0..2 {
            r[d] = (1.0 - s) * (1.0 - t) * p00[d]
                + s * (1.0 - t) * p10[d]
                + (1.0 - s) * t * p01[d]
                + s * t * p11[d]
                - x[d];
            j[d][0] = (1.0 - t) * (p10[d] - p00[d]) + t * (p11[d] - p01[d]);
            j[d][1] = (1.0 - s) * (p01[d] - p00[d]) + s * (p11[d] - p10[d]);
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            break;
        }
        st[0] -= (r[0] * j[1][1] - r[1] * j[0][1]) / det;
        st[1] -= (r[1] * j[0][0] - r[0] * j[1][0]) / det;
        if r[0].abs() + r[1].abs() < 1e-13 {
            break;
        }
    }
    st[0] = st[0].clamp(-0.05, 1.05);
    st[1] = st[1].clamp(-0.05, 1.05);

    // Full Newton with central-difference Jacobian.
    let h = 1e-7;
    for _ in 0..50 {
        let f = gordon_hall_eval(patch, st[0], st[1], mu);
        let r = [f[0] - x[0], f[1] - x[1]];
        let rn = (r[0] * r[0] + r[1] * r[1]).sqrt();
        if rn <= 1e-12 {
            return Ok(st);
        }
        let fs1 = gordon_hall_eval(patch, st[0] + h, st[1], mu);
        let fs0 = gordon_hall_eval(patch, st[0] - h, st[1], mu);
        let ft1 = gordon_hall_eval(patch, st[0], st[1] + h, mu);
        let ft0 = gordon_hall_eval(patch, st[0], st[1] - h, mu);
        let j = [
            [(fs1[0] - fs0[0]) / (2.0 * h), (ft1[0] - ft0[0]) / (2.0 * h)],
            [(fs1[1] - fs0[1]) / (2.0 * h), (ft1[1] - ft0[1]) / (2.0 * h)],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-16 {
            return Err(Error::Geometry(format!(
                "patch inversion: singular Jacobian at ({:.6}, {:.6})",
                st[0], st[1]
            )));
        }
        let ds = -(r[0] * j[1][1] - r[1] * j[0][1]) / det;
        let dt = -(r[1] * j[0][0] - r[0] * j[1][0]) / det;
        // Backtrack: the chord parameterization is quadratic near the
        // leading edge and a full step can badly overshoot.
        let mut step = 1.0;
        let mut next = st;
        for _ in 0..30 {
            next = [st[0] + step * ds, st[1] + step * dt];
            let f = gordon_hall_eval(patch, next[0], next[1], mu);
            let rt = [f[0] - x[0], f[1] - x[1]];
            if (rt[0] * rt[0] + rt[1] * rt[1]).sqrt() < rn {
                break;
            }
            step *= 0.5;
        }
        st = next;
        if !(-0.1..=1.1).contains(&st[0]) || !(-0.1..=1.1).contains(&st[1]) {
            return Err(Error::Geometry(format!(
                "patch inversion left the reference square at ({:.4}, {:.4}) for point ({:.6}, {:.6})",
                st[0], st[1], x[0], x[1]
            )));
        }
    }
    Err(Error::Geometry(format!(
        "patch inversion did not converge for point ({:.6}, {:.6})",
        x[0], x[1]
    )))
}

/// One region of the geometry partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    /// The map is the identity here for every parameter; acts as the
    /// catch-all for nodes matched by no patch.
    Identity,
    /// A parameterized Gordon-Hall patch.
    Patch { patch: GordonHallPatch },
}

/// Offline-labeled geometry map: per-node region labels and patch-space
/// reference coordinates enabling O(1) online node mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionedMap {
    /// Regions in label order; membership ties resolve to the lowest label.
    pub regions: Vec<Region>,
    /// Reference parameter at which the map is the identity.
    pub mu_bar: Vec<f64>,
    /// Per-node region label.
    pub node_labels: Vec<usize>,
    /// Per-node patch-space reference coordinates (unused slots zero for
    /// identity-region nodes).
    pub node_refs: Vec<[f64; 2]>,
    /// Original node coordinates (identity-region shortcut).
    pub node_coords: Vec<[f64; 2]>,
}

/// Label every mesh node with its region and compute its reference
/// coordinates by inverting the owning patch at `mu_bar`.
///
/// Patch membership means successful inversion with the result inside
/// `[-1e-9, 1 + 1e-9]^2`; the lowest matching label wins. Nodes matched by no
/// patch fall into the first identity region; if there is none, this is a
/// geometry error naming the node.
pub fn precompute_regions(
    mesh: &Mesh,
    regions: Vec<Region>,
    mu_bar: Vec<f64>,
) -> Result<RegionedMap> {
    for region in &regions {
        if let Region::Patch { patch } = region {
            check_corners(patch, &mu_bar)?;
        }
    }
    let identity_label = regions.iter().position(|r| matches!(r, Region::Identity));
    let mut node_labels = vec![0usize; mesh.n_nodes()];
    let mut node_refs = vec![[0.0, 0.0]; mesh.n_nodes()];
    let tol = 1e-9;
    'nodes: for (j, &x) in mesh.nodes.iter().enumerate() {
        for (label, region) in regions.iter().enumerate() {
            if let Region::Patch { patch } = region {
                if let Ok(st) = gordon_hall_invert(patch, x, &mu_bar) {
                    if (-tol..=1.0 + tol).contains(&st[0]) && (-tol..=1.0 + tol).contains(&st[1])
                    {
                        // Round-trip check guards against spurious matches.
                        let back = gordon_hall_eval(patch, st[0], st[1], &mu_bar);
                        let d =
                            ((back[0] - x[0]).powi(2) + (back[1] - x[1]).powi(2)).sqrt();
                        if d <= 1e-10 {
                            node_labels[j] = label;
                            node_refs[j] = st;
                            continue 'nodes;
                        }
                    }
                }
            }
        }
        match identity_label {
            Some(label) => node_labels[j] = label,
            None => {
                return Err(Error::Geometry(format!(
                    "node {j} at ({:.6}, {:.6}) lies in no declared region",
                    x[0], x[1]
                )))
            }
        }
    }
    Ok(RegionedMap { regions, mu_bar, node_labels, node_refs, node_coords: mesh.nodes.clone() })
}

impl RegionedMap {
    /// Map the listed nodes to their positions at parameter `mu`.
    pub fn map_nodes(&self, mu: &[f64], node_ids: &[usize]) -> Vec<[f64; 2]> {
        node_ids.iter().map(|&j| self.map_node(mu, j)).collect()
    }

    /// Map a single node.
    pub fn map_node(&self, mu: &[f64], j: usize) -> [f64; 2] {
        match &self.regions[self.node_labels[j]] {
            Region::Identity => self.node_coords[j],
            Region::Patch { patch } => {
                gordon_hall_eval(patch, self.node_refs[j][0], self.node_refs[j][1], mu)
            }
        }
    }

    /// Deformed node coordinates of one element.
    pub fn deformed_element(&self, mesh: &Mesh, mu: &[f64], k: usize) -> DeformedElementNodes {
        DeformedElementNodes {
            elem: k,
            coords: mesh.elems[k].iter().map(|&j| self.map_node(mu, j)).collect(),
        }
    }

    /// Identity map over the whole mesh (single identity region); useful for
    /// problems without geometric parameters.
    pub fn identity(mesh: &Mesh) -> Self {
        Self {
            regions: vec![Region::Identity],
            mu_bar: vec![],
            node_labels: vec![0; mesh.n_nodes()],
            node_refs: vec![[0.0, 0.0]; mesh.n_nodes()],
            node_coords: mesh.nodes.clone(),
        }
    }
}

/// Continuous piecewise-linear bijection of [0,1] with one interior
/// breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearMap1D {
    /// Interior breakpoint.
    pub x0: f64,
    /// Slope on `[0, x0]`.
    pub slope_left: f64,
    /// Slope on `[x0, 1]`.
    pub slope_right: f64,
}

impl PiecewiseLinearMap1D {
    /// The convergence-study map: slope 1/2 up to `x0 = 1/sqrt(2)`, then the
    /// unique continuation with `Phi(1) = 1`.
    pub fn study_map() -> Self {
        let x0 = 1.0 / 2.0f64.sqrt();
        let slope_left = 0.5;
        let slope_right = (1.0 - 0.5 * x0) / (1.0 - x0);
        Self { x0, slope_left, slope_right }
    }

    /// Evaluate the map.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.x0 {
            self.slope_left * x
        } else {
            self.slope_left * self.x0 + self.slope_right * (x - self.x0)
        }
    }

    /// Derivative (the branch slope; left value at the breakpoint).
    pub fn deriv(&self, x: f64) -> f64 {
        if x <= self.x0 {
            self.slope_left
        } else {
            self.slope_right
        }
    }

    /// Inverse map.
    pub fn invert(&self, y: f64) -> f64 {
        let y0 = self.slope_left * self.x0;
        if y <= y0 {
            y / self.slope_left
        } else {
            self.x0 + (y - y0) / self.slope_right
        }
    }
}

/// Bijectivity report of a deformed mesh configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BijectivityReport {
    /// Minimum deformed-map determinant over all elements and quadrature
    /// points.
    pub min_det: f64,
    /// Elements whose minimum determinant is nonpositive.
    pub offending: Vec<usize>,
}

/// Scan deformed-map determinants at the quadrature points of every element.
///
/// Diagnostic only: degenerate configurations are reported, never raised.
pub fn check_bijectivity(
    mesh: &Mesh,
    deformed: &[DeformedElementNodes],
    quad: &QuadRule,
) -> BijectivityReport {
    let mut min_det = f64::INFINITY;
    let mut offending = Vec::new();
    for d in deformed {
        let mut elem_min = f64::INFINITY;
        for q in &quad.points {
            let (_, det) = mesh.deformed_map_grad(d, *q);
            elem_min = elem_min.min(det);
        }
        min_det = min_det.min(elem_min);
        if elem_min <= 0.0 {
            offending.push(d.elem);
        }
    }
    BijectivityReport { min_det, offending }
}
