//! P1 finite elements on a structured triangulation of the unit square.
//!
//! The mesh is the usual right-angled triangulation: every square cell is
//! split along the same diagonal, which gives closed-form element matrices
//! and reproducible assembly. Homogeneous Dirichlet conditions are imposed
//! by eliminating boundary rows and columns; fields carry interior values
//! only and boundary nodes are implicitly zero.

use std::io::Write as IoWrite;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::DenseSymMatrix;
use crate::rng::Rng64;

// ── Mesh ────────────────────────────────────────────────────────────

/// Structured triangulation of `[0,1]^2` with `n` nodes per side.
#[derive(Debug)]
pub struct Mesh {
    nodes_per_dim: usize,
    h: f64,
}

impl Mesh {
    /// `nodes_per_dim >= 3` so at least one interior node exists.
    pub fn new(nodes_per_dim: usize) -> Arc<Self> {
        assert!(nodes_per_dim >= 3, "need at least one interior node");
        Arc::new(Mesh { nodes_per_dim, h: 1.0 / (nodes_per_dim - 1) as f64 })
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes_per_dim * self.nodes_per_dim
    }

    pub fn n_interior_per_dim(&self) -> usize {
        self.nodes_per_dim - 2
    }

    pub fn n_interior(&self) -> usize {
        let m = self.n_interior_per_dim();
        m * m
    }

    pub fn n_triangles(&self) -> usize {
        2 * (self.nodes_per_dim - 1) * (self.nodes_per_dim - 1)
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let n = self.nodes_per_dim;
        ((node % n) as f64 * self.h, (node / n) as f64 * self.h)
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let n = self.nodes_per_dim;
        let ix = node % n;
        let iy = node / n;
        ix == 0 || iy == 0 || ix == n - 1 || iy == n - 1
    }

    /// Interior index of a global node, or `None` on the boundary.
    pub fn interior_index(&self, node: usize) -> Option<usize> {
        if self.is_boundary(node) {
            return None;
        }
        let n = self.nodes_per_dim;
        let ix = node % n;
        let iy = node / n;
        Some((iy - 1) * (n - 2) + (ix - 1))
    }

    pub fn interior_coords(&self, interior: usize) -> (f64, f64) {
        let m = self.n_interior_per_dim();
        let ix = interior % m + 1;
        let iy = interior / m + 1;
        (ix as f64 * self.h, iy as f64 * self.h)
    }

    /// Triangle `t` as global node ids, positively oriented.
    ///
    /// Cell `(i, j)` is split along the diagonal from `(i, j)` to
    /// `(i+1, j+1)`: the lower triangle covers `xi >= eta`.
    pub fn triangle(&self, t: usize) -> [usize; 3] {
        let n = self.nodes_per_dim;
        let cells = n - 1;
        let cell = t / 2;
        let i = cell % cells;
        let j = cell / cells;
        let p00 = j * n + i;
        let p10 = j * n + i + 1;
        let p01 = (j + 1) * n + i;
        let p11 = (j + 1) * n + i + 1;
        if t % 2 == 0 {
            [p00, p10, p11]
        } else {
            [p00, p11, p01]
        }
    }
}

// ── NodalField ──────────────────────────────────────────────────────

/// P1 field given by its interior nodal values (Dirichlet data eliminated).
#[derive(Debug, Clone)]
pub struct NodalField {
    pub mesh: Arc<Mesh>,
    pub values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(mesh: &Arc<Mesh>) -> Self {
        NodalField { mesh: Arc::clone(mesh), values: vec![0.0; mesh.n_interior()] }
    }

    pub fn from_values(mesh: &Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_interior() {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_interior(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "nodal field values" });
        }
        Ok(NodalField { mesh: Arc::clone(mesh), values })
    }

    pub fn from_fn(mesh: &Arc<Mesh>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..mesh.n_interior())
            .map(|i| {
                let (x, y) = mesh.interior_coords(i);
                f(x, y)
            })
            .collect();
        NodalField { mesh: Arc::clone(mesh), values }
    }

    /// Evaluate the P1 interpolant anywhere inside the domain.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (nodes, weights) = locate(&self.mesh, x, y);
        let mut v = 0.0;
        for (node, w) in nodes.iter().zip(weights) {
            if let Some(idx) = self.mesh.interior_index(*node) {
                v += w * self.values[idx];
            }
        }
        v
    }

    pub fn norm_m(&self, mass: &DenseSymMatrix) -> f64 {
        let mv = mass.matvec(&self.values);
        self.values.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }

    /// Interior values padded with the zero boundary, row-major by node id.
    pub fn with_boundary(&self) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.n_nodes()];
        for (node, slot) in full.iter_mut().enumerate() {
            if let Some(idx) = self.mesh.interior_index(node) {
                *slot = self.values[idx];
            }
        }
        full
    }

    /// CSV rows `index,x,y,value` over the interior nodes.
    pub fn write_csv(&self, w: &mut impl IoWrite) -> Result<()> {
        writeln!(w, "index,x,y,value")?;
        for (i, v) in self.values.iter().enumerate() {
            let (x, y) = self.mesh.interior_coords(i);
            writeln!(w, "{i},{x},{y},{v}")?;
        }
        Ok(())
    }

    /// 8-bit binary PGM (P5), row-major, top row at y = 1.
    ///
    /// Returns the (min, max) used for normalization so that the caller can
    /// record them in a manifest.
    pub fn write_pgm(&self, path: &Path) -> Result<(f64, f64)> {
        let n = self.mesh.nodes_per_dim();
        let full = self.with_boundary();
        let lo = full.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = full.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut bytes = Vec::with_capacity(n * n);
        for row in (0..n).rev() {
            for col in 0..n {
                let v = full[row * n + col];
                let g = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
                bytes.push(g);
            }
        }
        let mut out = Vec::new();
        write!(out, "P5\n{n} {n}\n255\n")?;
        out.extend_from_slice(&bytes);
        std::fs::write(path, out)?;
        Ok((lo, hi))
    }
}

// ── Assembly ────────────────────────────────────────────────────────

fn element_matrices(mesh: &Mesh, t: usize) -> Result<([[f64; 3]; 3], [[f64; 3]; 3])> {
    let tri = mesh.triangle(t);
    let p: Vec<(f64, f64)> = tri.iter().map(|&n| mesh.node_coords(n)).collect();
    let x21 = p[1].0 - p[0].0;
    let y21 = p[1].1 - p[0].1;
    let x31 = p[2].0 - p[0].0;
    let y31 = p[2].1 - p[0].1;
    let det = x21 * y31 - x31 * y21;
    if det.abs() < 1e-300 {
        return Err(Error::DegenerateTriangle { id: t });
    }
    let area = 0.5 * det.abs();
    // P1 gradient coefficients
    let b = [
        (p[1].1 - p[2].1) / det,
        (p[2].1 - p[0].1) / det,
        (p[0].1 - p[1].1) / det,
    ];
    let c = [
        (p[2].0 - p[1].0) / det,
        (p[0].0 - p[2].0) / det,
        (p[1].0 - p[0].0) / det,
    ];
    let mut ke = [[0.0; 3]; 3];
    let mut me = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ke[i][j] = area * (b[i] * b[j] + c[i] * c[j]);
            me[i][j] = area / 12.0 * if i == j { 2.0 } else { 1.0 };
        }
    }
    Ok((ke, me))
}

fn assemble(mesh: &Mesh, stiffness: bool, interior_only: bool) -> Result<DenseSymMatrix> {
    let dim = if interior_only { mesh.n_interior() } else { mesh.n_nodes() };
    let mut m = DenseSymMatrix::zeros(dim);
    for t in 0..mesh.n_triangles() {
        let (ke, me) = element_matrices(mesh, t)?;
        let e = if stiffness { ke } else { me };
        let tri = mesh.triangle(t);
        for i in 0..3 {
            for j in 0..=i {
                let (gi, gj) = (tri[i], tri[j]);
                if interior_only {
                    if let (Some(ii), Some(jj)) =
                        (mesh.interior_index(gi), mesh.interior_index(gj))
                    {
                        m.add_sym(ii.max(jj), ii.min(jj), e[i][j]);
                    }
                } else {
                    m.add_sym(gi.max(gj), gi.min(gj), e[i][j]);
                }
            }
        }
    }
    Ok(m)
}

/// Interior mass matrix `M_ij = int phi_i phi_j`.
pub fn assemble_mass(mesh: &Mesh) -> Result<DenseSymMatrix> {
    assemble(mesh, false, true)
}

/// Interior stiffness matrix `K_ij = int grad phi_i . grad phi_j`.
pub fn assemble_stiffness(mesh: &Mesh) -> Result<DenseSymMatrix> {
    assemble(mesh, true, true)
}

/// Mass matrix over all nodes, before Dirichlet elimination.
pub fn assemble_mass_full(mesh: &Mesh) -> Result<DenseSymMatrix> {
    assemble(mesh, false, false)
}

/// Stiffness matrix over all nodes, before Dirichlet elimination.
pub fn assemble_stiffness_full(mesh: &Mesh) -> Result<DenseSymMatrix> {
    assemble(mesh, true, false)
}

// ── Observation operator ────────────────────────────────────────────

fn locate(mesh: &Mesh, x: f64, y: f64) -> ([usize; 3], [f64; 3]) {
    let n = mesh.nodes_per_dim();
    let h = mesh.spacing();
    let cells = n - 1;
    let i = ((x / h).floor() as usize).min(cells - 1);
    let j = ((y / h).floor() as usize).min(cells - 1);
    let xi = x / h - i as f64;
    let eta = y / h - j as f64;
    let p00 = j * n + i;
    let p10 = j * n + i + 1;
    let p01 = (j + 1) * n + i;
    let p11 = (j + 1) * n + i + 1;
    if xi >= eta {
        ([p00, p10, p11], [1.0 - xi, xi - eta, eta])
    } else {
        ([p00, p11, p01], [1.0 - eta, xi, eta - xi])
    }
}

#[derive(Debug, Clone)]
struct ObsEntry {
    triangle_nodes: [usize; 3],
    weights: [f64; 3],
}

/// Pointwise P1 observation at a fixed set of interior points.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub points: Vec<(f64, f64)>,
    entries: Vec<ObsEntry>,
    /// Seed used for generation, if the points were drawn randomly.
    pub seed: Option<u64>,
}

/// Build the observation operator for explicit points.
///
/// Rejects points on or outside the boundary with the offending index.
pub fn observation_operator(mesh: &Arc<Mesh>, points: &[(f64, f64)]) -> Result<ObservationSet> {
    let mut entries = Vec::with_capacity(points.len());
    for (idx, &(x, y)) in points.iter().enumerate() {
        if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
            return Err(Error::ObservationOutside { index: idx });
        }
        let (nodes, weights) = locate(mesh, x, y);
        entries.push(ObsEntry { triangle_nodes: nodes, weights });
    }
    Ok(ObservationSet { points: points.to_vec(), entries, seed: None })
}

/// `count` i.i.d. uniform points in `[h, 1-h]^2` from the seeded generator.
pub fn random_observation_points(mesh: &Mesh, count: usize, seed: u64) -> Vec<(f64, f64)> {
    let h = mesh.spacing();
    let mut rng = Rng64::new(seed);
    (0..count)
        .map(|_| {
            let x = rng.uniform_in(h, 1.0 - h);
            let y = rng.uniform_in(h, 1.0 - h);
            (x, y)
        })
        .collect()
}

/// Convenience: random points plus the operator, seed recorded.
pub fn random_observation_set(mesh: &Arc<Mesh>, count: usize, seed: u64) -> Result<ObservationSet> {
    let points = random_observation_points(mesh, count, seed);
    let mut set = observation_operator(mesh, &points)?;
    set.seed = Some(seed);
    Ok(set)
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Apply the observation map to an interior field.
    pub fn apply(&self, field: &NodalField) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| {
                let mut v = 0.0;
                for (node, w) in e.triangle_nodes.iter().zip(e.weights) {
                    if let Some(idx) = field.mesh.interior_index(*node) {
                        v += w * field.values[idx];
                    }
                }
                v
            })
            .collect()
    }

    /// Transpose action `B^T r` onto the interior degrees of freedom.
    pub fn apply_transpose(&self, mesh: &Arc<Mesh>, r: &[f64]) -> NodalField {
        assert_eq!(r.len(), self.entries.len());
        let mut out = NodalField::zeros(mesh);
        for (e, ri) in self.entries.iter().zip(r) {
            for (node, w) in e.triangle_nodes.iter().zip(e.weights) {
                if let Some(idx) = mesh.interior_index(*node) {
                    out.values[idx] += w * ri;
                }
            }
        }
        out
    }

    /// Barycentric weights of point `i` (nonnegative, sum to one).
    pub fn weights(&self, i: usize) -> [f64; 3] {
        self.entries[i].weights
    }
}

// ── Noise and grid transfer ─────────────────────────────────────────

/// Add seeded Gaussian noise `delta * eta` with `eta ~ N(0, I)`.
pub fn add_noise(values: &[f64], delta: f64, seed: u64) -> Vec<f64> {
    assert!(delta >= 0.0);
    let mut rng = Rng64::new(seed);
    values.iter().map(|v| v + delta * rng.normal()).collect()
}

/// P1 interpolation of a fine-grid field at the interior nodes of a coarse mesh.
pub fn restrict_to_coarse(fine: &NodalField, coarse: &Arc<Mesh>) -> NodalField {
    NodalField::from_fn(coarse, |x, y| fine.eval(x, y))
}
