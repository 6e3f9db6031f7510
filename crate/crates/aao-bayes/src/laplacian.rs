//! Exact spectral calculus of the Dirichlet Laplacian on the unit square.
//!
//! The negative Laplacian with homogeneous Dirichlet conditions has
//! eigenfunctions `phi_{j,k}(x,y) = 2 sin(j pi x) sin(k pi y)` and
//! eigenvalues `pi^2 (j^2 + k^2)`. Fields stored by their coefficients in
//! this basis make every fractional power and the heat semigroup diagonal,
//! so those operators are applied without discretization error.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{Mesh, NodalField};
use crate::rng::Rng64;

// ── SpectralBasis ───────────────────────────────────────────────────

/// Truncated sine eigenbasis with `1 <= j, k <= modes_per_dim`.
///
/// Modes are flattened by ascending eigenvalue with a lexicographic
/// `(j, k)` tie-break, so spectra written to files are deterministic.
#[derive(Debug)]
pub struct SpectralBasis {
    modes_per_dim: usize,
    modes: Vec<(usize, usize)>,
    eigenvalues: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(modes_per_dim: usize) -> Arc<Self> {
        assert!(modes_per_dim >= 1);
        let mut modes: Vec<(usize, usize)> = Vec::with_capacity(modes_per_dim * modes_per_dim);
        for j in 1..=modes_per_dim {
            for k in 1..=modes_per_dim {
                modes.push((j, k));
            }
        }
        modes.sort_by_key(|&(j, k)| (j * j + k * k, j, k));
        let eigenvalues = modes
            .iter()
            .map(|&(j, k)| PI * PI * ((j * j + k * k) as f64))
            .collect();
        Arc::new(SpectralBasis { modes_per_dim, modes, eigenvalues })
    }

    pub fn modes_per_dim(&self) -> usize {
        self.modes_per_dim
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Eigenvalue of mode `i` (ascending in `i`).
    pub fn eigenvalue(&self, i: usize) -> f64 {
        self.eigenvalues[i]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mode(&self, i: usize) -> (usize, usize) {
        self.modes[i]
    }

    /// Point value of the i-th orthonormal eigenfunction.
    pub fn eval_mode(&self, i: usize, x: f64, y: f64) -> f64 {
        let (j, k) = self.modes[i];
        2.0 * (j as f64 * PI * x).sin() * (k as f64 * PI * y).sin()
    }
}

// ── SpectralField ───────────────────────────────────────────────────

/// Function on the unit square stored by its sine-basis coefficients.
#[derive(Debug, Clone)]
pub struct SpectralField {
    pub basis: Arc<SpectralBasis>,
    pub coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(basis: &Arc<SpectralBasis>) -> Self {
        SpectralField { basis: Arc::clone(basis), coeffs: vec![0.0; basis.len()] }
    }

    pub fn from_coeffs(basis: &Arc<SpectralBasis>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::DimensionMismatch { expected: basis.len(), got: coeffs.len() });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { context: "spectral coefficients" });
        }
        Ok(SpectralField { basis: Arc::clone(basis), coeffs })
    }

    /// Unit coefficient on mode `i`.
    pub fn unit_mode(basis: &Arc<SpectralBasis>, i: usize) -> Self {
        let mut f = Self::zeros(basis);
        f.coeffs[i] = 1.0;
        f
    }

    pub fn random(basis: &Arc<SpectralBasis>, rng: &mut Rng64) -> Self {
        SpectralField { basis: Arc::clone(basis), coeffs: rng.normal_vec(basis.len()) }
    }

    pub fn map_coeffs(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .zip(self.basis.eigenvalues())
            .map(|(&c, &lam)| f(c, lam))
            .collect();
        SpectralField { basis: Arc::clone(&self.basis), coeffs }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map_coeffs(|v, _| c * v)
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.coeffs.len(), other.coeffs.len());
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(&a, &b)| f(a, b)).collect();
        SpectralField { basis: Arc::clone(&self.basis), coeffs }
    }

    // norm identities: L2 = sum c^2, H01 = sum lam c^2, H-1 = sum c^2/lam
    pub fn inner_l2(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn inner_h01(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .zip(self.basis.eigenvalues())
            .map(|((a, b), lam)| lam * a * b)
            .sum()
    }

    pub fn inner_hm1(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .zip(self.basis.eigenvalues())
            .map(|((a, b), lam)| a * b / lam)
            .sum()
    }

    /// Inner product of the domain `U = H_0^1 cap H^2`: `<Au, Av>_{L2}`.
    pub fn inner_u(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .zip(self.basis.eigenvalues())
            .map(|((a, b), lam)| lam * lam * a * b)
            .sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.inner_l2(self).max(0.0).sqrt()
    }

    pub fn norm_h01(&self) -> f64 {
        self.inner_h01(self).max(0.0).sqrt()
    }

    pub fn norm_hm1(&self) -> f64 {
        self.inner_hm1(self).max(0.0).sqrt()
    }

    pub fn norm_u(&self) -> f64 {
        self.inner_u(self).max(0.0).sqrt()
    }

    /// Fractional power `A^s`: coefficient `c -> lambda^s c`.
    pub fn apply_power(&self, s: f64) -> Self {
        self.map_coeffs(|c, lam| lam.powf(s) * c)
    }

    /// Heat semigroup `e^{-tA}` for `t >= 0`.
    ///
    /// The backward direction is exactly the ill-posed map this library
    /// inverts statistically, so it is deliberately not offered here.
    pub fn apply_semigroup(&self, t: f64) -> Result<Self> {
        if t < 0.0 {
            return Err(Error::BackwardSemigroup { t });
        }
        Ok(self.map_coeffs(|c, lam| (-lam * t).exp() * c))
    }

    /// Point evaluation of the truncated series.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * self.basis.eval_mode(i, x, y))
            .sum()
    }

    /// Evaluate at the interior nodes of a structured mesh.
    ///
    /// Requires at least as many interior nodes per side as modes per side,
    /// the resolution needed for `analyze` to undo this map.
    pub fn synthesize(&self, mesh: &Arc<Mesh>) -> Result<NodalField> {
        let n = mesh.n_interior_per_dim();
        let j_max = self.basis.modes_per_dim();
        if n < j_max {
            return Err(Error::Aliasing { nodes: n, modes: j_max });
        }
        // separable evaluation: tables of sin(j pi x_i) per dimension
        let m = self.basis.len();
        let mut values = vec![0.0; n * n];
        let h = mesh.spacing();
        let sin_table: Vec<Vec<f64>> = (1..=j_max)
            .map(|j| (1..=n).map(|i| (j as f64 * PI * i as f64 * h).sin()).collect())
            .collect();
        for idx in 0..m {
            let c = self.coeffs[idx];
            if c == 0.0 {
                continue;
            }
            let (j, k) = self.basis.mode(idx);
            let sx = &sin_table[j - 1];
            let sy = &sin_table[k - 1];
            for iy in 0..n {
                let cy = 2.0 * c * sy[iy];
                for ix in 0..n {
                    values[iy * n + ix] += cy * sx[ix];
                }
            }
        }
        NodalField::from_values(mesh, values)
    }
}

/// Recover sine coefficients from interior nodal values (inverse of
/// [`SpectralField::synthesize`] whenever the grid resolves the basis).
pub fn analyze(field: &NodalField, basis: &Arc<SpectralBasis>) -> Result<SpectralField> {
    let n = field.mesh.n_interior_per_dim();
    let j_max = basis.modes_per_dim();
    if n < j_max {
        return Err(Error::Aliasing { nodes: n, modes: j_max });
    }
    let h = field.mesh.spacing();
    let sin_table: Vec<Vec<f64>> = (1..=j_max)
        .map(|j| (1..=n).map(|i| (j as f64 * PI * i as f64 * h).sin()).collect())
        .collect();
    // discrete sine orthogonality: sum_i sin(j pi x_i) sin(j' pi x_i) = (n+1)/2 delta
    let scale = 2.0 / ((n + 1) * (n + 1)) as f64;
    let mut coeffs = vec![0.0; basis.len()];
    for (idx, c) in coeffs.iter_mut().enumerate() {
        let (j, k) = basis.mode(idx);
        let sx = &sin_table[j - 1];
        let sy = &sin_table[k - 1];
        let mut s = 0.0;
        for iy in 0..n {
            let mut row = 0.0;
            for ix in 0..n {
                row += field.values[iy * n + ix] * sx[ix];
            }
            s += row * sy[iy];
        }
        *c = scale * s;
    }
    SpectralField::from_coeffs(basis, coeffs)
}
