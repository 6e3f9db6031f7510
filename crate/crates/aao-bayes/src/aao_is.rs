//! All-at-once formulation of the inverse source problem.
//!
//! The joint operator couples the Poisson model `A u = theta` (A the
//! Dirichlet Laplacian) with full observation of the state:
//!
//! ```text
//! G (u, theta) = (A u - theta, u)
//! ```
//!
//! mapping `U x L2 -> L2 x L2` with `U = H_0^1 cap H^2` carrying the inner
//! product `<A., A.>_{L2}`. The adjoint in those weighted products is
//! `G* (y1, y2) = (A^{-1} y1 + A^{-2} y2, -y1)`, and conjugating `G*G` with
//! `diag(A, I)` yields an operator on `L2 x L2` whose per-mode 2x2 blocks
//! have the closed-form eigenvalue pairs analyzed here. A finite-element
//! backend reproduces the same spectrum through the inverted matrix pencil.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness, Mesh};
use crate::laplacian::{SpectralBasis, SpectralField};
use crate::linalg::{gen_sym_eig, DenseSymMatrix};

// ── Block vectors ───────────────────────────────────────────────────

/// Element of the joint space `U x L2`: state and source.
#[derive(Debug, Clone)]
pub struct IsBlockVector {
    pub u: SpectralField,
    pub theta: SpectralField,
}

impl IsBlockVector {
    pub fn new(u: SpectralField, theta: SpectralField) -> Self {
        assert_eq!(u.coeffs.len(), theta.coeffs.len());
        IsBlockVector { u, theta }
    }

    /// Joint inner product of `U x L2`.
    pub fn inner(&self, other: &Self) -> f64 {
        self.u.inner_u(&other.u) + self.theta.inner_l2(&other.theta)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }
}

/// Element of the codomain `L2 x L2`: model residual and observation.
#[derive(Debug, Clone)]
pub struct IsCoVector {
    pub model: SpectralField,
    pub observation: SpectralField,
}

impl IsCoVector {
    pub fn inner(&self, other: &Self) -> f64 {
        self.model.inner_l2(&other.model) + self.observation.inner_l2(&other.observation)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }
}

// ── Spectral operator ───────────────────────────────────────────────

/// Spectral (exact) backend of the joint inverse-source operator.
#[derive(Debug, Clone)]
pub struct IsOperator {
    pub basis: Arc<SpectralBasis>,
}

impl IsOperator {
    pub fn new(basis: &Arc<SpectralBasis>) -> Self {
        IsOperator { basis: Arc::clone(basis) }
    }

    /// `G (u, theta) = (A u - theta, u)`.
    pub fn apply(&self, x: &IsBlockVector) -> IsCoVector {
        let au = x.u.apply_power(1.0);
        IsCoVector { model: au.sub(&x.theta), observation: x.u.clone() }
    }

    /// `G* (y1, y2) = (A^{-1} y1 + A^{-2} y2, -y1)` in the `U x L2` product.
    pub fn apply_adjoint(&self, y: &IsCoVector) -> IsBlockVector {
        let u = y.model.apply_power(-1.0).add(&y.observation.apply_power(-2.0));
        IsBlockVector { u, theta: y.model.scale(-1.0) }
    }

    /// Transformed normal operator on `L2 x L2`:
    /// per mode the 2x2 block `[[1 + mu, -1], [-1, 1]]` with `mu = lambda^{-2}`.
    pub fn transformed_normal(&self, f: &SpectralField, g: &SpectralField) -> (SpectralField, SpectralField) {
        let out_f = f
            .map_coeffs(|c, lam| (1.0 + lam.powi(-2)) * c)
            .sub(g);
        let out_g = g.sub(f);
        (out_f, out_g)
    }
}

// ── Eigenvalue analysis ─────────────────────────────────────────────

/// Both roots of `lambda^2 - (2 + mu) lambda + mu = 0`, the per-mode
/// characteristic equation of the transformed operator; `mu` is an
/// eigenvalue of `A^{-2}`. Returns `(larger, smaller)`.
pub fn analytic_eigenvalue_pair(mu: f64) -> Result<(f64, f64)> {
    if mu <= 0.0 {
        return Err(Error::NonPositiveEigenvalue { value: mu });
    }
    let lam1 = 1.0 + 0.5 * mu + (1.0 + 0.25 * mu * mu).sqrt();
    let lam2 = mu / lam1;
    Ok((lam1, lam2))
}

/// Which accumulation branch a transformed eigenvalue belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsBranch {
    /// Accumulates at 2.
    Upper,
    /// Decays to 0 with the pencil spectrum.
    Lower,
}

/// One labeled eigenvalue of the discrete transformed operator.
#[derive(Debug, Clone)]
pub struct LabeledEigenvalue {
    pub value: f64,
    pub branch: IsBranch,
    /// The discrete `A^{-2}` eigenvalue this value pairs with.
    pub mu_hat: f64,
}

/// Discrete spectrum of the transformed normal operator on a mesh.
///
/// Follows the inverted-pencil formulation: with mass/stiffness matrices
/// `M`, `K` the eigenvalue equation reads
/// `diag(M, M) x = lambda [[KM^{-1}K, KM^{-1}K], [KM^{-1}K, KM^{-1}K + M]] x`,
/// avoiding any explicit `A^{-2}` assembly. Eigenvalues come out descending.
pub fn discrete_spectrum(mesh: &Arc<Mesh>, count: usize) -> Result<Vec<LabeledEigenvalue>> {
    let m = assemble_mass(mesh)?;
    let k = assemble_stiffness(mesh)?;
    let d = m.dim();
    if count > 2 * d {
        return Err(Error::InvalidCount { requested: count, dim: 2 * d });
    }

    // KM^{-1}K via the Cholesky factor of M
    let chol_m = crate::linalg::cholesky(&m)?;
    let mut kmk = DenseSymMatrix::zeros(d);
    for j in 0..d {
        let col: Vec<f64> = (0..d).map(|i| k.get(i, j)).collect();
        let w = chol_m.solve(&col);
        let kw = k.matvec(&w);
        for i in 0..=j {
            kmk.set_sym(j, i, kw[i]);
        }
    }
    // symmetrize the rounding
    let kmk = DenseSymMatrix::from_fn_sym(d, |i, j| 0.5 * (kmk.get(i, j) + kmk.get(j, i)));

    let mut lhs = DenseSymMatrix::zeros(2 * d); // diag(M, M)
    let mut rhs = DenseSymMatrix::zeros(2 * d); // inverted transformed operator
    for i in 0..d {
        for j in 0..=i {
            let mij = m.get(i, j);
            lhs.set_sym(i, j, mij);
            lhs.set_sym(d + i, d + j, mij);
            let q = kmk.get(i, j);
            rhs.set_sym(i, j, q);
            rhs.set_sym(d + i, j, q);
            rhs.set_sym(d + i, d + j, q + mij);
        }
        // upper-right block mirrors through set_sym on (d+i, j)
        for j in (i + 1)..d {
            rhs.set_sym(d + i, j, kmk.get(i, j));
        }
    }

    let eig = gen_sym_eig(&lhs, &rhs)?;
    let mut values: Vec<f64> = eig.eigenvalues;
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    values.truncate(count);

    // label by matching to the closed form over the pencil spectrum
    let pencil = gen_sym_eig(&k, &m)?;
    let mut labeled = Vec::with_capacity(values.len());
    for v in values {
        let mut best = (f64::INFINITY, 0.0, IsBranch::Upper);
        for nu in &pencil.eigenvalues {
            let mu_hat = nu.powi(-2);
            let (l1, l2) = analytic_eigenvalue_pair(mu_hat)?;
            if (v - l1).abs() < best.0 {
                best = ((v - l1).abs(), mu_hat, IsBranch::Upper);
            }
            if (v - l2).abs() < best.0 {
                best = ((v - l2).abs(), mu_hat, IsBranch::Lower);
            }
        }
        labeled.push(LabeledEigenvalue { value: v, branch: best.2, mu_hat: best.1 });
    }
    Ok(labeled)
}
