//! Joint Gaussian priors on (state, parameter) and link-condition checks.
//!
//! A prior is a mean plus three linear actions on flattened coordinate
//! vectors: the covariance, its symmetric square root (for sampling), and
//! the precision (for penalty terms). Concrete constructors cover the
//! smoothness family `(kappa M + gamma K)^{-n}` in both backends, the
//! semigroup pushforward prior for the heat state, and the heuristic
//! mass/root-stiffness prior for the backwards heat problem.

use std::io::Write as IoWrite;
use std::sync::Arc;

use crate::aao_bh::{SpaceTimeField, TimeGrid, U0Field};
use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness, Mesh};
use crate::laplacian::{SpectralBasis, SpectralField};
use crate::linalg::{gen_sym_eig, sym_eig, DenseSymMatrix, EigenDecomposition};
use crate::rng::Rng64;

type LinAction = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Gaussian measure descriptor: mean plus covariance-related actions on
/// coordinate vectors.
pub struct PriorModel {
    pub label: String,
    pub mean: Vec<f64>,
    cov: LinAction,
    sqrt: Option<LinAction>,
    prec: Option<LinAction>,
}

impl std::fmt::Debug for PriorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PriorModel")
            .field("label", &self.label)
            .field("dim", &self.mean.len())
            .field("has_sqrt", &self.sqrt.is_some())
            .field("has_precision", &self.prec.is_some())
            .finish()
    }
}

impl PriorModel {
    pub fn new(
        label: impl Into<String>,
        mean: Vec<f64>,
        cov: LinAction,
        sqrt: Option<LinAction>,
        prec: Option<LinAction>,
    ) -> Self {
        PriorModel { label: label.into(), mean, cov, sqrt, prec }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_apply(&self, x: &[f64]) -> Vec<f64> {
        (self.cov)(x)
    }

    pub fn sqrt_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.sqrt {
            Some(s) => Ok(s(x)),
            None => Err(Error::UnsupportedOperation(
                "square-root action not available for this prior",
            )),
        }
    }

    pub fn precision_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.prec {
            Some(p) => Ok(p(x)),
            None => Err(Error::UnsupportedOperation(
                "precision action not available for this prior",
            )),
        }
    }

    /// Covariance diagonal probed through unit vectors.
    pub fn cov_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        let mut d = vec![0.0; n];
        let mut e = vec![0.0; n];
        for i in 0..n {
            e[i] = 1.0;
            d[i] = (self.cov)(&e)[i];
            e[i] = 0.0;
        }
        d
    }
}

// ── Smoothness priors ───────────────────────────────────────────────

fn validate_smoothness_parameters(kappa: f64, gamma: f64, n_power: u32) -> Result<()> {
    if kappa < 0.0 || gamma < 0.0 || (kappa == 0.0 && gamma == 0.0) {
        return Err(Error::InvalidConfig(
            "smoothness prior needs kappa, gamma >= 0 and not both zero".into(),
        ));
    }
    if !(1..=2).contains(&n_power) {
        return Err(Error::InvalidConfig(format!(
            "smoothness prior power must be 1 or 2, got {n_power}"
        )));
    }
    Ok(())
}

/// Spectral smoothness prior: covariance `(kappa + gamma lambda)^{-n}` per
/// mode, mean zero.
pub fn smoothness_prior_spectral(
    basis: &Arc<SpectralBasis>,
    kappa: f64,
    gamma: f64,
    n_power: u32,
) -> Result<PriorModel> {
    validate_smoothness_parameters(kappa, gamma, n_power)?;
    let lams: Vec<f64> = basis.eigenvalues().to_vec();
    let weight = move |lam: f64| (kappa + gamma * lam).powi(n_power as i32);
    let diag_apply = |w: Vec<f64>| -> LinAction {
        Box::new(move |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).collect())
    };
    let cov: Vec<f64> = lams.iter().map(|&l| 1.0 / weight(l)).collect();
    let sqrt: Vec<f64> = cov.iter().map(|c| c.sqrt()).collect();
    let prec: Vec<f64> = lams.iter().map(|&l| weight(l)).collect();
    Ok(PriorModel::new(
        format!("smoothness-spectral(kappa={kappa},gamma={gamma},n={n_power})"),
        vec![0.0; basis.len()],
        diag_apply(cov),
        Some(diag_apply(sqrt)),
        Some(diag_apply(prec)),
    ))
}

/// FE smoothness prior: covariance `(kappa M + gamma K)^{-n}` on interior
/// nodal coefficients, realized through one dense eigendecomposition.
pub fn smoothness_prior_fe(
    mesh: &Arc<Mesh>,
    kappa: f64,
    gamma: f64,
    n_power: u32,
) -> Result<PriorModel> {
    validate_smoothness_parameters(kappa, gamma, n_power)?;
    let m = assemble_mass(mesh)?;
    let k = assemble_stiffness(mesh)?;
    let mut p = m.scaled(kappa);
    p.add_scaled(&k, gamma);
    let eig = Arc::new(sym_eig(&p)?);
    let np = n_power as i32;
    let mk = |f: Box<dyn Fn(f64) -> f64 + Send + Sync>| -> LinAction {
        let eig = Arc::clone(&eig);
        Box::new(move |x: &[f64]| eig.apply_function(x, &f))
    };
    Ok(PriorModel::new(
        format!("smoothness-fe(kappa={kappa},gamma={gamma},n={n_power})"),
        vec![0.0; p.dim()],
        mk(Box::new(move |s| s.powi(-np))),
        Some(mk(Box::new(move |s| s.powf(-0.5 * np as f64)))),
        Some(mk(Box::new(move |s| s.powi(np)))),
    ))
}

// ── Semigroup state prior ───────────────────────────────────────────

/// Pushforward of a spectral parameter prior through the heat semigroup.
///
/// For each listed time the covariance block is
/// `e^{-tA} C_p e^{-tA}` (diagonal per mode here) and the mean is
/// `e^{-tA} m_theta + int_0^t e^{-(t-s)A} f(s) ds`. The flattened layout is
/// time-major: slice i occupies `[i*modes, (i+1)*modes)`.
pub fn semigroup_state_prior(
    cp: &PriorModel,
    basis: &Arc<SpectralBasis>,
    times: &[f64],
    forcing: Option<&SpaceTimeField>,
    mean_theta: &SpectralField,
) -> Result<PriorModel> {
    let modes = basis.len();
    if cp.dim() != modes {
        return Err(Error::DimensionMismatch { expected: modes, got: cp.dim() });
    }
    if times.is_empty() || times.windows(2).any(|w| w[1] < w[0]) || times[0] < 0.0 {
        return Err(Error::InvalidConfig("times must be nonnegative ascending".into()));
    }
    let cp_diag = cp.cov_diagonal();
    let n_t = times.len();

    // per-slice variance e^{-2 lambda t} * cp
    let mut var = vec![0.0; n_t * modes];
    let mut mean = vec![0.0; n_t * modes];
    for (i, &t) in times.iter().enumerate() {
        let decayed = mean_theta.apply_semigroup(t)?;
        for m in 0..modes {
            let lam = basis.eigenvalue(m);
            var[i * modes + m] = (-2.0 * lam * t).exp() * cp_diag[m];
            mean[i * modes + m] = decayed.coeffs[m];
        }
        if let Some(f) = forcing {
            // int_0^t e^{-(t-s)A} f(s) ds via the history representation
            let u = U0Field { history: f.clone() };
            let v = u.value_at(t);
            for m in 0..modes {
                mean[i * modes + m] += v.coeffs[m];
            }
        }
    }
    let diag_apply = |w: Vec<f64>| -> LinAction {
        Box::new(move |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).collect())
    };
    let sqrt: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let prec: Vec<f64> = var.iter().map(|v| 1.0 / v).collect();
    Ok(PriorModel::new(
        "semigroup-state",
        mean,
        diag_apply(var),
        Some(diag_apply(sqrt)),
        Some(diag_apply(prec)),
    ))
}

// ── Heuristic backwards-heat prior ──────────────────────────────────

/// Diagonal heuristic prior for the backwards heat problem: covariance
/// `diag(M per time step, K^{1/2})` on FE coordinates, with `K^{1/2}`
/// built from the dense `(K, M)` pencil eigendecomposition.
///
/// Layout: `(N+1)` state slices of `d` interior values, then `d` parameter
/// values.
pub fn heuristic_bh_prior_diagonal(mesh: &Arc<Mesh>, n_steps: usize) -> Result<PriorModel> {
    let m = assemble_mass(mesh)?;
    let k = assemble_stiffness(mesh)?;
    let d = m.dim();
    let n_slices = n_steps + 1;
    let pencil = gen_sym_eig(&k, &m)?;

    // K^{1/2} = M X sqrt(nu) X^T M with X the M-orthonormal pencil vectors
    let pencil_power = |eig: &EigenDecomposition, mass: &DenseSymMatrix, p: f64| {
        let n = eig.dim();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        for j in 0..n {
            let ej: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            let mej = mass.matvec(&ej);
            let mut acc = vec![0.0; n];
            for kk in 0..n {
                let x = eig.vector(kk);
                let c: f64 =
                    x.iter().zip(&mej).map(|(a, b)| a * b).sum::<f64>() * eig.eigenvalues[kk].powf(p);
                for (a, xi) in acc.iter_mut().zip(x) {
                    *a += c * xi;
                }
            }
            cols.push(mass.matvec(&acc));
        }
        DenseSymMatrix::from_fn_sym(n, |i, j| 0.5 * (cols[j][i] + cols[i][j]))
    };
    let k_half = pencil_power(&pencil, &m, 0.5);

    // symmetric square roots for sampling
    let m_eig = sym_eig(&m)?;
    let m_sqrt = m_eig.assemble_function(f64::sqrt);
    let m_inv = m_eig.assemble_function(|x| 1.0 / x);
    let kh_eig = sym_eig(&k_half)?;
    let kh_sqrt = kh_eig.assemble_function(|x| x.max(0.0).sqrt());
    let kh_inv = kh_eig.assemble_function(|x| 1.0 / x);

    let dim = n_slices * d + d;
    let block_apply = move |x: &[f64], state_op: &DenseSymMatrix, param_op: &DenseSymMatrix| {
        let mut out = vec![0.0; x.len()];
        for i in 0..n_slices {
            let y = state_op.matvec(&x[i * d..(i + 1) * d]);
            out[i * d..(i + 1) * d].copy_from_slice(&y);
        }
        let y = param_op.matvec(&x[n_slices * d..]);
        out[n_slices * d..].copy_from_slice(&y);
        out
    };
    let mc = m.clone();
    let khc = k_half.clone();
    let cov: LinAction = Box::new(move |x: &[f64]| block_apply(x, &mc, &khc));
    let block_apply2 = block_apply_factory(n_slices, d);
    let sqrt: LinAction = Box::new(move |x: &[f64]| block_apply2(x, &m_sqrt, &kh_sqrt));
    let block_apply3 = block_apply_factory(n_slices, d);
    let prec: LinAction = Box::new(move |x: &[f64]| block_apply3(x, &m_inv, &kh_inv));
    Ok(PriorModel::new("heuristic-bh-diagonal", vec![0.0; dim], cov, Some(sqrt), Some(prec)))
}

fn block_apply_factory(
    n_slices: usize,
    d: usize,
) -> impl Fn(&[f64], &DenseSymMatrix, &DenseSymMatrix) -> Vec<f64> {
    move |x: &[f64], state_op: &DenseSymMatrix, param_op: &DenseSymMatrix| {
        let mut out = vec![0.0; x.len()];
        for i in 0..n_slices {
            let y = state_op.matvec(&x[i * d..(i + 1) * d]);
            out[i * d..(i + 1) * d].copy_from_slice(&y);
        }
        let y = param_op.matvec(&x[n_slices * d..]);
        out[n_slices * d..].copy_from_slice(&y);
        out
    }
}

/// Full heuristic factor for norm experiments (spectral backend):
///
/// ```text
/// C~ (u, theta) = (u + (I - e^{-A .}) theta, A^{-1/2} (u(T) + theta))
/// ```
///
/// It satisfies `||C~ x||_{U0 x H01} = ||G x||_{L2(H^-1) x L2}` exactly.
/// Not a covariance (not PSD as a block operator); the square-root action
/// is deliberately unsupported.
#[derive(Debug, Clone)]
pub struct HeuristicFullFactor {
    pub basis: Arc<SpectralBasis>,
    pub grid: TimeGrid,
}

impl HeuristicFullFactor {
    pub fn new(basis: &Arc<SpectralBasis>, grid: TimeGrid) -> Self {
        HeuristicFullFactor { basis: Arc::clone(basis), grid }
    }

    /// Apply the factor; the first component is returned as a `U0` element,
    /// the second lives in `H_0^1`.
    pub fn apply(&self, u: &U0Field, theta: &SpectralField) -> (U0Field, SpectralField) {
        // (I - e^{-At}) theta has constant history A theta
        let mut history = u.history.clone();
        history.add_time_constant(&theta.apply_power(1.0), 1.0);
        let first = U0Field { history };
        let second = u.final_value().add(theta).apply_power(-0.5);
        (first, second)
    }

    /// Squared norm `||C~ x||^2` in `U0 x H_0^1`.
    pub fn norm_sq(&self, u: &U0Field, theta: &SpectralField) -> f64 {
        let (a, b) = self.apply(u, theta);
        a.inner_u0(&a) + b.inner_h01(&b)
    }

    /// The square-root action does not exist for the non-diagonal variant.
    pub fn sqrt_apply(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Err(Error::UnsupportedOperation(
            "square root of the non-diagonal heuristic factor",
        ))
    }

    /// Remainder block `R (u, theta) = (0, I* u + (A^{-1/2} - A^{-1}) theta)`
    /// dropped by the diagonal variant; returns the ratios
    /// `||R x|| / ||G x||` over seeded random draws (diagnostic only).
    pub fn remainder_ratio_stats(&self, seed: u64, n_samples: usize) -> Vec<f64> {
        let mut rng = Rng64::new(seed);
        let op = crate::aao_bh::BhOperator::new(&self.basis, self.grid);
        (0..n_samples)
            .map(|_| {
                let u = U0Field::random(&self.basis, self.grid, &mut rng);
                let theta = SpectralField::random(&self.basis, &mut rng);
                let r2 = u
                    .time_integral()
                    .add(&theta.map_coeffs(|c, lam| (lam.powf(-0.5) - lam.powf(-1.0)) * c));
                let gnorm = op
                    .apply(&crate::aao_bh::BhBlockVector { u: u.clone(), theta: theta.clone() })
                    .norm();
                r2.norm_h01() / gnorm
            })
            .collect()
    }
}

// ── Sampling ────────────────────────────────────────────────────────

/// Draw `count` samples `mean + C^{1/2} xi` with i.i.d. standard normal
/// coordinates from the seeded generator.
pub fn sample_prior(p: &PriorModel, seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = Rng64::new(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let xi = rng.normal_vec(p.dim());
        let mut draw = p.sqrt_apply(&xi)?;
        for (d, m) in draw.iter_mut().zip(&p.mean) {
            *d += m;
        }
        out.push(draw);
    }
    Ok(out)
}

/// Check the prior invariants on seeded random probes: symmetry of the
/// covariance form, positive semidefiniteness of its Rayleigh quotients,
/// square root consistency, and precision-covariance inversion.
pub fn validate_prior(p: &PriorModel, seed: u64, n_probes: usize) -> Result<()> {
    let mut rng = Rng64::new(seed);
    let n = p.dim();
    for _ in 0..n_probes {
        let x = rng.normal_vec(n);
        let y = rng.normal_vec(n);
        let cx = p.cov_apply(&x);
        let cy = p.cov_apply(&y);
        let xy: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yx: f64 = cy.iter().zip(&x).map(|(a, b)| a * b).sum();
        let scale = xy.abs().max(yx.abs()).max(1e-30);
        if (xy - yx).abs() > 1e-10 * scale {
            return Err(Error::InvalidConfig(format!(
                "covariance not symmetric: defect {}",
                (xy - yx).abs() / scale
            )));
        }
        let quad: f64 = cx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let xx: f64 = x.iter().map(|a| a * a).sum();
        if quad < -1e-8 * xx {
            return Err(Error::InvalidConfig(format!("covariance not PSD: {quad}")));
        }
        if let Ok(sx) = p.sqrt_apply(&x) {
            let ssx = p.sqrt_apply(&sx)?;
            let dev = ssx
                .iter()
                .zip(&cx)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            let mag = cx.iter().map(|a| a.abs()).fold(0.0_f64, f64::max).max(1e-30);
            if dev > 1e-8 * mag.max(1.0) {
                return Err(Error::InvalidConfig(format!("sqrt inconsistent: {dev}")));
            }
        }
        if let Ok(px) = p.precision_apply(&cx) {
            let dev =
                px.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
            let mag = x.iter().map(|a| a.abs()).fold(0.0_f64, f64::max);
            if dev > 1e-8 * mag.max(1.0) {
                return Err(Error::InvalidConfig(format!("precision inconsistent: {dev}")));
            }
        }
    }
    Ok(())
}

// ── Link-condition diagnostics ──────────────────────────────────────

/// Empirical two-sided link-condition report.
#[derive(Debug, Clone)]
pub struct LinkCheckReport {
    pub n_samples: usize,
    pub n_skipped: usize,
    /// Per-sample ratios `||G x|| / ||psi(C0) x||` on random draws.
    pub sample_ratios: Vec<f64>,
    /// Ratios on the first basis modes, in mode order (divergence probe).
    pub mode_ratios: Vec<f64>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Set when the tail of the mode probes exceeds ten times the head.
    pub upper_divergence: bool,
}

impl LinkCheckReport {
    pub fn write_csv(&self, w: &mut impl IoWrite) -> Result<()> {
        writeln!(w, "probe,index,ratio")?;
        for (i, r) in self.sample_ratios.iter().enumerate() {
            writeln!(w, "sample,{i},{r}")?;
        }
        for (i, r) in self.mode_ratios.iter().enumerate() {
            writeln!(w, "mode,{i},{r}")?;
        }
        Ok(())
    }
}

/// Ratio statistics of `||G x|| / ||psi(C0) x||` over random draws plus a
/// sweep of basis-mode probes.
///
/// `g_norm` and `psi_norm` evaluate the two sides on a common vector type;
/// `sample(i)` draws the i-th random probe and `mode_probe(k)` the k-th
/// structured one. Zero-denominator samples are skipped and counted.
pub fn check_link_condition<X>(
    g_norm: impl Fn(&X) -> f64,
    psi_norm: impl Fn(&X) -> f64,
    sample: impl Fn(u64) -> X,
    mode_probe: impl Fn(usize) -> X,
    n_samples: usize,
    n_modes: usize,
) -> LinkCheckReport {
    let mut sample_ratios = Vec::with_capacity(n_samples);
    let mut n_skipped = 0;
    for i in 0..n_samples {
        let x = sample(i as u64);
        let den = psi_norm(&x);
        if den == 0.0 {
            n_skipped += 1;
            continue;
        }
        sample_ratios.push(g_norm(&x) / den);
    }
    let mut mode_ratios = Vec::with_capacity(n_modes);
    for k in 0..n_modes {
        let x = mode_probe(k);
        let den = psi_norm(&x);
        if den == 0.0 {
            n_skipped += 1;
            continue;
        }
        mode_ratios.push(g_norm(&x) / den);
    }
    let all = sample_ratios.iter().chain(&mode_ratios);
    let min_ratio = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let max_ratio = all.cloned().fold(0.0_f64, f64::max);
    // divergence heuristic: tail of the mode sweep dominates its head
    let head = mode_ratios.iter().take(10).cloned().fold(0.0_f64, f64::max);
    let tail = mode_ratios.iter().rev().take(10).cloned().fold(0.0_f64, f64::max);
    let upper_divergence = mode_ratios.len() >= 20 && tail > 10.0 * head;
    LinkCheckReport {
        n_samples: sample_ratios.len(),
        n_skipped,
        sample_ratios,
        mode_ratios,
        min_ratio,
        max_ratio,
        upper_divergence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aao_is::{IsBlockVector, IsOperator};

    #[test]
    fn spectral_identity_covariance() {
        let basis = SpectralBasis::new(3);
        let p = smoothness_prior_spectral(&basis, 1.0, 0.0, 1).unwrap();
        let x = vec![1.0; basis.len()];
        assert_eq!(p.cov_apply(&x), x);
        validate_prior(&p, 1, 20).unwrap();
    }

    #[test]
    fn spectral_laplacian_covariance_readoff() {
        let basis = SpectralBasis::new(4);
        let p = smoothness_prior_spectral(&basis, 0.0, 1.0, 1).unwrap();
        let d = p.cov_diagonal();
        for (i, v) in d.iter().enumerate() {
            assert!((v - 1.0 / basis.eigenvalue(i)).abs() < 1e-14);
        }
        // truncated trace sum(1/lambda) is finite and matches the diagonal
        let trace: f64 = d.iter().sum();
        assert!(trace.is_finite() && trace > 0.0);
    }

    #[test]
    fn rejects_doubly_zero_coefficients_and_bad_powers() {
        let basis = SpectralBasis::new(2);
        assert!(smoothness_prior_spectral(&basis, 0.0, 0.0, 1).is_err());
        assert!(smoothness_prior_spectral(&basis, 1.0, 1.0, 0).is_err());
        assert!(smoothness_prior_spectral(&basis, 1.0, 1.0, 3).is_err());
        let mesh = Mesh::new(4);
        assert!(smoothness_prior_fe(&mesh, 0.0, 0.0, 1).is_err());
        assert!(smoothness_prior_fe(&mesh, 1.0, 1.0, 5).is_err());
    }

    #[test]
    fn fe_and_spectral_covariances_agree_on_eigenmode() {
        // apply both covariances to the interpolated first eigenfunction;
        // they agree to the FE discretization error O(h^2)
        let basis = SpectralBasis::new(1);
        let phi = SpectralField::unit_mode(&basis, 0);
        let lam = basis.eigenvalue(0);
        let (kappa, gamma) = (0.5, 2.0);
        let spectral_factor = 1.0 / (kappa + gamma * lam);
        let mut errs = Vec::new();
        for n in [9usize, 17] {
            let mesh = Mesh::new(n);
            let nodal = phi.synthesize(&mesh).unwrap();
            let p = smoothness_prior_fe(&mesh, kappa, gamma, 1).unwrap();
            // FE covariance acts on the M-weighted right-hand side of the
            // coefficient identity (kappa M + gamma K) c = M v
            let m = assemble_mass(&mesh).unwrap();
            let out = p.cov_apply(&m.matvec(&nodal.values));
            let want: Vec<f64> = nodal.values.iter().map(|v| spectral_factor * v).collect();
            let num: f64 = out
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = want.iter().map(|a| a * a).sum::<f64>().sqrt();
            errs.push(num / den);
        }
        assert!(errs[1] < errs[0] / 2.0, "{errs:?}");
        assert!(errs[1] < 0.02, "{errs:?}");
    }

    #[test]
    fn fe_prior_passes_invariants() {
        let mesh = Mesh::new(6);
        for n_power in [1u32, 2] {
            let p = smoothness_prior_fe(&mesh, 0.01, 35.0, n_power).unwrap();
            validate_prior(&p, 7, 10).unwrap();
        }
    }

    #[test]
    fn semigroup_prior_time_zero_block_is_cp() {
        let basis = SpectralBasis::new(3);
        let cp = smoothness_prior_spectral(&basis, 1.5, 0.5, 1).unwrap();
        let sp = semigroup_state_prior(
            &cp,
            &basis,
            &[0.0, 0.05, 0.1],
            None,
            &SpectralField::zeros(&basis),
        )
        .unwrap();
        let d = sp.cov_diagonal();
        let cpd = cp.cov_diagonal();
        for m in 0..basis.len() {
            assert!((d[m] - cpd[m]).abs() < 1e-14);
        }
        validate_prior(&sp, 3, 10).unwrap();
    }

    #[test]
    fn semigroup_prior_variance_decay_single_mode() {
        let basis = SpectralBasis::new(2);
        let cp = smoothness_prior_spectral(&basis, 1.0, 0.0, 1).unwrap();
        let t = 0.07;
        let sp = semigroup_state_prior(&cp, &basis, &[0.0, t], None, &SpectralField::zeros(&basis))
            .unwrap();
        let d = sp.cov_diagonal();
        for m in 0..basis.len() {
            let lam = basis.eigenvalue(m);
            let want = (-2.0 * lam * t).exp();
            assert!((d[basis.len() + m] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn semigroup_prior_monte_carlo_variance() {
        // push draws theta ~ N(0, C_p) through the semigroup; the empirical
        // variance of the first mode matches the block value within 5%
        let basis = SpectralBasis::new(2);
        let cp = smoothness_prior_spectral(&basis, 1.5, 0.5, 1).unwrap();
        let t = 0.05;
        let sp = semigroup_state_prior(&cp, &basis, &[t], None, &SpectralField::zeros(&basis))
            .unwrap();
        let want = sp.cov_diagonal()[0];
        let draws = sample_prior(&cp, 99, 10_000).unwrap();
        let mut acc = 0.0;
        for d in &draws {
            let f = SpectralField::from_coeffs(&basis, d.clone()).unwrap();
            let pushed = f.apply_semigroup(t).unwrap();
            acc += pushed.coeffs[0] * pushed.coeffs[0];
        }
        let emp = acc / draws.len() as f64;
        assert!((emp - want).abs() / want < 0.05, "{emp} vs {want}");
    }

    #[test]
    fn semigroup_prior_translation_invariance() {
        // forcing changes only the mean, never the covariance action
        let basis = SpectralBasis::new(3);
        let grid = TimeGrid::new(4, 0.1);
        let cp = smoothness_prior_spectral(&basis, 1.5, 0.5, 1).unwrap();
        let times: Vec<f64> = (0..grid.n_slices()).map(|k| grid.node(k)).collect();
        let mut rng = Rng64::new(21);
        let forcing = SpaceTimeField::random_dg0(&basis, grid, &mut rng);
        let mean_theta = SpectralField::random(&basis, &mut rng);
        let without =
            semigroup_state_prior(&cp, &basis, &times, None, &mean_theta).unwrap();
        let with =
            semigroup_state_prior(&cp, &basis, &times, Some(&forcing), &mean_theta).unwrap();
        let probe = rng.normal_vec(without.dim());
        let a = without.cov_apply(&probe);
        let b = with.cov_apply(&probe);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        // means differ away from t = 0
        let dev: f64 = with
            .mean
            .iter()
            .zip(&without.mean)
            .skip(basis.len())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(dev > 1e-6);
    }

    #[test]
    fn heuristic_diagonal_prior_is_psd_with_consistent_sqrt() {
        let mesh = Mesh::new(5);
        let p = heuristic_bh_prior_diagonal(&mesh, 3).unwrap();
        validate_prior(&p, 11, 10).unwrap();
    }

    #[test]
    fn heuristic_full_factor_norm_identity() {
        // || C~ x ||_{U0 x H01} = || G x ||_{W' x L2} exactly per mode
        let basis = SpectralBasis::new(4);
        let grid = TimeGrid::new(4, 0.5);
        let factor = HeuristicFullFactor::new(&basis, grid);
        let op = crate::aao_bh::BhOperator::new(&basis, grid);
        let mut rng = Rng64::new(31);
        for _ in 0..30 {
            let u = U0Field::random(&basis, grid, &mut rng);
            let theta = SpectralField::random(&basis, &mut rng);
            let lhs = factor.norm_sq(&u, &theta);
            let rhs = op
                .apply(&crate::aao_bh::BhBlockVector { u: u.clone(), theta: theta.clone() })
                .norm()
                .powi(2);
            assert!((lhs - rhs).abs() <= 1e-8 * rhs.max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn heuristic_full_factor_rejects_sqrt() {
        let basis = SpectralBasis::new(2);
        let factor = HeuristicFullFactor::new(&basis, TimeGrid::new(2, 0.5));
        assert!(matches!(
            factor.sqrt_apply(&[0.0]),
            Err(Error::UnsupportedOperation(_))
        ));
    }

    #[test]
    fn heuristic_remainder_stats_are_finite() {
        let basis = SpectralBasis::new(3);
        let factor = HeuristicFullFactor::new(&basis, TimeGrid::new(3, 0.5));
        let stats = factor.remainder_ratio_stats(5, 20);
        assert_eq!(stats.len(), 20);
        assert!(stats.iter().all(|r| r.is_finite() && *r >= 0.0));
    }

    #[test]
    fn sampling_zero_covariance_returns_mean() {
        let mean = vec![2.0, -1.0, 0.5];
        let p = PriorModel::new(
            "zero",
            mean.clone(),
            Box::new(|x: &[f64]| vec![0.0; x.len()]),
            Some(Box::new(|x: &[f64]| vec![0.0; x.len()])),
            None,
        );
        for draw in sample_prior(&p, 3, 5).unwrap() {
            assert_eq!(draw, mean);
        }
    }

    #[test]
    fn sampling_seed_determinism() {
        let basis = SpectralBasis::new(3);
        let p = smoothness_prior_spectral(&basis, 1.0, 1.0, 1).unwrap();
        let a = sample_prior(&p, 42, 3).unwrap();
        let b = sample_prior(&p, 42, 3).unwrap();
        let c = sample_prior(&p, 43, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_empirical_mean_within_clt_bound() {
        let basis = SpectralBasis::new(4);
        let mut p = smoothness_prior_spectral(&basis, 2.0, 0.0, 1).unwrap();
        let mut rng = Rng64::new(77);
        p.mean = rng.normal_vec(p.dim());
        let count = 10_000;
        let draws = sample_prior(&p, 17, count).unwrap();
        // ten probe coordinates; the coordinate standard deviation is sqrt(1/2)
        let se = (0.5 / count as f64).sqrt();
        for i in 0..10 {
            let mean_i: f64 = draws.iter().map(|d| d[i]).sum::<f64>() / count as f64;
            assert!(
                (mean_i - p.mean[i]).abs() < 3.0 * se,
                "coordinate {i}: {mean_i} vs {}",
                p.mean[i]
            );
        }
    }

    #[test]
    fn link_check_trivial_prior_unit_ratios() {
        // psi(C0) = (G*G)^{1/2} with psi(t) = sqrt(t): ratios are one;
        // the psi-norm route goes through the adjoint, the G-norm route
        // through the forward map only
        let basis = SpectralBasis::new(4);
        let op = IsOperator::new(&basis);
        let op2 = op.clone();
        let report = check_link_condition(
            |x: &IsBlockVector| op.apply(x).norm(),
            |x: &IsBlockVector| {
                let gx = op2.apply(x);
                let gstar_gx = op2.apply_adjoint(&gx);
                gstar_gx.inner(x).max(0.0).sqrt()
            },
            |seed| {
                let mut rng = Rng64::new(seed + 1000);
                IsBlockVector::new(
                    SpectralField::random(&basis, &mut rng),
                    SpectralField::random(&basis, &mut rng),
                )
            },
            |k| {
                let m = k % basis.len();
                IsBlockVector::new(
                    SpectralField::unit_mode(&basis, m),
                    SpectralField::zeros(&basis),
                )
            },
            50,
            16,
        );
        assert!(report.n_skipped == 0);
        assert!((report.min_ratio - 1.0).abs() < 1e-8);
        assert!((report.max_ratio - 1.0).abs() < 1e-8);
        assert!(!report.upper_divergence);
    }

    #[test]
    fn link_check_is_diagonal_inverse_prior() {
        // psi(C0) = diag(A^{-1}, A^{-1}): lower link holds, upper diverges.
        // Mode probes walk the diagonal modes (j, j) so the probed
        // eigenvalues span two orders of magnitude.
        let basis = SpectralBasis::new(50);
        let op = IsOperator::new(&basis);
        let diag_mode = |j: usize| {
            (0..basis.len())
                .find(|&i| basis.mode(i) == (j + 1, j + 1))
                .expect("diagonal mode present")
        };
        let psi = |x: &IsBlockVector| {
            let u = x.u.apply_power(-1.0);
            let t = x.theta.apply_power(-1.0);
            (u.inner_u(&u) + t.inner_l2(&t)).sqrt()
        };
        let report = check_link_condition(
            |x: &IsBlockVector| op.apply(x).norm(),
            psi,
            |seed| {
                let mut rng = Rng64::new(seed + 2000);
                IsBlockVector::new(
                    SpectralField::random(&basis, &mut rng),
                    SpectralField::random(&basis, &mut rng),
                )
            },
            |k| {
                IsBlockVector::new(
                    SpectralField::unit_mode(&basis, diag_mode(k)),
                    SpectralField::zeros(&basis),
                )
            },
            100,
            50,
        );
        assert!(report.min_ratio > 1.0, "min {}", report.min_ratio);
        assert!(report.upper_divergence, "max {}", report.max_ratio);
        // the mode ratios grow like sqrt(1 + lambda^2)
        let r0 = report.mode_ratios[0];
        let want = (1.0 + basis.eigenvalue(diag_mode(0)).powi(2)).sqrt();
        assert!((r0 - want).abs() < 1e-9 * want);
    }

    #[test]
    fn link_check_bh_semigroup_smoothing_prior() {
        // psi(C0) = diag(A^{1/2} e^{-TA} S_K, A^{-1/2} e^{-TA}) satisfies
        // the lower link: ratios bounded away from zero
        let basis = SpectralBasis::new(4);
        let grid = TimeGrid::new(4, 0.4);
        let op = crate::aao_bh::BhOperator::new(&basis, grid);
        // B u = A^{1/2} e^{-TA} int_0^t e^{-(t-s)A} u(s) ds measured in U0:
        // || B u ||_{U0} = || e^{-TA} u ||_{L2(L2)} with u read through its
        // dG(0) slice values
        let psi = |x: &crate::aao_bh::BhBlockVector| {
            let mut b_sq = 0.0;
            // integrate the slice representation of u against the decay
            let slices = x.u.sample_slices();
            for (k, s) in slices.iter().enumerate() {
                let w = grid.weight(k);
                for m in 0..basis.len() {
                    let lam = basis.eigenvalue(m);
                    let v = (-lam * grid.t_final).exp() * s.coeffs[m];
                    b_sq += w * v * v;
                }
            }
            let d = x.theta.map_coeffs(|c, lam| {
                lam.powf(-0.5) * (-lam * grid.t_final).exp() * c
            });
            (b_sq + d.inner_h01(&d)).sqrt()
        };
        let report = check_link_condition(
            |x: &crate::aao_bh::BhBlockVector| op.apply(x).norm(),
            psi,
            |seed| {
                let mut rng = Rng64::new(seed + 3000);
                crate::aao_bh::BhBlockVector {
                    u: U0Field::random(&basis, grid, &mut rng),
                    theta: SpectralField::random(&basis, &mut rng),
                }
            },
            |k| crate::aao_bh::BhBlockVector {
                u: U0Field::zeros(&basis, grid),
                theta: SpectralField::unit_mode(&basis, k % basis.len()),
            },
            50,
            16,
        );
        assert!(report.min_ratio > 0.5, "min {}", report.min_ratio);
        assert!(report.min_ratio.is_finite());
    }
}
