//! Posterior computation: reduced gradients and Hessians for both problems
//! and both choices of eliminated variable, MAP estimation through CG,
//! direct Gaussian posterior mean/covariance, posterior sampling, and
//! squared-posterior-contraction diagnostics.
//!
//! The reduced cost in all four cases is
//!
//! ```text
//! j(v) = 1/2 || F v - y ||_Y^2
//!      + alpha/2 ( <u, C1 u> + 2 <u, C2 theta> + <theta, C3 theta> )
//! ```
//!
//! where `(u, theta)` is the model-consistent pair generated by the free
//! variable `v` and `C1`, `C2`, `C3` act per spectral mode. Gradients are
//! Riesz representatives in the variable's own inner product (`L2` for the
//! source, the `A^2`-weighted product for the Poisson state, `H_0^1` for
//! the initial condition, `U0` for the heat state), so a Hessian built from
//! them is self-adjoint in that same product and CG applies directly.
//!
//! The posterior covariance attached to a MAP solve is `delta^2 H^{-1}`,
//! the Gaussian posterior covariance for noise scale `delta` and the prior
//! whose precision matches the penalty.

use std::sync::Arc;

use crate::aao_bh::{BhOperator, SpaceTimeField, TimeGrid, U0Field};
use crate::error::{Error, Result};
use crate::laplacian::{SpectralBasis, SpectralField};
use crate::linalg::{
    cholesky, conjugate_gradient, matrix_function, sym_eig, DenseMatrix, DenseSymMatrix,
    InnerProduct,
};
use crate::rng::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    InverseSource,
    BackwardsHeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableKind {
    Parameter,
    State,
}

/// Reduced-cost configuration on the spectral backend.
///
/// `c1`, `c2`, `c3` are per-mode penalty coefficients (state, cross,
/// parameter); `data` is the observation (full field for the source
/// problem, final-time field for backwards heat); `delta` only scales the
/// posterior covariance attached to MAP solves.
pub struct CostConfig {
    pub basis: Arc<SpectralBasis>,
    pub grid: TimeGrid,
    pub alpha: f64,
    pub delta: f64,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub c3: Vec<f64>,
    pub data: SpectralField,
    pub forcing_is: Option<SpectralField>,
    pub forcing_bh: Option<SpaceTimeField>,
}

impl CostConfig {
    /// Configuration with zero penalties and the given data.
    pub fn new(
        basis: &Arc<SpectralBasis>,
        grid: TimeGrid,
        alpha: f64,
        delta: f64,
        data: SpectralField,
    ) -> Self {
        let n = basis.len();
        CostConfig {
            basis: Arc::clone(basis),
            grid,
            alpha,
            delta,
            c1: vec![0.0; n],
            c2: vec![0.0; n],
            c3: vec![0.0; n],
            data,
            forcing_is: None,
            forcing_bh: None,
        }
    }

    pub fn with_penalties(mut self, c1: Vec<f64>, c2: Vec<f64>, c3: Vec<f64>) -> Self {
        assert_eq!(c1.len(), self.basis.len());
        assert_eq!(c2.len(), self.basis.len());
        assert_eq!(c3.len(), self.basis.len());
        self.c1 = c1;
        self.c2 = c2;
        self.c3 = c3;
        self
    }

    fn forcing_is_field(&self) -> SpectralField {
        self.forcing_is.clone().unwrap_or_else(|| SpectralField::zeros(&self.basis))
    }
}

// ── Inverse source, parameter-reduced ───────────────────────────────

fn is_state_of_theta(theta: &SpectralField, cfg: &CostConfig) -> SpectralField {
    theta.add(&cfg.forcing_is_field()).apply_power(-1.0)
}

pub fn is_cost_theta(theta: &SpectralField, cfg: &CostConfig) -> f64 {
    let u = is_state_of_theta(theta, cfg);
    let r = u.sub(&cfg.data);
    let mut pen = 0.0;
    for m in 0..cfg.basis.len() {
        let lam = cfg.basis.eigenvalue(m);
        let (um, tm) = (u.coeffs[m], theta.coeffs[m]);
        pen += cfg.c1[m] * lam * lam * um * um
            + 2.0 * cfg.c2[m] * lam * lam * um * tm
            + cfg.c3[m] * tm * tm;
    }
    0.5 * r.inner_l2(&r) + 0.5 * cfg.alpha * pen
}

pub fn is_gradient_theta(theta: &SpectralField, cfg: &CostConfig) -> SpectralField {
    let u = is_state_of_theta(theta, cfg);
    let r = u.sub(&cfg.data);
    let mut coeffs = vec![0.0; cfg.basis.len()];
    for (m, c) in coeffs.iter_mut().enumerate() {
        let lam = cfg.basis.eigenvalue(m);
        let (um, tm) = (u.coeffs[m], theta.coeffs[m]);
        // A^{-1} r + alpha (A C1 u + A C2 theta + C2* u + C3 theta),
        // with C2* u carrying the A^2 weight of the state product
        *c = r.coeffs[m] / lam
            + cfg.alpha
                * (lam * cfg.c1[m] * um
                    + lam * cfg.c2[m] * tm
                    + lam * lam * cfg.c2[m] * um
                    + cfg.c3[m] * tm);
    }
    SpectralField::from_coeffs(&cfg.basis, coeffs).expect("finite")
}

/// Per-mode scalar of the parameter-reduced Hessian for the source problem:
/// `lambda^{-2} + alpha (c1 + 2 lambda c2 + c3)`.
pub fn is_hessian_theta_diag(cfg: &CostConfig) -> Vec<f64> {
    cfg.basis
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(m, &lam)| {
            lam.powi(-2) + cfg.alpha * (cfg.c1[m] + 2.0 * lam * cfg.c2[m] + cfg.c3[m])
        })
        .collect()
}

pub fn is_hessian_theta_action(theta_hat: &SpectralField, cfg: &CostConfig) -> SpectralField {
    let h = is_hessian_theta_diag(cfg);
    let coeffs = theta_hat.coeffs.iter().zip(&h).map(|(t, h)| t * h).collect();
    SpectralField::from_coeffs(&cfg.basis, coeffs).expect("finite")
}

// ── Inverse source, state-reduced ───────────────────────────────────

fn is_theta_of_state(u: &SpectralField, cfg: &CostConfig) -> SpectralField {
    u.apply_power(1.0).sub(&cfg.forcing_is_field())
}

pub fn is_cost_state(u: &SpectralField, cfg: &CostConfig) -> f64 {
    let theta = is_theta_of_state(u, cfg);
    let r = u.sub(&cfg.data);
    let mut pen = 0.0;
    for m in 0..cfg.basis.len() {
        let lam = cfg.basis.eigenvalue(m);
        let (um, tm) = (u.coeffs[m], theta.coeffs[m]);
        pen += cfg.c1[m] * lam * lam * um * um
            + 2.0 * cfg.c2[m] * lam * lam * um * tm
            + cfg.c3[m] * tm * tm;
    }
    0.5 * r.inner_l2(&r) + 0.5 * cfg.alpha * pen
}

pub fn is_gradient_state(u: &SpectralField, cfg: &CostConfig) -> SpectralField {
    let theta = is_theta_of_state(u, cfg);
    let r = u.sub(&cfg.data);
    let mut coeffs = vec![0.0; cfg.basis.len()];
    for (m, c) in coeffs.iter_mut().enumerate() {
        let lam = cfg.basis.eigenvalue(m);
        let (um, tm) = (u.coeffs[m], theta.coeffs[m]);
        // A^{-2} r + alpha (C1 u + C2 theta + A C2 u + C3 theta / A),
        // the Riesz representative in the A^2-weighted state product
        *c = r.coeffs[m] / (lam * lam)
            + cfg.alpha
                * (cfg.c1[m] * um
                    + cfg.c2[m] * tm
                    + lam * cfg.c2[m] * um
                    + cfg.c3[m] * tm / lam);
    }
    SpectralField::from_coeffs(&cfg.basis, coeffs).expect("finite")
}

/// Per-mode scalar of the state-reduced Hessian for the source problem;
/// the same scalar as the parameter-reduced one, acting on the state space.
pub fn is_hessian_state_diag(cfg: &CostConfig) -> Vec<f64> {
    is_hessian_theta_diag(cfg)
}

pub fn is_hessian_state_action(u_hat: &SpectralField, cfg: &CostConfig) -> SpectralField {
    let h = is_hessian_state_diag(cfg);
    let coeffs = u_hat.coeffs.iter().zip(&h).map(|(t, h)| t * h).collect();
    SpectralField::from_coeffs(&cfg.basis, coeffs).expect("finite")
}

// ── Backwards heat, parameter-reduced ───────────────────────────────

fn bh_state_of_theta(theta: &SpectralField, cfg: &CostConfig) -> U0Field {
    // u(theta) = (I - e^{-A .}) theta (+ forward solve of the forcing):
    // its history is the time-constant field A theta plus the forcing
    let mut history = match &cfg.forcing_bh {
        Some(f) => f.clone(),
        None => SpaceTimeField::zeros(&cfg.basis, cfg.grid),
    };
    history.add_time_constant(&theta.apply_power(1.0), 1.0);
    U0Field { history }
}

fn bh_obs_factor(cfg: &CostConfig, m: usize) -> f64 {
    1.0 - (-cfg.basis.eigenvalue(m) * cfg.grid.t_final).exp()
}

fn bh_obs_of_theta(theta: &SpectralField, cfg: &CostConfig) -> SpectralField {
    let u = bh_state_of_theta(theta, cfg);
    u.final_value()
}

fn bh_penalty(u: &U0Field, theta: &SpectralField, cfg: &CostConfig) -> f64 {
    let energies = u.history.per_mode_weighted_inner(&u.history, -1);
    let int_h = u.history.time_integral();
    let mut pen = 0.0;
    for m in 0..cfg.basis.len() {
        let lam = cfg.basis.eigenvalue(m);
        let tm = theta.coeffs[m];
        // <u, C1 u>_{U0} + 2 <u, C2 theta>_{U0} + <theta, C3 theta>_{H01}
        // with C2 theta = c2 (I - e^{-A .}) theta
        pen += cfg.c1[m] * energies[m]
            + 2.0 * cfg.c2[m] * tm * int_h.coeffs[m]
            + cfg.c3[m] * lam * tm * tm;
    }
    pen
}

pub fn bh_cost_theta(theta: &SpectralField, cfg: &CostConfig) -> f64 {
    let u = bh_state_of_theta(theta, cfg);
    let obs = u.final_value();
    let r = obs.sub(&cfg.data);
    0.5 * r.inner_l2(&r) + 0.5 * cfg.alpha * bh_penalty(&u, theta, cfg)
}

pub fn bh_gradient_theta(theta: &SpectralField, cfg: &CostConfig) -> SpectralField {
    let u = bh_state_of_theta(theta, cfg);
    let r = bh_obs_of_theta(theta, cfg).sub(&cfg.data);
    let int_h = u.history.time_integral();
    let t_final = cfg.grid.t_final;
    let mut coeffs = vec![0.0; cfg.basis.len()];
    for (m, c) in coeffs.iter_mut().enumerate() {
        let lam = cfg.basis.eigenvalue(m);
        let d = bh_obs_factor(cfg, m);
        let tm = theta.coeffs[m];
        // Riesz representative in H_0^1
        *c = d * r.coeffs[m] / lam
            + cfg.alpha
                * (cfg.c1[m] * int_h.coeffs[m] / lam
                    + cfg.c2[m] * (t_final * tm + int_h.coeffs[m] / lam)
                    + cfg.c3[m] * tm);
    }
    SpectralField::from_coeffs(&cfg.basis, coeffs).expect("finite")
}

/// Per-mode scalar of the parameter-reduced Hessian for backwards heat:
/// `(1 - e^{-lambda T})^2 / lambda + alpha (c1 T + 2 c2 T + c3)`.
pub fn bh_hessian_theta_diag(cfg: &CostConfig) -> Vec<f64> {
    let t_final = cfg.grid.t_final;
    cfg.basis
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(m, &lam)| {
            let d = 1.0 - (-lam * t_final).exp();
            d * d / lam + cfg.alpha * (cfg.c1[m] * t_final + 2.0 * cfg.c2[m] * t_final + cfg.c3[m])
        })
        .collect()
}

pub fn bh_hessian_theta_action(theta_hat: &SpectralField, cfg: &CostConfig) -> SpectralField {
    let h = bh_hessian_theta_diag(cfg);
    let coeffs = theta_hat.coeffs.iter().zip(&h).map(|(t, h)| t * h).collect();
    SpectralField::from_coeffs(&cfg.basis, coeffs).expect("finite")
}

// ── Backwards heat, state-reduced ───────────────────────────────────

fn bh_theta_of_state(u: &U0Field, cfg: &CostConfig) -> SpectralField {
    // theta(u) = L# (K u - f) with L# = (1/T) L*: per mode
    // (int h_u - int f) / (lambda T)
    let mut int_h = u.history.time_integral();
    if let Some(f) = &cfg.forcing_bh {
        int_h = int_h.sub(&f.time_integral());
    }
    int_h.map_coeffs(|c, lam| c / (lam * cfg.grid.t_final))
}

pub fn bh_cost_state(u: &U0Field, cfg: &CostConfig) -> f64 {
    let theta = bh_theta_of_state(u, cfg);
    let r = u.final_value().sub(&cfg.data);
    0.5 * r.inner_l2(&r) + 0.5 * cfg.alpha * bh_penalty(u, &theta, cfg)
}

pub fn bh_gradient_state(u: &U0Field, cfg: &CostConfig) -> U0Field {
    let cfgb = &cfg.basis;
    let grid = cfg.grid;
    let t_final = grid.t_final;
    let r = u.final_value().sub(&cfg.data);
    let theta = bh_theta_of_state(u, cfg);
    let int_h = u.history.time_integral();

    // misfit part: trace adjoint of the residual (exponential tail)
    let op = BhOperator::new(cfgb, grid);
    let mut g = op.trace_adjoint(&r);
    // C1 part: scale the history per mode
    for (k, slice) in u.history.slices.iter().enumerate() {
        for m in 0..cfgb.len() {
            g.history.slices[k][m] += cfg.alpha * cfg.c1[m] * slice[m];
        }
    }
    for m in 0..cfgb.len() {
        g.history.exp_tail[m] += cfg.alpha * cfg.c1[m] * u.history.exp_tail[m];
    }
    // cross and parameter-penalty parts enter as constant histories
    for m in 0..cfgb.len() {
        let lam = cfgb.eigenvalue(m);
        let v = cfg.alpha
            * (cfg.c2[m] * (int_h.coeffs[m] / (lam * t_final) + theta.coeffs[m])
                + cfg.c3[m] * theta.coeffs[m] / t_final);
        for k in 0..grid.n_slices() {
            g.history.slices[k][m] += lam * v;
        }
    }
    g
}

pub fn bh_hessian_state_action(u_hat: &U0Field, cfg: &CostConfig) -> U0Field {
    // the cost is quadratic, so the Hessian action is the gradient's linear
    // part: evaluate with zeroed data and forcing
    let zero_cfg = CostConfig {
        basis: Arc::clone(&cfg.basis),
        grid: cfg.grid,
        alpha: cfg.alpha,
        delta: cfg.delta,
        c1: cfg.c1.clone(),
        c2: cfg.c2.clone(),
        c3: cfg.c3.clone(),
        data: SpectralField::zeros(&cfg.basis),
        forcing_is: None,
        forcing_bh: None,
    };
    bh_gradient_state(u_hat, &zero_cfg)
}

// ── Problem dispatch for the parameter-reduced calculus ─────────────

/// Reduced cost in the parameter for either problem.
pub fn reduced_cost_theta(theta: &SpectralField, cfg: &CostConfig, problem: ProblemKind) -> f64 {
    match problem {
        ProblemKind::InverseSource => is_cost_theta(theta, cfg),
        ProblemKind::BackwardsHeat => bh_cost_theta(theta, cfg),
    }
}

/// Riesz gradient of the parameter-reduced cost in the parameter space's
/// inner product (`L2` for the source problem, `H_0^1` for backwards heat).
pub fn reduced_gradient_theta(
    theta: &SpectralField,
    cfg: &CostConfig,
    problem: ProblemKind,
) -> SpectralField {
    match problem {
        ProblemKind::InverseSource => is_gradient_theta(theta, cfg),
        ProblemKind::BackwardsHeat => bh_gradient_theta(theta, cfg),
    }
}

/// Action of the parameter-reduced Hessian.
pub fn reduced_hessian_theta_action(
    theta_hat: &SpectralField,
    cfg: &CostConfig,
    problem: ProblemKind,
) -> SpectralField {
    match problem {
        ProblemKind::InverseSource => is_hessian_theta_action(theta_hat, cfg),
        ProblemKind::BackwardsHeat => bh_hessian_theta_action(theta_hat, cfg),
    }
}

// ── MAP estimation via CG ───────────────────────────────────────────

/// Convergence data of the CG solve behind a MAP estimate.
#[derive(Debug, Clone, Copy)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub residual: f64,
}

type LinAction = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Gaussian posterior descriptor over flattened coordinates.
///
/// For parameter variables the coordinates are the spectral coefficients;
/// for the heat state they are per-mode `(N+1)` history slices plus the
/// exponential tail coefficient, mode-major.
pub struct PosteriorModel {
    pub mean: Vec<f64>,
    pub delta: f64,
    cov: LinAction,
    sqrt: LinAction,
    pub diagnostics: SolveDiagnostics,
}

impl std::fmt::Debug for PosteriorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PosteriorModel")
            .field("dim", &self.mean.len())
            .field("delta", &self.delta)
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

impl PosteriorModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Posterior covariance action on coordinates.
    pub fn cov_apply(&self, x: &[f64]) -> Vec<f64> {
        (self.cov)(x)
    }

    /// White-noise-to-fluctuation map `xi -> C^{1/2} xi`.
    pub fn sqrt_apply(&self, xi: &[f64]) -> Vec<f64> {
        (self.sqrt)(xi)
    }
}

/// Draw posterior samples `mean + C^{1/2} xi`, deterministic per seed.
pub fn sample_posterior(p: &PosteriorModel, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng64::new(seed);
    (0..count)
        .map(|_| {
            let xi = rng.normal_vec(p.dim());
            let mut draw = p.sqrt_apply(&xi);
            for (d, m) in draw.iter_mut().zip(&p.mean) {
                *d += m;
            }
            draw
        })
        .collect()
}

fn diag_posterior(
    mean: Vec<f64>,
    h_diag: Vec<f64>,
    gram_diag: Vec<f64>,
    delta: f64,
    diagnostics: SolveDiagnostics,
) -> PosteriorModel {
    // operator covariance delta^2 H^{-1}: per mode the coordinate action is
    // delta^2 / h_m; samples need the coordinate factor
    // delta / sqrt(h_m * w_m) so that the X-inner-product covariance is
    // delta^2 / h_m on the orthonormalized mode
    let d2 = delta * delta;
    let cov_diag: Vec<f64> = h_diag.iter().map(|h| d2 / h).collect();
    let samp_diag: Vec<f64> =
        h_diag.iter().zip(&gram_diag).map(|(h, w)| delta / (h * w).sqrt()).collect();
    PosteriorModel {
        mean,
        delta,
        cov: Box::new(move |x: &[f64]| x.iter().zip(&cov_diag).map(|(a, b)| a * b).collect()),
        sqrt: Box::new(move |x: &[f64]| x.iter().zip(&samp_diag).map(|(a, b)| a * b).collect()),
        diagnostics,
    }
}

/// Compute the MAP estimate by CG on `H v = -g(0)` in the variable's own
/// inner product; the returned posterior covariance is `delta^2 H^{-1}`.
pub fn map_estimate(
    cfg: &CostConfig,
    problem: ProblemKind,
    variable: VariableKind,
    tol: f64,
) -> Result<PosteriorModel> {
    if cfg.alpha <= 0.0 {
        return Err(Error::InvalidConfig("map_estimate needs alpha > 0".into()));
    }
    let max_iter = 500;
    match (problem, variable) {
        (ProblemKind::InverseSource, VariableKind::Parameter) => {
            let g0 = is_gradient_theta(&SpectralField::zeros(&cfg.basis), cfg);
            let rhs: Vec<f64> = g0.coeffs.iter().map(|v| -v).collect();
            let h = is_hessian_theta_diag(cfg);
            let hc = h.clone();
            let ip = InnerProduct::euclidean();
            let out = conjugate_gradient(
                |v: &[f64]| v.iter().zip(&hc).map(|(a, b)| a * b).collect(),
                &rhs,
                &ip,
                tol,
                max_iter,
            )?;
            let diag = SolveDiagnostics { iterations: out.iterations, residual: out.residual };
            Ok(diag_posterior(out.solution, h, vec![1.0; cfg.basis.len()], cfg.delta, diag))
        }
        (ProblemKind::InverseSource, VariableKind::State) => {
            let g0 = is_gradient_state(&SpectralField::zeros(&cfg.basis), cfg);
            let rhs: Vec<f64> = g0.coeffs.iter().map(|v| -v).collect();
            let h = is_hessian_state_diag(cfg);
            let hc = h.clone();
            let gram: Vec<f64> = cfg.basis.eigenvalues().iter().map(|l| l * l).collect();
            let ip = InnerProduct::from_diag(gram.clone());
            let out = conjugate_gradient(
                |v: &[f64]| v.iter().zip(&hc).map(|(a, b)| a * b).collect(),
                &rhs,
                &ip,
                tol,
                max_iter,
            )?;
            let diag = SolveDiagnostics { iterations: out.iterations, residual: out.residual };
            Ok(diag_posterior(out.solution, h, gram, cfg.delta, diag))
        }
        (ProblemKind::BackwardsHeat, VariableKind::Parameter) => {
            let g0 = bh_gradient_theta(&SpectralField::zeros(&cfg.basis), cfg);
            let rhs: Vec<f64> = g0.coeffs.iter().map(|v| -v).collect();
            let h = bh_hessian_theta_diag(cfg);
            let hc = h.clone();
            let gram: Vec<f64> = cfg.basis.eigenvalues().to_vec();
            let ip = InnerProduct::from_diag(gram.clone());
            let out = conjugate_gradient(
                |v: &[f64]| v.iter().zip(&hc).map(|(a, b)| a * b).collect(),
                &rhs,
                &ip,
                tol,
                max_iter,
            )?;
            let diag = SolveDiagnostics { iterations: out.iterations, residual: out.residual };
            Ok(diag_posterior(out.solution, h, gram, cfg.delta, diag))
        }
        (ProblemKind::BackwardsHeat, VariableKind::State) => map_estimate_bh_state(cfg, tol),
    }
}

/// Flattened coordinates of a `U0` element: per mode the `N+1` history
/// slices followed by the exponential tail coefficient, mode-major.
pub fn flatten_u0(u: &U0Field) -> Vec<f64> {
    let modes = u.basis().len();
    let n_slices = u.grid().n_slices();
    let mut out = Vec::with_capacity(modes * (n_slices + 1));
    for m in 0..modes {
        for k in 0..n_slices {
            out.push(u.history.slices[k][m]);
        }
        out.push(u.history.exp_tail[m]);
    }
    out
}

/// Inverse of [`flatten_u0`].
pub fn unflatten_u0(coords: &[f64], basis: &Arc<SpectralBasis>, grid: TimeGrid) -> U0Field {
    let modes = basis.len();
    let n_slices = grid.n_slices();
    assert_eq!(coords.len(), modes * (n_slices + 1));
    let mut u = U0Field::zeros(basis, grid);
    for m in 0..modes {
        let base = m * (n_slices + 1);
        for k in 0..n_slices {
            u.history.slices[k][m] = coords[base + k];
        }
        u.history.exp_tail[m] = coords[base + n_slices];
    }
    u
}

/// Per-mode Gram matrix of the `U0` inner product in the history basis
/// `{cell indicators, exponential tail}`.
fn u0_mode_gram(basis: &Arc<SpectralBasis>, grid: TimeGrid, m: usize) -> DenseSymMatrix {
    let lam = basis.eigenvalue(m);
    let n_slices = grid.n_slices();
    let t_final = grid.t_final;
    let mut g = DenseSymMatrix::zeros(n_slices + 1);
    for k in 0..n_slices {
        g.set_sym(k, k, grid.weight(k) / lam);
        let (a, b) = grid.cell(k);
        let e = ((-lam * (t_final - b)).exp() - (-lam * (t_final - a)).exp()) / lam;
        g.set_sym(n_slices, k, e / lam);
    }
    g.set_sym(n_slices, n_slices, (1.0 - (-2.0 * lam * t_final).exp()) / (2.0 * lam * lam));
    g
}

fn map_estimate_bh_state(cfg: &CostConfig, tol: f64) -> Result<PosteriorModel> {
    let basis = Arc::clone(&cfg.basis);
    let grid = cfg.grid;
    let modes = basis.len();
    let block = grid.n_slices() + 1;

    let g0 = bh_gradient_state(&U0Field::zeros(&basis, grid), cfg);
    let rhs: Vec<f64> = flatten_u0(&g0).iter().map(|v| -v).collect();

    let basis_h = Arc::clone(&basis);
    let cfg_h = CostConfig {
        basis: Arc::clone(&cfg.basis),
        grid,
        alpha: cfg.alpha,
        delta: cfg.delta,
        c1: cfg.c1.clone(),
        c2: cfg.c2.clone(),
        c3: cfg.c3.clone(),
        data: SpectralField::zeros(&cfg.basis),
        forcing_is: None,
        forcing_bh: None,
    };
    let h_action = move |v: &[f64]| -> Vec<f64> {
        let u = unflatten_u0(v, &basis_h, grid);
        flatten_u0(&bh_gradient_state(&u, &cfg_h))
    };

    let grams: Vec<DenseSymMatrix> = (0..modes).map(|m| u0_mode_gram(&basis, grid, m)).collect();
    let grams_ip = grams.clone();
    let ip = InnerProduct::from_fn(move |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for (m, g) in grams_ip.iter().enumerate() {
            let seg = &v[m * block..(m + 1) * block];
            out[m * block..(m + 1) * block].copy_from_slice(&g.matvec(seg));
        }
        out
    });

    let out = conjugate_gradient(&h_action, &rhs, &ip, tol, 500)?;
    let diagnostics = SolveDiagnostics { iterations: out.iterations, residual: out.residual };

    // per-mode posterior factors: coordinate Hessian blocks probed once
    let mut cov_blocks = Vec::with_capacity(modes);
    let mut samp_blocks = Vec::with_capacity(modes);
    for m in 0..modes {
        let mut a = DenseMatrix::zeros(block, block);
        for j in 0..block {
            let mut e = vec![0.0; modes * block];
            e[m * block + j] = 1.0;
            let he = h_action(&e);
            for i in 0..block {
                a.set(i, j, he[m * block + i]);
            }
        }
        // symmetric with respect to the mode Gram: form G A, symmetrize
        let g = &grams[m];
        let mut ga = DenseSymMatrix::zeros(block);
        for j in 0..block {
            let col: Vec<f64> = (0..block).map(|i| a.get(i, j)).collect();
            let gcol = g.matvec(&col);
            for i in 0..block {
                if i <= j {
                    ga.set_sym(j, i, gcol[i]);
                }
            }
        }
        let ga = DenseSymMatrix::from_fn_sym(block, |i, j| 0.5 * (ga.get(i, j) + ga.get(j, i)));
        // covariance action on coordinates: delta^2 A^{-1} = delta^2 (G A)^{-1} G
        let chol = cholesky(&ga)?;
        let g_cl = g.clone();
        let d2 = cfg.delta * cfg.delta;
        cov_blocks.push(move |x: &[f64]| -> Vec<f64> {
            let gx = g_cl.matvec(x);
            chol.solve(&gx).iter().map(|v| d2 * v).collect()
        });
        // sampling factor: orthonormalize with G^{1/2}, invert the
        // symmetric form, take its square root
        let g_eig = sym_eig(g)?;
        let g_isqrt = g_eig.assemble_function(|x| 1.0 / x.max(1e-300).sqrt());
        let mut h_hat = DenseSymMatrix::zeros(block);
        for j in 0..block {
            let col: Vec<f64> = (0..block).map(|i| g_isqrt.get(i, j)).collect();
            let v = g_isqrt.matvec(&ga.matvec(&col));
            for i in 0..=j {
                h_hat.set_sym(j, i, v[i]);
            }
        }
        let h_hat =
            DenseSymMatrix::from_fn_sym(block, |i, j| 0.5 * (h_hat.get(i, j) + h_hat.get(j, i)));
        let h_hat_eig = sym_eig(&h_hat)?;
        let fac = h_hat_eig.assemble_function(|x| 1.0 / x.max(1e-300).sqrt());
        let delta = cfg.delta;
        samp_blocks.push(move |xi: &[f64]| -> Vec<f64> {
            // v = G^{-1/2} Hhat^{-1/2} xi scaled by delta
            let y = fac.matvec(xi);
            g_isqrt.matvec(&y).iter().map(|v| delta * v).collect()
        });
    }
    let cov: LinAction = Box::new(move |x: &[f64]| {
        let mut out = vec![0.0; x.len()];
        for (m, f) in cov_blocks.iter().enumerate() {
            let seg = f(&x[m * block..(m + 1) * block]);
            out[m * block..(m + 1) * block].copy_from_slice(&seg);
        }
        out
    });
    let sqrt: LinAction = Box::new(move |x: &[f64]| {
        let mut out = vec![0.0; x.len()];
        for (m, f) in samp_blocks.iter().enumerate() {
            let seg = f(&x[m * block..(m + 1) * block]);
            out[m * block..(m + 1) * block].copy_from_slice(&seg);
        }
        out
    });
    Ok(PosteriorModel { mean: out.solution, delta: cfg.delta, cov, sqrt, diagnostics })
}

// ── Direct Gaussian posterior ───────────────────────────────────────

/// Noise covariance of the observation equation.
#[derive(Debug, Clone)]
pub enum NoiseCov {
    Identity,
    ScaledIdentity(f64),
    Full(DenseSymMatrix),
}

impl NoiseCov {
    fn inv_sqrt_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            NoiseCov::Identity => Ok(y.to_vec()),
            NoiseCov::ScaledIdentity(s2) => {
                if *s2 <= 0.0 {
                    return Err(Error::NotPositiveDefinite { pivot: 0 });
                }
                let f = 1.0 / s2.sqrt();
                Ok(y.iter().map(|v| f * v).collect())
            }
            NoiseCov::Full(m) => {
                let inv_sqrt = matrix_function(m, |x| 1.0 / x.sqrt())?;
                Ok(inv_sqrt.matvec(y))
            }
        }
    }

    fn sqrt_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            NoiseCov::Identity => Ok(y.to_vec()),
            NoiseCov::ScaledIdentity(s2) => {
                let f = s2.sqrt();
                Ok(y.iter().map(|v| f * v).collect())
            }
            NoiseCov::Full(m) => Ok(matrix_function(m, f64::sqrt)?.matvec(y)),
        }
    }
}

/// Setup of a dense (desk-scale) Gaussian posterior in orthonormal
/// coordinates of the joint space.
pub struct DirectSetup {
    pub forward: DenseMatrix,
    pub prior_cov: DenseSymMatrix,
    pub noise: NoiseCov,
    pub alpha: f64,
    pub delta: f64,
}

/// Posterior mean and covariance of the linear-Gaussian model
/// `y = G x + delta eta`, `eta ~ N(0, Sigma)`, prior `N(0, (delta^2/alpha) C0)`:
///
/// ```text
/// mean = C0^{1/2} (alpha I + H)^{-1} B^T z,   B = Sigma^{-1/2} G C0^{1/2},
/// cov  = delta^2 C0^{1/2} (alpha I + H)^{-1} C0^{1/2},   H = B^T B,
/// ```
///
/// with `z = Sigma^{-1/2} y`, realized by dense spectral assembly.
pub fn posterior_direct(setup: &DirectSetup, data: &[f64]) -> Result<PosteriorModel> {
    let nx = setup.forward.cols;
    let ny = setup.forward.rows;
    if data.len() != ny {
        return Err(Error::DimensionMismatch { expected: ny, got: data.len() });
    }
    if setup.prior_cov.dim() != nx {
        return Err(Error::DimensionMismatch { expected: nx, got: setup.prior_cov.dim() });
    }
    let c0_sqrt = matrix_function(&setup.prior_cov, |x| x.max(0.0).sqrt())?;
    // B = Sigma^{-1/2} G C0^{1/2}
    let mut b = DenseMatrix::zeros(ny, nx);
    for j in 0..nx {
        let col: Vec<f64> = (0..nx).map(|i| c0_sqrt.get(i, j)).collect();
        let gcol = setup.forward.matvec(&col);
        let scol = setup.noise.inv_sqrt_apply(&gcol)?;
        for i in 0..ny {
            b.set(i, j, scol[i]);
        }
    }
    let h = b.gram();
    let mut h_shift = h.clone();
    for i in 0..nx {
        h_shift.add_sym(i, i, setup.alpha);
    }
    let chol = cholesky(&h_shift)?;
    let z = setup.noise.inv_sqrt_apply(data)?;
    let mean = c0_sqrt.matvec(&chol.solve(&b.t_matvec(&z)));

    // dense covariance delta^2 C0^{1/2} (alpha + H)^{-1} C0^{1/2}
    let d2 = setup.delta * setup.delta;
    let mut cov_m = DenseSymMatrix::zeros(nx);
    for j in 0..nx {
        let col: Vec<f64> = (0..nx).map(|i| c0_sqrt.get(i, j)).collect();
        let v = c0_sqrt.matvec(&chol.solve(&col));
        for i in 0..=j {
            cov_m.set_sym(j, i, d2 * 0.5 * (v[i] + v[i]));
        }
    }
    let cov_m = DenseSymMatrix::from_fn_sym(nx, |i, j| 0.5 * (cov_m.get(i, j) + cov_m.get(j, i)));
    let cov_eig = sym_eig(&cov_m)?;
    let floor = -1e-8 * cov_eig.eigenvalues.last().map(|v| v.abs()).unwrap_or(0.0).max(1e-300);
    if let Some(min) = cov_eig.eigenvalues.first() {
        if *min < floor {
            return Err(Error::NotPositiveDefinite { pivot: 0 });
        }
    }
    let sqrt_m = cov_eig.assemble_function(|x| x.max(0.0).sqrt());
    let cov_c = cov_m.clone();
    Ok(PosteriorModel {
        mean,
        delta: setup.delta,
        cov: Box::new(move |x: &[f64]| cov_c.matvec(x)),
        sqrt: Box::new(move |x: &[f64]| sqrt_m.matvec(x)),
        diagnostics: SolveDiagnostics { iterations: 0, residual: 0.0 },
    })
}

// ── Squared posterior contraction ───────────────────────────────────

/// Monte-Carlo decomposition of the squared posterior contraction.
#[derive(Debug, Clone)]
pub struct SpcReport {
    pub n_draws: usize,
    pub bias_sq: f64,
    pub variance: f64,
    pub spread: f64,
    pub spc: f64,
    pub bound: Option<f64>,
}

impl SpcReport {
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "n_draws,bias_sq,variance,spread,spc,bound")?;
        let bound = self.bound.map(|b| b.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.n_draws, self.bias_sq, self.variance, self.spread, self.spc, bound
        )?;
        Ok(())
    }
}

/// Monte Carlo over noise draws at a fixed truth: squared bias, estimation
/// variance, posterior spread (trace of the posterior covariance), and
/// their sum, the squared posterior contraction.
pub fn spc_components(
    truth: &[f64],
    setup: &DirectSetup,
    n_draws: usize,
    seed: u64,
) -> Result<SpcReport> {
    let ny = setup.forward.rows;
    let nx = setup.forward.cols;
    if truth.len() != nx {
        return Err(Error::DimensionMismatch { expected: nx, got: truth.len() });
    }
    let clean = setup.forward.matvec(truth);
    let mut rng = Rng64::new(seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_draws);
    let mut spread = 0.0;
    let mut first: Option<PosteriorModel> = None;
    for _ in 0..n_draws {
        let eta = setup.noise.sqrt_apply(&rng.normal_vec(ny))?;
        let y: Vec<f64> =
            clean.iter().zip(&eta).map(|(c, e)| c + setup.delta * e).collect();
        let post = posterior_direct(setup, &y)?;
        means.push(post.mean.clone());
        if first.is_none() {
            // the covariance does not depend on the data; keep one copy
            let mut tr = 0.0;
            let mut e = vec![0.0; nx];
            for i in 0..nx {
                e[i] = 1.0;
                tr += post.cov_apply(&e)[i];
                e[i] = 0.0;
            }
            spread = tr;
            first = Some(post);
        }
    }
    let nf = n_draws as f64;
    let mut mean_of_means = vec![0.0; nx];
    for m in &means {
        for (a, b) in mean_of_means.iter_mut().zip(m) {
            *a += b / nf;
        }
    }
    let bias_sq: f64 =
        truth.iter().zip(&mean_of_means).map(|(a, b)| (a - b) * (a - b)).sum();
    let variance: f64 = means
        .iter()
        .map(|m| {
            m.iter()
                .zip(&mean_of_means)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / nf;
    let spc = bias_sq + variance + spread;
    Ok(SpcReport { n_draws, bias_sq, variance, spread, spc, bound: None })
}

/// Spectral evaluation of the squared-posterior-contraction bound for the
/// trivial prior `C0 = G*G` (link function `psi(t) = sqrt(t)`, so
/// `f0^2(s) = sqrt(s)`) and source function `phi(t) = t^source_exponent`:
///
/// ```text
/// m_bar^2 max_k s_alpha(h_k) phi(f0^2(h_k)) + delta^2 sum_k f0^2(h_k) / (alpha + h_k)
/// ```
pub fn spc_bound_trivial_prior(
    h_spectrum: &[f64],
    alpha: f64,
    delta: f64,
    source_exponent: f64,
    m_bar: f64,
) -> Result<f64> {
    if let Some(bad) = h_spectrum.iter().find(|h| **h <= 0.0) {
        return Err(Error::NonPositiveEigenvalue { value: *bad });
    }
    let bias = h_spectrum
        .iter()
        .map(|&h| alpha / (alpha + h) * h.sqrt().powf(source_exponent))
        .fold(0.0_f64, f64::max);
    let trace: f64 = h_spectrum.iter().map(|&h| h.sqrt() / (alpha + h)).sum();
    Ok(m_bar * m_bar * bias + delta * delta * trace)
}
