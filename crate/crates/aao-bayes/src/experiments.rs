//! Synthetic-data experiment pipelines: spectrum sweeps, fine-to-coarse
//! reconstructions, link-condition checks, and posterior-contraction
//! studies. Every run is driven by one [`ExperimentConfig`], writes its
//! artifacts (CSV, binary PGM) plus exactly one JSON manifest into the
//! output directory, and is bit-reproducible from the seeds recorded there.
//!
//! Synthetic observations are always generated on the fine grid and
//! inverted on the coarse grid; observation files carry a grid tag that the
//! loader checks, so a run can never invert against data produced by its
//! own discretization.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aao_bh::{
    analytic_cubic_roots, cluster_centers, resolved_rate_scale, pencil_block_spectrum,
    BhBlockVector, BhCubicCoefficients, BhOperator, TimeGrid, U0Field,
};
use crate::aao_is::{discrete_spectrum, IsBlockVector, IsBranch, IsOperator};
use crate::error::{Error, Result};
use crate::fem::{
    add_noise, assemble_mass, assemble_stiffness, observation_operator,
    random_observation_points, Mesh, NodalField,
};
use crate::laplacian::{SpectralBasis, SpectralField};
use crate::linalg::{cholesky, conjugate_gradient, gen_sym_eig, sym_eig, DenseMatrix,
    DenseSymMatrix, EigenDecomposition, InnerProduct};
use crate::priors::check_link_condition;
use crate::rng::Rng64;

// ── Configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemChoice {
    InverseSource,
    BackwardsHeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Spectral,
    FiniteElement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthChoice {
    /// Smooth compactly supported bump (the formula is recorded in the
    /// manifest).
    Bump,
    /// Draw from the parameter prior.
    PriorDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorChoice {
    /// `(kappa M + gamma K)^{-1}` blocks.
    Smoothness,
    /// Backwards heat only: covariance `diag(M per step, K^{1/2})`.
    Heuristic,
}

/// One experiment run. Defaults are the reference values: 41^2-node data
/// grid, 31^2-node inversion grid, 100 observation points, 1% noise,
/// `kappa_p = kappa_s = 1e-2`, `gamma_p = gamma_s = 35` for the source
/// problem, `kappa = 1.5`, `gamma = 0.5`, `T = 0.1`, `N = 4` for backwards
/// heat, and `alpha = delta^2` unless set explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub problem: ProblemChoice,
    pub backend: BackendChoice,
    pub fine_n: usize,
    pub coarse_n: usize,
    pub n_obs: usize,
    pub delta: f64,
    pub seed: u64,
    pub kappa_p: f64,
    pub gamma_p: f64,
    pub kappa_s: f64,
    pub gamma_s: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Power of the smoothness-prior precision `(kappa M + gamma K)^n`.
    pub n_power: u32,
    pub alpha: Option<f64>,
    pub t_final: f64,
    pub n_time: usize,
    pub truth: TruthChoice,
    pub prior: PriorChoice,
    pub n_samples: usize,
    pub spectrum_n: usize,
    pub spectrum_count: usize,
    pub spectrum_t_final: f64,
    pub spectrum_time_steps: usize,
    pub modes_per_dim: usize,
    pub n_draws: usize,
    pub source_exponent: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: ProblemChoice::InverseSource,
            backend: BackendChoice::FiniteElement,
            fine_n: 41,
            coarse_n: 31,
            n_obs: 100,
            delta: 0.01,
            seed: 1,
            kappa_p: 1e-2,
            gamma_p: 35.0,
            kappa_s: 1e-2,
            gamma_s: 35.0,
            kappa: 1.5,
            gamma: 0.5,
            n_power: 1,
            alpha: None,
            t_final: 0.1,
            n_time: 4,
            truth: TruthChoice::Bump,
            prior: PriorChoice::Smoothness,
            n_samples: 4,
            spectrum_n: 17,
            spectrum_count: 500,
            spectrum_t_final: 1.0,
            spectrum_time_steps: 4,
            modes_per_dim: 8,
            n_draws: 200,
            source_exponent: 1.0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Load a config from JSON; a run manifest is accepted too, in which
    /// case its embedded config is used (so a manifest replays its run).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let cfg: ExperimentConfig = match value.get("config") {
            Some(inner) => serde_json::from_value(inner.clone())?,
            None => serde_json::from_value(value)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine_n <= self.coarse_n {
            return Err(Error::InvalidConfig(format!(
                "fine grid ({}) must be strictly finer than the coarse grid ({})",
                self.fine_n, self.coarse_n
            )));
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidConfig("delta must be nonnegative".into()));
        }
        if self.t_final <= 0.0 || self.n_time == 0 {
            return Err(Error::InvalidConfig("time grid needs T > 0 and N >= 1".into()));
        }
        Ok(())
    }

    /// Regularization weight; `delta^2` unless overridden (a zero-noise run
    /// falls back to a small positive value so the Hessian stays definite).
    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or_else(|| {
            if self.delta > 0.0 {
                self.delta * self.delta
            } else {
                1e-8
            }
        })
    }
}

// ── Manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub kind: String,
    /// Min/max used for PGM normalization, when applicable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

/// One manifest per run; re-running with the embedded config reproduces
/// every artifact byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<OutputFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_formula: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cg: Option<CgStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

impl RunManifest {
    fn new(command: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            status: "ok".to_string(),
            config: config.clone(),
            outputs: Vec::new(),
            truth_formula: None,
            cg: None,
            summary: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_field(
    manifest: &mut RunManifest,
    dir: &Path,
    name: &str,
    field: &NodalField,
) -> Result<()> {
    let csv_path = dir.join(format!("{name}.csv"));
    let mut buf = Vec::new();
    field.write_csv(&mut buf)?;
    std::fs::write(&csv_path, buf)?;
    manifest.outputs.push(OutputFile {
        path: format!("{name}.csv"),
        kind: "csv".into(),
        normalization: None,
    });
    let pgm_path = dir.join(format!("{name}.pgm"));
    let norm = field.write_pgm(&pgm_path)?;
    manifest.outputs.push(OutputFile {
        path: format!("{name}.pgm"),
        kind: "pgm".into(),
        normalization: Some(norm),
    });
    Ok(())
}

// ── Observation files with grid tags ────────────────────────────────

/// Write observations with the generating grid's tag.
pub fn write_observations(
    path: &Path,
    grid_n: usize,
    points: &[(f64, f64)],
    values: &[f64],
) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# grid_n={grid_n} role=data")?;
    writeln!(buf, "index,x,y,value")?;
    for (i, ((x, y), v)) in points.iter().zip(values).enumerate() {
        writeln!(buf, "{i},{x},{y},{v}")?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load observations, rejecting data produced on the inversion grid.
pub fn load_observations(
    path: &Path,
    inversion_grid_n: usize,
) -> Result<(Vec<(f64, f64)>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let tag = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty observation file".into()))?;
    let grid_n: usize = tag
        .strip_prefix("# grid_n=")
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::InvalidConfig("observation file lacks a grid tag".into()))?;
    if grid_n == inversion_grid_n {
        return Err(Error::InverseCrime { n: grid_n });
    }
    let mut points = Vec::new();
    let mut values = Vec::new();
    for line in lines.skip(1) {
        let mut cells = line.split(',');
        let _idx = cells.next();
        let x: f64 = cells.next().and_then(|c| c.parse().ok()).ok_or_else(|| {
            Error::InvalidConfig("malformed observation row".into())
        })?;
        let y: f64 = cells.next().and_then(|c| c.parse().ok()).ok_or_else(|| {
            Error::InvalidConfig("malformed observation row".into())
        })?;
        let v: f64 = cells.next().and_then(|c| c.parse().ok()).ok_or_else(|| {
            Error::InvalidConfig("malformed observation row".into())
        })?;
        points.push((x, y));
        values.push(v);
    }
    Ok((points, values))
}

// ── Ground truth ────────────────────────────────────────────────────

const BUMP_FORMULA: &str =
    "theta(x,y) = exp(1 - 1/(1 - r^2)) for r = |(x,y)-(0.5,0.5)|/0.45 < 1, else 0";

/// Smooth compactly supported bump centered in the domain.
pub fn bump(x: f64, y: f64) -> f64 {
    let r2 = ((x - 0.5) * (x - 0.5) + (y - 0.5) * (y - 0.5)) / (0.45 * 0.45);
    if r2 < 1.0 {
        (1.0 - 1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

// ── Spectrum runs ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumSummary {
    pub count: usize,
    pub cluster_centers: Vec<(f64, f64, usize)>,
    pub decay_fit_r2: Option<f64>,
    pub cluster_gap: Option<f64>,
}

/// Eigenvalue sweep of the transformed normal operator.
///
/// Source problem: the inverted-pencil eigensystem, labeled by branch, with
/// a linear fit of `sqrt(lambda)` against inverse rank on the decaying
/// branch. Backwards heat: the dG(0)-discretized system in the rate normalization in which the coarse
/// dG(0) grids resolve the branch structure, with cluster centers near `{1, 3/2, T+1}`.
pub fn run_spectrum(config: &ExperimentConfig) -> Result<SpectrumSummary> {
    config.validate()?;
    ensure_dir(&config.out_dir)?;
    let mut manifest = RunManifest::new("spectrum", config);
    let summary = match config.problem {
        ProblemChoice::InverseSource => run_spectrum_is(config, &mut manifest)?,
        ProblemChoice::BackwardsHeat => run_spectrum_bh(config, &mut manifest)?,
    };
    manifest.summary = Some(serde_json::to_value(&summary)?);
    manifest.write(&config.out_dir)?;
    Ok(summary)
}

fn run_spectrum_is(
    config: &ExperimentConfig,
    manifest: &mut RunManifest,
) -> Result<SpectrumSummary> {
    let path = config.out_dir.join("spectrum.csv");
    let mut buf = Vec::new();
    writeln!(buf, "index,eigenvalue,branch,mu_hat")?;

    let (upper, lower): (Vec<f64>, Vec<f64>) = match config.backend {
        BackendChoice::FiniteElement => {
            let mesh = Mesh::new(config.spectrum_n);
            let dim = 2 * mesh.n_interior();
            let count = config.spectrum_count.min(dim);
            let spectrum = discrete_spectrum(&mesh, count)?;
            for (i, e) in spectrum.iter().enumerate() {
                let branch = match e.branch {
                    IsBranch::Upper => "upper",
                    IsBranch::Lower => "lower",
                };
                writeln!(buf, "{i},{},{branch},{}", e.value, e.mu_hat)?;
            }
            (
                spectrum.iter().filter(|e| e.branch == IsBranch::Upper).map(|e| e.value).collect(),
                spectrum.iter().filter(|e| e.branch == IsBranch::Lower).map(|e| e.value).collect(),
            )
        }
        BackendChoice::Spectral => {
            let basis = SpectralBasis::new(config.modes_per_dim);
            let mut labeled = Vec::new();
            for m in 0..basis.len() {
                let mu = basis.eigenvalue(m).powi(-2);
                let (l1, l2) = crate::aao_is::analytic_eigenvalue_pair(mu)?;
                labeled.push((l1, "upper", mu));
                labeled.push((l2, "lower", mu));
            }
            labeled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            labeled.truncate(config.spectrum_count.min(labeled.len()));
            for (i, (v, branch, mu)) in labeled.iter().enumerate() {
                writeln!(buf, "{i},{v},{branch},{mu}")?;
            }
            (
                labeled.iter().filter(|e| e.1 == "upper").map(|e| e.0).collect(),
                labeled.iter().filter(|e| e.1 == "lower").map(|e| e.0).collect(),
            )
        }
    };
    std::fs::write(&path, buf)?;
    manifest.outputs.push(OutputFile {
        path: "spectrum.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });

    let upper_center = upper.iter().sum::<f64>() / upper.len().max(1) as f64;
    let gap = upper.iter().cloned().fold(f64::INFINITY, f64::min)
        - lower.iter().cloned().fold(0.0_f64, f64::max);
    // sqrt(lambda) against 1/rank on the descending lower branch
    let mut sorted_lower = lower.clone();
    sorted_lower.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let xs: Vec<f64> = (1..=sorted_lower.len()).map(|k| 1.0 / k as f64).collect();
    let ys: Vec<f64> = sorted_lower.iter().map(|v| v.max(0.0).sqrt()).collect();
    let r2 = linear_fit_r2(&xs, &ys);
    Ok(SpectrumSummary {
        count: upper.len() + lower.len(),
        cluster_centers: vec![(2.0, upper_center, upper.len())],
        decay_fit_r2: Some(r2),
        cluster_gap: Some(gap),
    })
}

fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    (sxy * sxy) / (sxx * syy)
}

fn run_spectrum_bh(
    config: &ExperimentConfig,
    manifest: &mut RunManifest,
) -> Result<SpectrumSummary> {
    let mesh = Mesh::new(config.spectrum_n);
    let t_final = config.spectrum_t_final;
    let n_steps = config.spectrum_time_steps;
    let scale = resolved_rate_scale();
    let vals = pencil_block_spectrum(&mesh, n_steps, t_final, scale)?;
    let count = config.spectrum_count.min(vals.len());

    // per-mode analytic roots for the matching column
    let k = assemble_stiffness(&mesh)?;
    let m = assemble_mass(&mesh)?;
    let pencil = gen_sym_eig(&k, &m)?;
    let mut root_table: Vec<(f64, f64)> = Vec::new(); // (value, mu)
    for nu in &pencil.eigenvalues {
        let mu = 1.0 / (nu * scale);
        if let Ok(c) = BhCubicCoefficients::new(mu, t_final) {
            if let Ok((r1, r2, r3)) = analytic_cubic_roots(&c) {
                root_table.push((r1, mu));
                root_table.push((r2, mu));
                root_table.push((r3, mu));
            }
        }
    }

    let path = config.out_dir.join("spectrum.csv");
    let mut buf = Vec::new();
    writeln!(buf, "index,eigenvalue,branch,mu_hat")?;
    for (i, v) in vals.iter().take(count).enumerate() {
        let branch = if *v < 0.5 {
            "decay"
        } else if (*v - 1.0).abs() < 0.25 {
            "one"
        } else if (*v - 1.5).abs() < 0.25 {
            "three-halves"
        } else {
            "t-plus-one"
        };
        let mu_hat = root_table
            .iter()
            .min_by(|a, b| (v - a.0).abs().partial_cmp(&(v - b.0).abs()).unwrap())
            .map(|t| t.1)
            .unwrap_or(f64::NAN);
        writeln!(buf, "{i},{v},{branch},{mu_hat}")?;
    }
    std::fs::write(&path, buf)?;
    manifest.outputs.push(OutputFile {
        path: "spectrum.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });

    let centers = cluster_centers(&vals, t_final);
    Ok(SpectrumSummary {
        count,
        cluster_centers: vec![
            (1.0, centers[0].0, centers[0].1),
            (1.5, centers[1].0, centers[1].1),
            (t_final + 1.0, centers[2].0, centers[2].1),
        ],
        decay_fit_r2: None,
        cluster_gap: None,
    })
}

// ── Reconstruction runs ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionSummary {
    pub rel_error_parameter: f64,
    pub rel_error_state: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    /// Regularization weight actually used (`delta^2` when not set).
    pub alpha: f64,
}

/// End-to-end synthetic reconstruction: truth and data on the fine grid,
/// MAP and posterior samples on the coarse grid.
pub fn run_reconstruction(config: &ExperimentConfig) -> Result<ReconstructionSummary> {
    config.validate()?;
    ensure_dir(&config.out_dir)?;
    let mut manifest = RunManifest::new("reconstruct", config);
    let result = match config.problem {
        ProblemChoice::InverseSource => run_reconstruction_is(config, &mut manifest),
        ProblemChoice::BackwardsHeat => run_reconstruction_bh(config, &mut manifest),
    };
    match result {
        Ok(summary) => {
            manifest.cg = Some(CgStats {
                iterations: summary.cg_iterations,
                residual: summary.cg_residual,
            });
            manifest.summary = Some(serde_json::to_value(&summary)?);
            manifest.write(&config.out_dir)?;
            Ok(summary)
        }
        Err(err) => {
            // a failed run still leaves a manifest behind
            manifest.status = format!("failed: {err}");
            manifest.write(&config.out_dir)?;
            Err(err)
        }
    }
}

fn rel_error_m(est: &[f64], truth: &[f64], mass: &DenseSymMatrix) -> f64 {
    let diff: Vec<f64> = est.iter().zip(truth).map(|(a, b)| a - b).collect();
    let md = mass.matvec(&diff);
    let num: f64 = diff.iter().zip(&md).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    let mt = mass.matvec(truth);
    let den: f64 = truth.iter().zip(&mt).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    (num / den).sqrt()
}

fn run_reconstruction_is(
    config: &ExperimentConfig,
    manifest: &mut RunManifest,
) -> Result<ReconstructionSummary> {
    let alpha = config.alpha_value();
    let dir = &config.out_dir;

    // stage one: truth and synthetic data on the fine grid
    let fine = Mesh::new(config.fine_n);
    let k_f = assemble_stiffness(&fine)?;
    let m_f = assemble_mass(&fine)?;
    let chol_kf = cholesky(&k_f)?;
    let theta_true = match config.truth {
        TruthChoice::Bump => NodalField::from_fn(&fine, bump),
        TruthChoice::PriorDraw => {
            let prior = crate::priors::smoothness_prior_fe(
                &fine,
                config.kappa_p,
                config.gamma_p,
                config.n_power,
            )?;
            let draw = crate::priors::sample_prior(&prior, config.seed ^ 0x5eed, 1)?;
            NodalField::from_values(&fine, draw.into_iter().next().unwrap())?
        }
    };
    if config.truth == TruthChoice::Bump {
        manifest.truth_formula = Some(BUMP_FORMULA.to_string());
    }
    let state_true =
        NodalField::from_values(&fine, chol_kf.solve(&m_f.matvec(&theta_true.values)))?;

    let points = random_observation_points(&fine, config.n_obs, config.seed);
    let obs_f = observation_operator(&fine, &points)?;
    let clean = obs_f.apply(&state_true);
    let noisy = add_noise(&clean, config.delta, config.seed.wrapping_add(1));
    let obs_path = dir.join("observations.csv");
    write_observations(&obs_path, config.fine_n, &points, &noisy)?;
    manifest.outputs.push(OutputFile {
        path: "observations.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });
    write_field(manifest, dir, "truth_parameter", &theta_true)?;
    write_field(manifest, dir, "truth_state", &state_true)?;

    // stage two: inversion on the coarse grid, loaded through the tagged file
    let coarse = Mesh::new(config.coarse_n);
    let (points_l, data) = load_observations(&obs_path, config.coarse_n)?;
    let obs_c = observation_operator(&coarse, &points_l)?;
    let k_c = assemble_stiffness(&coarse)?;
    let m_c = assemble_mass(&coarse)?;
    let chol_kc = cholesky(&k_c)?;
    let mut prec_p = m_c.scaled(config.kappa_p);
    prec_p.add_scaled(&k_c, config.gamma_p);
    let mut prec_s = m_c.scaled(config.kappa_s);
    prec_s.add_scaled(&k_c, config.gamma_s);
    let n_power = config.n_power.max(1);
    let apply_power = |mat: &DenseSymMatrix, v: &[f64]| -> Vec<f64> {
        let mut out = mat.matvec(v);
        for _ in 1..n_power {
            out = mat.matvec(&out);
        }
        out
    };

    // H theta = M K^{-1} [B^T B + alpha P_s^n] K^{-1} M theta + alpha P_p^n theta
    let h_action = |theta: &[f64]| -> Vec<f64> {
        let z = chol_kc.solve(&m_c.matvec(theta));
        let zf = NodalField { mesh: Arc::clone(&coarse), values: z.clone() };
        let bz = obs_c.apply(&zf);
        let mut w = obs_c.apply_transpose(&coarse, &bz).values;
        let pz = apply_power(&prec_s, &z);
        for (wi, pi) in w.iter_mut().zip(&pz) {
            *wi += alpha * pi;
        }
        let mut out = m_c.matvec(&chol_kc.solve(&w));
        let pp = apply_power(&prec_p, theta);
        for (o, p) in out.iter_mut().zip(&pp) {
            *o += alpha * p;
        }
        out
    };
    let rhs = m_c.matvec(&chol_kc.solve(&obs_c.apply_transpose(&coarse, &data).values));
    let cg = conjugate_gradient(h_action, &rhs, &InnerProduct::euclidean(), 1e-8, 500)?;
    let theta_map = NodalField::from_values(&coarse, cg.solution.clone())?;
    let state_map =
        NodalField::from_values(&coarse, chol_kc.solve(&m_c.matvec(&theta_map.values)))?;
    write_field(manifest, dir, "map_parameter", &theta_map)?;
    write_field(manifest, dir, "map_state", &state_map)?;

    // posterior samples from the dense Hessian
    if config.n_samples > 0 {
        let d = m_c.dim();
        let mut h_dense_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            h_dense_cols.push(h_action(&e));
            e[j] = 0.0;
        }
        let h_dense =
            DenseSymMatrix::from_fn_sym(d, |i, j| 0.5 * (h_dense_cols[j][i] + h_dense_cols[i][j]));
        let eig = sym_eig(&h_dense)?;
        let mut rng = Rng64::new(config.seed.wrapping_add(2));
        for s in 0..config.n_samples {
            let xi = rng.normal_vec(d);
            let fl = eig.apply_function(&xi, |lam| 1.0 / lam.max(1e-300).sqrt());
            let vals: Vec<f64> = theta_map
                .values
                .iter()
                .zip(&fl)
                .map(|(m, f)| m + config.delta * f)
                .collect();
            let sample = NodalField::from_values(&coarse, vals)?;
            write_field(manifest, dir, &format!("sample_parameter_{s}"), &sample)?;
        }
    }

    // errors against the restricted truth
    let theta_ref = crate::fem::restrict_to_coarse(&theta_true, &coarse);
    let state_ref = crate::fem::restrict_to_coarse(&state_true, &coarse);
    let rel_theta = rel_error_m(&theta_map.values, &theta_ref.values, &m_c);
    let rel_state = rel_error_m(&state_map.values, &state_ref.values, &m_c);
    let mut buf = Vec::new();
    writeln!(buf, "field,rel_l2_error")?;
    writeln!(buf, "parameter,{rel_theta}")?;
    writeln!(buf, "state,{rel_state}")?;
    std::fs::write(dir.join("errors.csv"), buf)?;
    manifest.outputs.push(OutputFile {
        path: "errors.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });

    Ok(ReconstructionSummary {
        rel_error_parameter: rel_theta,
        rel_error_state: rel_state,
        cg_iterations: cg.iterations,
        cg_residual: cg.residual,
        alpha,
    })
}

/// Exact discrete heat propagator on the pencil eigenbasis:
/// `u(t) = X e^{-t Lambda} X^T M u(0)`.
struct PencilSemigroup {
    pencil: EigenDecomposition,
    mass: DenseSymMatrix,
}

impl PencilSemigroup {
    fn new(mesh: &Arc<Mesh>) -> Result<Self> {
        let k = assemble_stiffness(mesh)?;
        let m = assemble_mass(mesh)?;
        let pencil = gen_sym_eig(&k, &m)?;
        Ok(PencilSemigroup { pencil, mass: m })
    }

    fn dim(&self) -> usize {
        self.mass.dim()
    }

    /// Coefficients of `v` in the M-orthonormal eigenbasis.
    fn to_modes(&self, v: &[f64]) -> Vec<f64> {
        let mv = self.mass.matvec(v);
        (0..self.dim())
            .map(|k| self.pencil.vector(k).iter().zip(&mv).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn from_modes(&self, c: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        for (k, ck) in c.iter().enumerate() {
            if *ck == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(self.pencil.vector(k)) {
                *o += ck * x;
            }
        }
        out
    }

    fn evolve(&self, v: &[f64], t: f64) -> Vec<f64> {
        let mut c = self.to_modes(v);
        for (ck, nu) in c.iter_mut().zip(&self.pencil.eigenvalues) {
            *ck *= (-nu * t).exp();
        }
        self.from_modes(&c)
    }

    /// Prior draw with covariance `(kappa M + gamma K)^{-1}`.
    fn prior_draw(&self, kappa: f64, gamma: f64, rng: &mut Rng64) -> Vec<f64> {
        let xi = rng.normal_vec(self.dim());
        let c: Vec<f64> = xi
            .iter()
            .zip(&self.pencil.eigenvalues)
            .map(|(x, nu)| x / (kappa + gamma * nu).sqrt())
            .collect();
        self.from_modes(&c)
    }
}

fn run_reconstruction_bh(
    config: &ExperimentConfig,
    manifest: &mut RunManifest,
) -> Result<ReconstructionSummary> {
    let alpha = config.alpha_value();
    let dir = &config.out_dir;
    let grid = TimeGrid::new(config.n_time, config.t_final);

    // stage one: truth and data on the fine grid
    let fine = Mesh::new(config.fine_n);
    let sg_f = PencilSemigroup::new(&fine)?;
    let mut rng_truth = Rng64::new(config.seed ^ 0x7a11);
    let theta_true_vals = match config.truth {
        TruthChoice::PriorDraw => sg_f.prior_draw(config.kappa, config.gamma, &mut rng_truth),
        TruthChoice::Bump => {
            NodalField::from_fn(&fine, bump).values
        }
    };
    if config.truth == TruthChoice::Bump {
        manifest.truth_formula = Some(BUMP_FORMULA.to_string());
    }
    let theta_true = NodalField::from_values(&fine, theta_true_vals)?;
    let state_final = NodalField::from_values(
        &fine,
        sg_f.evolve(&theta_true.values, config.t_final),
    )?;

    let points = random_observation_points(&fine, config.n_obs, config.seed);
    let obs_f = observation_operator(&fine, &points)?;
    let clean = obs_f.apply(&state_final);
    let noisy = add_noise(&clean, config.delta, config.seed.wrapping_add(1));
    let obs_path = dir.join("observations.csv");
    write_observations(&obs_path, config.fine_n, &points, &noisy)?;
    manifest.outputs.push(OutputFile {
        path: "observations.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });
    write_field(manifest, dir, "truth_parameter", &theta_true)?;
    // per-slice truth states with a time manifest entry
    for i in 0..grid.n_slices() {
        let s = NodalField::from_values(&fine, sg_f.evolve(&theta_true.values, grid.node(i)))?;
        write_field(manifest, dir, &format!("truth_state_t{i}"), &s)?;
    }

    // stage two: coarse inversion
    let coarse = Mesh::new(config.coarse_n);
    let (points_l, data) = load_observations(&obs_path, config.coarse_n)?;
    let obs_c = observation_operator(&coarse, &points_l)?;
    let sg_c = PencilSemigroup::new(&coarse)?;
    let m_c = sg_c.mass.clone();
    let k_c = assemble_stiffness(&coarse)?;
    let d = m_c.dim();

    // penalty operators per prior choice
    let n_slices = grid.n_slices();
    enum BhPenalty {
        // smoothness prior: the exact-semigroup state prior collapses each
        // slice penalty onto the parameter precision
        Smoothness { prec: DenseSymMatrix, copies: f64 },
        Heuristic { state_sum: DenseSymMatrix, param: DenseSymMatrix },
    }
    let penalty = match config.prior {
        PriorChoice::Smoothness => {
            let mut prec = m_c.scaled(config.kappa);
            prec.add_scaled(&k_c, config.gamma);
            BhPenalty::Smoothness { prec, copies: 1.0 + n_slices as f64 }
        }
        PriorChoice::Heuristic => {
            // state penalty sum_i E_i^T M^{-1} E_i = M X S X^T M with
            // S_ab = (X^T X)_ab sum_i e^{-(nu_a + nu_b) t_i}
            let x_gram = {
                let mut g = DenseSymMatrix::zeros(d);
                for a in 0..d {
                    for b in 0..=a {
                        let v: f64 = sg_c
                            .pencil
                            .vector(a)
                            .iter()
                            .zip(sg_c.pencil.vector(b))
                            .map(|(p, q)| p * q)
                            .sum();
                        g.set_sym(a, b, v);
                    }
                }
                g
            };
            let mut s = DenseSymMatrix::zeros(d);
            for a in 0..d {
                for b in 0..=a {
                    let mut acc = 0.0;
                    for i in 0..n_slices {
                        let t = grid.node(i);
                        acc += (-(sg_c.pencil.eigenvalues[a] + sg_c.pencil.eigenvalues[b]) * t)
                            .exp();
                    }
                    s.set_sym(a, b, x_gram.get(a, b) * acc);
                }
            }
            // sandwich M X S X^T M
            let mut xs = DenseMatrix::zeros(d, d);
            for j in 0..d {
                let col: Vec<f64> = (0..d).map(|i| s.get(i, j)).collect();
                let v = sg_c.from_modes(&col);
                for i in 0..d {
                    xs.set(i, j, v[i]);
                }
            }
            let mut state_sum_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
            for j in 0..d {
                let row: Vec<f64> = (0..d).map(|i| xs.get(j, i)).collect();
                let v = sg_c.from_modes(&row);
                state_sum_cols.push(m_c.matvec(&v));
            }
            let state_sum = DenseSymMatrix::from_fn_sym(d, |i, j| {
                0.5 * (state_sum_cols[j][i] + state_sum_cols[i][j])
            });
            // (K^{1/2})^{-1} = X diag(nu^{-1/2}) X^T
            let mut param_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
            for j in 0..d {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                let mut c: Vec<f64> = (0..d)
                    .map(|k| {
                        sg_c.pencil.vector(k).iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                for (ck, nu) in c.iter_mut().zip(&sg_c.pencil.eigenvalues) {
                    *ck /= nu.sqrt();
                }
                param_cols.push(sg_c.from_modes(&c));
            }
            let param = DenseSymMatrix::from_fn_sym(d, |i, j| {
                0.5 * (param_cols[j][i] + param_cols[i][j])
            });
            BhPenalty::Heuristic { state_sum, param }
        }
    };

    // E(T)^T with the Euclidean transpose: E(T)^T = M X e^{-T Lambda} X^T
    let e_t_transpose = |v: &[f64]| -> Vec<f64> {
        let mut c: Vec<f64> = (0..d)
            .map(|k| sg_c.pencil.vector(k).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        for (ck, nu) in c.iter_mut().zip(&sg_c.pencil.eigenvalues) {
            *ck *= (-nu * config.t_final).exp();
        }
        m_c.matvec(&sg_c.from_modes(&c))
    };
    let h_action = |theta: &[f64]| -> Vec<f64> {
        let ut = sg_c.evolve(theta, config.t_final);
        let utf = NodalField { mesh: Arc::clone(&coarse), values: ut };
        let b = obs_c.apply(&utf);
        let bt = obs_c.apply_transpose(&coarse, &b).values;
        let mut out = e_t_transpose(&bt);
        match &penalty {
            BhPenalty::Smoothness { prec, copies } => {
                let p = prec.matvec(theta);
                for (o, pi) in out.iter_mut().zip(&p) {
                    *o += alpha * copies * pi;
                }
            }
            BhPenalty::Heuristic { state_sum, param } => {
                let p1 = state_sum.matvec(theta);
                let p2 = param.matvec(theta);
                for ((o, a), b) in out.iter_mut().zip(&p1).zip(&p2) {
                    *o += alpha * (a + b);
                }
            }
        }
        out
    };

    let rhs = e_t_transpose(&obs_c.apply_transpose(&coarse, &data).values);
    let cg = conjugate_gradient(&h_action, &rhs, &InnerProduct::euclidean(), 1e-8, 500)?;
    let theta_map = NodalField::from_values(&coarse, cg.solution.clone())?;
    write_field(manifest, dir, "map_parameter", &theta_map)?;
    for i in 0..n_slices {
        let s = NodalField::from_values(&coarse, sg_c.evolve(&theta_map.values, grid.node(i)))?;
        write_field(manifest, dir, &format!("map_state_t{i}"), &s)?;
    }
    // time-grid sidecar for the slice files
    let mut buf = Vec::new();
    writeln!(buf, "tau,n_steps,t_final")?;
    writeln!(buf, "{},{},{}", grid.tau(), grid.n_steps, grid.t_final)?;
    std::fs::write(dir.join("time_grid.csv"), buf)?;
    manifest.outputs.push(OutputFile {
        path: "time_grid.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });

    // posterior samples from the dense Hessian
    if config.n_samples > 0 {
        let mut h_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            h_cols.push(h_action(&e));
            e[j] = 0.0;
        }
        let h_dense =
            DenseSymMatrix::from_fn_sym(d, |i, j| 0.5 * (h_cols[j][i] + h_cols[i][j]));
        let eig = sym_eig(&h_dense)?;
        let mut rng = Rng64::new(config.seed.wrapping_add(2));
        for s in 0..config.n_samples {
            let xi = rng.normal_vec(d);
            let fl = eig.apply_function(&xi, |lam| 1.0 / lam.max(1e-300).sqrt());
            let vals: Vec<f64> = theta_map
                .values
                .iter()
                .zip(&fl)
                .map(|(m, f)| m + config.delta * f)
                .collect();
            let sample = NodalField::from_values(&coarse, vals)?;
            write_field(manifest, dir, &format!("sample_parameter_{s}"), &sample)?;
        }
    }

    let theta_ref = crate::fem::restrict_to_coarse(&theta_true, &coarse);
    let state_ref = crate::fem::restrict_to_coarse(&state_final, &coarse);
    let state_map_final =
        NodalField::from_values(&coarse, sg_c.evolve(&theta_map.values, config.t_final))?;
    let rel_theta = rel_error_m(&theta_map.values, &theta_ref.values, &m_c);
    let rel_state = rel_error_m(&state_map_final.values, &state_ref.values, &m_c);
    let mut buf = Vec::new();
    writeln!(buf, "field,rel_l2_error")?;
    writeln!(buf, "parameter,{rel_theta}")?;
    writeln!(buf, "state,{rel_state}")?;
    std::fs::write(dir.join("errors.csv"), buf)?;
    manifest.outputs.push(OutputFile {
        path: "errors.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });

    Ok(ReconstructionSummary {
        rel_error_parameter: rel_theta,
        rel_error_state: rel_state,
        cg_iterations: cg.iterations,
        cg_residual: cg.residual,
        alpha,
    })
}

// ── Link-condition runs ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LinkSummary {
    pub reports: Vec<(String, f64, f64, bool)>,
}

/// Empirical link-condition ratios for the named prior choices: the
/// trivial choice (always tight) and the problem's block-diagonal
/// candidates.
pub fn run_link_check(config: &ExperimentConfig) -> Result<LinkSummary> {
    config.validate()?;
    ensure_dir(&config.out_dir)?;
    let mut manifest = RunManifest::new("link-check", config);
    let mut reports = Vec::new();

    match config.problem {
        ProblemChoice::InverseSource => {
            let basis = SpectralBasis::new(config.modes_per_dim.max(50));
            let op = IsOperator::new(&basis);
            let op2 = op.clone();
            let seed = config.seed;
            let trivial = check_link_condition(
                |x: &IsBlockVector| op.apply(x).norm(),
                |x: &IsBlockVector| {
                    let gx = op2.apply(x);
                    op2.apply_adjoint(&gx).inner(x).max(0.0).sqrt()
                },
                |i| {
                    let mut rng = Rng64::new(seed.wrapping_add(i));
                    IsBlockVector::new(
                        SpectralField::random(&basis, &mut rng),
                        SpectralField::random(&basis, &mut rng),
                    )
                },
                |k| {
                    IsBlockVector::new(
                        SpectralField::unit_mode(&basis, k % basis.len()),
                        SpectralField::zeros(&basis),
                    )
                },
                100,
                50,
            );
            reports.push(("trivial".to_string(), trivial));

            let op3 = IsOperator::new(&basis);
            let diag_mode = |j: usize| {
                (0..basis.len())
                    .find(|&i| basis.mode(i) == (j + 1, j + 1))
                    .unwrap_or(basis.len() - 1)
            };
            let inv_diag = check_link_condition(
                |x: &IsBlockVector| op3.apply(x).norm(),
                |x: &IsBlockVector| {
                    let u = x.u.apply_power(-1.0);
                    let t = x.theta.apply_power(-1.0);
                    (u.inner_u(&u) + t.inner_l2(&t)).max(0.0).sqrt()
                },
                |i| {
                    let mut rng = Rng64::new(seed.wrapping_add(1000 + i));
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
            reports.push(("inverse-laplacian-diagonal".to_string(), inv_diag));
        }
        ProblemChoice::BackwardsHeat => {
            let basis = SpectralBasis::new(config.modes_per_dim);
            let grid = TimeGrid::new(config.n_time, config.t_final);
            let op = BhOperator::new(&basis, grid);
            let op2 = BhOperator::new(&basis, grid);
            let seed = config.seed;
            let trivial = check_link_condition(
                |x: &BhBlockVector| op.apply(x).norm(),
                |x: &BhBlockVector| {
                    let gx = op2.apply(x);
                    op2.apply_adjoint(&gx).inner(x).max(0.0).sqrt()
                },
                |i| {
                    let mut rng = Rng64::new(seed.wrapping_add(i));
                    BhBlockVector {
                        u: U0Field::random(&basis, grid, &mut rng),
                        theta: SpectralField::random(&basis, &mut rng),
                    }
                },
                |k| BhBlockVector {
                    u: U0Field::zeros(&basis, grid),
                    theta: SpectralField::unit_mode(&basis, k % basis.len()),
                },
                100,
                50,
            );
            reports.push(("trivial".to_string(), trivial));

            let op3 = BhOperator::new(&basis, grid);
            let smoothing = check_link_condition(
                |x: &BhBlockVector| op3.apply(x).norm(),
                |x: &BhBlockVector| {
                    let mut b_sq = 0.0;
                    let slices = x.u.sample_slices();
                    for (k, s) in slices.iter().enumerate() {
                        let w = grid.weight(k);
                        for m in 0..basis.len() {
                            let lam = basis.eigenvalue(m);
                            let v = (-lam * grid.t_final).exp() * s.coeffs[m];
                            b_sq += w * v * v;
                        }
                    }
                    let dpart = x.theta.map_coeffs(|c, lam| {
                        lam.powf(-0.5) * (-lam * grid.t_final).exp() * c
                    });
                    (b_sq + dpart.inner_h01(&dpart)).max(0.0).sqrt()
                },
                |i| {
                    let mut rng = Rng64::new(seed.wrapping_add(2000 + i));
                    BhBlockVector {
                        u: U0Field::random(&basis, grid, &mut rng),
                        theta: SpectralField::random(&basis, &mut rng),
                    }
                },
                |k| BhBlockVector {
                    u: U0Field::zeros(&basis, grid),
                    theta: SpectralField::unit_mode(&basis, k % basis.len()),
                },
                100,
                50,
            );
            reports.push(("semigroup-smoothing".to_string(), smoothing));
        }
    }

    let mut summary = Vec::new();
    for (name, report) in &reports {
        let path = config.out_dir.join(format!("link_{name}.csv"));
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        std::fs::write(&path, buf)?;
        manifest.outputs.push(OutputFile {
            path: format!("link_{name}.csv"),
            kind: "csv".into(),
            normalization: None,
        });
        summary.push((
            name.clone(),
            report.min_ratio,
            report.max_ratio,
            report.upper_divergence,
        ));
    }
    let out = LinkSummary { reports: summary };
    manifest.summary = Some(serde_json::to_value(&out)?);
    manifest.write(&config.out_dir)?;
    Ok(out)
}

// ── SPC runs ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SpcSummary {
    pub bias_sq: f64,
    pub variance: f64,
    pub spread: f64,
    pub spc: f64,
    pub bound: f64,
}

/// Squared-posterior-contraction study on a small spectral instance of the
/// source problem with the trivial prior `C0 = F*F`.
pub fn run_spc(config: &ExperimentConfig) -> Result<SpcSummary> {
    config.validate()?;
    ensure_dir(&config.out_dir)?;
    let mut manifest = RunManifest::new("spc", config);

    let basis = SpectralBasis::new(config.modes_per_dim.min(4));
    let n = basis.len();
    let mut forward = DenseMatrix::zeros(n, n);
    for m in 0..n {
        forward.set(m, m, 1.0 / basis.eigenvalue(m));
    }
    // trivial prior: C0 = F^T F
    let prior_cov = forward.gram();
    let alpha = config.alpha_value();
    let setup = crate::bayes::DirectSetup {
        forward,
        prior_cov: prior_cov.clone(),
        noise: crate::bayes::NoiseCov::Identity,
        alpha,
        delta: config.delta,
    };
    // truth in the source set: x* = phi(C0) v with a unit-ball element v
    let mut rng = Rng64::new(config.seed);
    let mut v = rng.normal_vec(n);
    let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for vi in v.iter_mut() {
        *vi /= norm;
    }
    let c0_eig = sym_eig(&prior_cov)?;
    let truth = c0_eig.apply_function(&v, |s| s.max(0.0).powf(config.source_exponent));

    let mut report = crate::bayes::spc_components(&truth, &setup, config.n_draws, config.seed)?;
    // H = B^T B for the trivial prior; its spectrum drives the bound
    let h = {
        let mut b = DenseMatrix::zeros(n, n);
        let c0_sqrt = crate::linalg::matrix_function(&prior_cov, |x| x.max(0.0).sqrt())?;
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| c0_sqrt.get(i, j)).collect();
            let gcol = setup.forward.matvec(&col);
            for i in 0..n {
                b.set(i, j, gcol[i]);
            }
        }
        b.gram()
    };
    let spectrum = sym_eig(&h)?.eigenvalues;
    let bound = crate::bayes::spc_bound_trivial_prior(
        &spectrum,
        alpha,
        config.delta,
        config.source_exponent,
        1.0,
    )?;
    report.bound = Some(bound);

    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    std::fs::write(config.out_dir.join("spc.csv"), buf)?;
    manifest.outputs.push(OutputFile {
        path: "spc.csv".into(),
        kind: "csv".into(),
        normalization: None,
    });
    let summary = SpcSummary {
        bias_sq: report.bias_sq,
        variance: report.variance,
        spread: report.spread,
        spc: report.spc,
        bound,
    };
    manifest.summary = Some(serde_json::to_value(&summary)?);
    manifest.write(&config.out_dir)?;
    Ok(summary)
}
