//! Thin experiment driver over the library pipelines.
//!
//! Four subcommands mirror the experiment kinds: `spectrum`, `reconstruct`,
//! `link-check`, and `spc`. Each reads an optional JSON config and applies
//! per-field flag overrides; every run writes its artifacts plus one
//! manifest into the output directory. Failures exit nonzero with a
//! machine-readable JSON error on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aao_bayes::experiments::{
    run_link_check, run_reconstruction, run_spc, run_spectrum, BackendChoice, ExperimentConfig,
    PriorChoice, ProblemChoice, TruthChoice,
};

#[derive(Parser)]
#[command(name = "aao", about = "All-at-once Bayesian inversion experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalue sweep of the transformed normal operator.
    Spectrum(CommonArgs),
    /// Fine-grid data generation plus coarse-grid MAP and samples.
    Reconstruct(CommonArgs),
    /// Empirical link-condition ratios for the named prior choices.
    LinkCheck(CommonArgs),
    /// Squared-posterior-contraction study on a small instance.
    Spc(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config; flags below override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, value_enum)]
    problem: Option<CliProblem>,
    #[arg(long, value_enum)]
    backend: Option<CliBackend>,
    /// Nodes per side of the data-generation grid.
    #[arg(long)]
    fine_n: Option<usize>,
    /// Nodes per side of the inversion grid.
    #[arg(long)]
    coarse_n: Option<usize>,
    /// Number of observation points.
    #[arg(long)]
    n_obs: Option<usize>,
    /// Noise level.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kappa_p: Option<f64>,
    #[arg(long)]
    gamma_p: Option<f64>,
    #[arg(long)]
    kappa_s: Option<f64>,
    #[arg(long)]
    gamma_s: Option<f64>,
    /// Backwards-heat prior coefficient on the mass matrix.
    #[arg(long)]
    kappa: Option<f64>,
    /// Backwards-heat prior coefficient on the stiffness matrix.
    #[arg(long)]
    gamma: Option<f64>,
    /// Smoothness-prior precision power.
    #[arg(long)]
    n_power: Option<u32>,
    /// Regularization weight (defaults to delta^2).
    #[arg(long)]
    alpha: Option<f64>,
    /// Final time of the heat problem.
    #[arg(long)]
    t_final: Option<f64>,
    /// Number of time steps.
    #[arg(long)]
    n_time: Option<usize>,
    #[arg(long, value_enum)]
    truth: Option<CliTruth>,
    #[arg(long, value_enum)]
    prior: Option<CliPrior>,
    /// Posterior samples to write.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Mesh nodes per side for spectrum runs.
    #[arg(long)]
    spectrum_n: Option<usize>,
    /// Number of eigenvalues to report.
    #[arg(long)]
    spectrum_count: Option<usize>,
    /// Final time for spectrum runs.
    #[arg(long)]
    spectrum_t_final: Option<f64>,
    /// Time steps for spectrum runs.
    #[arg(long)]
    spectrum_time_steps: Option<usize>,
    /// Spectral basis size for link checks and contraction studies.
    #[arg(long)]
    modes_per_dim: Option<usize>,
    /// Monte Carlo draws for contraction studies.
    #[arg(long)]
    n_draws: Option<usize>,
    /// Source-condition exponent.
    #[arg(long)]
    source_exponent: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliProblem {
    InverseSource,
    BackwardsHeat,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliBackend {
    Spectral,
    FiniteElement,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliTruth {
    Bump,
    PriorDraw,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliPrior {
    Smoothness,
    Heuristic,
}

impl CommonArgs {
    fn build_config(&self) -> aao_bayes::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.problem {
            cfg.problem = match p {
                CliProblem::InverseSource => ProblemChoice::InverseSource,
                CliProblem::BackwardsHeat => ProblemChoice::BackwardsHeat,
            };
        }
        if let Some(b) = self.backend {
            cfg.backend = match b {
                CliBackend::Spectral => BackendChoice::Spectral,
                CliBackend::FiniteElement => BackendChoice::FiniteElement,
            };
        }
        if let Some(t) = self.truth {
            cfg.truth = match t {
                CliTruth::Bump => TruthChoice::Bump,
                CliTruth::PriorDraw => TruthChoice::PriorDraw,
            };
        }
        if let Some(p) = self.prior {
            cfg.prior = match p {
                CliPrior::Smoothness => PriorChoice::Smoothness,
                CliPrior::Heuristic => PriorChoice::Heuristic,
            };
        }
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        take!(fine_n);
        take!(coarse_n);
        take!(n_obs);
        take!(delta);
        take!(seed);
        take!(kappa_p);
        take!(gamma_p);
        take!(kappa_s);
        take!(gamma_s);
        take!(kappa);
        take!(gamma);
        take!(n_power);
        take!(t_final);
        take!(n_time);
        take!(n_samples);
        take!(spectrum_n);
        take!(spectrum_count);
        take!(spectrum_t_final);
        take!(spectrum_time_steps);
        take!(modes_per_dim);
        take!(n_draws);
        take!(source_exponent);
        take!(out_dir);
        if self.alpha.is_some() {
            cfg.alpha = self.alpha;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> aao_bayes::Result<String> {
    match cli.command {
        Command::Spectrum(args) => {
            let cfg = args.build_config()?;
            let summary = run_spectrum(&cfg)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::Reconstruct(args) => {
            let cfg = args.build_config()?;
            let summary = run_reconstruction(&cfg)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::LinkCheck(args) => {
            let cfg = args.build_config()?;
            let summary = run_link_check(&cfg)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::Spc(args) => {
            let cfg = args.build_config()?;
            let summary = run_spc(&cfg)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let payload = serde_json::json!({ "error": err.to_string() });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
