//! Empirical link-condition diagnostics: the trivial prior choice makes
//! the ratio `||G x|| / ||psi(C0) x||` identically one, while the
//! inverse-Laplacian block prior satisfies only the lower bound - the
//! upper ratio diverges along the mode sweep and the report flags it.
//!
//! ```bash
//! cargo run --example link_conditions
//! ```

use aao_bayes::experiments::{run_link_check, ExperimentConfig, ProblemChoice};

fn main() {
    for problem in [ProblemChoice::InverseSource, ProblemChoice::BackwardsHeat] {
        let config = ExperimentConfig {
            problem,
            out_dir: format!("out/example-link-{problem:?}").to_lowercase().into(),
            ..ExperimentConfig::default()
        };
        let summary = run_link_check(&config).expect("link check failed");
        println!("{problem:?}:");
        for (name, min, max, diverges) in &summary.reports {
            println!(
                "  {name:<28} min ratio {min:>10.4}  max ratio {max:>12.4}  upper divergence: {diverges}"
            );
        }
    }
}
