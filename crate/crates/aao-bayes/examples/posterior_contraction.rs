//! Squared-posterior-contraction study: Monte Carlo decomposition into
//! squared bias, estimation variance, and posterior spread, next to the
//! spectral upper bound for the trivial prior.
//!
//! ```bash
//! cargo run --example posterior_contraction
//! ```

use aao_bayes::experiments::{run_spc, ExperimentConfig};

fn main() {
    for delta in [0.01, 0.05, 0.1] {
        let config = ExperimentConfig {
            delta,
            modes_per_dim: 3,
            n_draws: 500,
            out_dir: format!("out/example-spc-{delta}").into(),
            ..ExperimentConfig::default()
        };
        let s = run_spc(&config).expect("contraction study failed");
        println!(
            "delta = {delta}: bias^2 {:.3e} + variance {:.3e} + spread {:.3e} = SPC {:.3e}  (bound {:.3e})",
            s.bias_sq, s.variance, s.spread, s.spc, s.bound
        );
    }
}
