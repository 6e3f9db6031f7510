//! Eigenvalue analysis for the backwards heat problem: the per-mode cubic
//! branches and the time-discretized system whose spectrum clusters at
//! `{1, 3/2, T+1}` and decays to zero in three steps.
//!
//! ```bash
//! cargo run --example spectrum_backwards_heat
//! ```

use aao_bayes::aao_bh::{
    analytic_cubic_roots, cluster_centers, resolved_rate_scale, pencil_block_spectrum,
    BhCubicCoefficients,
};
use aao_bayes::fem::Mesh;

fn main() {
    let t_final = 1.0;

    println!("cubic branches (roots -> 0, 3/2, T+1 as mu -> 0):");
    for mu in [0.5, 0.2, 0.1, 0.05, 0.01] {
        let c = BhCubicCoefficients::new(mu, t_final).unwrap();
        match analytic_cubic_roots(&c) {
            Ok((r1, r2, r3)) => println!("  mu = {mu:<5}: ({r1:.3e}, {r2:.5}, {r3:.5})"),
            Err(e) => println!("  mu = {mu:<5}: {e}"),
        }
    }

    let mesh = Mesh::new(9);
    let scale = resolved_rate_scale();
    println!("\ndiscrete spectrum, dG(0) grids of increasing resolution:");
    for n_steps in [4usize, 8, 16] {
        let vals = pencil_block_spectrum(&mesh, n_steps, t_final, scale).unwrap();
        let centers = cluster_centers(&vals, t_final);
        println!(
            "  N = {n_steps:>2}: cluster centers {:.4} / {:.4} / {:.4}  (targets 1, 1.5, {})",
            centers[0].0,
            centers[1].0,
            centers[2].0,
            t_final + 1.0
        );
    }
}
