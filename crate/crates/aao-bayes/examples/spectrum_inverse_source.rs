//! Eigenvalue analysis of the transformed normal operator for the inverse
//! source problem: the two analytic branches and their finite-element
//! counterpart from the inverted matrix pencil.
//!
//! ```bash
//! cargo run --example spectrum_inverse_source
//! ```

use aao_bayes::aao_is::{analytic_eigenvalue_pair, discrete_spectrum, IsBranch};
use aao_bayes::fem::Mesh;
use aao_bayes::laplacian::SpectralBasis;

fn main() {
    // analytic branches over the first few Laplacian modes
    let basis = SpectralBasis::new(4);
    println!("analytic branches (lambda_1 -> 2, lambda_2 -> 0):");
    for m in 0..6 {
        let mu = basis.eigenvalue(m).powi(-2);
        let (l1, l2) = analytic_eigenvalue_pair(mu).unwrap();
        println!("  mode {m}: mu = {mu:.3e}  ->  ({l1:.6}, {l2:.3e})");
    }

    // finite-element pencil spectrum on a 17x17-node mesh
    let mesh = Mesh::new(17);
    let count = 2 * mesh.n_interior();
    let spectrum = discrete_spectrum(&mesh, count).unwrap();
    let upper: Vec<f64> =
        spectrum.iter().filter(|e| e.branch == IsBranch::Upper).map(|e| e.value).collect();
    let lower: Vec<f64> =
        spectrum.iter().filter(|e| e.branch == IsBranch::Lower).map(|e| e.value).collect();
    let upper_mean = upper.iter().sum::<f64>() / upper.len() as f64;
    println!("\nfinite elements ({count} eigenvalues):");
    println!("  upper branch: {} values, mean {upper_mean:.6} (accumulates at 2)", upper.len());
    println!(
        "  lower branch: {} values in [{:.3e}, {:.4}] (decays to 0)",
        lower.len(),
        lower.last().unwrap(),
        lower[0]
    );
    println!(
        "  cluster gap:  {:.4}",
        upper.iter().cloned().fold(f64::INFINITY, f64::min)
            - lower.iter().cloned().fold(0.0_f64, f64::max)
    );
}
