//! Draw from the joint Gaussian priors: the smoothness family on the
//! parameter and its semigroup pushforward onto the heat state, with a
//! Monte Carlo check of the pushforward variance.
//!
//! ```bash
//! cargo run --example prior_sampling
//! ```

use aao_bayes::fem::Mesh;
use aao_bayes::laplacian::{SpectralBasis, SpectralField};
use aao_bayes::priors::{
    sample_prior, semigroup_state_prior, smoothness_prior_fe, smoothness_prior_spectral,
};

fn main() {
    // spectral smoothness prior and its pushforward through e^{-tA}
    let basis = SpectralBasis::new(8);
    let cp = smoothness_prior_spectral(&basis, 1.5, 0.5, 1).unwrap();
    let times = [0.0, 0.025, 0.05, 0.075, 0.1];
    let state_prior =
        semigroup_state_prior(&cp, &basis, &times, None, &SpectralField::zeros(&basis)).unwrap();
    println!("prior: {}", cp.label);
    println!("pushforward blocks at times {times:?}");

    let n_draws = 20_000;
    let draws = sample_prior(&cp, 7, n_draws).unwrap();
    let t = times[4];
    let emp: f64 = draws
        .iter()
        .map(|d| {
            let f = SpectralField::from_coeffs(&basis, d.clone()).unwrap();
            let pushed = f.apply_semigroup(t).unwrap();
            pushed.coeffs[0] * pushed.coeffs[0]
        })
        .sum::<f64>()
        / n_draws as f64;
    let mut e = vec![0.0; state_prior.dim()];
    e[4 * basis.len()] = 1.0;
    let want = state_prior.cov_apply(&e)[4 * basis.len()];
    println!(
        "first-mode variance at t = {t}: Monte Carlo {emp:.6} vs block value {want:.6} ({} draws)",
        n_draws
    );

    // finite-element variant of the same prior
    let mesh = Mesh::new(17);
    let fe = smoothness_prior_fe(&mesh, 1.5, 0.5, 1).unwrap();
    let fields = sample_prior(&fe, 11, 2).unwrap();
    let norms: Vec<f64> = fields
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    println!("two FE draws on a {0}x{0} grid, coefficient norms {norms:?}", mesh.nodes_per_dim());
}
