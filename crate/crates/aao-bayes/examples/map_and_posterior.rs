//! MAP estimation on the spectral backend: conjugate gradients on the
//! reduced Hessian in the variable's own inner product, with the Gaussian
//! posterior attached, next to the direct dense posterior formula.
//!
//! ```bash
//! cargo run --example map_and_posterior
//! ```

use aao_bayes::aao_bh::TimeGrid;
use aao_bayes::bayes::{
    map_estimate, posterior_direct, sample_posterior, CostConfig, DirectSetup, NoiseCov,
    ProblemKind, VariableKind,
};
use aao_bayes::laplacian::{SpectralBasis, SpectralField};
use aao_bayes::linalg::{DenseMatrix, DenseSymMatrix};
use aao_bayes::rng::Rng64;

fn main() {
    let basis = SpectralBasis::new(3);
    let n = basis.len();
    let mut rng = Rng64::new(5);

    // noisy data from a known source
    let theta_star = SpectralField::random(&basis, &mut rng);
    let delta = 0.01;
    let mut data = theta_star.apply_power(-1.0);
    for c in data.coeffs.iter_mut() {
        *c += delta * rng.normal();
    }

    let ones = vec![1.0; n];
    let cfg = CostConfig::new(&basis, TimeGrid::new(4, 0.1), delta * delta, delta, data.clone())
        .with_penalties(ones.clone(), vec![0.0; n], ones.clone());

    let post = map_estimate(&cfg, ProblemKind::InverseSource, VariableKind::Parameter, 1e-12)
        .expect("map failed");
    let err: f64 = post
        .mean
        .iter()
        .zip(&theta_star.coeffs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / theta_star.norm_l2();
    println!(
        "MAP via CG: {} iterations, relative error {err:.4}",
        post.diagnostics.iterations
    );

    // the same posterior through the dense Gaussian formulas
    let mut forward = DenseMatrix::zeros(n, n);
    for m in 0..n {
        forward.set(m, m, 1.0 / basis.eigenvalue(m));
    }
    // effective prior precision c1 + c3 = 2 per mode
    let setup = DirectSetup {
        forward,
        prior_cov: DenseSymMatrix::from_diag(&vec![0.5; n]),
        noise: NoiseCov::Identity,
        alpha: cfg.alpha,
        delta,
    };
    let direct = posterior_direct(&setup, &data.coeffs).expect("direct posterior failed");
    let dev: f64 = post
        .mean
        .iter()
        .zip(&direct.mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("direct posterior mean agrees with the MAP to {dev:.2e}");

    let draws = sample_posterior(&direct, 99, 5);
    println!("five posterior draws of the first coefficient:");
    for d in &draws {
        println!("  {:+.5}  (mean {:+.5})", d[0], direct.mean[0]);
    }
}
