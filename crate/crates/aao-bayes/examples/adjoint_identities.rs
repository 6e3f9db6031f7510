//! Verify the adjoint identities of both joint operators in their exact
//! weighted inner products.
//!
//! ```bash
//! cargo run --example adjoint_identities
//! ```

use aao_bayes::aao_bh::{BhBlockVector, BhCoVector, BhOperator, SpaceTimeField, TimeGrid, U0Field};
use aao_bayes::aao_is::{IsBlockVector, IsCoVector, IsOperator};
use aao_bayes::laplacian::{SpectralBasis, SpectralField};
use aao_bayes::rng::Rng64;

fn main() {
    let basis = SpectralBasis::new(8);
    let mut rng = Rng64::new(42);

    let op = IsOperator::new(&basis);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let x = IsBlockVector::new(
            SpectralField::random(&basis, &mut rng),
            SpectralField::random(&basis, &mut rng),
        );
        let y = IsCoVector {
            model: SpectralField::random(&basis, &mut rng),
            observation: SpectralField::random(&basis, &mut rng),
        };
        let defect = (op.apply(&x).inner(&y) - x.inner(&op.apply_adjoint(&y))).abs();
        worst = worst.max(defect / (x.norm() * y.norm()));
    }
    println!("inverse source:   max relative adjoint defect {worst:.3e} over 200 pairs");

    let grid = TimeGrid::new(4, 1.0);
    let op = BhOperator::new(&basis, grid);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let x = BhBlockVector {
            u: U0Field::random(&basis, grid, &mut rng),
            theta: SpectralField::random(&basis, &mut rng),
        };
        let y = BhCoVector {
            model: SpaceTimeField::random_dg0(&basis, grid, &mut rng),
            observation: SpectralField::random(&basis, &mut rng),
        };
        let defect = (op.apply(&x).inner(&y) - x.inner(&op.apply_adjoint(&y))).abs();
        worst = worst.max(defect / (x.norm() * y.norm()));
    }
    println!("backwards heat:   max relative adjoint defect {worst:.3e} over 200 pairs");
}
