//! All-at-once Bayesian inversion for two linear PDE problems on the unit
//! square: the inverse source problem for the Poisson equation and the
//! backwards heat equation.
//!
//! The library treats the PDE model and the observation equation as one
//! joint operator equation for the pair (state, parameter). It provides
//!
//! * dense and matrix-free numerical kernels ([`linalg`]),
//! * the exact spectral calculus of the Dirichlet Laplacian ([`laplacian`]),
//! * P1 finite elements on a structured triangulation ([`fem`]),
//! * the joint block operators, their adjoints in the natural weighted inner
//!   products, and their eigenvalue analysis ([`aao_is`], [`aao_bh`]),
//! * joint Gaussian priors on (state, parameter) and link-condition
//!   diagnostics ([`priors`]),
//! * reduced gradients/Hessians, MAP and direct posterior computation, and
//!   posterior-contraction diagnostics ([`bayes`]),
//! * reproducible synthetic-data experiments ([`experiments`]).
//!
//! Every randomized routine takes an explicit seed and is bit-reproducible.
//! The `examples/` directory holds one runnable example per capability; the
//! thin `aao` binary drives the experiment pipelines from JSON configs.

pub mod error;
pub mod rng;

pub mod linalg;

pub mod fem;
pub mod laplacian;

pub mod aao_bh;
pub mod aao_is;

pub mod bayes;
pub mod priors;

pub mod experiments;

pub use error::{Error, Result};
