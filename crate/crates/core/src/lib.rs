//! Yosida-regularized solvers for finite-dimensional monotone SDEs
//! `dX + A(t, X)dt = B(t, X)dW` posed on a Gelfand triple `V ⊂ H ⊂ V'`.
//!
//! The drift is replaced by the Yosida approximation of `A + c₂I`, the
//! diffusion is evaluated at the resolvent, and the resulting Lipschitz
//! equation is integrated by Euler–Maruyama or Picard iteration. An implicit
//! scheme for the unregularized equation serves as the `λ → 0` reference,
//! and [`estimates`] checks the energy bounds over Monte Carlo ensembles.

pub mod error;
pub mod estimates;
pub mod integrator;
pub mod noise;
pub mod operators;
pub mod resolvent;
pub mod triple;

pub use error::{Error, Result};
pub use integrator::{PathSolution, Scheme, SolverOptions};
pub use noise::NoisePath;
pub use operators::{
    AdditiveNoise, Constants, Diffusion, DiscretePLaplacian, Drift, LinearDrift,
    MultiplicativeScalar, OperatorPair, Profile, ScalarPower, Scenario,
};
pub use resolvent::{ResolventMethod, ResolventOptions, ResolventSolution};
pub use triple::{Boundary, GelfandTriple, VNormKind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
