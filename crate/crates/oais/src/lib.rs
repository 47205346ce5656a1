//! Optimised adaptive importance sampling.
//!
//! Importance sampling with exponential-family proposals whose natural
//! parameter is adapted by descending the chi-square objective
//! `rho(theta) = E_q[pi^2(X)/q_theta^2(X)]` — the constant that governs the
//! finite-sample error of both the unbiased and the self-normalised
//! estimators. Adaptation runs with exact gradients (quadrature), vanilla
//! projected SGD on the raw iterates, or projected SGD deployed through
//! averaged iterates; when only an unnormalised target is available the same
//! loops descend `R(theta) = Z^2 rho(theta)`, which has the same minimisers.
//!
//! The [`harness`] module adds a reproducible experiment runner (seeded
//! sweeps over sample counts and iteration budgets), log-log rate fitting,
//! and checks of the finite-sample error bounds against quadrature oracles.
//!
//! ```
//! use oais::estimators::{draw_particles, snis_estimate};
//! use oais::proposal::gaussian_mean_family;
//! use oais::target::{make_gaussian_target, TestFunction};
//! use rand::SeedableRng;
//!
//! let target = make_gaussian_target(&[0.0], 1.0, true)?;
//! let family = gaussian_mean_family(1.0, 1)?;
//! let phi = TestFunction::coord_mean_clamp(-10.0, 10.0)?;
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
//! let particles = draw_particles(&family, &[1.0], &target, 10_000, &mut rng)?;
//! let estimate = snis_estimate(&particles, &phi)?;
//! assert!(estimate.abs() < 0.1);
//! # Ok::<(), oais::OaisError>(())
//! ```

pub mod error;
pub mod estimators;
pub mod gradients;
pub mod harness;
mod numeric;
pub mod optimize;
pub mod proposal;
pub mod quadrature;
pub mod target;

pub use error::{OaisError, Result};
