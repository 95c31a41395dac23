//! Probability as microstate counting in no-collapse quantum mechanics.
//!
//! * [`hilbert`]: states, projectors, unitaries, tensor products.
//! * [`expansion`]: equiamplitude expansions and their validation.
//! * [`event_space`]: Boolean event spaces over an expansion, probability
//!   assignments, and the swap construction that forces equal-amplitude
//!   microstates to be equiprobable.
//! * [`microprob`]: expansions adapted to a projector, branch counts `m/n`
//!   and their convergence to `‖Pψ‖²/‖ψ‖²`.
//! * [`eprb`]: spin measurements on two parties, marginals, parameter and
//!   outcome independence, product-state counting and CHSH.

pub mod eprb;
pub mod error;
pub mod event_space;
pub mod expansion;
pub mod hilbert;
pub mod microprob;

pub use error::{Error, Result};
