//! Local occupied volatility (LOV) engine.
//!
//! The crate is `no_std` with `alloc`. It holds the numerical core: Black-Scholes
//! analytics, local volatility surfaces and Dupire extraction, discrete
//! occupation measures, sensitivity functions (parametric and neural), the
//! particle simulation of occupied SDEs, Least Squares Monte Carlo pricing and
//! the neural calibration loop. File formats and the command line live in the
//! `lov` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod calibrate;
pub mod error;
pub mod localvol;
pub mod lsmc;
pub mod market;
pub mod model;
pub mod occupation;
pub mod rng;
pub mod sensitivity;
pub mod simulator;

pub use error::{Error, Result};
pub use localvol::{ImpliedVolSurface, LocalVolSurface};
pub use market::{Exercise, MarketEnvironment, OptionQuote, PayoffFlag};
pub use model::{LovModel, VarianceMode};
pub use occupation::{CorridorPartition, DiscreteOccupation};
pub use sensitivity::{Mlp, SensitivitySpec};
pub use simulator::{PathEnsemble, SimConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
