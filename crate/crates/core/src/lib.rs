pub mod adversary;
pub mod confidence;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod privacy;
pub mod qnet;
pub mod runtime;
pub mod seed;
pub mod thermal;
pub mod vr;

pub use env::{Environment, StepOutcome, ToyMdp};
pub use error::{PearlError, Result};
