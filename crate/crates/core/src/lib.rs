//! Joint identification of unknown dynamics through a deep Koopman
//! representation and recovery of optimal-control objective weights from
//! segments of optimal trajectories.

pub mod demo_gen;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod ioc;
pub mod koopman;
pub mod linalg;
pub mod observables;

pub use demo_gen::{Features, GoalFeatures, OcSettings, OcSolution};
pub use dynamics::{Dynamics, LinearSystem, Pendulum, PendulumParams, Segment, Trajectory};
pub use error::{Error, Result};
pub use ioc::{DerivativeSource, PmpSystem, Provenance, WeightEstimate};
pub use koopman::{DataMatrices, KoopmanModel};
pub use observables::{Mlp, MlpConfig, Observable};
