//! Federated-learning orchestration and simulation.
//!
//! A controller coordinates learners that each hold a private shard of the
//! data. Every round the controller hands out the community model and a batch
//! budget chosen by a [`policy::Policy`], learners train locally, and the
//! returned models are averaged weighted by shard size.

pub mod aggregation;
pub mod clock;
pub mod controller;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod learner;
pub mod model;
pub mod policy;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
