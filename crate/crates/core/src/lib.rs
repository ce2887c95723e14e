//! Shared class centers, discriminative center loss and adversarial
//! feature alignment for unsupervised domain adaptation at desk scale.

pub mod centers;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod losses;
pub mod methods;
pub mod ndcore;
pub mod network;
pub mod pseudo;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
