//! Lifelong domain-adaptive 2D-to-3D human pose lifting.
//!
//! The crate is organised bottom-up: geometry ([`skeleton`], [`kinematics`],
//! [`camera`], [`metrics`]), a small reverse-mode differentiation layer
//! ([`autograd`], [`nn`], [`optim`], [`checkpoint`]), the learning components
//! ([`generators`], [`objectives`], [`diffusion`], [`estimator`]) and the
//! sequential adaptation driver ([`lifelong`]) with its data and config
//! plumbing.

pub mod autograd;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod estimator;
pub mod generators;
pub mod gradcheck;
pub mod kinematics;
pub mod lifelong;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pose;
pub mod posefile;
pub mod probes;
pub mod seeding;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
