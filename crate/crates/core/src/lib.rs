//! Cross-embodiment manipulation benchmark engine and RL harness.
//!
//! The crate procedurally generates robot morphologies, simulates `reach`
//! and `push` tasks in a lightweight kinematic world, trains
//! morphology-conditioned PPO agents (MLP and transformer backbones, with a
//! small built-in reverse-mode autodiff core), and evaluates multi-task and
//! zero-shot generalization across benchmark splits.

pub mod collision;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod math;
pub mod morphology;
pub mod nn;
pub mod policy;
pub mod procgen;
pub mod real_arms;
pub mod registry;
pub mod scene;
pub mod token;
pub mod trainer;
pub mod util;
pub mod vec_env;

pub use error::{Error, Result};
