//! Anticipatory driving planner on a deterministic microworld.

mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod microworld;
pub mod nn;
pub mod perception;
pub mod planner;
pub mod training;
pub mod world_model;

pub use error::{CoreError, Result};
