//! Affordance-aligned flow-matching policies at desk scale.

pub mod error;
pub mod numerics;
pub mod align;
pub mod metrics;
pub mod model;
pub mod teacher;
pub mod train;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
