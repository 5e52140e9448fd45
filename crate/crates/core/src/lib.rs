//! U-shaped split learning with an orthogonal random-projection cut layer.
//!
//! The client sends `k`-dimensional projections of its cut-layer
//! activations instead of the raw `d`-dimensional tensor; the server
//! lifts them back (fixed or learned) before running its backbone.
//! Around that core sit a bit-exact wire protocol, communication
//! accounting and an empirical privacy harness.

pub mod error;
pub mod linalg;
pub mod nn;
pub mod bottleneck;
pub mod wcc;
pub mod transport;
pub mod data;
pub mod protocol;
pub mod metrics;
pub mod attacks;
pub mod config;
pub mod runner;

pub use error::{Error, Result};
pub use linalg::{RngStream, Tensor};
