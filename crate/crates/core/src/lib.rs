//! Self-triggered min-max MPC for linear plants controlled over a
//! token-bucket regulated, lossy network.

pub mod cli;
pub mod config;
pub mod constraints;
pub mod controller;
pub mod error;
pub mod lifted;
pub mod linalg;
pub mod network;
pub mod optimize;
pub mod reproduce;
pub mod scenario;
pub mod sdp;
pub mod sim;
pub mod terminal;

pub use error::{Error, Result};
