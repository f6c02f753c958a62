//! Trajectory attribution for offline tabular reinforcement learning.
//!
//! The pipeline generates Grid-World trajectories with Dyna-Q agents, embeds
//! them with a recurrent autoencoder, clusters the embeddings, retrains
//! explanation policies with one cluster left out at a time, and attributes
//! per-state decisions to the cluster whose removal changes them.

pub mod analysis;
pub mod attribution;
pub mod clustering;
pub mod config;
pub mod dynaq;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gridworld;
pub mod par;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod trajstore;

pub use error::{Error, Result};
