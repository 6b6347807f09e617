//! File formats, training and evaluation workflows, the HTTP service and
//! the command-line interface around [`promptclip_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod export;
pub mod fit;
pub mod imageio;
pub mod manifest;
pub mod service;
pub mod studies;

pub use error::{Error, Result};
pub use promptclip_core;
