pub mod config;
pub mod container;
pub mod data;
pub mod duolm;
pub mod error;
pub mod evalkit;
pub mod flowdec;
pub mod frontend;
pub mod fsq;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod train;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
