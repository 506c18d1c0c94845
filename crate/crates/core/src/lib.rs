#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod projection;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
