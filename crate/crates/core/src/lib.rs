#![cfg_attr(not(feature = "std"), no_std)]

pub extern crate alloc;

pub mod datakit;
pub mod error;
pub mod filterbank;
pub mod graph;
pub mod image;
pub mod nn;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod proposal;
pub mod rectifier;
pub mod segmenter;
pub mod tensor;

pub use error::{Error, Result};
