#![no_std]
extern crate alloc;

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod hfg;
pub mod mca_cmg;
pub mod mesh_graph;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod report_gen;
pub mod tensor;

pub use error::{Error, Result};
