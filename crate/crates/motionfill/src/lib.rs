//! Speech-conditional facial motion infilling: conditional flow matching
//! over motion sequences with a windowed diffusion transformer, masked
//! timeline editing, Euler ODE sampling, optical-flow frame resampling,
//! boundary-continuity metrics, and a synthetic benchmark harness.

pub mod bench;
pub mod cfm;
pub mod dit;
pub mod error;
pub mod sampler;
pub mod masking;
pub mod metrics;
pub mod motion;
pub mod pipelines;
pub mod resample;

pub use error::{Error, Result};
