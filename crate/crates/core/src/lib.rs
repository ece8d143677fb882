//! Multi-source domain-adaptive object detection with a spindle-shaped
//! detector, adversarial feature alignment and a pseudo target subnet.

pub mod alignment;
pub mod autograd;
pub mod boxes;
pub mod consistency;
pub mod detector;
pub mod error;
pub mod eval;
pub mod params;
pub mod psl;
pub mod synth_data;
pub mod tensor;
pub mod trainer;

pub use error::{DmsnError, Result};
