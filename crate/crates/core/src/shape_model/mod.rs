//! Statistical shape models, the synthetic disk-phantom generator, and
//! TPS-based virtual-sample synthesis.

mod phantom;
mod ssm;
mod virtual_sample;

pub use phantom::{generate_phantom, PhantomConfig, PhantomSample};
pub use ssm::{build_ssm, ShapeModel, COEFF_CLAMP};
pub use virtual_sample::{make_virtual_sample, VirtualSample, MAX_TPS_RETRIES};
