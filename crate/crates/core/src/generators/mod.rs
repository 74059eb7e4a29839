//! Trainable image generators and their checkpoint container.

mod checkpoint;
mod splice_unet;
mod splicenet;

use candle_core::Tensor;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use splice_unet::{build_splice_generator, SpliceGenerator, SpliceGeneratorConfig};
pub use splicenet::{
    build_splicenet, mapping_forward, splicenet_forward, ModConv2d, ModulationVector, SpliceNet, SpliceNetConfig,
};

use crate::error::Result;

/// Replicate-pads the bottom/right edges so both spatial sizes are multiples
/// of `m`; callers crop the output back.
pub(crate) fn pad_to_multiple(x: &Tensor, m: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let ph = (m - h % m) % m;
    let pw = (m - w % m) % m;
    let mut y = x.clone();
    if ph > 0 {
        y = y.pad_with_same(2, 0, ph)?;
    }
    if pw > 0 {
        y = y.pad_with_same(3, 0, pw)?;
    }
    Ok(y)
}
