//! Classifier shared by student and teacher: a convolutional feature
//! extractor whose globally pooled last-conv activation is the feature
//! vector, followed by an affine head producing three class logits.

mod checkpoint;
mod network;
mod params;
mod scalar;

pub use checkpoint::{Archive, ArchiveMeta, ARCHIVE_VERSION};
pub use network::{softmax3, Architecture, BatchOutput, ForwardOutput, Network, Tape};
pub use params::{clone_params, ema_update, ModelParams, Tensor};
pub use scalar::Scalar;

use crate::datamodel::Slice;
use crate::error::Result;
use crate::trainer::Perturbation;

/// Single-slice forward under a realized perturbation.
pub fn forward<F: Scalar>(
    net: &Network,
    params: &ModelParams<F>,
    slice: &Slice,
    perturbation: &Perturbation,
) -> Result<ForwardOutput> {
    let input = perturbation.apply(&slice.pixels);
    let out = net.forward_batch(params, &[&input])?;
    Ok(out.outputs().pop().unwrap())
}
