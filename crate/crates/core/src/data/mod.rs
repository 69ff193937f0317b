//! Paired training data: procedural clean images, synthetic degradations,
//! PNG folders, and crop/flip augmentation.

mod dataset;
mod degrade;
mod io;

pub use dataset::{augment, augment_with, item_rng, stack_batch, Dataset, Split};
pub use degrade::{
    rain_field, synth_degrade, synth_degrade_with, synthetic_clean, DegradationTag, DegradeParams,
    RainSample,
};
pub use io::{load_dir, load_image, save_image};

use crate::tensor::Tensor;

/// A degraded image and its clean reference, `[3, H, W]` each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradedPair {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub tag: DegradationTag,
    pub seed: u64,
    /// Some value left `[0, 1]` and was clamped.
    pub clamped: bool,
}

/// Clamp to `[0, 1]`, reporting whether anything changed.
pub(crate) fn clamp_unit(t: &mut Tensor) -> bool {
    let mut changed = false;
    for v in t.data_mut() {
        let c = v.clamp(0.0, 1.0);
        if c != *v {
            changed = true;
            *v = c;
        }
    }
    changed
}
