//! Training data: triplet extraction from frame sequences, flow-weighted
//! patch sampling, jump-cut rejection, augmentation and the on-disk cache.

pub mod augment;
pub mod dataset;
pub mod flow;
pub mod jumpcut;
pub mod sampling;

pub use augment::{
    apply_augment, augment, center_crop, draw_augment, value_multiset, AugmentParams, Transform,
    TRAINING_CROP,
};
pub use dataset::{
    build_dataset, build_dataset_default, decode_blob, encode_blob, DatasetConfig, DatasetIndex,
    PatchRecord, Split,
};
pub use flow::{flow_score, BlockMatching, FlowEstimator, FlowField};
pub use jumpcut::{detect_jump_cut, JumpCutDetector};
pub use sampling::{sample_patches, sample_patches_from_flow, PatchTriplet, SamplingConfig};

use crate::error::Result;
use crate::image::Image;

/// Three consecutive frames; `middle` is the interpolation target.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub first: Image,
    pub middle: Image,
    pub last: Image,
}

impl Triplet {
    pub fn new(first: Image, middle: Image, last: Image) -> Result<Self> {
        first.same_size(&middle)?;
        first.same_size(&last)?;
        Ok(Triplet {
            first,
            middle,
            last,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.first.size()
    }

    pub fn frames(&self) -> [&Image; 3] {
        [&self.first, &self.middle, &self.last]
    }
}
