//! Datasets, the synthetic generator and the joint pair sampler.

mod histogram;
mod sampler;
mod sequence;
mod synthetic;

pub use histogram::{ltrb_targets, regression_target_histogram, TargetHistogram, DIRECTIONS};
pub use sampler::{
    jittered_search_crop, realize_pair, sample_epoch_schedule, CropConfig, PairDescriptor, Polarity, SamplePair,
    SamplerConfig,
};
pub use sequence::{Dataset, Sequence};
pub use synthetic::{
    gen_synthetic, generate_sequence, generate_split, ShapeClass, Split, SplitSpec, SyntheticSpec, MIN_VISIBLE,
};
