//! Datasets on disk and in memory, plus a synthetic generator.

pub mod manifest;
pub mod sampler;
pub mod sequence;
pub mod split;
pub mod synthetic;

pub use manifest::{load_manifest, write_dataset, ChannelStats};
pub use sampler::{
    clip_at, sample_clip, sample_css_clip, sample_labeled_frames, sample_regression_clip,
    temporal_mirror, ClipPlan, ClipSample, ClipSpec, EpochSampler, LabeledPair,
};
pub use sequence::{Dataset, EchoSequence, Mask, Split};
pub use split::{split_labels, DatasetSplit, Fraction};
pub use synthetic::{generate_synthetic, SyntheticParams};
