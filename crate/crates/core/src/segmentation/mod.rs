//! Segmentation network trained jointly with the CSS term, plus mask inference.

pub mod infer;
pub mod model;
pub mod train;

pub use infer::{
    dice, encode_clip, encode_frames, frames_tensor, infer_masks, mask_dice, predict_probabilities,
    seg_loss, MaskPrediction,
};
pub use model::{Encoded, SegModelConfig, SegmentationModel};
pub use train::{
    css_term, supervised_batch, train_joint, LossBreakdown, LossRecord, SegTrainConfig, TrainLog,
};
