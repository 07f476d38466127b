//! EF regression from video, with an optional mask channel, and teacher-student distillation.

pub mod input;
pub mod model;
pub mod predict;
pub mod train;

pub use input::{
    build_multi_input_clip, stack_clips, video_clip, MaskBank, MaskEncoding, ProbabilityMaps,
};
pub use model::{RegModelConfig, RegressionModel};
pub use predict::{
    batch_input, clip_input, predict_ef, pseudo_label, pseudo_labels, write_predictions,
    ClipSelection, EfPrediction, PredictionSource,
};
pub use train::{
    bank_indices, distillation_total, train_distilled, train_multi_input, train_regressor,
    RegTrainConfig, RegressionLog, RegressionRecord,
};
