//! Metrics and saliency maps, with exports for reports.

pub mod export;
pub mod metrics;
pub mod protocol;
pub mod saliency;
pub mod similarity;

pub use crate::segmentation::{dice, mask_dice};
pub use export::{
    embedding_header, heatmap_overlay, normalize_frame, save_png, write_embeddings,
    write_matrix_csv,
};
pub use metrics::{mae, r_squared, write_reports, MetricReport};
pub use protocol::{ef_report, segmentation_report, unlabeled_frame};
pub use saliency::{
    sequence_saliency_dice, smoothgrad, top_fraction_mask, top_gradient_dice, InputGradient,
    SaliencyMap, SmoothGradConfig,
};
pub use similarity::{frame_similarity_matrix, video_similarity_matrix};
