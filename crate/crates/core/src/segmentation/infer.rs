use crate::css::EmbeddingSequence;
use crate::data::manifest::ChannelStats;
use crate::data::sampler::ClipSample;
use crate::data::sequence::{EchoSequence, Mask, CHANNELS};
use crate::error::{contract, Result};
use crate::nn::kernels::{sigmoid, softplus};
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::segmentation::model::SegmentationModel;
use crate::tensor::Tensor;

/// Frames per forward pass during inference.
const CHUNK: usize = 16;

/// Normalized `[n, 3, h, w]` tensor from raw bytes.
pub fn frames_tensor<T: Scalar>(
    frames: &[u8],
    h: usize,
    w: usize,
    stats: &ChannelStats,
) -> Tensor<T> {
    let n = frames.len() / (CHANNELS * h * w);
    Tensor::from_vec(&[n, CHANNELS, h, w], stats.normalize(frames, h * w))
}

/// Pooled encoder output `[n, d]` for normalized frames `[n, 3, h, w]`.
pub fn encode_frames<T: Scalar>(
    model: &SegmentationModel<T>,
    frames: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = frames.shape();
    contract!(
        shape.len() == 4 && shape[1] == CHANNELS,
        "encoder expects [n, {CHANNELS}, h, w] frames, got {shape:?}"
    );
    let mut g = Graph::inference(model.params());
    let x = g.input(frames.clone());
    let enc = model.encode(&mut g, x);
    Ok(g.value(enc.pooled).clone())
}

/// One embedding per clip frame, in clip order.
pub fn encode_clip<T: Scalar>(
    model: &SegmentationModel<T>,
    clip: &ClipSample,
    stats: &ChannelStats,
) -> Result<EmbeddingSequence<T>> {
    let x = frames_tensor(clip.frames(), clip.height(), clip.width(), stats);
    let z = encode_frames(model, &x)?;
    EmbeddingSequence::with_indices(
        z.into_data(),
        clip.len(),
        model.embedding_dim(),
        clip.frame_indices.clone(),
    )
}

/// Mean binary cross-entropy with logits over every pixel of the batch.
pub fn seg_loss<T: Scalar>(logits: &[T], masks: &[T]) -> Result<f64> {
    contract!(
        logits.len() == masks.len(),
        "{} logits for {} mask pixels",
        logits.len(),
        masks.len()
    );
    contract!(!logits.is_empty(), "empty segmentation batch");
    let total: f64 = logits
        .iter()
        .zip(masks)
        .map(|(&l, &y)| {
            let l = l.as_f64();
            softplus(l) - l * y.as_f64()
        })
        .sum();
    Ok(total / logits.len() as f64)
}

/// Per-frame foreground probabilities and thresholded masks of a video.
#[derive(Clone, Debug)]
pub struct MaskPrediction<T> {
    /// `[T, H, W]` values in `[0, 1]`.
    pub probabilities: Tensor<T>,
    pub masks: Vec<Mask>,
}

impl<T: Scalar> MaskPrediction<T> {
    pub fn frame_probabilities(&self, t: usize) -> &[T] {
        let plane = self.probabilities.shape()[1] * self.probabilities.shape()[2];
        &self.probabilities.data()[t * plane..(t + 1) * plane]
    }
}

/// Foreground probability maps `[n, H, W]` for raw frames.
pub fn predict_probabilities<T: Scalar>(
    model: &SegmentationModel<T>,
    frames: &[u8],
    h: usize,
    w: usize,
    stats: &ChannelStats,
) -> Tensor<T> {
    let frame = CHANNELS * h * w;
    let n = frames.len() / frame;
    let mut out = Vec::with_capacity(n * h * w);
    for chunk in frames.chunks(CHUNK * frame) {
        let mut g = Graph::inference(model.params());
        let x = g.input(frames_tensor(chunk, h, w, stats));
        let (_, logits) = model.forward(&mut g, x);
        out.extend(
            g.value(logits)
                .data()
                .iter()
                .map(|&l| T::lit(sigmoid(l.as_f64()))),
        );
    }
    Tensor::from_vec(&[n, h, w], out)
}

/// Segments every frame of `seq`.
pub fn infer_masks<T: Scalar>(
    model: &SegmentationModel<T>,
    seq: &EchoSequence,
    stats: &ChannelStats,
    threshold: f64,
) -> Result<MaskPrediction<T>> {
    let (h, w) = (seq.height(), seq.width());
    let probabilities = predict_probabilities(model, seq.frames(), h, w, stats);
    let masks = probabilities
        .data()
        .chunks(h * w)
        .map(|p| {
            Mask::new(
                h,
                w,
                p.iter()
                    .map(|&v| u8::from(v.as_f64() >= threshold))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskPrediction {
        probabilities,
        masks,
    })
}

/// `2|A ∩ B| / (|A| + |B|)` on binary pixel buffers; 1.0 when both are empty.
pub fn dice(pred: &[u8], label: &[u8]) -> Result<f64> {
    contract!(
        pred.len() == label.len(),
        "mask sizes differ: {} vs {}",
        pred.len(),
        label.len()
    );
    contract!(
        pred.iter().chain(label).all(|&v| v <= 1),
        "dice needs binary masks"
    );
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(label) {
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

pub fn mask_dice(pred: &Mask, label: &Mask) -> Result<f64> {
    contract!(
        (pred.height(), pred.width()) == (label.height(), label.width()),
        "mask shapes differ"
    );
    dice(pred.data(), label.data())
}
