use std::fs;
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::data::manifest::ChannelStats;
use crate::data::sampler::ClipSample;
use crate::data::sequence::{Dataset, CHANNELS};
use crate::error::{contract, io_err, Error, Result};
use crate::scalar::Scalar;
use crate::segmentation::{predict_probabilities, SegmentationModel};
use crate::tensor::Tensor;

/// How the mask channel is encoded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskEncoding {
    /// Foreground probability in `[0, 1]`.
    #[default]
    Probability,
    /// Probability thresholded at 0.5.
    Binary,
}

/// Foreground probability maps for specific frames of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps<T> {
    pub sequence_id: String,
    pub frame_indices: Vec<usize>,
    /// `[n, H, W]`.
    pub maps: Tensor<T>,
}

/// Per-frame probability maps of whole videos, indexed like the dataset.
#[derive(Clone, Debug, Default)]
pub struct MaskBank {
    videos: Vec<Option<VideoMaps>>,
}

#[derive(Clone, Debug)]
struct VideoMaps {
    id: String,
    height: usize,
    width: usize,
    /// `[T, H, W]`; stored as f32 whatever the model precision.
    probs: Vec<f32>,
}

impl MaskBank {
    /// Runs the segmentation model over every frame of the listed sequences.
    pub fn infer<T: Scalar>(
        model: &SegmentationModel<T>,
        dataset: &Dataset,
        indices: &[usize],
        stats: &ChannelStats,
    ) -> Self {
        let mut videos = vec![None; dataset.len()];
        for &i in indices {
            let seq = dataset.get(i);
            let (h, w) = (seq.height(), seq.width());
            let probs = predict_probabilities(model, seq.frames(), h, w, stats);
            videos[i] = Some(VideoMaps {
                id: seq.id.clone(),
                height: h,
                width: w,
                probs: probs.data().iter().map(|v| v.as_f64() as f32).collect(),
            });
        }
        Self { videos }
    }

    /// Bank built from known maps, `[T, H, W]` per dataset index.
    pub fn from_maps(dataset: &Dataset, maps: Vec<(usize, Vec<f32>)>) -> Result<Self> {
        let mut videos = vec![None; dataset.len()];
        for (i, probs) in maps {
            let seq = dataset.get(i);
            let (h, w) = (seq.height(), seq.width());
            contract!(
                probs.len() == seq.num_frames() * h * w,
                "{} probability values for {} frames of {h}x{w}",
                probs.len(),
                seq.num_frames()
            );
            contract!(
                probs.iter().all(|p| (0.0..=1.0).contains(p)),
                "probabilities must lie in [0, 1]"
            );
            videos[i] = Some(VideoMaps {
                id: seq.id.clone(),
                height: h,
                width: w,
                probs,
            });
        }
        Ok(Self { videos })
    }

    /// Writes one 8-bit grayscale strip `[T * H, W]` per video as `<id>.png`.
    /// Probabilities are quantized to steps of 1/255.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for v in self.videos.iter().flatten() {
            let frames = v.probs.len() / (v.height * v.width);
            let data = v.probs.iter().map(|p| (p * 255.0).round() as u8).collect();
            let img = GrayImage::from_raw(v.width as u32, (frames * v.height) as u32, data)
                .expect("strip size");
            let path = dir.join(format!("{}.png", v.id));
            img.save(&path)
                .map_err(|source| Error::Image { path, source })?;
        }
        Ok(())
    }

    /// Reads the strips written by [`MaskBank::save`] for every sequence that has one.
    pub fn load(dir: &Path, dataset: &Dataset) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Missing(format!(
                "no inferred masks under {}; run infer-masks first",
                dir.display()
            )));
        }
        let mut maps = Vec::new();
        for (i, seq) in dataset.sequences.iter().enumerate() {
            let path = dir.join(format!("{}.png", seq.id));
            if !path.exists() {
                continue;
            }
            let img = image::open(&path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?
                .into_luma8();
            contract!(
                img.dimensions() == (seq.width() as u32, (seq.num_frames() * seq.height()) as u32),
                "{} does not match {} frames of {}x{}",
                path.display(),
                seq.num_frames(),
                seq.height(),
                seq.width()
            );
            maps.push((
                i,
                img.into_raw()
                    .into_iter()
                    .map(|v| v as f32 / 255.0)
                    .collect(),
            ));
        }
        Self::from_maps(dataset, maps)
    }

    pub fn contains(&self, sequence: usize) -> bool {
        self.videos.get(sequence).is_some_and(Option::is_some)
    }

    /// Maps of the frames a clip was built from, in clip order.
    pub fn for_clip<T: Scalar>(&self, clip: &ClipSample) -> Result<ProbabilityMaps<T>> {
        let video = self.videos.get(clip.sequence).and_then(Option::as_ref);
        let Some(v) = video else {
            return Err(crate::error::Error::Missing(format!(
                "no masks were inferred for sequence {}",
                clip.sequence_id
            )));
        };
        let plane = v.height * v.width;
        let mut data = Vec::with_capacity(clip.len() * plane);
        for &t in &clip.frame_indices {
            contract!(
                (t + 1) * plane <= v.probs.len(),
                "frame {t} outside the inferred masks"
            );
            data.extend(
                v.probs[t * plane..(t + 1) * plane]
                    .iter()
                    .map(|&p| T::lit(p as f64)),
            );
        }
        Ok(ProbabilityMaps {
            sequence_id: v.id.clone(),
            frame_indices: clip.frame_indices.clone(),
            maps: Tensor::from_vec(&[clip.len(), v.height, v.width], data),
        })
    }
}

/// Normalized video clip `[L, 3, H, W]`.
pub fn video_clip<T: Scalar>(clip: &ClipSample, stats: &ChannelStats) -> Tensor<T> {
    let (h, w) = (clip.height(), clip.width());
    Tensor::from_vec(
        &[clip.len(), CHANNELS, h, w],
        stats.normalize(clip.frames(), h * w),
    )
}

/// Normalized video with the mask channel appended, `[L, 4, H, W]`.
pub fn build_multi_input_clip<T: Scalar>(
    clip: &ClipSample,
    maps: &ProbabilityMaps<T>,
    stats: &ChannelStats,
    encoding: MaskEncoding,
) -> Result<Tensor<T>> {
    contract!(
        maps.sequence_id == clip.sequence_id,
        "masks belong to {} but the clip comes from {}",
        maps.sequence_id,
        clip.sequence_id
    );
    contract!(
        maps.frame_indices == clip.frame_indices,
        "mask frames {:?} do not match clip frames {:?}",
        maps.frame_indices,
        clip.frame_indices
    );
    let (h, w) = (clip.height(), clip.width());
    contract!(
        maps.maps.shape() == [clip.len(), h, w],
        "mask maps {:?} do not match a {}x{h}x{w} clip",
        maps.maps.shape(),
        clip.len()
    );
    let plane = h * w;
    let video: Vec<T> = stats.normalize(clip.frames(), plane);
    let mut out = Vec::with_capacity(clip.len() * (CHANNELS + 1) * plane);
    for t in 0..clip.len() {
        out.extend_from_slice(&video[t * CHANNELS * plane..(t + 1) * CHANNELS * plane]);
        let m = &maps.maps.data()[t * plane..(t + 1) * plane];
        match encoding {
            MaskEncoding::Probability => out.extend_from_slice(m),
            MaskEncoding::Binary => out.extend(m.iter().map(|&p| {
                if p.as_f64() >= 0.5 {
                    T::one()
                } else {
                    T::zero()
                }
            })),
        }
    }
    Ok(Tensor::from_vec(&[clip.len(), CHANNELS + 1, h, w], out))
}

/// Clips stacked along the frame axis.
pub fn stack_clips<T: Scalar>(clips: Vec<Tensor<T>>) -> Tensor<T> {
    let mut shape = clips[0].shape().to_vec();
    shape[0] = clips.iter().map(|c| c.shape()[0]).sum();
    let data = clips.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_vec(&shape, data)
}
