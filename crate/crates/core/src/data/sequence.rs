use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Binary mask with pixels in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Contract(format!(
                "mask of {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!(
                "mask pixel value {v} is not binary"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.data
            .iter()
            .map(|&v| if v == 1 { T::one() } else { T::zero() })
            .collect()
    }
}

/// One echocardiogram-like video with optional EF / ED / ES labels.
#[derive(Clone, Debug)]
pub struct EchoSequence {
    pub id: String,
    pub split: Split,
    pub fps: f64,
    height: usize,
    width: usize,
    /// `[T, 3, H, W]` 8-bit intensities.
    frames: Vec<u8>,
    pub ef: Option<f64>,
    pub ed_index: Option<usize>,
    pub es_index: Option<usize>,
    pub ed_mask: Option<Mask>,
    pub es_mask: Option<Mask>,
    /// Ground-truth mask for every frame (synthetic data only).
    pub frame_masks: Option<Vec<Mask>>,
}

impl EchoSequence {
    pub fn new(
        id: impl Into<String>,
        split: Split,
        fps: f64,
        height: usize,
        width: usize,
        frames: Vec<u8>,
    ) -> Result<Self> {
        let id = id.into();
        let frame_size = CHANNELS * height * width;
        if frame_size == 0 || frames.is_empty() || !frames.len().is_multiple_of(frame_size) {
            return Err(Error::Validation {
                id,
                reason: format!(
                    "{} bytes is not a whole number of {height}x{width} RGB frames",
                    frames.len()
                ),
            });
        }
        Ok(Self {
            id,
            split,
            fps,
            height,
            width,
            frames,
            ef: None,
            ed_index: None,
            es_index: None,
            ed_mask: None,
            es_mask: None,
            frame_masks: None,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.frame_size()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_size(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_size();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn frames(&self) -> &[u8] {
        &self.frames
    }

    pub fn is_labeled(&self) -> bool {
        self.ef.is_some()
    }

    /// Checks the label invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                reason,
            })
        };
        let t = self.num_frames();
        if let Some(ef) = self.ef {
            if !(0.0..=100.0).contains(&ef) {
                return fail(format!("EF {ef} outside [0, 100]"));
            }
            if self.ed_mask.is_none() || self.es_mask.is_none() {
                return fail("labeled sequence is missing its ED or ES mask".into());
            }
            if self.ed_index.is_none() || self.es_index.is_none() {
                return fail("labeled sequence is missing its ED or ES frame index".into());
            }
        }
        if let (Some(ed), Some(es)) = (self.ed_index, self.es_index) {
            if ed == es {
                return fail(format!("ED and ES share frame {ed}"));
            }
        }
        for idx in [self.ed_index, self.es_index].into_iter().flatten() {
            if idx >= t {
                return fail(format!("label frame {idx} outside {t} frames"));
            }
        }
        let masks = self
            .ed_mask
            .iter()
            .chain(&self.es_mask)
            .chain(self.frame_masks.iter().flatten());
        for m in masks {
            if m.height() != self.height || m.width() != self.width {
                return fail(format!(
                    "mask {}x{} does not match frames {}x{}",
                    m.height(),
                    m.width(),
                    self.height,
                    self.width
                ));
            }
        }
        if let Some(fm) = &self.frame_masks {
            if fm.len() != t {
                return fail(format!("{} per-frame masks for {t} frames", fm.len()));
            }
        }
        Ok(())
    }
}

/// Immutable collection of sequences.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub sequences: Vec<EchoSequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<EchoSequence>) -> Result<Self> {
        for s in &sequences {
            s.validate()?;
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, i: usize) -> &EchoSequence {
        &self.sequences[i]
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.sequences.len())
            .filter(|&i| self.sequences[i].split == split)
            .collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.sequences.iter().position(|s| s.id == id)
    }
}
