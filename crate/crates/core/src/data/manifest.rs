//! On-disk dataset layout.
//!
//! ```text
//! root/manifest.csv              id,split,num_frames,fps,ef,ed_index,es_index
//! root/frames/<id>/000000.png    RGB frames
//! root/masks/<id>/ed.png         8-bit masks, 0 or 255
//! root/masks/<id>/es.png
//! root/masks/<id>/000000.png     optional per-frame ground truth
//! root/stats.json                per-channel mean/std of the training split
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::sequence::{Dataset, EchoSequence, Mask, Split, CHANNELS};
use crate::error::{io_err, Error, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const STATS: &str = "stats.json";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    split: String,
    num_frames: usize,
    fps: f64,
    ef: Option<f64>,
    ed_index: Option<usize>,
    es_index: Option<usize>,
}

fn frame_path(root: &Path, id: &str, t: usize) -> PathBuf {
    root.join("frames").join(id).join(format!("{t:06}.png"))
}

fn mask_path(root: &Path, id: &str, name: &str) -> PathBuf {
    root.join("masks").join(id).join(format!("{name}.png"))
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn read_mask(path: &Path, id: &str) -> Result<Mask> {
    let img = image::open(path).map_err(image_err(path))?.into_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for &v in img.as_raw() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::Validation {
                    id: id.to_string(),
                    reason: format!(
                        "mask {} has pixel value {other}; expected 0 or 255",
                        path.display()
                    ),
                })
            }
        }
    }
    Mask::new(h as usize, w as usize, data)
}

fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.data().iter().map(|&v| v * 255).collect();
    let img: GrayImage = ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("mask buffer size");
    img.save(path).map_err(image_err(path))
}

/// Reads the dataset under `root`, validating label invariants.
pub fn load_manifest(root: &Path) -> Result<Dataset> {
    let manifest = root.join(MANIFEST);
    if !manifest.exists() {
        return Err(Error::Missing(format!(
            "no {MANIFEST} under {}",
            root.display()
        )));
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let mut sequences = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row?;
        let id = row.id.clone();
        let invalid = |reason: String| Error::Validation {
            id: id.clone(),
            reason,
        };
        let split = Split::parse(&row.split)
            .ok_or_else(|| invalid(format!("unknown split {:?}", row.split)))?;
        if row.num_frames == 0 {
            return Err(invalid("num_frames is zero".into()));
        }
        let mut frames = Vec::new();
        let (mut h, mut w) = (0, 0);
        for t in 0..row.num_frames {
            let path = frame_path(root, &id, t);
            let img = image::open(&path).map_err(image_err(&path))?.into_rgb8();
            let (fw, fh) = img.dimensions();
            if t == 0 {
                (h, w) = (fh as usize, fw as usize);
                frames.reserve(row.num_frames * CHANNELS * h * w);
            } else if (fh as usize, fw as usize) != (h, w) {
                return Err(invalid(format!("frame {t} is {fw}x{fh}, expected {w}x{h}")));
            }
            // HWC -> CHW
            let raw = img.as_raw();
            for c in 0..CHANNELS {
                frames.extend(raw.iter().skip(c).step_by(CHANNELS));
            }
        }
        let mut seq = EchoSequence::new(id.clone(), split, row.fps, h, w, frames)?;
        seq.ef = row.ef;
        seq.ed_index = row.ed_index;
        seq.es_index = row.es_index;
        let labeled = row.ef.is_some();
        for (name, slot) in [("ed", &mut seq.ed_mask), ("es", &mut seq.es_mask)] {
            let path = mask_path(root, &id, name);
            if path.exists() {
                *slot = Some(read_mask(&path, &id)?);
            } else if labeled {
                return Err(invalid(format!(
                    "labeled sequence is missing {}",
                    path.display()
                )));
            }
        }
        if mask_path(root, &id, &format!("{:06}", 0)).exists() {
            let masks = (0..row.num_frames)
                .map(|t| read_mask(&mask_path(root, &id, &format!("{t:06}")), &id))
                .collect::<Result<Vec<_>>>()?;
            seq.frame_masks = Some(masks);
        }
        seq.validate()?;
        sequences.push(seq);
    }
    Dataset::new(sequences)
}

/// Writes `dataset` in the layout [`load_manifest`] reads.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let manifest = root.join(MANIFEST);
    let mut writer = csv::Writer::from_path(&manifest)?;
    for seq in &dataset.sequences {
        writer.serialize(Row {
            id: seq.id.clone(),
            split: seq.split.as_str().to_string(),
            num_frames: seq.num_frames(),
            fps: seq.fps,
            ef: seq.ef,
            ed_index: seq.ed_index,
            es_index: seq.es_index,
        })?;
        let fdir = root.join("frames").join(&seq.id);
        fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
        let (h, w) = (seq.height(), seq.width());
        for t in 0..seq.num_frames() {
            let chw = seq.frame(t);
            let mut hwc = Vec::with_capacity(chw.len());
            for i in 0..h * w {
                for c in 0..CHANNELS {
                    hwc.push(chw[c * h * w + i]);
                }
            }
            let img: ImageBuffer<Rgb<u8>, _> =
                RgbImage::from_raw(w as u32, h as u32, hwc).expect("frame buffer size");
            let path = frame_path(root, &seq.id, t);
            img.save(&path).map_err(image_err(&path))?;
        }
        let mdir = root.join("masks").join(&seq.id);
        let any_mask = seq.ed_mask.is_some() || seq.es_mask.is_some() || seq.frame_masks.is_some();
        if any_mask {
            fs::create_dir_all(&mdir).map_err(io_err(&mdir))?;
        }
        if let Some(m) = &seq.ed_mask {
            write_mask(&mask_path(root, &seq.id, "ed"), m)?;
        }
        if let Some(m) = &seq.es_mask {
            write_mask(&mask_path(root, &seq.id, "es"), m)?;
        }
        for (t, m) in seq.frame_masks.iter().flatten().enumerate() {
            write_mask(&mask_path(root, &seq.id, &format!("{t:06}")), m)?;
        }
    }
    writer.flush().map_err(io_err(&manifest))?;
    Ok(())
}

/// Per-channel intensity statistics on the 0-255 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [127.5; CHANNELS],
            std: [127.5; CHANNELS],
        }
    }
}

impl ChannelStats {
    /// Mean and standard deviation over every frame of the given sequences.
    pub fn compute(dataset: &Dataset, indices: &[usize]) -> Self {
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let mut count = 0usize;
        for &i in indices {
            let seq = dataset.get(i);
            let plane = seq.height() * seq.width();
            for t in 0..seq.num_frames() {
                let f = seq.frame(t);
                for c in 0..CHANNELS {
                    for &v in &f[c * plane..(c + 1) * plane] {
                        let v = v as f64;
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                count += plane;
            }
        }
        if count == 0 {
            return Self::default();
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
        }
        Self { mean, std }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Normalizes `[n, 3, H, W]` bytes.
    pub fn normalize<T: crate::scalar::Scalar>(&self, frames: &[u8], plane: usize) -> Vec<T> {
        let inv = self.std.map(|s| 1.0 / s);
        frames
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % CHANNELS;
                T::lit((v as f64 - self.mean[c]) * inv[c])
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticParams};

    fn tiny() -> Dataset {
        let p = SyntheticParams {
            height: 16,
            width: 16,
            period: (4, 4),
            cycles: 2.0,
            ..Default::default()
        };
        generate_synthetic(2, &p, 4).unwrap()
    }

    #[test]
    fn round_trip_preserves_frames_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        // second sequence unlabeled
        let s = &mut ds.sequences[1];
        s.ef = None;
        s.ed_index = None;
        s.es_index = None;
        s.ed_mask = None;
        s.es_mask = None;
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        let (a, b) = (&ds.sequences[0], &back.sequences[0]);
        assert_eq!(a.frames(), b.frames());
        assert_eq!(a.ef, b.ef);
        assert_eq!(a.ed_mask, b.ed_mask);
        assert_eq!(a.frame_masks, b.frame_masks);
        assert!(!back.sequences[1].is_labeled());
    }

    #[test]
    fn labeled_row_without_es_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tiny()).unwrap();
        fs::remove_file(mask_path(dir.path(), "synth00001", "es")).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(
            matches!(err, Error::Validation { ref id, .. } if id == "synth00001"),
            "{err}"
        );
    }

    #[test]
    fn stats_of_constant_frames() {
        let seq = EchoSequence::new("c", Split::Train, 50.0, 2, 2, vec![10; 24]).unwrap();
        let ds = Dataset::new(vec![seq]).unwrap();
        let st = ChannelStats::compute(&ds, &[0]);
        assert_eq!(st.mean, [10.0; 3]);
        let v: Vec<f64> = st.normalize(&[10, 10, 10, 10], 4);
        assert!(v.iter().all(|x| x.abs() < 1e-12));
    }
}
