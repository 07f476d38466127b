use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::ChannelStats;
use crate::data::sampler::{clip_at, ClipPlan, ClipSample, ClipSpec};
use crate::data::sequence::Dataset;
use crate::error::{contract, Error, Result};
use crate::regression::input::{
    build_multi_input_clip, stack_clips, video_clip, MaskBank, MaskEncoding,
};
use crate::regression::model::RegressionModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionSource {
    Teacher,
    Student,
    Label,
}

impl fmt::Display for PredictionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionSource::Teacher => "teacher",
            PredictionSource::Student => "student",
            PredictionSource::Label => "label",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfPrediction {
    /// EF in percent.
    pub value: f64,
    pub sequence_id: String,
    pub source: PredictionSource,
    /// Whether the raw output fell outside `[0, 100]` and was clamped.
    pub clamped: bool,
}

/// Which clips of a test video are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "clips")]
pub enum ClipSelection {
    /// One clip starting at frame 0.
    #[default]
    First,
    /// Mean over this many evenly spaced clip starts.
    Spread(usize),
}

/// Network input for one clip: video only, or video plus mask channel.
pub fn clip_input<T: Scalar>(
    model_channels: usize,
    clip: &ClipSample,
    bank: Option<&MaskBank>,
    stats: &ChannelStats,
    encoding: MaskEncoding,
) -> Result<Tensor<T>> {
    if model_channels == 3 {
        return Ok(video_clip(clip, stats));
    }
    let bank =
        bank.ok_or_else(|| Error::Missing("the mask-channel model needs inferred masks".into()))?;
    let maps = bank.for_clip(clip)?;
    build_multi_input_clip(clip, &maps, stats, encoding)
}

/// Stacked inputs for a batch of clips.
pub fn batch_input<T: Scalar>(
    model_channels: usize,
    clips: &[ClipSample],
    bank: Option<&MaskBank>,
    stats: &ChannelStats,
    encoding: MaskEncoding,
) -> Result<Tensor<T>> {
    contract!(!clips.is_empty(), "empty clip batch");
    let parts = clips
        .iter()
        .map(|c| clip_input(model_channels, c, bank, stats, encoding))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_clips(parts))
}

/// Frozen-teacher predictions used as regression targets (never clamped).
pub fn pseudo_labels<T: Scalar>(
    teacher: &RegressionModel<T>,
    clips: &[ClipSample],
    bank: &MaskBank,
    stats: &ChannelStats,
    encoding: MaskEncoding,
) -> Result<Vec<EfPrediction>> {
    let x = batch_input(teacher.input_channels(), clips, Some(bank), stats, encoding)?;
    let values = teacher.predict(x, clips.len())?;
    Ok(clips
        .iter()
        .zip(values)
        .map(|(c, value)| EfPrediction {
            value,
            sequence_id: c.sequence_id.clone(),
            source: PredictionSource::Teacher,
            clamped: false,
        })
        .collect())
}

pub fn pseudo_label<T: Scalar>(
    teacher: &RegressionModel<T>,
    clip: &ClipSample,
    bank: &MaskBank,
    stats: &ChannelStats,
    encoding: MaskEncoding,
) -> Result<EfPrediction> {
    Ok(pseudo_labels(teacher, std::slice::from_ref(clip), bank, stats, encoding)?.remove(0))
}

fn evaluation_starts(plan: &ClipPlan, length: usize, selection: ClipSelection) -> Vec<usize> {
    let starts = plan.starts(length);
    match selection {
        ClipSelection::First => vec![0],
        ClipSelection::Spread(n) => {
            let n = n.clamp(1, starts);
            if n == 1 {
                return vec![0];
            }
            (0..n).map(|k| k * (starts - 1) / (n - 1)).collect()
        }
    }
}

/// EF for one sequence, clamped to `[0, 100]`.
#[allow(clippy::too_many_arguments)]
pub fn predict_ef<T: Scalar>(
    model: &RegressionModel<T>,
    dataset: &Dataset,
    sequence: usize,
    spec: ClipSpec,
    stats: &ChannelStats,
    bank: Option<&MaskBank>,
    encoding: MaskEncoding,
    selection: ClipSelection,
    source: PredictionSource,
) -> Result<EfPrediction> {
    let seq = dataset.get(sequence);
    let plan = ClipPlan::new(seq.num_frames(), spec)?;
    let clips = evaluation_starts(&plan, spec.length, selection)
        .into_iter()
        .map(|s| clip_at(seq, sequence, spec, s))
        .collect::<Result<Vec<_>>>()?;
    let x = batch_input(model.input_channels(), &clips, bank, stats, encoding)?;
    let raw = model.predict(x, clips.len())?;
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite EF prediction for {}",
            seq.id
        )));
    }
    let value = mean.clamp(0.0, 100.0);
    Ok(EfPrediction {
        value,
        sequence_id: seq.id.clone(),
        source,
        clamped: value != mean,
    })
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    prediction: f64,
    label: Option<f64>,
    source: PredictionSource,
}

/// Writes `id,prediction,label,source`.
pub fn write_predictions(path: &Path, dataset: &Dataset, preds: &[EfPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in preds {
        let label = dataset
            .position(&p.sequence_id)
            .and_then(|i| dataset.get(i).ef);
        w.serialize(PredictionRow {
            id: &p.sequence_id,
            prediction: p.value,
            label,
            source: p.source,
        })?;
    }
    w.flush().map_err(crate::error::io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticParams};
    use crate::regression::model::RegModelConfig;

    fn setup() -> (Dataset, RegressionModel<f32>) {
        let p = SyntheticParams {
            height: 16,
            width: 16,
            period: (20, 24),
            cycles: 2.0,
            ..Default::default()
        };
        let ds = generate_synthetic(2, &p, 0).unwrap();
        let m =
            RegressionModel::new(RegModelConfig::desk(3), &mut crate::rng::stream(0, 0)).unwrap();
        (ds, m)
    }

    #[test]
    fn deterministic_and_clamped() {
        let (ds, m) = setup();
        let stats = ChannelStats::default();
        let run = |sel| {
            predict_ef(
                &m,
                &ds,
                0,
                ClipSpec::REGRESSION,
                &stats,
                None,
                MaskEncoding::Probability,
                sel,
                PredictionSource::Student,
            )
            .unwrap()
        };
        let a = run(ClipSelection::First);
        assert_eq!(a, run(ClipSelection::First));
        assert!((0.0..=100.0).contains(&a.value));
        let spread = run(ClipSelection::Spread(3));
        assert!(spread.value.is_finite());
    }

    #[test]
    fn mask_model_without_masks_is_missing() {
        let (ds, _) = setup();
        let m4 =
            RegressionModel::<f32>::new(RegModelConfig::desk(4), &mut crate::rng::stream(0, 0))
                .unwrap();
        let err = predict_ef(
            &m4,
            &ds,
            0,
            ClipSpec::REGRESSION,
            &ChannelStats::default(),
            None,
            MaskEncoding::Probability,
            ClipSelection::First,
            PredictionSource::Teacher,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Missing(_)));
    }

    #[test]
    fn evenly_spaced_starts() {
        let plan = ClipPlan::new(
            100,
            ClipSpec {
                length: 10,
                stride: 1,
            },
        )
        .unwrap();
        assert_eq!(
            evaluation_starts(&plan, 10, ClipSelection::Spread(4)),
            vec![0, 30, 60, 90]
        );
        assert_eq!(evaluation_starts(&plan, 10, ClipSelection::First), vec![0]);
    }
}
