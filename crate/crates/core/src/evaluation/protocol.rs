use rand::Rng;

use crate::data::manifest::ChannelStats;
use crate::data::sequence::{Dataset, EchoSequence, Mask};
use crate::error::{contract, Result};
use crate::evaluation::metrics::{mae, r_squared, MetricReport};
use crate::regression::EfPrediction;
use crate::scalar::Scalar;
use crate::segmentation::{dice, predict_probabilities, SegmentationModel};

/// One frame index drawn uniformly from the frames that are neither ED nor ES.
pub fn unlabeled_frame<R: Rng + ?Sized>(seq: &EchoSequence, rng: &mut R) -> Option<usize> {
    let candidates: Vec<usize> = (0..seq.num_frames())
        .filter(|&t| Some(t) != seq.ed_index && Some(t) != seq.es_index)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())])
}

fn frame_dice<T: Scalar>(
    model: &SegmentationModel<T>,
    seq: &EchoSequence,
    t: usize,
    label: &Mask,
    stats: &ChannelStats,
) -> Result<f64> {
    let (h, w) = (seq.height(), seq.width());
    let probs = predict_probabilities(model, seq.frame(t), h, w, stats);
    let pred: Vec<u8> = probs
        .data()
        .iter()
        .map(|p| u8::from(p.as_f64() >= 0.5))
        .collect();
    dice(&pred, label.data())
}

/// Dice on the ED and ES frames and on one seeded non-ED/ES frame per
/// sequence. Sequences without per-frame masks only contribute ED/ES scores.
pub fn segmentation_report<T: Scalar>(
    name: impl Into<String>,
    model: &SegmentationModel<T>,
    dataset: &Dataset,
    indices: &[usize],
    stats: &ChannelStats,
    seed: u64,
) -> Result<MetricReport> {
    contract!(!indices.is_empty(), "no sequences to evaluate");
    let mut rng = crate::rng::stream(seed, crate::rng::EVAL_FRAMES);
    let (mut ed, mut es, mut un) = (Vec::new(), Vec::new(), Vec::new());
    for &i in indices {
        let seq = dataset.get(i);
        if let (Some(t), Some(m)) = (seq.ed_index, &seq.ed_mask) {
            ed.push(frame_dice(model, seq, t, m, stats)?);
        }
        if let (Some(t), Some(m)) = (seq.es_index, &seq.es_mask) {
            es.push(frame_dice(model, seq, t, m, stats)?);
        }
        if let Some(masks) = &seq.frame_masks {
            if let Some(t) = unlabeled_frame(seq, &mut rng) {
                un.push(frame_dice(model, seq, t, &masks[t], stats)?);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let report = MetricReport {
        name: name.into(),
        dice_ed: mean(&ed),
        dice_es: mean(&es),
        dice_unlabeled: mean(&un),
        n: indices.len(),
        seeds: vec![seed],
        ..Default::default()
    };
    report.validate()?;
    Ok(report)
}

/// MAE and R² of EF predictions against the dataset labels.
pub fn ef_report(
    name: impl Into<String>,
    dataset: &Dataset,
    preds: &[EfPrediction],
    seed: u64,
) -> Result<MetricReport> {
    let mut p = Vec::with_capacity(preds.len());
    let mut l = Vec::with_capacity(preds.len());
    for pred in preds {
        let idx = dataset.position(&pred.sequence_id);
        let label = idx.and_then(|i| dataset.get(i).ef);
        contract!(
            label.is_some(),
            "sequence {} has no EF label",
            pred.sequence_id
        );
        p.push(pred.value);
        l.extend(label);
    }
    let report = MetricReport {
        name: name.into(),
        mae: Some(mae(&p, &l)?),
        r2: Some(r_squared(&p, &l)?),
        n: preds.len(),
        seeds: vec![seed],
        ..Default::default()
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sequence::Split;
    use crate::regression::PredictionSource;

    #[test]
    fn unlabeled_frame_avoids_ed_and_es() {
        let mut seq = EchoSequence::new("a", Split::Test, 50.0, 2, 2, vec![0; 4 * 12]).unwrap();
        seq.ed_index = Some(0);
        seq.es_index = Some(2);
        let mut rng = crate::rng::stream(0, 0);
        let mut seen = [false; 4];
        for _ in 0..200 {
            seen[unlabeled_frame(&seq, &mut rng).unwrap()] = true;
        }
        assert_eq!(seen, [false, true, false, true]);
    }

    #[test]
    fn ef_report_matches_metrics() {
        let mk =
            |id: &str| EchoSequence::new(id, Split::Test, 50.0, 2, 2, vec![0; 2 * 12]).unwrap();
        let mut ds = Dataset::new(vec![mk("a"), mk("b")]).unwrap();
        ds.sequences[0].ef = Some(50.0);
        ds.sequences[1].ef = Some(60.0);
        let pred = |id: &str, v: f64| EfPrediction {
            value: v,
            sequence_id: id.into(),
            source: PredictionSource::Student,
            clamped: false,
        };
        let r = ef_report("x", &ds, &[pred("a", 55.0), pred("b", 65.0)], 1).unwrap();
        assert_eq!(r.mae, Some(5.0));
        assert_eq!(r.r2, Some(0.0));
        assert!(ef_report("x", &ds, &[pred("zz", 1.0)], 1).is_err());
    }
}
