use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::ChannelStats;
use crate::data::sampler::{sample_clip, ClipSample, ClipSpec, EpochSampler};
use crate::data::sequence::{Dataset, Split};
use crate::data::split::DatasetSplit;
use crate::error::{contract, Error, Result};
use crate::nn::{Graph, Optimizer, OptimizerConfig, ParamGrads, Var};
use crate::regression::input::{MaskBank, MaskEncoding};
use crate::regression::model::RegressionModel;
use crate::regression::predict::{batch_input, pseudo_labels};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegTrainConfig {
    pub epochs: usize,
    /// Labeled clips per iteration.
    pub batch: usize,
    /// Unlabeled clips per iteration (distillation only).
    pub unlabeled_batch: usize,
    pub clip: ClipSpec,
    pub optimizer: OptimizerConfig,
    /// Weight of the pseudo-label term.
    pub w_ulb: f64,
    pub mask_encoding: MaskEncoding,
    /// Standardize the pooled features on labeled clips before the first step.
    pub calibrate: bool,
    pub seed: u64,
    /// Overrides the default of `ceil(labeled / batch)` iterations per epoch.
    pub iterations_per_epoch: Option<usize>,
}

impl RegTrainConfig {
    pub fn paper(seed: u64) -> Self {
        Self {
            epochs: 25,
            batch: 20,
            unlabeled_batch: 10,
            clip: ClipSpec::REGRESSION,
            optimizer: OptimizerConfig::sgd(1e-4, 0.9),
            w_ulb: 5.0,
            mask_encoding: MaskEncoding::Probability,
            calibrate: false,
            seed,
            iterations_per_epoch: None,
        }
    }

    /// Small synthetic runs: 200 single-batch epochs with Adam.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 200,
            batch: 10,
            unlabeled_batch: 5,
            optimizer: OptimizerConfig::adam(1e-3),
            calibrate: true,
            iterations_per_epoch: Some(1),
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.batch > 0, "batch must be positive");
        contract!(
            self.w_ulb >= 0.0 && self.w_ulb.is_finite(),
            "w_ulb must be a non-negative number"
        );
        contract!(
            self.w_ulb == 0.0 || self.unlabeled_batch > 0,
            "pseudo-label weight set with no unlabeled clips"
        );
        Ok(())
    }
}

/// One iteration of regression training; `total = labeled + w_ulb * unlabeled`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub labeled: f64,
    /// `None` when no unlabeled term was computed.
    pub unlabeled: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegressionLog {
    pub records: Vec<RegressionRecord>,
    pub w_ulb: f64,
    /// Positions of the sampling streams after the last iteration.
    pub rng: Vec<rng::StreamState>,
}

impl RegressionLog {
    /// Writes `epoch,iteration,labeled,unlabeled,total`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(crate::error::io_err(path))?;
        Ok(())
    }
}

/// Combined distillation objective.
pub fn distillation_total(labeled: f64, unlabeled: Option<f64>, w_ulb: f64) -> f64 {
    match unlabeled {
        Some(u) => labeled + w_ulb * u,
        None => labeled,
    }
}

fn draw_clips(
    dataset: &Dataset,
    sampler: &mut EpochSampler,
    n: usize,
    spec: ClipSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClipSample>> {
    sampler
        .next_batch(n, rng)
        .into_iter()
        .map(|i| sample_clip(dataset.get(i), i, spec, rng))
        .collect()
}

fn labels_of<T: Scalar>(dataset: &Dataset, clips: &[ClipSample]) -> Result<Vec<T>> {
    clips
        .iter()
        .map(|c| {
            let seq = dataset.get(c.sequence);
            seq.ef.map(T::lit).ok_or_else(|| Error::Validation {
                id: seq.id.clone(),
                reason: "labeled clip without an EF label".into(),
            })
        })
        .collect()
}

/// MSE node of `model` on `clips` against `targets`.
#[allow(clippy::too_many_arguments)]
fn mse_term<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &RegressionModel<T>,
    clips: &[ClipSample],
    targets: &[T],
    bank: Option<&MaskBank>,
    stats: &ChannelStats,
    encoding: MaskEncoding,
) -> Result<Var> {
    let x = batch_input(model.input_channels(), clips, bank, stats, encoding)?;
    let xv = g.input(x);
    let pred = model.forward(g, xv, clips.len())?;
    Ok(g.mse(pred, targets))
}

fn check<T: Scalar>(grads: &ParamGrads<T>, iteration: usize, total: f64) -> Result<()> {
    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!("loss {total}; gradient finite: {}", grads.is_finite()),
        });
    }
    Ok(())
}

/// Most labeled clips used for calibration.
const CALIBRATION_CLIPS: usize = 64;

fn calibrate<T: Scalar>(
    model: &mut RegressionModel<T>,
    dataset: &Dataset,
    split: &DatasetSplit,
    stats: &ChannelStats,
    bank: Option<&MaskBank>,
    cfg: &RegTrainConfig,
) -> Result<()> {
    let mut rng = rng::stream(cfg.seed, rng::CALIBRATION);
    let mut pool = split.labeled.clone();
    pool.shuffle(&mut rng);
    pool.truncate(CALIBRATION_CLIPS);
    if pool.len() < 2 {
        warn!("fewer than two labeled sequences; skipping feature calibration");
        return Ok(());
    }
    let clips = pool
        .iter()
        .map(|&i| sample_clip(dataset.get(i), i, cfg.clip, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let x = batch_input(
        model.input_channels(),
        &clips,
        bank,
        stats,
        cfg.mask_encoding,
    )?;
    model.calibrate(x, clips.len())
}

struct Teacher<'a, T> {
    model: &'a RegressionModel<T>,
    bank: &'a MaskBank,
}

#[allow(clippy::too_many_arguments)]
fn run<T: Scalar>(
    model: &mut RegressionModel<T>,
    dataset: &Dataset,
    split: &DatasetSplit,
    stats: &ChannelStats,
    bank: Option<&MaskBank>,
    teacher: Option<Teacher<'_, T>>,
    cfg: &RegTrainConfig,
    name: &str,
) -> Result<RegressionLog> {
    cfg.validate()?;
    let mut sampler = EpochSampler::new(split.labeled.clone())?;
    let mut lb_rng = rng::stream(cfg.seed, rng::LABELED_CLIPS);
    let use_unlabeled = teacher.is_some() && cfg.w_ulb > 0.0;
    let mut ulb = if use_unlabeled {
        Some((
            EpochSampler::new(split.unlabeled.clone())?,
            rng::stream(cfg.seed, rng::UNLABELED_CLIPS),
        ))
    } else {
        None
    };
    if cfg.calibrate {
        calibrate(model, dataset, split, stats, bank, cfg)?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let per_epoch = cfg
        .iterations_per_epoch
        .unwrap_or_else(|| split.labeled.len().div_ceil(cfg.batch));
    let mut log = RegressionLog {
        records: Vec::with_capacity(cfg.epochs * per_epoch),
        w_ulb: if use_unlabeled { cfg.w_ulb } else { 0.0 },
        rng: Vec::new(),
    };
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..per_epoch {
            let clips = draw_clips(dataset, &mut sampler, cfg.batch, cfg.clip, &mut lb_rng)?;
            let targets = labels_of::<T>(dataset, &clips)?;
            let unlabeled = match (&mut ulb, &teacher) {
                (Some((s, r)), Some(t)) => {
                    let clips = draw_clips(dataset, s, cfg.unlabeled_batch, cfg.clip, r)?;
                    let pseudo = pseudo_labels(t.model, &clips, t.bank, stats, cfg.mask_encoding)?;
                    let targets: Vec<T> = pseudo.iter().map(|p| T::lit(p.value)).collect();
                    Some((clips, targets))
                }
                _ => None,
            };
            let (record, grads) = {
                let mut g = Graph::new(model.params());
                let lb = mse_term(
                    &mut g,
                    model,
                    &clips,
                    &targets,
                    bank,
                    stats,
                    cfg.mask_encoding,
                )?;
                let lb_value = g.value(lb).item().as_f64();
                let (root, ulb_value) = match &unlabeled {
                    Some((uclips, utargets)) => {
                        let u = mse_term(
                            &mut g,
                            model,
                            uclips,
                            utargets,
                            bank,
                            stats,
                            cfg.mask_encoding,
                        )?;
                        let value = g.value(u).item().as_f64();
                        let weighted = g.scale(u, T::lit(cfg.w_ulb));
                        (g.add(lb, weighted), Some(value))
                    }
                    None => (lb, None),
                };
                let record = RegressionRecord {
                    epoch,
                    iteration,
                    labeled: lb_value,
                    unlabeled: ulb_value,
                    total: distillation_total(lb_value, ulb_value, cfg.w_ulb),
                };
                (record, g.backward(root).into_params())
            };
            check(&grads, iteration, record.total)?;
            opt.step(model.params_mut(), &grads);
            debug!("{name} iter {iteration}: {record:?}");
            log.records.push(record);
            iteration += 1;
        }
        if let Some(last) = log.records.last() {
            info!(
                "{name} epoch {}/{}: total {:.4}",
                epoch + 1,
                cfg.epochs,
                last.total
            );
        }
    }
    log.rng.push(rng::StreamState::capture(cfg.seed, &lb_rng));
    if let Some((_, r)) = &ulb {
        log.rng.push(rng::StreamState::capture(cfg.seed, r));
    }
    Ok(log)
}

/// Labeled-only MSE training; `bank` is required for a mask-channel model.
pub fn train_regressor<T: Scalar>(
    model: &mut RegressionModel<T>,
    dataset: &Dataset,
    split: &DatasetSplit,
    stats: &ChannelStats,
    bank: Option<&MaskBank>,
    cfg: &RegTrainConfig,
) -> Result<RegressionLog> {
    run(model, dataset, split, stats, bank, None, cfg, "regression")
}

/// Trains the mask-channel teacher on labeled clips.
pub fn train_multi_input<T: Scalar>(
    model: &mut RegressionModel<T>,
    dataset: &Dataset,
    split: &DatasetSplit,
    stats: &ChannelStats,
    bank: &MaskBank,
    cfg: &RegTrainConfig,
) -> Result<RegressionLog> {
    contract!(
        model.input_channels() == 4,
        "the multi-input model needs 4 channels, got {}",
        model.input_channels()
    );
    run(
        model,
        dataset,
        split,
        stats,
        Some(bank),
        None,
        cfg,
        "multi-input",
    )
}

/// Trains the video-only student on labels plus frozen-teacher pseudo-labels:
/// `L = L_lb + w_ulb * L_ulb`.
#[allow(clippy::too_many_arguments)]
pub fn train_distilled<T: Scalar>(
    student: &mut RegressionModel<T>,
    teacher: &RegressionModel<T>,
    dataset: &Dataset,
    split: &DatasetSplit,
    stats: &ChannelStats,
    bank: &MaskBank,
    cfg: &RegTrainConfig,
) -> Result<RegressionLog> {
    contract!(
        student.input_channels() == 3,
        "the student takes video only, got {} channels",
        student.input_channels()
    );
    contract!(
        teacher.input_channels() == 4,
        "the teacher needs the mask channel, got {} channels",
        teacher.input_channels()
    );
    if cfg.w_ulb > 0.0 {
        contract!(
            !split.unlabeled.is_empty(),
            "distillation needs unlabeled sequences"
        );
        if let Some(&i) = split.unlabeled.iter().find(|&&i| !bank.contains(i)) {
            return Err(Error::Missing(format!(
                "no inferred masks for unlabeled {}",
                dataset.get(i).id
            )));
        }
    }
    let t = Teacher {
        model: teacher,
        bank,
    };
    run(
        student,
        dataset,
        split,
        stats,
        None,
        Some(t),
        cfg,
        "distillation",
    )
}

/// Indices of sequences in a split, for building mask banks.
pub fn bank_indices(dataset: &Dataset, split: &DatasetSplit) -> Vec<usize> {
    let mut v = split.all();
    v.extend(dataset.indices_in(Split::Test));
    v.extend(dataset.indices_in(Split::Val));
    v.sort_unstable();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::{split_labels, Fraction};
    use crate::data::synthetic::{generate_synthetic, SyntheticParams};
    use crate::regression::model::RegModelConfig;

    fn data() -> (Dataset, DatasetSplit, MaskBank) {
        let p = SyntheticParams {
            height: 16,
            width: 16,
            period: (20, 24),
            cycles: 2.0,
            ..Default::default()
        };
        let ds = generate_synthetic(6, &p, 2).unwrap();
        let split = split_labels(&ds, Fraction::new(1, 2).unwrap(), 1).unwrap();
        // ground-truth masks as probabilities
        let maps = (0..ds.len())
            .map(|i| {
                let fm = ds.get(i).frame_masks.as_ref().unwrap();
                (
                    i,
                    fm.iter()
                        .flat_map(|m| m.data().iter().map(|&v| v as f32))
                        .collect(),
                )
            })
            .collect();
        let bank = MaskBank::from_maps(&ds, maps).unwrap();
        (ds, split, bank)
    }

    fn cfg(w_ulb: f64) -> RegTrainConfig {
        RegTrainConfig {
            epochs: 2,
            batch: 2,
            unlabeled_batch: 2,
            optimizer: OptimizerConfig::sgd(1e-4, 0.9),
            w_ulb,
            iterations_per_epoch: Some(2),
            ..RegTrainConfig::paper(3)
        }
    }

    fn model(c: usize) -> RegressionModel<f32> {
        RegressionModel::new(RegModelConfig::desk(c), &mut rng::stream(4, rng::INIT)).unwrap()
    }

    #[test]
    fn distillation_arithmetic() {
        assert_eq!(distillation_total(16.0, Some(4.0), 5.0), 36.0);
        assert_eq!(distillation_total(16.0, None, 5.0), 16.0);
    }

    #[test]
    fn teacher_is_frozen_and_log_decomposes() {
        let (ds, split, bank) = data();
        let stats = ChannelStats::default();
        let mut teacher = model(4);
        train_multi_input(&mut teacher, &ds, &split, &stats, &bank, &cfg(0.0)).unwrap();
        let before = teacher.params().clone();
        let mut student = model(3);
        let log = train_distilled(
            &mut student,
            &teacher,
            &ds,
            &split,
            &stats,
            &bank,
            &cfg(5.0),
        )
        .unwrap();
        assert_eq!(teacher.params(), &before);
        assert_eq!(log.records.len(), 4);
        for r in &log.records {
            assert_eq!(r.total, r.labeled + 5.0 * r.unlabeled.unwrap());
        }
    }

    #[test]
    fn zero_weight_matches_labeled_only_training() {
        let (ds, split, bank) = data();
        let stats = ChannelStats::default();
        let teacher = model(4);
        let mut a = model(3);
        let la = train_distilled(&mut a, &teacher, &ds, &split, &stats, &bank, &cfg(0.0)).unwrap();
        let mut b = model(3);
        let lb = train_regressor(&mut b, &ds, &split, &stats, None, &cfg(0.0)).unwrap();
        assert_eq!(la.records, lb.records);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn wrong_channel_roles_are_rejected() {
        let (ds, split, bank) = data();
        let stats = ChannelStats::default();
        let mut m3 = model(3);
        assert!(train_multi_input(&mut m3, &ds, &split, &stats, &bank, &cfg(0.0)).is_err());
        let t = model(3);
        assert!(train_distilled(&mut m3, &t, &ds, &split, &stats, &bank, &cfg(5.0)).is_err());
    }
}
