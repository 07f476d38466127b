use std::path::Path;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::css::{css_loss, CssConfig, EmbeddingSequence, RegionPartition};
use crate::data::manifest::ChannelStats;
use crate::data::sampler::{
    sample_clip, sample_labeled_frames, ClipSample, ClipSpec, EpochSampler, LabeledPair,
};
use crate::data::sequence::{Dataset, CHANNELS};
use crate::data::split::DatasetSplit;
use crate::error::{contract, Error, Result};
use crate::nn::{Graph, Optimizer, OptimizerConfig, ParamGrads, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::segmentation::model::SegmentationModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    /// Labeled sequences per iteration; each contributes its ED and ES frame.
    pub batch: usize,
    /// CSS clips per iteration.
    pub css_clips: usize,
    pub css_clip: ClipSpec,
    pub partition: RegionPartition,
    pub css: CssConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Overrides the default of `ceil(labeled / batch)` iterations per epoch.
    pub iterations_per_epoch: Option<usize>,
}

impl SegTrainConfig {
    pub fn paper(seed: u64) -> Self {
        Self {
            epochs: 25,
            batch: 20,
            css_clips: 1,
            css_clip: ClipSpec::CSS,
            partition: RegionPartition::default(),
            css: CssConfig::default(),
            optimizer: OptimizerConfig::sgd(1e-5, 0.9),
            seed,
            iterations_per_epoch: None,
        }
    }

    /// Small synthetic runs: 300 single-batch epochs with a larger step.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 300,
            batch: 5,
            optimizer: OptimizerConfig::sgd(0.01, 0.9),
            iterations_per_epoch: Some(1),
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.batch > 0, "batch must be positive");
        contract!(
            self.w_css_enabled() || self.css.w_css == 0.0,
            "w_css must be non-negative"
        );
        contract!(self.css.w_css.is_finite(), "w_css must be finite");
        if self.w_css_enabled() {
            self.css.validate(&self.partition)?;
            contract!(
                self.css_clips > 0,
                "CSS enabled with zero clips per iteration"
            );
            contract!(
                self.css_clip.length == self.partition.clip_len(),
                "CSS clip length {} differs from the partition's {} frames",
                self.css_clip.length,
                self.partition.clip_len()
            );
        }
        Ok(())
    }

    fn w_css_enabled(&self) -> bool {
        self.css.w_css > 0.0
    }
}

/// Terms of the joint objective for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    /// `None` when the CSS term was not computed (`w_css = 0`).
    pub css: Option<f64>,
    pub total: f64,
    pub w_css: f64,
}

impl LossBreakdown {
    pub fn new(seg: f64, css: Option<f64>, w_css: f64) -> Self {
        let total = match css {
            Some(c) => seg + w_css * c,
            None => seg,
        };
        Self {
            seg,
            css,
            total,
            w_css,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub seg: f64,
    pub css: Option<f64>,
    pub total: f64,
}

/// Per-iteration loss history, written as `epoch,iteration,seg,css,total`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
    pub w_css: f64,
    /// Positions of the sampling streams after the last iteration.
    pub rng: Vec<rng::StreamState>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, iteration: usize, b: LossBreakdown) {
        self.records.push(LossRecord {
            epoch,
            iteration,
            seg: b.seg,
            css: b.css,
            total: b.total,
        });
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(crate::error::io_err(path))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<LossRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize()
            .collect::<std::result::Result<Vec<_>, _>>()?)
    }
}

/// ED and ES frames of each pair stacked into `[2n, 3, H, W]`, with matching mask targets.
pub fn supervised_batch<T: Scalar>(
    pairs: &[LabeledPair<'_>],
    stats: &ChannelStats,
) -> (Tensor<T>, Vec<T>) {
    let (h, w) = (pairs[0].ed_mask.height(), pairs[0].ed_mask.width());
    let mut frames = Vec::with_capacity(pairs.len() * 2 * CHANNELS * h * w);
    let mut targets = Vec::with_capacity(pairs.len() * 2 * h * w);
    for p in pairs {
        frames.extend_from_slice(p.ed_frame);
        frames.extend_from_slice(p.es_frame);
        targets.extend(p.ed_mask.as_scalars::<T>());
        targets.extend(p.es_mask.as_scalars::<T>());
    }
    let n = pairs.len() * 2;
    (
        Tensor::from_vec(&[n, CHANNELS, h, w], stats.normalize(&frames, h * w)),
        targets,
    )
}

/// Adds the CSS loss of `clips` to the graph as a node depending on the shared
/// encoder only. Returns the node and its value.
pub fn css_term<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &SegmentationModel<T>,
    clips: &[ClipSample],
    pstars: &[usize],
    stats: &ChannelStats,
    partition: &RegionPartition,
    cfg: &CssConfig,
) -> Result<(Var, f64)> {
    contract!(!clips.is_empty(), "no CSS clips");
    let (h, w) = (clips[0].height(), clips[0].width());
    let frames: Vec<u8> = clips
        .iter()
        .flat_map(|c| c.frames().iter().copied())
        .collect();
    let n = frames.len() / (CHANNELS * h * w);
    let x = g.input(Tensor::from_vec(
        &[n, CHANNELS, h, w],
        stats.normalize(&frames, h * w),
    ));
    let enc = model.encode(g, x);
    let d = model.embedding_dim();
    let z = g.value(enc.pooled).data();
    let mut seqs = Vec::with_capacity(clips.len());
    let mut offset = 0;
    for c in clips {
        let rows = c.len();
        let values = z[offset * d..(offset + rows) * d].to_vec();
        seqs.push(EmbeddingSequence::with_indices(
            values,
            rows,
            d,
            c.frame_indices.clone(),
        )?);
        offset += rows;
    }
    let out = css_loss(&seqs, partition, cfg, pstars)?;
    let grad = out.grads.concat();
    let node = g.external_loss(enc.pooled, T::lit(out.loss), grad);
    Ok((node, out.loss))
}

fn check_grads<T: Scalar>(
    grads: &ParamGrads<T>,
    iteration: usize,
    b: &LossBreakdown,
) -> Result<()> {
    if !b.total.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!("loss is not finite (seg {}, css {:?})", b.seg, b.css),
        });
    }
    if !grads.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!("non-finite gradient at loss {}", b.total),
        });
    }
    Ok(())
}

/// Jointly minimizes `L_seg + w_css * L_css` with an encoder shared by both terms.
///
/// Every kind of random draw has its own stream of `cfg.seed`. With
/// `w_css = 0` the CSS branch is skipped entirely.
pub fn train_joint<T: Scalar>(
    model: &mut SegmentationModel<T>,
    dataset: &Dataset,
    split: &DatasetSplit,
    stats: &ChannelStats,
    cfg: &SegTrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut sampler = EpochSampler::new(split.labeled.clone())?;
    let css_pool = split.all();
    contract!(!css_pool.is_empty(), "no training sequences for CSS clips");
    let mut sup_rng = rng::stream(cfg.seed, rng::SUPERVISED);
    let mut clip_rng = rng::stream(cfg.seed, rng::CSS_CLIPS);
    let mut pstar_rng = rng::stream(cfg.seed, rng::PSTAR);
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let per_epoch = cfg
        .iterations_per_epoch
        .unwrap_or_else(|| split.labeled.len().div_ceil(cfg.batch));
    let w_css = cfg.css.w_css;
    let mut log = TrainLog {
        records: Vec::with_capacity(cfg.epochs * per_epoch),
        w_css,
        rng: Vec::new(),
    };
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..per_epoch {
            let pairs = sample_labeled_frames(dataset, &mut sampler, cfg.batch, &mut sup_rng)?;
            let (x, targets) = supervised_batch::<T>(&pairs, stats);
            let (breakdown, grads) = {
                let mut g = Graph::new(model.params());
                let xv = g.input(x);
                let (_, logits) = model.forward(&mut g, xv);
                let seg = g.bce_with_logits(logits, &targets);
                let seg_value = g.value(seg).item().as_f64();
                let (root, css) = if cfg.w_css_enabled() {
                    let mut clips = Vec::with_capacity(cfg.css_clips);
                    let mut pstars = Vec::with_capacity(cfg.css_clips);
                    for _ in 0..cfg.css_clips {
                        let i = css_pool[clip_rng.random_range(0..css_pool.len())];
                        clips.push(sample_clip(dataset.get(i), i, cfg.css_clip, &mut clip_rng)?);
                        pstars.push(cfg.css.sample_pstar(&mut pstar_rng));
                    }
                    let (node, value) = css_term(
                        &mut g,
                        model,
                        &clips,
                        &pstars,
                        stats,
                        &cfg.partition,
                        &cfg.css,
                    )?;
                    let weighted = g.scale(node, T::lit(w_css));
                    (g.add(seg, weighted), Some(value))
                } else {
                    (seg, None)
                };
                let b = LossBreakdown::new(seg_value, css, w_css);
                (b, g.backward(root).into_params())
            };
            check_grads(&grads, iteration, &breakdown)?;
            opt.step(model.params_mut(), &grads);
            debug!(
                "epoch {epoch} iter {iteration}: seg {:.5} css {:?} total {:.5}",
                breakdown.seg, breakdown.css, breakdown.total
            );
            log.push(epoch, iteration, breakdown);
            iteration += 1;
        }
        if let Some(last) = log.records.last() {
            info!(
                "segmentation epoch {}/{}: total {:.5}",
                epoch + 1,
                cfg.epochs,
                last.total
            );
        }
    }
    log.rng = [&sup_rng, &clip_rng, &pstar_rng]
        .into_iter()
        .map(|r| rng::StreamState::capture(cfg.seed, r))
        .collect();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::{split_labels, Fraction};
    use crate::data::synthetic::{generate_synthetic, SyntheticParams};
    use crate::nn::OptimizerKind;
    use crate::segmentation::model::SegModelConfig;

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::new(0.40, Some(2.00), 0.01);
        assert!((b.total - 0.42).abs() < 1e-15);
        assert_eq!(b.total, 0.40 + 0.01 * 2.00);
        assert_eq!(LossBreakdown::new(0.3, None, 0.0).total, 0.3);
    }

    fn tiny() -> (Dataset, DatasetSplit) {
        let p = SyntheticParams {
            height: 16,
            width: 16,
            period: (10, 12),
            cycles: 3.0,
            ..Default::default()
        };
        let ds = generate_synthetic(4, &p, 1).unwrap();
        let split = split_labels(&ds, Fraction::new(1, 2).unwrap(), 0).unwrap();
        (ds, split)
    }

    fn small_cfg(w_css: f64) -> SegTrainConfig {
        SegTrainConfig {
            epochs: 2,
            batch: 2,
            css: CssConfig {
                w_css,
                ..Default::default()
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-3,
                momentum: 0.9,
            },
            iterations_per_epoch: Some(2),
            ..SegTrainConfig::paper(5)
        }
    }

    fn model() -> SegmentationModel<f32> {
        let mut rng = rng::stream(9, rng::INIT);
        SegmentationModel::new(SegModelConfig::desk(), &mut rng).unwrap()
    }

    #[test]
    fn css_gradients_stay_in_the_encoder() {
        let (ds, split) = tiny();
        let m = model();
        let cfg = CssConfig::default();
        let mut rng = rng::stream(0, 0);
        let clip = sample_clip(ds.get(0), 0, ClipSpec::CSS, &mut rng).unwrap();
        let stats = ChannelStats::default();
        let mut g = Graph::new(m.params());
        let (node, value) = css_term(
            &mut g,
            &m,
            &[clip],
            &[4],
            &stats,
            &RegionPartition::default(),
            &cfg,
        )
        .unwrap();
        assert!(value.is_finite());
        let grads = g.backward(node).into_params();
        let touched = grads.touched();
        let encoder = m.encoder_param_ids();
        assert_eq!(touched, encoder);
        drop(g);

        let pairs = vec![crate::data::sampler::labeled_pair(&ds, split.labeled[0]).unwrap()];
        let (x, y) = supervised_batch::<f32>(&pairs, &stats);
        let mut g = Graph::new(m.params());
        let xv = g.input(x);
        let (_, logits) = m.forward(&mut g, xv);
        let seg = g.bce_with_logits(logits, &y);
        let all = g.backward(seg).into_params().touched();
        assert_eq!(all.len(), m.params().len());
    }

    #[test]
    fn joint_log_satisfies_weighted_sum() {
        let (ds, split) = tiny();
        let mut m = model();
        let log = train_joint(
            &mut m,
            &ds,
            &split,
            &ChannelStats::default(),
            &small_cfg(0.01),
        )
        .unwrap();
        assert_eq!(log.records.len(), 4);
        for r in &log.records {
            let css = r.css.unwrap();
            assert_eq!(r.total, r.seg + 0.01 * css);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,iteration,seg,css,total\n"));
        assert_eq!(TrainLog::read_csv(&path).unwrap(), log.records);
    }

    #[test]
    fn disabled_css_leaves_supervised_trajectory_unchanged() {
        let (ds, split) = tiny();
        let stats = ChannelStats::default();
        let mut a = model();
        let la = train_joint(&mut a, &ds, &split, &stats, &small_cfg(0.0)).unwrap();
        assert!(la
            .records
            .iter()
            .all(|r| r.css.is_none() && r.total == r.seg));
        let mut b = model();
        let lb = train_joint(&mut b, &ds, &split, &stats, &small_cfg(0.0)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn divergence_is_reported() {
        let (ds, split) = tiny();
        let mut m = model();
        let mut cfg = small_cfg(0.0);
        cfg.optimizer = OptimizerConfig::sgd(1e30, 0.0);
        let err = train_joint(&mut m, &ds, &split, &ChannelStats::default(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
