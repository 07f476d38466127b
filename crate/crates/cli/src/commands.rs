use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use echocss::checkpoint::{Checkpoint, ModelSpec};
use echocss::data::{
    generate_synthetic, load_manifest, split_labels, write_dataset, ChannelStats, Dataset,
    DatasetSplit, Split,
};
use echocss::evaluation::{
    ef_report, embedding_header, frame_similarity_matrix, heatmap_overlay, save_png,
    segmentation_report, sequence_saliency_dice, smoothgrad, write_embeddings, write_matrix_csv,
    write_reports, MetricReport,
};
use echocss::regression::{
    bank_indices, clip_input, predict_ef, train_distilled, train_multi_input, write_predictions,
    EfPrediction, MaskBank, PredictionSource, RegressionModel,
};
use echocss::rng;
use echocss::segmentation::{encode_frames, frames_tensor, train_joint, SegmentationModel};
use echocss::{Real, RegModel, SegModel};

use crate::config::RunConfig;

pub const SEG_DIR: &str = "seg";
pub const MASK_DIR: &str = "masks";
pub const MULTI_DIR: &str = "multi";
pub const DISTILL_DIR: &str = "distill";
pub const EVAL_DIR: &str = "eval";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const CHECKPOINT: &str = "checkpoint.json";

fn dataset_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset_root
        .as_deref()
        .context("no dataset given; pass --data DIR or set ECHOCSS_DATA")
}

struct Data {
    dataset: Dataset,
    split: DatasetSplit,
    stats: ChannelStats,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let root = dataset_root(cfg)?;
    let dataset =
        load_manifest(root).with_context(|| format!("loading dataset from {}", root.display()))?;
    let split = split_labels(&dataset, cfg.label_fraction, cfg.seed)?;
    let stats = ChannelStats::compute(&dataset, &dataset.indices_in(Split::Train));
    Ok(Data {
        dataset,
        split,
        stats,
    })
}

fn load_checkpoint(path: &Path, what: &str, command: &str) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| {
        format!(
            "{what} checkpoint not found at {}; run {command} first",
            path.display()
        )
    })
}

fn test_indices(ds: &Dataset) -> Result<Vec<usize>> {
    let test = ds.indices_in(Split::Test);
    if test.is_empty() {
        bail!("the dataset has no test sequences");
    }
    Ok(test)
}

pub fn synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.out;
    let non_empty = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if non_empty {
        if !force {
            bail!(
                "{} is not empty; pass --force to overwrite it",
                out.display()
            );
        }
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    let ds = generate_synthetic(cfg.synthetic.count, &cfg.synthetic.params, cfg.seed)?;
    write_dataset(out, &ds)?;
    cfg.write_resolved(out)?;
    println!(
        "wrote {} sequences ({} test) to {}",
        ds.len(),
        ds.indices_in(Split::Test).len(),
        out.display()
    );
    Ok(())
}

pub fn train_seg(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.out.join(SEG_DIR);
    cfg.write_resolved(&dir)?;
    let data = load_data(cfg)?;
    fs::write(
        dir.join("split.json"),
        serde_json::to_vec_pretty(&data.split)?,
    )?;
    let mut model = SegModel::new(
        cfg.segmentation.model.clone(),
        &mut rng::stream(cfg.seed, rng::INIT),
    )?;
    let log = train_joint(
        &mut model,
        &data.dataset,
        &data.split,
        &data.stats,
        &cfg.segmentation.train,
    )?;
    log.write_csv(&dir.join("loss.csv"))?;
    let ck = Checkpoint::segmentation(
        &model,
        &data.stats,
        cfg.seed,
        log.records.len(),
        log.rng.clone(),
    );
    ck.save(&dir.join(CHECKPOINT))?;
    if let Some(last) = log.records.last() {
        println!(
            "segmentation: {} iterations, final loss {:.4}",
            log.records.len(),
            last.total
        );
    }
    Ok(())
}

pub fn infer_masks(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.out.join(SEG_DIR).join(CHECKPOINT));
    let ck = load_checkpoint(&path, "segmentation", "train-seg")?;
    let model: SegModel = ck.to_segmentation()?;
    let dir = cfg.out.join(MASK_DIR);
    cfg.write_resolved(&dir)?;
    let data = load_data(cfg)?;
    let indices = bank_indices(&data.dataset, &data.split);
    let bank = MaskBank::infer(&model, &data.dataset, &indices, &ck.stats);
    bank.save(&dir)?;
    println!(
        "inferred masks for {} sequences into {}",
        indices.len(),
        dir.display()
    );
    Ok(())
}

fn load_bank(cfg: &RunConfig, ds: &Dataset) -> Result<MaskBank> {
    MaskBank::load(&cfg.out.join(MASK_DIR), ds).context("mask-channel models need inferred masks")
}

fn test_predictions(
    cfg: &RunConfig,
    model: &RegModel,
    data: &Data,
    stats: &ChannelStats,
    bank: Option<&MaskBank>,
    source: PredictionSource,
) -> Result<Vec<EfPrediction>> {
    test_indices(&data.dataset)?
        .into_iter()
        .map(|i| {
            predict_ef(
                model,
                &data.dataset,
                i,
                cfg.regression.train.clip,
                stats,
                bank,
                cfg.regression.train.mask_encoding,
                cfg.evaluation.clip_selection,
                source,
            )
            .map_err(Into::into)
        })
        .collect()
}

fn finish_regression(
    cfg: &RunConfig,
    dir: &Path,
    model: &RegModel,
    data: &Data,
    bank: Option<&MaskBank>,
    log: &echocss::regression::RegressionLog,
    source: PredictionSource,
) -> Result<()> {
    log.write_csv(&dir.join("loss.csv"))?;
    Checkpoint::regression(
        model,
        &data.stats,
        cfg.seed,
        log.records.len(),
        log.rng.clone(),
    )
    .save(&dir.join(CHECKPOINT))?;
    if !data.dataset.indices_in(Split::Test).is_empty() {
        let preds = test_predictions(cfg, model, data, &data.stats, bank, source)?;
        write_predictions(&dir.join("predictions.csv"), &data.dataset, &preds)?;
    }
    if let Some(last) = log.records.last() {
        println!(
            "{source}: {} iterations, final loss {:.4}",
            log.records.len(),
            last.total
        );
    }
    Ok(())
}

pub fn train_multi(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.out.join(MULTI_DIR);
    cfg.write_resolved(&dir)?;
    let data = load_data(cfg)?;
    let bank = load_bank(cfg, &data.dataset)?;
    let mc = echocss::regression::RegModelConfig {
        input_channels: 4,
        ..cfg.regression.model.clone()
    };
    let mut model = RegModel::new(mc, &mut rng::stream(cfg.seed, rng::INIT))?;
    let mut tc = cfg.regression.train.clone();
    tc.w_ulb = 0.0;
    let log = train_multi_input(
        &mut model,
        &data.dataset,
        &data.split,
        &data.stats,
        &bank,
        &tc,
    )?;
    finish_regression(
        cfg,
        &dir,
        &model,
        &data,
        Some(&bank),
        &log,
        PredictionSource::Teacher,
    )
}

pub fn distill(cfg: &RunConfig, teacher: Option<PathBuf>) -> Result<()> {
    let path = teacher.unwrap_or_else(|| cfg.out.join(MULTI_DIR).join(CHECKPOINT));
    let ck = load_checkpoint(&path, "teacher", "train-multi")?;
    let teacher: RegModel = ck.to_regression()?;
    let dir = cfg.out.join(DISTILL_DIR);
    cfg.write_resolved(&dir)?;
    let data = load_data(cfg)?;
    let bank = load_bank(cfg, &data.dataset)?;
    let mc = echocss::regression::RegModelConfig {
        input_channels: 3,
        ..cfg.regression.model.clone()
    };
    let mut student = RegModel::new(mc, &mut rng::stream(cfg.seed, rng::INIT))?;
    let log = train_distilled(
        &mut student,
        &teacher,
        &data.dataset,
        &data.split,
        &data.stats,
        &bank,
        &cfg.regression.train,
    )?;
    finish_regression(
        cfg,
        &dir,
        &student,
        &data,
        None,
        &log,
        PredictionSource::Student,
    )
}

fn checkpoint_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn evaluate_one(
    cfg: &RunConfig,
    path: &Path,
    data: &Data,
    dir: &Path,
    embeddings: bool,
) -> Result<MetricReport> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("cannot evaluate {}", path.display()))?;
    let name = checkpoint_name(path);
    let test = test_indices(&data.dataset)?;
    match &ck.model {
        ModelSpec::Segmentation(_) => {
            let model: SegModel = ck.to_segmentation()?;
            if embeddings {
                export_embeddings(&model, data, &test, &ck.stats, dir, &name)?;
            }
            Ok(segmentation_report(
                name,
                &model,
                &data.dataset,
                &test,
                &ck.stats,
                cfg.seed,
            )?)
        }
        ModelSpec::Regression(c) => {
            let model: RegModel = ck.to_regression()?;
            let bank = if c.input_channels == 4 {
                Some(load_bank(cfg, &data.dataset)?)
            } else {
                None
            };
            let source = if c.input_channels == 4 {
                PredictionSource::Teacher
            } else {
                PredictionSource::Student
            };
            let preds = test_predictions(cfg, &model, data, &ck.stats, bank.as_ref(), source)?;
            write_predictions(
                &dir.join(format!("predictions_{name}.csv")),
                &data.dataset,
                &preds,
            )?;
            Ok(ef_report(name, &data.dataset, &preds, cfg.seed)?)
        }
    }
}

fn export_embeddings(
    model: &SegmentationModel<Real>,
    data: &Data,
    test: &[usize],
    stats: &ChannelStats,
    dir: &Path,
    name: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(format!("embeddings_{name}.csv")))?;
    w.write_record(embedding_header(model.embedding_dim()))?;
    for (k, &i) in test.iter().enumerate() {
        let seq = data.dataset.get(i);
        let z = encode_frames(
            model,
            &frames_tensor(seq.frames(), seq.height(), seq.width(), stats),
        )?;
        write_embeddings(&mut w, &seq.id, &z)?;
        if k == 0 {
            let m = frame_similarity_matrix(&z)?;
            write_matrix_csv(&dir.join(format!("similarity_{name}_{}.csv", seq.id)), &m)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<PathBuf>, embeddings: bool) -> Result<()> {
    let paths: Vec<PathBuf> = match checkpoint {
        Some(p) => vec![p],
        None => {
            let found: Vec<PathBuf> = [SEG_DIR, MULTI_DIR, DISTILL_DIR]
                .iter()
                .map(|d| cfg.out.join(d).join(CHECKPOINT))
                .filter(|p| p.exists())
                .collect();
            if found.is_empty() {
                bail!(
                    "no checkpoints under {}; train a model first",
                    cfg.out.display()
                );
            }
            found
        }
    };
    let dir = cfg.out.join(EVAL_DIR);
    cfg.write_resolved(&dir)?;
    let data = load_data(cfg)?;
    let mut reports = Vec::new();
    for p in &paths {
        let r = evaluate_one(cfg, p, &data, &dir, embeddings)?;
        info!("evaluated {}", p.display());
        reports.push(r);
    }
    write_reports(&dir.join("metrics.csv"), &reports)?;
    let summary: String = reports.iter().map(MetricReport::summary).collect();
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn heatmap(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    sequence: Option<String>,
) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.out.join(DISTILL_DIR).join(CHECKPOINT));
    let ck = load_checkpoint(&path, "regression", "distill")?;
    let model: RegressionModel<Real> = ck.to_regression()?;
    let data = load_data(cfg)?;
    let idx = match &sequence {
        Some(id) => data
            .dataset
            .position(id)
            .with_context(|| format!("sequence {id} is not in the dataset"))?,
        None => test_indices(&data.dataset)?[0],
    };
    let seq = data.dataset.get(idx);
    let bank = if model.input_channels() == 4 {
        Some(load_bank(cfg, &data.dataset)?)
    } else {
        None
    };
    let dir = cfg.out.join(HEATMAP_DIR).join(&seq.id);
    cfg.write_resolved(&dir)?;
    let spec = cfg.regression.train.clip;
    let clip = echocss::data::clip_at(seq, idx, spec, 0)?;
    let x = clip_input::<Real>(
        model.input_channels(),
        &clip,
        bank.as_ref(),
        &ck.stats,
        cfg.regression.train.mask_encoding,
    )?;
    let map = smoothgrad(&model, &x, cfg.evaluation.smoothgrad, cfg.seed)?;
    for (k, &t) in clip.frame_indices.iter().enumerate() {
        let img = heatmap_overlay(seq.frame(t), map.frame(k), seq.height(), seq.width())?;
        save_png(&img, &dir.join(format!("frame_{t:06}.png")))?;
    }
    let d = sequence_saliency_dice(
        &model,
        &data.dataset,
        idx,
        spec,
        &ck.stats,
        bank.as_ref(),
        cfg.regression.train.mask_encoding,
        cfg.evaluation.smoothgrad,
        cfg.evaluation.top_fraction,
        cfg.seed,
    )?;
    match d {
        Some(d) => println!(
            "{}: top-{:.0}% gradient Dice {:.3}; {} heatmaps in {}",
            seq.id,
            cfg.evaluation.top_fraction * 100.0,
            d,
            clip.len(),
            dir.display()
        ),
        None => println!(
            "{}: {} heatmaps in {} (no labeled frames in clip)",
            seq.id,
            clip.len(),
            dir.display()
        ),
    }
    Ok(())
}
