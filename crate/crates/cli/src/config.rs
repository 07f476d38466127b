use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use echocss::data::{Fraction, SyntheticParams};
use echocss::evaluation::SmoothGradConfig;
use echocss::regression::{ClipSelection, RegModelConfig, RegTrainConfig};
use echocss::segmentation::{SegModelConfig, SegTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    #[serde(flatten)]
    pub params: SyntheticParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegSection {
    pub model: SegModelConfig,
    pub train: SegTrainConfig,
    /// Probability above which a pixel counts as foreground.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    /// Shared by both regressors; the channel count is set per model.
    pub model: RegModelConfig,
    pub train: RegTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub clip_selection: ClipSelection,
    pub smoothgrad: SmoothGradConfig,
    pub top_fraction: f64,
}

/// Everything a run needs. Serialized next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub label_fraction: Fraction,
    pub dataset_root: Option<PathBuf>,
    pub out: PathBuf,
    /// The bundled compute backend is single-threaded and always
    /// deterministic; the flag is recorded for provenance of the run.
    pub deterministic: bool,
    pub synthetic: SynthSection,
    pub segmentation: SegSection,
    pub regression: RegSection,
    pub evaluation: EvalSection,
}

impl RunConfig {
    /// Synthetic data, small models, minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            seed: 1,
            label_fraction: Fraction::new(1, 15).expect("valid fraction"),
            dataset_root: None,
            out: PathBuf::from("runs/desk"),
            deterministic: true,
            synthetic: SynthSection {
                count: 180,
                params: SyntheticParams {
                    test_count: 30,
                    ..SyntheticParams::default()
                },
            },
            segmentation: SegSection {
                model: SegModelConfig::desk(),
                train: SegTrainConfig::desk(1),
                threshold: 0.5,
            },
            regression: RegSection {
                model: RegModelConfig::desk(3),
                train: RegTrainConfig::desk(1),
            },
            evaluation: EvalSection {
                clip_selection: ClipSelection::First,
                smoothgrad: SmoothGradConfig::default(),
                top_fraction: 0.05,
            },
        }
    }

    /// Published hyperparameters; needs the full clinical dataset and accelerators.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            preset: "paper".into(),
            label_fraction: Fraction::new(1, 8).expect("valid fraction"),
            out: PathBuf::from("runs/paper"),
            segmentation: SegSection {
                model: SegModelConfig::paper(),
                train: SegTrainConfig::paper(1),
                threshold: 0.5,
            },
            regression: RegSection {
                model: RegModelConfig::paper(3),
                train: RegTrainConfig::paper(1),
            },
            ..desk
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => bail!("unknown preset {other:?}; expected desk or paper"),
        }
    }

    /// Preset values overlaid with a (possibly partial) TOML file.
    pub fn from_file(preset: &str, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let overlay: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let name = overlay
            .get("preset")
            .and_then(|v| v.as_str())
            .unwrap_or(preset)
            .to_string();
        let mut base = toml::Table::try_from(Self::preset(&name)?)?;
        merge(&mut base, overlay);
        let cfg: Self = base
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Copies the run seed into every sub-config that carries one.
    pub fn sync_seeds(&mut self) {
        self.segmentation.train.seed = self.seed;
        self.regression.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.model.validate()?;
        self.segmentation.train.validate()?;
        self.regression.train.validate()?;
        self.synthetic.params.validate(self.synthetic.count)?;
        if !(self.evaluation.top_fraction > 0.0 && self.evaluation.top_fraction < 1.0) {
            bail!("evaluation.top_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the resolved configuration as `dir/config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
