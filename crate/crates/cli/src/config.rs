//! TOML run configuration.
//!
//! Every key is optional. Missing keys take the library defaults (desk-scale
//! model, 6e-4 Adam for 12 epochs, 200 synthetic 64×64 training scenes).
//! Unknown keys are rejected. Command-line flags override the file.
//!
//! ```toml
//! [model]
//! input_size = 64
//! stage_channels = [16, 32, 64, 128]
//! num_categories = 5
//! window = 4
//! heads = 2
//! fusion = "scalar"          # or "per_channel"
//! dgd_offset = "guide_mean"  # or "classical"
//!
//! [model.ablation]
//! use_glff = true
//! dgd_mode = "full"          # "off", "no_dwt" or "full"
//!
//! [train]
//! lr = 6e-4
//! epochs = 12
//! batch_size = 8
//! seed = 0
//! optimizer = "adam"         # or "sgd"
//! schedule = "constant"      # or "cosine"
//!
//! [data]
//! train_manifest = "train.tsv"   # replaces the synthetic training set
//! val_manifest = "val.tsv"
//! synth_count = 200
//! synth_size = 64
//! synth_seed = 0
//! val_count = 40
//! val_seed = 100000
//! ratios = [0.25, 0.5, 1.0, 1.5]
//! tile_size = 800
//! overlap = 200
//!
//! [output]
//! checkpoint = "model.ckpt"
//! log = "train.log"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gdgt::data::{DEFAULT_OVERLAP, DEFAULT_RATIOS, DEFAULT_TILE};
use gdgt::glff::FusionMode;
use gdgt::guided_filter::OffsetForm;
use gdgt::model::{AblationConfig, DgdMode, GdgtConfig};
use gdgt::training::{LrSchedule, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SYNTH_COUNT: usize = 200;
pub const DEFAULT_VAL_COUNT: usize = 40;
/// Validation seeds start here so they never overlap training seeds.
pub const DEFAULT_VAL_SEED: u64 = 100_000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    #[serde(default, skip_serializing_if = "ModelSection::is_empty")]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "TrainSection::is_empty")]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "DataSection::is_empty")]
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "OutputSection::is_empty")]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_channels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_categories: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dgd_offset: Option<OffsetForm>,
    #[serde(default, skip_serializing_if = "AblationSection::is_empty")]
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_glff: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dgd_mode: Option<DgdMode>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<LrSchedule>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tile_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
}

impl ModelSection {
    fn is_empty(&self) -> bool {
        *self == ModelSection::default()
    }
}

impl AblationSection {
    fn is_empty(&self) -> bool {
        *self == AblationSection::default()
    }
}

impl TrainSection {
    fn is_empty(&self) -> bool {
        *self == TrainSection::default()
    }
}

impl DataSection {
    fn is_empty(&self) -> bool {
        *self == DataSection::default()
    }
}

impl OutputSection {
    fn is_empty(&self) -> bool {
        *self == OutputSection::default()
    }
}

/// Resolved data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPlan {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub synth_count: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
    pub val_count: usize,
    pub val_seed: u64,
    pub ratios: Vec<f64>,
    pub tile_size: usize,
    pub overlap: usize,
}

impl CliConfigFile {
    pub fn parse(text: &str) -> Result<CliConfigFile> {
        Ok(toml::from_str(text)?)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<CliConfigFile> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        CliConfigFile::parse(&text).with_context(|| format!("invalid config file {}", path.display()))
    }

    pub fn model_config(&self) -> GdgtConfig {
        let m = &self.model;
        let d = GdgtConfig::desk();
        GdgtConfig {
            input_size: m.input_size.unwrap_or(d.input_size),
            stage_channels: m.stage_channels.clone().unwrap_or(d.stage_channels),
            num_categories: m.num_categories.unwrap_or(d.num_categories),
            window: m.window.unwrap_or(d.window),
            heads: m.heads.unwrap_or(d.heads),
            fusion: m.fusion.unwrap_or(d.fusion),
            dgd_offset: m.dgd_offset.unwrap_or(d.dgd_offset),
            ablation: AblationConfig {
                use_glff: m.ablation.use_glff.unwrap_or(d.ablation.use_glff),
                dgd_mode: m.ablation.dgd_mode.unwrap_or(d.ablation.dgd_mode),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::default();
        TrainConfig {
            lr: t.lr.unwrap_or(d.lr),
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            seed: t.seed.unwrap_or(d.seed),
            optimizer: t.optimizer.unwrap_or(d.optimizer),
            schedule: t.schedule.unwrap_or(d.schedule),
        }
    }

    pub fn data_plan(&self) -> DataPlan {
        let d = &self.data;
        DataPlan {
            train_manifest: d.train_manifest.clone(),
            val_manifest: d.val_manifest.clone(),
            synth_count: d.synth_count.unwrap_or(DEFAULT_SYNTH_COUNT),
            synth_size: d.synth_size.unwrap_or(self.model_config().input_size),
            synth_seed: d.synth_seed.unwrap_or(0),
            val_count: d.val_count.unwrap_or(DEFAULT_VAL_COUNT),
            val_seed: d.val_seed.unwrap_or(DEFAULT_VAL_SEED),
            ratios: d.ratios.clone().unwrap_or_else(|| DEFAULT_RATIOS.to_vec()),
            tile_size: d.tile_size.unwrap_or(DEFAULT_TILE),
            overlap: d.overlap.unwrap_or(DEFAULT_OVERLAP),
        }
    }

    /// Resolves relative manifest and output paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.train_manifest,
            &mut self.data.val_manifest,
            &mut self.output.checkpoint,
            &mut self.output.log,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[model]
input_size = 32
stage_channels = [8, 16]
window = 2
heads = 1
fusion = "per_channel"
dgd_offset = "classical"

[model.ablation]
dgd_mode = "no_dwt"

[train]
lr = 0.001
epochs = 3
optimizer = "sgd"
schedule = "cosine"

[data]
synth_count = 12
ratios = [0.5, 1.0]

[output]
checkpoint = "m.ckpt"
"#;

    #[test]
    fn parse_serialize_parse_is_fixed_point() {
        for text in [FULL, "", "[train]\nseed = 7\n"] {
            let a = CliConfigFile::parse(text).unwrap();
            let b = CliConfigFile::parse(&a.to_toml()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.to_toml(), b.to_toml());
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = CliConfigFile::parse("").unwrap();
        assert_eq!(c.model_config(), GdgtConfig::desk());
        assert_eq!(c.train_config(), TrainConfig::default());
        let d = c.data_plan();
        assert_eq!((d.synth_count, d.synth_size, d.val_count), (200, 64, 40));
    }

    #[test]
    fn values_override_defaults() {
        let c = CliConfigFile::parse(FULL).unwrap();
        let m = c.model_config();
        assert_eq!(m.stage_channels, vec![8, 16]);
        assert_eq!(m.ablation, AblationConfig::GLFF_DGD_NO_DWT);
        assert_eq!(m.ablation.tag(), "+GLFF+DGD(no-dwt)");
        let t = c.train_config();
        assert_eq!((t.epochs, t.batch_size, t.optimizer), (3, 8, OptimizerKind::Sgd));
        assert_eq!(c.data_plan().synth_size, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(CliConfigFile::parse("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(CliConfigFile::parse("[extras]\n").is_err());
        assert!(CliConfigFile::parse("[model.ablation]\nwavelets = true\n").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = CliConfigFile::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(format!("{err:#}").contains("/nonexistent/run.toml"));
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let mut c = CliConfigFile::parse(FULL).unwrap();
        c.resolve_paths(Path::new("/runs/a"));
        assert_eq!(c.output.checkpoint.unwrap(), Path::new("/runs/a/m.ckpt"));
    }
}
