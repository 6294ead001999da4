use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{LrSchedule, TrainConfig};
use crate::corrector::MlpConfig;
use crate::defects::{DefectKind, DefectSpec};
use crate::detector::{DetectorTraining, UNetConfig, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::imaging::{CfaPattern, SceneKind};
use crate::reconstructor::VitConfig;

/// Error rate above which full reconstruction replaces patch correction.
pub const DEFAULT_STRATEGY_THRESHOLD: f64 = 0.40;

/// Everything that determines a pipeline run. Read from TOML with one table
/// per stage; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub strategy_threshold: f64,
    pub n_calibration_frames: usize,
    pub data: DataConfig,
    pub defects: DefectConfig,
    pub detector: DetectorConfig,
    pub corrector: CorrectorConfig,
    pub reconstructor: ReconstructorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seeds: vec![0],
            output_dir: PathBuf::from("badpix-out"),
            strategy_threshold: DEFAULT_STRATEGY_THRESHOLD,
            n_calibration_frames: 9,
            data: DataConfig::default(),
            defects: DefectConfig::default(),
            detector: DetectorConfig::default(),
            corrector: CorrectorConfig::default(),
            reconstructor: ReconstructorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// PGM files in `data.directory`, sorted by name: training frames first,
    /// then test frames.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub directory: Option<PathBuf>,
    pub bit_depth: u8,
    pub pattern: CfaPattern,
    pub width: usize,
    pub height: usize,
    pub scene: SceneKind,
    pub noise: f32,
    pub train_frames: usize,
    pub test_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            directory: None,
            bit_depth: 16,
            pattern: CfaPattern::Rggb,
            width: 128,
            height: 128,
            scene: SceneKind::BandLimited,
            noise: 0.0,
            train_frames: 16,
            test_frames: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefectConfig {
    pub rate: f64,
    pub delta: f64,
    pub kind: DefectKind,
}

impl Default for DefectConfig {
    fn default() -> Self {
        let d = DefectSpec::default();
        Self { rate: d.rate, delta: d.delta, kind: d.kind }
    }
}

impl DefectConfig {
    pub fn spec(&self, seed: u64) -> DefectSpec {
        DefectSpec { rate: self.rate, delta: self.delta, kind: self.kind, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub tile: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub threshold: f64,
    /// Loaded when it exists; otherwise the detector is trained if `train`.
    pub checkpoint: Option<PathBuf>,
    pub train: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let t = DetectorTraining::default();
        let u = UNetConfig::default();
        let (lr, lr_decay, lr_period) = match t.train.schedule {
            LrSchedule::Step { base, factor, period } => (base, factor, period),
            _ => unreachable!("detector default is a step schedule"),
        };
        Self {
            depth: u.depth,
            base_channels: u.base_channels,
            tile: t.tile,
            epochs: t.train.epochs,
            batch_size: t.train.batch_size,
            lr,
            lr_decay,
            lr_period,
            threshold: DEFAULT_THRESHOLD,
            checkpoint: None,
            train: true,
        }
    }
}

impl DetectorConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig { depth: self.depth, base_channels: self.base_channels }
    }

    pub fn training(&self, seed: u64) -> DetectorTraining {
        DetectorTraining {
            tile: self.tile,
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                schedule: LrSchedule::Step { base: self.lr, factor: self.lr_decay, period: self.lr_period },
                seed,
            },
            ..DetectorTraining::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorConfig {
    pub patch_size: usize,
    pub hidden_units: usize,
    /// One model is trained per entry; pixels are routed to the closest.
    pub neighbor_errors: Vec<usize>,
    pub patches_per_frame: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Directory of bank checkpoints, loaded when it holds any.
    pub checkpoint_dir: Option<PathBuf>,
    pub train: bool,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        let m = MlpConfig::default();
        Self {
            patch_size: m.patch_size,
            hidden_units: m.hidden_units,
            neighbor_errors: vec![0, 2, 4, 6, 8],
            patches_per_frame: 1000,
            epochs: 50,
            batch_size: 16,
            lr: 0.01,
            checkpoint_dir: None,
            train: true,
        }
    }
}

impl CorrectorConfig {
    pub fn mlp(&self, neighbor_errors: usize) -> MlpConfig {
        MlpConfig { patch_size: self.patch_size, hidden_units: self.hidden_units, train_neighbor_errors: neighbor_errors }
    }

    pub fn training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule::Constant { base: self.lr },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructorConfig {
    pub input_size: usize,
    pub token_patch: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub checkpoint: Option<PathBuf>,
    pub train: bool,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        let v = VitConfig::default();
        Self {
            input_size: 20,
            token_patch: v.token_patch,
            embed_dim: v.embed_dim,
            encoder_layers: v.encoder_layers,
            decoder_layers: v.decoder_layers,
            heads: v.heads,
            mlp_ratio: v.mlp_ratio,
            epochs: 50,
            batch_size: 16,
            lr: 0.01,
            warmup: 5,
            checkpoint: None,
            train: true,
        }
    }
}

impl ReconstructorConfig {
    pub fn vit(&self) -> VitConfig {
        VitConfig {
            input_size: self.input_size,
            token_patch: self.token_patch,
            embed_dim: self.embed_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            mask_center: false,
        }
    }

    pub fn training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule::WarmupCosine {
                base: self.lr,
                warmup: self.warmup,
                total: self.epochs.max(self.warmup + 1),
            },
            seed,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = parse_with_overrides(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strategy_threshold) {
            return Err(Error::Config(format!("strategy_threshold {} outside [0, 1]", self.strategy_threshold)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.n_calibration_frames == 0 || self.n_calibration_frames > self.data.test_frames {
            return Err(Error::Config(format!(
                "n_calibration_frames {} must be in 1..={} (data.test_frames)",
                self.n_calibration_frames, self.data.test_frames
            )));
        }
        if self.data.train_frames == 0 {
            return Err(Error::Config("data.train_frames must be positive".into()));
        }
        if self.data.source == DataSource::Directory && self.data.directory.is_none() {
            return Err(Error::Config("data.directory is required for a directory source".into()));
        }
        if self.corrector.neighbor_errors.is_empty() {
            return Err(Error::Config("corrector.neighbor_errors must not be empty".into()));
        }
        self.defects.spec(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.detector.unet().validate()?;
        self.detector
            .unet()
            .check_tile(self.detector.tile, self.detector.tile)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.detector.training(0).train.validate()?;
        for &k in &self.corrector.neighbor_errors {
            self.corrector.mlp(k).validate()?;
        }
        self.corrector.training(0).validate()?;
        self.reconstructor.vit().validate()?;
        self.reconstructor.training(0).validate()
    }

    /// SHA-256 of the configuration's canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&serde_json::to_value(self).expect("config serializes"))
            .expect("value serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deserializes TOML `text` after applying `key.path=value` overrides.
/// Values are read as TOML and fall back to plain strings.
pub fn parse_with_overrides<T: serde::de::DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
