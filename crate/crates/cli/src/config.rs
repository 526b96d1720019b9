//! Run configuration: built-in defaults, then an optional JSON file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fusereader::encoder::EncoderConfig;
use fusereader::fusion::GateConfig;
use fusereader::pretrain::PretrainConfig;
use fusereader::reader::ClozePreset;
use fusereader::training::{EarlyStopConfig, Monitor, TrainConfig};
use fusereader::unilm::{FactoidPreset, GenerationConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FactoidGen,
    ClozeAoa,
}

impl Method {
    /// Cloze presets have their own names; everything else must parse as a factoid preset.
    pub fn of_preset(preset: &str) -> Result<Self, CliError> {
        if ClozePreset::parse(preset).is_ok() {
            return Ok(Self::ClozeAoa);
        }
        FactoidPreset::parse(preset).map_err(CliError::from)?;
        Ok(Self::FactoidGen)
    }
}

/// Encoder shape; the vocabulary size comes from the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub max_vocab: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            d_model: 32,
            d_ff: 64,
            max_len: 128,
            dropout_p: 0.1,
            max_vocab: 8192,
        }
    }
}

impl EncoderSettings {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub preset: String,
    pub seed: u64,
    pub data: PathBuf,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
    pub encoder: EncoderSettings,
    /// Channel counts of the convolutional gate; `d_model` is taken from the encoder.
    pub gate: GateConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub generation: GenerationConfig,
}

/// Everything a JSON config file may set. Flag names are accepted at top level.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub encoder: Option<EncoderSettings>,
    pub gate: Option<GateConfig>,
    pub train: Option<TrainConfig>,
    pub pretrain: Option<PretrainConfig>,
    pub generation: Option<GenerationConfig>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Flag values of `train`; `None` means "not given".
#[derive(Clone, Debug, Default)]
pub struct TrainFlags {
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub pretrain_steps: Option<usize>,
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

pub fn resolve(file: ConfigFile, flags: TrainFlags) -> Result<RunConfig, CliError> {
    let preset = pick(flags.preset, file.preset).ok_or_else(|| CliError::Usage("--preset is required".into()))?;
    let method = Method::of_preset(&preset)?;
    let data = pick(flags.data, file.data).ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let seed = pick(flags.seed, file.seed).unwrap_or(0);
    let out = pick(flags.out, file.out).unwrap_or_else(|| PathBuf::from("runs").join(sanitize(&preset)));
    let encoder = file.encoder.unwrap_or_default();

    let mut train = file.train.unwrap_or_else(|| TrainConfig {
        early_stop: EarlyStopConfig::new(
            3,
            match method {
                Method::ClozeAoa => Monitor::ValAccuracy,
                Method::FactoidGen => Monitor::ValLoss,
            },
        ),
        ..TrainConfig::default()
    });
    train.seed = seed;
    if let Some(v) = pick(flags.max_epochs, file.max_epochs) {
        train.max_epochs = v;
    }
    if let Some(v) = pick(flags.patience, file.patience) {
        train.early_stop.patience = v;
    }
    if let Some(v) = pick(flags.lr, file.lr) {
        train.optimizer.lr = v;
    }
    if let Some(v) = pick(flags.batch, file.batch) {
        train.batch_size = v;
    }
    if let Method::FactoidGen = method {
        let p = FactoidPreset::parse(&preset)?;
        train.freeze.groups = p.frozen_groups().into_iter().map(String::from).collect();
    }
    train.optimizer.validate()?;
    if train.batch_size == 0 || train.max_epochs == 0 || train.early_stop.patience == 0 {
        return Err(CliError::Usage("batch, max-epochs and patience must be positive".into()));
    }

    let mut pretrain = file.pretrain.unwrap_or_default();
    if let Some(s) = flags.pretrain_steps {
        pretrain.steps = s;
    }
    pretrain.validate()?;
    let mut gate = file.gate.unwrap_or_else(|| GateConfig::new(encoder.d_model));
    gate.d_model = encoder.d_model;

    let cfg = RunConfig {
        method,
        preset,
        seed,
        data,
        val: pick(flags.val, file.val),
        test: pick(flags.test, file.test),
        out,
        encoder,
        gate,
        train,
        pretrain,
        generation: file.generation.unwrap_or_default(),
    };
    cfg.encoder.config(16).validate()?;
    for p in [Some(&cfg.data), cfg.val.as_ref(), cfg.test.as_ref()].into_iter().flatten() {
        if !p.is_file() {
            return Err(CliError::Usage(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(cfg)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}
