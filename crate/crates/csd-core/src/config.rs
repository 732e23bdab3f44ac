//! TOML run configuration. Every field defaults to the reference recipe, so
//! an empty file is a valid config; unknown keys are rejected and range
//! violations are reported all at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{BackboneConfig, WidthMultiplier, DIV2K_RGB_MEAN};
use crate::embedding::Extractor;
use crate::error::{Error, Result};
use crate::trainer::{LossKind, Strategy, TeacherInit, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub base_width: usize,
    pub n_blocks: usize,
    pub scale: usize,
    /// Residual branch scaling; when absent, 0.1 for wide nets (>= 256
    /// channels) and 1.0 otherwise.
    pub res_scale: Option<f64>,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            base_width: 256,
            n_blocks: 32,
            scale: 4,
            res_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    /// `vgg19` (pretrained weights container) or `toy` (small frozen
    /// random-conv extractor for tests and smoke runs).
    pub kind: String,
    /// Weights container for `vgg19`; falls back to `$CSD_CACHE/vgg19.csdc`.
    pub weights: Option<PathBuf>,
    /// Initialization seed for the `toy` extractor.
    pub seed: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            kind: "vgg19".into(),
            weights: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// `csd`, `infonce`, `perceptual` or `none`.
    pub kind: String,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub epsilon: f64,
    /// InfoNCE softmax temperature; unused by the other kinds.
    pub temperature: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            kind: "csd".into(),
            lambda_t: 1.0,
            lambda_c: 200.0,
            epsilon: crate::losses::DEFAULT_EPSILON,
            temperature: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativesSection {
    /// Negative samples per anchor.
    pub k: usize,
    /// Draw one negative set for the whole batch instead of per anchor.
    pub shared: bool,
}

impl Default for NegativesSection {
    fn default() -> Self {
        NegativesSection {
            k: 10,
            shared: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root holding `<set>/HR/*.png`; falls back to $CSD_DATA_ROOT.
    pub root: Option<PathBuf>,
    pub train_set: String,
    pub val_set: String,
    /// HR patch edge in pixels.
    pub patch: usize,
    pub negatives: NegativesSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            train_set: "div2k-train".into(),
            val_set: "div2k-val".into(),
            patch: 192,
            negatives: NegativesSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub strategy: String,
    /// Student width multiplier in (0, 1].
    pub r_w: f64,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// `random` or a path to a teacher checkpoint to fine-tune from.
    pub teacher_init: String,
    /// Validate (and checkpoint) every this many epochs.
    pub validate_every: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            strategy: "csd".into(),
            r_w: 0.25,
            batch: 16,
            epochs: 300,
            steps_per_epoch: 1000,
            lr0: 1e-4,
            decay_every: 200_000,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            teacher_init: "random".into(),
            validate_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub datasets: Vec<String>,
    pub widths: Vec<f64>,
    pub ensemble: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            datasets: vec![
                "set5".into(),
                "set14".into(),
                "bsd100".into(),
                "urban100".into(),
                "div2k-val".into(),
            ],
            widths: vec![0.25, 1.0],
            ensemble: false,
        }
    }
}

/// The full run configuration, one section per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub arch: ArchSection,
    pub embedding: EmbeddingSection,
    pub loss: LossSection,
    pub data: DataSection,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
}

/// Parse a config file, apply `key.path=value` overrides, validate.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, overrides)
}

/// Like [`parse_config`] but from an in-memory TOML string.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<Config> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {}", e.message())))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let cfg: Config = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("config error: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Set one dotted-path key, e.g. `trainer.lr0=5e-5` or
/// `eval.datasets=["set5"]`. The value is parsed as TOML; anything that does
/// not parse is taken as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key.path=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut cursor = table;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override `{spec}`: `{seg}` is not a table"))
            })?;
    }
    cursor.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    /// Range checks across all sections; every violation is reported.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let a = &self.arch;
        if !matches!(a.scale, 2 | 3 | 4) {
            errs.push(format!("arch.scale must be one of 2, 3, 4, got {}", a.scale));
        }
        if a.base_width < 4 {
            errs.push(format!("arch.base_width must be >= 4, got {}", a.base_width));
        }
        if a.n_blocks == 0 {
            errs.push("arch.n_blocks must be >= 1".into());
        }
        if let Some(rs) = a.res_scale {
            if !(rs > 0.0 && rs <= 1.0) {
                errs.push(format!("arch.res_scale must be in (0, 1], got {rs}"));
            }
        }
        if !matches!(self.embedding.kind.as_str(), "vgg19" | "toy") {
            errs.push(format!(
                "embedding.kind must be `vgg19` or `toy`, got `{}`",
                self.embedding.kind
            ));
        }
        if let Err(e) = LossKind::parse(&self.loss.kind) {
            errs.push(format!("loss.kind: {e}"));
        }
        if self.loss.lambda_t < 0.0 || self.loss.lambda_c < 0.0 {
            errs.push("loss.lambda_t and loss.lambda_c must be non-negative".into());
        }
        if self.loss.epsilon <= 0.0 {
            errs.push(format!("loss.epsilon must be positive, got {}", self.loss.epsilon));
        }
        if self.loss.temperature <= 0.0 {
            errs.push(format!(
                "loss.temperature must be positive, got {}",
                self.loss.temperature
            ));
        }
        if self.data.patch == 0 {
            errs.push("data.patch must be >= 1".into());
        }
        if self.data.patch % self.arch.scale != 0 {
            errs.push(format!(
                "data.patch ({}) must be a multiple of arch.scale ({})",
                self.data.patch, self.arch.scale
            ));
        }
        if self.data.negatives.k == 0 {
            errs.push("data.negatives.k must be >= 1".into());
        }
        let t = &self.trainer;
        if let Err(e) = Strategy::parse(&t.strategy) {
            errs.push(format!("trainer.strategy: {e}"));
        }
        if !(t.r_w > 0.0 && t.r_w <= 1.0) {
            errs.push(format!("trainer.r_w must be in (0, 1], got {}", t.r_w));
        }
        if t.batch == 0 {
            errs.push("trainer.batch must be >= 1".into());
        }
        if t.steps_per_epoch == 0 {
            errs.push("trainer.steps_per_epoch must be >= 1".into());
        }
        if t.lr0 <= 0.0 {
            errs.push(format!("trainer.lr0 must be positive, got {}", t.lr0));
        }
        if t.decay_every == 0 {
            errs.push("trainer.decay_every must be >= 1".into());
        }
        if !(t.decay_factor > 0.0 && t.decay_factor <= 1.0) {
            errs.push(format!(
                "trainer.decay_factor must be in (0, 1], got {}",
                t.decay_factor
            ));
        }
        for (name, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0 <= v && v < 1.0) {
                errs.push(format!("trainer.{name} must be in [0, 1), got {v}"));
            }
        }
        if t.adam_eps <= 0.0 {
            errs.push(format!("trainer.adam_eps must be positive, got {}", t.adam_eps));
        }
        if t.validate_every == 0 {
            errs.push("trainer.validate_every must be >= 1".into());
        }
        for w in &self.eval.widths {
            if !(*w > 0.0 && *w <= 1.0) {
                errs.push(format!("eval.widths entries must be in (0, 1], got {w}"));
            }
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(Error::Config(errs.pop().unwrap())),
            _ => Err(Error::ConfigList(errs)),
        }
    }

    pub fn to_backbone_config(&self) -> BackboneConfig {
        let res_scale = self.arch.res_scale.unwrap_or(if self.arch.base_width >= 256 {
            0.1
        } else {
            1.0
        });
        BackboneConfig {
            base_width: self.arch.base_width,
            n_blocks: self.arch.n_blocks,
            scale: self.arch.scale,
            res_scale,
            rgb_mean: DIV2K_RGB_MEAN,
        }
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let teacher_init = if self.trainer.teacher_init == "random" {
            TeacherInit::Random
        } else {
            TeacherInit::Checkpoint(PathBuf::from(&self.trainer.teacher_init))
        };
        Ok(TrainConfig {
            r_w: WidthMultiplier::new(self.trainer.r_w)?,
            batch: self.trainer.batch,
            epochs: self.trainer.epochs,
            steps_per_epoch: self.trainer.steps_per_epoch,
            lr0: self.trainer.lr0,
            decay_every: self.trainer.decay_every,
            decay_factor: self.trainer.decay_factor,
            beta1: self.trainer.beta1,
            beta2: self.trainer.beta2,
            adam_eps: self.trainer.adam_eps,
            lambda_t: self.loss.lambda_t,
            lambda_c: self.loss.lambda_c,
            k_negatives: self.data.negatives.k,
            negatives_shared: self.data.negatives.shared,
            patch: self.data.patch,
            seed: self.trainer.seed,
            teacher_init,
            loss_kind: LossKind::parse(&self.loss.kind)?,
            epsilon: self.loss.epsilon,
            temperature: self.loss.temperature,
            validate_every: self.trainer.validate_every,
        })
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(&self.trainer.strategy)
    }

    /// Instantiate the configured feature extractor.
    pub fn build_extractor(&self) -> Result<Extractor> {
        match self.embedding.kind.as_str() {
            "toy" => Ok(Extractor::toy(self.embedding.seed)),
            "vgg19" => {
                let path = match &self.embedding.weights {
                    Some(p) => p.clone(),
                    None => match std::env::var_os("CSD_CACHE") {
                        Some(dir) => PathBuf::from(dir).join("vgg19.csdc"),
                        None => {
                            return Err(Error::Config(
                                "embedding.kind = vgg19 needs embedding.weights or $CSD_CACHE"
                                    .into(),
                            ))
                        }
                    },
                };
                Extractor::vgg19(&path)
            }
            other => Err(Error::Config(format!("unknown embedding kind `{other}`"))),
        }
    }

    /// Dataset root: the config value, else $CSD_DATA_ROOT.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.data.root {
            return Ok(root.clone());
        }
        std::env::var_os("CSD_DATA_ROOT")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("set data.root or $CSD_DATA_ROOT".into()))
    }
}
