//! Generation settings and their resolution: defaults < config file < flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::guidance::{BranchEvaluation, GuidanceConfig, GuidanceMode};
use crate::pipeline::backend::Fusion;
use crate::pipeline::step::StepParams;
use crate::teacher::{SamplingParams, TeacherConfig};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 5.0;
pub const DEFAULT_TEACHER_CUTOFF: usize = 20;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    WeightedSum,
    #[default]
    CrossModalAdain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    /// Supplied by a separately linked adapter.
    External,
}

macro_rules! snake_case_enum_str {
    ($ty:ty, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($name),+].join(", ")
                    )),
                }
            }
        }
    };
}

snake_case_enum_str!(FusionMode, FusionMode::WeightedSum => "weighted_sum", FusionMode::CrossModalAdain => "cross_modal_adain");
snake_case_enum_str!(BackendKind, BackendKind::Toy => "toy", BackendKind::External => "external");
snake_case_enum_str!(GuidanceMode, GuidanceMode::TextCfg => "text_cfg", GuidanceMode::StyleCfg => "style_cfg");
snake_case_enum_str!(BranchEvaluation, BranchEvaluation::Batched => "batched", BranchEvaluation::Sequential => "sequential");

/// A fully resolved generation request.
///
/// Field order is the serialization order of sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub prompt: String,
    pub negative_prompt: String,
    pub style_image_path: Option<PathBuf>,
    pub negative_style_image_path: Option<PathBuf>,
    pub seed: u64,
    pub steps: usize,
    /// Conventional scale `s`: `neg + s·(pos − neg)`.
    pub guidance_scale: f64,
    /// Adapter weight; only read by `weighted_sum` fusion.
    pub lambda: Option<f64>,
    pub fusion_mode: FusionMode,
    pub teacher_enabled: bool,
    pub teacher_cutoff: usize,
    pub scfg_mode: GuidanceMode,
    /// Weight `w` of style guidance; defaults to `guidance_scale − 1`.
    pub scfg_weight: Option<f64>,
    pub branch_evaluation: BranchEvaluation,
    pub backend: BackendKind,
}

impl GenerationConfig {
    /// Defaults with the given prompt.
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            negative_prompt: String::new(),
            style_image_path: None,
            negative_style_image_path: None,
            seed: DEFAULT_SEED,
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            lambda: None,
            fusion_mode: FusionMode::default(),
            teacher_enabled: true,
            teacher_cutoff: DEFAULT_TEACHER_CUTOFF,
            scfg_mode: GuidanceMode::TextCfg,
            scfg_weight: None,
            branch_evaluation: BranchEvaluation::default(),
            backend: BackendKind::default(),
        }
    }

    /// Weighted-sum fusion, no teacher, text guidance: the unmodified adapter pipeline.
    pub fn baseline(mut self) -> Self {
        self.fusion_mode = FusionMode::WeightedSum;
        self.teacher_enabled = false;
        self.scfg_mode = GuidanceMode::TextCfg;
        self.scfg_weight = None;
        self.negative_style_image_path = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::config("prompt", "a non-empty prompt is required"));
        }
        if self.steps == 0 || self.steps >= crate::pipeline::TRAIN_TIMESTEPS {
            return Err(Error::config(
                "steps",
                format!("must be in 1..{}", crate::pipeline::TRAIN_TIMESTEPS),
            ));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::config("guidance_scale", "must be finite"));
        }
        if self.lambda.is_some_and(|l| !l.is_finite()) {
            return Err(Error::config("lambda", "must be finite"));
        }
        if self.scfg_weight.is_some_and(|w| !w.is_finite()) {
            return Err(Error::config("scfg_weight", "must be finite"));
        }
        self.teacher().validate(self.steps)?;
        if self.scfg_mode == GuidanceMode::StyleCfg {
            if self.negative_style_image_path.is_none() {
                return Err(Error::config(
                    "negative_style_image_path",
                    "style_cfg guidance needs a negative style image",
                ));
            }
            if self.style_image_path.is_none() {
                return Err(Error::config(
                    "style_image_path",
                    "style_cfg guidance needs a style image",
                ));
            }
        }
        Ok(())
    }

    /// Non-fatal oddities worth telling the user about.
    pub fn warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        if self.fusion_mode == FusionMode::CrossModalAdain && self.lambda.is_some() {
            warnings.push("lambda is ignored by cross_modal_adain fusion".to_string());
        }
        if self.scfg_mode == GuidanceMode::TextCfg && self.scfg_weight.is_some() {
            warnings.push("scfg_weight is ignored under text_cfg guidance".to_string());
        }
        if self.guidance_scale < 1.0 || self.scfg_weight.is_some_and(|w| w < 0.0) {
            warnings.push("guidance weight is negative".to_string());
        }
        warnings
    }

    pub fn teacher(&self) -> TeacherConfig {
        TeacherConfig {
            enabled: self.teacher_enabled,
            t_cutoff: self.teacher_cutoff,
        }
    }

    pub fn fusion(&self) -> Fusion {
        match self.fusion_mode {
            FusionMode::WeightedSum => Fusion::WeightedSum {
                lambda: self.lambda.unwrap_or(DEFAULT_LAMBDA) as f32,
            },
            FusionMode::CrossModalAdain => Fusion::CrossModalAdain,
        }
    }

    /// Guidance of the student: the text scale, or the style weight under `style_cfg`.
    pub fn student_guidance(&self) -> GuidanceConfig {
        match self.scfg_mode {
            GuidanceMode::TextCfg => GuidanceConfig::from_scale(GuidanceMode::TextCfg, self.guidance_scale),
            GuidanceMode::StyleCfg => GuidanceConfig {
                mode: GuidanceMode::StyleCfg,
                weight: self.scfg_weight.unwrap_or(self.guidance_scale - 1.0),
            },
        }
    }

    /// The teacher always runs plain text guidance at the text scale.
    pub fn teacher_guidance(&self) -> GuidanceConfig {
        GuidanceConfig::from_scale(GuidanceMode::TextCfg, self.guidance_scale)
    }

    pub fn sampling_params(&self) -> SamplingParams {
        SamplingParams {
            student: StepParams {
                guidance: self.student_guidance(),
                fusion: self.fusion(),
                evaluation: self.branch_evaluation,
            },
            teacher: StepParams {
                guidance: self.teacher_guidance(),
                fusion: self.fusion(),
                evaluation: self.branch_evaluation,
            },
        }
    }
}

/// A partially specified [`GenerationConfig`], as read from a file or flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_image_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_style_image_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_mode: Option<FusionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_cutoff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scfg_mode: Option<GuidanceMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scfg_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_evaluation: Option<BranchEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendKind>,
}

fn field<T: DeserializeOwned>(key: &str, value: Value) -> Result<Option<T>> {
    if value.is_null() {
        return Ok(None);
    }
    serde_json::from_value(value)
        .map(Some)
        .map_err(|e| Error::config(key, e.to_string()))
}

impl PartialConfig {
    /// Reads a flat key-value object. Unknown keys and mistyped values are
    /// reported against their key; `null` leaves a field unset.
    pub fn from_map(map: Map<String, Value>) -> Result<Self> {
        let mut p = PartialConfig::default();
        for (key, value) in map {
            let k = key.as_str();
            match k {
                "prompt" => p.prompt = field(k, value)?,
                "negative_prompt" => p.negative_prompt = field(k, value)?,
                "style_image_path" => p.style_image_path = field(k, value)?,
                "negative_style_image_path" => p.negative_style_image_path = field(k, value)?,
                "seed" => p.seed = field(k, value)?,
                "steps" => p.steps = field(k, value)?,
                "guidance_scale" => p.guidance_scale = field(k, value)?,
                "lambda" => p.lambda = field(k, value)?,
                "fusion_mode" => p.fusion_mode = field(k, value)?,
                "teacher_enabled" => p.teacher_enabled = field(k, value)?,
                "teacher_cutoff" => p.teacher_cutoff = field(k, value)?,
                "scfg_mode" => p.scfg_mode = field(k, value)?,
                "scfg_weight" => p.scfg_weight = field(k, value)?,
                "branch_evaluation" => p.branch_evaluation = field(k, value)?,
                "backend" => p.backend = field(k, value)?,
                _ => return Err(Error::config(k, "unknown key")),
            }
        }
        Ok(p)
    }

    pub fn from_value(value: Value, origin: &str) -> Result<Self> {
        match value {
            Value::Object(map) => Self::from_map(map),
            _ => Err(Error::config(origin, "expected a key-value table")),
        }
    }

    /// Loads a TOML file, a JSON object, or a run sidecar (its `config` entry).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let value = parse_document(path, &text)?;
        let value = match value {
            Value::Object(mut map) if map.contains_key("config") && map.get("config").is_some_and(Value::is_object) => {
                map.remove("config").expect("checked")
            }
            other => other,
        };
        Self::from_value(value, "config")
    }

    /// Fields set in `over` win.
    pub fn overlay(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            prompt: over.prompt.or(self.prompt),
            negative_prompt: over.negative_prompt.or(self.negative_prompt),
            style_image_path: over.style_image_path.or(self.style_image_path),
            negative_style_image_path: over.negative_style_image_path.or(self.negative_style_image_path),
            seed: over.seed.or(self.seed),
            steps: over.steps.or(self.steps),
            guidance_scale: over.guidance_scale.or(self.guidance_scale),
            lambda: over.lambda.or(self.lambda),
            fusion_mode: over.fusion_mode.or(self.fusion_mode),
            teacher_enabled: over.teacher_enabled.or(self.teacher_enabled),
            teacher_cutoff: over.teacher_cutoff.or(self.teacher_cutoff),
            scfg_mode: over.scfg_mode.or(self.scfg_mode),
            scfg_weight: over.scfg_weight.or(self.scfg_weight),
            branch_evaluation: over.branch_evaluation.or(self.branch_evaluation),
            backend: over.backend.or(self.backend),
        }
    }

    /// Fills the gaps with defaults and validates.
    ///
    /// An unset `scfg_mode` becomes `style_cfg` exactly when a negative style image is given.
    pub fn resolve(self) -> Result<GenerationConfig> {
        let prompt = self
            .prompt
            .ok_or_else(|| Error::config("prompt", "a prompt is required"))?;
        let mut config = GenerationConfig::new(prompt);
        let scfg_mode = self.scfg_mode.unwrap_or(if self.negative_style_image_path.is_some() {
            GuidanceMode::StyleCfg
        } else {
            GuidanceMode::TextCfg
        });
        config.negative_prompt = self.negative_prompt.unwrap_or_default();
        config.style_image_path = self.style_image_path;
        config.negative_style_image_path = self.negative_style_image_path;
        config.seed = self.seed.unwrap_or(DEFAULT_SEED);
        config.steps = self.steps.unwrap_or(DEFAULT_STEPS);
        config.guidance_scale = self.guidance_scale.unwrap_or(DEFAULT_GUIDANCE_SCALE);
        config.lambda = self.lambda;
        config.fusion_mode = self.fusion_mode.unwrap_or_default();
        config.teacher_enabled = self.teacher_enabled.unwrap_or(true);
        config.teacher_cutoff = self.teacher_cutoff.unwrap_or(DEFAULT_TEACHER_CUTOFF);
        config.scfg_mode = scfg_mode;
        config.scfg_weight = self.scfg_weight;
        config.branch_evaluation = self.branch_evaluation.unwrap_or_default();
        config.backend = self.backend.unwrap_or_default();
        config.validate()?;
        Ok(config)
    }
}

impl From<&GenerationConfig> for PartialConfig {
    fn from(c: &GenerationConfig) -> Self {
        PartialConfig {
            prompt: Some(c.prompt.clone()),
            negative_prompt: Some(c.negative_prompt.clone()),
            style_image_path: c.style_image_path.clone(),
            negative_style_image_path: c.negative_style_image_path.clone(),
            seed: Some(c.seed),
            steps: Some(c.steps),
            guidance_scale: Some(c.guidance_scale),
            lambda: c.lambda,
            fusion_mode: Some(c.fusion_mode),
            teacher_enabled: Some(c.teacher_enabled),
            teacher_cutoff: Some(c.teacher_cutoff),
            scfg_mode: Some(c.scfg_mode),
            scfg_weight: c.scfg_weight,
            branch_evaluation: Some(c.branch_evaluation),
            backend: Some(c.backend),
        }
    }
}

/// Parses TOML (`.toml`) or JSON (anything else) into a JSON value.
pub fn parse_document(path: &Path, text: &str) -> Result<Value> {
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        serde_json::to_value(table).map_err(Error::from)
    } else {
        serde_json::from_str(text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }
}
