//! Run configuration, read from TOML.
//!
//! Every section is optional and falls back to the desk defaults; unknown keys
//! are rejected. Relative paths are resolved against the config file's
//! directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::cmo::{CmoConfig, Objective};
use crate::error::{Error, Result};
use crate::gradcore::OptimConfig;
use crate::lora::LoraSpec;
use crate::model::ModelDims;
use crate::pipeline::stages::{LlmSource, StageConfig, StageTag, Trainable};
use crate::rng::SeedStream;
use crate::synthdata::Register;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Dpa,
    Vanilla,
    #[serde(alias = "cal")]
    CalLike,
    #[serde(alias = "pmo-only")]
    PmoOnly,
    #[serde(alias = "cmo-only")]
    CmoOnly,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::Dpa,
        Recipe::Vanilla,
        Recipe::CalLike,
        Recipe::PmoOnly,
        Recipe::CmoOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Dpa => "dpa",
            Recipe::Vanilla => "vanilla",
            Recipe::CalLike => "cal_like",
            Recipe::PmoOnly => "pmo_only",
            Recipe::CmoOnly => "cmo_only",
        }
    }

    pub fn uses_proxy(self) -> bool {
        matches!(self, Recipe::Dpa | Recipe::PmoOnly)
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "dpa" => Ok(Recipe::Dpa),
            "vanilla" => Ok(Recipe::Vanilla),
            "cal" | "cal_like" => Ok(Recipe::CalLike),
            "pmo_only" => Ok(Recipe::PmoOnly),
            "cmo_only" => Ok(Recipe::CmoOnly),
            _ => Err(Error::Config(format!(
                "unknown recipe `{s}` (expected dpa, vanilla, cal, pmo-only, cmo-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Register of the text the base LM is pretrained on.
    pub base_register: Register,
    /// Register of the multimodal captions.
    pub caption_register: Register,
    pub n_base: usize,
    /// Share of base-corpus sentences written in the other register, so the
    /// base LM knows both vocabularies but prefers its own.
    pub base_other_fraction: f64,
    pub n_captions: usize,
    pub n_instruct: usize,
    pub n_probe: usize,
    /// Labeled captions held out for the word-level analyses.
    pub n_analysis: usize,
    pub noise_std: f64,
    /// Write selected words as two subword tokens.
    pub split_words: bool,
    /// Optional `labels.json` (word → class) overriding generated labels.
    pub labels_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            base_register: Register::A,
            caption_register: Register::B,
            n_base: 4000,
            base_other_fraction: 0.1,
            n_captions: 4000,
            n_instruct: 2000,
            n_probe: 500,
            n_analysis: 100,
            noise_std: 0.05,
            split_words: false,
            labels_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    32
}

impl StageSettings {
    fn new(lr: f64, steps: usize) -> Self {
        Self {
            lr,
            steps,
            batch_size: default_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub base_pretrain: StageSettings,
    pub proxy_train: StageSettings,
    pub mm_pretrain: StageSettings,
    pub instruct_tune: StageSettings,
    /// `lora_only` or `llm_full`.
    pub proxy_trainable: Trainable,
    /// LM used for instruction tuning in proxy recipes: `target` or `proxy`.
    pub instruct_llm: LlmSource,
    /// Probe evaluation cadence in steps; 0 disables periodic probes.
    pub probe_every: usize,
    /// Share of base-pretraining sentences preceded by their visual words as
    /// unpositioned context slots, which teaches the LM to read leading slots.
    pub base_context_fraction: f64,
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self {
            base_pretrain: StageSettings::new(1e-3, 3000),
            proxy_train: StageSettings::new(3e-4, 800),
            mm_pretrain: StageSettings::new(1e-3, 1500),
            instruct_tune: StageSettings::new(3e-4, 1500),
            proxy_trainable: Trainable::LoraOnly,
            instruct_llm: LlmSource::Target,
            probe_every: 250,
            base_context_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Words seen fewer times than this are left out of loss-change reports.
    pub min_freq: usize,
    pub bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { min_freq: 3, bins: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub recipe: Recipe,
    pub lora_rank: Vec<usize>,
    pub clip_bounds: Vec<[f64; 2]>,
    pub data_fraction: Vec<f64>,
    /// `d_model` values; `d_ff` scales as `4·d_model`.
    pub model_scale: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Dpa,
            lora_rank: vec![2, 4, 8],
            clip_bounds: vec![[0.0, 1.0], [0.0, 0.5], [0.05, 1.0], [0.05, 0.5]],
            data_fraction: vec![0.25, 0.5, 1.0],
            model_scale: vec![32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub recipe: Recipe,
    pub dims: ModelDims,
    pub data: DataConfig,
    pub stages: StagesConfig,
    pub cmo: CmoConfig,
    pub lora: LoraSpec,
    pub optim: OptimConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            recipe: Recipe::Dpa,
            dims: ModelDims::default(),
            data: DataConfig::default(),
            stages: StagesConfig::default(),
            cmo: CmoConfig::default(),
            lora: LoraSpec::default(),
            optim: OptimConfig::default(),
            analysis: AnalysisConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.data.labels_file.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.cmo.validate()?;
        if !matches!(self.stages.proxy_trainable, Trainable::LoraOnly | Trainable::LlmFull) {
            return Err(Error::Config(
                "stages.proxy_trainable must be lora_only or llm_full".into(),
            ));
        }
        if self.stages.instruct_llm == LlmSource::Base {
            return Err(Error::Config("stages.instruct_llm must be target or proxy".into()));
        }
        let d = &self.data;
        for (name, n) in [
            ("n_base", d.n_base),
            ("n_captions", d.n_captions),
            ("n_instruct", d.n_instruct),
            ("n_probe", d.n_probe),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("data.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&d.base_other_fraction) {
            return Err(Error::Config("data.base_other_fraction must lie in [0, 1]".into()));
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return Err(Error::Config(
                "data.noise_std must be a finite non-negative number".into(),
            ));
        }
        if self.analysis.bins == 0 {
            return Err(Error::Config("analysis.bins must be positive".into()));
        }
        for stage in [
            StageTag::BasePretrain,
            StageTag::ProxyTrain,
            StageTag::MmPretrain,
            StageTag::InstructTune,
        ] {
            self.stage_config(stage, Objective::Vanilla, self.default_source(stage))
                .validate()?;
        }
        Ok(())
    }

    fn default_source(&self, stage: StageTag) -> LlmSource {
        match stage {
            StageTag::InstructTune => LlmSource::Target,
            _ => LlmSource::Base,
        }
    }

    /// The global stream every component derives its randomness from.
    pub fn stream(&self) -> SeedStream {
        SeedStream::new(self.seed)
    }

    /// Seed for the synthetic data generator.
    pub fn data_seed(&self) -> u64 {
        self.stream().child("data").as_u64()
    }

    pub fn init_stream(&self) -> SeedStream {
        self.stream().child("init")
    }

    pub fn stage_settings(&self, stage: StageTag) -> &StageSettings {
        match stage {
            StageTag::BasePretrain => &self.stages.base_pretrain,
            StageTag::ProxyTrain => &self.stages.proxy_train,
            StageTag::MmPretrain => &self.stages.mm_pretrain,
            StageTag::InstructTune => &self.stages.instruct_tune,
        }
    }

    pub fn stage_config(&self, stage: StageTag, method: Objective, llm_source: LlmSource) -> StageConfig {
        let s = self.stage_settings(stage);
        let (corpus, trainable) = match stage {
            StageTag::BasePretrain => ("base", Trainable::LlmFull),
            StageTag::ProxyTrain => ("captions", self.stages.proxy_trainable),
            StageTag::MmPretrain => ("captions", Trainable::Connector),
            StageTag::InstructTune => ("instruct", Trainable::ConnectorLlm),
        };
        StageConfig {
            stage,
            corpus: corpus.to_string(),
            method,
            llm_source,
            trainable,
            lr: s.lr,
            batch_size: s.batch_size,
            steps: s.steps,
            seed: self.stream().child("training").as_u64(),
            cmo: self.cmo.clone(),
            lora: (stage == StageTag::ProxyTrain).then(|| self.lora.clone()),
            optim: self.optim.clone(),
            probe_every: self.stages.probe_every,
            context_fraction: self.stages.base_context_fraction,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// JSON schema of the configuration document.
pub fn schema_json() -> String {
    let schema = schemars::schema_for!(RunConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes")
}
