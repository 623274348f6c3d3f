//! The individual training stages and their freezing contracts.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::cmo::{CmoConfig, Objective};
use crate::error::{Error, Result};
use crate::gradcore::OptimConfig;
use crate::lora::{attach, merge_all, LoraSpec};
use crate::model::{is_connector, is_llm, is_lora, AssemblyMode, Model};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::synthdata::{MMSample, ProbeItem};

use super::train::{train, LoopSettings, RunRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    BasePretrain,
    ProxyTrain,
    MmPretrain,
    InstructTune,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::BasePretrain => "base_pretrain",
            StageTag::ProxyTrain => "proxy_train",
            StageTag::MmPretrain => "mm_pretrain",
            StageTag::InstructTune => "instruct_tune",
        }
    }
}

/// Which language model a stage starts from. `Target` is the original base
/// LM restored after proxy-based pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum LlmSource {
    Base,
    Proxy,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    Connector,
    #[serde(rename = "connector+llm")]
    ConnectorLlm,
    LoraOnly,
    LlmFull,
}

impl Trainable {
    pub fn predicate(self) -> fn(&str) -> bool {
        match self {
            Trainable::Connector => is_connector,
            Trainable::ConnectorLlm => |n| is_connector(n) || is_llm(n),
            Trainable::LoraOnly => is_lora,
            Trainable::LlmFull => is_llm,
        }
    }
}

/// Fully resolved settings of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageTag,
    pub corpus: String,
    pub method: Objective,
    pub llm_source: LlmSource,
    pub trainable: Trainable,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub cmo: CmoConfig,
    pub lora: Option<LoraSpec>,
    pub optim: OptimConfig,
    pub probe_every: usize,
    /// Base pretraining only: share of sentences preceded by their visual
    /// words as unpositioned context slots.
    pub context_fraction: f64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.stage.as_str())));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        self.cmo.validate()?;
        let text_stage = matches!(self.stage, StageTag::BasePretrain | StageTag::ProxyTrain);
        if text_stage && self.method != Objective::Vanilla {
            return fail(format!(
                "{:?} needs images; text-only stages train with vanilla CE",
                self.method
            ));
        }
        match (self.stage, self.trainable, self.llm_source) {
            (StageTag::BasePretrain, Trainable::LlmFull, LlmSource::Base) => {}
            (StageTag::ProxyTrain, Trainable::LoraOnly, LlmSource::Base) if self.lora.is_none() => {
                return fail("lora_only proxy training needs a LoRA spec".into())
            }
            (StageTag::ProxyTrain, Trainable::LoraOnly | Trainable::LlmFull, LlmSource::Base) => {}
            (StageTag::MmPretrain, Trainable::Connector, LlmSource::Base | LlmSource::Proxy) => {}
            (StageTag::InstructTune, Trainable::ConnectorLlm, _) => {}
            (stage, trainable, source) => {
                return Err(Error::Config(format!(
                    "{}: trainable set {trainable:?} with llm_source {source:?} is not a valid combination",
                    stage.as_str()
                )))
            }
        }
        Ok(())
    }

    fn loop_settings(&self, mode: AssemblyMode) -> LoopSettings {
        LoopSettings {
            label: self.stage.as_str().to_string(),
            objective: self.method,
            mode,
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            optim: self.optim.clone(),
            cmo: self.cmo.clone(),
            stream: SeedStream::new(self.seed).child(self.stage.as_str()).child("batches"),
            probe_every: self.probe_every,
            context_fraction: if self.stage == StageTag::BasePretrain {
                self.context_fraction
            } else {
                0.0
            },
        }
    }

    fn expect(&self, stage: StageTag) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!(
                "expected a {} config, got {}",
                stage.as_str(),
                self.stage.as_str()
            )));
        }
        self.validate()
    }
}

/// Output of one stage: the trained model and its record.
#[derive(Clone, Debug)]
pub struct StageOutput<T: Real> {
    pub model: Model<T>,
    pub record: RunRecord,
}

fn run<T: Real>(
    mut model: Model<T>,
    corpus: &[MMSample],
    cfg: &StageConfig,
    mode: AssemblyMode,
    probe: Option<&[ProbeItem]>,
    bos: u32,
) -> Result<StageOutput<T>> {
    model.params.set_trainable(cfg.trainable.predicate());
    let mut record = train(&mut model, corpus, &cfg.loop_settings(mode), probe, bos)?;
    record.label = cfg.stage.as_str().to_string();
    Ok(StageOutput { model, record })
}

/// Trains a freshly initialized LM on text with next-token CE.
pub fn train_base_lm<T: Real>(
    init: Model<T>,
    corpus: &[MMSample],
    cfg: &StageConfig,
    bos: u32,
) -> Result<StageOutput<T>> {
    cfg.expect(StageTag::BasePretrain)?;
    if corpus.is_empty() {
        return Err(Error::Invalid("base pretraining corpus is empty".into()));
    }
    run(init, corpus, cfg, AssemblyMode::TextOnly, None, bos)
}

fn strip_images(captions: &[MMSample]) -> Vec<MMSample> {
    captions
        .iter()
        .map(|s| MMSample {
            attrs: None,
            ..s.clone()
        })
        .collect()
}

/// Proxy training before the merge: with `lora_only` the returned model still
/// carries its adapters and the base weights are untouched.
pub fn train_adapters<T: Real>(
    base: &Model<T>,
    captions: &[MMSample],
    cfg: &StageConfig,
    bos: u32,
) -> Result<StageOutput<T>> {
    cfg.expect(StageTag::ProxyTrain)?;
    let text = strip_images(captions);
    let mut model = base.clone();
    if cfg.trainable == Trainable::LoraOnly {
        let spec = cfg.lora.as_ref().expect("validated");
        attach(&mut model, spec, &SeedStream::new(cfg.seed).child("lora"))?;
    }
    run(model, &text, cfg, AssemblyMode::TextOnly, None, bos)
}

/// Trains the proxy LM on the caption text alone and merges its adapters.
pub fn train_proxy<T: Real>(
    base: &Model<T>,
    captions: &[MMSample],
    cfg: &StageConfig,
    bos: u32,
) -> Result<StageOutput<T>> {
    let mut out = train_adapters(base, captions, cfg, bos)?;
    merge_all(&mut out.model)?;
    Ok(out)
}

/// Connector-only multimodal pretraining on top of a frozen LM.
pub fn pretrain_mm<T: Real>(
    model: Model<T>,
    corpus: &[MMSample],
    cfg: &StageConfig,
    probe: Option<&[ProbeItem]>,
    bos: u32,
) -> Result<StageOutput<T>> {
    cfg.expect(StageTag::MmPretrain)?;
    if !model.adapters.is_empty() {
        return Err(Error::Invalid("merge adapters before multimodal pretraining".into()));
    }
    if let Some(i) = corpus.iter().position(|s| s.attrs.is_none() || s.caption.is_empty()) {
        return Err(Error::Invalid(format!(
            "multimodal corpus sample {i} lacks image attrs or caption"
        )));
    }
    run(model, corpus, cfg, AssemblyMode::Multimodal, probe, bos)
}

/// Combines an LM with a pretrained connector.
pub fn assemble_model<T: Real>(llm: &Model<T>, connector_from: &Model<T>) -> Result<Model<T>> {
    if llm.dims != connector_from.dims {
        return Err(Error::Invalid(format!(
            "connector was trained for {:?}, LM has {:?}",
            connector_from.dims, llm.dims
        )));
    }
    let mut model = llm.clone();
    for (name, p) in connector_from.params.iter().filter(|(n, _)| is_connector(n)) {
        let slot = model.params.get_mut(name)?;
        if slot.shape() != p.tensor.shape() {
            return Err(Error::shape(
                "assemble_model",
                format!("{name}: {:?} vs {:?}", slot.shape(), p.tensor.shape()),
            ));
        }
        *slot = p.tensor.clone();
    }
    Ok(model)
}

/// Instruction tuning of connector and LM together.
pub fn instruct_tune<T: Real>(
    llm: &Model<T>,
    connector_from: &Model<T>,
    corpus: &[MMSample],
    cfg: &StageConfig,
    probe: Option<&[ProbeItem]>,
    bos: u32,
) -> Result<StageOutput<T>> {
    cfg.expect(StageTag::InstructTune)?;
    if !llm.adapters.is_empty() {
        return Err(Error::Invalid("merge adapters before instruction tuning".into()));
    }
    let model = assemble_model(llm, connector_from)?;
    run(model, corpus, cfg, AssemblyMode::Multimodal, probe, bos)
}
