//! Stage graphs of the training recipes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmo::Objective;
use crate::config::{Recipe, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Real;
use crate::synthdata::MMSample;

use super::checkpoint::{config_hash, Checkpoint, Provenance};
use super::data::DataBundle;
use super::stages::{instruct_tune, pretrain_mm, train_base_lm, train_proxy, LlmSource, StageTag};
use super::train::RunRecord;

/// Hash of everything in `cfg` that influences training, i.e. all of it
/// except where results are written.
pub fn run_hash(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    config_hash(&c)
}

fn provenance(cfg: &RunConfig, stage: StageTag, recipe: Option<Recipe>, steps: usize) -> Result<Provenance> {
    Ok(Provenance {
        stage: stage.as_str().to_string(),
        recipe: recipe.map(|r| r.as_str().to_string()),
        config_hash: run_hash(cfg)?,
        seed: cfg.seed,
        steps,
    })
}

/// Initializes and pretrains the base LM on `corpus`.
pub fn build_base_lm<T: Real>(cfg: &RunConfig, corpus: &[MMSample], bos: u32) -> Result<(Model<T>, RunRecord)> {
    let init = Model::init(cfg.dims, &cfg.init_stream())?;
    let stage = cfg.stage_config(StageTag::BasePretrain, Objective::Vanilla, LlmSource::Base);
    let out = train_base_lm(init, corpus, &stage, bos)?;
    Ok((out.model, out.record))
}

/// Loads `dir/base_lm.ckpt` when it was produced from the same settings,
/// otherwise trains the base LM and writes it there.
pub fn ensure_base_lm(cfg: &RunConfig, corpus: &[MMSample], bos: u32, dir: &Path) -> Result<Model<f32>> {
    let path = dir.join("base_lm.ckpt");
    let key = {
        let mut c = cfg.clone();
        c.output_dir = PathBuf::new();
        c.recipe = Recipe::Dpa;
        config_hash(&(
            c.seed,
            c.dims,
            &c.data,
            &c.stages.base_pretrain,
            c.stages.base_context_fraction,
            &c.optim,
            corpus,
        ))?
    };
    if path.is_file() {
        if let Ok(ckpt) = Checkpoint::<f32>::load(&path, Some(&cfg.dims)) {
            if ckpt.provenance.config_hash == key {
                log::info!("reusing base LM {}", path.display());
                return Ok(ckpt.model);
            }
        }
    }
    log::info!("training base LM ({} steps)", cfg.stages.base_pretrain.steps);
    let (model, record) = build_base_lm::<f32>(cfg, corpus, bos)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join("base_pretrain.csv"), record.to_csv()).map_err(|e| Error::io(dir, e))?;
    let mut prov = provenance(cfg, StageTag::BasePretrain, None, cfg.stages.base_pretrain.steps)?;
    prov.config_hash = key;
    Checkpoint::new(model.clone(), prov).save(&path)?;
    Ok(model)
}

/// Everything a recipe produces. `stage2_init`/`stage2` bracket the
/// multimodal pretraining stage for before/after analyses.
#[derive(Clone, Debug)]
pub struct RecipeOutput<T: Real> {
    pub recipe: Recipe,
    pub records: Vec<RunRecord>,
    pub proxy: Option<Model<T>>,
    pub stage2_init: Model<T>,
    pub stage2: Model<T>,
    pub final_model: Model<T>,
    pub stage2_method: Objective,
    pub stage3_method: Objective,
    pub stage3_llm: LlmSource,
}

impl<T: Real> RecipeOutput<T> {
    pub fn final_probe(&self) -> Option<f64> {
        self.records.last().and_then(RunRecord::final_probe)
    }
}

/// Losses of stage 2 and stage 3 for `recipe` under `cfg`'s CMO stage flags.
pub fn recipe_methods(recipe: Recipe, cfg: &RunConfig) -> (Objective, Objective) {
    let cmo_if = |on: bool| if on { Objective::Cmo } else { Objective::Vanilla };
    match recipe {
        Recipe::Dpa | Recipe::CmoOnly => (
            cmo_if(cfg.cmo.apply_in_pretraining),
            cmo_if(cfg.cmo.apply_in_instruction_tuning),
        ),
        Recipe::CalLike => (Objective::CalLike, Objective::CalLike),
        Recipe::Vanilla | Recipe::PmoOnly => (Objective::Vanilla, Objective::Vanilla),
    }
}

/// Runs the stage graph of `recipe` from a pretrained base LM.
///
/// * `dpa`: proxy training, connector pretraining on the proxy with CMO,
///   instruction tuning on the restored target LM with CMO.
/// * `pmo_only`: the same graph with plain CE everywhere.
/// * `vanilla`, `cmo_only`, `cal_like`: no proxy; both stages on the base LM.
pub fn run_recipe<T: Real>(
    recipe: Recipe,
    base: &Model<T>,
    data: &DataBundle,
    cfg: &RunConfig,
) -> Result<RecipeOutput<T>> {
    for (name, len) in [
        ("captions", data.captions.len()),
        ("instruct", data.instruct.len()),
        ("probe", data.probe.len()),
    ] {
        if len == 0 {
            return Err(Error::Invalid(format!(
                "recipe {recipe} needs a non-empty {name} corpus"
            )));
        }
    }
    if base.dims != cfg.dims {
        return Err(Error::Invalid(format!(
            "base LM dims {:?} differ from config {:?}",
            base.dims, cfg.dims
        )));
    }
    let bos = data.bos();
    let (m2, m3) = recipe_methods(recipe, cfg);
    let mut records = Vec::new();

    let proxy = if recipe.uses_proxy() {
        let stage = cfg.stage_config(StageTag::ProxyTrain, Objective::Vanilla, LlmSource::Base);
        let out = train_proxy(base, &data.captions, &stage, bos)?;
        records.push(out.record);
        Some(out.model)
    } else {
        None
    };

    let (stage2_llm, src2) = match &proxy {
        Some(p) => (p, LlmSource::Proxy),
        None => (base, LlmSource::Base),
    };
    let stage = cfg.stage_config(StageTag::MmPretrain, m2, src2);
    let stage2_init = stage2_llm.clone();
    let out2 = pretrain_mm(stage2_init.clone(), &data.captions, &stage, Some(&data.probe), bos)?;
    records.push(out2.record);

    let (llm3, src3) = match (&proxy, cfg.stages.instruct_llm) {
        (Some(p), LlmSource::Proxy) => (p, LlmSource::Proxy),
        (Some(_), _) => (base, LlmSource::Target),
        (None, _) => (base, LlmSource::Base),
    };
    let stage = cfg.stage_config(StageTag::InstructTune, m3, src3);
    let out3 = instruct_tune(llm3, &out2.model, &data.instruct, &stage, Some(&data.probe), bos)?;
    let mut record3 = out3.record;
    if src3 == LlmSource::Proxy {
        record3.label = format!("{}[llm=proxy]", record3.label);
    }
    records.push(record3);

    Ok(RecipeOutput {
        recipe,
        records,
        proxy,
        stage2_init,
        stage2: out2.model,
        final_model: out3.model,
        stage2_method: m2,
        stage3_method: m3,
        stage3_llm: src3,
    })
}

/// Compact outcome of a recipe run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeSummary {
    pub recipe: Recipe,
    pub seed: u64,
    pub stage2_method: Objective,
    pub stage3_method: Objective,
    pub stage3_llm: LlmSource,
    pub final_probe_acc: Option<f64>,
    pub final_losses: Vec<(String, Option<f64>)>,
}

impl<T: Real> RecipeOutput<T> {
    pub fn summary(&self, seed: u64) -> RecipeSummary {
        RecipeSummary {
            recipe: self.recipe,
            seed,
            stage2_method: self.stage2_method,
            stage3_method: self.stage3_method,
            stage3_llm: self.stage3_llm,
            final_probe_acc: self.final_probe(),
            final_losses: self.records.iter().map(|r| (r.label.clone(), r.final_loss())).collect(),
        }
    }
}

impl RecipeOutput<f32> {
    /// Writes checkpoints, per-stage CSVs, and summaries into `dir`.
    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = self.records.clone();
        let steps = |t: StageTag| cfg.stage_settings(t).steps;
        let save = |model: &Model<f32>, stage: StageTag, file: &str| -> Result<String> {
            let path = dir.join(file);
            Checkpoint::new(model.clone(), provenance(cfg, stage, Some(self.recipe), steps(stage))?).save(&path)?;
            Ok(file.to_string())
        };
        if let Some(p) = &self.proxy {
            let f = save(p, StageTag::ProxyTrain, "proxy.ckpt")?;
            records[0].checkpoint = Some(f);
        }
        save(&self.stage2_init, StageTag::MmPretrain, "mm_init.ckpt")?;
        let n = records.len();
        records[n - 2].checkpoint = Some(save(&self.stage2, StageTag::MmPretrain, "mm_pretrain.ckpt")?);
        records[n - 1].checkpoint = Some(save(&self.final_model, StageTag::InstructTune, "final.ckpt")?);
        for r in &records {
            let stage = r.label.split('[').next().unwrap_or(&r.label);
            let path = dir.join(format!("{stage}.csv"));
            std::fs::write(&path, r.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("records.json");
        std::fs::write(&path, serde_json::to_string_pretty(&records)? + "\n").map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.summary(cfg.seed))? + "\n")
            .map_err(|e| Error::io(&path, e))
    }
}
