//! One-axis ablation sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Recipe, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;

use super::data::DataBundle;
use super::recipe::{build_base_lm, run_recipe};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LoraRank,
    ClipBounds,
    CmoStages,
    DataFraction,
    ModelScale,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::LoraRank,
        SweepAxis::ClipBounds,
        SweepAxis::CmoStages,
        SweepAxis::DataFraction,
        SweepAxis::ModelScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::LoraRank => "lora_rank",
            SweepAxis::ClipBounds => "clip_bounds",
            SweepAxis::CmoStages => "cmo_stages",
            SweepAxis::DataFraction => "data_fraction",
            SweepAxis::ModelScale => "model_scale",
        }
    }

    /// Values from the config's `[sweep]` section (fixed for `cmo_stages`).
    pub fn default_values(self, cfg: &RunConfig) -> Vec<AxisValue> {
        let s = &cfg.sweep;
        match self {
            SweepAxis::LoraRank => s.lora_rank.iter().map(|&r| AxisValue::LoraRank(r)).collect(),
            SweepAxis::ClipBounds => s
                .clip_bounds
                .iter()
                .map(|&[a, b]| AxisValue::ClipBounds(a, b))
                .collect(),
            SweepAxis::CmoStages => [(false, false), (true, false), (false, true), (true, true)]
                .into_iter()
                .map(|(p, i)| AxisValue::CmoStages(p, i))
                .collect(),
            SweepAxis::DataFraction => s.data_fraction.iter().map(|&f| AxisValue::DataFraction(f)).collect(),
            SweepAxis::ModelScale => s.model_scale.iter().map(|&d| AxisValue::ModelScale(d)).collect(),
        }
    }

    /// Parses a comma-separated value list. Clip bounds are written `lo:hi`,
    /// CMO stage pairs `on:off` etc.
    pub fn parse_values(self, list: &str) -> Result<Vec<AxisValue>> {
        let bad = |v: &str| Error::Config(format!("invalid {} value `{v}`", self.as_str()));
        let flag = |v: &str| match v {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            _ => Err(bad(v)),
        };
        list.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| -> Result<AxisValue> {
                match self {
                    SweepAxis::LoraRank => v.parse().map(AxisValue::LoraRank).map_err(|_| bad(v)),
                    SweepAxis::DataFraction => v.parse().map(AxisValue::DataFraction).map_err(|_| bad(v)),
                    SweepAxis::ModelScale => v.parse().map(AxisValue::ModelScale).map_err(|_| bad(v)),
                    SweepAxis::ClipBounds => {
                        let (a, b) = v.split_once(':').ok_or_else(|| bad(v))?;
                        Ok(AxisValue::ClipBounds(
                            a.parse().map_err(|_| bad(v))?,
                            b.parse().map_err(|_| bad(v))?,
                        ))
                    }
                    SweepAxis::CmoStages => {
                        let (a, b) = v.split_once(':').ok_or_else(|| bad(v))?;
                        Ok(AxisValue::CmoStages(flag(a)?, flag(b)?))
                    }
                }
            })
            .collect()
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        SweepAxis::ALL.into_iter().find(|a| a.as_str() == norm).ok_or_else(|| {
            let valid: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
            Error::Config(format!("unknown sweep axis `{s}`; valid axes: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisValue {
    LoraRank(usize),
    ClipBounds(f64, f64),
    /// CMO in (pretraining, instruction tuning).
    CmoStages(bool, bool),
    DataFraction(f64),
    /// `d_model` of the LM.
    ModelScale(usize),
}

impl AxisValue {
    pub fn axis(&self) -> SweepAxis {
        match self {
            AxisValue::LoraRank(_) => SweepAxis::LoraRank,
            AxisValue::ClipBounds(..) => SweepAxis::ClipBounds,
            AxisValue::CmoStages(..) => SweepAxis::CmoStages,
            AxisValue::DataFraction(_) => SweepAxis::DataFraction,
            AxisValue::ModelScale(_) => SweepAxis::ModelScale,
        }
    }

    pub fn label(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        match *self {
            AxisValue::LoraRank(r) => format!("rank{r}"),
            AxisValue::ClipBounds(a, b) => format!("clip{a}-{b}"),
            AxisValue::CmoStages(p, i) => format!("pre-{}_inst-{}", onoff(p), onoff(i)),
            AxisValue::DataFraction(f) => format!("frac{f}"),
            AxisValue::ModelScale(d) => format!("d{d}"),
        }
    }

    /// Returns `base` with this value applied.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match *self {
            AxisValue::LoraRank(r) => {
                cfg.lora.rank = r;
                cfg.lora.alpha = 2.0 * r as f64;
                if r == 0 || r > cfg.dims.d_model {
                    return Err(Error::Config(format!("lora rank {r} outside 1..={}", cfg.dims.d_model)));
                }
            }
            AxisValue::ClipBounds(a, b) => {
                cfg.cmo.alpha = a;
                cfg.cmo.beta = b;
            }
            AxisValue::CmoStages(p, i) => {
                cfg.cmo.apply_in_pretraining = p;
                cfg.cmo.apply_in_instruction_tuning = i;
            }
            AxisValue::DataFraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("data fraction {f} outside (0, 1]")));
                }
                let scale = |n: usize| ((n as f64 * f).round() as usize).max(1);
                cfg.data.n_captions = scale(base.data.n_captions);
                cfg.stages.proxy_train.steps = scale(base.stages.proxy_train.steps);
                cfg.stages.mm_pretrain.steps = scale(base.stages.mm_pretrain.steps);
            }
            AxisValue::ModelScale(d) => {
                cfg.dims.d_model = d;
                cfg.dims.d_ff = 4 * d;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: AxisValue,
    pub label: String,
    pub probe_acc: Option<f64>,
    pub stage2_final_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Caption samples drawn across proxy and connector pretraining.
    pub caption_samples_seen: usize,
    pub trainable_params: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub recipe: Recipe,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,recipe,probe_acc,stage2_final_loss,final_loss,caption_samples_seen\n");
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.axis,
                r.label,
                self.recipe,
                opt(r.probe_acc),
                opt(r.stage2_final_loss),
                opt(r.final_loss),
                r.caption_samples_seen
            ));
        }
        out
    }
}

/// Runs `recipe` once per value with shared seeds. The base LM is trained once
/// and shared unless the axis changes the model dimensions. Rows follow the
/// input order; per-value outputs go to `out/<index>_<label>/` when given.
pub fn sweep(
    values: &[AxisValue],
    recipe: Recipe,
    base_cfg: &RunConfig,
    data: &DataBundle,
    shared_base: Option<&Model<f32>>,
    out: Option<&Path>,
) -> Result<SweepReport> {
    let axis = match values.first() {
        Some(v) => v.axis(),
        None => return Err(Error::Config("sweep needs at least one value".into())),
    };
    if values.iter().any(|v| v.axis() != axis) {
        return Err(Error::Config("sweep values must share one axis".into()));
    }
    let configs: Vec<RunConfig> = values.iter().map(|v| v.apply(base_cfg)).collect::<Result<_>>()?;
    let bos = data.bos();
    let mut base_cache: Option<Model<f32>> = shared_base.cloned();
    let mut rows = Vec::with_capacity(values.len());
    for (i, (value, cfg)) in values.iter().zip(&configs).enumerate() {
        log::info!("sweep {axis} [{}/{}]: {}", i + 1, values.len(), value.label());
        let base = match (&base_cache, axis) {
            (Some(b), a) if a != SweepAxis::ModelScale => b.clone(),
            _ => {
                let (b, _) = build_base_lm::<f32>(cfg, &data.base, bos)?;
                if axis != SweepAxis::ModelScale {
                    base_cache = Some(b.clone());
                }
                b
            }
        };
        let mut run_data = data.clone();
        run_data.captions.truncate(cfg.data.n_captions);
        let result = run_recipe(recipe, &base, &run_data, cfg)?;
        if let Some(dir) = out {
            result.write(cfg, &dir.join(format!("{i:02}_{}", value.label())))?;
        }
        let stage2 = &result.records[result.records.len() - 2];
        let caption_samples_seen = result
            .records
            .iter()
            .filter(|r| r.label.starts_with("proxy_train") || r.label.starts_with("mm_pretrain"))
            .map(|r| r.steps.len() * cfg.stage_settings(stage_of(&r.label)).batch_size)
            .sum();
        rows.push(SweepRow {
            value: *value,
            label: value.label(),
            probe_acc: result.final_probe(),
            stage2_final_loss: stage2.final_loss(),
            final_loss: result.records.last().and_then(|r| r.final_loss()),
            caption_samples_seen,
            trainable_params: result
                .records
                .iter()
                .map(|r| (r.label.clone(), r.trainable_params))
                .collect(),
        });
    }
    Ok(SweepReport {
        axis,
        recipe,
        seed: base_cfg.seed,
        rows,
    })
}

fn stage_of(label: &str) -> super::stages::StageTag {
    use super::stages::StageTag;
    if label.starts_with("proxy_train") {
        StageTag::ProxyTrain
    } else {
        StageTag::MmPretrain
    }
}
