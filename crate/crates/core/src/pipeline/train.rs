//! The stage-agnostic training loop.

use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::probe_accuracy;
use crate::cmo::{sample_loss, target_labels, CmoConfig, Objective, SampleLoss};
use crate::error::{Error, Result};
use crate::gradcore::{OptimConfig, OptimState, Tensor};
use crate::model::{AssemblyMode, Model};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::synthdata::{MMSample, ProbeItem};

/// Environment variable capping intra-step parallelism; `1` is the reference mode.
pub const THREADS_ENV: &str = "PROXY_ALIGN_THREADS";

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub probe_acc: Option<f64>,
}

/// Loss curve and probe metrics of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub steps: Vec<StepRecord>,
    pub trainable_params: usize,
    pub corpus_size: usize,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn final_probe(&self) -> Option<f64> {
        self.steps.iter().rev().find_map(|s| s.probe_acc)
    }

    /// `step,loss,probe_acc` rows; probe cells are empty where not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,probe_acc\n");
        for s in &self.steps {
            let probe = s.probe_acc.map(|p| format!("{p}")).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", s.step, s.loss, probe));
        }
        out
    }

    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.label == other.label
            && self.trainable_params == other.trainable_params
            && self.corpus_size == other.corpus_size
            && self.checkpoint == other.checkpoint
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.probe_acc.map(f64::to_bits) == b.probe_acc.map(f64::to_bits)
            })
    }
}

/// Everything the loop needs besides the model and the data.
#[derive(Clone, Debug)]
pub struct LoopSettings {
    pub label: String,
    pub objective: Objective,
    pub mode: AssemblyMode,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optim: OptimConfig,
    pub cmo: CmoConfig,
    pub stream: SeedStream,
    pub probe_every: usize,
    /// Share of text-only samples that get their visual words as context slots.
    pub context_fraction: f64,
}

fn batch_grads<T: Real>(
    model: &Model<T>,
    batch: &[(&MMSample, AssemblyMode)],
    settings: &LoopSettings,
    bos: u32,
    threads: usize,
) -> Result<Vec<SampleLoss<T>>> {
    let one = |&(s, mode): &(&MMSample, AssemblyMode)| -> Result<SampleLoss<T>> {
        let input = model.assemble(s, mode, bos)?;
        sample_loss(
            model,
            &input,
            &target_labels(s),
            settings.objective,
            &settings.cmo,
            true,
        )
    };
    if threads <= 1 {
        batch.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().map(one).collect())
    }
}

/// Trains `model`'s trainable parameters on `corpus`. Batches are drawn with
/// replacement from the settings' seed stream; per-sample gradients are summed
/// in batch order so results do not depend on the thread count.
pub fn train<T: Real>(
    model: &mut Model<T>,
    corpus: &[MMSample],
    settings: &LoopSettings,
    probe: Option<&[ProbeItem]>,
    bos: u32,
) -> Result<RunRecord> {
    if corpus.is_empty() {
        return Err(Error::Invalid(format!("{}: empty corpus", settings.label)));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config(format!(
            "{}: batch size must be positive",
            settings.label
        )));
    }
    settings.cmo.validate()?;
    if !(0.0..=1.0).contains(&settings.context_fraction) {
        return Err(Error::Config(format!(
            "context fraction {} outside [0, 1]",
            settings.context_fraction
        )));
    }
    let started = Instant::now();
    let threads = thread_count();
    let mut rng = settings.stream.rng();
    let mut optim = OptimState::<T>::new(settings.optim.clone(), settings.lr)?;
    let names = model.params.trainable_names();
    let mut record = RunRecord {
        label: settings.label.clone(),
        steps: Vec::with_capacity(settings.steps),
        trainable_params: model.params.trainable_count(),
        corpus_size: corpus.len(),
        wall_clock_secs: 0.0,
        checkpoint: None,
    };
    let inv_batch = T::one() / T::from_usize(settings.batch_size).expect("batch");

    for step in 1..=settings.steps {
        let batch: Vec<(&MMSample, AssemblyMode)> = (0..settings.batch_size)
            .map(|_| {
                let s = &corpus[rng.random_range(0..corpus.len())];
                let mode = match settings.mode {
                    AssemblyMode::TextOnly if settings.context_fraction > 0.0 => {
                        if rng.random::<f64>() < settings.context_fraction {
                            AssemblyMode::TextWithContext
                        } else {
                            AssemblyMode::TextOnly
                        }
                    }
                    m => m,
                };
                (s, mode)
            })
            .collect();
        let results = batch_grads(model, &batch, settings, bos, threads)?;

        let mut loss = T::zero();
        let mut acc: Vec<Tensor<T>> = Vec::new();
        for r in results {
            loss += r.loss;
            if acc.is_empty() {
                acc = r.grads.into_iter().map(|(_, g)| g).collect();
            } else {
                for (a, (_, g)) in acc.iter_mut().zip(&r.grads) {
                    a.axpy(T::one(), g)?;
                }
            }
        }
        let loss = (loss * inv_batch).as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        for g in &mut acc {
            g.data_mut().iter_mut().for_each(|x| *x *= inv_batch);
            if !g.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
        }
        if acc.len() == names.len() {
            let updates = model
                .params
                .iter_mut()
                .filter(|(_, p)| p.trainable)
                .zip(acc.iter())
                .map(|((name, p), g)| (name, &mut p.tensor, g));
            optim.step(updates)?;
        }

        let probe_acc = match probe {
            Some(items) if settings.probe_every > 0 && (step % settings.probe_every == 0 || step == settings.steps) => {
                Some(probe_accuracy(model, items, bos)?.accuracy)
            }
            _ => None,
        };
        record.steps.push(StepRecord { step, loss, probe_acc });
        if step % 100 == 0 {
            log::debug!("{} step {step}: loss {loss:.4}", settings.label);
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}
