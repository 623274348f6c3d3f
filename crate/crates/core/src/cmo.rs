//! Contrastive token reweighting.
//!
//! For every caption token the model is run twice: once with the image
//! (`r = p(s_j | V, S<j)`) and once on the text alone (`q = p(s_j | S<j)`). The
//! difference `δ = r − q` measures how much the image helps predict the token.
//! Deltas are clipped to `[alpha, beta]`, mean-pooled over a centered window,
//! and normalized into per-token loss weights. The weights are constants with
//! respect to the gradient; only `log p(s_j | V, S<j)` is differentiated.
//!
//! The logits-differential baseline runs the same pipeline on
//! `δ = z_img[s_j] − z_text[s_j]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::graph::softmax_rows;
use crate::gradcore::{Graph, Tensor};
use crate::model::{AssembledInput, AssemblyMode, Binder, ForwardOpts, Model};
use crate::scalar::Real;
use crate::synthdata::{MMSample, WordClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CmoConfig {
    /// Lower clip bound.
    pub alpha: f64,
    /// Upper clip bound.
    pub beta: f64,
    /// Odd pooling width.
    pub window: usize,
    pub apply_in_pretraining: bool,
    pub apply_in_instruction_tuning: bool,
}

impl Default for CmoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.5,
            window: 3,
            apply_in_pretraining: true,
            apply_in_instruction_tuning: true,
        }
    }
}

impl CmoConfig {
    /// `alpha == beta` is accepted: it degenerates the weighting to plain CE.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) || self.alpha > self.beta {
            return Err(Error::Config(format!(
                "cmo bounds must satisfy 0 ≤ alpha ≤ beta ≤ 1, got [{}, {}]",
                self.alpha, self.beta
            )));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cmo window must be odd and ≥ 1, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Loss used by a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Plain next-token cross-entropy.
    Vanilla,
    /// Probability-differential token weighting.
    Cmo,
    /// Logit-differential token weighting.
    CalLike,
}

/// Clip, pool, and normalize trace for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights<T> {
    pub delta: Vec<T>,
    pub clipped: Vec<T>,
    pub pooled: Vec<T>,
    pub weight: Vec<T>,
    pub loss_mask: Vec<bool>,
}

/// Per-position trace of the weighting for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeightReport<T> {
    pub r: Vec<T>,
    pub q: Vec<T>,
    #[serde(flatten)]
    pub weights: TokenWeights<T>,
    pub labels: Vec<WordClass>,
}

/// Clips `delta` to `[alpha, beta]`, mean-pools over the centered window
/// (restricted to in-range unmasked neighbours), and normalizes over the
/// unmasked positions. Masked positions get weight exactly 0. Equal clipped
/// scores (for instance `r = q` everywhere) give exactly uniform weights, as
/// does an all-zero pooled vector (possible only with `alpha = 0`).
pub fn weights_from_deltas<T: Real>(delta: &[T], cfg: &CmoConfig, loss_mask: &[bool]) -> Result<TokenWeights<T>> {
    cfg.validate()?;
    if delta.len() != loss_mask.len() {
        return Err(Error::shape(
            "weights_from_deltas",
            format!("{} deltas, {} mask", delta.len(), loss_mask.len()),
        ));
    }
    let active = loss_mask.iter().filter(|&&k| k).count();
    if active == 0 {
        return Err(Error::Invalid("weights_from_deltas: every position is masked".into()));
    }
    let (lo, hi) = (T::lit(cfg.alpha), T::lit(cfg.beta));
    let clipped: Vec<T> = delta.iter().map(|&d| d.max(lo).min(hi)).collect();
    let half = cfg.window / 2;
    let m = delta.len();
    let pooled: Vec<T> = (0..m)
        .map(|j| {
            if !loss_mask[j] {
                return T::zero();
            }
            let (start, end) = (j.saturating_sub(half), (j + half).min(m - 1));
            let (sum, n) = (start..=end)
                .filter(|&k| loss_mask[k])
                .fold((T::zero(), 0usize), |(s, n), k| (s + clipped[k], n + 1));
            sum / T::from_usize(n).expect("count")
        })
        .collect();
    let total: T = pooled.iter().copied().sum();
    let mut kept = clipped.iter().zip(loss_mask).filter(|(_, &k)| k).map(|(&c, _)| c);
    let first = kept.next().expect("at least one unmasked position");
    let flat = kept.all(|c| c == first);
    let weight = if total > T::zero() && !flat {
        pooled.iter().map(|&p| p / total).collect()
    } else {
        let u = T::one() / T::from_usize(active).expect("count");
        loss_mask.iter().map(|&k| if k { u } else { T::zero() }).collect()
    };
    Ok(TokenWeights {
        delta: delta.to_vec(),
        clipped,
        pooled,
        weight,
        loss_mask: loss_mask.to_vec(),
    })
}

/// Word class of every target position.
pub fn target_labels(sample: &MMSample) -> Vec<WordClass> {
    match (&sample.question, &sample.answer) {
        (Some(q), Some(a)) => std::iter::repeat_n(WordClass::Other, q.len())
            .chain(std::iter::repeat_n(WordClass::Visual, a.len()))
            .collect(),
        _ => {
            let mut labels = vec![WordClass::Other; sample.caption.len()];
            for s in &sample.spans {
                labels[s.start..s.start + s.len].fill(s.label);
            }
            labels
        }
    }
}

fn picked<T: Real>(rows: &[T], width: usize, targets: &[usize]) -> Vec<T> {
    targets.iter().enumerate().map(|(j, &t)| rows[j * width + t]).collect()
}

fn target_probs<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Vec<T> {
    let v = logits.cols();
    picked(&softmax_rows(logits.data(), v), v, targets)
}

/// The two scores whose difference drives the weighting, at each target:
/// probabilities for [`Objective::Cmo`], raw logits for [`Objective::CalLike`].
pub fn contrast_scores<T: Real>(
    with_image: &Tensor<T>,
    without_image: &Tensor<T>,
    targets: &[usize],
    objective: Objective,
) -> Result<(Vec<T>, Vec<T>)> {
    if with_image.shape() != without_image.shape() || with_image.ndim() != 2 || with_image.rows() != targets.len() {
        return Err(Error::shape(
            "contrast_scores",
            format!(
                "{:?} vs {:?} for {} targets",
                with_image.shape(),
                without_image.shape(),
                targets.len()
            ),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= with_image.cols()) {
        return Err(Error::Invalid(format!(
            "target {t} outside vocabulary {}",
            with_image.cols()
        )));
    }
    match objective {
        Objective::Cmo => Ok((target_probs(with_image, targets), target_probs(without_image, targets))),
        Objective::CalLike => Ok((
            picked(with_image.data(), with_image.cols(), targets),
            picked(without_image.data(), without_image.cols(), targets),
        )),
        Objective::Vanilla => Err(Error::Invalid("vanilla CE has no contrast scores".into())),
    }
}

/// `r`, `q`, and `δ = r − q` at each target position (untraced).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDeltas<T> {
    pub r: Vec<T>,
    pub q: Vec<T>,
    pub delta: Vec<T>,
    pub loss_mask: Vec<bool>,
}

pub fn token_deltas<T: Real>(
    model: &Model<T>,
    sample: &MMSample,
    bos: u32,
    opts: ForwardOpts,
) -> Result<TokenDeltas<T>> {
    let mm = model.assemble(sample, AssemblyMode::Multimodal, bos)?;
    let text = model.assemble(sample, AssemblyMode::TextOnly, bos)?;
    let r = target_probs(&model.forward_lm(&mm, opts)?.logits, &mm.targets);
    let q = target_probs(&model.forward_lm(&text, ForwardOpts::default())?.logits, &text.targets);
    let delta = r.iter().zip(&q).map(|(&a, &b)| a - b).collect();
    Ok(TokenDeltas {
        r,
        q,
        delta,
        loss_mask: mm.loss_mask,
    })
}

/// Loss, gradients, and weighting trace for one sequence.
pub struct SampleLoss<T: Real> {
    pub loss: T,
    pub grads: Vec<(String, Tensor<T>)>,
    pub report: Option<TokenWeightReport<T>>,
}

fn text_only_logits<T: Real>(model: &Model<T>, input: &AssembledInput<T>) -> Result<Tensor<T>> {
    let text = AssembledInput {
        attrs: None,
        context_ids: Vec::new(),
        n_visual: 0,
        ..input.clone()
    };
    Ok(model.forward_lm(&text, ForwardOpts::default())?.logits)
}

/// Evaluates `objective` on one multimodal sample. With `track`, gradients of
/// every trainable parameter are returned (zeros for ones the sample does not
/// reach). The contrast forward is never traced.
pub fn sample_loss<T: Real>(
    model: &Model<T>,
    input: &AssembledInput<T>,
    labels: &[WordClass],
    objective: Objective,
    cfg: &CmoConfig,
    track: bool,
) -> Result<SampleLoss<T>> {
    let mut g = Graph::new();
    let mut binder = Binder::new(track);
    let logits = model.forward_graph(&mut g, &mut binder, input, ForwardOpts::default())?;
    let lsm = g.log_softmax(logits)?;
    let logp = g.pick(lsm, &input.targets)?;

    let (weights, report) = match objective {
        Objective::Vanilla => {
            let n = input.loss_mask.iter().filter(|&&k| k).count();
            if n == 0 {
                return Err(Error::Invalid("every target position is masked".into()));
            }
            let u = T::one() / T::from_usize(n).expect("count");
            let w: Vec<T> = input.loss_mask.iter().map(|&k| if k { u } else { T::zero() }).collect();
            (w, None)
        }
        Objective::Cmo | Objective::CalLike => {
            let txt_logits = text_only_logits(model, input)?;
            let (r, q) = contrast_scores(g.value(logits), &txt_logits, &input.targets, objective)?;
            let delta: Vec<T> = r.iter().zip(&q).map(|(&a, &b)| a - b).collect();
            let weights = weights_from_deltas(&delta, cfg, &input.loss_mask)?;
            let w = weights.weight.clone();
            (
                w,
                Some(TokenWeightReport {
                    r,
                    q,
                    weights,
                    labels: labels.to_vec(),
                }),
            )
        }
    };
    let neg: Vec<T> = weights.iter().map(|&w| -w).collect();
    let loss = g.weighted_sum(logp, &neg)?;
    let value = g.value(loss).item();
    let grads = if track {
        let mut grads = g.backward(loss)?;
        binder.collect_grads(&mut grads, &model.params)
    } else {
        Vec::new()
    };
    Ok(SampleLoss {
        loss: value,
        grads,
        report,
    })
}

fn batch_loss<T: Real>(
    model: &Model<T>,
    batch: &[MMSample],
    cfg: &CmoConfig,
    bos: u32,
    objective: Objective,
) -> Result<(T, Vec<TokenWeightReport<T>>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = T::zero();
    let mut reports = Vec::with_capacity(batch.len());
    for sample in batch {
        let input = model.assemble(sample, AssemblyMode::Multimodal, bos)?;
        let out = sample_loss(model, &input, &target_labels(sample), objective, cfg, false)?;
        total += out.loss;
        reports.extend(out.report);
    }
    Ok((total / T::from_usize(batch.len()).expect("len"), reports))
}

/// Weighted NLL averaged over the batch, with the per-sequence weighting traces.
pub fn cmo_loss<T: Real>(
    model: &Model<T>,
    batch: &[MMSample],
    cfg: &CmoConfig,
    bos: u32,
) -> Result<(T, Vec<TokenWeightReport<T>>)> {
    batch_loss(model, batch, cfg, bos, Objective::Cmo)
}

/// Baseline that weights tokens by logit rather than probability differences.
pub fn cal_like_loss<T: Real>(
    model: &Model<T>,
    batch: &[MMSample],
    cfg: &CmoConfig,
    bos: u32,
) -> Result<(T, Vec<TokenWeightReport<T>>)> {
    batch_loss(model, batch, cfg, bos, Objective::CalLike)
}

/// `−Σ_j w_j log p(s_j | V, S<j)` with caller-supplied constant weights.
pub fn weighted_nll<T: Real>(model: &Model<T>, input: &AssembledInput<T>, weights: &[T]) -> Result<T> {
    let logp = model.target_log_probs(input, ForwardOpts::default())?;
    if logp.len() != weights.len() {
        return Err(Error::shape(
            "weighted_nll",
            format!("{} weights for {} positions", weights.len(), logp.len()),
        ));
    }
    Ok(-logp.iter().zip(weights).map(|(&l, &w)| l * w).sum::<T>())
}

/// One `(δ, class)` pair per unmasked target token across `samples`.
pub fn delta_trace<T: Real>(
    model: &Model<T>,
    samples: &[MMSample],
    bos: u32,
    opts: ForwardOpts,
) -> Result<Vec<(T, WordClass)>> {
    let mut out = Vec::new();
    for s in samples {
        let d = token_deltas(model, s, bos, opts)?;
        let labels = target_labels(s);
        for ((&delta, &keep), &label) in d.delta.iter().zip(&d.loss_mask).zip(&labels) {
            if keep {
                out.push((delta, label));
            }
        }
    }
    Ok(out)
}

/// Writes one JSON object per sequence.
pub fn write_reports_jsonl<T: Real + Serialize>(path: &Path, reports: &[TokenWeightReport<T>]) -> Result<()> {
    crate::synthdata::write_jsonl(path, reports)
}
