//! Post-hoc measurements over checkpoints and corpora: word-level loss change,
//! δ histograms, probe accuracy, the register paradox grid, and report files.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cmo::delta_trace;
use crate::config::{Recipe, RunConfig};
use crate::error::{Error, Result};
use crate::model::{AssemblyMode, ForwardOpts, Model};
use crate::pipeline::{run_recipe, DataBundle};
use crate::scalar::Real;
use crate::synthdata::{MMSample, ProbeItem, QuestionType, Register, Vocab, WordClass};

pub const CLASSES: [WordClass; 3] = [WordClass::Visual, WordClass::Style, WordClass::Other];

/// Words whose base loss is below this are left out of percentage changes.
pub const MIN_BASE_LOSS: f64 = 1e-6;

/// Anything that can be written as JSON and as a flat CSV table.
pub trait Report: Serialize + DeserializeOwned {
    fn csv_header(&self) -> &'static str;
    fn csv_rows(&self) -> Vec<String>;

    fn to_csv(&self) -> String {
        let mut out = String::from(self.csv_header());
        out.push('\n');
        for row in self.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn emit_report<R: Report>(report: &R, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json_report<R: Report>(path: &Path) -> Result<R> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Equal-width bins over `[lo, hi]`; the last bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub left_edges: Vec<f64>,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0; bins];
        for v in values {
            let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self {
            left_edges: (0..bins).map(|i| lo + i as f64 * width).collect(),
            width,
            counts,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Index of the bin holding `v`.
    pub fn bin_of(&self, v: f64) -> usize {
        let lo = self.left_edges[0];
        (((v - lo) / self.width).floor().max(0.0) as usize).min(self.counts.len() - 1)
    }
}

// ---------------------------------------------------------------------------
// Word-level loss change

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordLossRecord {
    pub word: String,
    pub tokens: Vec<u32>,
    pub class: WordClass,
    pub loss_before: f64,
    pub loss_after: f64,
    pub pct_change: f64,
    pub frequency: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: WordClass,
    pub n_words: usize,
    pub mean_pct_change: f64,
    pub std_pct_change: f64,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossChangeReport {
    pub n_samples: usize,
    pub min_freq: usize,
    pub words: Vec<WordLossRecord>,
    /// Only classes with at least one reported word.
    pub classes: Vec<ClassSummary>,
}

impl LossChangeReport {
    pub fn class(&self, class: WordClass) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn words_csv(&self) -> String {
        let mut out = String::from("word,class,loss_before,loss_after,pct_change,frequency\n");
        for w in &self.words {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                w.word,
                class_name(w.class),
                w.loss_before,
                w.loss_after,
                w.pct_change,
                w.frequency
            ));
        }
        out
    }
}

impl Report for LossChangeReport {
    fn csv_header(&self) -> &'static str {
        "class,left_edge,count"
    }

    fn csv_rows(&self) -> Vec<String> {
        self.classes
            .iter()
            .flat_map(|c| {
                c.histogram
                    .left_edges
                    .iter()
                    .zip(&c.histogram.counts)
                    .map(move |(e, n)| format!("{},{e},{n}", class_name(c.class)))
            })
            .collect()
    }
}

pub fn class_name(c: WordClass) -> &'static str {
    match c {
        WordClass::Visual => "visual",
        WordClass::Style => "style",
        WordClass::Other => "other",
    }
}

/// Surface form of a word from its tokens (`tri ##angle` → `triangle`).
pub fn word_text(vocab: &Vocab, tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| vocab.word(t).trim_start_matches("##").to_string())
        .collect()
}

/// Negative log-likelihood of the first token of every labeled word, in span order.
pub fn word_first_token_losses<T: Real>(model: &Model<T>, sample: &MMSample, bos: u32) -> Result<Vec<f64>> {
    let input = model.assemble(sample, AssemblyMode::Multimodal, bos)?;
    let logp = model.target_log_probs(&input, ForwardOpts::default())?;
    sample
        .spans
        .iter()
        .map(|s| {
            logp.get(s.start)
                .map(|&l| -l.as_f64())
                .ok_or_else(|| Error::Invalid(format!("span at {} outside the caption", s.start)))
        })
        .collect()
}

/// Per-word loss change between two checkpoints. A word's loss is the NLL of
/// its first token under the multimodal forward; losses are averaged per word
/// before the percentage change is taken. Words seen fewer than `min_freq`
/// times, or with a base loss below [`MIN_BASE_LOSS`], are dropped.
pub fn word_loss_change<T: Real>(
    before: &Model<T>,
    after: &Model<T>,
    samples: &[MMSample],
    vocab: &Vocab,
    min_freq: usize,
    bins: usize,
) -> Result<LossChangeReport> {
    if before.dims != after.dims {
        return Err(Error::Invalid(format!(
            "checkpoints differ in dims: {:?} vs {:?}",
            before.dims, after.dims
        )));
    }
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let bos = vocab.bos();
    struct Acc {
        class: WordClass,
        before: f64,
        after: f64,
        n: usize,
    }
    let mut acc: IndexMap<Vec<u32>, Acc> = IndexMap::new();
    for s in samples {
        let lb = word_first_token_losses(before, s, bos)?;
        let la = word_first_token_losses(after, s, bos)?;
        for (((ids, span), b), a) in s.words().zip(lb).zip(la) {
            let e = acc.entry(ids.to_vec()).or_insert(Acc {
                class: span.label,
                before: 0.0,
                after: 0.0,
                n: 0,
            });
            e.before += b;
            e.after += a;
            e.n += 1;
        }
    }
    let mut words: Vec<WordLossRecord> = acc
        .into_iter()
        .filter(|(_, a)| a.n >= min_freq)
        .map(|(tokens, a)| {
            let (b, l) = (a.before / a.n as f64, a.after / a.n as f64);
            WordLossRecord {
                word: word_text(vocab, &tokens),
                tokens,
                class: a.class,
                loss_before: b,
                loss_after: l,
                pct_change: 100.0 * (l - b) / b,
                frequency: a.n,
            }
        })
        .filter(|w| w.loss_before >= MIN_BASE_LOSS && w.pct_change.is_finite())
        .collect();
    words.sort_by(|x, y| (x.class, &x.word).cmp(&(y.class, &y.word)));

    let (lo, hi) = words.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| {
        (lo.min(w.pct_change), hi.max(w.pct_change))
    });
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let classes = CLASSES
        .iter()
        .filter_map(|&class| {
            let xs: Vec<f64> = words
                .iter()
                .filter(|w| w.class == class)
                .map(|w| w.pct_change)
                .collect();
            if xs.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&xs);
            Some(ClassSummary {
                class,
                n_words: xs.len(),
                mean_pct_change: mean,
                std_pct_change: std,
                histogram: Histogram::new(lo, hi, bins, xs),
            })
        })
        .collect();
    Ok(LossChangeReport {
        n_samples: samples.len(),
        min_freq,
        words,
        classes,
    })
}

// ---------------------------------------------------------------------------
// δ histograms

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaClassStats {
    pub class: WordClass,
    pub n_tokens: usize,
    pub mean_delta: f64,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogramReport {
    pub beta: f64,
    pub n_tokens: usize,
    pub fraction_below_beta: f64,
    pub classes: Vec<DeltaClassStats>,
}

impl DeltaHistogramReport {
    pub fn class(&self, class: WordClass) -> Option<&DeltaClassStats> {
        self.classes.iter().find(|c| c.class == class)
    }
}

impl Report for DeltaHistogramReport {
    fn csv_header(&self) -> &'static str {
        "class,left_edge,count"
    }

    fn csv_rows(&self) -> Vec<String> {
        self.classes
            .iter()
            .flat_map(|c| {
                c.histogram
                    .left_edges
                    .iter()
                    .zip(&c.histogram.counts)
                    .map(move |(e, n)| format!("{},{e},{n}", class_name(c.class)))
            })
            .collect()
    }
}

/// Histogram of `δ = r − q` over `[-1, 1]` for every unmasked caption token,
/// split by word class, with the share of tokens below `beta`.
pub fn delta_histogram<T: Real>(
    model: &Model<T>,
    samples: &[MMSample],
    bins: usize,
    beta: f64,
    bos: u32,
    opts: ForwardOpts,
) -> Result<DeltaHistogramReport> {
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let trace: Vec<(f64, WordClass)> = delta_trace(model, samples, bos, opts)?
        .into_iter()
        .map(|(d, c)| (d.as_f64(), c))
        .collect();
    let below = trace.iter().filter(|(d, _)| *d < beta).count();
    let classes = CLASSES
        .iter()
        .map(|&class| {
            let xs: Vec<f64> = trace.iter().filter(|(_, c)| *c == class).map(|(d, _)| *d).collect();
            DeltaClassStats {
                class,
                n_tokens: xs.len(),
                mean_delta: mean_std(&xs).0,
                histogram: Histogram::new(-1.0, 1.0, bins, xs),
            }
        })
        .collect();
    Ok(DeltaHistogramReport {
        beta,
        n_tokens: trace.len(),
        fraction_below_beta: if trace.is_empty() {
            0.0
        } else {
            below as f64 / trace.len() as f64
        },
        classes,
    })
}

// ---------------------------------------------------------------------------
// Probe accuracy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTypeResult {
    pub question_type: QuestionType,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub per_type: Vec<ProbeTypeResult>,
}

impl Report for ProbeReport {
    fn csv_header(&self) -> &'static str {
        "question_type,accuracy,n"
    }

    fn csv_rows(&self) -> Vec<String> {
        let mut rows = vec![format!("all,{},{}", self.accuracy, self.n)];
        rows.extend(self.per_type.iter().map(|t| {
            let name = serde_json::to_value(t.question_type)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            format!("{name},{},{}", t.accuracy, t.n)
        }));
        rows
    }
}

/// Picks the candidate with the highest probability at the answer position.
/// Ties go to the smallest token id, so candidate order never matters.
pub fn probe_answer<T: Real>(model: &Model<T>, item: &ProbeItem, bos: u32) -> Result<u32> {
    if item.candidates.is_empty() {
        return Err(Error::Invalid("probe item without candidates".into()));
    }
    let input = model.assemble(&item.sample, AssemblyMode::Multimodal, bos)?;
    let out = model.forward_lm(&input, ForwardOpts::default())?;
    let row = out.probs.row(input.text_len() - 1);
    let mut best: Option<(T, u32)> = None;
    for &c in &item.candidates {
        let p = *row
            .get(c as usize)
            .ok_or_else(|| Error::Invalid(format!("candidate {c} outside vocabulary")))?;
        best = match best {
            Some((bp, bc)) if bp > p || (bp == p && bc < c) => Some((bp, bc)),
            _ => Some((p, c)),
        };
    }
    Ok(best.expect("non-empty").1)
}

pub fn probe_accuracy<T: Real>(model: &Model<T>, items: &[ProbeItem], bos: u32) -> Result<ProbeReport> {
    if items.is_empty() {
        return Err(Error::Invalid("empty probe set".into()));
    }
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for item in items {
        let t = QuestionType::ALL
            .iter()
            .position(|&q| q == item.question_type)
            .expect("type");
        totals[t] += 1;
        if probe_answer(model, item, bos)? == item.gold {
            hits[t] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let per_type = QuestionType::ALL
        .iter()
        .enumerate()
        .filter(|(i, _)| totals[*i] > 0)
        .map(|(i, &q)| ProbeTypeResult {
            question_type: q,
            accuracy: hits[i] as f64 / totals[i] as f64,
            n: totals[i],
        })
        .collect();
    Ok(ProbeReport {
        accuracy: correct as f64 / items.len() as f64,
        correct,
        n: items.len(),
        per_type,
    })
}

// ---------------------------------------------------------------------------
// Register paradox

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadoxCell {
    /// Register the base LM was pretrained on.
    pub prior: Register,
    /// Register of the multimodal captions.
    pub captions: Register,
    pub probe_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadoxContrast {
    pub name: String,
    pub prior: Register,
    /// Accuracy with register-B captions minus accuracy with register-A captions.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadoxReport {
    pub seed: u64,
    pub cells: Vec<ParadoxCell>,
    pub contrasts: Vec<ParadoxContrast>,
}

impl ParadoxReport {
    pub fn cell(&self, prior: Register, captions: Register) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.prior == prior && c.captions == captions)
            .map(|c| c.probe_acc)
    }
}

impl Report for ParadoxReport {
    fn csv_header(&self) -> &'static str {
        "row,prior,captions,value"
    }

    fn csv_rows(&self) -> Vec<String> {
        let cells = self
            .cells
            .iter()
            .map(|c| format!("cell,{},{},{}", c.prior, c.captions, c.probe_acc));
        let contrasts = self
            .contrasts
            .iter()
            .map(|c| format!("{},{},B-A,{}", c.name, c.prior, c.value));
        cells.chain(contrasts).collect()
    }
}

/// Trains one base LM per register.
pub fn paradox_bases(cfg: &RunConfig, bos: u32) -> Result<[Model<f32>; 2]> {
    let train = |r: Register| -> Result<Model<f32>> {
        let corpus = DataBundle::base_corpus_in(cfg, r);
        Ok(crate::pipeline::build_base_lm::<f32>(cfg, &corpus, bos)?.0)
    };
    Ok([train(Register::A)?, train(Register::B)?])
}

/// Runs the vanilla recipe for every (base-LM prior, caption register) pair on
/// the same images and reports probe accuracy per cell. The "matched" prior is
/// register B, the register of the rich captions.
pub fn paradox_experiment(cfg: &RunConfig, bases: [&Model<f32>; 2], data: &DataBundle) -> Result<ParadoxReport> {
    let mut cells = Vec::with_capacity(4);
    for (prior, base) in [Register::A, Register::B].into_iter().zip(bases) {
        for captions in [Register::A, Register::B] {
            let mut d = data.clone();
            d.captions = DataBundle::captions_in(cfg, captions);
            let mut c = cfg.clone();
            c.data.base_register = prior;
            c.data.caption_register = captions;
            let out = run_recipe(Recipe::Vanilla, base, &d, &c)?;
            let acc = probe_accuracy(&out.final_model, &data.probe, data.bos())?.accuracy;
            log::info!("paradox prior {prior} captions {captions}: probe {acc:.4}");
            cells.push(ParadoxCell {
                prior,
                captions,
                probe_acc: acc,
            });
        }
    }
    let get = |p, c| {
        cells
            .iter()
            .find(|x: &&ParadoxCell| x.prior == p && x.captions == c)
            .expect("cell")
            .probe_acc
    };
    let contrasts = vec![
        ParadoxContrast {
            name: "matched_register_gain".into(),
            prior: Register::B,
            value: get(Register::B, Register::B) - get(Register::B, Register::A),
        },
        ParadoxContrast {
            name: "conflicting_register_loss".into(),
            prior: Register::A,
            value: get(Register::A, Register::B) - get(Register::A, Register::A),
        },
    ];
    Ok(ParadoxReport {
        seed: cfg.seed,
        cells,
        contrasts,
    })
}

// ---------------------------------------------------------------------------
// External labels

/// Reads a `labels.json` object mapping words (or numeric token ids) to classes.
pub fn read_labels(path: &Path) -> Result<HashMap<String, WordClass>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Replaces span labels with those in `labels`. A word matches by its surface
/// form or by the id of its first token. Returns the number of changed spans.
pub fn apply_labels(samples: &mut [MMSample], labels: &HashMap<String, WordClass>, vocab: &Vocab) -> usize {
    let mut changed = 0;
    for s in samples {
        let caption = s.caption.clone();
        for span in &mut s.spans {
            let tokens = &caption[span.start..span.start + span.len];
            let found = labels
                .get(&word_text(vocab, tokens))
                .or_else(|| labels.get(&tokens[0].to_string()));
            if let Some(&class) = found {
                if class != span.label {
                    span.label = class;
                    changed += 1;
                }
            }
        }
    }
    changed
}
