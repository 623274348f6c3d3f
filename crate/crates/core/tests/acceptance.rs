//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 1 2 11`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::grad::{cases, check_primitive, check_primitive_f32, forward_fd, weighted_loss_fd};
use common::{micro_model, sample, small_config, BOS};
use proxy_align::analysis::{delta_histogram, paradox_experiment, word_loss_change, LossChangeReport};
use proxy_align::cmo::{cmo_loss, contrast_scores, weights_from_deltas, CmoConfig, Objective};
use proxy_align::config::{Recipe, RunConfig};
use proxy_align::gradcore::Tensor;
use proxy_align::lora::{attach, merge, LoraSpec};
use proxy_align::model::{is_connector, is_llm, is_lora, nll, AssemblyMode, ForwardOpts, Model, VISION_STUB};
use proxy_align::pipeline::{
    build_base_lm, pretrain_mm, run_recipe, sweep, train_adapters, AxisValue, DataBundle, LlmSource, RecipeOutput,
    StageTag, SweepAxis, THREADS_ENV,
};
use proxy_align::rng::SeedStream;
use proxy_align::synthdata::{Generator, Register, WordClass};
use rand::Rng as _;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn changed(a: &Model<f32>, b: &Model<f32>) -> Vec<String> {
    a.params
        .iter()
        .filter(|(n, p)| b.params.get(n).map(|t| t.data() != p.tensor.data()).unwrap_or(true))
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Default-config runs of one seed, shared by criteria 5 through 9.
struct SeedRuns {
    cfg: RunConfig,
    data: DataBundle,
    base: Model<f32>,
    base_secs: f64,
    dpa: RecipeOutput<f32>,
    dpa_secs: f64,
    vanilla: RecipeOutput<f32>,
    vanilla_secs: f64,
}

#[derive(Default)]
struct Cache {
    runs: BTreeMap<u64, SeedRuns>,
}

impl Cache {
    fn seed(&mut self, seed: u64) -> &SeedRuns {
        self.runs.entry(seed).or_insert_with(|| {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let data = DataBundle::generate(&cfg);
            let t = Instant::now();
            let (base, _) = build_base_lm::<f32>(&cfg, &data.base, data.bos()).expect("base LM");
            let base_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let dpa = run_recipe(Recipe::Dpa, &base, &data, &cfg).expect("dpa");
            let dpa_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let vanilla = run_recipe(Recipe::Vanilla, &base, &data, &cfg).expect("vanilla");
            let vanilla_secs = t.elapsed().as_secs_f64();
            eprintln!(
                "  seed {seed}: base {base_secs:.0}s, dpa {dpa_secs:.0}s (probe {:.3}), vanilla {vanilla_secs:.0}s (probe {:.3})",
                dpa.final_probe().unwrap_or(f64::NAN),
                vanilla.final_probe().unwrap_or(f64::NAN)
            );
            SeedRuns { cfg, data, base, base_secs, dpa, dpa_secs, vanilla, vanilla_secs }
        })
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = SeedStream::new(1001).rng();
    let model = micro_model::<f64>(5);
    let (mut worst_sum, mut worst_ce, mut bad) = (0.0f64, 0.0f64, 0usize);
    for case in 0..1000 {
        let m = rng.random_range(1..24);
        let delta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        mask[m / 2] = true;
        let (a, b) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let c = CmoConfig {
            alpha: f64::min(a, b),
            beta: f64::max(a, b),
            window: [1, 3, 5][case % 3],
            ..CmoConfig::default()
        };
        let w = weights_from_deltas(&delta, &c, &mask).unwrap();
        let total: f64 = w.weight.iter().zip(&mask).filter(|(_, &k)| k).map(|(x, _)| x).sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        bad += w.clipped.iter().filter(|&&x| x < c.alpha || x > c.beta).count();
        bad += w
            .weight
            .iter()
            .zip(&mask)
            .filter(|(&x, &k)| x < 0.0 || (!k && x != 0.0))
            .count();

        // r = q: identical score tables give exactly uniform weights.
        let logp = Tensor::<f64>::randn(&[m, 5], 1.0, &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..5)).collect();
        let (r, q) = contrast_scores(&logp, &logp, &targets, Objective::Cmo).unwrap();
        let d: Vec<f64> = r.iter().zip(&q).map(|(x, y)| x - y).collect();
        let u = weights_from_deltas(&d, &c, &mask).unwrap();
        let n = mask.iter().filter(|&&k| k).count() as f64;
        bad += u
            .weight
            .iter()
            .zip(&mask)
            .filter(|(&x, &k)| x != if k { 1.0 / n } else { 0.0 })
            .count();

        // α = β: the weighted loss is the mean token NLL.
        let level = c.alpha;
        let flat = CmoConfig {
            alpha: level,
            beta: level,
            ..c.clone()
        };
        let len = rng.random_range(2..8);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(2..12)).collect();
        let s = sample(&tokens, Some(case));
        let (loss, _) = cmo_loss(&model, std::slice::from_ref(&s), &flat, BOS).unwrap();
        let input = model.assemble(&s, AssemblyMode::Multimodal, BOS).unwrap();
        let probs = model.forward_lm(&input, ForwardOpts::default()).unwrap().probs;
        let ce = nll(&probs, &input.targets, &input.loss_mask).unwrap();
        worst_ce = worst_ce.max((loss - ce).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_sum <= 1e-9 && worst_ce <= 1e-9 && bad == 0 && secs < 5.0,
        format!(
            "1000 cases: max |sum-1| {worst_sum:.1e}, max |loss-CE| at alpha=beta {worst_ce:.1e}, violations {bad}, {secs:.2}s"
        ),
    )
}

fn criterion_2() -> Outcome {
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let delta = [0.7, 0.02, 0.3];
    let c = |window| CmoConfig {
        alpha: 0.05,
        beta: 0.5,
        window,
        ..CmoConfig::default()
    };
    let w1 = weights_from_deltas(&delta, &c(1), &[true; 3]).unwrap().weight;
    let e1 = close(&w1, &[0.5 / 0.85, 0.05 / 0.85, 0.3 / 0.85]);
    let pooled = [0.55 / 2.0, 0.85 / 3.0, 0.35 / 2.0];
    let total: f64 = pooled.iter().sum();
    let w3 = weights_from_deltas(&delta, &c(3), &[true; 3]).unwrap().weight;
    let e3 = close(&w3, &pooled.map(|p| p / total));
    outcome(
        e1 <= 1e-9 && e3 <= 1e-9,
        format!("window 1 {w1:.4?} (err {e1:.1e}); window 3 {w3:.4?} (err {e3:.1e})"),
    )
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let dims = RunConfig::default().dims;
    let spec = LoraSpec::default();
    let logits = |m: &Model<f32>, s: &proxy_align::synthdata::MMSample| {
        let mode = if s.attrs.is_some() {
            AssemblyMode::Multimodal
        } else {
            AssemblyMode::TextOnly
        };
        m.forward_lm(&m.assemble(s, mode, BOS).unwrap(), ForwardOpts::default())
            .unwrap()
            .logits
    };
    let mut rng = SeedStream::new(303).rng();
    let mut random_sample = || {
        let len = rng.random_range(3..24);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(2..dims.vocab_size as u32)).collect();
        let image = rng.random_bool(0.5).then(|| rng.random_range(0..21));
        sample(&tokens, image)
    };

    let base: Model<f32> = Model::init(dims, &SeedStream::new(3)).unwrap();
    let mut adapted = base.clone();
    let set = attach(&mut adapted, &spec, &SeedStream::new(4)).unwrap();
    let inputs: Vec<_> = (0..20).map(|_| random_sample()).collect();
    let noop = inputs
        .iter()
        .all(|s| logits(&base, s).data() == logits(&adapted, s).data());

    let mut brng = SeedStream::new(5).rng();
    for a in set.iter() {
        *adapted.params.get_mut(&a.b_name()).unwrap() = Tensor::randn(&[a.d_out, a.rank], 0.05, &mut brng);
    }
    let mut merged = adapted.clone();
    merge(&mut merged, &set).unwrap();
    let merge_err = inputs
        .iter()
        .map(|s| logits(&adapted, s).max_abs_diff(&logits(&merged, s)).unwrap())
        .fold(0.0f32, f32::max);

    let mut cfg = small_config(9);
    cfg.stages.proxy_train.steps = 100;
    let data = DataBundle::generate(&cfg);
    let small: Model<f32> = Model::init(cfg.dims, &cfg.init_stream()).unwrap();
    let stage = cfg.stage_config(StageTag::ProxyTrain, Objective::Vanilla, LlmSource::Base);
    let out = train_adapters(&small, &data.captions, &stage, data.bos()).unwrap();
    let frozen = small
        .params
        .iter()
        .all(|(n, p)| out.model.params.get(n).unwrap().data() == p.tensor.data());
    let steps = out.record.steps.len();

    let closed = dims.n_layers * spec.targets.len() * spec.rank * (dims.d_model + dims.d_model);
    let mut counted = base.clone();
    attach(&mut counted, &spec, &SeedStream::new(6)).unwrap();
    counted.params.set_trainable(is_lora);
    let count = counted.params.trainable_count();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        noop && merge_err <= 1e-6 && frozen && steps == 100 && count == closed && secs < 30.0,
        format!(
            "B=0 no-op {noop}; merge max diff {merge_err:.1e}; base frozen over {steps} steps {frozen}; trainable {count} (closed form {closed}); {secs:.1}s"
        ),
    )
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let (mut p64, mut p32) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        for (op, inputs) in cases::<f64>(seed) {
            p64 = p64.max(check_primitive(&op, &inputs, seed));
        }
        for (op, inputs) in cases::<f32>(seed) {
            p32 = p32.max(check_primitive_f32(&op, &inputs, seed));
        }
    }
    let m64 = forward_fd::<f64>(false).max(forward_fd::<f64>(true));
    let m32 = forward_fd::<f32>(false);
    let cmo = weighted_loss_fd(Objective::Cmo).max(weighted_loss_fd(Objective::CalLike));
    let secs = t.elapsed().as_secs_f64();
    outcome(
        p64 <= 1e-6 && m64 <= 1e-6 && cmo <= 1e-6 && p32 <= 1e-3 && m32 <= 1e-3 && secs < 60.0,
        format!(
            "max rel err: primitives {p64:.1e} (f64) {p32:.1e} (f32); forward {m64:.1e} (f64) {m32:.1e} (f32); weighted loss {cmo:.1e}; {secs:.1}s"
        ),
    )
}

fn criterion_5(cache: &mut Cache) -> Outcome {
    let mut problems = Vec::new();
    let mut note = |ok: bool, what: &str| {
        if !ok {
            problems.push(what.to_string());
        }
    };
    for &seed in &SEEDS[..1] {
        let r = cache.seed(seed);
        let proxy = r.dpa.proxy.as_ref().expect("dpa has a proxy");
        let targets = r.cfg.lora.targets.clone();
        let in_targets = |n: &String| targets.iter().any(|t| n.ends_with(&format!("attn.{t}")));
        let pd = changed(&r.base, proxy);
        note(
            !pd.is_empty() && pd.iter().all(in_targets),
            "proxy changed weights outside the adapter targets",
        );
        note(
            changed(&r.dpa.stage2_init, proxy).is_empty(),
            "stage 2 did not start from the proxy",
        );
        for (name, out) in [("dpa", &r.dpa), ("vanilla", &r.vanilla)] {
            let d2 = changed(&out.stage2_init, &out.stage2);
            note(
                !d2.is_empty() && d2.iter().all(|n| is_connector(n)),
                &format!("{name}: stage 2 touched non-connector params"),
            );
            let start = proxy_align::pipeline::assemble_model(
                if out.stage3_llm == LlmSource::Proxy {
                    proxy
                } else {
                    &r.base
                },
                &out.stage2,
            )
            .unwrap();
            let d3 = changed(&start, &out.final_model);
            note(
                d3.iter().any(|n| is_llm(n)) && d3.iter().all(|n| is_connector(n) || is_llm(n)),
                &format!("{name}: stage 3 changed params outside connector+LLM"),
            );
            for m in [&out.stage2, &out.final_model] {
                note(
                    m.params.get(VISION_STUB).unwrap().data() == r.base.params.get(VISION_STUB).unwrap().data(),
                    &format!("{name}: vision stub changed"),
                );
            }
        }
        note(
            r.dpa.stage3_llm == LlmSource::Target,
            "dpa stage 3 did not restore the target LM",
        );
    }
    // Connector-only pretraining on a small config with every objective.
    let cfg = small_config(21);
    let data = DataBundle::generate(&cfg);
    let lm: Model<f32> = build_base_lm(&cfg, &data.base, data.bos()).unwrap().0;
    for method in [Objective::Vanilla, Objective::Cmo, Objective::CalLike] {
        let stage = cfg.stage_config(StageTag::MmPretrain, method, LlmSource::Base);
        let out = pretrain_mm(lm.clone(), &data.captions, &stage, None, data.bos()).unwrap();
        note(
            changed(&lm, &out.model).iter().all(|n| is_connector(n)),
            "small stage 2 touched non-connector params",
        );
        note(
            out.record.trainable_params == lm.params.count_where(is_connector),
            "stage 2 trainable count",
        );
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "stage 2 connector-only, stage 3 connector+LLM, vision stub fixed, base LM untouched before stage 3".into()
        } else {
            problems.join("; ")
        },
    )
}

fn write_and_read(out: &RecipeOutput<f32>, cfg: &RunConfig, dir: &Path) -> BTreeMap<String, Vec<u8>> {
    out.write(cfg, dir).unwrap();
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn criterion_6(cache: &mut Cache) -> Outcome {
    let first = cache.seed(0);
    let cfg = first.cfg.clone();
    let data = DataBundle::generate(&cfg);
    let (base, _) = build_base_lm::<f32>(&cfg, &data.base, data.bos()).unwrap();
    let second = run_recipe(Recipe::Dpa, &base, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = write_and_read(&first.dpa, &cfg, &dir.path().join("a"));
    let b = write_and_read(&second, &cfg, &dir.path().join("b"));
    let ckpts = !a.is_empty() && a == b;
    let records = first.dpa.records.len() == second.records.len()
        && first
            .dpa
            .records
            .iter()
            .zip(&second.records)
            .all(|(x, y)| x.same_outcome(y));
    let base_same = changed(&first.base, &base).is_empty();
    outcome(
        ckpts && records && base_same,
        format!(
            "{} threads; {} checkpoints bit-identical {ckpts}; records identical {records}; base LM identical {base_same}",
            proxy_align::pipeline::thread_count(),
            a.len()
        ),
    )
}

fn loss_change(r: &SeedRuns, out: &RecipeOutput<f32>) -> LossChangeReport {
    let a = &r.cfg.analysis;
    word_loss_change(
        &out.stage2_init,
        &out.stage2,
        &r.data.analysis,
        &r.data.vocab,
        a.min_freq,
        a.bins,
    )
    .unwrap()
}

fn criterion_7(cache: &mut Cache) -> Outcome {
    let mut rows = Vec::new();
    let mut secs = 0.0;
    for &seed in &SEEDS {
        let r = cache.seed(seed);
        secs += r.base_secs + r.dpa_secs + r.vanilla_secs;
        let (d, v) = (loss_change(r, &r.dpa), loss_change(r, &r.vanilla));
        let stat = |rep: &LossChangeReport, c: WordClass, std: bool| {
            rep.class(c)
                .map(|s| if std { s.std_pct_change } else { s.mean_pct_change })
                .unwrap_or(f64::NAN)
        };
        rows.push([
            stat(&d, WordClass::Visual, false),
            stat(&v, WordClass::Visual, false),
            stat(&d, WordClass::Style, true),
            stat(&v, WordClass::Style, true),
            r.dpa.final_probe().unwrap_or(f64::NAN),
            r.vanilla.final_probe().unwrap_or(f64::NAN),
        ]);
    }
    let m: Vec<f64> = (0..6).map(|i| mean(rows.iter().map(|r| r[i]))).collect();
    let (a, b, c) = (m[0] < m[1], m[2] < m[3], m[4] >= m[5] + 0.02);
    let time_ok = secs <= 45.0 * 60.0;
    outcome(
        a && b && c && time_ok,
        format!(
            "(a) visual mean change dpa {:.2}% vs vanilla {:.2}% [{}]; (b) style std dpa {:.2} vs vanilla {:.2} [{}]; (c) probe dpa {:.4} vs vanilla {:.4} (gap {:+.2}pp, need +2) [{}]; {:.1} min",
            m[0],
            m[1],
            if a { "ok" } else { "fail" },
            m[2],
            m[3],
            if b { "ok" } else { "fail" },
            m[4],
            m[5],
            100.0 * (m[4] - m[5]),
            if c { "ok" } else { "fail" },
            secs / 60.0
        ),
    )
}

fn criterion_8(cache: &mut Cache) -> Outcome {
    let t = Instant::now();
    let mut reused = 0.0;
    let mut gains = Vec::new();
    let mut losses = Vec::new();
    for &seed in &SEEDS {
        let r = cache.seed(seed);
        let cfg = r.cfg.clone();
        // The register-A base LM of the default config is the conflicting prior.
        assert_eq!(cfg.data.base_register, Register::A);
        assert!(r.data.base == DataBundle::base_corpus_in(&cfg, Register::A));
        reused += r.base_secs;
        let corpus_b = DataBundle::base_corpus_in(&cfg, Register::B);
        let (base_b, _) = build_base_lm::<f32>(&cfg, &corpus_b, r.data.bos()).unwrap();
        let report = paradox_experiment(&cfg, [&r.base, &base_b], &r.data).unwrap();
        let contrast = |name: &str| report.contrasts.iter().find(|c| c.name == name).unwrap().value;
        gains.push(contrast("matched_register_gain"));
        losses.push(contrast("conflicting_register_loss"));
        eprintln!(
            "  seed {seed}: cells {:?}",
            report
                .cells
                .iter()
                .map(|c| (c.prior, c.captions, c.probe_acc))
                .collect::<Vec<_>>()
        );
    }
    let (g, l) = (mean(gains.iter().copied()), mean(losses.iter().copied()));
    let mins = (t.elapsed().as_secs_f64() + reused) / 60.0;
    outcome(
        g > 0.0 && l < 0.0 && mins <= 60.0,
        format!(
            "matched prior gain from B captions {:+.2}pp {gains:.3?}; conflicting prior change {:+.2}pp {losses:.3?}; {mins:.1} min",
            100.0 * g,
            100.0 * l
        ),
    )
}

fn criterion_9(cache: &mut Cache) -> Outcome {
    let mut vis = Vec::new();
    let mut sty = Vec::new();
    let mut below = Vec::new();
    for &seed in &SEEDS {
        let r = cache.seed(seed);
        let rep = delta_histogram(
            &r.dpa.stage2,
            &r.data.analysis,
            r.cfg.analysis.bins,
            r.cfg.cmo.beta,
            r.data.bos(),
            ForwardOpts::default(),
        )
        .unwrap();
        vis.push(rep.class(WordClass::Visual).unwrap().mean_delta);
        sty.push(rep.class(WordClass::Style).unwrap().mean_delta);
        below.push(rep.fraction_below_beta);
    }
    let (v, s, b) = (mean(vis), mean(sty), mean(below));
    outcome(
        v > s,
        format!("mean delta visual {v:.4} vs style {s:.4}; fraction of tokens below beta {b:.3}"),
    )
}

fn criterion_10(cache: &mut Cache) -> Outcome {
    let r = cache.seed(0);
    let t = Instant::now();
    // Default model and base LM; a fifth of each stage budget.
    let mut cfg = r.cfg.clone();
    for stage in [
        &mut cfg.stages.proxy_train,
        &mut cfg.stages.mm_pretrain,
        &mut cfg.stages.instruct_tune,
    ] {
        stage.steps /= 5;
    }
    let (data, base) = (&r.data, &r.base);
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for axis in [SweepAxis::ClipBounds, SweepAxis::CmoStages] {
        let values = axis.default_values(&cfg);
        let out = dir.path().join(axis.as_str());
        let report = sweep(&values, Recipe::Dpa, &cfg, data, Some(base), Some(&out)).unwrap();
        let csv = report.to_csv();
        let expected: Vec<AxisValue> = match axis {
            SweepAxis::ClipBounds => [(0.0, 1.0), (0.0, 0.5), (0.05, 1.0), (0.05, 0.5)]
                .map(|(a, b)| AxisValue::ClipBounds(a, b))
                .to_vec(),
            _ => [(false, false), (true, false), (false, true), (true, true)]
                .map(|(p, i)| AxisValue::CmoStages(p, i))
                .to_vec(),
        };
        let shape = report.rows.iter().map(|r| r.value).collect::<Vec<_>>() == expected
            && report
                .rows
                .iter()
                .all(|r| r.probe_acc.is_some() && r.final_loss.is_some())
            && csv.lines().count() == 5
            && csv.starts_with("axis,value,recipe,probe_acc");
        let written = std::fs::read_dir(&out).map(|d| d.count()).unwrap_or(0) == 4;
        ok &= shape && written;
        notes.push(format!(
            "{axis}: {} rows [{}]",
            report.rows.len(),
            report
                .rows
                .iter()
                .map(|r| format!("{} {:.3}", r.label, r.probe_acc.unwrap_or(f64::NAN)))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    notes.push(format!("{:.0}s", t.elapsed().as_secs_f64()));
    outcome(ok, notes.join("; "))
}

fn criterion_11() -> Outcome {
    let dims = small_config(0).dims;
    let perturb = |m: &Model<f64>, seed| {
        let mut other = m.clone();
        let noise: Model<f64> = Model::init(m.dims, &SeedStream::new(seed)).unwrap();
        for (name, p) in other.params.iter_mut() {
            p.tensor.axpy(1.0, noise.params.get(name).unwrap()).unwrap();
        }
        other
    };
    let mut problems = Vec::new();

    let g = Generator::new(0.05, false);
    let model: Model<f64> = Model::init(dims, &SeedStream::new(1)).unwrap();
    let caps = g.caption_corpus(Register::B, 40, 1);
    let same = word_loss_change(&model, &model.clone(), &caps, &g.vocab, 1, 10).unwrap();
    if same.words.is_empty()
        || same
            .words
            .iter()
            .any(|w| w.pct_change != 0.0 || w.loss_before != w.loss_after)
    {
        problems.push("identical checkpoints gave non-zero change".to_string());
    }

    let other = perturb(&model, 2);
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for s in &caps {
        for (ids, _) in s.words() {
            *counts.entry(ids.to_vec()).or_default() += 1;
        }
    }
    let rep = word_loss_change(&model, &other, &caps, &g.vocab, 3, 10).unwrap();
    let mut kept: Vec<_> = rep.words.iter().map(|w| w.tokens.clone()).collect();
    let mut expected: Vec<_> = counts.iter().filter(|(_, &n)| n >= 3).map(|(k, _)| k.clone()).collect();
    kept.sort();
    expected.sort();
    let rare = counts.values().filter(|&&n| n < 3).count();
    if kept != expected || rare == 0 {
        problems.push(format!(
            "frequency filter kept {} words, expected {}",
            kept.len(),
            expected.len()
        ));
    }

    let gs = Generator::new(0.05, true);
    let caps = gs.caption_corpus(Register::B, 40, 3);
    let rep = word_loss_change(&model, &other, &caps, &gs.vocab, 3, 10).unwrap();
    let mut sums: HashMap<Vec<u32>, (f64, usize)> = HashMap::new();
    for s in &caps {
        let input = model.assemble(s, AssemblyMode::Multimodal, gs.vocab.bos()).unwrap();
        let lp = model.target_log_probs(&input, ForwardOpts::default()).unwrap();
        for (ids, span) in s.words() {
            let e = sums.entry(ids.to_vec()).or_default();
            e.0 -= lp[span.start];
            e.1 += 1;
        }
    }
    let two_token = rep.words.iter().filter(|w| w.tokens.len() == 2).count();
    let first_ok = rep.words.iter().all(|w| {
        let (s, n) = sums[&w.tokens];
        (w.loss_before - s / n as f64).abs() < 1e-12
    });
    if two_token == 0 || !first_ok {
        problems.push(format!(
            "first-token rule: {two_token} two-token words, oracle match {first_ok}"
        ));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "zero change on identical checkpoints; filter dropped {rare} words with count < 3; first-token rule over {two_token} two-token words"
            )
        } else {
            problems.join("; ")
        },
    )
}

fn main() -> ExitCode {
    if std::env::var_os(THREADS_ENV).is_none() {
        std::env::set_var(THREADS_ENV, "1");
    }
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut cache = Cache::default();
    let names = [
        "CMO weight properties",
        "hand-oracle weight vectors",
        "LoRA properties",
        "gradient correctness",
        "stage contracts",
        "determinism",
        "loss-change and probe direction",
        "register paradox",
        "delta structure",
        "ablation harness",
        "analysis exactness",
    ];
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !run(n) {
            continue;
        }
        let t = Instant::now();
        let o = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut cache),
            6 => criterion_6(&mut cache),
            7 => criterion_7(&mut cache),
            8 => criterion_8(&mut cache),
            9 => criterion_9(&mut cache),
            10 => criterion_10(&mut cache),
            _ => criterion_11(),
        };
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict}: {name}: {} ({:.1}s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
