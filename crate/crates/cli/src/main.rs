use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use proxy_align::analysis::{
    apply_labels, delta_histogram, emit_report, paradox_bases, paradox_experiment, probe_accuracy, read_labels,
    word_loss_change, Report, ReportFormat,
};
use proxy_align::config::{schema_json, Recipe, RunConfig};
use proxy_align::model::{ForwardOpts, Model};
use proxy_align::pipeline::{ensure_base_lm, run_recipe, sweep, Checkpoint, DataBundle, SweepAxis};

/// Decoupled proxy alignment on a desk-scale multimodal LM.
#[derive(Parser, Debug)]
#[command(name = "proxy-align", version)]
struct Cli {
    /// Print the JSON schema of the config file and exit.
    #[arg(long)]
    print_schema: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpora and vocabulary to <out>/data.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base LM (cached) and run one recipe.
    Run {
        #[command(flatten)]
        common: Common,
        /// dpa, vanilla, cal, pmo-only or cmo-only.
        #[arg(long)]
        recipe: Option<String>,
    },
    /// Compute a diagnostic report from checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Recipe whose checkpoints are used by default.
        #[arg(long)]
        recipe: Option<String>,
        /// Checkpoint for probe and delta-hist.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Earlier checkpoint for loss-change.
        #[arg(long)]
        before: Option<PathBuf>,
        /// Later checkpoint for loss-change.
        #[arg(long)]
        after: Option<PathBuf>,
    },
    /// Run a recipe once per value of one ablation axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lora_rank, clip_bounds, cmo_stages, data_fraction or model_scale.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the config's [sweep] section.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        recipe: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    LossChange,
    DeltaHist,
    Probe,
    Paradox,
}

/// Usage and config problems exit with 1, everything else with 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(e: anyhow::Error) -> Failure {
    match e.downcast_ref::<proxy_align::Error>() {
        Some(proxy_align::Error::Config(_)) => Failure::Usage(e),
        _ => Failure::Runtime(e),
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))
        .map_err(Failure::Usage)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn parse_recipe(arg: &Option<String>, cfg: &RunConfig) -> Result<Recipe, Failure> {
    match arg {
        Some(s) => s.parse().map_err(|e: proxy_align::Error| Failure::Usage(e.into())),
        None => Ok(cfg.recipe),
    }
}

fn read_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<DataBundle> {
    let mut data = DataBundle::read(&out.join("data"))?;
    data.check_vocab(cfg.dims.vocab_size)?;
    if let Some(path) = &cfg.data.labels_file {
        let labels = read_labels(path).with_context(|| format!("reading labels {}", path.display()))?;
        let n = apply_labels(&mut data.analysis, &labels, &data.vocab);
        log::info!("applied {} label overrides from {}", n, path.display());
    }
    Ok(data)
}

fn load_ckpt(path: &Path, cfg: &RunConfig) -> anyhow::Result<Model<f32>> {
    Ok(Checkpoint::<f32>::load(path, Some(&cfg.dims))
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

fn write_both<R: Report>(report: &R, dir: &Path, stem: &str) -> anyhow::Result<()> {
    emit_report(report, ReportFormat::Csv, &dir.join(format!("{stem}.csv")))?;
    emit_report(report, ReportFormat::Json, &dir.join(format!("{stem}.json")))?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let data = DataBundle::generate(cfg);
    data.check_vocab(cfg.dims.vocab_size)?;
    for p in data.write(&out.join("data"))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cfg: &RunConfig, out: &Path, recipe: Recipe) -> anyhow::Result<()> {
    let data = read_data(cfg, out)?;
    let base = ensure_base_lm(cfg, &data.base, data.bos(), &out.join("base"))?;
    let result = run_recipe(recipe, &base, &data, cfg)?;
    let dir = out.join("runs").join(recipe.as_str());
    result.write(cfg, &dir)?;
    let acc = result
        .final_probe()
        .ok_or_else(|| anyhow!("no probe evaluation was recorded"))?;
    println!("{recipe}: {} stage records in {}", result.records.len(), dir.display());
    println!("final probe accuracy: {acc:.4}");
    Ok(())
}

fn analyze(
    cfg: &RunConfig,
    out: &Path,
    kind: Kind,
    recipe: Recipe,
    ckpt: Option<PathBuf>,
    before: Option<PathBuf>,
    after: Option<PathBuf>,
) -> anyhow::Result<()> {
    let data = read_data(cfg, out)?;
    let run_dir = out.join("runs").join(recipe.as_str());
    let dir = out.join("analysis");
    match kind {
        Kind::Probe => {
            let model = load_ckpt(&ckpt.unwrap_or_else(|| run_dir.join("final.ckpt")), cfg)?;
            let report = probe_accuracy(&model, &data.probe, data.bos())?;
            write_both(&report, &dir, "probe")?;
            println!(
                "probe accuracy: {:.4} ({}/{})",
                report.accuracy, report.correct, report.n
            );
        }
        Kind::LossChange => {
            let b = load_ckpt(&before.unwrap_or_else(|| run_dir.join("mm_init.ckpt")), cfg)?;
            let a = load_ckpt(&after.unwrap_or_else(|| run_dir.join("mm_pretrain.ckpt")), cfg)?;
            let report = word_loss_change(
                &b,
                &a,
                &data.analysis,
                &data.vocab,
                cfg.analysis.min_freq,
                cfg.analysis.bins,
            )?;
            write_both(&report, &dir, "loss_change")?;
            let words = dir.join("loss_change_words.csv");
            std::fs::write(&words, report.words_csv()).with_context(|| format!("writing {}", words.display()))?;
            for c in &report.classes {
                println!(
                    "{:?}: {} words, mean {:.3}%, std {:.3}%",
                    c.class, c.n_words, c.mean_pct_change, c.std_pct_change
                );
            }
        }
        Kind::DeltaHist => {
            let model = load_ckpt(&ckpt.unwrap_or_else(|| run_dir.join("mm_pretrain.ckpt")), cfg)?;
            let report = delta_histogram(
                &model,
                &data.analysis,
                cfg.analysis.bins,
                cfg.cmo.beta,
                data.bos(),
                ForwardOpts::default(),
            )?;
            write_both(&report, &dir, "delta_hist")?;
            for c in &report.classes {
                println!("{:?}: {} tokens, mean delta {:.4}", c.class, c.n_tokens, c.mean_delta);
            }
            println!("fraction below beta: {:.4}", report.fraction_below_beta);
        }
        Kind::Paradox => {
            let [a, b] = paradox_bases(cfg, data.bos())?;
            let report = paradox_experiment(cfg, [&a, &b], &data)?;
            write_both(&report, &dir, "paradox")?;
            for c in &report.cells {
                println!("prior {} captions {}: {:.4}", c.prior, c.captions, c.probe_acc);
            }
            for c in &report.contrasts {
                println!("{}: {:+.4}", c.name, c.value);
            }
        }
    }
    println!("reports in {}", dir.display());
    Ok(())
}

fn run_sweep(
    cfg: &RunConfig,
    out: &Path,
    axis: SweepAxis,
    values: Option<String>,
    recipe: Recipe,
) -> anyhow::Result<()> {
    let values = match values {
        Some(list) => axis.parse_values(&list)?,
        None => axis.default_values(cfg),
    };
    let data = read_data(cfg, out)?;
    let base = match axis {
        SweepAxis::ModelScale => None,
        _ => Some(ensure_base_lm(cfg, &data.base, data.bos(), &out.join("base"))?),
    };
    let dir = out.join("sweep").join(axis.as_str());
    let report = sweep(&values, recipe, cfg, &data, base.as_ref(), Some(&dir))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    for r in &report.rows {
        let acc = r.probe_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("{} {}: probe {acc}", axis, r.label);
    }
    println!("report in {}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if cli.print_schema {
        // A closed pipe (e.g. `| head`) is not an error worth reporting.
        let _ = writeln!(std::io::stdout(), "{}", schema_json());
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| Failure::Usage(anyhow!("no command given (try --help)")))?;
    match command {
        Command::GenData { common } => {
            let (cfg, out) = load_config(&common)?;
            gen_data(&cfg, &out).map_err(classify)
        }
        Command::Run { common, recipe } => {
            let (cfg, out) = load_config(&common)?;
            let recipe = parse_recipe(&recipe, &cfg)?;
            run(&cfg, &out, recipe).map_err(classify)
        }
        Command::Analyze {
            common,
            kind,
            recipe,
            ckpt,
            before,
            after,
        } => {
            let (cfg, out) = load_config(&common)?;
            let recipe = parse_recipe(&recipe, &cfg)?;
            analyze(&cfg, &out, kind, recipe, ckpt, before, after).map_err(classify)
        }
        Command::Sweep {
            common,
            axis,
            values,
            recipe,
        } => {
            let axis: SweepAxis = axis.parse().map_err(|e: proxy_align::Error| Failure::Usage(e.into()))?;
            let (cfg, out) = load_config(&common)?;
            let recipe = match recipe {
                Some(_) => parse_recipe(&recipe, &cfg)?,
                None => cfg.sweep.recipe,
            };
            run_sweep(&cfg, &out, axis, values, recipe).map_err(classify)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
