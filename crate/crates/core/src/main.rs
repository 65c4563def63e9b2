use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trigait::check;
use trigait::config::{report_paths, RunConfig, KEYS, SEED_ENV};
use trigait::data::{read_dataset, synth_dataset, write_dataset, Dataset, SequencePair, SynthConfig};
use trigait::eval::{embed_all, evaluate, evaluate_gallery_as_probes, to_markdown, to_tsv};
use trigait::model::fusion::partition;
use trigait::model::{ModelConfig, TriGait};
use trigait::train::{checkpoint_path, load_model, Trainer, LOG_FILE};

#[derive(Parser)]
#[command(name = "trigait", version, about = "Silhouette, skeleton and fusion gait recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic walker dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Embed a dataset and write rank-1 reports.
    Eval(EvalArgs),
    /// Run the property suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    /// Number of evenly spaced views over 0..180 degrees.
    #[arg(long, default_value_t = 11)]
    views: usize,
    /// Sequences per view: NM, then one fifth each of BG and CL.
    #[arg(long, default_value_t = 10)]
    seqs_per_view: usize,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    /// Seed (default: $TRIGAIT_SEED or 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// Settings shared by train and eval; each flag overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable. See `--list-keys`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print every configuration key and exit.
    #[arg(long)]
    list_keys: bool,
    /// Desk-scale model and schedule.
    #[arg(long)]
    miniature: bool,
    /// motion | uniform.
    #[arg(long)]
    partition_mode: Option<String>,
    /// Seed (default: $TRIGAIT_SEED or 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is fully deterministic.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for report.tsv and report.md.
    #[arg(long)]
    out: PathBuf,
    /// Score the gallery against itself over identical views (sanity mode).
    #[arg(long)]
    gallery_probes: bool,
    /// Also write the part row ranges of every sequence to this TSV file.
    #[arg(long)]
    dump_ranges: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct CheckArgs {
    /// Run one group only.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(check::GROUPS))]
    only: Option<String>,
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    match (seed, env_seed()) {
        (Some(s), _) => Ok(s),
        (None, Some(v)) => v.parse().with_context(|| format!("{SEED_ENV}={v} is not an integer")),
        (None, None) => Ok(0),
    }
}

fn print_keys() {
    for (k, d) in KEYS {
        println!("{k:<22}{d}");
    }
}

/// File values, then `--set`, then dedicated flags.
fn build_config(run: &RunArgs, extra: &[(&str, Option<String>)]) -> Result<trigait::config::Resolved> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cli = RunConfig::default();
    let mut errs = Vec::new();
    for kv in &run.set {
        match kv.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = cli.set(k.trim(), v.trim()) {
                    errs.push(format!("--set {kv}: {e}"));
                }
            }
            None => errs.push(format!("--set {kv}: expected KEY=VALUE")),
        }
    }
    let flags = [
        ("miniature", run.miniature.then(|| "true".to_string())),
        ("partition_mode", run.partition_mode.clone()),
        ("seed", run.seed.map(|s| s.to_string())),
        ("threads", run.threads.map(|t| t.to_string())),
    ];
    for (k, v) in flags.iter().chain(extra) {
        if let Some(v) = v {
            cli.set(k, v).expect("flag keys are known");
        }
    }
    cfg.merge(&cli);
    let resolved = cfg.resolve(env_seed().as_deref());
    match resolved {
        Ok(r) if errs.is_empty() => Ok(r),
        Ok(_) => Err(trigait::Error::Config(errs).into()),
        Err(trigait::Error::Config(more)) => {
            errs.extend(more);
            Err(trigait::Error::Config(errs).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    Ok(pool.install(f))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        subjects: a.subjects,
        views: SynthConfig::view_grid(a.views),
        seqs_per_view: a.seqs_per_view,
        frames: a.frames,
        seed: seed_or_env(a.seed)?,
    };
    let pairs = with_threads(a.threads, || synth_dataset(&cfg))??;
    let dataset = Dataset {
        sequences: pairs
            .into_iter()
            .map(|(k, s)| SequencePair::new(k, s))
            .collect::<trigait::Result<_>>()?,
    };
    write_dataset(&a.out, &dataset).with_context(|| format!("writing {}", a.out.display()))?;
    let (nm, bg, cl) = cfg.condition_counts();
    println!(
        "wrote {} sequences ({} subjects, {} views, {nm} NM / {bg} BG / {cl} CL per view) to {}",
        dataset.len(),
        cfg.subjects,
        cfg.views.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    if a.run.list_keys {
        print_keys();
        return Ok(());
    }
    let r = build_config(
        &a.run,
        &[
            ("iterations", a.iterations.map(|v| v.to_string())),
            ("lr", a.lr.map(|v| v.to_string())),
        ],
    )?;
    let dataset = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let model_cfg = r.model_for(dataset.subjects().len());
    model_cfg.check()?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&dataset, &model_cfg, r.train.clone(), p)?,
        None => Trainer::new(TriGait::new(model_cfg, r.seed)?, &dataset, r.train.clone())?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let start = trainer.iteration;
    let total = r.train.iterations;
    let interval = r.train.checkpoint_interval;
    let rows = trainer.run(&a.out, |row| {
        if (row.iteration + 1) % interval == 0 || row.iteration + 1 == total {
            println!(
                "iter {:>6}  lr {:.1e}  L_tri {:.4}  L_ce {:.4}  L {:.4}  active {:.3}",
                row.iteration, row.lr, row.report.l_tri, row.report.l_ce, row.report.l, row.report.active_triplet_fraction
            );
        }
    })?;
    println!(
        "trained iterations {start}..{} ; checkpoint {} ; log {}",
        trainer.iteration,
        checkpoint_path(&a.out).display(),
        a.out.join(LOG_FILE).display()
    );
    if rows.is_empty() {
        println!("nothing to do: checkpoint already at iteration {}", trainer.iteration);
    }
    Ok(())
}

fn class_count(path: &Path) -> Result<usize> {
    let ck = trigait_tensor::Checkpoint::load(path)?;
    let rec = ck
        .get("head.classifier.weight")
        .with_context(|| format!("{} has no classifier", path.display()))?;
    Ok(*rec.shape.last().context("classifier weight has no shape")?)
}

fn dump_ranges(cfg: &ModelConfig, dataset: &Dataset, path: &Path) -> Result<()> {
    let mut s = String::from("stem\tpart\th_f\th_e\trow_lo\trow_hi\n");
    let names = trigait::model::fusion::body_parts();
    for pair in &dataset.sequences {
        let ranges = partition(&pair.skeleton.joints, cfg.token_rows(), cfg.partition)?;
        for (p, r) in names.iter().zip(&ranges) {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", pair.meta().stem(), p.name, r.h_f, r.h_e, r.row_lo, r.row_hi);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.run.list_keys {
        print_keys();
        return Ok(());
    }
    let r = build_config(&a.run, &[])?;
    let dataset = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let model_cfg = r.model_for(class_count(&a.checkpoint)?);
    let (model, _) = load_model(&model_cfg, &a.checkpoint)?;
    if let Some(p) = &a.dump_ranges {
        dump_ranges(&model_cfg, &dataset, p)?;
    }
    let embeddings = embed_all(&model, &dataset, r.threads)?;
    let report = if a.gallery_probes {
        evaluate_gallery_as_probes(&embeddings)
    } else {
        evaluate(&embeddings)
    };
    if report.conditions.is_empty() {
        bail!("dataset has no probe sequences");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (tsv, md) = report_paths(&a.out);
    fs::write(&tsv, to_tsv(&report)).with_context(|| format!("writing {}", tsv.display()))?;
    fs::write(&md, to_markdown(&report)).with_context(|| format!("writing {}", md.display()))?;
    let pct = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v));
    for (c, cond) in report.conditions.iter().enumerate() {
        println!("{}: {}", cond.label(), pct(report.condition_mean(c)));
    }
    println!("Mean: {}", pct(report.grand_mean()));
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<bool> {
    let results = check::run(a.only.as_deref(), |r| println!("{}", r.line()))?;
    println!("{}", check::summary(&results));
    Ok(results.iter().all(|r| r.passed()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
