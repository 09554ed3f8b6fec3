mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use posbench::data::synth::{self, Profile, SynthSpec};
use posbench::data::{self, subset, DatasetStats, InteractionDataset, Split, SplitKind};
use posbench::model::{train, Model, ModelConfig, TrainOutcome};
use posbench::numeric::Rng;
use posbench::stability::{
    self, aggregate, parse_summary_tsv, recommend_encoding, summary_tsv, SeedResult, SweepSummary,
};

use run_config::{Overrides, RunConfig};

/// Positional-encoding workbench for transformer sequential recommenders.
#[derive(Parser, Debug)]
#[command(name = "posbench", version)]
struct Cli {
    /// Log progress (info level); RUST_LOG takes precedence.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print dataset statistics and write them as TSV.
    Stats {
        /// Interaction log, or a stats TSV written by this command.
        dataset: PathBuf,
        #[arg(long, default_value_t = data::DEFAULT_MIN_INTERACTIONS)]
        min_interactions: usize,
        /// Per-item attribute CSV.
        #[arg(long)]
        attributes: Option<PathBuf>,
        /// Directory for stats.tsv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a deterministic synthetic interaction log.
    Synth {
        /// memorizable, positional or random.
        #[arg(long)]
        profile: Profile,
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        /// Total interactions (random profile only).
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        output: PathBuf,
    },
    /// Keep the most popular items and a uniform sample of users.
    Subset {
        dataset: PathBuf,
        output: PathBuf,
        /// Item budget.
        #[arg(long)]
        items: Option<usize>,
        /// User budget.
        #[arg(long)]
        users: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = data::DEFAULT_MIN_INTERACTIONS)]
        min_interactions: usize,
    },
    /// Train one model and evaluate it at its best validation epoch.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = data::DEFAULT_MIN_INTERACTIONS)]
        min_interactions: usize,
        #[arg(long)]
        attributes: Option<PathBuf>,
        /// Sampled negatives per query; 0 ranks against every item.
        #[arg(long)]
        negatives: Option<usize>,
        /// Directory for eval.tsv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed and summarise the spread.
    Sweep(RunArgs),
    /// Pick an encoding from the deviation of a `None` baseline sweep.
    Recommend {
        /// Sweep directory or summary file (.tsv or .json).
        summary: PathBuf,
        #[arg(long, default_value_t = stability::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Interaction log; overrides `dataset` in the config.
    dataset: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match std::panic::catch_unwind(|| dispatch(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}

/// 2 for failures that indicate a bug rather than bad input.
fn exit_code(e: &anyhow::Error) -> u8 {
    use posbench::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Shape { .. } | E::NonFinite { .. } | E::NonScalarLoss(_)) => 2,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Stats {
            dataset,
            min_interactions,
            attributes,
            out,
        } => cmd_stats(&dataset, min_interactions, attributes.as_deref(), out.as_deref()),
        Command::Synth {
            profile,
            users,
            items,
            min_len,
            max_len,
            rows,
            seed,
            output,
        } => {
            let mut spec = SynthSpec::new(profile, users, items, seed).with_lengths(min_len, max_len);
            spec.rows = rows;
            let ds = synth::write(&spec, &output)?;
            println!("{}", ds.stats());
            Ok(())
        }
        Command::Subset {
            dataset,
            output,
            items,
            users,
            seed,
            min_interactions,
        } => cmd_subset(&dataset, &output, items, users, seed, min_interactions),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate {
            checkpoint,
            dataset,
            min_interactions,
            attributes,
            negatives,
            out,
        } => cmd_evaluate(&checkpoint, &dataset, min_interactions, attributes.as_deref(), negatives, out.as_deref()),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Recommend { summary, threshold } => cmd_recommend(&summary, threshold),
    }
}

fn load_dataset(path: &Path, min_interactions: usize, attributes: Option<&Path>) -> Result<InteractionDataset> {
    let mut ds = data::load_interactions(path, min_interactions)
        .with_context(|| format!("loading {}", path.display()))?;
    if let Some(a) = attributes {
        ds.load_attributes(a).with_context(|| format!("loading attributes {}", a.display()))?;
    }
    Ok(ds)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_stats(path: &Path, min_interactions: usize, attributes: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let stats = if text.starts_with("users\t") {
        DatasetStats::from_tsv(&text)?
    } else {
        load_dataset(path, min_interactions, attributes)?.stats()
    };
    println!("{stats}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("stats.tsv"), &stats.to_tsv())?;
    }
    Ok(())
}

fn cmd_subset(
    path: &Path,
    output: &Path,
    items: Option<usize>,
    users: Option<usize>,
    seed: u64,
    min_interactions: usize,
) -> Result<()> {
    let ds = load_dataset(path, min_interactions, None)?;
    let sub = subset(&ds, items, users, &mut Rng::new(seed, 0))?;
    data::write_interactions(&sub, output)?;
    let before = ds.stats();
    let after = sub.stats();
    println!("before\t{before}");
    println!("after\t{after}");
    let mut name = output.as_os_str().to_owned();
    name.push(".stats.tsv");
    write_file(Path::new(&name), &after.to_tsv())
}

/// Config text as given (if any), resolved configuration, dataset and output directory.
fn resolve(args: RunArgs, command: &str) -> Result<(RunConfig, Option<String>, InteractionDataset, PathBuf)> {
    let (mut run, echo) = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            (RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(d) = args.dataset {
        run.dataset = Some(d);
    }
    args.overrides.apply(&mut run)?;
    run.model.validate()?;
    let Some(dataset) = run.dataset.clone() else {
        bail!("no dataset given (positional argument or `dataset` in the config)");
    };
    let ds = load_dataset(&dataset, run.min_interactions, run.attributes.as_deref())?;
    let out = run.output_dir(command);
    create_dir(&out)?;
    if let Some(text) = &echo {
        write_file(&out.join("config.toml"), text)?;
    }
    write_file(&out.join("resolved.toml"), &run.to_toml()?)?;
    Ok((run, echo, ds, out))
}

fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("history.tsv"), &outcome.history.to_tsv())?;
    outcome.model.save(&dir.join("model.json"))?;
    Ok(())
}

fn write_summaries(dir: &Path, summary: &SweepSummary) -> Result<()> {
    write_file(&dir.join("summary.tsv"), &summary_tsv(std::slice::from_ref(summary)))?;
    let json = serde_json::to_string_pretty(summary)?;
    write_file(&dir.join("summary.json"), &json)
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let (run, _, ds, out) = resolve(args, "train")?;
    let outcome = train(&run.model, &ds)?;
    write_run(&out, &outcome)?;
    let summary = aggregate(&run.model, vec![SeedResult::from_outcome(run.model.seed, &outcome)])?;
    write_summaries(&out, &summary)?;
    println!(
        "{}: best epoch {}, test Hit@10 {:.4}, NDCG {:.4} -> {}",
        run.model.label(),
        outcome.best_epoch,
        outcome.test.hit_at_10,
        outcome.test.ndcg,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(args: RunArgs) -> Result<()> {
    let (run, _, ds, out) = resolve(args, "sweep")?;
    let hook = |cfg: &ModelConfig, outcome: &TrainOutcome| -> posbench::Result<()> {
        write_run(&out.join(format!("seed-{}", cfg.seed)), outcome)
            .map_err(|e| posbench::Error::Config(format!("{e:#}")))
    };
    let report = stability::sweep(&run.model, &ds, &run.sweep_seeds(), run.jobs, Some(&out.join("runs.jsonl")), Some(&hook))?;
    for (seed, err) in &report.failed {
        eprintln!("warning: seed {seed} failed: {err}");
    }
    write_summaries(&out, &report.summary)?;
    print!("{}", summary_tsv(std::slice::from_ref(&report.summary)));
    println!("-> {}", out.display());
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    min_interactions: usize,
    attributes: Option<&Path>,
    negatives: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let mut model = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    match negatives {
        Some(0) => model.config.full_ranking = true,
        Some(n) => {
            model.config.full_ranking = false;
            model.config.eval_negatives = n;
        }
        None => {}
    }
    let ds = load_dataset(dataset, min_interactions, attributes)?;
    if ds.num_items() != model.num_items {
        bail!(
            "checkpoint has {} items but {} has {}",
            model.num_items,
            dataset.display(),
            ds.num_items()
        );
    }
    let split = Split::leave_one_out(&ds);
    let mut table = String::from("split\tHit@10\tNDCG\tcandidates\tqueries\n");
    for kind in [SplitKind::Valid, SplitKind::Test] {
        if split.cases(kind).is_empty() {
            continue;
        }
        let r = model.evaluate(&split, kind)?;
        table.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\n",
            kind.name(),
            r.hit_at_10,
            r.ndcg,
            r.candidate_count,
            r.ranks.len()
        ));
    }
    print!("{table}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("eval.tsv"), &table)?;
    }
    Ok(())
}

fn cmd_recommend(path: &Path, threshold: f64) -> Result<()> {
    let path = if path.is_dir() {
        let json = path.join("summary.json");
        if json.exists() {
            json
        } else {
            path.join("summary.tsv")
        }
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summaries: Vec<SweepSummary> = if path.extension().is_some_and(|e| e == "json") {
        vec![serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?]
    } else {
        parse_summary_tsv(&text)?
    };
    let Some(baseline) = summaries.iter().find(|s| s.encoding == posbench::encodings::Variant::None) else {
        bail!("{} has no baseline row with encoding None", path.display());
    };
    let rec = recommend_encoding(baseline, threshold)?;
    println!("{rec}");
    if let Some(dir) = path.parent() {
        write_file(&dir.join("recommendation.json"), &serde_json::to_string_pretty(&rec)?)?;
    }
    Ok(())
}
