use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use subkg_core::config::KEYS;
use subkg_core::fixtures::{star_dataset, ToyKg, ToySplit};
use subkg_core::gradcheck::{format_reports, run_suite, DEFAULT_EPS, DEFAULT_TOL};
use subkg_core::graph::{ingest_cached, load_cache, save_cache, IngestOptions, SplitPaths, TripleFormat};
use subkg_core::vocab::{build_vocabulary, select_anchors, DEFAULT_MAX_HOPS};
use subkg_core::{
    evaluate, Checkpoint, Dataset, EmbeddingScorer, Error, KnownTriples, Protocol, RunConfig, Split, Trainer,
    Vocabulary,
};

/// Report and echo layout version.
const FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "subkg", version, about = "Knowledge graph embeddings from anchor/neighbor/center subgraphs")]
struct Cli {
    /// Worker threads for every parallel stage (1 = bit-reproducible).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse triple files into a binary graph cache.
    Ingest(IngestArgs),
    /// Write a built-in graph to a graph cache.
    Synth(SynthArgs),
    /// Select anchors and write the per-entity token table.
    BuildVocab(BuildVocabArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Filtered link-prediction metrics for a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
    /// Print one entity's tokens.
    DumpSubgraph(DumpArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// ids|labels
    #[arg(long, default_value = "ids")]
    format: TripleFormat,
    #[arg(long)]
    num_entities: Option<u64>,
    #[arg(long)]
    num_relations: Option<u64>,
    /// Drop repeated train triples.
    #[arg(long)]
    dedup: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// toy|star
    #[arg(long)]
    preset: String,
    /// Hold out this fraction of the toy graph as the test split instead of
    /// testing on the training triples.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Where the graph (and possibly the vocabulary) comes from.
#[derive(Args)]
struct Source {
    /// Graph cache.
    #[arg(long, required_unless_present = "preset")]
    graph: Option<PathBuf>,
    /// Vocabulary file; built from the config when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Built-in graph and config: toy|star.
    #[arg(long, conflicts_with = "graph")]
    preset: Option<String>,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[command(flatten)]
    source: GraphSource,
    /// Anchor set size (default 0.4% of entities).
    #[arg(long)]
    num_anchors: Option<usize>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_HOPS)]
    max_hops: usize,
    #[arg(long, required_unless_present = "dump_text")]
    out: Option<PathBuf>,
    /// Print `entity: anchors | neighbors | center` lines to stdout.
    #[arg(long)]
    dump_text: bool,
}

#[derive(Args)]
struct GraphSource {
    #[arg(long, required_unless_present = "preset")]
    graph: Option<PathBuf>,
    /// toy|star
    #[arg(long, conflicts_with = "graph")]
    preset: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: Source,
    /// key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this step instead of max_steps.
    #[arg(long)]
    until: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    /// train|valid|test
    #[arg(long, default_value = "test")]
    split: Split,
    /// full|sampled|sampled-N
    #[arg(long, default_value = "full")]
    protocol: Protocol,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    entity: u32,
    #[command(flatten)]
    source: Source,
}

fn keys_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Config keys (train --config / --set), with defaults:\n");
    for (k, desc) in KEYS {
        s.push_str(&format!("  {k:<20} {:<15} {desc}\n", d.get(k).unwrap_or_default()));
    }
    s.push_str("\nLog level: SUBKG_LOG (error|warn|info|debug|trace), default info.");
    s
}

fn preset_dataset(name: &str, holdout: Option<f64>) -> anyhow::Result<Dataset> {
    Ok(match (name, holdout) {
        ("toy", None) => ToyKg::default().dataset(ToySplit::Memorize),
        ("toy", Some(f)) if f > 0.0 && f < 1.0 => ToyKg::default().dataset(ToySplit::Holdout(f)),
        ("toy", Some(f)) => bail!(Error::InvalidArgument(format!("holdout must be in (0, 1), got {f}"))),
        ("star", None) => star_dataset(),
        ("star", Some(_)) => bail!(Error::InvalidArgument("--holdout applies to the toy graph only".into())),
        _ => bail!(Error::Config(format!("unknown preset {name:?} (toy|star)"))),
    })
}

fn load_dataset(graph: Option<&Path>, preset: Option<&str>) -> anyhow::Result<Dataset> {
    match (graph, preset) {
        (Some(p), _) => Ok(load_cache(p)?),
        (None, Some(name)) => preset_dataset(name, None),
        (None, None) => bail!(Error::InvalidArgument("--graph or --preset is required".into())),
    }
}

fn vocab_for(ds: &Dataset, path: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<Vocabulary> {
    if let Some(p) = path {
        let v = Vocabulary::load(p, &ds.graph)?;
        if v.k() != cfg.k_anchors || v.m() != cfg.m_neighbors {
            bail!(Error::Config(format!(
                "vocabulary has k={} m={}, config wants k_anchors={} m_neighbors={}",
                v.k(),
                v.m(),
                cfg.k_anchors,
                cfg.m_neighbors
            )));
        }
        return Ok(v);
    }
    let n = ds.graph.num_entities();
    let anchors = select_anchors(&ds.graph, cfg.anchor_count(n))?;
    log::info!("building vocabulary: {} anchors, k={} m={}", anchors.len(), cfg.k_anchors, cfg.m_neighbors);
    Ok(build_vocabulary(&ds.graph, &anchors, cfg.k_anchors, cfg.m_neighbors, DEFAULT_MAX_HOPS)?)
}

fn base_config(source: &Source) -> anyhow::Result<RunConfig> {
    Ok(match &source.preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::default(),
    })
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let paths = SplitPaths { train: a.train, valid: a.valid, test: a.test };
    let opts = IngestOptions {
        format: a.format,
        num_entities: a.num_entities,
        num_relations: a.num_relations,
        dedup: a.dedup,
    };
    let ds = ingest_cached(&paths, &opts, &a.out)?;
    println!(
        "{}: {} entities, {} relations, {}/{}/{} train/valid/test",
        a.out.display(),
        ds.graph.num_entities(),
        ds.graph.num_relations(),
        ds.graph.triples().len(),
        ds.valid.len(),
        ds.test.len()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let ds = preset_dataset(&a.preset, a.holdout)?;
    save_cache(&ds, &a.out)?;
    println!(
        "{}: {} entities, {} relations, {}/{}/{} train/valid/test",
        a.out.display(),
        ds.graph.num_entities(),
        ds.graph.num_relations(),
        ds.graph.triples().len(),
        ds.valid.len(),
        ds.test.len()
    );
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> anyhow::Result<()> {
    let ds = load_dataset(a.source.graph.as_deref(), a.source.preset.as_deref())?;
    let n = ds.graph.num_entities();
    let count = a.num_anchors.unwrap_or_else(|| subkg_core::vocab::default_anchor_count(n));
    let anchors = select_anchors(&ds.graph, count)?;
    let vocab = build_vocabulary(&ds.graph, &anchors, a.k, a.m, a.max_hops)?;
    if let Some(out) = &a.out {
        vocab.save(out)?;
        log::info!("wrote {} ({} entities, {} anchors, k={} m={})", out.display(), n, count, a.k, a.m);
    }
    if a.dump_text {
        print!("{}", vocab.dump_text());
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let ds = load_dataset(a.source.graph.as_deref(), a.source.preset.as_deref())?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = match &resume {
        Some(ckpt) => {
            if a.config.is_some() || !a.overrides.is_empty() {
                bail!(Error::InvalidArgument("a resumed run keeps its checkpoint config".into()));
            }
            ckpt.config
        }
        None => {
            let mut cfg = base_config(&a.source)?;
            if let Some(p) = &a.config {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                cfg.apply_text(&text)?;
            }
            for o in &a.overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            cfg
        }
    };
    let vocab = vocab_for(&ds, a.source.vocab.as_deref(), &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trainer = match &resume {
        Some(ckpt) => Trainer::resume(&ds, &vocab, ckpt)?,
        None => Trainer::new(&ds, &vocab, cfg)?,
    };
    let summary = trainer.run(a.until.unwrap_or(cfg.train.max_steps), Some(&a.out))?;
    let best = summary.best_valid_mrr.map_or("n/a".to_string(), |m| format!("{m:.4}"));
    println!("trained {} steps, last loss {:.6}, best valid mrr {best}", summary.steps, summary.last_loss);
    println!("checkpoints in {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ds = load_dataset(a.source.graph.as_deref(), a.source.preset.as_deref())?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    ckpt.check_graph(&ds)?;
    let vocab = vocab_for(&ds, a.source.vocab.as_deref(), &ckpt.config)?;
    let model = ckpt.model()?;
    let scorer = EmbeddingScorer::from_model(&model, &vocab)?;
    let triples = ds.split(a.split);
    let known = KnownTriples::new(ds.all_triples());
    let report = evaluate(&scorer, triples, &known, a.protocol, a.seed)?;
    println!(
        "mrr {:.4} hits@1 {:.4} hits@3 {:.4} hits@10 {:.4} ({} queries, {})",
        report.mrr, report.hits1, report.hits3, report.hits10, report.queries, report.protocol
    );
    if let Some(path) = &a.report {
        let json = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "checkpoint": a.checkpoint.display().to_string(),
            "step": ckpt.step,
            "split": format!("{:?}", a.split).to_lowercase(),
            "seed": a.seed,
            "config": ckpt.config.echo(),
            "metrics": report,
        });
        let text = serde_json::to_string_pretty(&json)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<bool> {
    let reports = run_suite(a.seed, a.eps, a.tol)?;
    print!("{}", format_reports(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.case.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    if failed.is_empty() {
        println!("all {} cases pass (worst {worst:.3e}, tol {:e})", reports.len(), a.tol);
    } else {
        println!("failed: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn dump_subgraph(a: DumpArgs) -> anyhow::Result<()> {
    let ds = load_dataset(a.source.graph.as_deref(), a.source.preset.as_deref())?;
    let vocab = match &a.source.vocab {
        Some(p) => Vocabulary::load(p, &ds.graph)?,
        None => vocab_for(&ds, None, &base_config(&a.source)?)?,
    };
    println!("{}", vocab.dump_line(a.entity)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::Ingest(a) => ingest(a)?,
        Command::Synth(a) => synth(a)?,
        Command::BuildVocab(a) => build_vocab(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::DumpSubgraph(a) => dump_subgraph(a)?,
    }
    Ok(true)
}

fn error_line(e: &anyhow::Error) -> String {
    let kind = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or("other", Error::kind);
    let msg = format!("{e:#}").replace('\n', " ");
    format!("error: kind={kind} msg={msg}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SUBKG_LOG", "info")).init();
    let keys = keys_help();
    let mut cmd = Cli::command().after_help(keys.clone());
    for sub in ["train", "eval"] {
        let k = keys.clone();
        cmd = cmd.mut_subcommand(sub, |c| c.after_help(k));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
