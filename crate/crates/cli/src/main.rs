//! Command-line pipeline: corpus generation, line-graph transformation,
//! path labeling, retriever training, retrieval, and evaluation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use kgpath_core::annotate::{
    label_question, target_relations, AnnotationCache, AnnotatorClient, HttpAnnotator,
    LabelStrategy, LexicalMockAnnotator, RelationTargetSet, SelectAllAnnotator,
};
use kgpath_core::embed::{EmbeddingProvider, HashEmbedding, TableEmbedding};
use kgpath_core::infer::{
    extract_answers, prepare_question, random_walk_retrieve, retrieve, serialize_for_reasoner,
    InferenceConfig, RetrievalResult,
};
use kgpath_core::kg::{load_questions, save_questions, validate_instance};
use kgpath_core::line_graph::{build_line_graph, to_dot};
use kgpath_core::metrics::{evaluate, EvalInstance, EvalReport};
use kgpath_core::model::{load_checkpoint, save_checkpoint};
use kgpath_core::synth::{generate_corpus, split_by_template};
use kgpath_core::train::{build_training_example, train_until, TrainConfig};

#[derive(Parser)]
#[command(
    name = "kgpath",
    about = "Line-graph path retrieval for knowledge-graph question answering",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled synthetic corpus and its template split
    Corpus(CorpusArgs),
    /// Line-graph transformation report (and optional DOT dumps)
    Transform(TransformArgs),
    /// Label questions with reasoning paths
    Label(LabelArgs),
    /// Train the retriever on labeled questions
    Train(TrainArgs),
    /// Retrieve reasoning paths with a trained model
    Retrieve(RetrieveArgs),
    /// Score retrievals against gold answers
    Eval(EvalArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TransformArgs {
    /// Questions file (JSONL)
    #[arg(long)]
    questions: PathBuf,
    /// Per-question line-graph statistics (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// Directory for DOT renderings, one file per question
    #[arg(long)]
    dot: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum AnnotatorKind {
    /// Lexical-overlap mock (offline)
    Mock,
    /// Select every candidate (offline)
    All,
    /// JSON-over-HTTP endpoint; bearer token read from KGPATH_ANNOTATOR_KEY
    Http,
}

#[derive(Copy, Clone, ValueEnum)]
enum StrategyKind {
    Rational,
    Shortest,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    questions: PathBuf,
    /// Labels file to write (JSONL)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = AnnotatorKind::Mock)]
    annotator: AnnotatorKind,
    #[arg(long, value_enum, default_value_t = StrategyKind::Rational)]
    strategy: StrategyKind,
    /// Annotation cache file (JSONL, append-only)
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Also produce relation-target sets for positive augmentation
    #[arg(long)]
    relation_targets: Option<PathBuf>,
    /// Candidate enumeration cap per question
    #[arg(long, default_value_t = 200)]
    cap: usize,
    /// Endpoint for --annotator http
    #[arg(long)]
    url: Option<String>,
}

#[derive(Args, Clone)]
struct EmbedArgs {
    /// Hash-embedding dimension (ignored with --table)
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Precomputed embedding table (label<TAB>values)
    #[arg(long)]
    table: Option<PathBuf>,
}

impl EmbedArgs {
    fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match &self.table {
            Some(path) => Box::new(TableEmbedding::load(path)?),
            None => Box::new(HashEmbedding::new(self.dim)),
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Relation-target sets from `label --relation-targets`
    #[arg(long)]
    relation_targets: Option<PathBuf>,
    /// Checkpoint file to write (JSON)
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss trace (JSONL)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// TOML config file with a [train] table; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda_q: Option<f64>,
    #[arg(long)]
    lambda_path: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Retrievals file to write (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// Plain-text rendering of the retrieved paths
    #[arg(long)]
    rendered: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    k: usize,
    #[arg(long, default_value_t = 80)]
    m: usize,
    #[arg(long, default_value_t = 4)]
    max_hops: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deduplicate before truncating to M instead of after
    #[arg(long)]
    dedup_first: bool,
    /// Ignore the model and walk uniformly at random (baseline)
    #[arg(long)]
    random_baseline: bool,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    retrievals: PathBuf,
    /// Report file to write (JSON); also printed to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Corpus(args) => cmd_corpus(args),
        Command::Transform(args) => cmd_transform(args),
        Command::Label(args) => cmd_label(args),
        Command::Train(args) => cmd_train(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn cmd_corpus(args: CorpusArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let corpus = generate_corpus(args.seed);
    let (train, test) = split_by_template(&corpus);
    save_questions(&corpus, &args.out.join("full.jsonl"))?;
    save_questions(&train, &args.out.join("train.jsonl"))?;
    save_questions(&test, &args.out.join("test.jsonl"))?;
    println!(
        "corpus: {} questions ({} train, {} held-out templates) -> {}",
        corpus.len(),
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TransformRecord {
    question_id: String,
    triples: usize,
    line_nodes: usize,
    line_edges: usize,
    validation_issues: usize,
}

fn cmd_transform(args: TransformArgs) -> Result<()> {
    let questions = load_questions(&args.questions)?;
    if let Some(dir) = &args.dot {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for q in &questions {
        let lg = build_line_graph(&q.subgraph);
        let report = validate_instance(q);
        let issues = report.unlinked_question_entities.len()
            + report.missing_answers.len()
            + report.isolated_question_entities.len();
        let rec = TransformRecord {
            question_id: q.question_id.clone(),
            triples: q.subgraph.triple_count(),
            line_nodes: lg.node_count(),
            line_edges: lg.edge_count(),
            validation_issues: issues,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
        if let Some(dir) = &args.dot {
            std::fs::write(
                dir.join(format!("{}.dot", q.question_id)),
                to_dot(&q.subgraph, &lg),
            )?;
        }
    }
    write_atomic(&args.out, &out)?;
    println!("transformed {} questions -> {}", questions.len(), args.out.display());
    Ok(())
}

/// Relation targets on disk, by label (relation ids are per-subgraph).
#[derive(Serialize, Deserialize)]
struct TargetRecord {
    question_id: String,
    relations: Vec<String>,
}

fn cmd_label(args: LabelArgs) -> Result<()> {
    let questions = load_questions(&args.questions)?;
    let client: Box<dyn AnnotatorClient> = match args.annotator {
        AnnotatorKind::Mock => Box::new(LexicalMockAnnotator),
        AnnotatorKind::All => Box::new(SelectAllAnnotator),
        AnnotatorKind::Http => {
            let url = args.url.as_deref().context("--annotator http needs --url")?;
            Box::new(HttpAnnotator::new(url, "KGPATH_ANNOTATOR_KEY"))
        }
    };
    let mut cache = match &args.cache {
        Some(path) => AnnotationCache::open(path)?,
        None => AnnotationCache::ephemeral(),
    };
    let strategy = match args.strategy {
        StrategyKind::Rational => LabelStrategy::Rational,
        StrategyKind::Shortest => LabelStrategy::Shortest,
    };
    let mut labels = String::new();
    let mut targets = String::new();
    let mut fallbacks = 0;
    for q in &questions {
        let rec = label_question(client.as_ref(), q, &mut cache, args.cap, strategy)?;
        if rec.fallback {
            fallbacks += 1;
        }
        labels.push_str(&serde_json::to_string(&rec)?);
        labels.push('\n');
        if args.relation_targets.is_some() {
            let t = target_relations(client.as_ref(), q, &mut cache)?;
            let rec = TargetRecord {
                question_id: q.question_id.clone(),
                relations: t
                    .relations
                    .iter()
                    .map(|&r| q.subgraph.relation_label(r).to_string())
                    .collect(),
            };
            targets.push_str(&serde_json::to_string(&rec)?);
            targets.push('\n');
        }
    }
    write_atomic(&args.out, &labels)?;
    if let Some(path) = &args.relation_targets {
        write_atomic(path, &targets)?;
    }
    println!(
        "labeled {} questions ({} fallbacks) -> {}",
        questions.len(),
        fallbacks,
        args.out.display()
    );
    Ok(())
}

#[derive(Deserialize, Default)]
struct FileConfig {
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let questions = load_questions(&args.questions)?;
    let labels = kgpath_core::annotate::load_labels(&args.labels)?;
    let provider = args.embed.provider()?;

    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let parsed: FileConfig = toml::from_str(&text)?;
            parsed.train.unwrap_or_default()
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.hidden {
        config.hidden = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.dropout {
        config.dropout = v;
    }
    if let Some(v) = args.lambda_q {
        config.lambda_q = v;
    }
    if let Some(v) = args.lambda_path {
        config.lambda_path = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let target_records: Vec<TargetRecord> = match &args.relation_targets {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Into::into))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let mut examples = Vec::new();
    let mut skipped = 0;
    for q in &questions {
        let Some(rec) = labels.iter().find(|r| r.question_id == q.question_id) else {
            skipped += 1;
            continue;
        };
        let paths = rec.to_reasoning_paths(&q.subgraph)?;
        if paths.is_empty() {
            skipped += 1;
            continue;
        }
        let targets = target_records
            .iter()
            .find(|t| t.question_id == q.question_id)
            .map(|t| RelationTargetSet {
                question_id: t.question_id.clone(),
                relations: t
                    .relations
                    .iter()
                    .filter_map(|l| q.subgraph.relation(l))
                    .collect(),
            });
        examples.push(build_training_example(q, &paths, targets.as_ref(), provider.as_ref())?);
    }
    if examples.is_empty() {
        bail!("no labeled questions to train on");
    }

    let outcome = train_until(&examples, provider.dim(), &config, 0, |_| false)?;
    save_checkpoint(&outcome.params, &args.out)?;
    if let Some(path) = &args.trace {
        let mut text = String::new();
        for rec in &outcome.trace {
            text.push_str(&serde_json::to_string(rec)?);
            text.push('\n');
        }
        write_atomic(path, &text)?;
    }
    let last = outcome.trace.last().unwrap();
    println!(
        "trained on {} questions ({} skipped), {} epochs, final loss {:.4} -> {}",
        examples.len(),
        skipped,
        outcome.trace.len(),
        last.total_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let questions = load_questions(&args.questions)?;
    let provider = args.embed.provider()?;
    let config = InferenceConfig {
        k_starts: args.k,
        m_paths: args.m,
        max_hops: args.max_hops,
        dedup_before_truncate: args.dedup_first,
        seed: args.seed,
        ..InferenceConfig::default()
    };
    let params = if args.random_baseline {
        None
    } else {
        let p = load_checkpoint(&args.model)?;
        if p.d_text != provider.dim() {
            bail!(
                "model expects {}-dim text embeddings but the provider yields {}",
                p.d_text,
                provider.dim()
            );
        }
        Some(p)
    };

    let mut out = String::new();
    let mut rendered = String::new();
    let mut total_triples = 0usize;
    use rand::SeedableRng;
    for q in &questions {
        let prepared = prepare_question(q, provider.as_ref());
        // per-question stream keyed on the run seed and the id, so output is
        // independent of question order
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ stable_hash(&q.question_id));
        let result = match &params {
            Some(p) => retrieve(p, &prepared, &config, &mut rng)?,
            None => random_walk_retrieve(&prepared, &config, &mut rng)?,
        };
        total_triples += result.triples.len();
        out.push_str(&serde_json::to_string(&result)?);
        out.push('\n');
        if args.rendered.is_some() {
            rendered.push_str(&format!("# {}\n", q.question_id));
            rendered.push_str(&serialize_for_reasoner(&q.subgraph, &result));
        }
    }
    write_atomic(&args.out, &out)?;
    if let Some(path) = &args.rendered {
        write_atomic(path, &rendered)?;
    }
    println!(
        "retrieved for {} questions (K={}, M={}, mean {:.2} triples) -> {}",
        questions.len(),
        args.k,
        args.m,
        total_triples as f64 / questions.len().max(1) as f64,
        args.out.display()
    );
    Ok(())
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a, stable across platforms and runs
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let questions = load_questions(&args.questions)?;
    let retrievals: Vec<RetrievalResult> = std::fs::read_to_string(&args.retrievals)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect::<Result<_>>()?;
    let mut instances = Vec::new();
    let mut missing = BTreeSet::new();
    for q in &questions {
        let Some(r) = retrievals.iter().find(|r| r.question_id == q.question_id) else {
            missing.insert(q.question_id.clone());
            continue;
        };
        instances.push(EvalInstance {
            question: q,
            predicted: extract_answers(&q.subgraph, r),
            retrieved_triple_count: r.triples.len(),
        });
    }
    if !missing.is_empty() {
        bail!("no retrievals for questions: {missing:?}");
    }
    let report = evaluate(&instances);
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        write_atomic(path, &json)?;
    }
    println!("{json}");
    print_summary(&report);
    Ok(())
}

fn print_summary(r: &EvalReport) {
    println!(
        "eval: n={} Hit={:.3} Macro-F1={:.3} (mean retrieved triples {:.2})",
        r.count, r.hit, r.macro_f1, r.mean_retrieved_triples
    );
    println!(
        "hops: 1 -> Hit {:.3} (n={}), 2 -> Hit {:.3} (n={}), >=3 -> Hit {:.3} (n={}), absent {}",
        r.hop1.hit, r.hop1.count, r.hop2.hit, r.hop2.count, r.hop3_plus.hit, r.hop3_plus.count, r.answers_absent
    );
}
