use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aggquery_core::aggregate::Aggregator;
use aggquery_core::corpus::{corpus_stats, read_documents_jsonl};
use aggquery_core::eval::{expand_corpus, run_benchmark, score_histogram, GoldSet, System};
use aggquery_core::filter::{CandidateSet, FilterSession, TrailEntry};
use aggquery_core::index::{Bm25Index, TrigramHashEmbedder, DEFAULT_B, DEFAULT_K1};
use aggquery_core::llm::LlmClient;
use aggquery_core::pipeline::{parse_with, run_query, RunConfig};
use aggquery_core::prompts::PromptSet;
use aggquery_core::{ChunkPolicy, Corpus, QuerySpec};
use aggquery_service::console::{render_answer, run_console};
use aggquery_service::engine::{ClassifierMode, CreateQuery};
use aggquery_service::{router, QueryService, ServiceConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "aggquery", version, about = "Entity-level aggregation queries over text corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Corpus directory written by `ingest`.
    #[arg(long)]
    corpus: PathBuf,
    /// Run configuration (TOML). Defaults: rule parsing, scripted backend.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, conflicts_with = "spec")]
    question: Option<String>,
    /// Parsed query as JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a JSONL file of {doc_id, text} records into a corpus directory.
    Ingest {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus_id: Option<String>,
        #[arg(long, default_value_t = ChunkPolicy::default().max_tokens)]
        max_tokens: usize,
        #[arg(long, default_value_t = ChunkPolicy::default().overlap)]
        overlap: usize,
    },
    /// Build the BM25 index under <corpus>/bm25.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K1)]
        k1: f64,
        #[arg(long, default_value_t = DEFAULT_B)]
        b: f64,
    },
    /// Corpus size and, with a gold file, evidence density.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Run the filter stage and print the candidate set.
    Filter {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        query: QueryArgs,
    },
    /// Aggregate a candidate set written by `filter`.
    Aggregate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
    },
    /// Filter and aggregate one query.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// Print JSON instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Score a gold file and write a report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        gold: PathBuf,
        /// Evaluate rank-then-read with this many chunks instead of the pipeline.
        #[arg(long)]
        naive_rag: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep pool documents whose best BM25 score against the core corpus is in [lo, hi].
    Expand {
        #[arg(long)]
        core: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        lo: f64,
        #[arg(long)]
        hi: f64,
        /// JSONL file for the kept documents.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Serve the HTTP API.
    Serve {
        /// Corpus directories to load (repeatable).
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        llm_classifier: bool,
    },
    /// Replay a saved filter trail and print the resulting snapshots.
    Session {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        trail: PathBuf,
    },
    /// Interactive session on stdin: clarify, filter, roll back, aggregate.
    Console {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        question: String,
    },
}

struct Loaded {
    corpus: Arc<Corpus>,
    config: RunConfig,
    client: LlmClient,
    prompts: PromptSet,
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    match path {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((cfg, base))
        }
        None => Ok((RunConfig::default(), PathBuf::from("."))),
    }
}

fn load(args: &RunArgs) -> Result<Loaded> {
    let corpus = Corpus::load(&args.corpus).with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    let (config, base) = load_config(args.config.as_deref())?;
    let client = config.llm.build_client(&base)?;
    let prompts = config.prompt_set(&base)?;
    Ok(Loaded { corpus: Arc::new(corpus), config, client, prompts })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(x: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(x)?);
    Ok(())
}

fn query_spec(l: &Loaded, q: &QueryArgs) -> Result<QuerySpec> {
    match (&q.question, &q.spec) {
        (_, Some(path)) => read_json(path),
        (Some(text), None) => Ok(parse_with(l.config.pipeline.parse, text, &l.client, &l.prompts)?),
        (None, None) => bail!("give --question or --spec"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Ingest { docs, out, corpus_id, max_tokens, overlap } => {
            let records = read_documents_jsonl(&docs)?;
            let id = corpus_id.unwrap_or_else(|| {
                out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
            });
            let corpus = Corpus::ingest(id, &records, ChunkPolicy::new(max_tokens, overlap)?)?;
            corpus.save(&out)?;
            eprintln!("{} documents, {} chunks, {} tokens", corpus.doc_count(), corpus.len(), corpus.token_total());
        }
        Command::Index { corpus, k1, b } => {
            let c = Corpus::load(&corpus)?;
            let idx = Bm25Index::build(&c, k1, b)?;
            idx.save(&corpus.join("bm25"))?;
            eprintln!("indexed {} chunks, {} terms", idx.doc_count(), idx.vocabulary_size());
        }
        Command::Stats { corpus, gold } => {
            let c = Corpus::load(&corpus)?;
            let stats = match gold {
                Some(g) => {
                    let gold = GoldSet::load_jsonl(&g)?;
                    let ids: Vec<&String> = gold.all_evidence().into_iter().collect();
                    corpus_stats(&c, Some(&ids))?
                }
                None => corpus_stats::<&str>(&c, None)?,
            };
            print_json(&stats)?;
        }
        Command::Filter { run, query } => {
            let l = load(&run)?;
            let spec = query_spec(&l, &query)?;
            let p = &l.config.pipeline;
            let mut session = FilterSession::open(l.corpus.clone(), spec, p.budget, p.filter.clone())?;
            let cands = session.run(&l.client, &l.prompts, p.probe)?;
            print_json(&cands)?;
        }
        Command::Aggregate { run, spec, candidates } => {
            let l = load(&run)?;
            let spec: QuerySpec = read_json(&spec)?;
            let cands: CandidateSet = read_json(&candidates)?;
            let p = &l.config.pipeline;
            let out = Aggregator::new(&l.corpus, &l.client, &l.prompts, p.aggregate.clone())
                .with_aliases(p.aliases.clone())
                .run(&spec, &cands)?;
            print_json(&out.answer)?;
        }
        Command::Run { run, query, json } => {
            let l = load(&run)?;
            let spec = query_spec(&l, &query)?;
            let out = run_query(l.corpus.clone(), &spec, &l.client, &l.prompts, &l.config.pipeline)?;
            if json {
                print_json(&out.answer)?;
            } else {
                print!("{}", render_answer(&out.answer));
            }
        }
        Command::Eval { run, gold, naive_rag, out } => {
            let l = load(&run)?;
            let gold = GoldSet::load_jsonl(&gold)?;
            let pipeline = l.config.pipeline.clone();
            let system = match naive_rag.or(l.config.eval.naive_rag_k) {
                Some(k) => System::NaiveRag { k, config: pipeline },
                None => System::Pipeline(pipeline),
            };
            let report = run_benchmark(l.corpus.clone(), &gold, &system, &l.client, &l.prompts, l.config.eval.epsilon)?;
            match out {
                Some(path) => {
                    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                    print_json(&report.aggregates)?;
                }
                None => print_json(&report)?,
            }
        }
        Command::Expand { core, pool, lo, hi, out, bins } => {
            let index_dir = core.join("bm25");
            let idx = if index_dir.exists() {
                Bm25Index::load(&index_dir)?
            } else {
                Bm25Index::build(&Corpus::load(&core)?, DEFAULT_K1, DEFAULT_B)?
            };
            let pool = read_documents_jsonl(&pool)?;
            let report = expand_corpus(&idx, &pool, lo, hi)?;
            if let Some(path) = out {
                let lines: Vec<String> = report.kept.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
                fs::write(&path, lines.join("\n") + "\n")?;
            }
            print_json(&serde_json::json!({
                "kept": report.kept.len(),
                "pool": report.scores.len(),
                "histogram": score_histogram(&report.scores, bins),
            }))?;
        }
        Command::Serve { corpora, config, addr, llm_classifier } => {
            let (cfg, base) = load_config(config.as_deref())?;
            let client = cfg.llm.build_client(&base)?;
            let prompts = cfg.prompt_set(&base)?;
            let service_cfg = ServiceConfig {
                pipeline: cfg.pipeline.clone(),
                classifier: if llm_classifier { ClassifierMode::Llm } else { ClassifierMode::Rules },
                ..ServiceConfig::default()
            };
            let service = QueryService::new(client, prompts, service_cfg);
            for dir in &corpora {
                service.add_corpus(Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))?);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(Arc::new(service)))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Session { run, spec, trail } => {
            let l = load(&run)?;
            let spec: QuerySpec = read_json(&spec)?;
            let trail: Vec<TrailEntry> = read_json(&trail)?;
            let p = &l.config.pipeline;
            let session = FilterSession::replay(
                l.corpus.clone(),
                spec,
                p.budget,
                p.filter.clone(),
                Arc::new(TrigramHashEmbedder::default()),
                &trail,
            )?;
            print_json(session.state())?;
        }
        Command::Console { run, question } => {
            let l = load(&run)?;
            let service_cfg = ServiceConfig { pipeline: l.config.pipeline.clone(), ..ServiceConfig::default() };
            let service = QueryService::new(l.client, l.prompts, service_cfg);
            let corpus_id = l.corpus.id().to_string();
            service.add_corpus(Arc::unwrap_or_clone(l.corpus));
            let create = CreateQuery { corpus_id, question, query_id: None, spec: None, skip_clarifications: false };
            run_console(&service, create, BufReader::new(io::stdin()), io::stdout())?;
        }
    }
    Ok(())
}
