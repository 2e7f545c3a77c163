use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vaxrag_core::answer::{OutputMode, QueryRequest};
use vaxrag_core::corpus::{ingest, load_posts, read_corpus, write_corpus, Comment, IngestOptions};
use vaxrag_core::engine::Engine;
use vaxrag_core::eval::{generate_testcases, read_testcases, write_testcases, ModeMix, TestGenOptions};
use vaxrag_core::index::VectorIndex;

use crate::api::{self, AppState};
use crate::app::{App, QueryResponse};
use crate::config::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "vaxrag", version, about = "Query vaccine discussion corpora with a two-pass retrieval pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "VAXRAG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Fixed timestamps and zero timings in all output.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(alias = "answer_question")]
    AnswerQuestion,
    #[value(alias = "topics_of_discussion")]
    TopicsOfDiscussion,
    Summarise,
    #[value(alias = "public_concerns")]
    PublicConcerns,
}

impl From<ModeArg> for OutputMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AnswerQuestion => OutputMode::AnswerQuestion,
            ModeArg::TopicsOfDiscussion => OutputMode::TopicsOfDiscussion,
            ModeArg::Summarise => OutputMode::Summarise,
            ModeArg::PublicConcerns => OutputMode::PublicConcerns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MixArg {
    /// 103 / 56 / 45 / 72 across answer, concerns, summary, topics.
    Reference,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, classify and tag a JSONL export, merging it into the corpus file.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vaccine: Option<String>,
        /// Corpus file to write; defaults to `corpus_path`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite the corpus file instead of merging into it.
        #[arg(long)]
        replace: bool,
    },
    /// Embed the vaccine-specific comments of a corpus into a fresh index.
    Index {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one query and print the answer.
    Query {
        text: String,
        #[arg(long, value_enum, default_value = "answer-question")]
        mode: ModeArg,
        #[arg(long)]
        k_percent: Option<f64>,
        #[arg(long)]
        vaccine_filter: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Generate synthetic evaluation cases from the corpus.
    GenTestcases {
        #[arg(long, default_value_t = 276)]
        n: usize,
        #[arg(long, value_enum, default_value = "reference")]
        mix: MixArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the pipeline against generated cases.
    Eval {
        #[arg(long)]
        testcases: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: FormatArg,
        #[arg(long)]
        min_context_precision: Option<f64>,
        #[arg(long)]
        min_context_recall: Option<f64>,
        #[arg(long)]
        min_faithfulness: Option<f64>,
        #[arg(long)]
        min_answer_relevancy: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ServiceConfig> {
    let mut cfg = ServiceConfig::load(cli.config.as_deref())?;
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn vaccine_specific(path: &Path) -> anyhow::Result<Vec<Comment>> {
    let corpus = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(corpus.into_iter().filter(|c| !c.vaccine_tags.is_empty()).collect())
}

fn cmd_ingest(
    cfg: &ServiceConfig,
    input: &Path,
    vaccine: Option<String>,
    out: Option<PathBuf>,
    replace: bool,
) -> anyhow::Result<()> {
    let set = cfg.build_providers()?;
    let loaded = load_posts(input)?;
    for w in &loaded.warnings {
        tracing::warn!(line = w.line, reason = %w.reason, "skipped input line");
    }
    let opts = IngestOptions {
        max_in_flight: cfg.retrieval.max_in_flight,
        ..IngestOptions::new(vaccine.unwrap_or_else(|| cfg.vaccine.clone()))
    };
    let output = ingest(&loaded, set.classifier.as_ref(), set.extractor.as_ref(), &opts);
    let out = out.unwrap_or_else(|| cfg.corpus_path.clone());
    let mut merged: BTreeMap<String, Comment> = BTreeMap::new();
    if !replace && out.exists() {
        for c in read_corpus(&out)? {
            merged.insert(c.id.clone(), c);
        }
    }
    for c in output.comments {
        merged.insert(c.id.clone(), c);
    }
    let all: Vec<Comment> = merged.into_values().collect();
    write_corpus(&out, &all)?;
    tracing::info!(path = %out.display(), comments = all.len(), "corpus written");
    print_json(&output.report)
}

#[derive(Serialize)]
struct IndexSummary {
    indexed: usize,
    dim: usize,
    path: String,
}

fn cmd_index(cfg: &ServiceConfig, corpus: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let set = cfg.build_providers()?;
    let corpus = corpus.unwrap_or_else(|| cfg.corpus_path.clone());
    let out = out.unwrap_or_else(|| cfg.index_path.clone());
    let comments = vaccine_specific(&corpus)?;
    let engine = Engine::new(
        VectorIndex::new(cfg.providers.embedding_dim),
        set.providers,
        cfg.retrieval,
        cfg.clock(),
    );
    let indexed = engine.index_comments(&comments)?;
    engine.index().read().persist(&out)?;
    print_json(&IndexSummary {
        indexed,
        dim: cfg.providers.embedding_dim,
        path: out.display().to_string(),
    })
}

fn print_answer(resp: &QueryResponse) {
    println!("{}", resp.answer.text);
    if !resp.supporting_comments.is_empty() {
        println!();
        println!("Supporting comments:");
        for c in &resp.supporting_comments {
            println!("  [{}] {}", c.id, c.excerpt);
        }
    }
    if !resp.answer.dropped_citations.is_empty() {
        println!();
        println!("Dropped citations: {}", resp.answer.dropped_citations.join(", "));
    }
}

fn cmd_query(
    cfg: ServiceConfig,
    text: String,
    mode: ModeArg,
    k_percent: Option<f64>,
    vaccine_filter: Option<String>,
    json: bool,
) -> anyhow::Result<()> {
    let app = App::from_config(cfg)?;
    let mut request = QueryRequest::new(text, mode.into());
    request.vaccine_filter = vaccine_filter;
    request.overrides.k_percent = k_percent;
    let resp = app.query(&request)?;
    if json {
        print_json(&resp)
    } else {
        print_answer(&resp);
        Ok(())
    }
}

fn cmd_serve(mut cfg: ServiceConfig, listen: Option<String>) -> anyhow::Result<()> {
    if let Some(l) = listen {
        cfg.listen = l;
        cfg.validate()?;
    }
    cfg.log_effective();
    let app = App::from_config(cfg)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(api::serve(AppState::new(app)))
}

#[derive(Serialize)]
struct GenerationSummary {
    written: usize,
    skipped: usize,
    path: String,
    counts_per_mode: BTreeMap<OutputMode, usize>,
}

fn cmd_gen_testcases(cfg: &ServiceConfig, n: usize, mix: MixArg, seed: u64, out: &Path) -> anyhow::Result<()> {
    let set = cfg.build_providers()?;
    let corpus = vaccine_specific(&cfg.corpus_path)?;
    let mut opts = TestGenOptions::new(n);
    opts.seed = seed;
    opts.max_in_flight = cfg.retrieval.max_in_flight;
    opts.mode_mix = match mix {
        MixArg::Reference => ModeMix::reference_split(),
        MixArg::Uniform => ModeMix::default(),
    };
    let generated = generate_testcases(&corpus, &opts, set.providers.chat.as_ref())?;
    for s in &generated.skipped {
        tracing::warn!(slot = s.slot, mode = s.mode.as_str(), reason = %s.reason, "case skipped");
    }
    write_testcases(out, &generated.cases)?;
    let mut counts_per_mode = BTreeMap::new();
    for c in &generated.cases {
        *counts_per_mode.entry(c.mode).or_insert(0) += 1;
    }
    print_json(&GenerationSummary {
        written: generated.cases.len(),
        skipped: generated.skipped.len(),
        path: out.display().to_string(),
        counts_per_mode,
    })
}

fn cmd_eval(
    cfg: ServiceConfig,
    testcases: &Path,
    format: FormatArg,
    bounds: [Option<f64>; 4],
) -> anyhow::Result<bool> {
    let mut thresholds = cfg.eval;
    let [p, r, f, a] = bounds;
    thresholds.min_context_precision = p.or(thresholds.min_context_precision);
    thresholds.min_context_recall = r.or(thresholds.min_context_recall);
    thresholds.min_faithfulness = f.or(thresholds.min_faithfulness);
    thresholds.min_answer_relevancy = a.or(thresholds.min_answer_relevancy);

    let cases = read_testcases(testcases)?;
    if cases.is_empty() {
        bail!("{} contains no test cases", testcases.display());
    }
    let fan_out = cfg.retrieval.max_in_flight;
    let app = App::from_config(cfg)?;
    let report = app.eval(&cases, fan_out);
    match format {
        FormatArg::Json => print_json(&report)?,
        FormatArg::Table => print!("{}", report.render_tables()),
    }
    let violations = thresholds.violations(&report);
    for v in &violations {
        eprintln!("threshold violated: {v}");
    }
    Ok(violations.is_empty())
}

/// Runs a parsed command. Failures and threshold violations exit 1; usage
/// errors exit 2 from clap before this is reached.
pub fn run(cli: Cli) -> ExitCode {
    let result = load_config(&cli).and_then(|cfg| match cli.command {
        Command::Ingest {
            input,
            vaccine,
            out,
            replace,
        } => cmd_ingest(&cfg, &input, vaccine, out, replace).map(|_| true),
        Command::Index { corpus, out } => cmd_index(&cfg, corpus, out).map(|_| true),
        Command::Query {
            text,
            mode,
            k_percent,
            vaccine_filter,
            json,
        } => cmd_query(cfg, text, mode, k_percent, vaccine_filter, json).map(|_| true),
        Command::Serve { listen } => cmd_serve(cfg, listen).map(|_| true),
        Command::GenTestcases { n, mix, seed, out } => {
            cmd_gen_testcases(&cfg, n, mix, seed, &out).map(|_| true)
        }
        Command::Eval {
            testcases,
            format,
            min_context_precision,
            min_context_recall,
            min_faithfulness,
            min_answer_relevancy,
        } => cmd_eval(
            cfg,
            &testcases,
            format,
            [
                min_context_precision,
                min_context_recall,
                min_faithfulness,
                min_answer_relevancy,
            ],
        ),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
