use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use webr_core::analysis::{self, HashingEmbedder};
use webr_core::complete::ApproxTokenCounter;
use webr_core::corpus::sample_by_mix;
use webr_core::cost::{reference_plan, BudgetReport, CostLedger, PlanRow, Price, Prices};
use webr_core::dedup::{dedup, DedupParams, Dedupable};

use webr::config::{BackendKind, RunConfig};
use webr::corpus::load_corpora;
use webr::dataset::{self, read_pairs};
use webr::embed::{Embedder, FileEmbeddings};
use webr::pipeline::{self, DedupDrop, RunOptions};
use webr::Stage;

#[derive(Parser)]
#[command(name = "webr", version, about = "Turn web documents into instruction-response pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline.
    Run(RunArgs),
    /// Sample documents by domain mix and write them as JSONL.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Near-duplicate removal over a JSONL file.
    Dedup(DedupArgs),
    /// Dataset reports.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Cost table from a plan or a recorded ledger.
    Budget(BudgetArgs),
    /// Check a dataset file; exits with 2 on any violation.
    Validate {
        dataset: PathBuf,
        /// Config whose dedup settings to verify against; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Reuse valid checkpoints from an earlier run.
    #[arg(long)]
    resume: bool,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Override target_pairs.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_enum, hide = true)]
    stop_after: Option<Stage>,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Where to write `{dropped_id, kept_id, estimated_jaccard}` lines.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Field holding the record key.
    #[arg(long, default_value = "id")]
    id_field: String,
    /// Field holding the compared text.
    #[arg(long, default_value = "instruction")]
    text_field: String,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    Diversity {
        dataset: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Precomputed `{id, vector}` JSONL; hashing embeddings otherwise.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
    Judge {
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
    },
    Tokens {
        dataset: PathBuf,
        #[arg(long, default_value_t = 64)]
        bin_width: u64,
    },
    Budget(BudgetArgs),
}

#[derive(Args, Clone)]
struct BudgetArgs {
    /// JSON list of `{stage, calls, avg_input_tokens, avg_output_tokens}`.
    #[arg(long, conflicts_with = "ledger")]
    plan: Option<PathBuf>,
    /// A manifest or ledger JSON from a run.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Dollars per 1M input tokens.
    #[arg(long)]
    input_price: Option<f64>,
    /// Dollars per 1M output tokens.
    #[arg(long)]
    output_price: Option<f64>,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(args) => run(args),
        Command::Sample { config, out } => sample(&config, &out),
        Command::Dedup(args) => dedup_cmd(args),
        Command::Analyze { what } => analyze(what),
        Command::Budget(args) => budget(&args),
        Command::Validate { dataset, config, json } => validate(&dataset, config.as_deref(), json),
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(b) = args.backend {
        cfg.backend.kind = b;
    }
    if let Some(n) = args.limit {
        if n == 0 {
            bail!("--limit must be positive");
        }
        cfg.target_pairs = n;
    }
    let out = pipeline::run(
        &cfg,
        &RunOptions {
            resume: args.resume,
            stop_after: args.stop_after,
        },
    )?;
    if let Some(s) = out.resumed_from {
        log::info!("resumed after checkpoint {s}");
    }
    if let Some(s) = out.stopped_after {
        println!("stopped after stage {s}");
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "{} pairs written to {}",
        out.pairs,
        out.dataset.as_deref().unwrap_or(Path::new("?")).display()
    );
    if out.shortfall > 0 {
        println!("shortfall: {} below target {}", out.shortfall, cfg.target_pairs);
    }
    println!("{}", BudgetReport::from_ledger(&out.ledger, cfg.prices()?));
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SampledLine<'a> {
    id: &'a str,
    text: &'a str,
    domain: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<&'a str>,
}

fn sample(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let sources = cfg.corpora.iter().map(|(d, s)| (d.clone(), s.path.clone())).collect();
    let (corpora, _) = load_corpora(&sources, &cfg.load_options())?;
    let docs = sample_by_mix(&corpora, &cfg.domain_mix()?, cfg.sample_size(), cfg.sample_seed())?;
    let lines: Vec<SampledLine> = docs
        .iter()
        .map(|d| SampledLine {
            id: &d.id,
            text: &d.text,
            domain: &d.domain,
            source: d.source.as_deref(),
        })
        .collect();
    pipeline::write_jsonl(out, &lines)?;
    let mut per_domain: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &docs {
        *per_domain.entry(d.domain.as_str()).or_default() += 1;
    }
    for (d, n) in per_domain {
        println!("{d}\t{n}");
    }
    Ok(ExitCode::SUCCESS)
}

struct JsonRecord {
    key: String,
    text: String,
    raw: serde_json::Value,
}

impl Dedupable for JsonRecord {
    fn dedup_key(&self) -> &str {
        &self.key
    }
    fn dedup_text(&self) -> &str {
        &self.text
    }
}

fn dedup_cmd(args: DedupArgs) -> Result<ExitCode> {
    let mut params = match &args.config {
        Some(p) => RunConfig::load(p)?.dedup.params()?,
        None => DedupParams::default(),
    };
    if let Some(t) = args.threshold {
        params.threshold = t;
    }
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let raw: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", args.input.display(), i + 1))?;
        let field = |name: &str| -> Result<String> {
            match raw.get(name) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
                _ => bail!("{}:{}: missing string field {name:?}", args.input.display(), i + 1),
            }
        };
        records.push(JsonRecord {
            key: field(&args.id_field)?,
            text: field(&args.text_field)?,
            raw: raw.clone(),
        });
    }
    let outcome = dedup(records, &params)?;
    let kept: Vec<&serde_json::Value> = outcome.kept.iter().map(|r| &r.raw).collect();
    pipeline::write_jsonl(&args.output, &kept)?;
    let drops: Vec<DedupDrop> = outcome
        .dropped
        .iter()
        .map(|d| DedupDrop {
            dropped_id: d.record.key.clone(),
            kept_id: d.duplicate_of.clone(),
            estimated_jaccard: d.estimated_jaccard,
        })
        .collect();
    if let Some(report) = &args.report {
        pipeline::write_jsonl(report, &drops)?;
    }
    println!("kept {}, dropped {}", outcome.kept.len(), drops.len());
    Ok(ExitCode::SUCCESS)
}

fn analyze(what: Analyze) -> Result<ExitCode> {
    match what {
        Analyze::Diversity {
            dataset,
            n,
            seed,
            embeddings,
            dim,
        } => {
            let pairs = read_pairs(&dataset)?;
            let idx = analysis::sample_indices(pairs.len(), n.min(pairs.len()), seed)?;
            let items: Vec<(String, String)> = idx
                .into_iter()
                .map(|i| (pairs[i].id.clone(), pairs[i].instruction.clone()))
                .collect();
            let vectors = match embeddings {
                Some(path) => FileEmbeddings::load(&path)?.embed(&items)?,
                None => Embedder::embed(&HashingEmbedder { dim, seed }, &items)?,
            };
            let report = analysis::diversity(&vectors)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Analyze::Judge {
            dataset,
            config,
            backend,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(b) = backend {
                cfg.backend.kind = b;
            }
            let pairs = read_pairs(&dataset)?;
            let gateway = cfg.gateway()?;
            let template = cfg.judge_template()?;
            let plan = cfg.generation_plan()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.backend.max_in_flight)
                .build()?;
            let report = pool.install(|| pipeline::judge_report(&gateway, &template, &plan, &pairs, cfg.run_seed))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!(
                "parsed {}, excluded {}",
                report.verdicts.len(),
                report.excluded.len()
            );
        }
        Analyze::Tokens { dataset, bin_width } => {
            let pairs = read_pairs(&dataset)?;
            let stats = analysis::token_stats(
                pairs.iter().map(|p| (p.instruction.as_str(), p.response.as_str())),
                &ApproxTokenCounter,
                bin_width,
            )?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Analyze::Budget(args) => return budget(&args),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LedgerFile {
    Manifest { ledger: CostLedger },
    Ledger(CostLedger),
}

fn budget(args: &BudgetArgs) -> Result<ExitCode> {
    let mut prices = Prices::GPT_4O_MINI_BATCH;
    if let Some(p) = args.input_price {
        prices.input = Price::from_dollars_per_million(p)?;
    }
    if let Some(p) = args.output_price {
        prices.output = Price::from_dollars_per_million(p)?;
    }
    let report = match (&args.plan, &args.ledger) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let ledger = match serde_json::from_str(&text)? {
                LedgerFile::Manifest { ledger } | LedgerFile::Ledger(ledger) => ledger,
            };
            BudgetReport::from_ledger(&ledger, prices)
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let plan: Vec<PlanRow> = serde_json::from_str(&text)?;
            BudgetReport::from_plan(&plan, prices)
        }
        (None, None) => BudgetReport::from_plan(&reference_plan(), prices),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(path: &Path, config: Option<&Path>, json: bool) -> Result<ExitCode> {
    let params = match config {
        Some(p) => RunConfig::load(p)?.dedup.params()?,
        None => DedupParams::default(),
    };
    let report = dataset::validate(path, &params)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for v in &report.violations {
            println!("line {}: {}{}", v.line, v.id.as_deref().map(|i| format!("[{i}] ")).unwrap_or_default(), v.message);
        }
        println!("{} pairs, {} violations", report.pairs, report.violations.len());
    }
    Ok(if report.ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
