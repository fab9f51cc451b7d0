use std::collections::BTreeSet;
use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gaa_core::annotation::DEFAULT_BONUS;
use gaa_core::corpus::{filter_passages, ExclusionIndex, FilterParams, PassageStore};
use gaa_core::events::{read_log, Projection};
use gaa_core::metrics::{compute_report, export_dataset, render_table, MetricsReport};
use gaa_core::setting::{setting_matrix, ExperimentSetting};
use gaa_core::sim::{run_experiment, synthetic_corpus, AnnotatorProfile, SimConfig};
use gaa_core::validation::{flagged_workers, QualityPolicy, QualityRule};
use gaa_service::{MockBackend, ServiceConfig};

#[derive(Parser)]
#[command(name = "gaa", version, about = "Annotation platform with generative annotation assistants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        /// JSON config file; GAA_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fill the prompt caches from the configured generators.
    Prewarm {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the simulated study over the setting matrix.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        examples: usize,
        #[arg(long, default_value_t = 40)]
        passages: usize,
        /// JSON annotator profile, or a list of profiles used round-robin.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Restrict to these setting labels.
        #[arg(long = "setting")]
        settings: Vec<String>,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
        /// Run settings in parallel. Output is identical.
        #[arg(long)]
        concurrent: bool,
    },
    /// Recompute metrics from an event log.
    Metrics {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        quality_threshold: f64,
        #[arg(long, value_parser = parse_rule, default_value = "incorrect_above")]
        quality_rule: QualityRule,
        /// Also show the median time per validated model-fooling example.
        #[arg(long)]
        median: bool,
        #[arg(long)]
        json: bool,
        /// Bonus amount the log was written with.
        #[arg(long, default_value_t = DEFAULT_BONUS)]
        bonus: f64,
    },
    /// Export one setting's valid examples as SQuAD v1.1 JSON.
    Export {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        setting: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-example metadata here.
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        quality_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_BONUS)]
        bonus: f64,
    },
    /// Keep passages of acceptable length and task usage that share no
    /// n-gram with the exclusion texts.
    FilterCorpus {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Text files, one document per line (plain or JSON with "text").
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        ngram: usize,
        #[arg(long, default_value_t = 100)]
        min_tokens: usize,
        #[arg(long, default_value_t = 600)]
        max_tokens: usize,
        #[arg(long, default_value_t = 5)]
        min_tasks: usize,
    },
    /// Serve the mock generator, QA model and candidate extractor.
    MockBackend {
        #[arg(long, default_value = "127.0.0.1:9000")]
        bind: SocketAddr,
        #[arg(long, default_value = "squad")]
        generator_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.97)]
        qa_skill: f64,
    },
}

fn parse_rule(s: &str) -> Result<QualityRule, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(config.as_deref())?;
            gaa_service::serve(&cfg)?;
        }
        Command::Prewarm { config } => {
            let cfg = ServiceConfig::load(config.as_deref())?;
            let reports = gaa_service::prewarm_to_disk(&cfg)?;
            for (gaa, r) in reports {
                println!(
                    "{}: {} candidates, {} prompts cached, {} unscored, {} failures",
                    gaa.as_str(),
                    r.candidates,
                    r.cached,
                    r.unscored,
                    r.failures.len()
                );
            }
        }
        Command::Simulate { seed, examples, passages, profile, settings, out, concurrent } => {
            let mut cfg = SimConfig { seed, examples_per_setting: examples, passages, concurrent, ..Default::default() };
            if let Some(path) = profile {
                cfg.profiles = read_profiles(&path)?;
            }
            if !settings.is_empty() {
                cfg.settings = settings.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
            }
            simulate(&cfg, &out)?;
        }
        Command::Metrics { events, quality_threshold, quality_rule, median, json, bonus } => {
            let policy = QualityPolicy { threshold: quality_threshold, rule: quality_rule };
            let reports = reports_from_log(&events, policy, bonus)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print!("{}", render_table(&reports, median));
            }
        }
        Command::Export { events, corpus, setting, out, metadata, quality_threshold, bonus } => {
            let setting: ExperimentSetting = setting.parse()?;
            let corpus = read_corpus(&corpus)?;
            let log = read_log(&events)?;
            let proj = Projection::replay(bonus, &log)?;
            let policy = QualityPolicy { threshold: quality_threshold, ..Default::default() };
            let flagged = flagged_workers(proj.tasks.values(), &policy);
            let (doc, meta) = export_dataset(proj.records(), &setting, &corpus, &flagged)?;
            fs::write(&out, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = metadata {
                fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
            }
            println!("{} examples exported to {}", meta.examples.len(), out.display());
        }
        Command::FilterCorpus { input, out, exclude, ngram, min_tokens, max_tokens, min_tasks } => {
            let store = read_corpus(&input)?;
            let mut texts = Vec::new();
            for path in &exclude {
                texts.extend(read_texts(path)?);
            }
            let index = ExclusionIndex::build(&texts, ngram)?;
            let (kept, report) = filter_passages(&store, FilterParams { min_tokens, max_tokens, min_tasks }, &index);
            fs::write(&out, kept.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::MockBackend { bind, generator_id, seed, qa_skill } => {
            if !(0.0..=1.0).contains(&qa_skill) {
                bail!("qa skill must lie in [0, 1]");
            }
            gaa_service::serve_mock(bind, MockBackend::new(&generator_id, seed, qa_skill))?;
        }
    }
    Ok(())
}

fn read_profiles(path: &Path) -> Result<Vec<AnnotatorProfile>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    Ok(if value.is_array() { serde_json::from_value(value)? } else { vec![serde_json::from_value(value)?] })
}

fn read_corpus(path: &Path) -> Result<PassageStore> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut store = PassageStore::new();
    store.ingest(BufReader::new(file))?;
    Ok(store)
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str::<serde_json::Value>(l) {
            Ok(serde_json::Value::Object(o)) => o.get("text").and_then(|t| t.as_str()).unwrap_or(l).to_owned(),
            _ => l.to_owned(),
        })
        .collect())
}

fn simulate(cfg: &SimConfig, out: &Path) -> Result<()> {
    let result = run_experiment(cfg)?;
    for f in &result.failures {
        eprintln!("setting {} failed: {}", f.setting, f.message);
    }
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir).with_context(|| format!("creating {}", reports_dir.display()))?;
    fs::write(out.join("events.jsonl"), result.events_jsonl())?;
    // the corpus the log refers to, so `export` can run on the output
    fs::write(out.join("passages.jsonl"), synthetic_corpus(cfg.seed, cfg.passages).to_jsonl())?;
    for r in &result.reports {
        fs::write(reports_dir.join(format!("{}.json", r.setting.label())), serde_json::to_string_pretty(r)?)?;
    }
    let metrics = serde_json::json!({
        "config": cfg,
        "reports": result.reports,
        "generations": result.generations,
        "failures": result.failures.iter().map(|f| (f.setting.label(), f.message.clone())).collect::<Vec<_>>(),
    });
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    fs::write(out.join("table.txt"), result.table())?;
    print!("{}", result.table());
    Ok(())
}

/// Reports for every setting that appears in the log, in matrix order.
fn reports_from_log(path: &Path, policy: QualityPolicy, bonus: f64) -> Result<Vec<MetricsReport>> {
    let log = read_log(path)?;
    let proj = Projection::replay(bonus, &log)?;
    let flagged = flagged_workers(proj.tasks.values(), &policy);
    let present: BTreeSet<ExperimentSetting> = proj.records().map(|r| r.setting).collect();
    let mut order: Vec<ExperimentSetting> = setting_matrix().into_iter().filter(|s| present.contains(s)).collect();
    order.extend(present.iter().filter(|s| !order.contains(s)).copied().collect::<Vec<_>>());
    Ok(order.iter().map(|s| compute_report(proj.records(), s, &flagged)).collect())
}
