use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use calibench::client::{Client, HttpTransport, ModelEndpoint, ResponseCache, Transcript};
use calibench::dataset::{load_items, EvalConfig, EvalItem};
use calibench::error::Error;
use calibench::metrics::{accuracy, auroc, ece, reliability_curve, EceConfig};
use calibench::parsing::{
    parse_reflection_confidence, parse_single, parse_topk, AbstentionPhrases, Prediction,
};
use calibench::prompting::{plan, Strategy, TemplateLibrary};
use calibench::report::{aggregate, emit, render, EmitFormat, MetricKind};
use calibench::scoring::{judge, make_record, CalibrationRecord, ResultLine};

#[derive(Parser)]
#[command(name = "calibench", about = "Verbalized-confidence calibration harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Cot,
    Topk,
    Reflect,
    Vcap,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConfigArg {
    General,
    Embedded,
    Aligned,
}

impl From<ConfigArg> for EvalConfig {
    fn from(value: ConfigArg) -> Self {
        match value {
            ConfigArg::General => EvalConfig::General,
            ConfigArg::Embedded => EvalConfig::EmbeddedInstruction,
            ConfigArg::Aligned => EvalConfig::SemanticallyAligned,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Markdown,
}

impl From<FormatArg> for EmitFormat {
    fn from(value: FormatArg) -> Self {
        match value {
            FormatArg::Csv => EmitFormat::Csv,
            FormatArg::Json => EmitFormat::Json,
            FormatArg::Markdown => EmitFormat::Markdown,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate items against a model endpoint.
    Run {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        base_url: String,
        #[arg(long, default_value = "CALIBENCH_API_KEY")]
        api_key_env: String,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 3)]
        k: u32,
        #[arg(long, value_enum, default_value = "general")]
        config: ConfigArg,
        #[arg(long, default_value_t = 32)]
        frames: u32,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Template directory override (defaults to the bundled corpus).
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 4096)]
        max_tokens: u32,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
    /// Summarize a results file: accuracy, ECE, AUROC, bin counts.
    Score {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = true)]
        attempted_only: bool,
    },
    /// Aggregate calibration records into a grouped metric table.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated labels: category, subtask, modality, strategy,
        /// eval_config.
        #[arg(long, value_delimiter = ',', default_value = "category")]
        group_by: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "acc,ece,auroc")]
        metrics: Vec<String>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            items,
            model,
            base_url,
            api_key_env,
            strategy,
            k,
            config,
            frames,
            concurrency,
            cache_dir,
            out,
            templates,
            temperature,
            max_tokens,
            timeout_secs,
        } => run(RunArgs {
            items,
            model,
            base_url,
            api_key_env,
            strategy,
            k,
            config: config.into(),
            frames,
            concurrency,
            cache_dir,
            out,
            templates,
            temperature,
            max_tokens,
            timeout: Duration::from_secs(timeout_secs),
        }),
        Command::Score {
            results,
            bins,
            attempted_only,
        } => score(&results, bins, attempted_only),
        Command::Report {
            records,
            group_by,
            metrics,
            format,
            bins,
            out,
        } => report(&records, &group_by, &metrics, format.into(), bins, out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

struct RunArgs {
    items: PathBuf,
    model: String,
    base_url: String,
    api_key_env: String,
    strategy: StrategyArg,
    k: u32,
    config: EvalConfig,
    frames: u32,
    concurrency: usize,
    cache_dir: Option<PathBuf>,
    out: PathBuf,
    templates: Option<PathBuf>,
    temperature: f64,
    max_tokens: u32,
    timeout: Duration,
}

fn run(args: RunArgs) -> Result<ExitCode, Error> {
    let items = load_items(&args.items, args.config)?;
    let library = match &args.templates {
        Some(dir) => TemplateLibrary::load(dir)?,
        None => TemplateLibrary::bundled()?,
    };
    let strategy = match args.strategy {
        StrategyArg::Cot => Strategy::cot(),
        StrategyArg::Topk => Strategy::topk(args.k),
        StrategyArg::Reflect => Strategy::self_reflection(),
        StrategyArg::Vcap => Strategy::vcap(),
    };

    let mut endpoint = ModelEndpoint::new(&args.base_url, &args.model)?;
    endpoint.api_key_env = Some(args.api_key_env);
    endpoint.temperature = args.temperature;
    endpoint.max_tokens = args.max_tokens;
    endpoint.timeout = args.timeout;

    let mut client = Client::new(endpoint, Arc::new(HttpTransport::new()))
        .with_concurrency(args.concurrency)
        .with_frames_per_video(args.frames);
    if let Some(dir) = &args.cache_dir {
        client = client.with_cache(ResponseCache::new(dir)?);
    }

    fs::create_dir_all(args.out.join("transcripts"))?;
    let mut work = Vec::new();
    let mut failed_lines: Vec<ResultLine> = Vec::new();
    let mut planned_items: Vec<&EvalItem> = Vec::new();
    for item in &items {
        match plan(&library, strategy, item) {
            Ok(p) => {
                work.push((p, item.clone()));
                planned_items.push(item);
            }
            Err(e) => failed_lines.push(error_line(item, strategy, &format!("plan_error: {e}"))),
        }
    }

    let outcomes = client.run_many(&work);

    let mut results: Vec<ResultLine> = Vec::new();
    let mut records: Vec<CalibrationRecord> = Vec::new();
    let abstention = AbstentionPhrases::default();
    for (item, outcome) in planned_items.iter().zip(outcomes) {
        match outcome {
            Err(failure) => {
                write_transcript(&args.out, &failure.partial)?;
                results.push(error_line(item, strategy, &format!("request_error: {}", failure.error)));
            }
            Ok(transcript) => {
                write_transcript(&args.out, &transcript)?;
                let transcript_path = format!("transcripts/{}.json", item.id);
                match parse_transcript(strategy, args.k, &transcript, &abstention) {
                    Err(e) => {
                        let mut line = error_line(item, strategy, &format!("parse_error: {e}"));
                        line.transcript_path = Some(transcript_path);
                        results.push(line);
                    }
                    Ok(pred) => {
                        let verdict = judge(&pred, &item.gold);
                        let status = if pred.confidence.is_none() {
                            "missing_confidence"
                        } else {
                            "ok"
                        };
                        results.push(ResultLine {
                            item_id: item.id.clone(),
                            strategy: strategy.kind.to_string(),
                            answer: pred.answer.clone(),
                            confidence: pred.confidence,
                            correct: verdict.correct,
                            attempted: verdict.attempted,
                            status: status.to_string(),
                            transcript_path: Some(transcript_path),
                        });
                        if pred.confidence.is_some() {
                            records.push(make_record(item, &pred, verdict, strategy)?);
                        }
                    }
                }
            }
        }
    }
    results.extend(failed_lines);

    write_jsonl(&args.out.join("results.jsonl"), &results)?;
    write_jsonl(&args.out.join("records.jsonl"), &records)?;

    let errored = results.iter().filter(|r| r.status != "ok").count();
    println!(
        "evaluated {} items: {} ok, {} with errors; outputs in {}",
        results.len(),
        results.len() - errored,
        errored,
        args.out.display()
    );
    if errored > 0 {
        let mut counts = std::collections::BTreeMap::new();
        for line in results.iter().filter(|r| r.status != "ok") {
            let kind = line.status.split(':').next().unwrap_or("error").to_string();
            *counts.entry(kind).or_insert(0usize) += 1;
        }
        for (kind, count) in counts {
            println!("  {kind}: {count}");
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_transcript(
    strategy: Strategy,
    k: u32,
    transcript: &Transcript,
    abstention: &AbstentionPhrases,
) -> Result<Prediction, Error> {
    let last = transcript
        .rounds
        .last()
        .ok_or_else(|| Error::InvalidPlan("empty transcript".into()))?;
    match strategy.kind {
        calibench::prompting::StrategyKind::Cot | calibench::prompting::StrategyKind::Vcap => {
            parse_single(&last.response_text, abstention)
        }
        calibench::prompting::StrategyKind::TopK => {
            parse_topk(&last.response_text, strategy.k.unwrap_or(k))
        }
        calibench::prompting::StrategyKind::SelfReflection => {
            let first = &transcript.rounds[0];
            let mut pred = parse_single(&first.response_text, abstention)?;
            let conf = parse_reflection_confidence(&last.response_text)?;
            pred.confidence = Some(conf.value);
            pred.clamped |= conf.clamped;
            Ok(pred)
        }
    }
}

fn error_line(item: &EvalItem, strategy: Strategy, status: &str) -> ResultLine {
    ResultLine {
        item_id: item.id.clone(),
        strategy: strategy.kind.to_string(),
        answer: String::new(),
        confidence: None,
        correct: false,
        attempted: false,
        status: status.to_string(),
        transcript_path: None,
    }
}

fn write_transcript(out: &Path, transcript: &Transcript) -> Result<(), Error> {
    let path = out.join("transcripts").join(format!("{}.json", transcript.item_id));
    fs::write(path, serde_json::to_string_pretty(transcript)?)?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), Error> {
    let mut file = fs::File::create(path)?;
    for row in rows {
        writeln!(file, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

fn score(results_path: &Path, bins: usize, attempted_only: bool) -> Result<ExitCode, Error> {
    let lines: Vec<ResultLine> = read_jsonl(results_path)?;
    let missing_confidence = lines.iter().filter(|l| l.confidence.is_none()).count();
    let abstained = lines
        .iter()
        .filter(|l| !l.attempted && l.status == "ok")
        .count();
    let records: Vec<CalibrationRecord> = lines
        .iter()
        .filter_map(|l| {
            l.confidence.map(|confidence| CalibrationRecord {
                item_id: l.item_id.clone(),
                confidence,
                correct: l.correct,
                attempted: l.attempted,
                group: calibench::scoring::GroupLabels {
                    category: String::new(),
                    subtask: String::new(),
                    modality: String::new(),
                    strategy: l.strategy.clone(),
                    eval_config: String::new(),
                },
            })
        })
        .collect();

    println!("items: {}", lines.len());
    println!("missing_confidence: {missing_confidence}");
    println!("abstained: {abstained}");
    let cfg = EceConfig { bins, attempted_only };
    match accuracy(&records, attempted_only) {
        Ok(a) => println!("accuracy: {:.1}%", a * 100.0),
        Err(e) => println!("accuracy: - ({e})"),
    }
    match ece(&records, &cfg) {
        Ok(e) => println!("ece: {e:.3}"),
        Err(err) => println!("ece: - ({err})"),
    }
    match auroc(&records, attempted_only) {
        Ok(a) => println!("auroc: {a:.3}"),
        Err(e) => println!("auroc: - ({e})"),
    }
    if let Ok(curve) = reliability_curve(&records, &cfg) {
        println!("bins:");
        for bin in curve {
            match (bin.avg_conf, bin.acc) {
                (Some(conf), Some(acc)) => println!(
                    "  ({:.2}, {:.2}]  n={:<5} avg_conf={conf:.3} acc={acc:.3}",
                    bin.lower, bin.upper, bin.count
                ),
                _ => println!("  ({:.2}, {:.2}]  n=0", bin.lower, bin.upper),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report(
    records_path: &Path,
    group_by: &[String],
    metric_names: &[String],
    format: EmitFormat,
    bins: usize,
    out: Option<&Path>,
) -> Result<ExitCode, Error> {
    let records: Vec<CalibrationRecord> = read_jsonl(records_path)?;
    let metrics: Vec<MetricKind> = metric_names
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, _>>()?;
    let cfg = EceConfig { bins, attempted_only: true };
    let table = aggregate(&records, group_by, &metrics, &cfg)?;
    match out {
        Some(path) => emit(&table, format, path)?,
        None => print!("{}", render(&table, format)),
    }
    Ok(ExitCode::SUCCESS)
}
