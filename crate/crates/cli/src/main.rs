//! `faithprobe` command-line entry point.
//!
//! Output layout under `--out`:
//! `runs/{exp}_{model}.jsonl`, `runs/{exp}_{model}.manifest.json`,
//! `runs/exp4_prompts.jsonl` and `reports/report.{md,csv,json}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use faithprobe::detectors::DetectorRuleSet;
use faithprobe::domain::{prompt_fingerprint, McqItem, RunRecord};
use faithprobe::humaneval::{build_freeform_prompt, load_posts, load_ratings};
use faithprobe::ingest::{load_dataset, load_exemplars, load_runs, sample_items, DatasetFormat, RunStore};
use faithprobe::metrics::MetricsConfig;
use faithprobe::modelio::{build_backend, BackendConfig, ChatBackend, Counted};
use faithprobe::probe::{run_exp1, run_exp2, run_exp3, ProbeOptions, RunSummary, DEFAULT_HINT_TEMPLATE};
use faithprobe::report::{build_report, render_csv, render_json, render_markdown, ReportInputs};

/// Exit status when some model calls failed but the rest were stored.
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "faithprobe", version, about = "Faithfulness probes for multiple-choice medical QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Causal ablation of chain-of-thought steps.
    Exp1(RunArgs),
    /// Positional bias from few-shot exemplars.
    Exp2 {
        #[command(flatten)]
        run: RunArgs,
        /// JSONL file with exactly three exemplar items.
        #[arg(long)]
        exemplars: PathBuf,
    },
    /// Hint injection.
    Exp3 {
        #[command(flatten)]
        run: RunArgs,
        /// Hint line; `{label}` is replaced by the hinted letter.
        #[arg(long, default_value = DEFAULT_HINT_TEMPLATE)]
        hint_template: String,
    },
    /// Build free-form prompts for forum posts (no model calls).
    Exp4Prompts {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render metric tables from stored runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSONL dataset of multiple-choice items.
    #[arg(long)]
    dataset: PathBuf,
    /// TOML backend configuration.
    #[arg(long)]
    model_config: PathBuf,
    #[arg(long, default_value_t = 100)]
    sample_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Continue a run store that already holds records.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 4)]
    max_inflight: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Md => "md",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Run store files or directories holding them.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Human ratings CSV.
    #[arg(long)]
    ratings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    /// Output directory; the report goes to `reports/report.{ext}`.
    /// Without it the report is printed.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    position_rules: Option<PathBuf>,
    #[arg(long)]
    hint_rules: Option<PathBuf>,
    #[arg(long, default_value_t = MetricsConfig::default().bootstrap_resamples)]
    bootstrap_resamples: usize,
    #[arg(long, default_value_t = MetricsConfig::default().bootstrap_seed)]
    bootstrap_seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Exp1(run) => run_experiment("exp1", &run, Extra::None),
        Command::Exp2 { run, exemplars } => run_experiment("exp2", &run, Extra::Exemplars(exemplars)),
        Command::Exp3 { run, hint_template } => run_experiment("exp3", &run, Extra::Hint(hint_template)),
        Command::Exp4Prompts { dataset, out } => exp4_prompts(&dataset, &out),
        Command::Report(args) => report(&args),
    }
}

enum Extra {
    None,
    Exemplars(PathBuf),
    Hint(String),
}

fn file_stem_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn run_experiment(exp: &str, args: &RunArgs, extra: Extra) -> Result<ExitCode> {
    // Everything that can be checked offline is checked before the backend exists.
    let cfg_text = fs::read_to_string(&args.model_config)
        .with_context(|| format!("reading model config {}", args.model_config.display()))?;
    let cfg = BackendConfig::from_toml(&cfg_text)
        .with_context(|| format!("model config {}", args.model_config.display()))?;
    if args.max_inflight == 0 {
        bail!("--max-inflight must be at least 1");
    }
    let ds = load_dataset(&args.dataset, DatasetFormat::Jsonl)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    for d in &ds.diagnostics {
        eprintln!("warning: {}:{}: {}", args.dataset.display(), d.line, d.reason);
    }
    let items = sample_items(&ds.records, args.sample_size, args.seed)?;
    let exemplars = match &extra {
        Extra::Exemplars(p) => {
            let ex = load_exemplars(p).with_context(|| format!("loading exemplars {}", p.display()))?;
            ex.ensure_disjoint(&items)?;
            Some(ex)
        }
        _ => None,
    };
    let hint_template = match &extra {
        Extra::Hint(t) => {
            if !t.contains("{label}") {
                bail!("--hint-template must contain {{label}}");
            }
            t.clone()
        }
        _ => DEFAULT_HINT_TEMPLATE.to_string(),
    };

    let runs_dir = args.out.join("runs");
    let stem = format!("{exp}_{}", file_stem_safe(&cfg.model_id));
    let store_path = runs_dir.join(format!("{stem}.jsonl"));
    let manifest_path = runs_dir.join(format!("{stem}.manifest.json"));
    let manifest = json!({
        "experiment": exp,
        "model_id": cfg.model_id,
        "seed": args.seed,
        "sample_size": args.sample_size,
        "dataset": args.dataset.display().to_string(),
        "sample_ids": items.iter().map(McqItem::id).collect::<Vec<_>>(),
        "exemplar_ids": exemplars.as_ref().map(|e| e.ids().map(str::to_string).collect::<Vec<_>>()),
        "hint_template": matches!(extra, Extra::Hint(_)).then_some(hint_template.clone()),
    });

    let existing = load_runs(&store_path)?;
    if !existing.records.is_empty() {
        if !args.resume {
            bail!(
                "{} already holds {} records; pass --resume to continue it",
                store_path.display(),
                existing.records.len()
            );
        }
        check_manifest(&manifest_path, &manifest)?;
    }

    let backend = Counted::new(build_backend(&cfg)?);
    fs::create_dir_all(&runs_dir).with_context(|| format!("creating {}", runs_dir.display()))?;
    let mut stored_manifest = manifest.clone();
    stored_manifest["backend"] = Value::String(backend.describe());
    fs::write(&manifest_path, serde_json::to_string_pretty(&stored_manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    let mut store = RunStore::open(&store_path)?;
    for w in store.warnings() {
        eprintln!("warning: {}: {w}", store_path.display());
    }
    let opts = ProbeOptions {
        seed: args.seed,
        max_inflight: args.max_inflight,
        hint_template,
    };
    let summary: RunSummary = match exp {
        "exp1" => run_exp1(&items, &backend, &mut store, &opts)?.summary,
        "exp2" => run_exp2(&items, exemplars.as_ref().expect("exemplars loaded"), &backend, &mut store, &opts)?,
        "exp3" => run_exp3(&items, &backend, &mut store, &opts)?,
        other => bail!("unknown experiment {other}"),
    };

    println!("store: {}", store_path.display());
    println!(
        "model calls: {}  executed: {}  skipped: {}  failed: {}  dropped: {}",
        backend.calls(),
        summary.executed,
        summary.skipped,
        summary.failed.len(),
        summary.dropped.len()
    );
    for f in &summary.failed {
        eprintln!("failed: {} {}: {}", f.condition, f.item_id, f.error);
    }
    for d in &summary.dropped {
        eprintln!("dropped: {} {}: {}", d.condition, d.item_id, d.error);
    }

    let records: Vec<RunRecord> = store.records().to_vec();
    let position = DetectorRuleSet::position_ack();
    let hint = DetectorRuleSet::hint_ack();
    let rep = build_report(&ReportInputs {
        runs: &records,
        ratings: None,
        metrics: MetricsConfig::default(),
        position_rules: &position,
        hint_rules: &hint,
        run_files: vec![store_path.display().to_string()],
        run_manifests: vec![stored_manifest],
        warnings: store.warnings().to_vec(),
    });
    println!();
    print!("{}", render_markdown(&rep));

    Ok(if summary.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("{} calls failed; rerun with --resume to retry them", summary.failed.len());
        ExitCode::from(EXIT_PARTIAL)
    })
}

/// A resumed run must use the same sample and settings as the original.
fn check_manifest(path: &Path, expected: &Value) -> Result<()> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("resuming needs the run manifest {}", path.display()))?;
    let found: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let obj = expected.as_object().expect("manifest is an object");
    let differing: Vec<&str> = obj
        .iter()
        .filter(|(k, v)| found.get(k.as_str()) != Some(*v))
        .map(|(k, _)| k.as_str())
        .collect();
    if !differing.is_empty() {
        bail!(
            "{}: {} differ from the current invocation; refusing to mix runs",
            path.display(),
            differing.join(", ")
        );
    }
    Ok(())
}

fn exp4_prompts(dataset: &Path, out: &Path) -> Result<ExitCode> {
    let posts = load_posts(dataset).with_context(|| format!("loading posts {}", dataset.display()))?;
    let mut body = String::new();
    for p in &posts {
        let prompt = build_freeform_prompt(&p.title, &p.body).with_context(|| format!("post {}", p.id))?;
        let line = json!({
            "id": p.id,
            "prompt": prompt,
            "fingerprint": prompt_fingerprint("", &prompt),
        });
        body.push_str(&line.to_string());
        body.push('\n');
    }
    let dir = out.join("runs");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("exp4_prompts.jsonl");
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} prompts to {}", posts.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

/// Expands directories into their run stores, sorted for stable output.
fn collect_run_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "jsonl")
                        && f.file_name().is_some_and(|n| n != "exp4_prompts.jsonl")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!("run path {} does not exist", p.display());
        }
    }
    if files.is_empty() {
        bail!("no run stores found");
    }
    Ok(files)
}

fn load_rules(path: &Option<PathBuf>, default: DetectorRuleSet) -> Result<DetectorRuleSet> {
    match path {
        Some(p) => DetectorRuleSet::from_file(p).with_context(|| format!("loading rules {}", p.display())),
        None => Ok(default),
    }
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let files = collect_run_files(&args.runs)?;
    let mut runs = Vec::new();
    let mut manifests = Vec::new();
    let mut warnings = Vec::new();
    for f in &files {
        let loaded = load_runs(f)?;
        warnings.extend(loaded.warnings.into_iter().map(|w| format!("{}: {w}", f.display())));
        runs.extend(loaded.records);
        let manifest = f.with_extension("manifest.json");
        if manifest.is_file() {
            let text = fs::read_to_string(&manifest)?;
            manifests.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?);
        }
    }
    let ratings = match &args.ratings {
        Some(p) => Some(load_ratings(p).with_context(|| format!("loading ratings {}", p.display()))?),
        None => None,
    };
    if let Some(r) = &ratings {
        for rej in &r.rejections {
            warnings.push(format!("ratings line {}: {}", rej.line, rej.reason));
        }
    }
    let position = load_rules(&args.position_rules, DetectorRuleSet::position_ack())?;
    let hint = load_rules(&args.hint_rules, DetectorRuleSet::hint_ack())?;
    let rep = build_report(&ReportInputs {
        runs: &runs,
        ratings: ratings.as_ref(),
        metrics: MetricsConfig {
            bootstrap_resamples: args.bootstrap_resamples,
            bootstrap_seed: args.bootstrap_seed,
        },
        position_rules: &position,
        hint_rules: &hint,
        run_files: files.iter().map(|f| f.display().to_string()).collect(),
        run_manifests: manifests,
        warnings,
    });
    let text = match args.format {
        Format::Md => render_markdown(&rep),
        Format::Csv => render_csv(&rep),
        Format::Json => render_json(&rep),
    };
    match &args.out {
        Some(dir) => {
            let dir = dir.join("reports");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(format!("report.{}", args.format.ext()));
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
