//! `hcvp`: dataset generation, training, evaluation, ablation, sweeps and
//! gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 I/O or malformed file, 2 usage or invalid
//! configuration, 3 numeric failure (non-finite loss, failed gradient
//! check, leaked test data). Standard output carries only tables and JSON
//! records; progress goes to standard error.

mod manifest;
mod overrides;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hcvp::checkpoint::Checkpoint;
use hcvp::eval::{self, EmbeddingKind};
use hcvp::gradcheck::{full_loss_check, primitive_cases, GradcheckOptions, GradcheckReport};
use hcvp::metrics::{MetricRecord, MetricsLog};
use hcvp::model::Method;
use hcvp::synth::{self, Dataset, SynthConfig};
use hcvp::trainer::{self, RunOutcome, SweepAxis, TrainConfig, Trainer};
use hcvp::{Error, Exec};
use serde_json::{json, Value};

use manifest::{prepare, Refusal, RunManifest};

#[derive(Parser)]
#[command(name = "hcvp", version, about = "Hierarchical contrastive visual prompts on synthetic domain-shift data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    Gen(GenArgs),
    /// Train one model and write its checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Score a checkpoint: unseen accuracy, domain distance, prompt purity.
    Eval(EvalArgs),
    /// Train the four loss variants for every seed and held-out domain.
    Ablate(AblateArgs),
    /// Shortened runs over the loss-weight grid.
    Sweep(SweepArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 25)]
    per_cell: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corner-patch/label agreement in the source domains; the last domain
    /// gets one minus this.
    #[arg(long)]
    spurious: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Where the training data comes from: an exported directory, or a dataset
/// generated in memory.
#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Directory written by `hcvp gen`.
    #[arg(long, conflicts_with_all = ["per_cell", "data_seed", "spurious"])]
    data: Option<PathBuf>,
    #[arg(long)]
    per_cell: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    spurious: Option<String>,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lambda_pcl: Option<f64>,
    #[arg(long)]
    lambda_cci: Option<f64>,
    #[arg(long)]
    no_pcl: bool,
    #[arg(long)]
    no_cci: bool,
    /// Raw dot products instead of cosine similarity.
    #[arg(long)]
    no_normalize_sim: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    unseen: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Export these vectors as CSV into `--out`.
    #[arg(long, value_delimiter = ',')]
    embeddings: Vec<String>,
    /// Samples to export.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    unseen: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    common: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    unseen: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    common: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Entries checked per tensor of the full model.
    #[arg(long)]
    max_entries: Option<usize>,
    /// Only the primitives, not the full model loss.
    #[arg(long)]
    primitives_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Hcvp,
    Erm,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Pcl,
    Cci,
    Both,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<Refusal> for Failure {
    fn from(r: Refusal) -> Self {
        match r {
            Refusal::NotEmpty(dir) => Failure::Usage(format!(
                "output directory {} is not empty (use --force to reuse it)",
                dir.display()
            )),
            Refusal::Io(e) => Failure::Lib(e),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 3,
            Failure::Lib(e) => match e {
                Error::Io { .. } | Error::Format { .. } => 1,
                Error::NonFinite { .. } | Error::Leakage(_) => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn parse_spurious(raw: &str) -> Outcome<f64> {
    match raw.parse::<f64>() {
        Ok(p) if (0.0..=1.0).contains(&p) => Ok(p),
        _ => Err(Failure::Usage(format!("--spurious expects a probability in [0, 1], got `{raw}`"))),
    }
}

fn cmd_gen(a: GenArgs) -> Outcome {
    let config = SynthConfig {
        classes: a.classes,
        domains: a.domains,
        per_cell: a.per_cell,
        seed: a.seed,
        spurious: a.spurious.as_deref().map(parse_spurious).transpose()?,
        ..Default::default()
    };
    config.validate()?;
    prepare(&a.out, a.force, &["dataset.json", "all.bin", "all.txt"])?;
    let mut m = RunManifest::new(
        "gen",
        json!({ "synth": config, "spurious_flag": a.spurious }),
        Some(config.clone()),
        json!(a.seed),
        &a.out,
    );
    m.write(&a.out)?;

    let data = synth::generate(&config)?;
    data.export(&a.out)?;
    m.finish(&a.out, &["dataset.json", "all.bin", "all.txt"].map(|f| a.out.join(f)))?;

    let counts = data.cell_counts();
    let mut table = format!("{:<8}", "domain");
    for c in 0..config.classes {
        table.push_str(&format!("{:>8}", format!("class{c}")));
    }
    table.push_str(&format!("{:>8}\n", "total"));
    for d in 0..config.domains {
        table.push_str(&format!("{d:<8}"));
        let mut total = 0;
        for c in 0..config.classes {
            let n = counts.get(&(c, d)).copied().unwrap_or(0);
            total += n;
            table.push_str(&format!("{n:>8}"));
        }
        table.push_str(&format!("{total:>8}\n"));
    }
    print!("{table}");
    println!("{} samples", data.samples.len());
    Ok(())
}

/// Dataset configuration without generating or reading any samples.
fn data_config(a: &DataArgs, fallback: Option<SynthConfig>) -> Outcome<SynthConfig> {
    if let Some(dir) = &a.data {
        let path = dir.join("dataset.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return Ok(serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?);
    }
    let mut c = fallback.unwrap_or_default();
    if let Some(n) = a.per_cell {
        c.per_cell = n;
    }
    if let Some(s) = a.data_seed {
        c.seed = s;
    }
    if let Some(raw) = &a.spurious {
        c.spurious = Some(parse_spurious(raw)?);
    }
    c.validate()?;
    Ok(c)
}

fn load_data(a: &DataArgs, config: &SynthConfig) -> Outcome<Dataset> {
    let started = Instant::now();
    let data = match &a.data {
        Some(dir) => Dataset::import(dir)?,
        None => synth::generate(config)?,
    };
    eprintln!("dataset: {} samples ({:.1}s)", data.samples.len(), started.elapsed().as_secs_f64());
    Ok(data)
}

fn build_config(a: &ConfigArgs, mut base: TrainConfig) -> Outcome<TrainConfig> {
    if let Some(path) = &a.config {
        base = overrides::apply(&base, &overrides::load(path)?)?;
    }
    if let Some(s) = a.steps {
        base.steps = s;
    }
    if let Some(v) = a.lambda_pcl {
        base.weights.lambda_pcl = v;
    }
    if let Some(v) = a.lambda_cci {
        base.weights.lambda_cci = v;
    }
    if a.no_pcl {
        base.ablation.use_pcl = false;
    }
    if a.no_cci {
        base.ablation.use_cci = false;
    }
    if a.no_normalize_sim {
        base.similarity.normalize = false;
    }
    Ok(base)
}

/// Checks `config` against the dataset shape before any sample exists.
fn resolve(config: &TrainConfig, data: &SynthConfig) -> Outcome<TrainConfig> {
    let shell = Dataset {
        config: data.clone(),
        samples: Vec::new(),
    };
    Ok(config.resolve(&shell)?)
}

fn print_records<'a>(records: impl IntoIterator<Item = &'a MetricRecord>) {
    for r in records {
        println!("{}", r.to_line());
    }
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut config = build_config(&a.common, TrainConfig::default())?;
    if let Some(m) = a.method {
        config.method = match m {
            MethodArg::Hcvp => Method::Hcvp,
            MethodArg::Erm => Method::Erm,
        };
    }
    if let Some(u) = a.unseen {
        config.unseen_domain = u;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let data_cfg = data_config(&a.data, None)?;
    let config = resolve(&config, &data_cfg)?;
    prepare(&a.out, a.force, &["metrics.jsonl", "checkpoint.ckpt", "best.ckpt"])?;
    let mut m = RunManifest::new(
        "train",
        serde_json::to_value(&config).expect("config serializes"),
        Some(data_cfg.clone()),
        json!(config.seed),
        &a.out,
    );
    m.write(&a.out)?;

    let data = load_data(&a.data, &data_cfg)?;
    let started = Instant::now();
    let mut trainer = Trainer::new(&config, &data)?;
    if let Some(p) = trainer.pretrain_report() {
        eprintln!(
            "extractor pretrained: {} steps, loss {:.4}, accuracy {:.3}",
            p.steps, p.final_loss, p.accuracy
        );
    }
    eprintln!("training {} for {} steps (config {})", config.method, config.steps, trainer.config_hash());
    let metrics = a.out.join("metrics.jsonl");
    let mut log = MetricsLog::append_to(&metrics)?;
    let summary = trainer.run(&data, &mut log)?;
    let last = a.out.join("checkpoint.ckpt");
    let best = a.out.join("best.ckpt");
    trainer.checkpoint().save(&last)?;
    trainer
        .best_checkpoint()
        .ok_or_else(|| Failure::Check("run finished without a validation pass".into()))?
        .save(&best)?;
    m.finish(&a.out, &[metrics, last, best])?;
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());

    print_records(&summary.records);
    let last_train = summary.records.iter().rev().find(|r| r.split == "train");
    println!("{:<22}{}", "method", summary.config.method);
    println!("{:<22}{}", "config", summary.config_hash);
    println!("{:<22}{}", "steps", summary.config.steps);
    if let Some(r) = last_train {
        println!("{:<22}{:.6}", "final train loss", r.loss.total.unwrap_or(f64::NAN));
    }
    println!(
        "{:<22}{:.4} (step {})",
        "best val accuracy", summary.best_val_accuracy, summary.best_step
    );
    Ok(())
}

fn eval_data_fallback(ckpt_path: &Path) -> Option<SynthConfig> {
    let dir = ckpt_path.parent()?;
    RunManifest::read(dir).ok()?.dataset
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let kinds = a
        .embeddings
        .iter()
        .map(|k| k.parse::<EmbeddingKind>())
        .collect::<hcvp::Result<Vec<_>>>()?;
    if !kinds.is_empty() && a.out.is_none() {
        return Err(Failure::Usage("--embeddings needs --out".into()));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data_cfg = data_config(&a.data, eval_data_fallback(&a.checkpoint))?;
    let mut m = None;
    if let Some(out) = &a.out {
        prepare(out, a.force, &["reports.jsonl", "embeddings_x_n.csv", "embeddings_domain_prompt.csv", "embeddings_task_prompt.csv"])?;
        let mf = RunManifest::new(
            "eval",
            json!({ "checkpoint": a.checkpoint, "train": ckpt.config, "embeddings": a.embeddings, "split": a.split.to_possible_value().map(|v| v.get_name().to_string()) }),
            Some(data_cfg.clone()),
            json!(ckpt.config.seed),
            out,
        );
        mf.write(out)?;
        m = Some(mf);
    }
    let data = load_data(&a.data, &data_cfg)?;
    let exec = Exec::default();
    let cfg = &ckpt.config;
    let method = cfg.method.to_string();

    let mut records = Vec::new();
    let acc = eval::unseen_accuracy(&ckpt, &data, cfg.unseen_domain, exec)?;
    let mut rec = MetricRecord::new(ckpt.step, "test", cfg.seed, &ckpt.config_hash)
        .with_extra("metric", "unseen_accuracy")
        .with_extra("unseen_domain", cfg.unseen_domain);
    rec.accuracy = Some(acc);
    rec.method = Some(method.clone());
    records.push(rec);

    let dist = eval::inter_domain_distance(&ckpt, &data, exec)?;
    records.push(dist.record(ckpt.step, &ckpt.config_hash));

    let purity = match eval::prompt_cluster_score(&ckpt, &data, exec) {
        Ok(p) => Some(p),
        Err(Error::NotApplicable(why)) => {
            eprintln!("prompt purity skipped: {why}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(p) = purity {
        let mut rec = MetricRecord::new(ckpt.step, "val", cfg.seed, &ckpt.config_hash)
            .with_extra("metric", "prompt_purity")
            .with_extra("domain_purity", p.domain_purity)
            .with_extra("task_purity", p.task_purity);
        rec.method = Some(method.clone());
        records.push(rec);
    }

    let mut files = Vec::new();
    if let Some(out) = &a.out {
        let plan = synth::make_splits(&data.samples, cfg.unseen_domain, cfg.seed)?;
        let samples = match a.split {
            SplitArg::Train => data.select(&plan.train)?,
            SplitArg::Val => data.select(&plan.val)?,
            SplitArg::Test => data.select(&plan.test)?,
            SplitArg::All => data.samples.iter().collect(),
        };
        let model = trainer::model_from_checkpoint(&ckpt)?;
        for kind in &kinds {
            let name = serde_json::to_value(kind).expect("kind serializes");
            let path = out.join(format!("embeddings_{}.csv", name.as_str().unwrap_or("x_n")));
            let rows = eval::export_embeddings(&model, &samples, *kind, &path, exec)?;
            eprintln!("wrote {rows} rows to {}", path.display());
            files.push(path);
        }
        let reports = out.join("reports.jsonl");
        let mut log = MetricsLog::append_to(&reports)?;
        for r in &records {
            log.push(r.clone())?;
        }
        files.insert(0, reports);
    }
    if let (Some(mf), Some(out)) = (m.as_mut(), &a.out) {
        mf.finish(out, &files)?;
    }

    print_records(&records);
    println!("{:<28}{}", "method", method);
    println!("{:<28}{:.4}", format!("unseen accuracy (d{})", cfg.unseen_domain), acc);
    println!("{:<28}{:.6}", "inter-domain distance", dist.mean);
    if let Some(c) = dist.class_conditional_mean {
        println!("{:<28}{:.6}", "class-conditional distance", c);
    }
    if let Some(p) = purity {
        println!("{:<28}{:.4}", "domain prompt purity", p.domain_purity);
        println!("{:<28}{:.4}", "task prompt purity", p.task_purity);
    }
    Ok(())
}

fn check_jobs(jobs: usize) -> Outcome {
    if jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    Ok(())
}

/// Writes one isolated subdirectory per finished run.
fn write_runs(out: &Path, runs: &[(String, TrainConfig, &RunOutcome)], data_cfg: &SynthConfig) -> Outcome<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (dir_name, config, run) in runs {
        let dir = out.join("runs").join(dir_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut m = RunManifest::new(
            "train",
            serde_json::to_value(config).expect("config serializes"),
            Some(data_cfg.clone()),
            json!(config.seed),
            &dir,
        );
        m.args = Vec::new();
        m.write(&dir)?;
        let metrics = dir.join("metrics.jsonl");
        let mut log = MetricsLog::append_to(&metrics)?;
        for r in &run.records {
            log.push(r.clone())?;
        }
        m.finish(&dir, std::slice::from_ref(&metrics))?;
        files.push(metrics);
    }
    Ok(files)
}

/// The record a finished run contributes to a summary stream.
fn outcome_record(run: &RunOutcome) -> Option<MetricRecord> {
    let rec = run.records.iter().rev().find(|r| r.split == "test")?;
    Some(
        rec.clone()
            .with_extra("variant", run.label.clone())
            .with_extra("unseen_domain", run.unseen_domain)
            .with_extra("best_val_accuracy", run.best_val_accuracy)
            .with_extra("lambda_pcl", run.lambda_pcl)
            .with_extra("lambda_cci", run.lambda_cci),
    )
}

fn write_summary(out: &Path, records: &[MetricRecord], table: &str) -> Outcome<Vec<PathBuf>> {
    let runs = out.join("runs.jsonl");
    let mut log = MetricsLog::append_to(&runs)?;
    for r in records {
        log.push(r.clone())?;
    }
    let table_path = out.join("table.txt");
    std::fs::write(&table_path, table).map_err(|e| Error::io(&table_path, e))?;
    Ok(vec![runs, table_path])
}

fn cmd_ablate(a: AblateArgs) -> Outcome {
    check_jobs(a.jobs)?;
    if a.seeds.is_empty() || a.unseen.is_empty() {
        return Err(Failure::Usage("--seeds and --unseen need at least one value".into()));
    }
    let mut base = build_config(&a.common, TrainConfig::default())?;
    base.method = Method::Hcvp;
    let data_cfg = data_config(&a.data, None)?;
    let mut per_run = Vec::new();
    for &d in &a.unseen {
        for &seed in &a.seeds {
            for ab in trainer::Ablation::ALL {
                let mut c = base.clone();
                c.ablation = ab;
                c.seed = seed;
                c.unseen_domain = d;
                per_run.push(resolve(&c, &data_cfg)?);
            }
        }
    }
    base.unseen_domain = a.unseen[0];
    let resolved = resolve(&base, &data_cfg)?;
    prepare(&a.out, a.force, &["runs", "runs.jsonl", "table.txt"])?;
    let mut m = RunManifest::new(
        "ablate",
        json!({ "base": resolved, "seeds": a.seeds, "unseen": a.unseen, "jobs": a.jobs }),
        Some(data_cfg.clone()),
        json!(a.seeds),
        &a.out,
    );
    m.write(&a.out)?;

    let data = load_data(&a.data, &data_cfg)?;
    let n = trainer::Ablation::ALL.len() * a.seeds.len() * a.unseen.len();
    eprintln!("ablation: {n} runs of {} steps, {} at a time", resolved.steps, a.jobs);
    let started = Instant::now();
    let table = trainer::ablate(&resolved, &data, &a.seeds, &a.unseen, a.jobs)?;
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());

    let mut runs = Vec::new();
    for run in &table.runs {
        let config = per_run
            .iter()
            .find(|c| c.seed == run.seed && c.unseen_domain == run.unseen_domain && c.ablation == run.ablation)
            .cloned()
            .expect("every run has a configuration");
        let dir = format!("{}-d{}-s{}", run.label.replace("w/o ", "no-"), run.unseen_domain, run.seed);
        runs.push((dir, config, run));
    }
    let mut files = write_runs(&a.out, &runs, &data_cfg)?;
    let records: Vec<MetricRecord> = table.runs.iter().filter_map(outcome_record).collect();
    let rendered = table.render();
    files.extend(write_summary(&a.out, &records, &rendered)?);
    m.finish(&a.out, &files)?;

    print_records(&records);
    print!("{rendered}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Outcome {
    check_jobs(a.jobs)?;
    let mut base = build_config(
        &a.common,
        TrainConfig {
            steps: trainer::SWEEP_STEPS,
            ..Default::default()
        },
    )?;
    base.method = Method::Hcvp;
    if let Some(s) = a.seed {
        base.seed = s;
    }
    if let Some(u) = a.unseen {
        base.unseen_domain = u;
    }
    let data_cfg = data_config(&a.data, None)?;
    let resolved = resolve(&base, &data_cfg)?;
    let axis = match a.axis {
        AxisArg::Pcl => SweepAxis::Pcl,
        AxisArg::Cci => SweepAxis::Cci,
        AxisArg::Both => SweepAxis::Both,
    };
    let grid = trainer::sweep_grid(axis, &resolved.weights, &trainer::PCL_GRID, &trainer::CCI_GRID);
    prepare(&a.out, a.force, &["runs", "runs.jsonl", "table.txt"])?;
    let mut m = RunManifest::new(
        "sweep",
        json!({ "base": resolved, "axis": axis, "grid": grid, "jobs": a.jobs }),
        Some(data_cfg.clone()),
        json!(resolved.seed),
        &a.out,
    );
    m.write(&a.out)?;

    let data = load_data(&a.data, &data_cfg)?;
    eprintln!("sweep: {} runs of {} steps, {} at a time", grid.len(), resolved.steps, a.jobs);
    let started = Instant::now();
    let outcomes = trainer::sweep(&resolved, &data, &grid, a.jobs)?;
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());

    let mut runs = Vec::new();
    for (run, &(p, c)) in outcomes.iter().zip(&grid) {
        let mut config = resolved.clone();
        config.weights.lambda_pcl = p;
        config.weights.lambda_cci = c;
        runs.push((format!("pcl{p}-cci{c}"), config, run));
    }
    let mut files = write_runs(&a.out, &runs, &data_cfg)?;
    let records: Vec<MetricRecord> = outcomes.iter().filter_map(outcome_record).collect();
    let mut rendered = format!("{:>12}{:>12}{:>12}{:>12}\n", "lambda_pcl", "lambda_cci", "best val", "unseen");
    for r in &outcomes {
        rendered.push_str(&format!(
            "{:>12}{:>12}{:>12.2}{:>12.2}\n",
            r.lambda_pcl,
            r.lambda_cci,
            100.0 * r.best_val_accuracy,
            100.0 * r.unseen_accuracy
        ));
    }
    files.extend(write_summary(&a.out, &records, &rendered)?);
    m.finish(&a.out, &files)?;

    print_records(&records);
    print!("{rendered}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let opts = GradcheckOptions {
        seed: a.seed,
        max_entries: a.max_entries,
        ..Default::default()
    };
    let config = json!({
        "seed": a.seed,
        "tol": a.tol,
        "step": opts.step,
        "floor": opts.floor,
        "max_entries": a.max_entries,
        "primitives_only": a.primitives_only,
    });
    let hash = {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(config.to_string().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    let mut m = None;
    if let Some(out) = &a.out {
        prepare(out, a.force, &["gradcheck.jsonl"])?;
        let mf = RunManifest::new("gradcheck", config.clone(), None, json!(a.seed), out);
        mf.write(out)?;
        m = Some(mf);
    }

    let started = Instant::now();
    let mut checks: Vec<(String, GradcheckReport)> = Vec::new();
    for case in primitive_cases() {
        let report = case.check(GradcheckOptions {
            max_entries: None,
            ..opts
        })?;
        checks.push((case.name.clone(), report));
    }
    if !a.primitives_only {
        eprintln!("checking the full model loss");
        checks.push(("full_loss".into(), full_loss_check(a.seed, opts)?));
    }
    eprintln!("gradcheck finished in {:.1}s", started.elapsed().as_secs_f64());

    let mut records = Vec::new();
    let mut rendered = format!("{:<30}{:>9}{:>9}{:>14}{:>6}\n", "check", "entries", "refined", "max rel err", "ok");
    let mut worst: (f64, &str) = (0.0, "");
    for (name, r) in &checks {
        let ok = r.passes(a.tol);
        rendered.push_str(&format!(
            "{name:<30}{:>9}{:>9}{:>14.3e}{:>6}\n",
            r.entries(),
            r.refined(),
            r.worst(),
            if ok { "yes" } else { "NO" }
        ));
        if r.worst() >= worst.0 {
            worst = (r.worst(), name);
        }
        let per_tensor: BTreeMap<&str, f64> = r.params.iter().map(|p| (p.name.as_str(), p.max_rel_error)).collect();
        records.push(
            MetricRecord::new(0, "gradcheck", a.seed, &hash)
                .with_extra("check", name.clone())
                .with_extra("entries", r.entries())
                .with_extra("refined", r.refined())
                .with_extra("max_rel_error", r.worst())
                .with_extra("passed", ok)
                .with_extra("tensors", serde_json::to_value(per_tensor).unwrap_or(Value::Null)),
        );
    }
    rendered.push_str(&format!("worst relative error {:.3e} ({})\n", worst.0, worst.1));

    if let (Some(mf), Some(out)) = (m.as_mut(), &a.out) {
        let path = out.join("gradcheck.jsonl");
        let mut log = MetricsLog::append_to(&path)?;
        for r in &records {
            log.push(r.clone())?;
        }
        mf.finish(out, &[path])?;
    }
    print_records(&records);
    print!("{rendered}");

    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, r)| !r.passes(a.tol))
        .map(|(n, _)| n.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check above {:e}: {}", a.tol, failed.join(", "))))
    }
}
