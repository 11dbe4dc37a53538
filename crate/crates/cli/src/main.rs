//! `trajkd`: generate benchmarks, ingest data, replay recorded pipelines,
//! evaluate and compare knowledge databases, and run the service.

// Shadow the std printing macros so a closed pipe (`trajkd ... | head`) ends
// the process quietly instead of panicking.
macro_rules! print {
    ($($t:tt)*) => { crate::emit(format_args!($($t)*), false) };
}
macro_rules! println {
    () => { crate::emit(format_args!(""), true) };
    ($($t:tt)*) => { crate::emit(format_args!($($t)*), true) };
}

mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use trajkd_core::benchmark::{describe, generate, BenchmarkConfig};
use trajkd_core::evaluation::{compare_kdbs, group_stats, CompareLevel};
use trajkd_core::features::{FeatureKind, FeatureSpec};
use trajkd_core::kdb::KnowledgeDatabase;
use trajkd_core::pipeline::{
    example_labels_from_truth, example_pipeline, replay, ManualPolicy, PipelineRecord, ReplayOptions, StepOverride,
    StepStatus,
};
use trajkd_core::trajectory::{ingest_csv, write_csv, IngestOptions, ObjectDatabase};
use trajkd_service::ServiceConfig;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "trajkd", version, about = "Knowledge discovery over 3-D trajectory databases")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    ById,
    Pending,
}

impl From<PolicyArg> for ManualPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::ById => ManualPolicy::ById,
            PolicyArg::Pending => ManualPolicy::Pending,
        }
    }
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// Trajectory table (object_id,frame,x,y,z).
    #[arg(long)]
    data: PathBuf,
    /// Dataset id; derived from the content when omitted.
    #[arg(long)]
    db_id: Option<String>,
    /// Accept trajectories that do not span the full frame range.
    #[arg(long)]
    allow_incomplete: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark database with ground truth.
    Generate {
        /// Benchmark configuration (JSON); the default scenario when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides every group's noise sigma.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Validate a trajectory table and report what would be loaded.
    Ingest {
        csv: PathBuf,
        #[arg(long)]
        db_id: Option<String>,
        #[arg(long)]
        allow_incomplete: bool,
        /// Write the table back in canonical form.
        #[arg(long)]
        canonical: Option<PathBuf>,
    },
    /// Replay a recorded pipeline on a database.
    Replay {
        #[arg(long)]
        pipeline: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// `step=path:value`, e.g. `s1=filter.value:5`; repeatable.
        #[arg(long = "override")]
        overrides: Vec<String>,
        #[arg(long, value_enum, default_value = "by-id")]
        manual_policy: PolicyArg,
        /// Fail (exit 4) if any step is skipped.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-group statistics of a scalar feature.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Knowledge database CSV.
        #[arg(long)]
        kdb: PathBuf,
        /// Feature name (e.g. `mean_curvilinear_speed`) or a JSON feature spec.
        #[arg(long)]
        feature: String,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Also write the per-group table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two knowledge databases.
    Compare {
        kdb_a: PathBuf,
        kdb_b: PathBuf,
        /// Compare group paths truncated to this many segments.
        #[arg(long)]
        depth: Option<usize>,
        /// Write the contingency table as CSV.
        #[arg(long)]
        contingency: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML configuration; environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the bundled four-step example pipeline.
    ExportExamplePipeline {
        /// Ground-truth CSV whose `deep` groups drive the manual labelling step.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Source dataset id recorded in the pipeline.
        #[arg(long, default_value = "example")]
        db_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(args: std::fmt::Arguments<'_>, newline: bool) {
    let mut out = std::io::stdout().lock();
    let written = out.write_fmt(args).and_then(|()| if newline { out.write_all(b"\n") } else { Ok(()) });
    if let Err(e) = written {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing to stdout: {e}");
        std::process::exit(1);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                println!("{}", json!({ "schema_version": 1, "code": e.code(), "message": e.to_string() }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let json = cli.json;
    match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            noise,
        } => cmd_generate(json, config.as_deref(), &out, seed, noise),
        Command::Ingest {
            csv,
            db_id,
            allow_incomplete,
            canonical,
        } => cmd_ingest(json, &csv, db_id, allow_incomplete, canonical.as_deref()),
        Command::Replay {
            pipeline,
            data,
            overrides,
            manual_policy,
            strict,
            out,
        } => cmd_replay(json, &pipeline, &data, &overrides, manual_policy.into(), strict, &out),
        Command::Stats {
            data,
            kdb,
            feature,
            bins,
            out,
        } => cmd_stats(json, &data, &kdb, &feature, bins, out.as_deref()),
        Command::Compare {
            kdb_a,
            kdb_b,
            depth,
            contingency,
        } => cmd_compare(json, &kdb_a, &kdb_b, depth, contingency.as_deref()),
        Command::Serve { config } => cmd_serve(config.as_deref()),
        Command::ExportExamplePipeline { truth, db_id, out } => cmd_export_example(truth.as_deref(), &db_id, out.as_deref()),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?);
    Ok(())
}

fn load_db(args: &DataArgs) -> Result<ObjectDatabase, CliError> {
    let report = ingest_csv(
        &read(&args.data)?,
        &IngestOptions {
            db_id: args.db_id.clone(),
            allow_incomplete: args.allow_incomplete,
            ..IngestOptions::default()
        },
    )
    .map_err(|e| CliError::Input(format!("{}: {e}", args.data.display())))?;
    for row in &report.rejected_rows {
        eprintln!("warning: {}:{}: {}", args.data.display(), row.line, row.message);
    }
    Ok(report.database)
}

fn load_kdb(path: &Path, db_id: &str) -> Result<KnowledgeDatabase, CliError> {
    KnowledgeDatabase::read_csv(read(path)?.as_slice(), db_id).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cmd_generate(json: bool, config: Option<&Path>, out: &Path, seed: Option<u64>, noise: Option<f64>) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => serde_json::from_slice::<BenchmarkConfig>(&read(p)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = noise {
        cfg = cfg.with_noise(n);
    }
    let bench = generate(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;
    let objects = out.join("objects.csv");
    let truth = out.join("truth.csv");
    let config_out = out.join("config.json");
    fs::create_dir_all(out)?;
    let mut table = Vec::new();
    write_csv(&bench.db, &mut table).map_err(|e| CliError::Output(e.to_string()))?;
    write(&objects, &table)?;
    write(&truth, &bench.truth.to_csv_bytes())?;
    write(&config_out, serde_json::to_string_pretty(&cfg).expect("config serializes").as_bytes())?;
    if json {
        print_json(&json!({
            "schema_version": 1,
            "db_id": bench.db.db_id(),
            "objects": bench.db.len(),
            "frames": cfg.n_frames,
            "seed": cfg.seed,
            "bytes": table.len(),
            "files": { "objects": objects, "truth": truth, "config": config_out },
            "populations": bench.populations,
        }))
    } else {
        print!("{}", describe(&cfg));
        println!(
            "wrote {} objects × {} frames ({:.1} MB) to {}",
            bench.db.len(),
            cfg.n_frames,
            table.len() as f64 / 1e6,
            objects.display()
        );
        println!("ground truth: {}", truth.display());
        Ok(())
    }
}

fn cmd_ingest(json: bool, csv: &Path, db_id: Option<String>, allow_incomplete: bool, canonical: Option<&Path>) -> Result<(), CliError> {
    let report = ingest_csv(
        &read(csv)?,
        &IngestOptions {
            db_id,
            allow_incomplete,
            ..IngestOptions::default()
        },
    )
    .map_err(|e| CliError::Input(format!("{}: {e}", csv.display())))?;
    let db = &report.database;
    if let Some(path) = canonical {
        let mut bytes = Vec::new();
        write_csv(db, &mut bytes).map_err(|e| CliError::Output(e.to_string()))?;
        write(path, &bytes)?;
    }
    let (lo, hi) = db.frame_range();
    if json {
        return print_json(&json!({
            "schema_version": 1,
            "db_id": db.db_id(),
            "objects": db.len(),
            "frame_min": lo,
            "frame_max": hi,
            "rejected_rows": report.rejected_rows,
            "excluded": report.excluded,
        }));
    }
    println!("dataset   {}", db.db_id());
    println!("objects   {}", db.len());
    println!("frames    {lo}..={hi}");
    println!("rejected  {} rows", report.rejected_rows.len());
    for row in &report.rejected_rows {
        println!("  line {}: {}", row.line, row.message);
    }
    for ex in &report.excluded {
        println!("  excluded {} ({} samples)", ex.object_id, ex.samples);
    }
    Ok(())
}

fn cmd_replay(
    json: bool,
    pipeline: &Path,
    data: &DataArgs,
    overrides: &[String],
    manual_policy: ManualPolicy,
    strict: bool,
    out: &Path,
) -> Result<(), CliError> {
    let text = String::from_utf8(read(pipeline)?).map_err(|e| CliError::Input(format!("{}: {e}", pipeline.display())))?;
    let record = PipelineRecord::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", pipeline.display())))?;
    let overrides = overrides
        .iter()
        .map(|o| StepOverride::parse(o))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let db = load_db(data)?;
    let output = replay(&record, &db, &ReplayOptions { overrides, manual_policy }).map_err(|e| CliError::Validation(e.to_string()))?;

    let skipped: Vec<_> = output.report.skipped().collect();
    if strict && !skipped.is_empty() {
        let s = skipped[0];
        return Err(CliError::StrictReplay(format!(
            "{} step(s) skipped; first: {} ({})",
            skipped.len(),
            s.step_id,
            s.reason.as_deref().unwrap_or("no reason")
        )));
    }

    let report_json = serde_json::to_string_pretty(&output.report).expect("report serializes");
    write(&out.join("kdb.csv"), &output.kdb.to_csv_bytes())?;
    write(&out.join("kdb.json"), output.kdb.to_json().expect("kdb serializes").as_bytes())?;
    write(&out.join("report.json"), report_json.as_bytes())?;
    write(&out.join("pipeline.json"), output.record.to_json().as_bytes())?;

    if json {
        return print_json(&json!({
            "schema_version": 1,
            "report": output.report,
            "leaf_groups": output.kdb.leaf_groups().into_iter().map(|(g, m)| (g, m.len())).collect::<std::collections::BTreeMap<_, _>>(),
            "excluded": output.kdb.excluded.len(),
            "unassigned": output.kdb.unassigned.len(),
        }));
    }
    println!("{:<6} {:<16} {:<8} {:>6}  outputs", "step", "op", "status", "input");
    for s in &output.report.steps {
        let status = match s.status {
            StepStatus::Applied => "applied",
            StepStatus::Skipped => "skipped",
            StepStatus::Pending => "pending",
        };
        let outs: Vec<String> = s.outputs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<6} {:<16} {:<8} {:>6}  {}", s.step_id, s.op, status, s.input_size, outs.join(" "));
        if let Some(r) = &s.reason {
            println!("       reason: {r}");
        }
    }
    println!();
    for (group, members) in output.kdb.leaf_groups() {
        println!("{group:<32} {:>6}", members.len());
    }
    println!("{:<32} {:>6}", "(excluded)", output.kdb.excluded.len());
    println!("{:<32} {:>6}", "(unassigned)", output.kdb.unassigned.len());
    println!("pipeline hash {}", output.report.pipeline_hash);
    println!("wrote {}", out.display());
    Ok(())
}

/// Accepts a bare feature name, a JSON feature kind or a full JSON feature spec.
fn parse_feature(text: &str) -> Result<FeatureSpec, CliError> {
    let bad = |e: serde_json::Error| CliError::Input(format!("invalid feature {text:?}: {e}"));
    let trimmed = text.trim();
    if !trimmed.starts_with('{') {
        let kind: FeatureKind = serde_json::from_value(json!({ "kind": trimmed })).map_err(bad)?;
        return Ok(FeatureSpec::raw(kind));
    }
    let value: serde_json::Value = serde_json::from_str(trimmed).map_err(bad)?;
    if value.get("feature").is_some() {
        serde_json::from_value(value).map_err(bad)
    } else {
        Ok(FeatureSpec::raw(serde_json::from_value(value).map_err(bad)?))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn cmd_stats(json: bool, data: &DataArgs, kdb: &Path, feature: &str, bins: usize, out: Option<&Path>) -> Result<(), CliError> {
    let spec = parse_feature(feature)?;
    let db = load_db(data)?;
    let kdb = load_kdb(kdb, db.db_id())?;
    let stats = group_stats(&db, &kdb, &spec, bins).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(path) = out {
        let mut bytes = Vec::new();
        stats.write_csv(&mut bytes).map_err(|e| CliError::Output(e.to_string()))?;
        write(path, &bytes)?;
    }
    if json {
        return print_json(&json!({ "schema_version": 1, "stats": stats }));
    }
    println!("feature {} ({} objects evaluated, {} skipped)", stats.feature, stats.evaluated, stats.skipped.len());
    println!(
        "{:<32} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "group", "count", "mean", "std", "min", "max", "median"
    );
    for g in &stats.groups {
        println!(
            "{:<32} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
            g.group,
            g.count,
            fmt_opt(g.mean),
            fmt_opt(g.std),
            fmt_opt(g.min),
            fmt_opt(g.max),
            fmt_opt(g.median)
        );
    }
    Ok(())
}

fn cmd_compare(json: bool, a: &Path, b: &Path, depth: Option<usize>, contingency: Option<&Path>) -> Result<(), CliError> {
    let ka = load_kdb(a, "a")?;
    let kb = load_kdb(b, "b")?;
    let level = depth.map_or(CompareLevel::Leaf, CompareLevel::Depth);
    let cmp = compare_kdbs(&ka, &kb, level).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(path) = contingency {
        let mut bytes = Vec::new();
        cmp.write_contingency_csv(&mut bytes).map_err(|e| CliError::Output(e.to_string()))?;
        write(path, &bytes)?;
    }
    if json {
        return print_json(&json!({ "schema_version": 1, "comparison": cmp }));
    }
    println!("objects compared     {}", cmp.objects);
    if cmp.only_in_a + cmp.only_in_b > 0 {
        println!("only in a / only in b {} / {}", cmp.only_in_a, cmp.only_in_b);
    }
    println!("pairwise agreement   {:.6}", cmp.agreement);
    println!("adjusted rand index  {:.6}", cmp.adjusted_rand_index);
    println!();
    println!("{:<32} {:>6}  {:<32} {:>7} {:>7}", "group (a)", "size", "best match (b)", "recall", "delta");
    for m in &cmp.matches_a {
        println!("{:<32} {:>6}  {:<32} {:>7.3} {:>+7}", m.group, m.size, m.best_match, m.recall, m.size_delta);
    }
    Ok(())
}

fn cmd_serve(config: Option<&Path>) -> Result<(), CliError> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cfg = ServiceConfig::load(config).map_err(|e| CliError::Input(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(trajkd_service::serve(cfg))
        .map_err(|e| CliError::Service(e.to_string()))
}

fn cmd_export_example(truth: Option<&Path>, db_id: &str, out: Option<&Path>) -> Result<(), CliError> {
    let labels = match truth {
        Some(p) => example_labels_from_truth(&load_kdb(p, db_id)?),
        None => Default::default(),
    };
    let text = example_pipeline(db_id, labels).to_json();
    match out {
        Some(p) => write(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
