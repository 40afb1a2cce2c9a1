use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ktl_core::data::{
    compute_stats, corr_transform, generate_synthetic, load_dataset, load_prepared, split_dataset, write_prepared, CorrelationMode,
    DatasetKind, IngestReport, SyntheticConfig,
};
use ktl_core::evaluation::{evaluate, leakage_probe, write_trace_jsonl, EvalMethod, Verdict};
use ktl_core::harness::{build_windows, comparison_rows, load_run_records, render_bar_chart_svg, render_table, run_experiment_file, TableFormat};
use ktl_core::models::Checkpoint;
use ktl_core::{Error, Model, Result, Scalar};

/// Environment variable naming the directory that relative data paths resolve against.
const DATA_ROOT_ENV: &str = "KTL_DATA_ROOT";

#[derive(Parser)]
#[command(name = "ktl", version, about = "Leakage-free knowledge tracing benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw export into a canonical dataset directory.
    Prepare {
        /// Input format: assistments2009 or canonical.
        #[arg(long)]
        dataset: DatasetKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the duplicated-KC variant.
        #[arg(long)]
        corr_transform: bool,
        /// Directory for the duplicated-KC variant [default: <output>-corr].
        #[arg(long, requires = "corr_transform")]
        corr_output: Option<PathBuf>,
    },
    /// Print dataset statistics as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a student-level test split and cross-validation folds.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// [default: <data>/split.json]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run an experiment file: split, cross-validate each model, compare.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// [default: <config stem>-results next to the config]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a checkpoint on a prepared dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// one-by-one, all-in-one or aggregated-one-by-one.
        #[arg(long)]
        method: EvalMethod,
        /// Restrict to the test students of this split file.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Write the prediction trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Probe a checkpoint for leakage between KCs of the same question.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarise run records into a comparison table and a bar plot.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// csv, json or markdown.
        #[arg(long, default_value = "markdown")]
        format: TableFormat,
        /// [default: <runs>/test_auc.svg]
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        students: usize,
        #[arg(long, default_value_t = 50)]
        questions: usize,
        #[arg(long, default_value_t = 10)]
        kcs: usize,
        #[arg(long, default_value_t = 1)]
        kcs_per_question: usize,
        #[arg(long, default_value_t = 30)]
        interactions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        duplicated: bool,
    },
}

/// Relative input paths resolve against the data root when it is set.
fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn prepare(kind: DatasetKind, input: &Path, output: &Path, corr: bool, corr_output: Option<PathBuf>) -> Result<()> {
    let (data, report) = load_dataset(data_path(input), kind)?;
    write_prepared(output, &data, &report)?;
    let stats = compute_stats(&data.logs, &data.mapping)?;
    println!("wrote {} ({} rows read, {} dropped without KC)", output.display(), report.rows_read, report.rows_dropped_missing_kc);
    print!("{}", to_json(&stats.to_json())?);
    if corr {
        let target = corr_output.unwrap_or_else(|| {
            let mut name = output.file_name().unwrap_or_default().to_os_string();
            name.push("-corr");
            output.with_file_name(name)
        });
        let doubled = corr_transform(&data)?;
        write_prepared(&target, &doubled, &report)?;
        println!("wrote {}", target.display());
        print!("{}", to_json(&compute_stats(&doubled.logs, &doubled.mapping)?.to_json())?);
    }
    Ok(())
}

fn evaluate_checkpoint<T: Scalar + serde::Serialize>(
    ckpt: &Checkpoint,
    data: &Path,
    method: EvalMethod,
    split: Option<&Path>,
    trace_path: Option<&Path>,
) -> Result<()> {
    let model: Model<T> = ckpt.to_model()?;
    let (dataset, _) = load_prepared(&data_path(data))?;
    check_ids(ckpt, &dataset.ids)?;
    let logs = match split {
        Some(p) => dataset.logs_for(&ktl_core::data::SplitPlan::load(&data_path(p))?.test_students),
        None => dataset.logs.clone(),
    };
    let plan = build_windows(&logs, &dataset, model.kind(), ckpt.window_questions)?;
    let (trace, report) = evaluate(&model, &plan, method)?;
    if method == EvalMethod::AllInOne && model.kind().is_leak_free() {
        eprintln!("note: {} is leak free, so aggregated one-by-one gives the same scores in one pass per window", model.kind());
    }
    if let Some(p) = trace_path {
        let mut buf = Vec::new();
        write_trace_jsonl(&trace, &mut buf)?;
        write_file(p, &String::from_utf8_lossy(&buf))?;
    }
    print!("{}", to_json(&report)?);
    Ok(())
}

fn audit_checkpoint<T: Scalar>(ckpt: &Checkpoint, data: &Path, samples: usize, seed: u64) -> Result<()> {
    let model: Model<T> = ckpt.to_model()?;
    let (dataset, _) = load_prepared(&data_path(data))?;
    check_ids(ckpt, &dataset.ids)?;
    let plan = build_windows(&dataset.logs, &dataset, model.kind(), ckpt.window_questions)?;
    let report = leakage_probe(&model, &plan.windows, samples, seed)?;
    print!("{}", to_json(&report)?);
    let verdict = match report.verdict {
        Verdict::LeakFree => "leak_free",
        Verdict::Leaking => "leaking",
    };
    println!("verdict: {verdict}");
    Ok(())
}

fn check_ids(ckpt: &Checkpoint, ids: &ktl_core::data::IdMaps) -> Result<()> {
    if ckpt.ids.questions != ids.questions || ckpt.ids.kcs != ids.kcs {
        return Err(Error::Validation("dataset question or KC ids differ from the checkpoint's".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { dataset, input, output, corr_transform, corr_output } => {
            prepare(dataset, &input, &output, corr_transform, corr_output)
        }
        Command::Stats { data } => {
            let (dataset, _) = load_prepared(&data_path(&data))?;
            print!("{}", to_json(&compute_stats(&dataset.logs, &dataset.mapping)?.to_json())?);
            Ok(())
        }
        Command::Split { data, test_fraction, folds, seed, output } => {
            let dir = data_path(&data);
            let (dataset, _) = load_prepared(&dir)?;
            let plan = split_dataset(&dataset.logs, test_fraction, folds, seed)?;
            let out = output.unwrap_or_else(|| dir.join("split.json"));
            plan.save(&out)?;
            println!("wrote {} ({} test students, {} folds)", out.display(), plan.test_students.len(), plan.folds.len());
            Ok(())
        }
        Command::Train { config, output } => {
            let out = output.unwrap_or_else(|| {
                let stem = config.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                config.with_file_name(format!("{stem}-results"))
            });
            let summary = run_experiment_file(&config, &out)?;
            print!("{}", render_table(&summary.rows, TableFormat::Markdown)?);
            println!(
                "fairness: {} targets identical across {} models",
                summary.fairness.report.targets_compared,
                summary.rows.len()
            );
            println!("results in {}", out.display());
            Ok(())
        }
        Command::Evaluate { checkpoint, data, method, split, trace } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            match ckpt.scalar.as_str() {
                "f32" => evaluate_checkpoint::<f32>(&ckpt, &data, method, split.as_deref(), trace.as_deref()),
                _ => evaluate_checkpoint::<f64>(&ckpt, &data, method, split.as_deref(), trace.as_deref()),
            }
        }
        Command::Audit { checkpoint, data, samples, seed } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            match ckpt.scalar.as_str() {
                "f32" => audit_checkpoint::<f32>(&ckpt, &data, samples, seed),
                _ => audit_checkpoint::<f64>(&ckpt, &data, samples, seed),
            }
        }
        Command::Report { runs, format, plot } => {
            let records = load_run_records(&runs)?;
            let rows = comparison_rows(&records);
            print!("{}", render_table(&rows, format)?);
            write_file(&plot.unwrap_or_else(|| runs.join("test_auc.svg")), &render_bar_chart_svg(&rows))
        }
        Command::Synth { output, students, questions, kcs, kcs_per_question, interactions, seed, duplicated } => {
            let mode = if duplicated { CorrelationMode::Duplicated } else { CorrelationMode::Independent };
            let mut cfg = SyntheticConfig::new(students, questions, kcs, kcs_per_question, seed, mode);
            cfg.interactions_per_student = interactions;
            let data = generate_synthetic(&cfg)?;
            let report = IngestReport { interactions: data.logs.iter().map(|l| l.len()).sum(), ..Default::default() };
            write_prepared(&output, &data, &report)?;
            println!("wrote {}", output.display());
            print!("{}", to_json(&compute_stats(&data.logs, &data.mapping)?.to_json())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {}", cat.as_str(), e.to_string().replace('\n', " "));
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
