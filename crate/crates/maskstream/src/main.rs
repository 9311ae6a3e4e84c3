//! CLI: corpus generation, training, streaming evaluation, ablation suites
//! and report merging.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maskstream::baseline::{train_ar, ArModel, ArTrainOptions};
use maskstream::config::{
    load_json_config, AblateCliConfig, EvalCliConfig, EvalModelCfg, ModelKind, TrainCliConfig,
};
use maskstream::denoiser::{train, DuplicationMode, LrSchedule, NeuralDenoiser, TrainOptions};
use maskstream::harness::{
    eval_streams, load_report, report_from_results, run_ablation, save_report, write_ablation_csv,
    write_trace_dump, write_transition_tsv, write_trigger_log, AblationSetup, AblationSuite,
    EvalModelSpec, EvalOptions,
};
use maskstream::metrics::SegmentMatchConfig;
use maskstream::streamgen::{generate_corpus, read_corpus, write_corpus, TaskCorpus};
use maskstream::{Error, Result};

#[derive(Parser)]
#[command(
    name = "maskstream",
    about = "Masked-denoising activation engine for streaming event triggers",
    version
)]
struct Cli {
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write debugging dumps (per-frame traces, wall-time profile).
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (one JSONL file per task).
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the mask predictor or the AR baseline; writes a checkpoint and
    /// a loss curve CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stream a corpus through the engine; writes trigger logs and a metric
    /// report.
    StreamEval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a named ablation suite (masking, duplication, remasking,
    /// tau_sweep, k_sweep); writes a per-arm CSV.
    Ablate {
        suite: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Merge metric reports into one CSV plus plot-ready TSV series.
    Report {
        /// Metric report JSON files.
        inputs: Vec<PathBuf>,
    },
}

fn out_dir(cli_out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli_out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_tasks(paths: &[PathBuf]) -> Result<Vec<TaskCorpus>> {
    if paths.is_empty() {
        return Err(Error::Config("no corpus files listed".into()));
    }
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("task")
                .to_string();
            Ok(TaskCorpus { name, samples: read_corpus(p)? })
        })
        .collect()
}

fn cmd_gen(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: maskstream::streamgen::GenConfig = load_json_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg)?;
    for task in &corpus {
        let path = out.join(format!("{}.jsonl", task.name));
        write_corpus(&path, &task.samples)?;
        println!("wrote {} streams to {}", task.samples.len(), path.display());
    }
    Ok(())
}

fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,loss")?;
    for (step, loss) in curve {
        writeln!(w, "{step},{loss}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg: TrainCliConfig = load_json_config(config)?;
    let tasks = load_tasks(&cfg.corpus)?;
    let pool: Vec<_> = tasks.into_iter().flat_map(|t| t.samples).collect();
    let seed = seed.unwrap_or(cfg.seed);
    match cfg.kind {
        ModelKind::Diffusion => {
            let mut model = NeuralDenoiser::new(cfg.model, cfg.model_seed)?;
            model.duplication = if cfg.duplication {
                DuplicationMode::Enabled
            } else {
                DuplicationMode::Disabled
            };
            let opts = TrainOptions {
                steps: cfg.steps,
                lr: cfg.lr,
                lr_schedule: LrSchedule::Cosine,
                clip_norm: cfg.clip_norm,
                window_max: cfg.window_max,
                margin: cfg.margin,
                mixture: cfg.masking,
                seed,
            };
            let curve = train(&mut model, &pool, &opts)?;
            let ckpt = out.join("checkpoint.json");
            model.save(&ckpt)?;
            write_loss_csv(&out.join("loss.csv"), &curve)?;
            println!(
                "trained mask predictor ({} params, {} steps) -> {}",
                model.param_count(),
                cfg.steps,
                ckpt.display()
            );
        }
        ModelKind::Ar => {
            let mut model = ArModel::new(cfg.model, cfg.model_seed)?;
            let opts = ArTrainOptions {
                steps: cfg.steps,
                lr: cfg.lr,
                lr_schedule: LrSchedule::Cosine,
                clip_norm: cfg.clip_norm,
                window_max: cfg.window_max,
                p_max: cfg.p_max,
                seed,
            };
            let curve = train_ar(&mut model, &pool, &opts)?;
            let ckpt = out.join("ar_checkpoint.json");
            model.save(&ckpt)?;
            write_loss_csv(&out.join("loss.csv"), &curve)?;
            println!("trained ar baseline ({} steps) -> {}", cfg.steps, ckpt.display());
        }
    }
    Ok(())
}

fn cmd_stream_eval(config: &Path, out: &Path, trace: bool) -> Result<()> {
    let cfg: EvalCliConfig = load_json_config(config)?;
    let corpus = load_tasks(&cfg.corpus)?;
    let opts = EvalOptions {
        match_cfg: SegmentMatchConfig::new(cfg.iou_threshold)?,
        parallel: cfg.parallel,
        collect_traces: trace,
    };
    let neural;
    let ar;
    let (model, tag): (EvalModelSpec, &str) = match &cfg.model {
        EvalModelCfg::Oracle { epsilon, boundary_blur } => (
            EvalModelSpec::Oracle { epsilon: *epsilon, boundary_blur: *boundary_blur },
            "oracle",
        ),
        EvalModelCfg::Checkpoint { path } => {
            neural = NeuralDenoiser::load(path)?;
            (EvalModelSpec::Denoiser(&neural), "diffusion")
        }
        EvalModelCfg::ArCheckpoint { path } => {
            ar = ArModel::load(path)?;
            (EvalModelSpec::Ar(&ar), "ar")
        }
    };
    let results = eval_streams(&corpus, &cfg.engine, &model, &opts)?;
    let report = report_from_results(&results, &cfg.engine, &opts, false);
    save_report(&out.join("report.json"), &report)?;
    write_trigger_log(&out.join("triggers.jsonl"), &results, tag)?;
    if trace {
        let timed = report_from_results(&results, &cfg.engine, &opts, true);
        if let Some(latency) = &timed.latency {
            let mut w = std::io::BufWriter::new(fs::File::create(out.join("timings.json"))?);
            serde_json::to_writer_pretty(&mut w, latency)?;
            w.write_all(b"\n")?;
        }
        write_trace_dump(&out.join("trace.jsonl"), &results)?;
    }
    println!(
        "evaluated {} streams: mean F1 {:.4}, {} triggers -> {}",
        report.n_streams,
        report.mean_f1,
        report.trigger_stats.count,
        out.join("report.json").display()
    );
    Ok(())
}

fn cmd_ablate(suite: &str, config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let suite: AblationSuite = suite.parse()?;
    let mut cfg: AblateCliConfig = load_json_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train_streams: Vec<_> = generate_corpus(&cfg.gen_train)?
        .into_iter()
        .flat_map(|t| t.samples)
        .collect();
    let eval = generate_corpus(&cfg.gen_eval)?;
    let setup = AblationSetup {
        train_streams,
        eval,
        model_cfg: cfg.model,
        train_opts: TrainOptions {
            steps: cfg.steps,
            lr: cfg.lr,
            lr_schedule: LrSchedule::Cosine,
            clip_norm: cfg.clip_norm,
            window_max: cfg.window_max,
            margin: cfg.margin,
            mixture: maskstream::denoiser::MaskingMixture::Mixture,
            seed: cfg.seed,
        },
        engine: cfg.engine,
        model_seed: cfg.model_seed,
        taus: cfg.taus.clone(),
        ks: cfg.ks.clone(),
    };
    let rows = run_ablation(suite, &setup)?;
    let name = match suite {
        AblationSuite::Masking => "masking",
        AblationSuite::Duplication => "duplication",
        AblationSuite::Remasking => "remasking",
        AblationSuite::TauSweep => "tau_sweep",
        AblationSuite::KSweep => "k_sweep",
    };
    let path = out.join(format!("{name}.csv"));
    write_ablation_csv(&path, &rows)?;
    for r in &rows {
        println!(
            "{}: mean F1 {:.4}, transitions/event {:.3}",
            r.arm, r.mean_f1, r.transitions_per_event
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("no report files given".into()));
    }
    let merged = out.join("merged.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&merged)?);
    writeln!(
        w,
        "report,n_streams,n_events,mean_f1,transitions_pre,transitions_during,transitions_post,triggers,matched,false_triggers,mean_latency_s"
    )?;
    for path in inputs {
        let report = load_report(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        writeln!(
            w,
            "{},{},{},{:.6},{},{},{},{},{},{},{}",
            stem,
            report.n_streams,
            report.n_events,
            report.mean_f1,
            report.transitions.pre,
            report.transitions.during,
            report.transitions.post,
            report.trigger_stats.count,
            report.trigger_stats.matched,
            report.trigger_stats.false_triggers,
            report
                .trigger_stats
                .mean_latency_s
                .map(|v| format!("{v:.4}"))
                .unwrap_or_default(),
        )?;
        write_transition_tsv(
            &out.join(format!("transitions_{stem}.tsv")),
            &report.transition_histogram,
        )?;
    }
    w.flush()?;
    println!("wrote {}", merged.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let out = out_dir(&cli.out)?;
    match &cli.cmd {
        Cmd::Gen { config } => cmd_gen(config, cli.seed, &out),
        Cmd::Train { config } => cmd_train(config, cli.seed, &out),
        Cmd::StreamEval { config } => cmd_stream_eval(config, &out, cli.trace),
        Cmd::Ablate { suite, config } => cmd_ablate(suite, config, cli.seed, &out),
        Cmd::Report { inputs } => cmd_report(inputs, &out),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; force usage errors onto exit 1
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
