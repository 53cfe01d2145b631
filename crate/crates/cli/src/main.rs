mod plots;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lofi_core::domain::{load_annotations, load_predictions};
use lofi_core::eval::{format_table, metric_report, iou_grid, postprocess};
use lofi_core::fidelity::{plan_memory, FidelityConfig};
use lofi_core::models::checkpoint::load_checkpoint;
use lofi_core::models::encoder::Encoder;
use lofi_core::models::head::TalHead;
use lofi_core::models::Parameterized;
use lofi_core::pipeline::run::{
    load_summary, read_jsonl, resolve_dataset, write_json, write_text,
};
use lofi_core::pipeline::{
    comparison_table, head_train, lofi_train, prepare_run, pretrain_encoder, run_experiment, ExperimentConfig,
};
use lofi_core::synthgen::{generate_dataset, save_dataset};
use lofi_core::Error;

pub const OUT_ENV: &str = "LOFI_OUT_DIR";

#[derive(Parser)]
#[command(name = "lofi", version, about = "Low-fidelity end-to-end training for temporal action localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "lofi-out")]
    out: PathBuf,
    /// Print a JSON summary on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Config override `key=value`, dotted keys for nested tables.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by the config.
    Generate {
        /// Generate the auxiliary classification set instead.
        #[arg(long)]
        aux: bool,
    },
    /// Encoder pre-training (ICP, ACP or ACP+ per `plan.pretrain`).
    TrainAcp,
    /// Low-fidelity joint training of encoder and head.
    TrainLofi {
        /// Checkpoint directory with the starting encoder; pre-trains per config when absent.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Head training on frozen full-fidelity features, then validation metrics.
    TrainHead {
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Score predictions against annotations.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Score predictions as given, without soft-NMS and top-k.
        #[arg(long)]
        no_nms: bool,
    },
    /// Memory estimates and budget verdicts for full and low-fidelity configs.
    PlanMemory {
        /// Full-fidelity L,H,W.
        #[arg(long, default_value = "100,224,224")]
        full: String,
    },
    /// Comparison table over finished runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also write SVG plots of stage-2 losses and fidelity timelines.
        #[arg(long)]
        plots: bool,
    },
    /// All stages end to end.
    Run,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::TrainAcp => "train-acp",
            Command::TrainLofi { .. } => "train-lofi",
            Command::TrainHead { .. } => "train-head",
            Command::Evaluate { .. } => "evaluate",
            Command::PlanMemory { .. } => "plan-memory",
            Command::Report { .. } => "report",
            Command::Run => "run",
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

/// Stable exit code per error class.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) => 3,
        Error::Io { .. } | Error::Parse { .. } | Error::DatasetMissing(_) => 4,
        Error::Validation { .. }
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::Generation { .. }
        | Error::EmptyGroundTruth
        | Error::EmptyLoss => 5,
        Error::Diverged { .. } | Error::AllLearningRatesDiverged { .. } => 6,
        Error::Stage { .. } => 1,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

struct Output {
    summary: Value,
    text: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let name = cli.command.name();
    match dispatch(&cli) {
        Ok(out) => {
            if cli.common.json {
                let mut summary = out.summary;
                summary["command"] = json!(name);
                summary["ok"] = json!(true);
                println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            } else {
                print!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("lofi {name}: {}", f.message);
            if cli.common.json {
                let v = json!({"command": name, "ok": false, "exit_code": f.code, "error": f.message});
                println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            }
            ExitCode::from(f.code)
        }
    }
}

/// Config file plus `--seed` and `--set` overrides. Any failure here is a
/// configuration error, including an unreadable file.
fn resolve_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::resolve(common.config.as_deref(), &overrides).map_err(|e| Failure {
        code: 3,
        message: e.to_string(),
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn dispatch(cli: &Cli) -> Result<Output, Failure> {
    let common = &cli.common;
    let out = &common.out;
    match &cli.command {
        Command::Generate { aux } => {
            let cfg = resolve_config(common)?;
            let spec = if *aux { &cfg.aux_dataset } else { &cfg.dataset };
            let dataset = generate_dataset(spec, cfg.snippets.window)?;
            save_dataset(&dataset, Some(spec), out)?;
            let instances = dataset.annotations.num_instances();
            Ok(Output {
                text: format!("wrote {} videos ({instances} instances) to {}\n", dataset.videos.len(), out.display()),
                summary: json!({
                    "out": path_str(out),
                    "videos": dataset.videos.len(),
                    "instances": instances,
                    "classes": dataset.annotations.classes,
                    "artifacts": [path_str(out)],
                }),
            })
        }
        Command::TrainAcp => {
            let cfg = resolve_config(common)?;
            let dataset = resolve_dataset(&cfg)?;
            let split = prepare_run(&cfg, &dataset, out)?;
            let encoder = pretrain_encoder(&cfg, &dataset, &split, out)?;
            let ckpt = out.join("checkpoints").join("pretrain");
            Ok(Output {
                text: format!("{} encoder written to {}\n", cfg.plan.pretrain.label(), ckpt.display()),
                summary: json!({
                    "out": path_str(out),
                    "pretrain": cfg.plan.pretrain.label(),
                    "encoder_checksum": format!("{:016x}", encoder.checksum()),
                    "artifacts": [path_str(&ckpt)],
                }),
            })
        }
        Command::TrainLofi { encoder } => {
            let cfg = resolve_config(common)?;
            let dataset = resolve_dataset(&cfg)?;
            let split = prepare_run(&cfg, &dataset, out)?;
            let mut enc = match encoder {
                Some(dir) => load_encoder(&cfg, dir)?,
                None => pretrain_encoder(&cfg, &dataset, &split, out)?,
            };
            let head = lofi_train(&cfg, &dataset, &split, &mut enc, out)?;
            let ckpt = out.join("checkpoints").join("lofi");
            let log = out.join("logs").join("stage2.jsonl");
            let steps = read_jsonl(&log)?;
            let last_loss = steps.last().and_then(|s| s["loss"].as_f64());
            Ok(Output {
                text: format!(
                    "{} stage-2 steps, final loss {}; checkpoint in {}\n",
                    steps.len(),
                    last_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
                    ckpt.display()
                ),
                summary: json!({
                    "out": path_str(out),
                    "steps": steps.len(),
                    "final_loss": last_loss,
                    "encoder_checksum": format!("{:016x}", enc.checksum()),
                    "head_checksum": format!("{:016x}", head.checksum()),
                    "artifacts": [path_str(&ckpt), path_str(&log)],
                }),
            })
        }
        Command::TrainHead { encoder } => {
            let cfg = resolve_config(common)?;
            let dataset = resolve_dataset(&cfg)?;
            let split = prepare_run(&cfg, &dataset, out)?;
            let (mut enc, carried) = match encoder {
                Some(dir) => {
                    let enc = load_encoder(&cfg, dir)?;
                    let head = if cfg.plan.carry_head {
                        Some(load_head(&cfg, &dataset, &enc, dir)?)
                    } else {
                        None
                    };
                    (enc, head)
                }
                None => (pretrain_encoder(&cfg, &dataset, &split, out)?, None),
            };
            let summary = head_train(&cfg, &dataset, &split, &mut enc, carried.as_ref(), out)?;
            Ok(run_output(out, &summary))
        }
        Command::Evaluate {
            predictions,
            annotations,
            no_nms,
        } => {
            let cfg = resolve_config(common)?;
            let preds = load_predictions(predictions)?;
            let gts = load_annotations(annotations)?;
            let preds = if *no_nms { preds } else { postprocess(&preds, &cfg.eval) };
            let report = metric_report(&preds, &gts, &iou_grid())?;
            let table = format_table(&[("Predictions".to_string(), report.columns())]);
            let metrics = out.join("metrics.json");
            write_json(&metrics, &report)?;
            write_text(&out.join("report.txt"), &table)?;
            Ok(Output {
                text: table,
                summary: json!({
                    "out": path_str(out),
                    "report": report,
                    "artifacts": [path_str(&metrics), path_str(&out.join("report.txt"))],
                }),
            })
        }
        Command::PlanMemory { full } => {
            let cfg = resolve_config(common)?;
            let (l, h, w) = parse_triple(full)?;
            let full = FidelityConfig::full(l, h, w)?;
            let plan = plan_memory(
                &full,
                &cfg.fidelity.factors,
                &cfg.fidelity.cost,
                cfg.fidelity.plan_batch,
                cfg.fidelity.budget_bytes(),
            )?;
            let mut text = format!(
                "batch {}, budget {:.1} GiB\n{:<15} {:>12} {:>7} {:>12} {}\n",
                plan.batch,
                plan.budget_bytes / GIB,
                "config",
                "volume",
                "ratio",
                "GiB",
                "feasible"
            );
            for c in &plan.configs {
                let (l, h, w) = c.config.dims();
                text.push_str(&format!(
                    "{:<15} {:>12} {:>7.4} {:>12.2} {}\n",
                    format!("{} {l}x{h}x{w}", c.config.kind.short_name()),
                    c.pixel_volume,
                    c.parity_ratio,
                    c.estimate.total_bytes / GIB,
                    if c.verdict.feasible { "yes" } else { "no" }
                ));
            }
            Ok(Output {
                text,
                summary: json!({"plan": plan, "artifacts": []}),
            })
        }
        Command::Report { runs, plots } => {
            let summaries = runs
                .iter()
                .map(|r| load_summary(r))
                .collect::<Result<Vec<_>, _>>()?;
            let (rows, table) = comparison_table(&summaries);
            let report_path = out.join("report.txt");
            write_text(&report_path, &table)?;
            let rows_json: Vec<Value> = rows
                .iter()
                .map(|(label, v)| json!({"label": label, "columns": v}))
                .collect();
            let json_path = out.join("report.json");
            write_json(&json_path, &json!({"rows": rows_json, "runs": summaries}))?;
            let mut artifacts = vec![path_str(&report_path), path_str(&json_path)];
            if *plots {
                for p in plots::write_plots(runs, &out.join("plots"))? {
                    artifacts.push(path_str(&p));
                }
            }
            Ok(Output {
                text: table,
                summary: json!({"out": path_str(out), "rows": rows_json, "artifacts": artifacts}),
            })
        }
        Command::Run => {
            let cfg = resolve_config(common)?;
            let summary = run_experiment(&cfg, out)?;
            Ok(run_output(out, &summary))
        }
    }
}

const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

fn run_output(out: &Path, summary: &lofi_core::pipeline::RunSummary) -> Output {
    let artifacts: Vec<String> = ["summary.json", "metrics.json", "predictions.json", "report.txt"]
        .iter()
        .map(|f| path_str(&out.join(f)))
        .collect();
    Output {
        text: format_table(&[(summary.label.clone(), summary.columns)]),
        summary: json!({"out": path_str(out), "summary": summary, "artifacts": artifacts}),
    }
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), Failure> {
    let bad = || Failure {
        code: 2,
        message: format!("--full expects L,H,W, got '{s}'"),
    };
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match v[..] {
        [l, h, w] => Ok((l, h, w)),
        _ => Err(bad()),
    }
}

fn load_encoder(cfg: &ExperimentConfig, dir: &Path) -> Result<Encoder, Failure> {
    let ckpt = load_checkpoint(dir)?;
    let mut enc = Encoder::zeros(&cfg.model.encoder)?;
    ckpt.restore(&mut enc)?;
    Ok(enc)
}

fn load_head(
    cfg: &ExperimentConfig,
    dataset: &lofi_core::synthgen::Dataset,
    enc: &Encoder,
    dir: &Path,
) -> Result<TalHead, Failure> {
    let ckpt = load_checkpoint(dir)?;
    let mut head = TalHead::zeros(enc.feature_dim(), &cfg.model.head, dataset.annotations.classes.len())?;
    ckpt.restore(&mut head)?;
    Ok(head)
}
