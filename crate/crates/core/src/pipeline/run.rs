//! End-to-end experiment runs and their artifact directories.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml            resolved configuration
//! checkpoints/<stage>/   last completed epoch of each stage; pretrain/, lofi/
//!                        and final/ hold the state handed between stages
//! logs/<stage>.jsonl     one record per epoch (per step for stage2)
//! predictions.json       validation predictions after suppression
//! metrics.json           MetricReport
//! summary.json           RunSummary
//! report.txt             one-row table
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{ExperimentConfig, PretrainMode};
use super::data::{split_ids, Split};
use super::stages::{stage1_acp, stage2_lofi, stage3_head, train_classifier, LrResult};
use crate::domain::save_predictions;
use crate::error::{Error, Result};
use crate::eval::{format_table, MetricReport};
use crate::fidelity::{lofi_configs, FidelityConfig};
use crate::models::checkpoint::{quantize, save_checkpoint};
use crate::models::encoder::Encoder;
use crate::models::head::TalHead;
use crate::models::Parameterized;
use crate::synthgen::{generate_dataset, load_dataset, make_trimmed_clips, Dataset};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub pretrain: PretrainMode,
    pub lofi: bool,
    pub chosen_lr: f64,
    pub lr_table: Vec<(f64, Option<f64>)>,
    pub columns: [f64; 4],
    pub average_map: f64,
    pub auc: f64,
    pub train_videos: usize,
    pub val_videos: usize,
    pub encoder_checksum: String,
    pub head_checksum: String,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("log records serialize"));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

/// The target dataset named by the config: loaded from `dataset_path` when
/// set, generated otherwise.
pub fn resolve_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset_path {
        Some(p) => load_dataset(p),
        None => generate_dataset(&cfg.dataset, cfg.snippets.window),
    }
}

pub fn full_config(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<FidelityConfig> {
    let v = dataset
        .videos
        .values()
        .next()
        .ok_or_else(|| Error::Config("dataset has no videos".into()))?;
    FidelityConfig::full(cfg.fidelity.full_l, v.height, v.width)
}

/// Runs pre-training, the optional low-fidelity stage and head training, then
/// evaluates on the validation split. Writes everything under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let dataset = resolve_dataset(cfg)?;
    run_with_dataset(cfg, &dataset, out)
}

pub fn run_with_dataset(cfg: &ExperimentConfig, dataset: &Dataset, out: &Path) -> Result<RunSummary> {
    let split = prepare_run(cfg, dataset, out)?;
    let mut encoder = pretrain_encoder(cfg, dataset, &split, out)?;
    let carried = if cfg.plan.lofi {
        let head = lofi_train(cfg, dataset, &split, &mut encoder, out)?;
        cfg.plan.carry_head.then_some(head)
    } else {
        None
    };
    head_train(cfg, dataset, &split, &mut encoder, carried.as_ref(), out)
}

/// Writes the resolved config under `out` and splits the dataset.
pub fn prepare_run(cfg: &ExperimentConfig, dataset: &Dataset, out: &Path) -> Result<Split> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let split = split_ids(dataset.videos.keys().map(String::as_str), cfg.plan.val_modulus);
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Config(format!(
            "split left {} training and {} validation videos",
            split.train.len(),
            split.val.len()
        )));
    }
    Ok(split)
}

fn ckpt_dir(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(name)
}

/// Encoder initialization and pre-training according to `plan.pretrain`:
/// random init (ICP), Stage 1 on the auxiliary clips (ACP), then clip
/// fine-tuning on the training split (ACP+). The result is also stored in
/// `checkpoints/pretrain`.
pub fn pretrain_encoder(cfg: &ExperimentConfig, dataset: &Dataset, split: &Split, out: &Path) -> Result<Encoder> {
    let seed = cfg.seed;
    let plan = &cfg.snippets;
    let logs = out.join("logs");
    let num_classes = dataset.annotations.classes.len();
    let mut encoder = Encoder::init(&cfg.model.encoder, &mut rng_for(seed, "encoder/init"))?;
    if cfg.plan.pretrain != PretrainMode::Icp {
        let aux = generate_dataset(&cfg.aux_dataset, plan.window).map_err(|e| e.in_stage("stage1"))?;
        let clips = make_trimmed_clips(&aux, plan.window)?;
        let r = stage1_acp(&clips, &mut encoder, &cfg.stage1, plan, num_classes, seed, Some(&ckpt_dir(out, "stage1")))
            .map_err(|e| e.in_stage("stage1"))?;
        write_jsonl(&logs.join("stage1.jsonl"), &r.log)?;
    }
    if cfg.plan.pretrain == PretrainMode::AcpPlus {
        let train_set = Dataset {
            videos: split.train.iter().map(|id| (id.clone(), dataset.videos[id].clone())).collect(),
            annotations: dataset.annotations.subset(split.train.iter().map(String::as_str)),
        };
        let clips = make_trimmed_clips(&train_set, plan.window)?;
        let r = train_classifier("finetune", &clips, &mut encoder, &cfg.finetune, plan, num_classes, seed, Some(&ckpt_dir(out, "finetune")))
            .map_err(|e| e.in_stage("finetune"))?;
        write_jsonl(&logs.join("finetune.jsonl"), &r.log)?;
    }
    save_checkpoint(
        &ckpt_dir(out, "pretrain"),
        &[&encoder],
        serde_json::json!({"stage": "pretrain", "pretrain": cfg.plan.pretrain.label(), "seed": seed}),
    )?;
    Ok(encoder)
}

/// Stage 2 on the training split. Returns the jointly trained head; encoder
/// and head are stored in `checkpoints/lofi`.
pub fn lofi_train(cfg: &ExperimentConfig, dataset: &Dataset, split: &Split, encoder: &mut Encoder, out: &Path) -> Result<TalHead> {
    let seed = cfg.seed;
    let num_classes = dataset.annotations.classes.len();
    let full = full_config(cfg, dataset)?;
    let configs = lofi_configs(&full, &cfg.fidelity.factors)?;
    let mut head = TalHead::init(encoder.feature_dim(), &cfg.model.head, num_classes, &mut rng_for(seed, "stage2/head"))?;
    let r = stage2_lofi(
        dataset,
        &split.train,
        encoder,
        &mut head,
        &cfg.fidelity.schedule,
        &configs,
        &cfg.stage2,
        &cfg.loss,
        &cfg.snippets,
        seed,
        Some(&ckpt_dir(out, "stage2")),
    )
    .map_err(|e| e.in_stage("stage2"))?;
    write_jsonl(&out.join("logs").join("stage2.jsonl"), &r.steps)?;
    save_checkpoint(&ckpt_dir(out, "lofi"), &[&*encoder, &head], serde_json::json!({"stage": "lofi", "seed": seed}))?;
    Ok(head)
}

/// Stage 3 on frozen full-fidelity features, then validation metrics. Writes
/// the final checkpoint, predictions, metrics, summary and report.
pub fn head_train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split: &Split,
    encoder: &mut Encoder,
    carried: Option<&TalHead>,
    out: &Path,
) -> Result<RunSummary> {
    let seed = cfg.seed;
    let full = full_config(cfg, dataset)?;
    // the encoder is frozen from here on; round it to the stored precision so
    // the checkpoint reproduces the evaluated model exactly
    quantize(encoder);
    let r = stage3_head(
        dataset,
        &split.train,
        &split.val,
        encoder,
        carried,
        &cfg.model.head,
        &cfg.stage3,
        &cfg.loss,
        &cfg.eval,
        &full,
        &cfg.snippets,
        seed,
    )
    .map_err(|e| e.in_stage("stage3"))?;
    write_jsonl(&out.join("logs").join("stage3.jsonl"), &r.log)?;
    let mut head = r.head.clone();
    quantize(&mut head);
    save_checkpoint(
        &ckpt_dir(out, "final"),
        &[&*encoder, &head],
        serde_json::json!({"stage": "final", "seed": seed, "chosen_lr": r.chosen_lr}),
    )?;

    save_predictions(&r.predictions, out.join("predictions.json"))?;
    write_json(&out.join("metrics.json"), &r.report)?;
    let label = cfg.plan.label(&cfg.fidelity.schedule);
    let summary = RunSummary {
        label: label.clone(),
        seed,
        pretrain: cfg.plan.pretrain,
        lofi: cfg.plan.lofi,
        chosen_lr: r.chosen_lr,
        lr_table: r.table.iter().map(|t: &LrResult| (t.lr, t.average_map)).collect(),
        columns: r.report.columns(),
        average_map: r.report.average_map,
        auc: r.report.auc,
        train_videos: split.train.len(),
        val_videos: split.val.len(),
        encoder_checksum: format!("{:016x}", encoder.checksum()),
        head_checksum: format!("{:016x}", head.checksum()),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_text(&out.join("report.txt"), &format_table(&[(label, summary.columns)]))?;
    Ok(summary)
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    if !path.exists() {
        return Err(Error::DatasetMissing(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path,
        offset: 0,
        message: e.to_string(),
    })
}

pub fn load_metrics(dir: &Path) -> Result<MetricReport> {
    let path = dir.join("metrics.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path,
        offset: 0,
        message: e.to_string(),
    })
}

/// Comparison table over several runs; runs sharing a label are averaged.
pub fn comparison_table(runs: &[RunSummary]) -> (Vec<(String, [f64; 4])>, String) {
    let mut rows: Vec<(String, [f64; 4], usize)> = Vec::new();
    for r in runs {
        match rows.iter_mut().find(|(l, _, _)| *l == r.label) {
            Some((_, acc, n)) => {
                for (a, v) in acc.iter_mut().zip(r.columns) {
                    *a += v;
                }
                *n += 1;
            }
            None => rows.push((r.label.clone(), r.columns, 1)),
        }
    }
    let rows: Vec<(String, [f64; 4])> = rows
        .into_iter()
        .map(|(l, acc, n)| (l, acc.map(|v| v / n as f64)))
        .collect();
    let text = format_table(&rows);
    (rows, text)
}

/// Per-step records of a stage-2 log, for plots and checks.
pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: i,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let text = r#"
            seed = 9
            [snippets]
            window = 16
            stride = 8
            [dataset]
            num_videos = 8
            frames_per_video = 200
            height = 16
            width = 16
            min_instance_secs = 1.0
            max_instance_secs = 2.0
            min_gap_frames = 4
            [aux_dataset]
            num_videos = 4
            frames_per_video = 200
            height = 16
            width = 16
            min_instance_secs = 1.0
            max_instance_secs = 2.0
            min_gap_frames = 4
            id_prefix = "aux"
            [fidelity]
            full_l = 10
            [stage1]
            epochs = 1
            [finetune]
            epochs = 1
            [stage2]
            epochs = 2
            batch_size = 2
            [stage3]
            epochs = 1
            lr_grid = [0.01, 0.001]
        "#;
        ExperimentConfig::from_toml_str(text).unwrap()
    }

    fn read(p: &Path) -> Vec<u8> {
        fs::read(p).unwrap()
    }

    #[test]
    fn identical_runs_write_identical_artifacts() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = run_experiment(&cfg, a.path()).unwrap();
        let sb = run_experiment(&cfg, b.path()).unwrap();
        assert_eq!(sa, sb);
        for f in ["metrics.json", "predictions.json", "config.toml", "logs/stage2.jsonl", "checkpoints/final/manifest.json"] {
            assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
        }
        assert_eq!(load_summary(a.path()).unwrap(), sa);
        assert_eq!(load_metrics(a.path()).unwrap().average_map, sa.average_map);
        // the archived config alone reproduces the run
        let archived = ExperimentConfig::load(&a.path().join("config.toml")).unwrap();
        assert_eq!(archived, cfg);
    }

    #[test]
    fn final_checkpoint_restores_the_evaluated_models() {
        use crate::models::checkpoint::load_checkpoint;
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&cfg, dir.path()).unwrap();
        let ck = load_checkpoint(&dir.path().join("checkpoints/final")).unwrap();
        let mut enc = Encoder::zeros(&cfg.model.encoder).unwrap();
        ck.restore(&mut enc).unwrap();
        assert_eq!(format!("{:016x}", enc.checksum()), s.encoder_checksum);
    }

    #[test]
    fn pretrain_modes_select_stages() {
        let mut cfg = tiny_config();
        cfg.plan.lofi = false;
        cfg.plan.pretrain = PretrainMode::Icp;
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(s.label, "ICP");
        assert!(!dir.path().join("logs/stage1.jsonl").exists());
        assert!(!dir.path().join("logs/stage2.jsonl").exists());

        cfg.plan.pretrain = PretrainMode::AcpPlus;
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(s.label, "ACP+");
        assert!(dir.path().join("logs/stage1.jsonl").exists());
        assert!(dir.path().join("logs/finetune.jsonl").exists());
    }

    #[test]
    fn comparison_averages_runs_with_the_same_label() {
        let mk = |label: &str, v: f64| RunSummary {
            label: label.into(),
            seed: 0,
            pretrain: PretrainMode::Acp,
            lofi: false,
            chosen_lr: 0.01,
            lr_table: vec![],
            columns: [v; 4],
            average_map: v,
            auc: 0.0,
            train_videos: 1,
            val_videos: 1,
            encoder_checksum: String::new(),
            head_checksum: String::new(),
        };
        let (rows, text) = comparison_table(&[mk("ACP", 0.2), mk("C-LoFi long", 0.5), mk("ACP", 0.4)]);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].1[0] - 0.3).abs() < 1e-12);
        assert_eq!(text.lines().count(), 4);
    }
}
