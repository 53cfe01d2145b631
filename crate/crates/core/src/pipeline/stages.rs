//! The training stages: clip classification, low-fidelity joint training and
//! final head training on frozen full-fidelity features.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ClassifierStage, HeadStage, StageHyperparams};
use super::data::{extract_features, predict, video_targets, SnippetCache};
use super::optim::Optimizer;
use crate::domain::PredictionSet;
use crate::error::{Error, Result};
use crate::eval::{evaluate, postprocess, EvalConfig, MetricReport};
use crate::fidelity::{build_schedule, FidelityConfig, ScheduleSpec};
use crate::models::anchors::AnchorTable;
use crate::models::checkpoint::save_checkpoint;
use crate::models::encoder::Encoder;
use crate::models::head::{HeadSpec, TalHead};
use crate::models::loss::{tal_loss_with_grad, AnchorTarget, LossConfig};
use crate::models::{clip_loss_and_grads, video_loss_and_grads, ClassifierHead, Parameterized, SnippetFeatures};
use crate::snippets::{video_snippets, SnippetPlan};
use crate::synthgen::{Clip, Dataset};
use crate::util::rng_for;

fn checkpoint(dir: Option<&Path>, models: &[&dyn Parameterized], meta: Value) -> Result<()> {
    match dir {
        Some(d) => save_checkpoint(d, models, meta),
        None => Ok(()),
    }
}

fn shuffled(n: usize, seed: u64, tag: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, tag));
    order
}

#[derive(Debug)]
pub struct ClassifierOutcome {
    pub classifier: ClassifierHead,
    pub log: Vec<Value>,
}

/// Trains `encoder` plus a fresh linear classifier on trimmed clips with SGD.
/// Each clip is represented by `snippets_per_clip` full-resolution snippets.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    stage: &'static str,
    clips: &[Clip],
    encoder: &mut Encoder,
    hp: &ClassifierStage,
    plan: &SnippetPlan,
    num_classes: usize,
    seed: u64,
    ckpt: Option<&Path>,
) -> Result<ClassifierOutcome> {
    let mut classifier = ClassifierHead::init(encoder.feature_dim(), num_classes, &mut rng_for(seed, &format!("{stage}/classifier")));
    let mut log = Vec::new();
    if hp.epochs == 0 {
        return Ok(ClassifierOutcome { classifier, log });
    }
    if clips.is_empty() {
        return Err(Error::InvalidArgument(format!("{stage}: no clips to train on")));
    }
    let n = hp.snippets_per_clip;
    let inputs: Vec<(Vec<f32>, (usize, usize, usize, usize))> = clips
        .iter()
        .map(|c| {
            let cfg = FidelityConfig::full(n, c.video.height, c.video.width)?;
            Ok((video_snippets(&c.video, &cfg, plan)?, (n, plan.frames_per_snippet(), c.video.height, c.video.width)))
        })
        .collect::<Result<_>>()?;
    let mut opt_enc = Optimizer::sgd(hp.momentum, hp.weight_decay);
    let mut opt_cls = Optimizer::sgd(hp.momentum, hp.weight_decay);
    let mut step = 0;
    let mut last_good = None;
    for epoch in 0..hp.epochs {
        let order = shuffled(clips.len(), seed, &format!("{stage}/epoch{epoch}"));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let mut eg = encoder.zeros_like();
            let mut cg = classifier.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (x, dims) = &inputs[i];
                let (l, ok) = clip_loss_and_grads(encoder, &classifier, x, *dims, clips[i].label, scale, &mut eg, &mut cg)?;
                batch_loss += l;
                correct += usize::from(ok);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { stage, step, batch: b, last_good_epoch: last_good });
            }
            loss_sum += batch_loss;
            opt_enc.step(encoder, &eg, hp.lr);
            opt_cls.step(&mut classifier, &cg, hp.lr);
            if !encoder.all_finite() || !classifier.all_finite() {
                return Err(Error::Diverged { stage, step, batch: b, last_good_epoch: last_good });
            }
            step += 1;
        }
        let record = json!({
            "stage": stage,
            "epoch": epoch,
            "lr": hp.lr,
            "loss": loss_sum / clips.len() as f64,
            "accuracy": correct as f64 / clips.len() as f64,
        });
        log.push(record);
        checkpoint(ckpt, &[&*encoder, &classifier], json!({"stage": stage, "epoch": epoch, "seed": seed}))?;
        last_good = Some(epoch);
    }
    Ok(ClassifierOutcome { classifier, log })
}

/// Classification pre-training on auxiliary clips.
pub fn stage1_acp(
    clips: &[Clip],
    encoder: &mut Encoder,
    hp: &ClassifierStage,
    plan: &SnippetPlan,
    num_classes: usize,
    seed: u64,
    ckpt: Option<&Path>,
) -> Result<ClassifierOutcome> {
    train_classifier("stage1", clips, encoder, hp, plan, num_classes, seed, ckpt)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub kind: String,
    pub l: usize,
    pub h: usize,
    pub w: usize,
    pub lr: f64,
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub positives: usize,
}

#[derive(Debug)]
pub struct Stage2Outcome {
    pub steps: Vec<StepRecord>,
}

/// Joint encoder and head training, one fidelity configuration per batch as
/// given by the schedule. Batches have exactly `hp.batch_size` videos; the
/// remainder of each epoch is dropped.
#[allow(clippy::too_many_arguments)]
pub fn stage2_lofi(
    dataset: &Dataset,
    ids: &[String],
    encoder: &mut Encoder,
    head: &mut TalHead,
    schedule: &ScheduleSpec,
    configs: &[FidelityConfig; 3],
    hp: &StageHyperparams,
    loss: &LossConfig,
    plan: &SnippetPlan,
    seed: u64,
    ckpt: Option<&Path>,
) -> Result<Stage2Outcome> {
    hp.validate()?;
    let per_epoch = ids.len() / hp.batch_size;
    let sched = build_schedule(schedule, configs, hp.epochs, per_epoch)?;
    let mut cache = SnippetCache::default();
    let mut tables: BTreeMap<usize, AnchorTable> = BTreeMap::new();
    let mut targets: BTreeMap<(usize, usize), Vec<AnchorTarget>> = BTreeMap::new();
    let mut opt_enc = Optimizer::sgd(hp.momentum, hp.weight_decay);
    let mut opt_head = Optimizer::sgd(hp.momentum, hp.weight_decay);
    let mut steps = Vec::with_capacity(sched.len());
    let mut last_good = None;
    for epoch in 0..hp.epochs {
        let lr = hp.lr_at(epoch);
        let order = shuffled(ids.len(), seed, &format!("stage2/epoch{epoch}"));
        for b in 0..per_epoch {
            let step = epoch * per_epoch + b;
            let cfg = sched[step];
            let (l, h, w) = cfg.dims();
            if !tables.contains_key(&l) {
                tables.insert(l, AnchorTable::new(l)?);
            }
            let table = &tables[&l];
            let mut eg = encoder.zeros_like();
            let mut hg = head.zeros_like();
            let scale = 1.0 / hp.batch_size as f64;
            let mut rec = StepRecord {
                step,
                epoch,
                batch: b,
                kind: format!("{:?}", cfg.kind).to_lowercase(),
                l,
                h,
                w,
                lr,
                loss: 0.0,
                classification: 0.0,
                regression: 0.0,
                positives: 0,
            };
            for &vi in &order[b * hp.batch_size..(b + 1) * hp.batch_size] {
                let id = &ids[vi];
                let t = match targets.entry((vi, l)) {
                    std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::btree_map::Entry::Vacant(e) => e.insert(video_targets(dataset, id, table, plan, loss)?),
                };
                let x = cache.get(dataset, id, &cfg, plan)?;
                let dims = (l, plan.frames_per_snippet(), h, w);
                let br = match video_loss_and_grads(encoder, head, x, dims, table, t, loss, scale, Some(&mut eg), &mut hg) {
                    Ok(br) => br,
                    Err(Error::EmptyLoss) => continue,
                    Err(e) => return Err(e),
                };
                rec.loss += br.total * scale;
                rec.classification += br.classification * scale;
                rec.regression += br.regression * scale;
                rec.positives += br.positives;
            }
            if !rec.loss.is_finite() {
                return Err(Error::Diverged { stage: "stage2", step, batch: b, last_good_epoch: last_good });
            }
            opt_enc.step(encoder, &eg, lr);
            opt_head.step(head, &hg, lr);
            if !encoder.all_finite() || !head.all_finite() {
                return Err(Error::Diverged { stage: "stage2", step, batch: b, last_good_epoch: last_good });
            }
            steps.push(rec);
        }
        checkpoint(ckpt, &[&*encoder, &*head], json!({"stage": "stage2", "epoch": epoch, "seed": seed}))?;
        last_good = Some(epoch);
    }
    Ok(Stage2Outcome { steps })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrResult {
    pub lr: f64,
    /// `None` when training diverged.
    pub average_map: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug)]
pub struct Stage3Outcome {
    pub head: TalHead,
    pub chosen_lr: f64,
    pub table: Vec<LrResult>,
    pub report: MetricReport,
    /// Validation predictions after suppression and top-k.
    pub predictions: PredictionSet,
    pub log: Vec<Value>,
    pub encoder_checksum_before: u64,
    pub encoder_checksum_after: u64,
}

/// Index of the best score, smallest lr among ties. Diverged entries never win.
pub fn select_lr(table: &[LrResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in table.iter().enumerate() {
        let Some(m) = r.average_map else { continue };
        match best {
            None => best = Some(i),
            Some(j) => {
                let bm = table[j].average_map.expect("only finite entries are kept");
                if m > bm || (m == bm && r.lr < table[j].lr) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Head training on frozen full-fidelity features: one fresh head per
/// learning rate, selected by validation average mAP.
#[allow(clippy::too_many_arguments)]
pub fn stage3_head(
    dataset: &Dataset,
    train_ids: &[String],
    val_ids: &[String],
    encoder: &Encoder,
    head_init: Option<&TalHead>,
    head_spec: &HeadSpec,
    hp: &HeadStage,
    loss: &LossConfig,
    eval: &EvalConfig,
    full: &FidelityConfig,
    plan: &SnippetPlan,
    seed: u64,
) -> Result<Stage3Outcome> {
    if hp.lr_grid.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    let before = encoder.checksum();
    let anchors = AnchorTable::new(full.l)?;
    let train_x = extract_features(encoder, dataset, train_ids, full, plan)?;
    let val_x = extract_features(encoder, dataset, val_ids, full, plan)?;
    let train: Vec<(&SnippetFeatures, Vec<AnchorTarget>)> = train_ids
        .iter()
        .map(|id| Ok((&train_x[id], video_targets(dataset, id, &anchors, plan, loss)?)))
        .collect::<Result<_>>()?;
    let val_gts = dataset.annotations.subset(val_ids.iter().map(String::as_str));
    let num_classes = dataset.annotations.classes.len();

    let mut table = Vec::new();
    let mut heads = Vec::new();
    let mut log = Vec::new();
    for &lr in &hp.lr_grid {
        let mut head = match head_init {
            Some(h) => h.clone(),
            None => TalHead::init(encoder.feature_dim(), head_spec, num_classes, &mut rng_for(seed, "stage3/head"))?,
        };
        let mut opt = Optimizer::new(hp.optimizer, hp.momentum, hp.weight_decay);
        let mut final_loss = None;
        let mut diverged = false;
        'epochs: for epoch in 0..hp.epochs {
            let order = shuffled(train.len(), seed, &format!("stage3/epoch{epoch}"));
            let mut epoch_loss = 0.0;
            let mut counted = 0usize;
            for chunk in order.chunks(hp.batch_size) {
                let mut g = head.zeros_like();
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let (x, t) = &train[i];
                    let (out, cache) = head.forward(x, &anchors)?;
                    let (br, mut d) = match tal_loss_with_grad(&out, t, loss) {
                        Ok(v) => v,
                        Err(Error::EmptyLoss) => continue,
                        Err(e) => return Err(e),
                    };
                    for v in d.logits.iter_mut().chain(d.offsets.iter_mut()) {
                        *v *= scale;
                    }
                    head.backward(x, &anchors, &cache, &d, &mut g);
                    epoch_loss += br.total;
                    counted += 1;
                }
                if !epoch_loss.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
                opt.step(&mut head, &g, lr);
                if !head.all_finite() {
                    diverged = true;
                    break 'epochs;
                }
            }
            let mean = epoch_loss / counted.max(1) as f64;
            final_loss = Some(mean);
            log.push(json!({"stage": "stage3", "lr": lr, "epoch": epoch, "loss": mean}));
        }
        let average_map = if diverged {
            None
        } else {
            let preds = predict(&head, &val_x, &anchors, dataset, plan)?;
            Some(evaluate(&preds, &val_gts, eval)?.average_map)
        };
        log.push(json!({"stage": "stage3", "lr": lr, "average_map": average_map, "diverged": diverged}));
        table.push(LrResult {
            lr,
            average_map,
            final_loss: if diverged { None } else { final_loss },
        });
        heads.push(head);
    }
    let Some(best) = select_lr(&table) else {
        return Err(Error::AllLearningRatesDiverged {
            table: table.iter().map(|r| (r.lr, r.average_map)).collect(),
        });
    };
    let head = heads.swap_remove(best);
    let raw = predict(&head, &val_x, &anchors, dataset, plan)?;
    let predictions = postprocess(&raw, eval);
    let report = crate::eval::metric_report(&predictions, &val_gts, &crate::eval::iou_grid())?;
    Ok(Stage3Outcome {
        head,
        chosen_lr: table[best].lr,
        table,
        report,
        predictions,
        log,
        encoder_checksum_before: before,
        encoder_checksum_after: encoder.checksum(),
    })
}
