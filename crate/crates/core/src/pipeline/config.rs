//! Experiment configuration: one TOML document, with dotted `key=value`
//! overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fidelity::{CostModel, LofiFactors, ScheduleSpec, DEFAULT_BUDGET_BYTES};
use crate::models::encoder::EncoderSpec;
use crate::models::head::HeadSpec;
use crate::models::loss::LossConfig;
use crate::snippets::SnippetPlan;
use crate::synthgen::SynthSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PretrainMode {
    /// Randomly initialized encoder.
    #[serde(rename = "icp")]
    Icp,
    /// Classification pre-training on the auxiliary clip set.
    #[serde(rename = "acp")]
    Acp,
    /// As `Acp`, then classification fine-tuning on clips of the target training videos.
    #[serde(rename = "acp+")]
    AcpPlus,
}

impl PretrainMode {
    pub fn label(self) -> &'static str {
        match self {
            PretrainMode::Icp => "ICP",
            PretrainMode::Acp => "ACP",
            PretrainMode::AcpPlus => "ACP+",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Clip classification training (pre-training and target fine-tuning).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierStage {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub snippets_per_clip: usize,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            snippets_per_clip: 4,
        }
    }
}

/// Joint encoder and head training at low fidelity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageHyperparams {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
}

impl Default for StageHyperparams {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 0.1,
            lr_decay: 0.5,
            decay_every: 5,
            weight_decay: 1e-4,
            momentum: 0.0,
            epochs: 15,
        }
    }
}

impl StageHyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.lr > 0.0
            && self.lr_decay > 0.0
            && self.decay_every > 0
            && self.weight_decay >= 0.0
            && self.epochs > 0;
        if !positive {
            return Err(Error::Config("stage2: batch size, lr, decay and epochs must be positive".into()));
        }
        if self.momentum != 0.0 {
            return Err(Error::Config("stage2: momentum must be 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.lr, self.lr_decay, self.decay_every, epoch)
    }
}

/// `lr0 · decay^⌊epoch / every⌋`
pub fn step_lr(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / every) as i32)
}

/// Head training on frozen full-fidelity features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadStage {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for HeadStage {
    fn default() -> Self {
        Self {
            lr_grid: vec![0.0002, 0.0005, 0.001, 0.002, 0.005],
            epochs: 20,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            weight_decay: 1e-4,
            momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelitySection {
    /// Snippets per video at full fidelity; frame size comes from the dataset.
    pub full_l: usize,
    pub factors: LofiFactors,
    pub schedule: ScheduleSpec,
    pub cost: CostModel,
    /// Batch size used for memory planning (the paper-scale value).
    pub plan_batch: usize,
    pub budget_gib: f64,
}

impl Default for FidelitySection {
    fn default() -> Self {
        Self {
            full_l: 100,
            factors: LofiFactors::default(),
            schedule: ScheduleSpec::default(),
            cost: CostModel::default(),
            plan_batch: 16,
            budget_gib: DEFAULT_BUDGET_BYTES / (1u64 << 30) as f64,
        }
    }
}

impl FidelitySection {
    pub fn budget_bytes(&self) -> f64 {
        self.budget_gib * (1u64 << 30) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            head: HeadSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub pretrain: PretrainMode,
    /// Run the low-fidelity joint stage.
    pub lofi: bool,
    /// Start the final head from the joint stage's head instead of from scratch.
    pub carry_head: bool,
    /// One video in `val_modulus` (by id hash) is held out for validation.
    pub val_modulus: u64,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            pretrain: PretrainMode::Acp,
            lofi: true,
            carry_head: false,
            val_modulus: 4,
        }
    }
}

impl PlanSection {
    pub fn label(&self, schedule: &ScheduleSpec) -> String {
        if !self.lofi {
            return self.pretrain.label().to_string();
        }
        use crate::fidelity::ScheduleMode::*;
        let variant = match schedule.mode {
            LongCycle => "C-LoFi long".to_string(),
            ShortCycle => "C-LoFi short".to_string(),
            Fixed => format!("{}-LoFi", schedule.fixed_kind.short_name()),
        };
        match self.pretrain {
            PretrainMode::Acp => variant,
            other => format!("{variant} ({})", other.label()),
        }
    }
}

fn aux_default() -> SynthSpec {
    SynthSpec {
        num_videos: 24,
        seed: 1_000_003,
        id_prefix: "aux".into(),
        min_instances: 2,
        ..SynthSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Load the target dataset from this directory instead of generating it.
    pub dataset_path: Option<PathBuf>,
    pub dataset: SynthSpec,
    /// Stand-in for a large action-classification corpus.
    pub aux_dataset: SynthSpec,
    pub snippets: SnippetPlan,
    pub model: ModelSection,
    pub fidelity: FidelitySection,
    pub loss: LossConfig,
    pub plan: PlanSection,
    pub stage1: ClassifierStage,
    pub finetune: ClassifierStage,
    pub stage2: StageHyperparams,
    pub stage3: HeadStage,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_path: None,
            dataset: SynthSpec::default(),
            aux_dataset: aux_default(),
            snippets: SnippetPlan::default(),
            model: ModelSection::default(),
            fidelity: FidelitySection::default(),
            loss: LossConfig::default(),
            plan: PlanSection::default(),
            stage1: ClassifierStage {
                epochs: 30,
                ..ClassifierStage::default()
            },
            finetune: ClassifierStage {
                epochs: 4,
                lr: 0.02,
                ..ClassifierStage::default()
            },
            stage2: StageHyperparams {
                batch_size: 4,
                ..StageHyperparams::default()
            },
            // one video per update; larger batches leave the small grid rates undertrained
            stage3: HeadStage {
                epochs: 40,
                batch_size: 1,
                ..HeadStage::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Base document (file or defaults) with `key=value` overrides applied.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_table(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.snippets.validate().map_err(wrap)?;
        self.dataset.validate(self.snippets.window).map_err(wrap)?;
        if self.plan.pretrain != PretrainMode::Icp {
            self.aux_dataset.validate(self.snippets.window).map_err(wrap)?;
            if self.aux_dataset.num_classes != self.dataset.num_classes {
                // the classifier is discarded, but mismatched label spaces are almost always a typo
                return Err(Error::Config("aux_dataset.num_classes must match dataset.num_classes".into()));
            }
        }
        self.model.encoder.validate().map_err(wrap)?;
        if self.model.head.hidden == 0 {
            return Err(Error::Config("model.head.hidden must be positive".into()));
        }
        self.fidelity.schedule.validate().map_err(wrap)?;
        self.fidelity.cost.validate().map_err(wrap)?;
        if self.fidelity.full_l < 3 {
            return Err(Error::Config("fidelity.full_l must be at least 3".into()));
        }
        self.stage2.validate()?;
        for (name, s) in [("stage1", &self.stage1), ("finetune", &self.finetune)] {
            if s.batch_size == 0 || s.snippets_per_clip == 0 || !(s.lr > 0.0) {
                return Err(Error::Config(format!("{name}: batch size, snippets per clip and lr must be positive")));
            }
        }
        if self.stage3.lr_grid.is_empty() {
            return Err(Error::Config("stage3.lr_grid must not be empty".into()));
        }
        if self.stage3.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("stage3.lr_grid entries must be positive".into()));
        }
        if self.stage3.batch_size == 0 || self.stage3.epochs == 0 {
            return Err(Error::Config("stage3: batch size and epochs must be positive".into()));
        }
        if self.plan.val_modulus < 2 {
            return Err(Error::Config("plan.val_modulus must be at least 2".into()));
        }
        Ok(())
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(e.message().to_string()))
}

/// Sets `a.b.c = value`, creating intermediate tables. The value is read as a
/// TOML literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{spec}': '{part}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
