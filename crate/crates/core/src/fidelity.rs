//! Mini-batch fidelity configurations, the cyclic fidelity scheduler and the
//! activation-memory cost model.
//!
//! A configuration is the triple `L × H × W` (snippets, frame height, frame
//! width). The three low-fidelity kinds trade temporal against spatial
//! resolution so that the per-video pixel volume stays near a quarter of the
//! full configuration, which lets the batch size stay fixed across a cycle.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::anchors::anchor_count;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityKind {
    Full,
    Spatial,
    Temporal,
    Spatiotemporal,
}

impl FidelityKind {
    pub fn short_name(self) -> &'static str {
        match self {
            FidelityKind::Full => "Full",
            FidelityKind::Spatial => "S",
            FidelityKind::Temporal => "T",
            FidelityKind::Spatiotemporal => "ST",
        }
    }
}

impl fmt::Display for FidelityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FidelityKind::Full => "full",
            FidelityKind::Spatial => "spatial",
            FidelityKind::Temporal => "temporal",
            FidelityKind::Spatiotemporal => "spatiotemporal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub l: usize,
    pub h: usize,
    pub w: usize,
    pub kind: FidelityKind,
    pub r_s: f64,
    pub r_t: f64,
}

impl FidelityConfig {
    pub fn full(l: usize, h: usize, w: usize) -> Result<Self> {
        if l == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "full configuration needs positive sizes, got ({l}, {h}, {w})"
            )));
        }
        Ok(Self {
            l,
            h,
            w,
            kind: FidelityKind::Full,
            r_s: 1.0,
            r_t: 1.0,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.l, self.h, self.w)
    }
}

impl fmt::Display for FidelityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} x {}x{})", self.kind, self.l, self.h, self.w)
    }
}

/// `round(size / factor)`, never below 1.
pub fn reduce(size: usize, factor: f64) -> usize {
    ((size as f64 / factor).round() as usize).max(1)
}

/// Derives a reduced configuration from the full one.
///
/// `spatial` needs `r_t = 1`, `temporal` needs `r_s = 1`, `full` needs both equal
/// to 1. Factors below 1 would upscale and are rejected.
pub fn derive_config(kind: FidelityKind, full: &FidelityConfig, r_s: f64, r_t: f64) -> Result<FidelityConfig> {
    if full.kind != FidelityKind::Full {
        return Err(Error::InvalidArgument(format!(
            "base configuration must be full fidelity, got {}",
            full.kind
        )));
    }
    if !(r_s.is_finite() && r_t.is_finite()) || r_s < 1.0 || r_t < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "reduction factors must be >= 1 (r_s = {r_s}, r_t = {r_t})"
        )));
    }
    let consistent = match kind {
        FidelityKind::Full => r_s == 1.0 && r_t == 1.0,
        FidelityKind::Spatial => r_t == 1.0,
        FidelityKind::Temporal => r_s == 1.0,
        FidelityKind::Spatiotemporal => true,
    };
    if !consistent {
        return Err(Error::InvalidArgument(format!(
            "{kind} configuration cannot use r_s = {r_s}, r_t = {r_t}"
        )));
    }
    Ok(FidelityConfig {
        l: reduce(full.l, r_t),
        h: reduce(full.h, r_s),
        w: reduce(full.w, r_s),
        kind,
        r_s,
        r_t,
    })
}

/// Reduction factors of the three low-fidelity configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LofiFactors {
    pub spatial_r_s: f64,
    pub temporal_r_t: f64,
    pub st_r_s: f64,
    pub st_r_t: f64,
}

impl Default for LofiFactors {
    fn default() -> Self {
        Self {
            spatial_r_s: 2.0,
            temporal_r_t: 4.0,
            st_r_s: std::f64::consts::SQRT_2,
            st_r_t: 2.0,
        }
    }
}

/// The spatial, temporal and spatio-temporal configurations, in cycle order.
pub fn lofi_configs(full: &FidelityConfig, factors: &LofiFactors) -> Result<[FidelityConfig; 3]> {
    Ok([
        derive_config(FidelityKind::Spatial, full, factors.spatial_r_s, 1.0)?,
        derive_config(FidelityKind::Temporal, full, 1.0, factors.temporal_r_t)?,
        derive_config(FidelityKind::Spatiotemporal, full, factors.st_r_s, factors.st_r_t)?,
    ])
}

/// `L · H · W`.
pub fn pixel_volume(config: &FidelityConfig) -> u64 {
    config.l as u64 * config.h as u64 * config.w as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Fixed,
    ShortCycle,
    LongCycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub mode: ScheduleMode,
    /// Batches per short-cycle step.
    pub c_s: usize,
    /// Epochs per long-cycle step.
    pub c_l: usize,
    /// Configuration used by the fixed mode.
    pub fixed_kind: FidelityKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::LongCycle,
            c_s: 16,
            c_l: 1,
            fixed_kind: FidelityKind::Temporal,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c_s == 0 || self.c_l == 0 {
            return Err(Error::InvalidArgument("c_s and c_l must be at least 1".into()));
        }
        if self.mode == ScheduleMode::Fixed && self.fixed_kind == FidelityKind::Full {
            return Err(Error::InvalidArgument(
                "full fidelity is never used for encoder training".into(),
            ));
        }
        Ok(())
    }

    /// Index into the `[S, T, ST]` cycle for global batch `batch` of epoch `epoch`.
    pub fn slot(&self, epoch: usize, batch: usize) -> usize {
        match self.mode {
            ScheduleMode::LongCycle => (epoch / self.c_l) % 3,
            ScheduleMode::ShortCycle => (batch / self.c_s) % 3,
            ScheduleMode::Fixed => match self.fixed_kind {
                FidelityKind::Spatial | FidelityKind::Full => 0,
                FidelityKind::Temporal => 1,
                FidelityKind::Spatiotemporal => 2,
            },
        }
    }
}

/// One configuration per batch, `epochs · batches_per_epoch` entries, indexed
/// by global batch number.
pub fn build_schedule(
    spec: &ScheduleSpec,
    configs: &[FidelityConfig; 3],
    epochs: usize,
    batches_per_epoch: usize,
) -> Result<Vec<FidelityConfig>> {
    spec.validate()?;
    if epochs == 0 || batches_per_epoch == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one epoch and one batch".into(),
        ));
    }
    if configs.iter().any(|c| c.kind == FidelityKind::Full) {
        return Err(Error::InvalidArgument(
            "schedules may only contain low-fidelity configurations".into(),
        ));
    }
    Ok((0..epochs * batches_per_epoch)
        .map(|b| configs[spec.slot(b / batches_per_epoch, b)])
        .collect())
}

/// Analytic activation-memory proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub bytes_per_element: f64,
    /// Encoder activation elements kept per input pixel, summed over layers.
    pub encoder_elements_per_pixel: f64,
    /// Head activation elements per anchor.
    pub head_elements_per_anchor: f64,
    pub optimizer_multiplier: f64,
    pub frames_per_snippet: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            bytes_per_element: 4.0,
            encoder_elements_per_pixel: 100.0,
            head_elements_per_anchor: 1024.0,
            optimizer_multiplier: 1.0,
            frames_per_snippet: 8,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.bytes_per_element,
            self.encoder_elements_per_pixel,
            self.head_elements_per_anchor,
            self.optimizer_multiplier,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0)
            && self.frames_per_snippet > 0;
        if all_positive {
            Ok(())
        } else {
            Err(Error::InvalidArgument("cost-model coefficients must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub encoder_bytes: f64,
    pub head_bytes: f64,
    pub total_bytes: f64,
}

pub fn estimate_peak_memory(config: &FidelityConfig, cost: &CostModel, batch: usize) -> MemoryEstimate {
    let b = batch as f64;
    let encoder = b
        * cost.encoder_elements_per_pixel
        * pixel_volume(config) as f64
        * cost.frames_per_snippet as f64
        * cost.bytes_per_element
        * cost.optimizer_multiplier;
    let head = b
        * cost.head_elements_per_anchor
        * anchor_count(config.l) as f64
        * cost.bytes_per_element
        * cost.optimizer_multiplier;
    MemoryEstimate {
        encoder_bytes: encoder,
        head_bytes: head,
        total_bytes: encoder + head,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetVerdict {
    pub feasible: bool,
    pub estimate_bytes: f64,
    pub slack_bytes: f64,
}

pub fn check_budget(config: &FidelityConfig, cost: &CostModel, batch: usize, budget_bytes: f64) -> BudgetVerdict {
    let estimate = estimate_peak_memory(config, cost, batch).total_bytes;
    BudgetVerdict {
        feasible: estimate <= budget_bytes,
        estimate_bytes: estimate,
        slack_bytes: budget_bytes - estimate,
    }
}

/// Four 32 GiB accelerators.
pub const DEFAULT_BUDGET_BYTES: f64 = 128.0 * 1024.0 * 1024.0 * 1024.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigPlan {
    pub config: FidelityConfig,
    pub pixel_volume: u64,
    pub parity_ratio: f64,
    pub estimate: MemoryEstimate,
    pub verdict: BudgetVerdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub batch: usize,
    pub budget_bytes: f64,
    pub cost_model: CostModel,
    pub configs: Vec<ConfigPlan>,
}

/// Full configuration followed by the three low-fidelity ones, each with its
/// estimate, budget verdict and pixel-volume ratio against full.
pub fn plan_memory(
    full: &FidelityConfig,
    factors: &LofiFactors,
    cost: &CostModel,
    batch: usize,
    budget_bytes: f64,
) -> Result<MemoryPlan> {
    cost.validate()?;
    let full_volume = pixel_volume(full) as f64;
    let mut configs = vec![*full];
    configs.extend(lofi_configs(full, factors)?);
    let configs = configs
        .into_iter()
        .map(|config| ConfigPlan {
            config,
            pixel_volume: pixel_volume(&config),
            parity_ratio: pixel_volume(&config) as f64 / full_volume,
            estimate: estimate_peak_memory(&config, cost, batch),
            verdict: check_budget(&config, cost, batch, budget_bytes),
        })
        .collect();
    Ok(MemoryPlan {
        batch,
        budget_bytes,
        cost_model: *cost,
        configs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_full() -> FidelityConfig {
        FidelityConfig::full(100, 224, 224).unwrap()
    }

    #[test]
    fn derived_configs_match_reported_sizes() {
        let full = paper_full();
        let s = derive_config(FidelityKind::Spatial, &full, 2.0, 1.0).unwrap();
        assert_eq!(s.dims(), (100, 112, 112));
        let t = derive_config(FidelityKind::Temporal, &full, 1.0, 4.0).unwrap();
        assert_eq!(t.dims(), (25, 224, 224));
        let st = derive_config(FidelityKind::Spatiotemporal, &full, 2f64.sqrt(), 2.0).unwrap();
        assert_eq!(st.dims(), (50, 158, 158));
        // Appendix-style single-device setting
        let low = derive_config(FidelityKind::Spatiotemporal, &full, 2.0, 4.0).unwrap();
        assert_eq!(low.dims(), (25, 112, 112));
    }

    #[test]
    fn upscaling_and_inconsistent_kinds_rejected() {
        let full = paper_full();
        assert!(derive_config(FidelityKind::Spatial, &full, 0.5, 1.0).is_err());
        assert!(derive_config(FidelityKind::Temporal, &full, 1.0, 0.9).is_err());
        assert!(derive_config(FidelityKind::Spatial, &full, 2.0, 2.0).is_err());
        assert!(derive_config(FidelityKind::Full, &full, 2.0, 1.0).is_err());
        assert!(derive_config(FidelityKind::Temporal, &full, 2.0, 4.0).is_err());
    }

    #[test]
    fn tiny_sizes_never_round_to_zero() {
        let full = FidelityConfig::full(2, 1, 1).unwrap();
        let c = derive_config(FidelityKind::Spatiotemporal, &full, 8.0, 8.0).unwrap();
        assert_eq!(c.dims(), (1, 1, 1));
    }

    #[test]
    fn pixel_volumes() {
        let full = paper_full();
        assert_eq!(pixel_volume(&full), 5_017_600);
        let [s, t, st] = lofi_configs(&full, &LofiFactors::default()).unwrap();
        assert_eq!(pixel_volume(&s), 1_254_400);
        assert_eq!(pixel_volume(&t), 1_254_400);
        assert_eq!(pixel_volume(&st), 1_248_200);
    }

    #[test]
    fn head_term_shrinks_with_anchor_count() {
        let full = paper_full();
        let t = derive_config(FidelityKind::Temporal, &full, 1.0, 4.0).unwrap();
        let cost = CostModel::default();
        let ef = estimate_peak_memory(&full, &cost, 1);
        let et = estimate_peak_memory(&t, &cost, 1);
        assert_eq!(ef.encoder_bytes / et.encoder_bytes, 4.0);
        let ratio = ef.head_bytes / et.head_bytes;
        assert!((ratio - 4851.0 / 276.0).abs() < 1e-12);
        assert!((ratio - 17.576).abs() < 1e-3);
    }

    #[test]
    fn zero_anchor_config_has_no_head_term() {
        let c = FidelityConfig::full(2, 8, 8).unwrap();
        assert_eq!(estimate_peak_memory(&c, &CostModel::default(), 4).head_bytes, 0.0);
    }

    #[test]
    fn doubling_batch_doubles_estimate() {
        let c = paper_full();
        let cost = CostModel::default();
        let one = estimate_peak_memory(&c, &cost, 3).total_bytes;
        let two = estimate_peak_memory(&c, &cost, 6).total_bytes;
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn budget_edges() {
        let c = paper_full();
        let cost = CostModel::default();
        let est = estimate_peak_memory(&c, &cost, 16).total_bytes;
        let v = check_budget(&c, &cost, 16, est);
        assert!(v.feasible);
        assert_eq!(v.slack_bytes, 0.0);
        assert!(!check_budget(&c, &cost, 1, 0.0).feasible);
    }

    #[test]
    fn default_budget_admits_lofi_only() {
        let plan = plan_memory(&paper_full(), &LofiFactors::default(), &CostModel::default(), 16, DEFAULT_BUDGET_BYTES).unwrap();
        assert!(!plan.configs[0].verdict.feasible);
        assert!(plan.configs[1..].iter().all(|c| c.verdict.feasible));
    }

    fn desk_configs() -> [FidelityConfig; 3] {
        lofi_configs(&paper_full(), &LofiFactors::default()).unwrap()
    }

    #[test]
    fn long_cycle_per_epoch() {
        let spec = ScheduleSpec {
            mode: ScheduleMode::LongCycle,
            c_l: 1,
            ..Default::default()
        };
        let sched = build_schedule(&spec, &desk_configs(), 6, 5).unwrap();
        assert_eq!(sched.len(), 30);
        let kinds: Vec<_> = sched.chunks(5).map(|e| {
            assert!(e.iter().all(|c| c.kind == e[0].kind));
            e[0].kind
        }).collect();
        use FidelityKind::*;
        assert_eq!(kinds, [Spatial, Temporal, Spatiotemporal, Spatial, Temporal, Spatiotemporal]);
    }

    #[test]
    fn long_cycle_with_longer_steps() {
        let spec = ScheduleSpec {
            mode: ScheduleMode::LongCycle,
            c_l: 2,
            ..Default::default()
        };
        let sched = build_schedule(&spec, &desk_configs(), 7, 1).unwrap();
        use FidelityKind::*;
        let kinds: Vec<_> = sched.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, [Spatial, Spatial, Temporal, Temporal, Spatiotemporal, Spatiotemporal, Spatial]);
    }

    #[test]
    fn short_cycle_switches_every_c_s_batches() {
        let spec = ScheduleSpec {
            mode: ScheduleMode::ShortCycle,
            c_s: 16,
            ..Default::default()
        };
        let sched = build_schedule(&spec, &desk_configs(), 1, 48).unwrap();
        use FidelityKind::*;
        assert!(sched[0..16].iter().all(|c| c.kind == Spatial));
        assert!(sched[16..32].iter().all(|c| c.kind == Temporal));
        assert!(sched[32..48].iter().all(|c| c.kind == Spatiotemporal));
    }

    #[test]
    fn fixed_mode_is_constant() {
        let spec = ScheduleSpec {
            mode: ScheduleMode::Fixed,
            fixed_kind: FidelityKind::Temporal,
            ..Default::default()
        };
        let sched = build_schedule(&spec, &desk_configs(), 3, 4).unwrap();
        assert!(sched.iter().all(|c| *c == desk_configs()[1]));
    }

    #[test]
    fn empty_or_full_schedules_rejected() {
        let spec = ScheduleSpec::default();
        assert!(build_schedule(&spec, &desk_configs(), 0, 4).is_err());
        let fixed_full = ScheduleSpec {
            mode: ScheduleMode::Fixed,
            fixed_kind: FidelityKind::Full,
            ..Default::default()
        };
        assert!(build_schedule(&fixed_full, &desk_configs(), 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn estimate_monotone(l in 1usize..150, h in 1usize..64, w in 1usize..64, b in 1usize..20, which in 0usize..4) {
            let cost = CostModel::default();
            let base = FidelityConfig::full(l, h, w).unwrap();
            let mut bigger = base;
            let mut bb = b;
            match which {
                0 => bigger.l += 1,
                1 => bigger.h += 1,
                2 => bigger.w += 1,
                _ => bb += 1,
            }
            prop_assert!(estimate_peak_memory(&bigger, &cost, bb).total_bytes >= estimate_peak_memory(&base, &cost, b).total_bytes);
        }

        #[test]
        fn schedule_entries_are_pure_in_index(mode in 0usize..3, c_s in 1usize..10, c_l in 1usize..4, e in 1usize..6, n in 1usize..12) {
            let spec = ScheduleSpec {
                mode: [ScheduleMode::Fixed, ScheduleMode::ShortCycle, ScheduleMode::LongCycle][mode],
                c_s,
                c_l,
                fixed_kind: FidelityKind::Spatiotemporal,
            };
            let configs = desk_configs();
            let sched = build_schedule(&spec, &configs, e, n).unwrap();
            prop_assert_eq!(sched.len(), e * n);
            for (i, c) in sched.iter().enumerate() {
                prop_assert!(c.kind != FidelityKind::Full);
                prop_assert_eq!(*c, configs[spec.slot(i / n, i)]);
            }
        }
    }
}
