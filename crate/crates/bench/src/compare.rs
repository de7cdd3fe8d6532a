//! Side-by-side runs of scheduler and policy variants on one trace.

use std::collections::BTreeMap;
use std::path::Path;

use call_core::cache::PolicyKind;
use call_core::engine::SchedulerMode;
use call_core::loader::LoadOrdering;
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, PeriodicSetting};
use crate::error::{BenchError, Result};
use crate::report::{write_json, Percentiles, Report};
use crate::run::{load_artifacts, run_with, Artifacts};

pub const COMPARE_FILE: &str = "compare.json";

/// Names accepted in the `variants` key.
pub const VARIANTS: &[&str] = &["call", "call_rr", "call_noprefetch", "fifo", "lru", "clru", "wlru"];

/// The configuration of a named variant, derived from `base`.
///
/// `call*` variants keep the configured cache policy. The baseline variants
/// use arrival order and round-robin loading; `clru` and `wlru` add the
/// periodic prefetcher that goes with their policy.
pub fn variant_config(base: &BenchConfig, name: &str) -> Result<BenchConfig> {
    let mut cfg = base.clone();
    let baseline = |cfg: &mut BenchConfig, policy, periodic| {
        cfg.scheduler = SchedulerMode::BaselineFifoOrder;
        cfg.policy = policy;
        cfg.load_ordering = None;
        cfg.periodic_prefetch = periodic;
    };
    match name {
        "call" => {
            cfg.scheduler = SchedulerMode::Call;
            cfg.prefetch = true;
        }
        "call_rr" => {
            cfg.scheduler = SchedulerMode::Call;
            cfg.prefetch = true;
            cfg.load_ordering = Some(LoadOrdering::RoundRobin);
        }
        "call_noprefetch" => {
            cfg.scheduler = SchedulerMode::Call;
            cfg.prefetch = false;
        }
        "fifo" => baseline(&mut cfg, PolicyKind::Fifo, PeriodicSetting::Off),
        "lru" => baseline(&mut cfg, PolicyKind::Lru, PeriodicSetting::Off),
        "clru" => baseline(&mut cfg, PolicyKind::Clru, PeriodicSetting::Auto),
        "wlru" => baseline(&mut cfg, PolicyKind::Wlru, PeriodicSetting::Auto),
        other => {
            return Err(BenchError::Config(format!(
                "unknown variant {other:?}; expected one of {}",
                VARIANTS.join(", ")
            )))
        }
    }
    if !matches!(name, "call" | "call_rr" | "call_noprefetch") {
        cfg.prefetch = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub hit_ratio: f64,
    pub search_latency: Percentiles,
    pub total_latency: Percentiles,
    /// Latencies divided by the baseline variant's.
    pub normalized_search_latency: Percentiles,
    pub normalized_total_latency: Percentiles,
    pub bytes_read_total: u64,
    pub head_hit_rate: Option<f64>,
    pub mean_load_makespan: f64,
    pub prefetches_issued: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_variant: String,
    pub normalization: String,
    pub variants: Vec<VariantSummary>,
    #[serde(skip)]
    pub reports: BTreeMap<String, Report>,
}

impl Comparison {
    pub fn get(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }
}

pub fn compare_with(cfg: &BenchConfig, artifacts: &Artifacts, out_dir: &Path) -> Result<Comparison> {
    let mut names = cfg.variants.clone();
    if !names.contains(&cfg.baseline_variant) {
        names.push(cfg.baseline_variant.clone());
    }
    let mut reports = BTreeMap::new();
    for name in &names {
        let vcfg = variant_config(cfg, name)?;
        log::info!("running variant {name}");
        let report = run_with(&vcfg, name, artifacts, &out_dir.join(name))?;
        reports.insert(name.clone(), report);
    }
    let base = &reports[&cfg.baseline_variant];
    let variants = names
        .iter()
        .map(|name| {
            let r = &reports[name];
            VariantSummary {
                variant: name.clone(),
                hit_ratio: r.hit_ratio,
                search_latency: r.search_latency,
                total_latency: r.total_latency,
                normalized_search_latency: r.search_latency.ratio(&base.search_latency),
                normalized_total_latency: r.total_latency.ratio(&base.total_latency),
                bytes_read_total: r.bytes_read_total,
                head_hit_rate: r.head_hit_rate,
                mean_load_makespan: r.load.makespan.mean,
                prefetches_issued: r.prefetches_issued,
            }
        })
        .collect();
    let cmp = Comparison {
        baseline_variant: cfg.baseline_variant.clone(),
        normalization: format!(
            "latencies divided by the {} run over the same trace",
            cfg.baseline_variant
        ),
        variants,
        reports,
    };
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(COMPARE_FILE), &cmp)?;
    Ok(cmp)
}

pub fn cmd_compare(cfg: &BenchConfig) -> Result<Comparison> {
    let artifacts = load_artifacts(cfg)?;
    compare_with(cfg, &artifacts, &cfg.output_dir)
}
