//! Flat `key = value` configuration.
//!
//! Files hold one pair per line; `#` starts a comment. Unknown keys and
//! unparsable values are config errors. `--set key=value` overrides are
//! applied after the file, in order.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use call_core::cache::{CachePolicy, Capacity, PolicyKind};
use call_core::embedding::Metric;
use call_core::engine::{
    ClockMode, EngineConfig, PeriodicPrefetch, PeriodicRanking, SchedulerMode, VirtualCosts,
};
use call_core::grouping::SimilarityKernel;
use call_core::loader::{CostModel, LoadOrdering};
use call_core::prefetch::PrefetchTrigger;
use call_core::workload::{CorpusParams, OverlapProfile, TrafficConfig};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockKind {
    Virtual,
    Real,
}

/// Periodic baseline prefetch setting. `Auto` picks the ranking that goes
/// with the cache policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeriodicSetting {
    Off,
    Auto,
    Ranking(PeriodicRanking),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub clusters: usize,
    pub nprobe: usize,
    pub dim: usize,
    pub top_k: usize,
    pub metric: Metric,
    pub kmeans_iterations: usize,

    pub corpus_size: usize,
    pub topics: usize,
    pub spread: f64,
    pub repeat_prob: f64,
    pub repeat_noise: f64,
    pub repeat_horizon: usize,

    pub capacity: usize,
    /// Byte budget; when non-zero it replaces the entry count.
    pub capacity_bytes: u64,
    pub policy: PolicyKind,
    pub window_length: f64,
    pub window_top_n: usize,

    pub theta: f64,
    pub kernel: SimilarityKernel,
    pub threads: usize,
    /// `None` lets the scheduler choose.
    pub load_ordering: Option<LoadOrdering>,
    pub scheduler: SchedulerMode,
    pub prefetch: bool,
    pub prefetch_trigger: PrefetchTrigger,
    pub await_timeout: f64,
    pub periodic_prefetch: PeriodicSetting,
    pub periodic_degree: usize,
    pub periodic_period: f64,
    pub search_threads: usize,

    pub clock: ClockKind,
    /// Seconds of arrivals collected into one batch.
    pub buffer_window: f64,
    pub direct_io: bool,
    pub io_throughput: f64,
    pub io_file_overhead: f64,
    pub lookup_cost: f64,
    pub build_cost: f64,
    pub distance_cost: f64,
    pub group_pair_cost: f64,

    pub traffic: TrafficConfig,
    pub warmup: f64,
    pub seed: u64,

    pub corpus_path: PathBuf,
    pub index_dir: PathBuf,
    pub trace_dir: PathBuf,
    pub output_dir: PathBuf,

    pub variants: Vec<String>,
    pub baseline_variant: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let overlap = OverlapProfile::default();
        let corpus = CorpusParams::default();
        let costs = VirtualCosts::default();
        let policy = CachePolicy::default();
        BenchConfig {
            clusters: 100,
            nprobe: 30,
            dim: corpus.dim,
            top_k: 10,
            metric: Metric::L2,
            kmeans_iterations: 25,
            corpus_size: corpus.n,
            topics: corpus.topics,
            spread: corpus.spread,
            repeat_prob: overlap.structural_repeat_prob,
            repeat_noise: overlap.noise,
            repeat_horizon: overlap.repeat_horizon,
            capacity: 50,
            capacity_bytes: 0,
            policy: PolicyKind::Lru,
            window_length: policy.window_length,
            window_top_n: policy.window_top_n,
            theta: 0.5,
            kernel: SimilarityKernel::Bitmap,
            threads: 8,
            load_ordering: None,
            scheduler: SchedulerMode::Call,
            prefetch: true,
            prefetch_trigger: PrefetchTrigger::Dispatch,
            await_timeout: 5.0,
            periodic_prefetch: PeriodicSetting::Off,
            periodic_degree: 20,
            periodic_period: 60.0,
            search_threads: 1,
            clock: ClockKind::Virtual,
            buffer_window: 3.0,
            direct_io: false,
            io_throughput: costs.io.throughput,
            io_file_overhead: costs.io.per_file_overhead,
            lookup_cost: costs.lookup_per_cluster,
            build_cost: costs.build_per_vector,
            distance_cost: costs.distance_per_dim,
            group_pair_cost: costs.group_per_pair,
            traffic: TrafficConfig::default(),
            warmup: 60.0,
            seed: 1,
            corpus_path: PathBuf::from("data/corpus.emb"),
            index_dir: PathBuf::from("data/index"),
            trace_dir: PathBuf::from("data/trace"),
            output_dir: PathBuf::from("out"),
            variants: ["call", "clru", "wlru", "fifo", "lru", "call_rr"]
                .map(String::from)
                .to_vec(),
            baseline_variant: "fifo".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| BenchError::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(BenchError::Config(format!("{key} = {value:?}: expected a boolean"))),
    }
}

fn kernel_name(k: SimilarityKernel) -> &'static str {
    match k {
        SimilarityKernel::Bitmap => "bitmap",
        SimilarityKernel::HashSet => "hash",
    }
}

fn ranking_name(r: PeriodicRanking) -> &'static str {
    match r {
        PeriodicRanking::Frequency => "frequency",
        PeriodicRanking::LoadCost => "load_cost",
    }
}

impl BenchConfig {
    /// Defaults overlaid with an optional file and then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = BenchConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "clusters" => self.clusters = parse(key, value)?,
            "nprobe" => self.nprobe = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "metric" => self.metric = parse(key, value)?,
            "kmeans_iterations" => self.kmeans_iterations = parse(key, value)?,
            "corpus_size" => self.corpus_size = parse(key, value)?,
            "topics" => self.topics = parse(key, value)?,
            "spread" => self.spread = parse(key, value)?,
            "repeat_prob" => self.repeat_prob = parse(key, value)?,
            "repeat_noise" => self.repeat_noise = parse(key, value)?,
            "repeat_horizon" => self.repeat_horizon = parse(key, value)?,
            "capacity" => self.capacity = parse(key, value)?,
            "capacity_bytes" => self.capacity_bytes = parse(key, value)?,
            "policy" => self.policy = parse(key, value)?,
            "window_length" => self.window_length = parse(key, value)?,
            "window_top_n" => self.window_top_n = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "load_ordering" => {
                self.load_ordering = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "scheduler" => self.scheduler = parse(key, value)?,
            "prefetch" => self.prefetch = parse_bool(key, value)?,
            "prefetch_trigger" => self.prefetch_trigger = parse(key, value)?,
            "await_timeout" => self.await_timeout = parse(key, value)?,
            "periodic_prefetch" => {
                self.periodic_prefetch = match value {
                    "off" => PeriodicSetting::Off,
                    "auto" => PeriodicSetting::Auto,
                    "frequency" => PeriodicSetting::Ranking(PeriodicRanking::Frequency),
                    "load_cost" => PeriodicSetting::Ranking(PeriodicRanking::LoadCost),
                    _ => {
                        return Err(BenchError::Config(format!(
                            "periodic_prefetch = {value:?}: expected off, auto, frequency or load_cost"
                        )))
                    }
                }
            }
            "periodic_degree" => self.periodic_degree = parse(key, value)?,
            "periodic_period" => self.periodic_period = parse(key, value)?,
            "search_threads" => self.search_threads = parse(key, value)?,
            "clock" => {
                self.clock = match value {
                    "virtual" => ClockKind::Virtual,
                    "real" => ClockKind::Real,
                    _ => return Err(BenchError::Config(format!("clock = {value:?}: expected virtual or real"))),
                }
            }
            "buffer_window" => self.buffer_window = parse(key, value)?,
            "direct_io" => self.direct_io = parse_bool(key, value)?,
            "io_throughput" => self.io_throughput = parse(key, value)?,
            "io_file_overhead" => self.io_file_overhead = parse(key, value)?,
            "lookup_cost" => self.lookup_cost = parse(key, value)?,
            "build_cost" => self.build_cost = parse(key, value)?,
            "distance_cost" => self.distance_cost = parse(key, value)?,
            "group_pair_cost" => self.group_pair_cost = parse(key, value)?,
            "base_rate" => self.traffic.base_rate = parse(key, value)?,
            "burst_probability" => self.traffic.burst_probability = parse(key, value)?,
            "burst_multiplier" => self.traffic.burst_multiplier = parse(key, value)?,
            "burst_interval" => self.traffic.interval = parse(key, value)?,
            "weibull_shape" => self.traffic.weibull_shape = parse(key, value)?,
            "burst_min" => self.traffic.burst_min = parse(key, value)?,
            "burst_max" => self.traffic.burst_max = parse(key, value)?,
            "duration" => self.traffic.duration = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "corpus_path" => self.corpus_path = value.into(),
            "index_dir" => self.index_dir = value.into(),
            "trace_dir" => self.trace_dir = value.into(),
            "output_dir" => self.output_dir = value.into(),
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "baseline_variant" => self.baseline_variant = value.to_string(),
            _ => return Err(BenchError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.traffic;
        let path = |p: &Path| p.display().to_string();
        vec![
            ("clusters", self.clusters.to_string()),
            ("nprobe", self.nprobe.to_string()),
            ("dim", self.dim.to_string()),
            ("top_k", self.top_k.to_string()),
            ("metric", match self.metric {
                Metric::L2 => "l2".into(),
                Metric::InnerProduct => "ip".into(),
            }),
            ("kmeans_iterations", self.kmeans_iterations.to_string()),
            ("corpus_size", self.corpus_size.to_string()),
            ("topics", self.topics.to_string()),
            ("spread", self.spread.to_string()),
            ("repeat_prob", self.repeat_prob.to_string()),
            ("repeat_noise", self.repeat_noise.to_string()),
            ("repeat_horizon", self.repeat_horizon.to_string()),
            ("capacity", self.capacity.to_string()),
            ("capacity_bytes", self.capacity_bytes.to_string()),
            ("policy", self.policy.name().into()),
            ("window_length", self.window_length.to_string()),
            ("window_top_n", self.window_top_n.to_string()),
            ("theta", self.theta.to_string()),
            ("kernel", kernel_name(self.kernel).into()),
            ("threads", self.threads.to_string()),
            ("load_ordering", match self.load_ordering {
                None => "auto".into(),
                Some(LoadOrdering::Greedy) => "greedy".into(),
                Some(LoadOrdering::RoundRobin) => "round_robin".into(),
            }),
            ("scheduler", self.scheduler.name().into()),
            ("prefetch", self.prefetch.to_string()),
            ("prefetch_trigger", match self.prefetch_trigger {
                PrefetchTrigger::Dispatch => "dispatch".into(),
                PrefetchTrigger::Completion => "completion".into(),
            }),
            ("await_timeout", self.await_timeout.to_string()),
            ("periodic_prefetch", match self.periodic_prefetch {
                PeriodicSetting::Off => "off".into(),
                PeriodicSetting::Auto => "auto".into(),
                PeriodicSetting::Ranking(r) => ranking_name(r).into(),
            }),
            ("periodic_degree", self.periodic_degree.to_string()),
            ("periodic_period", self.periodic_period.to_string()),
            ("search_threads", self.search_threads.to_string()),
            ("clock", match self.clock {
                ClockKind::Virtual => "virtual".into(),
                ClockKind::Real => "real".into(),
            }),
            ("buffer_window", self.buffer_window.to_string()),
            ("direct_io", self.direct_io.to_string()),
            ("io_throughput", self.io_throughput.to_string()),
            ("io_file_overhead", self.io_file_overhead.to_string()),
            ("lookup_cost", self.lookup_cost.to_string()),
            ("build_cost", self.build_cost.to_string()),
            ("distance_cost", self.distance_cost.to_string()),
            ("group_pair_cost", self.group_pair_cost.to_string()),
            ("base_rate", t.base_rate.to_string()),
            ("burst_probability", t.burst_probability.to_string()),
            ("burst_multiplier", t.burst_multiplier.to_string()),
            ("burst_interval", t.interval.to_string()),
            ("weibull_shape", t.weibull_shape.to_string()),
            ("burst_min", t.burst_min.to_string()),
            ("burst_max", t.burst_max.to_string()),
            ("duration", t.duration.to_string()),
            ("warmup", self.warmup.to_string()),
            ("seed", self.seed.to_string()),
            ("corpus_path", path(&self.corpus_path)),
            ("index_dir", path(&self.index_dir)),
            ("trace_dir", path(&self.trace_dir)),
            ("output_dir", path(&self.output_dir)),
            ("variants", self.variants.join(",")),
            ("baseline_variant", self.baseline_variant.clone()),
        ]
    }

    /// The configuration as file text that `apply_text` reads back.
    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.clusters == 0 || self.nprobe == 0 || self.dim == 0 || self.top_k == 0 {
            return bad("clusters, nprobe, dim and top_k must be positive");
        }
        if self.capacity == 0 && self.capacity_bytes == 0 {
            return bad("capacity must be positive");
        }
        if !(self.buffer_window > 0.0) {
            return bad("buffer_window must be positive");
        }
        if !(self.warmup >= 0.0) {
            return bad("warmup must be non-negative");
        }
        if !(self.io_throughput > 0.0) || !(self.io_file_overhead >= 0.0) {
            return bad("io_throughput must be positive and io_file_overhead non-negative");
        }
        let costs = [self.lookup_cost, self.build_cost, self.distance_cost, self.group_pair_cost];
        if costs.iter().any(|c| !(*c >= 0.0)) {
            return bad("virtual costs must be non-negative");
        }
        if self.policy == PolicyKind::Wlru && self.capacity > 0 && self.window_top_n > self.capacity {
            return bad("window_top_n must not exceed capacity");
        }
        if self.variants.is_empty() {
            return bad("variants must name at least one variant");
        }
        self.traffic.validate()?;
        self.engine_config().validate()?;
        Ok(())
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            n: self.corpus_size,
            dim: self.dim,
            topics: self.topics,
            spread: self.spread,
            seed: self.seed,
        }
    }

    pub fn overlap_profile(&self) -> OverlapProfile {
        OverlapProfile {
            structural_repeat_prob: self.repeat_prob,
            noise: self.repeat_noise,
            repeat_horizon: self.repeat_horizon,
        }
    }

    pub fn traffic_config(&self) -> TrafficConfig {
        TrafficConfig {
            seed: self.seed.wrapping_add(2),
            ..self.traffic
        }
    }

    pub fn query_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn cache_capacity(&self) -> Capacity {
        if self.capacity_bytes > 0 {
            Capacity::Bytes(self.capacity_bytes)
        } else {
            Capacity::Entries(self.capacity)
        }
    }

    pub fn cache_policy(&self) -> CachePolicy {
        CachePolicy {
            kind: self.policy,
            window_length: self.window_length,
            window_top_n: self.window_top_n,
        }
    }

    pub fn virtual_costs(&self) -> VirtualCosts {
        VirtualCosts {
            io: CostModel {
                throughput: self.io_throughput,
                per_file_overhead: self.io_file_overhead,
            },
            lookup_per_cluster: self.lookup_cost,
            build_per_vector: self.build_cost,
            distance_per_dim: self.distance_cost,
            group_per_pair: self.group_pair_cost,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        let periodic = match self.periodic_prefetch {
            PeriodicSetting::Off => None,
            PeriodicSetting::Auto => Some(PeriodicPrefetch::for_policy(self.policy).ranking),
            PeriodicSetting::Ranking(r) => Some(r),
        };
        EngineConfig {
            metric: self.metric,
            threads: self.threads,
            theta: self.theta,
            kernel: self.kernel,
            scheduler: self.scheduler,
            prefetch: self.prefetch,
            prefetch_trigger: self.prefetch_trigger,
            await_timeout: self.await_timeout,
            load_ordering: self.load_ordering,
            periodic_prefetch: periodic.map(|ranking| PeriodicPrefetch {
                ranking,
                degree: self.periodic_degree,
                period: self.periodic_period,
            }),
            search_threads: self.search_threads,
            clock: match self.clock {
                ClockKind::Virtual => ClockMode::Virtual(self.virtual_costs()),
                ClockKind::Real => ClockMode::Real,
            },
        }
    }
}
