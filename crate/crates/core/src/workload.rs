//! Synthetic corpora, query streams and bursty arrival traces.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Weibull};
use serde::{Deserialize, Serialize};

use crate::embedding::{read_embeddings, write_embeddings, VectorSet};
use crate::error::{Error, Result};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const QUERIES_FILE: &str = "queries.emb";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    /// Queries per second outside bursts.
    pub base_rate: f64,
    /// Chance of a burst starting at each interval boundary.
    pub burst_probability: f64,
    pub burst_multiplier: f64,
    /// Seconds between burst coin flips.
    pub interval: f64,
    pub weibull_shape: f64,
    /// Burst length is uniform in `[burst_min, burst_max]` seconds.
    pub burst_min: f64,
    pub burst_max: f64,
    pub duration: f64,
    pub seed: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            base_rate: 100.0,
            burst_probability: 0.1,
            burst_multiplier: 3.0,
            interval: 1.0,
            weibull_shape: 1.0,
            burst_min: 1.0,
            burst_max: 5.0,
            duration: 300.0,
            seed: 0,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.base_rate,
            self.burst_probability,
            self.burst_multiplier,
            self.interval,
            self.weibull_shape,
            self.burst_min,
            self.burst_max,
            self.duration,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("traffic parameters must be finite"));
        }
        if self.duration <= 0.0 {
            return Err(Error::invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if self.base_rate <= 0.0 {
            return Err(Error::invalid("base_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.burst_probability) {
            return Err(Error::invalid("burst_probability must be in [0, 1]"));
        }
        if self.burst_multiplier < 1.0 {
            return Err(Error::invalid("burst_multiplier must be at least 1"));
        }
        if self.interval <= 0.0 || self.weibull_shape <= 0.0 {
            return Err(Error::invalid("interval and weibull_shape must be positive"));
        }
        if self.burst_min < 0.0 || self.burst_max < self.burst_min {
            return Err(Error::invalid("burst length range is empty"));
        }
        Ok(())
    }
}

/// Weibull inter-arrival distribution with mean `1 / rate`.
pub fn interarrival(rate: f64, shape: f64) -> Result<Weibull<f64>> {
    let scale = 1.0 / (rate * libm::tgamma(1.0 + 1.0 / shape));
    Weibull::new(scale, shape).map_err(|e| Error::invalid(format!("weibull({scale}, {shape}): {e}")))
}

/// Arrival times in `[0, duration)`, non-decreasing.
pub fn gen_traffic(cfg: &TrafficConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let normal = interarrival(cfg.base_rate, cfg.weibull_shape)?;
    let burst = interarrival(cfg.base_rate * cfg.burst_multiplier, cfg.weibull_shape)?;
    let mut gaps = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coins = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut out = Vec::new();
    let mut t = 0.0;
    let mut next_flip = 0.0;
    let mut burst_until = f64::NEG_INFINITY;
    loop {
        while next_flip <= t {
            if next_flip >= burst_until && coins.random::<f64>() < cfg.burst_probability {
                burst_until = next_flip + coins.random_range(cfg.burst_min..=cfg.burst_max);
            }
            next_flip += cfg.interval;
        }
        let gap = if t < burst_until {
            burst.sample(&mut gaps)
        } else {
            normal.sample(&mut gaps)
        };
        t += gap;
        if t >= cfg.duration {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n: usize,
    pub dim: usize,
    pub topics: usize,
    /// Standard deviation of points around their topic center.
    pub spread: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            n: 10_000,
            dim: 64,
            topics: 100,
            spread: 0.3,
            seed: 0,
        }
    }
}

impl CorpusParams {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 || self.topics == 0 {
            return Err(Error::invalid("corpus n, dim and topics must be positive"));
        }
        if !self.spread.is_finite() || self.spread < 0.0 {
            return Err(Error::invalid("spread must be finite and non-negative"));
        }
        Ok(())
    }

    /// Topic centers, uniform in `[-1, 1]^dim`.
    pub fn centers(&self) -> Result<VectorSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let data = (0..self.topics * self.dim)
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect();
        VectorSet::from_flat(self.dim, data)
    }
}

fn gaussian(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::invalid(format!("normal(0, {std}): {e}")))
}

fn around(center: &[f32], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    center
        .iter()
        .map(|c| (*c as f64 + noise.sample(rng)) as f32)
        .collect()
}

/// Gaussian mixture corpus; deterministic per seed.
pub fn synth_corpus(params: &CorpusParams) -> Result<VectorSet> {
    let centers = params.centers()?;
    let noise = gaussian(params.spread)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));
    let mut out = VectorSet::new(params.dim);
    for _ in 0..params.n {
        let topic = rng.random_range(0..params.topics);
        out.push(&around(centers.row(topic), &noise, &mut rng))?;
    }
    Ok(out)
}

/// Shape of the query stream's locality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapProfile {
    /// Chance a query is a noisy copy of an earlier one.
    pub structural_repeat_prob: f64,
    /// Standard deviation added to a repeated query.
    pub noise: f64,
    /// How many previous queries a repeat may copy from; 0 means all.
    pub repeat_horizon: usize,
}

impl Default for OverlapProfile {
    fn default() -> Self {
        OverlapProfile {
            structural_repeat_prob: 0.95,
            noise: 0.05,
            repeat_horizon: 300,
        }
    }
}

/// Query stream over the corpus topics. A fresh query samples a topic like
/// the corpus does; a repeat copies a uniformly chosen earlier query within
/// the horizon and adds noise, so related queries are usually not adjacent.
pub fn synth_queries(
    corpus: &CorpusParams,
    n_queries: usize,
    profile: &OverlapProfile,
    seed: u64,
) -> Result<VectorSet> {
    if !(0.0..=1.0).contains(&profile.structural_repeat_prob) {
        return Err(Error::invalid("structural_repeat_prob must be in [0, 1]"));
    }
    let centers = corpus.centers()?;
    let fresh = gaussian(corpus.spread)?;
    let noise = gaussian(profile.noise)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = VectorSet::new(corpus.dim);
    for i in 0..n_queries {
        let q = if i > 0 && rng.random::<f64>() < profile.structural_repeat_prob {
            let lo = match profile.repeat_horizon {
                0 => 0,
                h => i.saturating_sub(h),
            };
            let src = rng.random_range(lo..i);
            around(&out.row(src).to_vec(), &noise, &mut rng)
        } else {
            let topic = rng.random_range(0..corpus.topics);
            around(centers.row(topic), &fresh, &mut rng)
        };
        out.push(&q)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    /// Row of the trace's query matrix.
    pub qid: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTrace {
    pub events: Vec<TraceEvent>,
    pub queries: VectorSet,
}

impl WorkloadTrace {
    /// Pairs arrival `i` with query row `i`.
    pub fn new(arrivals: &[f64], queries: VectorSet) -> Result<Self> {
        if arrivals.len() != queries.len() {
            return Err(Error::invalid(format!(
                "{} arrivals but {} queries",
                arrivals.len(),
                queries.len()
            )));
        }
        let events = arrivals
            .iter()
            .enumerate()
            .map(|(i, t)| TraceEvent { t: *t, qid: i as u64 })
            .collect();
        let trace = WorkloadTrace { events, queries };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        for w in self.events.windows(2) {
            if w[1].t < w[0].t {
                return Err(Error::invalid("trace arrival times must be non-decreasing"));
            }
        }
        if let Some(e) = self.events.iter().find(|e| e.qid as usize >= self.queries.len()) {
            return Err(Error::invalid(format!("event references missing query {}", e.qid)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

pub fn write_trace(trace: &WorkloadTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let path = dir.join(EVENTS_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::storage(&path, e))?);
    for ev in &trace.events {
        let line = serde_json::to_string(ev).expect("trace events serialize");
        writeln!(w, "{line}").map_err(|e| Error::storage(&path, e))?;
    }
    w.flush().map_err(|e| Error::storage(&path, e))?;
    write_embeddings(&dir.join(QUERIES_FILE), &trace.queries)
}

pub fn read_trace(dir: &Path) -> Result<WorkloadTrace> {
    let path = dir.join(EVENTS_FILE);
    let file = File::open(&path).map_err(|e| Error::storage(&path, e))?;
    let mut events = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::storage(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt(&path, format!("line {}: {e}", n + 1)))?;
        events.push(ev);
    }
    let trace = WorkloadTrace {
        events,
        queries: read_embeddings(&dir.join(QUERIES_FILE))?,
    };
    trace.validate().map_err(|e| Error::corrupt(&path, e.to_string()))?;
    Ok(trace)
}
