mod common;

use std::collections::HashSet;

use call_core::grouping::jaccard_hash;
use call_core::index::{assign_vectors, train_kmeans, ClusterId};
use call_core::workload::{
    gen_traffic, interarrival, synth_corpus, synth_queries, CorpusParams, OverlapProfile, TrafficConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn weibull_shape_one_is_exponential() {
    let rate = 100.0;
    let n = 100_000;
    let d = interarrival(rate, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
    let (mean, var) = moments(&xs);
    let mu = 1.0 / rate;
    // exponential: sd of the sample mean is mu/sqrt(n), of the sample
    // variance sqrt(8) mu^2 / sqrt(n)
    let sn = (n as f64).sqrt();
    assert!((mean - mu).abs() <= 3.0 * mu / sn, "mean {mean}");
    assert!((var - mu * mu).abs() <= 3.0 * 8f64.sqrt() * mu * mu / sn, "var {var}");
}

#[test]
fn weibull_mean_matches_rate_for_other_shapes() {
    for shape in [0.7, 1.5, 3.0] {
        let d = interarrival(50.0, shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
        let (mean, _) = moments(&xs);
        assert!((mean * 50.0 - 1.0).abs() < 0.02, "shape {shape}: mean {mean}");
    }
}

#[test]
fn steady_traffic_rate_within_five_percent() {
    let cfg = TrafficConfig {
        burst_probability: 0.0,
        duration: 100.0,
        seed: 21,
        ..Default::default()
    };
    let arrivals = gen_traffic(&cfg).unwrap();
    let rate = arrivals.len() as f64 / cfg.duration;
    assert!((rate / cfg.base_rate - 1.0).abs() < 0.05, "rate {rate}");
    assert!(arrivals.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn unit_multiplier_bursts_change_nothing_statistically() {
    let base = TrafficConfig {
        burst_probability: 0.0,
        duration: 200.0,
        ..Default::default()
    };
    let flat = TrafficConfig {
        burst_probability: 0.5,
        burst_multiplier: 1.0,
        ..base
    };
    let a = gen_traffic(&base).unwrap().len() as f64;
    let b = gen_traffic(&flat).unwrap().len() as f64;
    assert!((a / b - 1.0).abs() < 0.05);
}

#[test]
fn generation_is_bit_reproducible() {
    let p = CorpusParams {
        n: 500,
        dim: 16,
        topics: 10,
        spread: 0.2,
        seed: 77,
    };
    assert_eq!(synth_corpus(&p).unwrap(), synth_corpus(&p).unwrap());
    let prof = OverlapProfile::default();
    assert_eq!(synth_queries(&p, 100, &prof, 3).unwrap(), synth_queries(&p, 100, &prof, 3).unwrap());
    assert_ne!(synth_queries(&p, 100, &prof, 3).unwrap(), synth_queries(&p, 100, &prof, 4).unwrap());
}

#[test]
fn cluster_sizes_are_uneven() {
    let p = CorpusParams::default();
    let corpus = synth_corpus(&p).unwrap();
    let index = train_kmeans(&corpus, 100, 1).unwrap();
    let mut sizes = vec![0f64; 100];
    for c in assign_vectors(&corpus, &index).unwrap() {
        sizes[c as usize] += 1.0;
    }
    let (mean, var) = moments(&sizes);
    assert!(var.sqrt() / mean > 0.0);
}

fn probe_sets(p: &CorpusParams, profile: &OverlapProfile, n: usize, seed: u64) -> Vec<HashSet<ClusterId>> {
    let w = common::world(p.n, p.dim, p.topics, 100, p.seed);
    synth_queries(p, n, profile, seed)
        .unwrap()
        .rows()
        .map(|q| w.index.probe(q, 30).unwrap().into_iter().collect())
        .collect()
}

#[test]
fn no_repeats_overlap_like_independent_queries() {
    let p = CorpusParams {
        n: 3000,
        ..Default::default()
    };
    let none = OverlapProfile {
        structural_repeat_prob: 0.0,
        ..Default::default()
    };
    let stream = probe_sets(&p, &none, 200, 5);
    let adjacent: f64 = stream.windows(2).map(|w| jaccard_hash(&w[0], &w[1])).sum::<f64>() / 199.0;
    // Monte-Carlo baseline: pairs drawn from unrelated streams
    let mut independent = 0.0;
    for s in 0..199u64 {
        let a = probe_sets(&p, &none, 1, 1000 + s);
        let b = probe_sets(&p, &none, 1, 5000 + s);
        independent += jaccard_hash(&a[0], &b[0]);
    }
    independent /= 199.0;
    assert!((adjacent - independent).abs() < 0.05, "{adjacent} vs {independent}");
}

#[test]
fn default_profile_has_distant_overlapping_pairs() {
    let p = CorpusParams::default();
    let sets = probe_sets(&p, &OverlapProfile::default(), 1000, 8);
    let (mut close, mut total) = (0usize, 0usize);
    let mut adjacent = Vec::new();
    for w in sets.chunks(10) {
        for i in 0..w.len() {
            for j in i + 2..w.len() {
                total += 1;
                close += usize::from(jaccard_hash(&w[i], &w[j]) >= 0.5);
            }
            if i + 1 < w.len() {
                adjacent.push(jaccard_hash(&w[i], &w[i + 1]));
            }
        }
    }
    let frac = close as f64 / total as f64;
    assert!(frac >= 0.2, "only {frac:.3} of non-adjacent pairs overlap");
    // probing 30 of 100 clusters, unrelated queries already share about 0.3
    let unrelated = adjacent.iter().filter(|j| **j < 0.45).count() as f64 / adjacent.len() as f64;
    assert!(unrelated >= 0.3, "only {unrelated:.3} of adjacent pairs look unrelated");
}
