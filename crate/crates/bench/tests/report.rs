use std::collections::BTreeMap;

use call_bench::report::{aggregate, nearest_rank, BatchLog, ByteTotals, Percentiles, QueryLog};
use call_core::engine::StageTiming;

fn record(qid: u64, arrival: f64, warmup: f64, hits: usize, misses: usize, latency: f64) -> QueryLog {
    QueryLog {
        query_id: qid,
        batch: 0,
        group_id: 0,
        exec_index: qid as usize,
        head_of_group: qid == 0,
        warmup: arrival < warmup,
        arrival,
        started_at: arrival,
        completed_at: arrival + latency,
        hits: (0..hits as u32).collect(),
        misses: (100..100 + misses as u32).collect(),
        load_plan: (100..100 + misses as u32).collect(),
        load_threads: vec![],
        thread_seconds: vec![],
        load_makespan: 0.0,
        bytes_read: 0,
        disk_bytes_total: 0,
        neighbors: vec![],
        distances: vec![],
        timing: StageTiming {
            search_latency: latency,
            total_latency: latency,
            ..StageTiming::default()
        },
        prefetch_timed_out: false,
        error: None,
    }
}

#[test]
fn nearest_rank_on_one_to_hundred() {
    let v: Vec<f64> = (1..=100).map(|i| i as f64 / 1000.0).collect();
    assert_eq!(nearest_rank(&v, 99.0), Some(0.099));
    assert_eq!(nearest_rank(&v, 50.0), Some(0.050));
    assert_eq!(nearest_rank(&v, 100.0), Some(0.100));
    assert_eq!(nearest_rank(&v, 0.0), Some(0.001));
    assert_eq!(nearest_rank(&[], 50.0), None);
    let p = Percentiles::of(v.iter().rev().copied());
    assert_eq!((p.p95, p.p99, p.p100), (0.095, 0.099, 0.100));
}

#[test]
fn nearest_rank_matches_sorting_oracle() {
    // the smallest value with at least p% of the population at or below it
    let v: Vec<f64> = [5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0].to_vec();
    let mut s = v.clone();
    s.sort_by(f64::total_cmp);
    for p in [1.0, 10.0, 14.0, 15.0, 50.0, 85.0, 86.0, 99.0] {
        let want = *s
            .iter()
            .find(|x| s.iter().filter(|y| *y <= *x).count() as f64 >= p / 100.0 * s.len() as f64)
            .unwrap();
        assert_eq!(nearest_rank(&s, p), Some(want), "p = {p}");
    }
}

#[test]
fn warmup_records_stay_out_of_aggregates() {
    let warmup = 10.0;
    let mut records = vec![record(0, 1.0, warmup, 0, 30, 5.0)];
    records.extend((1..=100).map(|i| record(i, 10.0 + i as f64, warmup, 27, 3, i as f64 / 1000.0)));
    let report = aggregate("x", BTreeMap::new(), warmup, &records, &[], ByteTotals::default(), 0.0);
    assert_eq!(report.queries_total, 101);
    assert_eq!(report.queries_measured, 100);
    assert!((report.hit_ratio - 0.9).abs() < 1e-12);
    assert_eq!(report.search_latency.p99, 0.099);
    assert_eq!(report.search_latency.p100, 0.100);
}

#[test]
fn head_hit_rate_counts_later_heads() {
    let mut records: Vec<QueryLog> = (0..4).map(|i| record(i, 1.0, 0.0, 30, 0, 0.001)).collect();
    for r in &mut records {
        r.head_of_group = true;
    }
    records[3].misses = vec![7];
    let batches = [BatchLog {
        batch: 0,
        release: 3.0,
        size: 4,
        group_sizes: vec![1, 1, 1, 1],
        grouping_secs: 0.0,
        prefetches_issued: 3,
        prefetch_timeouts: 0,
        started_at: 3.0,
        finished_at: 3.1,
    }];
    let report = aggregate("x", BTreeMap::new(), 0.0, &records, &batches, ByteTotals::default(), 0.0);
    assert_eq!(report.heads_measured, 3);
    assert!((report.head_hit_rate.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(report.prefetches_issued, 3);
    assert_eq!(report.grouping.mean_group_size, 1.0);
}
