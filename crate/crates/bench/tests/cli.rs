use std::collections::HashMap;
use std::path::Path;
use std::process::Command;

use call_bench::report::{read_records, REPORT_FILE, TIMESERIES_FILE};

fn bench(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_call-bench"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

const SMALL: &[&str] = &[
    "--set", "corpus_size=2000",
    "--set", "clusters=20",
    "--set", "nprobe=5",
    "--set", "capacity=10",
    "--set", "duration=20",
    "--set", "warmup=5",
    "--set", "dim=16",
    "--set", "topics=20",
];

fn with_small<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bench(dir.path(), &["run", "--set", "bogus=1"]).0, 2);
    assert_eq!(bench(dir.path(), &["run", "--config", "missing.conf"]).0, 2);
    let (code, text) = bench(dir.path(), &["run"]);
    assert_eq!(code, 3, "{text}");
    assert!(text.contains("manifest") || text.contains("index"), "{text}");
    assert_eq!(bench(dir.path(), &["frobnicate"]).0, 2);
    assert_eq!(bench(dir.path(), &["--help"]).0, 0);
}

#[test]
fn pipeline_writes_complete_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, text) = bench(d, &with_small("gen", &[]));
    assert_eq!(code, 0, "{text}");
    let events = text
        .split("trace: ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap();
    assert_eq!(bench(d, &with_small("build", &[])).0, 0);
    let (code, text) = bench(d, &with_small("run", &[]));
    assert_eq!(code, 0, "{text}");

    let out = d.join("out");
    let records = read_records(&out.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), events);
    let mut seen = HashMap::new();
    for r in &records {
        *seen.entry(r.query_id).or_insert(0) += 1;
        assert_eq!(r.warmup, r.arrival < 5.0);
        assert_eq!(r.hits.len() + r.misses.len(), 5);
    }
    assert!(seen.values().all(|n| *n == 1) && seen.len() == events);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    let measured = records.iter().filter(|r| !r.warmup).count();
    assert_eq!(report["queries_measured"].as_u64().unwrap() as usize, measured);
    assert!(report["assumptions"].as_array().unwrap().len() >= 2);
    assert_eq!(report["config"]["nprobe"], "5");

    let csv = std::fs::read_to_string(out.join(TIMESERIES_FILE)).unwrap();
    assert_eq!(csv.lines().count(), events + 1);
    assert!(csv.starts_with("index,query_id,arrival,warmup,hit_ratio"));
}

#[test]
fn compare_and_grouptime() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(bench(d, &with_small("gen", &[])).0, 0);
    assert_eq!(bench(d, &with_small("build", &[])).0, 0);
    let (code, text) = bench(d, &with_small("compare", &["--variants", "call,clru,call_rr"]));
    assert_eq!(code, 0, "{text}");
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/compare.json")).unwrap()).unwrap();
    let names: Vec<&str> = cmp["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["variant"].as_str().unwrap())
        .collect();
    // the baseline is added when not listed
    assert_eq!(names, ["call", "clru", "call_rr", "fifo"]);
    let fifo = &cmp["variants"][3];
    assert_eq!(fifo["normalized_search_latency"]["p99"].as_f64(), Some(1.0));
    assert!(d.join("out/clru/records.jsonl").exists());

    let (code, text) = bench(d, &with_small("grouptime", &["--sizes", "1,50", "--repeats", "1"]));
    assert_eq!(code, 0, "{text}");
    let csv = std::fs::read_to_string(d.join("out/grouptime.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ends_with("true")), "{csv}");

    let (code, _) = bench(d, &with_small("compare", &["--variants", "nope"]));
    assert_eq!(code, 2);
}
