use call_bench::config::{BenchConfig, ClockKind};
use call_bench::BenchError;
use call_core::cache::PolicyKind;
use call_core::engine::SchedulerMode;

#[test]
fn defaults_match_the_experimental_setup() {
    let c = BenchConfig::default();
    assert_eq!(c.clusters, 100);
    assert_eq!(c.nprobe, 30);
    assert_eq!(c.threads, 8);
    assert_eq!(c.capacity, 50);
    assert_eq!(c.theta, 0.5);
    assert_eq!(c.warmup, 60.0);
    assert_eq!(c.traffic.base_rate, 100.0);
    assert_eq!(c.traffic.burst_probability, 0.1);
    assert_eq!(c.traffic.burst_multiplier, 3.0);
    assert_eq!(c.policy, PolicyKind::Lru);
    assert_eq!(c.clock, ClockKind::Virtual);
    c.validate().unwrap();
}

#[test]
fn file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.conf");
    std::fs::write(
        &path,
        "# comment\nnprobe = 10\npolicy = fifo   # trailing\n\nscheduler = baseline\n",
    )
    .unwrap();
    let c = BenchConfig::load(Some(&path), &["nprobe=12".into(), "clock = real".into()]).unwrap();
    assert_eq!(c.nprobe, 12);
    assert_eq!(c.policy, PolicyKind::Fifo);
    assert_eq!(c.scheduler, SchedulerMode::BaselineFifoOrder);
    assert_eq!(c.clock, ClockKind::Real);
}

#[test]
fn text_round_trips() {
    let mut c = BenchConfig::default();
    for (k, v) in [("policy", "wlru"), ("periodic_prefetch", "auto"), ("load_ordering", "round_robin"), ("variants", "call,fifo")] {
        c.set(k, v).unwrap();
    }
    let mut back = BenchConfig::default();
    back.apply_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn bad_input_is_a_config_error() {
    let cases: &[&[&str]] = &[
        &["no_such_key=1"],
        &["nprobe=many"],
        &["prefetch=maybe"],
        &["nprobe"],
        &["theta=1.5"],
        &["capacity=0"],
        &["duration=0"],
        &["search_threads=2"],
        &["policy=wlru", "window_top_n=51"],
    ];
    for set in cases {
        let set: Vec<String> = set.iter().map(|s| s.to_string()).collect();
        let err = BenchConfig::load(None, &set).unwrap_err();
        assert!(matches!(err, BenchError::Config(_)), "{set:?}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn missing_config_file_is_a_config_error() {
    let err = BenchConfig::load(Some(std::path::Path::new("/nonexistent/bench.conf")), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
