use std::path::PathBuf;
use std::process::ExitCode;

use call_bench::compare::cmd_compare;
use call_bench::grouptime::{cmd_grouptime, format_table};
use call_bench::run::{cmd_build, cmd_gen, cmd_run};
use call_bench::{BenchConfig, Result};
use clap::{Parser, Subcommand};

/// Index build, trace replay and scheduler comparison.
///
/// Exit codes: 2 config error, 3 missing or bad data, 4 runtime failure.
#[derive(Debug, Parser)]
#[command(name = "call-bench", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus and arrival trace.
    Gen,
    /// Build the cluster files from the corpus.
    Build,
    /// Replay the trace with the configured scheduler and policy.
    Run,
    /// Replay the trace once per variant and compare.
    Compare {
        /// Comma-separated variants; overrides the `variants` key.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Time bitmap against hash-set grouping.
    Grouptime {
        #[arg(long, value_delimiter = ',', default_value = "1000,1500,2000,2500")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Print the effective configuration.
    Config,
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn ms(x: f64) -> String {
    format!("{:.2}ms", x * 1e3)
}

fn run(cli: Cli) -> Result<()> {
    let mut set = cli.set;
    if let Command::Compare { variants: Some(v) } = &cli.command {
        set.push(format!("variants={v}"));
    }
    let cfg = BenchConfig::load(cli.config.as_deref(), &set)?;
    match cli.command {
        Command::Gen => {
            let (n, events) = cmd_gen(&cfg)?;
            println!("corpus: {n} vectors, trace: {events} events");
        }
        Command::Build => {
            let m = cmd_build(&cfg)?;
            println!("index: {} clusters, {} vectors", m.num_clusters(), m.total_vectors());
        }
        Command::Run => {
            let r = cmd_run(&cfg)?;
            println!(
                "{}: hit ratio {}, search p50 {} p99 {}, total p99 {}, {} measured of {} queries",
                r.variant,
                pct(r.hit_ratio),
                ms(r.search_latency.p50),
                ms(r.search_latency.p99),
                ms(r.total_latency.p99),
                r.queries_measured,
                r.queries_total
            );
        }
        Command::Compare { .. } => {
            let c = cmd_compare(&cfg)?;
            println!(
                "{:<16} {:>9} {:>11} {:>11} {:>9} {:>10}",
                "variant", "hit", "search_p99", "total_p99", "norm_p99", "head_hit"
            );
            for v in &c.variants {
                println!(
                    "{:<16} {:>9} {:>11} {:>11} {:>9.3} {:>10}",
                    v.variant,
                    pct(v.hit_ratio),
                    ms(v.search_latency.p99),
                    ms(v.total_latency.p99),
                    v.normalized_search_latency.p99,
                    v.head_hit_rate.map(pct).unwrap_or_else(|| "-".into())
                );
            }
        }
        Command::Grouptime { sizes, repeats } => {
            let rows = cmd_grouptime(&cfg, &sizes, repeats)?;
            print!("{}", format_table(&rows));
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("call-bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

