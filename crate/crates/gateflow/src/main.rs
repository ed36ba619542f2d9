use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use gateflow::bench::{run_bench, BenchScenario};
use gateflow::config::{ConfigError, GatewayConfig, SegmentdConfig};
use gateflow::gateway::{exit, Gateway};
use gateflow::loadgen::{self, LoadgenOptions, Source};
use gateflow::segmentd::{DaemonOptions, SegmentDaemon};
use gateflow_core::sim::{render_gantt_with, run_sim, GanttOptions, SimConfig, SimTrace};

#[derive(Parser)]
#[command(name = "gateflow", version, about = "Micro-batch ingestion gateway")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the gateway.
    Serve {
        #[arg(long, env = "GATEFLOW_CONFIG")]
        config: PathBuf,
        /// Overrides `listen_addr`.
        #[arg(long)]
        listen: Option<String>,
        /// Overrides `interval_ms`.
        #[arg(long)]
        interval_ms: Option<u64>,
    },
    /// Run mock segments, one listener per configured segment.
    Segmentd {
        #[arg(long, env = "GATEFLOW_CONFIG")]
        config: PathBuf,
        /// Write committed rows to `<dir>/<segment-id>.tsv`.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Post rows to a gateway and print a JSON summary.
    Loadgen {
        /// Gateway base URL.
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        target: String,
        /// Replay this CSV file.
        #[arg(long, conflicts_with_all = ["rate", "total"])]
        file: Option<PathBuf>,
        /// Synthetic rows per second (with --duration-s), or file pacing.
        #[arg(long)]
        rate: Option<u64>,
        #[arg(long)]
        duration_s: Option<f64>,
        /// Synthetic rows to send as fast as possible.
        #[arg(long)]
        total: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        batch_lines: usize,
        #[arg(long, default_value_t = 100)]
        devices: u32,
        #[arg(long, default_value_t = 0)]
        first_seq: u64,
    },
    /// Run the discrete-event simulator and write the trace as JSON.
    Simulate {
        /// TOML, or JSON if the name ends in `.json`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a text timeline of a simulator trace.
    Gantt {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        cell_ms: Option<f64>,
        #[arg(long)]
        from_ms: Option<u64>,
        #[arg(long)]
        to_ms: Option<u64>,
    },
    /// Run a scalability scenario and print the JSON report.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(code: i32, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("gateflow: {msg}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match cli.cmd {
        Cmd::Serve { config, listen, interval_ms } => serve(&config, listen, interval_ms),
        Cmd::Segmentd { config, dump_dir } => segmentd(&config, dump_dir),
        Cmd::Loadgen { target, file, rate, duration_s, total, batch_lines, devices, first_seq } => {
            let file_pacing = if file.is_some() { rate } else { None };
            let source = match file {
                Some(path) => Source::File(path),
                None => Source::Synthetic {
                    rows_per_sec: rate,
                    duration: duration_s.map(Duration::from_secs_f64),
                    total,
                    devices,
                },
            };
            let mut opts = LoadgenOptions::new(target, source);
            opts.batch_lines = batch_lines;
            opts.first_seq = first_seq;
            opts.file_rows_per_sec = file_pacing;
            match runtime(None).block_on(loadgen::run(opts)) {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(exit::USAGE, e),
            }
        }
        Cmd::Simulate { config, out } => simulate(&config, &out),
        Cmd::Gantt { trace, cell_ms, from_ms, to_ms } => gantt(&trace, cell_ms, from_ms, to_ms),
        Cmd::Bench { scenario, out } => {
            let scenario = match BenchScenario::load(&scenario) {
                Ok(s) => s,
                Err(e) => return fail(exit::USAGE, e),
            };
            let report = runtime(None).block_on(run_bench(&scenario));
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = out {
                if let Err(e) = std::fs::write(&path, &json) {
                    return fail(exit::USAGE, format!("cannot write {}: {e}", path.display()));
                }
            }
            println!("{json}");
            if report.complete {
                ExitCode::SUCCESS
            } else {
                fail(exit::DEPENDENCY, report.error.unwrap_or_default())
            }
        }
    }
}

fn runtime(workers: Option<usize>) -> tokio::runtime::Runtime {
    let mut b = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = workers {
        b.worker_threads(n);
    }
    b.enable_all().build().expect("tokio runtime")
}

fn serve(path: &Path, listen: Option<String>, interval_ms: Option<u64>) -> ExitCode {
    let mut cfg = match GatewayConfig::load(path) {
        Ok(c) => c,
        Err(e) => return fail(exit::USAGE, e),
    };
    if let Some(l) = listen {
        cfg.listen_addr = l;
    }
    if let Some(i) = interval_ms {
        cfg.interval_ms = i;
    }
    if let Err(e) = cfg.validate() {
        return fail(exit::USAGE, e);
    }
    runtime(Some(cfg.listeners)).block_on(async move {
        let gw = match Gateway::start(cfg).await {
            Ok(g) => g,
            Err(e) => return fail(e.exit_code(), e),
        };
        println!("listening on {}", gw.addr());
        let _ = tokio::signal::ctrl_c().await;
        gw.shutdown().await;
        ExitCode::SUCCESS
    })
}

fn segmentd(path: &Path, dump_dir: Option<PathBuf>) -> ExitCode {
    let cfg = match SegmentdConfig::load(path) {
        Ok(c) => c,
        Err(e) => return fail(exit::USAGE, e),
    };
    let dump = dump_dir.or(cfg.dump_dir.clone());
    runtime(None).block_on(async move {
        let daemon = match SegmentDaemon::start(&cfg.segments, DaemonOptions::default(), dump.as_deref()).await {
            Ok(d) => d,
            Err(e) => return fail(exit::BIND, e),
        };
        for s in daemon.segments() {
            println!("segment {} listening on {}", s.id, s.addr);
        }
        let _ = tokio::signal::ctrl_c().await;
        daemon.shutdown();
        ExitCode::SUCCESS
    })
}

fn read_sim_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
    } else {
        Ok(toml::from_str(&text)?)
    }
}

fn simulate(config: &Path, out: &Path) -> ExitCode {
    let cfg = match read_sim_config(config) {
        Ok(c) => c,
        Err(e) => return fail(exit::USAGE, e),
    };
    let trace = match run_sim(&cfg) {
        Ok(t) => t,
        Err(e) => return fail(exit::USAGE, format!("invalid config: {e}")),
    };
    let json = serde_json::to_string(&trace).expect("trace serializes");
    if let Err(e) = std::fs::write(out, json) {
        return fail(exit::USAGE, format!("cannot write {}: {e}", out.display()));
    }
    let settled = trace.slot_counts.last().copied().unwrap_or(0);
    println!(
        "batches={} rows_committed={} final_slots={} optimal_slots={}",
        trace.batches.len(),
        trace.rows_committed,
        settled,
        cfg.optimal_slots()
    );
    ExitCode::SUCCESS
}

fn gantt(path: &Path, cell_ms: Option<f64>, from_ms: Option<u64>, to_ms: Option<u64>) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return fail(exit::USAGE, format!("cannot read {}: {e}", path.display())),
    };
    let trace: SimTrace = match serde_json::from_str(&text) {
        Ok(t) => t,
        Err(e) => return fail(exit::USAGE, format!("invalid trace: {e}")),
    };
    let mut opts = GanttOptions::for_trace(&trace);
    if let Some(c) = cell_ms {
        opts.cell_us = ((c * 1000.0) as u64).max(1);
    }
    if let Some(f) = from_ms {
        opts.from_us = f * 1000;
    }
    if let Some(t) = to_ms {
        opts.to_us = t * 1000;
    }
    print!("{}", render_gantt_with(&trace, opts));
    ExitCode::SUCCESS
}
