//! Command-line front end: forecasts, construction, runs, scaling benches,
//! and drive calibration sweeps.

mod config;
mod launch;
mod output;
mod units;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use corticarc_core::engine::{run as run_inprocess, run_worker, SimConfig, SimError};
use corticarc_core::metrics::{
    firing_rate_stats, forecast, grid_label, scaling_harness, write_scaling_csv, ScalingMode,
    SimReport,
};
use corticarc_core::transport::TcpTransport;
use corticarc_core::compute_stencil;

use crate::config::{RunConfig, TransportKind};
use crate::units::{Hertz, Millis};

#[derive(Parser)]
#[command(name = "corticarc", version, about = "Distributed simulation of spiking cortical column grids")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file; reference values when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated duration with a unit, such as `1s` or `250ms`.
    #[arg(long, value_parser = Millis::parse)]
    duration: Option<Millis>,
    #[arg(long, value_enum)]
    transport: Option<TransportKind>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Strong,
    Weak,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stencil, fanout, and size forecast without simulating.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Print the stencil probabilities.
        #[arg(long)]
        stencil: bool,
    },
    /// Construct the network and compare it with the forecast.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Simulate and write the report, raster, and configuration echo.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Scaling table over a list of worker counts.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated worker counts.
        #[arg(long, required = true, value_delimiter = ',')]
        workers: Vec<usize>,
        #[arg(long, value_enum, default_value = "strong")]
        mode: Mode,
        /// Grid of the smallest worker count in weak mode, such as `6x6`.
        #[arg(long, value_parser = parse_grid_size)]
        base_grid: Option<(usize, usize)>,
    },
    /// Firing rates over a list of external drive rates.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        /// Comma-separated external rates per synapse, such as `2Hz,4Hz`.
        #[arg(long, required = true, value_delimiter = ',', value_parser = Hertz::parse)]
        external_rates: Vec<Hertz>,
    },
}

fn parse_grid_size(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("`{s}` is not of the form NxM"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    Ok((p(a)?, p(b)?))
}

/// Failure class, mapped to the process exit code.
enum Fault {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Fault {
    fn code(&self) -> u8 {
        match self {
            Fault::Config(_) => 2,
            Fault::Runtime(_) => 3,
        }
    }
}

type Outcome<T = ()> = Result<T, Fault>;

fn config_fault(e: impl Into<anyhow::Error>) -> Fault {
    Fault::Config(e.into())
}

fn runtime_fault(e: impl Into<anyhow::Error>) -> Fault {
    Fault::Runtime(e.into())
}

fn sim_fault(e: SimError) -> Fault {
    match e {
        SimError::Config(_)
        | SimError::Params(_)
        | SimError::Connectivity(_)
        | SimError::Partition(_)
        | SimError::MemoryBudget { .. } => Fault::Config(e.into()),
        _ => Fault::Runtime(e.into()),
    }
}

fn load(common: &Common, workers: Option<usize>) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(config_fault)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(d) = common.duration {
        cfg.run.duration = d;
    }
    if let Some(t) = common.transport {
        cfg.transport.kind = t;
    }
    if let Some(o) = &common.output {
        cfg.output.dir = o.clone();
    }
    if let Some(w) = workers {
        cfg.run.workers = w;
    }
    if cfg.run.workers == 0 {
        return Err(config_fault(anyhow!("run.workers must be >= 1")));
    }
    Ok(cfg)
}

fn analyze(cfg: &RunConfig, show_stencil: bool) -> Outcome {
    let sim = cfg.sim_config().map_err(config_fault)?;
    let f = forecast(&sim.grid, &sim.kernel, sim.external.synapses_per_neuron);
    let g = 1e-9;
    println!("grid {} ({} columns), {} kernel", grid_label(&sim.grid), sim.grid.columns(), sim.kernel.kind);
    println!("neurons {} ({:.3} M)", f.neurons, f.neurons as f64 * 1e-6);
    println!("stencil {}x{}", f.stencil_window, f.stencil_window);
    for (label, fan) in [("interior column", f.fanout), ("grid mean", f.mean_fanout)] {
        println!(
            "synapses per neuron, {label}: local {:.1}  remote {:.1} per excitatory source, {:.1} averaged  total {:.1}",
            fan.local, fan.remote_excitatory, fan.remote_average, fan.average_total
        );
    }
    println!(
        "recurrent synapses {:.0} ({:.3} G, sd {:.0})",
        f.recurrent_synapses,
        f.recurrent_synapses * g,
        f.recurrent_synapses_sd
    );
    println!("external synapses {:.0} ({:.3} G)", f.external_synapses, f.external_synapses * g);
    println!(
        "total equivalent synapses {:.0} ({:.3} G)",
        f.total_equivalent_synapses,
        f.total_equivalent_synapses * g
    );
    println!(
        "memory forecast: steady {:.3} GiB, peak {:.3} GiB",
        f.steady_bytes / 1073741824.0,
        f.peak_bytes / 1073741824.0
    );
    if show_stencil {
        print!("{}", compute_stencil(&sim.kernel, &sim.grid).render_thousands(&sim.grid));
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, sim: &SimConfig) -> Outcome<SimReport> {
    match cfg.transport.kind {
        TransportKind::Inprocess => run_inprocess(sim, cfg.run.workers).map_err(sim_fault),
        TransportKind::Multiprocess => {
            // Removed on drop.
            let dir = tempfile::Builder::new()
                .prefix("corticarc-")
                .tempdir()
                .map_err(runtime_fault)?;
            let mut child = cfg.clone();
            child.output.dir = dir.path().to_path_buf();
            multiprocess(&child)?;
            let text = std::fs::read_to_string(dir.path().join(output::REPORT_JSON)).map_err(runtime_fault)?;
            let mut report: SimReport = serde_json::from_str(&text).map_err(runtime_fault)?;
            if sim.record_raster {
                report.raster = Some(read_raster(&dir.path().join(output::RASTER)).map_err(runtime_fault)?);
            }
            Ok(report)
        }
    }
}

fn read_raster(path: &Path) -> anyhow::Result<Vec<corticarc_core::SpikeEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|l| {
            let (t, g) = l.split_once('\t').ok_or_else(|| anyhow!("bad raster line `{l}`"))?;
            Ok(corticarc_core::SpikeEvent {
                time: t.parse()?,
                source: g.parse()?,
            })
        })
        .collect()
}

/// Launches one process per worker; rank 0 writes the outputs into
/// `cfg.output.dir`.
fn multiprocess(cfg: &RunConfig) -> Outcome {
    output::write_config_echo(&cfg.output.dir, cfg).map_err(runtime_fault)?;
    let echo = cfg.output.dir.join(output::CONFIG_ECHO);
    let statuses = launch::run_group(&echo, cfg.run.workers).map_err(runtime_fault)?;
    let failed: Vec<String> = statuses
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.success())
        .map(|(r, s)| format!("worker {r}: {s}"))
        .collect();
    if failed.is_empty() {
        return Ok(());
    }
    let msg = anyhow!("{}", failed.join("; "));
    if statuses.iter().all(|s| s.success() || s.code() == Some(2)) {
        Err(Fault::Config(msg))
    } else {
        Err(Fault::Runtime(msg))
    }
}

/// Body of a process started by the launcher or by an external one.
fn worker_process(cfg: &RunConfig) -> Outcome {
    let sim = cfg.sim_config().map_err(config_fault)?;
    let timeout = Duration::from_secs_f64(cfg.transport.timeout.value() * 1e-3);
    let mut t = TcpTransport::from_env(timeout).map_err(runtime_fault)?;
    if let Some(report) = run_worker(&mut t, &sim).map_err(sim_fault)? {
        output::write_run_outputs(&cfg.output.dir, cfg, &report).map_err(runtime_fault)?;
        print!("{}", output::summarize(&report));
    }
    Ok(())
}

fn run_command(cfg: &RunConfig) -> Outcome {
    if launch::is_worker() {
        return worker_process(cfg);
    }
    let sim = cfg.sim_config().map_err(config_fault)?;
    if cfg.transport.kind == TransportKind::Multiprocess {
        return multiprocess(cfg);
    }
    let report = run_inprocess(&sim, cfg.run.workers).map_err(sim_fault)?;
    output::write_run_outputs(&cfg.output.dir, cfg, &report).map_err(runtime_fault)?;
    print!("{}", output::summarize(&report));
    Ok(())
}

fn build_command(cfg: &RunConfig) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.run.duration = Millis::new(0.0);
    cfg.output.raster = false;
    let sim = cfg.sim_config().map_err(config_fault)?;
    let report = simulate(&cfg, &sim)?;
    let f = forecast(&sim.grid, &sim.kernel, sim.external.synapses_per_neuron);
    let z = if f.recurrent_synapses_sd > 0.0 {
        (report.recurrent_synapses as f64 - f.recurrent_synapses) / f.recurrent_synapses_sd
    } else {
        0.0
    };
    print!("{}", output::summarize(&report));
    println!(
        "forecast {:.0} +/- {:.0} recurrent synapses, built {} (z = {:.2})",
        f.recurrent_synapses, f.recurrent_synapses_sd, report.recurrent_synapses, z
    );
    output::write_run_outputs(&cfg.output.dir, &cfg, &report).map_err(runtime_fault)
}

fn bench_command(cfg: &RunConfig, workers: &[usize], mode: Mode, base: Option<(usize, usize)>) -> Outcome {
    if workers.is_empty() || workers.contains(&0) {
        return Err(config_fault(anyhow!("--workers needs positive worker counts")));
    }
    let mut cfg = cfg.clone();
    cfg.output.raster = false;
    if let Some((nx, ny)) = base {
        cfg.grid.nx = nx;
        cfg.grid.ny = ny;
    }
    let sim = cfg.sim_config().map_err(config_fault)?;
    let mode = match mode {
        Mode::Strong => ScalingMode::Strong,
        Mode::Weak => ScalingMode::Weak,
    };
    let table = scaling_harness(&sim, workers, mode, |s, k| {
        let mut c = cfg.clone();
        c.run.workers = k;
        c.grid.nx = s.grid.nx;
        c.grid.ny = s.grid.ny;
        simulate(&c, s).map_err(|f| match f {
            Fault::Config(e) | Fault::Runtime(e) => SimError::Config(format!("{e:#}")),
        })
    });
    std::fs::create_dir_all(&cfg.output.dir).map_err(runtime_fault)?;
    output::write_config_echo(&cfg.output.dir, &cfg).map_err(runtime_fault)?;
    let path = cfg.output.dir.join("scaling.csv");
    let file = std::fs::File::create(&path).map_err(runtime_fault)?;
    write_scaling_csv(file, &table.rows).map_err(runtime_fault)?;
    write_scaling_csv(std::io::stdout().lock(), &table.rows).map_err(runtime_fault)?;
    for (k, e) in &table.failures {
        eprintln!("workers {k}: {e}");
    }
    if table.failures.is_empty() {
        Ok(())
    } else {
        Err(runtime_fault(anyhow!("{} of {} runs failed", table.failures.len(), table.rows.len())))
    }
}

fn sweep_command(cfg: &RunConfig, rates: &[Hertz]) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.output.raster = true;
    let mut csv = String::from("external_rate_hz,mean_rate_hz,excitatory_rate_hz,inhibitory_rate_hz,peak_bin_rate_hz\n");
    println!("{}", csv.trim_end());
    for &r in rates {
        cfg.external.rate = r;
        let sim = cfg.sim_config().map_err(config_fault)?;
        let report = simulate(&cfg, &sim)?;
        let raster = report.raster.as_deref().unwrap_or_default();
        let stats = firing_rate_stats(raster, &sim.grid, report.sim_seconds, cfg.output.rate_bin.value());
        let line = format!(
            "{},{},{},{},{}",
            r.value(),
            stats.mean_hz,
            stats.excitatory_hz,
            stats.inhibitory_hz,
            stats.peak_bin_hz()
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    output::write_config_echo(&cfg.output.dir, &cfg).map_err(runtime_fault)?;
    std::fs::write(cfg.output.dir.join("sweep.csv"), csv)
        .context("writing sweep.csv")
        .map_err(runtime_fault)
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Cmd::Analyze { common, stencil } => analyze(&load(&common, None)?, stencil),
        Cmd::Build { common, workers } => build_command(&load(&common, workers)?),
        Cmd::Run { common, workers } => run_command(&load(&common, workers)?),
        Cmd::Bench {
            common,
            workers,
            mode,
            base_grid,
        } => bench_command(&load(&common, None)?, &workers, mode, base_grid),
        Cmd::Sweep {
            common,
            workers,
            external_rates,
        } => {
            let cfg = load(&common, workers)?;
            if cfg.transport.kind == TransportKind::Multiprocess && launch::is_worker() {
                return Err(config_fault(anyhow!("sweep cannot run as a worker process")));
            }
            sweep_command(&cfg, &external_rates)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Fault::Config(e) | Fault::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
