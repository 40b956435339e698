//! Files written by `run`, `build`, `bench`, and `sweep`.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use corticarc_core::metrics::{
    firing_rate_stats, write_scaling_csv, ScalingRow, SimReport,
};
use corticarc_core::SpikeEvent;

use crate::config::RunConfig;

pub const CONFIG_ECHO: &str = "config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const RASTER: &str = "raster.tsv";
pub const RATES: &str = "rates.csv";

pub fn write_config_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

pub fn raster_tsv(raster: &[SpikeEvent]) -> String {
    let mut s = String::with_capacity(16 + raster.len() * 24);
    s.push_str("time_ms\tgid\n");
    for e in raster {
        let _ = writeln!(s, "{}\t{}", e.time, e.source);
    }
    s
}

pub fn write_run_outputs(dir: &Path, cfg: &RunConfig, report: &SimReport) -> Result<()> {
    write_config_echo(dir, cfg)?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(dir.join(REPORT_JSON), json)?;
    let file = fs::File::create(dir.join(REPORT_CSV))?;
    write_scaling_csv(BufWriter::new(file), &[ScalingRow::from_report(report)])?;
    if let Some(raster) = &report.raster {
        fs::write(dir.join(RASTER), raster_tsv(raster))?;
        let stats = firing_rate_stats(
            raster,
            &report.grid,
            report.sim_seconds,
            cfg.output.rate_bin.value(),
        );
        let mut rates = String::from("time_ms,rate_hz\n");
        for (i, r) in stats.series_hz.iter().enumerate() {
            let _ = writeln!(rates, "{},{}", i as f64 * stats.bin_ms, r);
        }
        fs::write(dir.join(RATES), rates)?;
    }
    Ok(())
}

pub fn summarize(report: &SimReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "grid {}x{} {} kernel, {} workers ({}x{}), seed {}",
        report.grid.nx,
        report.grid.ny,
        report.kernel,
        report.workers,
        report.process_grid.0,
        report.process_grid.1,
        report.seed
    );
    let _ = writeln!(
        s,
        "neurons {}  recurrent synapses {} (forecast {:.0})  checksum {:016x}",
        report.neurons,
        report.recurrent_synapses,
        report.expected_recurrent_synapses,
        report.checksum.digest
    );
    let _ = writeln!(
        s,
        "construction {:.2} s  simulation {:.2} s for {} simulated s",
        report.construction_wall_seconds, report.simulation_wall_seconds, report.sim_seconds
    );
    let _ = writeln!(
        s,
        "events recurrent {} external {}  ns/event {}",
        report.recurrent_events,
        report.external_events,
        report
            .ns_per_event
            .map_or_else(|| "NA".to_owned(), |v| format!("{v:.1}"))
    );
    let _ = writeln!(
        s,
        "rate mean {:.3} Hz  excitatory {:.3} Hz  inhibitory {:.3} Hz  spikes {}",
        report.mean_rate_hz, report.excitatory_rate_hz, report.inhibitory_rate_hz, report.total_spikes
    );
    let _ = writeln!(
        s,
        "memory {:.2} B/syn steady, {:.2} B/syn peak",
        report.memory.steady_bytes_per_synapse, report.memory.peak_bytes_per_synapse
    );
    s
}
