//! Reports, memory accounting, firing statistics, and the scaling harness.

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::connectivity::{
    compute_stencil, expected_fanout, expected_recurrent_synapses, mean_fanout, recurrent_synapses_variance,
    Fanout, GridSpec, KernelKind, KernelSpec, Stencil, SynapseChecksum,
};
use crate::construction::ConstructionStats;
use crate::delivery::DeliveryStats;
use crate::engine::{SimConfig, SimError};
use crate::model::{SpikeEvent, SYNAPSE_RECORD_BYTES};
use crate::partition::ProcessMap;
use crate::rng::{KeyedRng, Purpose};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
    #[error("normalized cost is undefined for a run without events")]
    Undefined,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Seconds spent in each substep of the timestep loop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub collect: f64,
    pub exchange: f64,
    pub arborize: f64,
    pub sort: f64,
    pub integrate: f64,
}

impl PhaseTimes {
    pub fn accumulate(&mut self, o: &PhaseTimes) {
        self.collect += o.collect;
        self.exchange += o.exchange;
        self.arborize += o.arborize;
        self.sort += o.sort;
        self.integrate += o.integrate;
    }

    pub fn max_with(&mut self, o: &PhaseTimes) {
        self.collect = self.collect.max(o.collect);
        self.exchange = self.exchange.max(o.exchange);
        self.arborize = self.arborize.max(o.arborize);
        self.sort = self.sort.max(o.sort);
        self.integrate = self.integrate.max(o.integrate);
    }

    pub fn total(&self) -> f64 {
        self.collect + self.exchange + self.arborize + self.sort + self.integrate
    }
}

/// Sizes of the structures one worker holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerMemory {
    pub synapses_in: u64,
    pub synapses_out: u64,
    pub synapse_array_bytes: u64,
    pub index_bytes: u64,
    pub routing_bytes: u64,
    pub state_bytes: u64,
    /// Peak of the delay ring plus the per-step input queue.
    pub ring_peak_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub rank: usize,
    pub neurons: u64,
    pub columns: u64,
    pub construction: ConstructionStats,
    /// Recurrent inputs injected into neurons.
    pub recurrent_events: u64,
    pub external_events: u64,
    /// Recurrent inputs placed in the delay ring, including those whose
    /// arrival falls after the end of the run.
    pub events_scheduled: u64,
    pub spikes_excitatory: u64,
    pub spikes_inhibitory: u64,
    /// Order-independent fingerprint of the emitted spikes.
    pub spike_digest: u64,
    pub phases: PhaseTimes,
    pub sim_wall_seconds: f64,
    pub delivery: DeliveryStats,
    pub memory: WorkerMemory,
}

#[inline]
pub fn spike_fingerprint(s: &SpikeEvent) -> u64 {
    KeyedRng::new(0x5eed, Purpose::InitialState, s.source as u64, s.time.to_bits()).at(0)
}

/// Memory use per synapse. Steady state holds each synapse once in the
/// incoming database; the construction peak holds it twice, once on the
/// sending side and once on the receiving side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub synapses: u64,
    pub record_bytes: u64,
    pub overhead_bytes: u64,
    pub steady_bytes_per_synapse: f64,
    pub peak_bytes_per_synapse: f64,
    pub resident_bytes: u64,
}

pub fn memory_accounting(workers: &[WorkerMemory]) -> MemoryReport {
    let synapses: u64 = workers.iter().map(|w| w.synapses_in).sum();
    let overhead: u64 = workers
        .iter()
        .map(|w| w.index_bytes + w.routing_bytes + w.ring_peak_bytes)
        .sum();
    let resident: u64 = workers
        .iter()
        .map(|w| {
            w.synapse_array_bytes + w.index_bytes + w.routing_bytes + w.state_bytes + w.ring_peak_bytes
        })
        .sum();
    let (steady, peak) = if synapses == 0 {
        (0.0, 0.0)
    } else {
        let per = overhead as f64 / synapses as f64;
        let rec = SYNAPSE_RECORD_BYTES as f64;
        (rec + per, 2.0 * rec + per)
    };
    MemoryReport {
        synapses,
        record_bytes: SYNAPSE_RECORD_BYTES as u64,
        overhead_bytes: overhead,
        steady_bytes_per_synapse: steady,
        peak_bytes_per_synapse: peak,
        resident_bytes: resident,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub grid: GridSpec,
    pub kernel: KernelKind,
    pub workers: usize,
    pub process_grid: (usize, usize),
    pub seed: u64,
    pub neurons: u64,
    pub recurrent_synapses: u64,
    pub expected_recurrent_synapses: f64,
    pub external_synapses: u64,
    pub steps: u64,
    pub timestep_ms: f64,
    pub sim_seconds: f64,
    pub construction_wall_seconds: f64,
    pub simulation_wall_seconds: f64,
    /// Slowest worker per substep.
    pub phases: PhaseTimes,
    pub recurrent_events: u64,
    pub external_events: u64,
    pub events_scheduled: u64,
    pub total_spikes: u64,
    pub spikes_excitatory: u64,
    pub spikes_inhibitory: u64,
    pub mean_rate_hz: f64,
    pub excitatory_rate_hz: f64,
    pub inhibitory_rate_hz: f64,
    pub ns_per_event: Option<f64>,
    pub checksum: SynapseChecksum,
    pub spike_digest: u64,
    pub memory: MemoryReport,
    pub delivery: DeliveryStats,
    pub per_worker: Vec<WorkerSummary>,
    #[serde(skip)]
    pub raster: Option<Vec<SpikeEvent>>,
}

fn rate(spikes: u64, neurons: u64, seconds: f64) -> f64 {
    if neurons == 0 || seconds <= 0.0 {
        0.0
    } else {
        spikes as f64 / (neurons as f64 * seconds)
    }
}

pub fn assemble_report(
    cfg: &SimConfig,
    stencil: &Stencil,
    pmap: &ProcessMap,
    mut summaries: Vec<WorkerSummary>,
    raster: Option<Vec<SpikeEvent>>,
) -> SimReport {
    summaries.sort_by_key(|s| s.rank);
    let grid = cfg.grid;
    let neurons = grid.neurons() as u64;
    let sum = |f: fn(&WorkerSummary) -> u64| summaries.iter().map(f).sum::<u64>();
    let mut checksum = SynapseChecksum::default();
    let mut phases = PhaseTimes::default();
    let mut delivery = DeliveryStats::default();
    let mut digest = 0u64;
    for s in &summaries {
        checksum.merge(&s.construction.checksum);
        phases.max_with(&s.phases);
        delivery.accumulate(&s.delivery);
        digest = digest.wrapping_add(s.spike_digest);
    }
    let spikes_e = sum(|s| s.spikes_excitatory);
    let spikes_i = sum(|s| s.spikes_inhibitory);
    let n_e = (grid.excitatory_per_column() * grid.columns()) as u64;
    let sim_seconds = cfg.steps() as f64 * cfg.timestep_ms() * 1e-3;
    let memory: Vec<WorkerMemory> = summaries.iter().map(|s| s.memory).collect();
    let mut report = SimReport {
        grid,
        kernel: cfg.kernel.kind,
        workers: summaries.len(),
        process_grid: (pmap.px, pmap.py),
        seed: cfg.seed,
        neurons,
        recurrent_synapses: sum(|s| s.memory.synapses_in),
        expected_recurrent_synapses: expected_recurrent_synapses(stencil, &grid),
        external_synapses: neurons * cfg.external.synapses_per_neuron as u64,
        steps: cfg.steps(),
        timestep_ms: cfg.timestep_ms(),
        sim_seconds,
        construction_wall_seconds: summaries
            .iter()
            .map(|s| s.construction.wall_seconds)
            .fold(0.0, f64::max),
        simulation_wall_seconds: summaries.iter().map(|s| s.sim_wall_seconds).fold(0.0, f64::max),
        phases,
        recurrent_events: sum(|s| s.recurrent_events),
        external_events: sum(|s| s.external_events),
        events_scheduled: sum(|s| s.events_scheduled),
        total_spikes: spikes_e + spikes_i,
        spikes_excitatory: spikes_e,
        spikes_inhibitory: spikes_i,
        mean_rate_hz: rate(spikes_e + spikes_i, neurons, sim_seconds),
        excitatory_rate_hz: rate(spikes_e, n_e, sim_seconds),
        inhibitory_rate_hz: rate(spikes_i, neurons - n_e, sim_seconds),
        ns_per_event: None,
        checksum,
        spike_digest: digest,
        memory: memory_accounting(&memory),
        delivery,
        per_worker: summaries,
        raster,
    };
    report.ns_per_event = normalized_cost(&report);
    report
}

/// Wall-clock nanoseconds per synaptic event, recurrent plus external.
/// Undefined when the run processed no events.
pub fn normalized_cost(report: &SimReport) -> Option<f64> {
    let events = report.recurrent_events + report.external_events;
    (events > 0).then(|| report.simulation_wall_seconds * 1e9 / events as f64)
}

/// Cost of `exponential` relative to `gaussian`, which must share grid,
/// worker count, and duration.
pub fn slowdown_comparison(gaussian: &SimReport, exponential: &SimReport) -> Result<f64, MetricsError> {
    if gaussian.grid != exponential.grid {
        return Err(MetricsError::Mismatch("grids differ".into()));
    }
    if gaussian.workers != exponential.workers {
        return Err(MetricsError::Mismatch("worker counts differ".into()));
    }
    if gaussian.steps != exponential.steps {
        return Err(MetricsError::Mismatch("durations differ".into()));
    }
    let g = normalized_cost(gaussian).ok_or(MetricsError::Undefined)?;
    let e = normalized_cost(exponential).ok_or(MetricsError::Undefined)?;
    Ok(e / g)
}

/// Analytic size of a network before it is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub grid: GridSpec,
    pub kernel: KernelKind,
    pub neurons: u64,
    pub stencil_window: usize,
    /// Fanout of a column far from the borders.
    pub fanout: Fanout,
    /// Fanout averaged over the grid.
    pub mean_fanout: Fanout,
    pub recurrent_synapses: f64,
    pub recurrent_synapses_sd: f64,
    pub external_synapses: f64,
    pub total_equivalent_synapses: f64,
    pub steady_bytes: f64,
    pub peak_bytes: f64,
}

pub fn forecast(grid: &GridSpec, kernel: &KernelSpec, external_per_neuron: u32) -> Forecast {
    let stencil = compute_stencil(kernel, grid);
    let recurrent = expected_recurrent_synapses(&stencil, grid);
    let neurons = grid.neurons() as u64;
    let external = neurons as f64 * external_per_neuron as f64;
    let rec = SYNAPSE_RECORD_BYTES as f64;
    Forecast {
        grid: *grid,
        kernel: kernel.kind,
        neurons,
        stencil_window: stencil.window(),
        fanout: expected_fanout(kernel, grid),
        mean_fanout: mean_fanout(&stencil, grid),
        recurrent_synapses: recurrent,
        recurrent_synapses_sd: recurrent_synapses_variance(&stencil, grid).sqrt(),
        external_synapses: external,
        total_equivalent_synapses: recurrent + external,
        steady_bytes: recurrent * rec,
        peak_bytes: recurrent * 2.0 * rec,
    }
}

/// Population firing statistics of a raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    pub mean_hz: f64,
    pub excitatory_hz: f64,
    pub inhibitory_hz: f64,
    pub bin_ms: f64,
    /// Population rate per bin.
    pub series_hz: Vec<f64>,
}

impl RateStats {
    pub fn peak_bin_hz(&self) -> f64 {
        self.series_hz.iter().copied().fold(0.0, f64::max)
    }
}

pub fn firing_rate_stats(
    raster: &[SpikeEvent],
    grid: &GridSpec,
    duration_s: f64,
    bin_ms: f64,
) -> RateStats {
    assert!(bin_ms > 0.0, "bin width must be positive");
    let neurons = grid.neurons() as u64;
    let n_e = (grid.excitatory_per_column() * grid.columns()) as u64;
    let bins = ((duration_s * 1000.0) / bin_ms).ceil().max(0.0) as usize;
    let mut series = vec![0u64; bins];
    let mut exc = 0u64;
    for s in raster {
        if grid.is_excitatory(s.source) {
            exc += 1;
        }
        let b = (s.time / bin_ms) as usize;
        if let Some(slot) = series.get_mut(b) {
            *slot += 1;
        }
    }
    let total = raster.len() as u64;
    RateStats {
        mean_hz: rate(total, neurons, duration_s),
        excitatory_hz: rate(exc, n_e, duration_s),
        inhibitory_hz: rate(total - exc, neurons - n_e, duration_s),
        bin_ms,
        series_hz: series
            .into_iter()
            .map(|c| rate(c, neurons, bin_ms * 1e-3))
            .collect(),
    }
}

/// A numeric cell that is written as `NA` when absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Na<T>(pub Option<T>);

impl<T: fmt::Display> Serialize for Na<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match &self.0 {
            Some(v) => s.serialize_str(&v.to_string()),
            None => s.serialize_str("NA"),
        }
    }
}

impl<'de, T> Deserialize<'de> for Na<T>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "NA" {
            return Ok(Na(None));
        }
        s.parse().map(|v| Na(Some(v))).map_err(serde::de::Error::custom)
    }
}

/// One line of a scaling table. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub grid: String,
    pub workers: usize,
    pub kernel: String,
    pub sim_seconds: f64,
    pub wall_seconds: Na<f64>,
    pub recurrent_events: Na<u64>,
    pub external_events: Na<u64>,
    pub ns_per_event: Na<f64>,
    pub speedup: Na<f64>,
    pub efficiency: Na<f64>,
    pub bytes_per_synapse_steady: Na<f64>,
    pub bytes_per_synapse_peak: Na<f64>,
    pub mean_rate_hz: Na<f64>,
}

pub const SCALING_HEADER: &str = "grid,workers,kernel,sim_seconds,wall_seconds,recurrent_events,external_events,ns_per_event,speedup,efficiency,bytes_per_synapse_steady,bytes_per_synapse_peak,mean_rate_hz";

pub fn grid_label(grid: &GridSpec) -> String {
    format!("{}x{}", grid.nx, grid.ny)
}

impl ScalingRow {
    pub fn from_report(r: &SimReport) -> Self {
        Self {
            grid: grid_label(&r.grid),
            workers: r.workers,
            kernel: r.kernel.to_string(),
            sim_seconds: r.sim_seconds,
            wall_seconds: Na(Some(r.simulation_wall_seconds)),
            recurrent_events: Na(Some(r.recurrent_events)),
            external_events: Na(Some(r.external_events)),
            ns_per_event: Na(r.ns_per_event),
            speedup: Na(None),
            efficiency: Na(None),
            bytes_per_synapse_steady: Na(Some(r.memory.steady_bytes_per_synapse)),
            bytes_per_synapse_peak: Na(Some(r.memory.peak_bytes_per_synapse)),
            mean_rate_hz: Na(Some(r.mean_rate_hz)),
        }
    }

    fn failed(cfg: &SimConfig, workers: usize) -> Self {
        Self {
            grid: grid_label(&cfg.grid),
            workers,
            kernel: cfg.kernel.kind.to_string(),
            sim_seconds: cfg.steps() as f64 * cfg.timestep_ms() * 1e-3,
            wall_seconds: Na(None),
            recurrent_events: Na(None),
            external_events: Na(None),
            ns_per_event: Na(None),
            speedup: Na(None),
            efficiency: Na(None),
            bytes_per_synapse_steady: Na(None),
            bytes_per_synapse_peak: Na(None),
            mean_rate_hz: Na(None),
        }
    }
}

pub fn write_scaling_csv<W: io::Write>(w: W, rows: &[ScalingRow]) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    if rows.is_empty() {
        out.write_record(SCALING_HEADER.split(','))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scaling_csv<R: io::Read>(r: R) -> Result<Vec<ScalingRow>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != SCALING_HEADER {
        return Err(MetricsError::Mismatch(format!("unexpected header {}", header.join(","))));
    }
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Fixed network, growing worker count.
    Strong,
    /// Network grown with the worker count at constant columns per worker.
    Weak,
}

/// Grid for `workers` in weak scaling: each side grows with the square
/// root of the worker count.
pub fn weak_scaled_grid(base: &GridSpec, base_workers: usize, workers: usize) -> GridSpec {
    let f = (workers as f64 / base_workers as f64).sqrt();
    GridSpec {
        nx: ((base.nx as f64 * f).round() as usize).max(1),
        ny: ((base.ny as f64 * f).round() as usize).max(1),
        ..*base
    }
}

#[derive(Debug)]
pub struct ScalingTable {
    pub mode: ScalingMode,
    pub rows: Vec<ScalingRow>,
    pub reports: Vec<SimReport>,
    /// Worker counts that failed, with the error.
    pub failures: Vec<(usize, String)>,
}

/// Runs `cfg` at each worker count and derives speedup and efficiency
/// relative to the smallest successful count. Failed runs stay in the
/// table with `NA` measurements.
pub fn scaling_harness(
    cfg: &SimConfig,
    worker_counts: &[usize],
    mode: ScalingMode,
    mut runner: impl FnMut(&SimConfig, usize) -> Result<SimReport, SimError>,
) -> ScalingTable {
    let mut counts = worker_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let base_workers = counts.first().copied().unwrap_or(1);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut baseline: Option<(usize, f64)> = None;
    for &k in &counts {
        let mut c = cfg.clone();
        if mode == ScalingMode::Weak {
            c.grid = weak_scaled_grid(&cfg.grid, base_workers, k);
        }
        match runner(&c, k) {
            Ok(rep) => {
                let mut row = ScalingRow::from_report(&rep);
                let t = rep.simulation_wall_seconds;
                let (bk, bt) = *baseline.get_or_insert((k, t));
                if t > 0.0 {
                    let ratio = bt / t;
                    let speedup = match mode {
                        ScalingMode::Strong => ratio * bk as f64,
                        ScalingMode::Weak => ratio * (k as f64 / bk as f64) * bk as f64,
                    };
                    row.speedup = Na(Some(speedup));
                    row.efficiency = Na(Some(speedup / k as f64));
                }
                rows.push(row);
                reports.push(rep);
            }
            Err(e) => {
                rows.push(ScalingRow::failed(&c, k));
                failures.push((k, e.to_string()));
            }
        }
    }
    ScalingTable {
        mode,
        rows,
        reports,
        failures,
    }
}
