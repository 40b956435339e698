//! The simulation loop. Each worker owns a block of columns; every timestep
//! it ships last step's spikes, expands received spikes into delayed
//! synaptic inputs, and integrates each neuron's sorted input queue in
//! closed form.

use std::time::Instant;

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectivity::{
    compute_stencil, expected_recurrent_synapses, ConnectivityError, GridSpec, Stencil,
};
use crate::construction::{construct_network, ExchangeError, NetworkSpec, WorkerNetwork};
use crate::delivery::deliver_spikes;
use crate::metrics::{
    assemble_report, spike_fingerprint, PhaseTimes, SimReport, WorkerMemory, WorkerSummary,
};
use crate::model::{
    integrate_input_queue, InputEvent, NeuronParams, NeuronState, ParamError, SpikeEvent,
    EXTERNAL_SOURCE,
};
use crate::partition::{map_columns_to_workers, PartitionError, ProcessMap};
use crate::rng::{KeyedRng, Purpose};
use crate::transport::{gather_to_root, in_process_group, Transport, TransportError, DEFAULT_TIMEOUT};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Connectivity(#[from] ConnectivityError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("estimated memory {estimated} bytes exceeds the budget of {budget} bytes")]
    MemoryBudget { estimated: u64, budget: u64 },
    #[error("worker {rank}: pending synaptic inputs need {bytes} bytes, over the share of the memory budget")]
    ActivityOverflow { rank: usize, bytes: u64 },
    #[error("worker {0} panicked")]
    WorkerPanic(usize),
    #[error("malformed worker summary: {0}")]
    Summary(String),
}

/// Afferent drive from outside the simulated network, modelled as one
/// Poisson process per neuron.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalInputSpec {
    pub synapses_per_neuron: u32,
    pub rate_hz: f64,
    pub weight_mv: f64,
}

impl ExternalInputSpec {
    pub fn quiet() -> Self {
        Self {
            synapses_per_neuron: 0,
            rate_hz: 0.0,
            weight_mv: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.rate_hz >= 0.0 && self.rate_hz.is_finite()) {
            return Err(SimError::Config("external rate must be >= 0".into()));
        }
        if !(self.weight_mv >= 0.0 && self.weight_mv.is_finite()) {
            return Err(SimError::Config("external weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Mean number of external events per neuron and step of `dt_ms`.
    pub fn mean_per_step(&self, dt_ms: f64) -> f64 {
        self.synapses_per_neuron as f64 * self.rate_hz * dt_ms * 1e-3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialPotential {
    /// Uniform in `[V_r, V_theta)`.
    Uniform,
    /// Every neuron at its resting potential.
    Rest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub kernel: crate::connectivity::KernelSpec,
    /// Also carries the timestep and maximum delay.
    pub synapses: crate::connectivity::SynapseGenSpec,
    pub excitatory: NeuronParams,
    pub inhibitory: NeuronParams,
    pub external: ExternalInputSpec,
    pub duration_s: f64,
    pub seed: u64,
    pub init: InitialPotential,
    pub record_raster: bool,
    pub memory_budget_bytes: u64,
    /// Records every injected input; test and debugging aid.
    #[serde(default)]
    pub trace_injections: bool,
}

impl SimConfig {
    /// A reference-geometry configuration with simulator default dynamics.
    pub fn reference(grid: GridSpec, kernel: crate::connectivity::KernelSpec) -> Self {
        Self {
            grid,
            kernel,
            synapses: crate::connectivity::SynapseGenSpec::default(),
            excitatory: NeuronParams::excitatory(),
            inhibitory: NeuronParams::inhibitory(),
            external: ExternalInputSpec {
                synapses_per_neuron: 420,
                rate_hz: 8.0,
                weight_mv: 0.4,
            },
            duration_s: 1.0,
            seed: 1,
            init: InitialPotential::Uniform,
            record_raster: false,
            memory_budget_bytes: 4 << 30,
            trace_injections: false,
        }
    }

    #[inline]
    pub fn timestep_ms(&self) -> f64 {
        self.synapses.timestep_ms
    }

    pub fn steps(&self) -> u64 {
        (self.duration_s * 1000.0 / self.timestep_ms()).round() as u64
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            grid: self.grid,
            kernel: self.kernel,
            synapses: self.synapses,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.grid.validate()?;
        self.kernel.validate()?;
        self.synapses.validate()?;
        self.excitatory.validate()?;
        self.inhibitory.validate()?;
        self.external.validate()?;
        if !self.excitatory.is_excitatory || self.inhibitory.is_excitatory {
            return Err(SimError::Config("population parameter sets are swapped".into()));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(SimError::Config("duration must be >= 0".into()));
        }
        Ok(())
    }

    /// Resident memory the run is expected to need, summed over workers.
    pub fn estimated_memory_bytes(&self, stencil: &Stencil) -> u64 {
        let synapses = expected_recurrent_synapses(stencil, &self.grid);
        let neurons = self.grid.neurons() as f64;
        let dt = self.timestep_ms();
        let fanout = synapses / neurons.max(1.0);
        // Per-step input buffers in a 10 Hz regime, plus the delay groups
        // waiting across the window.
        let rate = 10.0 * dt * 1e-3;
        let step_buffers = neurons * rate * fanout * 40.0;
        let ring = neurons * rate * self.synapses.max_delay_steps as f64 * self.synapses.max_delay_steps as f64 * 16.0;
        let index = neurons * (self.synapses.max_delay_steps as f64 + 3.0) * 4.0 * 2.0;
        (synapses * 8.0 + index + neurons * 48.0 + step_buffers + ring) as u64
    }
}

/// Precomputed Poisson law of the external drive for one timestep.
#[derive(Debug, Clone)]
pub struct ExternalDrive {
    spec: ExternalInputSpec,
    dt_ms: f64,
    poisson: Option<Poisson<f64>>,
}

impl ExternalDrive {
    pub fn new(spec: ExternalInputSpec, dt_ms: f64) -> Self {
        let mean = spec.mean_per_step(dt_ms);
        Self {
            spec,
            dt_ms,
            poisson: (mean > 0.0).then(|| Poisson::new(mean).expect("positive finite mean")),
        }
    }

    pub fn is_active(&self) -> bool {
        self.poisson.is_some()
    }

    /// Appends the external inputs of `gid` during `step`, sorted by time.
    #[inline]
    pub fn events(&self, seed: u64, gid: u32, step: u64, out: &mut Vec<InputEvent>) -> usize {
        let Some(poisson) = &self.poisson else {
            return 0;
        };
        let mut rng = KeyedRng::new(seed, Purpose::External, gid as u64, step);
        let n = poisson.sample(&mut rng) as usize;
        let start = out.len();
        let t0 = step as f64 * self.dt_ms;
        for _ in 0..n {
            out.push(InputEvent {
                time: t0 + rng.uniform() * self.dt_ms,
                weight: self.spec.weight_mv as f32,
                source: EXTERNAL_SOURCE,
            });
        }
        out[start..].sort_by(|a, b| a.time.total_cmp(&b.time));
        n
    }
}

/// External inputs of neuron `gid` during `step`: a Poisson count with mean
/// `synapses_per_neuron * rate * dt`, each at a uniform time within the step.
pub fn generate_external_events(
    gid: u32,
    step: u64,
    spec: &ExternalInputSpec,
    dt_ms: f64,
    seed: u64,
) -> Vec<(f64, f32)> {
    let mut out = Vec::new();
    ExternalDrive::new(*spec, dt_ms).events(seed, gid, step, &mut out);
    out.into_iter().map(|e| (e.time, e.weight)).collect()
}

/// Initial state of neuron `gid`; depends only on the seed and the id.
pub fn initial_state(
    gid: u32,
    params: &NeuronParams,
    init: InitialPotential,
    seed: u64,
) -> NeuronState {
    match init {
        InitialPotential::Rest => NeuronState::at_rest(params),
        InitialPotential::Uniform => {
            let u = KeyedRng::new(seed, Purpose::InitialState, gid as u64, 0).uniform();
            let v = params.v_reset + u * (params.v_theta - params.v_reset);
            // Guard the open upper end against rounding.
            NeuronState::with_potential(v.min(next_down(params.v_theta)))
        }
    }
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(if x > 0.0 { x.to_bits() - 1 } else { x.to_bits() + 1 })
}

pub fn initialize_states(
    gids: impl Iterator<Item = u32>,
    grid: &GridSpec,
    cfg: &SimConfig,
) -> Vec<NeuronState> {
    gids.map(|g| {
        let p = if grid.is_excitatory(g) {
            &cfg.excitatory
        } else {
            &cfg.inhibitory
        };
        initial_state(g, p, cfg.init, cfg.seed)
    })
    .collect()
}

/// One delay group of a received spike: every synapse of `source` with
/// delay `delay` becomes due at the same step and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledGroup {
    pub time: f64,
    pub source: u32,
    pub delay: u16,
}

/// Circular buffer of per-timestep buckets covering the delay window.
#[derive(Debug)]
pub struct DelayRing<T> {
    buckets: Vec<Vec<T>>,
    current: u64,
}

impl<T> DelayRing<T> {
    pub fn new(max_delay: u16) -> Self {
        Self {
            buckets: (0..max_delay.max(1)).map(|_| Vec::new()).collect(),
            current: 0,
        }
    }

    /// Queues an input for `arrival_step`, which must lie within the
    /// window `[current, current + max_delay)`.
    #[inline]
    pub fn insert(&mut self, arrival_step: u64, input: T) {
        let n = self.buckets.len() as u64;
        assert!(
            arrival_step >= self.current && arrival_step < self.current + n,
            "arrival step {arrival_step} outside delay window at step {}",
            self.current
        );
        self.buckets[(arrival_step % n) as usize].push(input);
    }

    /// Empties and returns the bucket of `step`, then advances the window.
    pub fn drain(&mut self, step: u64, into: &mut Vec<T>) {
        assert_eq!(step, self.current, "delay ring drained out of order");
        let n = self.buckets.len() as u64;
        let bucket = &mut self.buckets[(step % n) as usize];
        std::mem::swap(bucket, into);
        bucket.clear();
        self.current += 1;
    }

    pub fn pending(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn capacity_bytes(&self) -> usize {
        self.buckets.iter().map(|b| b.capacity()).sum::<usize>() * std::mem::size_of::<T>()
    }
}

/// One injected input, recorded when tracing is on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub step: u64,
    pub target: u32,
    pub source: u32,
    pub time: f64,
}

/// State and loop of one worker.
pub struct WorkerSim<'a> {
    cfg: &'a SimConfig,
    net: WorkerNetwork,
    states: Vec<NeuronState>,
    excitatory_per_column: usize,
    ring: DelayRing<ScheduledGroup>,
    /// Resident bytes of everything but the per-step buffers.
    static_bytes: u64,
    drive: ExternalDrive,
    step: u64,
    pending: Vec<SpikeEvent>,
    outgoing: Vec<Vec<SpikeEvent>>,
    raster: Vec<SpikeEvent>,
    injections: Vec<Injection>,
    // Scratch buffers reused every step.
    due: Vec<ScheduledGroup>,
    offsets: Vec<u32>,
    queue: Vec<InputEvent>,
    staging: Vec<InputEvent>,
    ext_counts: Vec<u32>,
    cursor: Vec<u32>,
    fired: Vec<f64>,
    pub summary: WorkerSummary,
    ring_peak_bytes: usize,
}

impl<'a> WorkerSim<'a> {
    /// Runs construction for this worker (collective).
    pub fn build(
        t: &mut dyn Transport,
        cfg: &'a SimConfig,
        stencil: &Stencil,
        pmap: &ProcessMap,
    ) -> Result<Self, SimError> {
        let net = construct_network(t, &cfg.network_spec(), stencil, pmap)?;
        let grid = &cfg.grid;
        let n_local = net.layout.len();
        let states = initialize_states((0..n_local).map(|l| net.layout.gid(l)), grid, cfg);
        let summary = WorkerSummary {
            rank: t.rank(),
            neurons: n_local as u64,
            columns: net.layout.columns.len() as u64,
            construction: net.stats.clone(),
            ..Default::default()
        };
        let static_bytes = (net.incoming.synapse_bytes()
            + net.incoming.index_bytes()
            + net.routing_bytes()
            + states.len() * std::mem::size_of::<NeuronState>()) as u64;
        Ok(Self {
            cfg,
            static_bytes,
            excitatory_per_column: grid.excitatory_per_column(),
            ring: DelayRing::new(cfg.synapses.max_delay_steps),
            drive: ExternalDrive::new(cfg.external, cfg.timestep_ms()),
            step: 0,
            pending: Vec::new(),
            outgoing: vec![Vec::new(); t.size()],
            raster: Vec::new(),
            injections: Vec::new(),
            due: Vec::new(),
            offsets: vec![0; n_local + 1],
            queue: Vec::new(),
            staging: Vec::new(),
            ext_counts: Vec::new(),
            cursor: Vec::new(),
            fired: Vec::new(),
            summary,
            ring_peak_bytes: 0,
            states,
            net,
        })
    }

    pub fn network(&self) -> &WorkerNetwork {
        &self.net
    }

    pub fn states(&self) -> &[NeuronState] {
        &self.states
    }

    pub fn raster(&self) -> &[SpikeEvent] {
        &self.raster
    }

    pub fn injections(&self) -> &[Injection] {
        &self.injections
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    #[inline]
    fn params(&self, local: usize) -> &NeuronParams {
        if local % self.cfg.grid.neurons_per_column < self.excitatory_per_column {
            &self.cfg.excitatory
        } else {
            &self.cfg.inhibitory
        }
    }

    /// Queues a spike of an owned neuron as if it had fired during the
    /// previous step.
    pub fn force_spike(&mut self, gid: u32, time: f64) {
        assert!(self.net.layout.local_id(gid).is_some(), "neuron {gid} not owned here");
        self.pending.push(SpikeEvent { source: gid, time });
    }

    /// Advances one timestep. Collective over the worker group.
    pub fn step(&mut self, t: &mut dyn Transport) -> Result<(), SimError> {
        let step = self.step;
        let dt = self.cfg.timestep_ms();
        let seed = self.cfg.seed;
        let mut clock = Instant::now();
        let mut lap = |slot: &mut f64| {
            let now = Instant::now();
            *slot += (now - clock).as_secs_f64();
            clock = now;
        };
        let mut phases = PhaseTimes::default();

        // (1) spikes of the previous step, canonical order.
        self.pending
            .sort_by(|a, b| a.time.total_cmp(&b.time).then(a.source.cmp(&b.source)));
        for s in &self.pending {
            let local = self.net.layout.local_id(s.source).expect("owned spike");
            for &w in self.net.target_workers_of(local) {
                self.outgoing[w as usize].push(*s);
            }
        }
        self.pending.clear();
        lap(&mut phases.collect);

        // (2) two-phase exchange.
        let (incoming, delivery) =
            deliver_spikes(t, &self.net.directory, step, &mut self.outgoing)?;
        lap(&mut phases.exchange);

        // (3) arborization: each delay group of a received spike is due at
        // emission step + delay. Emission happened in step - 1.
        let mut scheduled = 0u64;
        if step > 0 {
            let emission_step = step - 1;
            let ring = &mut self.ring;
            for msg in &incoming {
                for s in &msg.spikes {
                    scheduled += self.net.incoming.arborize(s.source, |d, _, _| {
                        ring.insert(
                            emission_step + d as u64,
                            ScheduledGroup {
                                time: s.time + d as f64 * dt,
                                source: s.source,
                                delay: d,
                            },
                        );
                    }) as u64;
                }
            }
        } else {
            debug_assert!(incoming.is_empty());
        }
        self.ring.drain(step, &mut self.due);
        let due_events: usize = self
            .due
            .iter()
            .map(|g| self.net.incoming.group(g.source, g.delay).0.len())
            .sum();
        let share = self.cfg.memory_budget_bytes / t.size() as u64;
        let transient = due_events * std::mem::size_of::<InputEvent>();
        let needed = self.static_bytes + (self.ring.capacity_bytes() + transient) as u64;
        if needed > share {
            return Err(SimError::ActivityOverflow {
                rank: t.rank(),
                bytes: needed,
            });
        }
        lap(&mut phases.arborize);

        // (4) add external inputs to this step's recurrent inputs, (5) sort per neuron.
        let recurrent = due_events as u64;
        let n_local = self.states.len();
        let db = &self.net.incoming;
        self.offsets.iter_mut().for_each(|o| *o = 0);
        for g in &self.due {
            for &target in db.group(g.source, g.delay).0 {
                self.offsets[target as usize + 1] += 1;
            }
        }
        let mut external = 0u64;
        self.staging.clear();
        self.ext_counts.clear();
        if self.drive.is_active() {
            for local in 0..n_local {
                let gid = self.net.layout.gid(local);
                let n = self.drive.events(seed, gid, step, &mut self.staging) as u32;
                self.ext_counts.push(n);
                self.offsets[local + 1] += n;
                external += n as u64;
            }
        }
        for i in 0..n_local {
            self.offsets[i + 1] += self.offsets[i];
        }
        let total = self.offsets[n_local] as usize;
        self.queue.clear();
        self.queue.resize(
            total,
            InputEvent {
                time: 0.0,
                weight: 0.0,
                source: 0,
            },
        );
        self.ring_peak_bytes = self.ring_peak_bytes.max(
            self.ring.capacity_bytes()
                + self.due.capacity() * std::mem::size_of::<ScheduledGroup>()
                + self.queue.capacity() * std::mem::size_of::<InputEvent>(),
        );
        self.cursor.clear();
        self.cursor.extend_from_slice(&self.offsets[..n_local]);
        let cursor = &mut self.cursor;
        for g in &self.due {
            let (targets, weights) = db.group(g.source, g.delay);
            for (&target, &weight) in targets.iter().zip(weights) {
                let c = &mut cursor[target as usize];
                self.queue[*c as usize] = InputEvent {
                    time: g.time,
                    weight,
                    source: g.source,
                };
                *c += 1;
            }
        }
        let mut k = 0usize;
        for (local, &n) in self.ext_counts.iter().enumerate() {
            let c = cursor[local] as usize;
            let n = n as usize;
            self.queue[c..c + n].copy_from_slice(&self.staging[k..k + n]);
            k += n;
        }
        if self.cfg.trace_injections {
            for g in &self.due {
                for &target in db.group(g.source, g.delay).0 {
                    self.injections.push(Injection {
                        step,
                        target: self.net.layout.gid(target as usize),
                        source: g.source,
                        time: g.time,
                    });
                }
            }
        }
        for local in 0..n_local {
            let (a, b) = (self.offsets[local] as usize, self.offsets[local + 1] as usize);
            if b - a > 1 {
                self.queue[a..b].sort_by(|x, y| {
                    x.time.total_cmp(&y.time).then(x.source.cmp(&y.source))
                });
            }
        }
        lap(&mut phases.sort);

        // (6) event-driven integration.
        for local in 0..n_local {
            let (a, b) = (self.offsets[local] as usize, self.offsets[local + 1] as usize);
            if a == b {
                continue;
            }
            self.fired.clear();
            let params = *self.params(local);
            self.states[local] =
                integrate_input_queue(&self.states[local], &params, &self.queue[a..b], &mut self.fired);
            if !self.fired.is_empty() {
                let gid = self.net.layout.gid(local);
                for &time in &self.fired {
                    let spike = SpikeEvent { source: gid, time };
                    self.summary.spike_digest =
                        self.summary.spike_digest.wrapping_add(spike_fingerprint(&spike));
                    self.pending.push(spike);
                }
                if params.is_excitatory {
                    self.summary.spikes_excitatory += self.fired.len() as u64;
                } else {
                    self.summary.spikes_inhibitory += self.fired.len() as u64;
                }
            }
        }
        if self.cfg.record_raster {
            let start = self.raster.len();
            self.raster.extend_from_slice(&self.pending);
            self.raster[start..]
                .sort_by(|a, b| a.time.total_cmp(&b.time).then(a.source.cmp(&b.source)));
        }
        lap(&mut phases.integrate);

        self.summary.recurrent_events += recurrent;
        self.summary.external_events += external;
        self.summary.events_scheduled += scheduled;
        self.summary.delivery.accumulate(&delivery);
        self.summary.phases.accumulate(&phases);
        self.step += 1;
        Ok(())
    }
}

fn check_budget(cfg: &SimConfig, stencil: &Stencil) -> Result<(), SimError> {
    let estimated = cfg.estimated_memory_bytes(stencil);
    if estimated > cfg.memory_budget_bytes {
        return Err(SimError::MemoryBudget {
            estimated,
            budget: cfg.memory_budget_bytes,
        });
    }
    Ok(())
}

fn encode_outcome(summary: &WorkerSummary, raster: &[SpikeEvent]) -> Vec<u8> {
    let json = serde_json::to_vec(summary).expect("summary serializes");
    let mut out = Vec::with_capacity(8 + json.len() + raster.len() * 12);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crate::partition::encode_spikes(raster));
    out
}

fn decode_outcome(bytes: &[u8]) -> Result<(WorkerSummary, Vec<SpikeEvent>), SimError> {
    let bad = |m: String| SimError::Summary(m);
    let head: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("truncated header".into()))?;
    let n = u64::from_le_bytes(head) as usize;
    let json = bytes.get(8..8 + n).ok_or_else(|| bad("truncated body".into()))?;
    let summary = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    let raster =
        crate::partition::decode_spikes(&bytes[8 + n..]).map_err(|e| bad(e.to_string()))?;
    Ok((summary, raster))
}

/// Runs one worker of a simulation: construction, the timestep loop, and
/// the merge of per-worker results. Collective; returns the report on
/// worker 0 only.
pub fn run_worker(t: &mut dyn Transport, cfg: &SimConfig) -> Result<Option<SimReport>, SimError> {
    cfg.validate()?;
    let stencil = compute_stencil(&cfg.kernel, &cfg.grid);
    check_budget(cfg, &stencil)?;
    let pmap = map_columns_to_workers(&cfg.grid, t.size())?;

    t.barrier()?;
    let mut sim = WorkerSim::build(t, cfg, &stencil, &pmap)?;

    let steps = cfg.steps();
    t.barrier()?;
    let started = Instant::now();
    for _ in 0..steps {
        sim.step(t)?;
    }
    t.barrier()?;
    sim.summary.sim_wall_seconds = started.elapsed().as_secs_f64();
    sim.summary.memory = WorkerMemory {
        synapses_in: sim.net.incoming.synapse_count() as u64,
        synapses_out: sim.net.stats.synapses_generated,
        synapse_array_bytes: sim.net.incoming.synapse_bytes() as u64,
        index_bytes: sim.net.incoming.index_bytes() as u64,
        routing_bytes: sim.net.routing_bytes() as u64,
        state_bytes: (sim.states.len() * std::mem::size_of::<NeuronState>()) as u64,
        ring_peak_bytes: sim.ring_peak_bytes as u64,
    };

    let payload = encode_outcome(&sim.summary, &sim.raster);
    drop(sim);
    let Some(parts) = gather_to_root(t, payload)? else {
        return Ok(None);
    };
    let mut summaries = Vec::with_capacity(parts.len());
    let mut raster = Vec::new();
    for part in &parts {
        let (s, r) = decode_outcome(part)?;
        summaries.push(s);
        raster.extend(r);
    }
    raster.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.source.cmp(&b.source)));
    Ok(Some(assemble_report(
        cfg,
        &stencil,
        &pmap,
        summaries,
        cfg.record_raster.then_some(raster),
    )))
}

/// Runs a simulation with `workers` threads connected in process.
pub fn run(cfg: &SimConfig, workers: usize) -> Result<SimReport, SimError> {
    if workers == 0 {
        return Err(PartitionError::NoWorkers.into());
    }
    // Reject early so no thread starts on an impossible configuration.
    cfg.validate()?;
    check_budget(cfg, &compute_stencil(&cfg.kernel, &cfg.grid))?;
    map_columns_to_workers(&cfg.grid, workers)?;

    let endpoints = in_process_group(workers, DEFAULT_TIMEOUT);
    let results: Vec<Result<Option<SimReport>, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|mut ep| s.spawn(move || run_worker(&mut ep, cfg)))
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| h.join().unwrap_or(Err(SimError::WorkerPanic(rank))))
            .collect()
    });
    first_failure(results)
}

/// Picks the report of worker 0, or the most informative error: a failure
/// that is not a consequence of a peer disconnecting.
pub fn first_failure(
    results: Vec<Result<Option<SimReport>, SimError>>,
) -> Result<SimReport, SimError> {
    let mut report = None;
    let mut secondary = None;
    let mut primary = None;
    for r in results {
        match r {
            Ok(Some(rep)) => report = Some(rep),
            Ok(None) => {}
            Err(e) if is_peer_fallout(&e) => {
                secondary.get_or_insert(e);
            }
            Err(e) => {
                primary.get_or_insert(e);
            }
        }
    }
    if let Some(e) = primary.or(secondary) {
        return Err(e);
    }
    report.ok_or_else(|| SimError::Summary("worker 0 produced no report".into()))
}

fn is_peer_fallout(e: &SimError) -> bool {
    let transport = match e {
        SimError::Transport(t) => t,
        SimError::Exchange(ExchangeError::Transport { source, .. }) => source,
        _ => return false,
    };
    matches!(transport, TransportError::Disconnected { .. } | TransportError::Timeout { .. })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::KernelSpec;

    fn tiny() -> SimConfig {
        let mut cfg = SimConfig::reference(
            GridSpec {
                nx: 4,
                ny: 4,
                spacing_um: 100.0,
                neurons_per_column: 50,
                excitatory_fraction: 0.8,
            },
            KernelSpec::reference_gaussian(),
        );
        cfg.duration_s = 0.05;
        cfg.external = ExternalInputSpec {
            synapses_per_neuron: 100,
            rate_hz: 20.0,
            weight_mv: 1.0,
        };
        cfg
    }

    #[test]
    fn ring_returns_inputs_at_their_arrival_step() {
        let mut ring = DelayRing::new(4);
        ring.insert(3, 3u32);
        ring.insert(1, 1);
        ring.insert(0, 0);
        let mut out = Vec::new();
        for step in 0..4u64 {
            ring.drain(step, &mut out);
            let want: Vec<u32> = if step == 2 { vec![] } else { vec![step as u32] };
            assert_eq!(out, want);
        }
        assert_eq!(ring.pending(), 0);
    }

    #[test]
    #[should_panic(expected = "outside delay window")]
    fn ring_rejects_arrival_beyond_window() {
        let mut ring = DelayRing::new(4);
        ring.insert(4, 0u32);
    }

    #[test]
    fn external_events_are_sorted_inside_the_step() {
        let spec = ExternalInputSpec {
            synapses_per_neuron: 1000,
            rate_hz: 10.0,
            weight_mv: 0.5,
        };
        let ev = generate_external_events(7, 12, &spec, 1.0, 3);
        assert!(!ev.is_empty());
        assert!(ev.windows(2).all(|w| w[0].0 <= w[1].0));
        assert!(ev.iter().all(|&(t, w)| (12.0..13.0).contains(&t) && w == 0.5));
        assert_eq!(ev, generate_external_events(7, 12, &spec, 1.0, 3));
        assert!(generate_external_events(7, 12, &ExternalInputSpec::quiet(), 1.0, 3).is_empty());
    }

    #[test]
    fn initial_potentials_lie_below_threshold() {
        let p = NeuronParams::excitatory();
        for gid in 0..1000 {
            let s = initial_state(gid, &p, InitialPotential::Uniform, 9);
            assert!(s.v >= p.v_reset && s.v < p.v_theta);
        }
        assert_eq!(initial_state(3, &p, InitialPotential::Rest, 9).v, p.e_rest);
    }

    #[test]
    fn identical_rasters_for_one_and_two_workers() {
        let mut cfg = tiny();
        cfg.record_raster = true;
        let a = run(&cfg, 1).unwrap();
        let b = run(&cfg, 2).unwrap();
        assert!(a.total_spikes > 0);
        assert_eq!(a.raster, b.raster);
        assert_eq!(a.recurrent_events, b.recurrent_events);
        assert_eq!(a.external_events, b.external_events);
    }

    #[test]
    fn budget_rejection_happens_before_any_work() {
        let mut cfg = tiny();
        cfg.memory_budget_bytes = 1;
        assert!(matches!(run(&cfg, 1), Err(SimError::MemoryBudget { .. })));
    }
}
