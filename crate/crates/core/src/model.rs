//! Point neuron dynamics: leaky integrate-and-fire with spike-frequency
//! adaptation, driven by instantaneous synaptic jumps.
//!
//! Between inputs the membrane potential `V` and fatigue `c` follow
//!
//! ```text
//! dV/dt = -(V - E)/tau_m - g_c * c / C_m
//! dc/dt = -c / tau_c
//! ```
//!
//! which is linear and is advanced in closed form. Inputs are Dirac jumps of
//! `V`; crossing `V_theta` emits a spike, resets `V` to `V_r` for `tau_arp`
//! and increments `c` by `alpha_c`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative separation of `tau_m` and `tau_c` below which the confluent
/// solution is used.
const CONFLUENT_REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid neuron parameter `{name}`: {reason}")]
pub struct ParamError {
    pub name: &'static str,
    pub reason: String,
}

/// Constants of one neuron population. Times in ms, potentials in mV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub tau_m: f64,
    pub c_m: f64,
    pub e_rest: f64,
    pub tau_c: f64,
    pub g_c: f64,
    pub v_theta: f64,
    pub v_reset: f64,
    pub tau_arp: f64,
    pub alpha_c: f64,
    pub is_excitatory: bool,
}

impl NeuronParams {
    /// Default excitatory population. These numbers are simulator defaults,
    /// chosen as typical LIF-with-adaptation values; override them per
    /// population in the run configuration.
    pub fn excitatory() -> Self {
        Self {
            tau_m: 20.0,
            c_m: 1.0,
            e_rest: -65.0,
            tau_c: 150.0,
            g_c: 0.5,
            v_theta: -50.0,
            v_reset: -65.0,
            tau_arp: 2.0,
            alpha_c: 1.0,
            is_excitatory: true,
        }
    }

    /// Default inhibitory population: same membrane, no adaptation.
    pub fn inhibitory() -> Self {
        Self {
            is_excitatory: false,
            ..Self::excitatory()
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let err = |name, reason: &str| {
            Err(ParamError {
                name,
                reason: reason.to_owned(),
            })
        };
        let finite = [
            self.tau_m,
            self.c_m,
            self.e_rest,
            self.tau_c,
            self.g_c,
            self.v_theta,
            self.v_reset,
            self.tau_arp,
            self.alpha_c,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return err("neuron", "all parameters must be finite");
        }
        if self.tau_m <= 0.0 {
            return err("tau_m", "must be > 0");
        }
        if self.tau_c <= 0.0 {
            return err("tau_c", "must be > 0");
        }
        if self.c_m <= 0.0 {
            return err("C_m", "must be > 0");
        }
        if self.tau_arp < 0.0 {
            return err("tau_arp", "must be >= 0");
        }
        if self.v_reset >= self.v_theta {
            return err("V_r", "must be below V_theta");
        }
        if self.e_rest >= self.v_theta {
            return err("E", "must be below V_theta");
        }
        // A negative coupling or increment would make adaptation depolarizing
        // and allow threshold crossings between input events.
        if self.g_c < 0.0 {
            return err("g_c", "must be >= 0");
        }
        if self.alpha_c < 0.0 {
            return err("alpha_c", "must be >= 0");
        }
        Ok(())
    }

    /// Adaptation coupling actually applied; zero for inhibitory neurons.
    #[inline]
    pub fn effective_g_c(&self) -> f64 {
        if self.is_excitatory {
            self.g_c
        } else {
            0.0
        }
    }

    #[inline]
    pub fn effective_alpha_c(&self) -> f64 {
        if self.is_excitatory {
            self.alpha_c
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronState {
    pub v: f64,
    pub c: f64,
    pub last_update: f64,
    pub refractory_until: f64,
}

impl NeuronState {
    pub fn at_rest(params: &NeuronParams) -> Self {
        Self::with_potential(params.e_rest)
    }

    pub fn with_potential(v: f64) -> Self {
        Self {
            v,
            c: 0.0,
            last_update: 0.0,
            refractory_until: f64::NEG_INFINITY,
        }
    }

    #[inline]
    pub fn is_refractory(&self, t: f64) -> bool {
        t < self.refractory_until
    }
}

/// Persistent part of a synapse. 12 bytes: target id, weight, delay in
/// timesteps, and a flags word reserved for plasticity bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[repr(C)]
pub struct SynapseRecord {
    pub target: u32,
    pub weight: f32,
    pub delay: u16,
    pub flags: u16,
}

pub const SYNAPSE_RECORD_BYTES: usize = std::mem::size_of::<SynapseRecord>();

/// Address-event representation of a spike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub source: u32,
    pub time: f64,
}

impl SpikeEvent {
    /// Canonical ordering: emission time, then source id.
    #[inline]
    pub fn order_key(&self) -> (f64, u32) {
        (self.time, self.source)
    }
}

/// Source id used for external (Poisson) inputs in the tie-break order.
pub const EXTERNAL_SOURCE: u32 = u32::MAX;

/// One synaptic input waiting to be integrated by a neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputEvent {
    pub time: f64,
    pub weight: f32,
    pub source: u32,
}

impl InputEvent {
    #[inline]
    pub fn precedes(&self, other: &InputEvent) -> bool {
        self.time < other.time || (self.time == other.time && self.source <= other.source)
    }
}

/// `expm1(t * delta) / delta`, continuous through `delta = 0` where it equals `t`.
#[inline]
fn adaptation_kernel(t: f64, params: &NeuronParams) -> f64 {
    let gap = params.tau_c - params.tau_m;
    if gap.abs() < CONFLUENT_REL_EPS * params.tau_m {
        t
    } else {
        let delta = gap / (params.tau_m * params.tau_c);
        (t * delta).exp_m1() / delta
    }
}

/// Free evolution over `dt` ms with no input and no refractory clamp.
pub fn decay_state(state: &NeuronState, params: &NeuronParams, dt: f64) -> NeuronState {
    debug_assert!(dt >= 0.0, "negative decay interval {dt}");
    let dt = dt.max(0.0);
    let em = (-dt / params.tau_m).exp();
    let mut v = params.e_rest + (state.v - params.e_rest) * em;
    let mut c = state.c;
    if c != 0.0 {
        let k = params.effective_g_c() / params.c_m;
        if k != 0.0 {
            v -= k * c * em * adaptation_kernel(dt, params);
        }
        c *= (-dt / params.tau_c).exp();
    }
    NeuronState {
        v,
        c,
        last_update: state.last_update + dt,
        refractory_until: state.refractory_until,
    }
}

/// Advances to absolute time `t`, holding `V` at `V_r` for the part of the
/// interval that falls inside the refractory period.
pub fn advance_to(state: &NeuronState, params: &NeuronParams, t: f64) -> NeuronState {
    if t <= state.last_update {
        return *state;
    }
    if state.last_update < state.refractory_until {
        let hold_end = t.min(state.refractory_until);
        let held = NeuronState {
            v: params.v_reset,
            c: state.c * (-(hold_end - state.last_update) / params.tau_c).exp(),
            last_update: hold_end,
            refractory_until: state.refractory_until,
        };
        if t <= state.refractory_until {
            return held;
        }
        return decay_state(&held, params, t - hold_end);
    }
    decay_state(state, params, t - state.last_update)
}

/// Applies one input of `weight` mV at time `t`; the state must already be
/// advanced to `t`. Returns the spike time if the neuron fired.
pub fn apply_synaptic_input(
    state: &NeuronState,
    params: &NeuronParams,
    weight: f64,
    t: f64,
) -> (NeuronState, Option<f64>) {
    let mut next = *state;
    next.last_update = t;
    if state.is_refractory(t) {
        next.v = params.v_reset;
        return (next, None);
    }
    next.v += weight;
    if next.v > params.v_theta {
        next.v = params.v_reset;
        next.refractory_until = t + params.tau_arp;
        next.c += params.effective_alpha_c();
        return (next, Some(t));
    }
    (next, None)
}

/// Integrates a time-sorted input queue, pushing emitted spike times to
/// `spikes`. Returns the state at the time of the last input.
pub fn integrate_input_queue(
    state: &NeuronState,
    params: &NeuronParams,
    events: &[InputEvent],
    spikes: &mut Vec<f64>,
) -> NeuronState {
    debug_assert!(
        events.windows(2).all(|w| w[0].precedes(&w[1])),
        "input queue is not sorted by (time, source)"
    );
    let mut s = *state;
    for ev in events {
        s = advance_to(&s, params, ev.time);
        let (next, spike) = apply_synaptic_input(&s, params, ev.weight as f64, ev.time);
        s = next;
        if let Some(t) = spike {
            spikes.push(t);
        }
    }
    s
}
