//! Independent references for integration tests: an adaptive Runge-Kutta
//! integrator of the neuron equations and generators of valid parameters.

#![allow(dead_code)]

use corticarc_core::model::{InputEvent, NeuronParams, NeuronState};
use proptest::prelude::*;

/// One Dormand-Prince 5(4) step of `y' = f(y)` for a two-component state.
fn dp_step(f: &impl Fn([f64; 2]) -> [f64; 2], y: [f64; 2], h: f64) -> ([f64; 2], [f64; 2]) {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let mut k = [[0.0; 2]; 7];
    k[0] = f(y);
    for s in 0..6 {
        let mut yi = y;
        for (j, kj) in k.iter().enumerate().take(s + 1) {
            for d in 0..2 {
                yi[d] += h * A[s][j] * kj[d];
            }
        }
        k[s + 1] = f(yi);
    }
    // The 6th row of A is the 5th-order solution (FSAL).
    let mut y5 = y;
    let mut y4 = y;
    for d in 0..2 {
        for j in 0..6 {
            y5[d] += h * A[5][j] * k[j][d];
        }
        for j in 0..7 {
            y4[d] += h * B4[j] * k[j][d];
        }
    }
    let err = [y5[0] - y4[0], y5[1] - y4[1]];
    (y5, err)
}

/// Integrates `y' = f(y)` from 0 to `span` with local error control.
pub fn integrate_adaptive(f: impl Fn([f64; 2]) -> [f64; 2], y0: [f64; 2], span: f64) -> [f64; 2] {
    const RTOL: f64 = 1e-13;
    const ATOL: f64 = 1e-13;
    let mut y = y0;
    let mut t = 0.0;
    let mut h = (span / 16.0).max(1e-6);
    while t < span {
        if t + h > span {
            h = span - t;
        }
        let (next, err) = dp_step(&f, y, h);
        let scale = |d: usize| ATOL + RTOL * y[d].abs().max(next[d].abs());
        let e = ((err[0] / scale(0)).powi(2) + (err[1] / scale(1)).powi(2)).sqrt() / 2f64.sqrt();
        if e <= 1.0 {
            t += h;
            y = next;
        }
        let factor = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h < 1e-12 {
            h = 1e-12;
        }
    }
    y
}

/// Reference neuron: same event semantics as the simulator, with the free
/// dynamics integrated numerically.
#[derive(Debug, Clone, Copy)]
pub struct OracleNeuron {
    pub v: f64,
    pub c: f64,
    pub t: f64,
    pub refractory_until: f64,
}

impl OracleNeuron {
    pub fn from_state(s: &NeuronState) -> Self {
        Self {
            v: s.v,
            c: s.c,
            t: s.last_update,
            refractory_until: s.refractory_until,
        }
    }

    fn flow(&self, p: &NeuronParams, held: bool) -> impl Fn([f64; 2]) -> [f64; 2] {
        let (tau_m, e, tau_c) = (p.tau_m, p.e_rest, p.tau_c);
        let k = if p.is_excitatory { p.g_c / p.c_m } else { 0.0 };
        move |y: [f64; 2]| {
            let dv = if held { 0.0 } else { -(y[0] - e) / tau_m - k * y[1] };
            [dv, -y[1] / tau_c]
        }
    }

    pub fn advance(&mut self, p: &NeuronParams, t: f64) {
        if t <= self.t {
            return;
        }
        if self.t < self.refractory_until {
            let end = t.min(self.refractory_until);
            let y = integrate_adaptive(self.flow(p, true), [p.v_reset, self.c], end - self.t);
            self.v = p.v_reset;
            self.c = y[1];
            self.t = end;
        }
        if t > self.t {
            let y = integrate_adaptive(self.flow(p, false), [self.v, self.c], t - self.t);
            self.v = y[0];
            self.c = y[1];
            self.t = t;
        }
    }

    /// Returns true if the input made the neuron fire.
    pub fn input(&mut self, p: &NeuronParams, t: f64, w: f64) -> bool {
        self.advance(p, t);
        if t < self.refractory_until {
            self.v = p.v_reset;
            return false;
        }
        self.v += w;
        if self.v > p.v_theta {
            self.v = p.v_reset;
            self.refractory_until = t + p.tau_arp;
            if p.is_excitatory {
                self.c += p.alpha_c;
            }
            return true;
        }
        false
    }

    pub fn run(&mut self, p: &NeuronParams, events: &[InputEvent]) -> Vec<f64> {
        let mut spikes = Vec::new();
        for e in events {
            if self.input(p, e.time, e.weight as f64) {
                spikes.push(e.time);
            }
        }
        spikes
    }
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-12
}

/// Valid parameter sets, a tenth of them with `tau_c == tau_m`.
pub fn arb_params() -> impl Strategy<Value = NeuronParams> {
    (
        5.0f64..50.0,
        0.5f64..2.0,
        -75.0f64..-60.0,
        (0u8..10, 30.0f64..500.0),
        0.0f64..2.0,
        5.0f64..25.0,
        0.0f64..10.0,
        0.0f64..5.0,
        0.0f64..2.0,
        prop::bool::weighted(0.8),
    )
        .prop_map(|(tau_m, c_m, e, (conf, tau_c), g_c, above, below, arp, alpha, exc)| {
            NeuronParams {
                tau_m,
                c_m,
                e_rest: e,
                tau_c: if conf == 0 { tau_m } else { tau_c },
                g_c,
                v_theta: e + above,
                v_reset: e - below,
                tau_arp: arp,
                alpha_c: alpha,
                is_excitatory: exc,
            }
        })
}

/// A state below threshold for `p`, possibly refractory.
pub fn arb_state(p: NeuronParams) -> impl Strategy<Value = NeuronState> {
    (0.0f64..1.0, 0.0f64..5.0, 0.0f64..3.0).prop_map(move |(u, c, refr)| NeuronState {
        v: p.v_reset + u * (p.v_theta - p.v_reset) * 0.999,
        c: if p.is_excitatory { c } else { 0.0 },
        last_update: 0.0,
        refractory_until: refr,
    })
}

/// Time-sorted input sequences starting after time 0.
pub fn arb_events() -> impl Strategy<Value = Vec<InputEvent>> {
    prop::collection::vec((0.0f64..6.0, -4.0f32..7.0), 1..40).prop_map(|gaps| {
        let mut t = 0.0;
        gaps.into_iter()
            .enumerate()
            .map(|(i, (g, w))| {
                t += g;
                InputEvent {
                    time: t,
                    weight: w,
                    source: i as u32,
                }
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    InProcess,
    Tcp,
}

pub const BACKENDS: [Backend; 2] = [Backend::InProcess, Backend::Tcp];

fn loopback_hosts(n: usize) -> Vec<std::net::SocketAddr> {
    let ls: Vec<_> = (0..n)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    ls.iter().map(|l| l.local_addr().unwrap()).collect()
}

/// Runs `f` on every worker of an `n`-worker group, one thread each, and
/// returns the results by rank.
pub fn with_group<R: Send>(
    backend: Backend,
    n: usize,
    f: impl Fn(&mut dyn corticarc_core::Transport) -> R + Sync,
) -> Vec<R> {
    use corticarc_core::transport::{in_process_group, TcpTransport};
    let timeout = std::time::Duration::from_secs(30);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = match backend {
            Backend::InProcess => in_process_group(n, timeout)
                .into_iter()
                .map(|mut ep| s.spawn(move || f(&mut ep)))
                .collect(),
            Backend::Tcp => {
                let hosts = loopback_hosts(n);
                (0..n)
                    .map(|rank| {
                        let hosts = hosts.clone();
                        s.spawn(move || {
                            let mut t = TcpTransport::connect(rank, &hosts, timeout).unwrap();
                            f(&mut t)
                        })
                    })
                    .collect()
            }
        };
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}
