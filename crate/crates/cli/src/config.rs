//! Run configuration file. Every section and key is optional and falls back
//! to the reference values; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use corticarc_core::connectivity::{DelayDist, KernelKind, KernelSpec, SynapseGenSpec, WeightDist};
use corticarc_core::engine::{ExternalInputSpec, InitialPotential, SimConfig};
use corticarc_core::{GridSpec, NeuronParams};
use serde::{Deserialize, Serialize};

use crate::units::{ByteSize, Hertz, Micrometres, Millis, Millivolts};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub kernel: KernelSection,
    pub neuron: NeuronSection,
    pub synapse: SynapseSection,
    pub external: ExternalSection,
    pub run: RunSection,
    pub transport: TransportSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub spacing: Micrometres,
    pub neurons_per_column: usize,
    pub excitatory_fraction: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpec::reference(12);
        Self {
            nx: g.nx,
            ny: g.ny,
            spacing: Micrometres::new(g.spacing_um),
            neurons_per_column: g.neurons_per_column,
            excitatory_fraction: g.excitatory_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub kind: KernelKind,
    /// Kernel amplitude; the reference value of the kind when absent.
    pub amplitude: Option<f64>,
    /// σ (Gaussian) or λ (exponential); the reference value when absent.
    pub scale: Option<Micrometres>,
    pub cutoff: f64,
    pub local_p: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            kind: KernelKind::Gaussian,
            amplitude: None,
            scale: None,
            cutoff: KernelSpec::DEFAULT_CUTOFF,
            local_p: KernelSpec::DEFAULT_LOCAL_P,
        }
    }
}

impl KernelSection {
    pub fn spec(&self) -> KernelSpec {
        let mut k = match self.kind {
            KernelKind::Gaussian => KernelSpec::reference_gaussian(),
            KernelKind::Exponential => KernelSpec::reference_exponential(),
        };
        if let Some(a) = self.amplitude {
            k.amplitude = a;
        }
        if let Some(s) = self.scale {
            k.scale_um = s.value();
        }
        k.cutoff_p = self.cutoff;
        k.local_p = self.local_p;
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronSection {
    pub excitatory: PopulationSection,
    pub inhibitory: PopulationSection,
}

impl Default for NeuronSection {
    fn default() -> Self {
        Self {
            excitatory: PopulationSection::from(NeuronParams::excitatory()),
            inhibitory: PopulationSection::from(NeuronParams::inhibitory()),
        }
    }
}

/// Adaptation keys of the inhibitory population are ignored by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub tau_m: Millis,
    pub c_m: f64,
    pub e_rest: Millivolts,
    pub tau_c: Millis,
    pub g_c: f64,
    pub v_theta: Millivolts,
    pub v_reset: Millivolts,
    pub tau_arp: Millis,
    pub alpha_c: f64,
}

impl From<NeuronParams> for PopulationSection {
    fn from(p: NeuronParams) -> Self {
        Self {
            tau_m: Millis::new(p.tau_m),
            c_m: p.c_m,
            e_rest: Millivolts::new(p.e_rest),
            tau_c: Millis::new(p.tau_c),
            g_c: p.g_c,
            v_theta: Millivolts::new(p.v_theta),
            v_reset: Millivolts::new(p.v_reset),
            tau_arp: Millis::new(p.tau_arp),
            alpha_c: p.alpha_c,
        }
    }
}

impl PopulationSection {
    fn params(&self, is_excitatory: bool) -> NeuronParams {
        NeuronParams {
            tau_m: self.tau_m.value(),
            c_m: self.c_m,
            e_rest: self.e_rest.value(),
            tau_c: self.tau_c.value(),
            g_c: self.g_c,
            v_theta: self.v_theta.value(),
            v_reset: self.v_reset.value(),
            tau_arp: self.tau_arp.value(),
            alpha_c: self.alpha_c,
            is_excitatory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSection {
    pub mean: Millivolts,
    pub sd: Millivolts,
}

impl From<WeightDist> for WeightSection {
    fn from(w: WeightDist) -> Self {
        Self {
            mean: Millivolts::new(w.mean),
            sd: Millivolts::new(w.sd),
        }
    }
}

impl WeightSection {
    fn dist(&self) -> WeightDist {
        WeightDist {
            mean: self.mean.value(),
            sd: self.sd.value(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DelaySection {
    Uniform { min: Millis, max: Millis },
    Exponential { mean: Millis },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynapseSection {
    pub ee: WeightSection,
    pub ei: WeightSection,
    pub ie: WeightSection,
    pub ii: WeightSection,
    pub delay: DelaySection,
    pub max_delay: Millis,
}

impl Default for SynapseSection {
    fn default() -> Self {
        let d = SynapseGenSpec::default();
        Self {
            ee: d.ee.into(),
            ei: d.ei.into(),
            ie: d.ie.into(),
            ii: d.ii.into(),
            delay: match d.delay {
                DelayDist::Uniform { min_ms, max_ms } => DelaySection::Uniform {
                    min: Millis::new(min_ms),
                    max: Millis::new(max_ms),
                },
                DelayDist::Exponential { mean_ms } => DelaySection::Exponential {
                    mean: Millis::new(mean_ms),
                },
            },
            max_delay: Millis::new(d.max_delay_steps as f64 * d.timestep_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalSection {
    pub synapses_per_neuron: u32,
    pub rate: Hertz,
    pub weight: Millivolts,
}

impl Default for ExternalSection {
    fn default() -> Self {
        let e = SimConfig::reference(GridSpec::reference(1), KernelSpec::reference_gaussian()).external;
        Self {
            synapses_per_neuron: e.synapses_per_neuron,
            rate: Hertz::new(e.rate_hz),
            weight: Millivolts::new(e.weight_mv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub timestep: Millis,
    pub duration: Millis,
    pub seed: u64,
    pub workers: usize,
    pub init: InitialPotential,
    pub memory_budget: ByteSize,
}

impl Default for RunSection {
    fn default() -> Self {
        let r = SimConfig::reference(GridSpec::reference(1), KernelSpec::reference_gaussian());
        Self {
            timestep: Millis::new(r.synapses.timestep_ms),
            duration: Millis::new(r.duration_s * 1e3),
            seed: r.seed,
            workers: 1,
            init: r.init,
            memory_budget: ByteSize::new(r.memory_budget_bytes as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Worker threads in one process.
    Inprocess,
    /// One process per worker, connected over TCP.
    Multiprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub kind: TransportKind,
    pub timeout: Millis,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            kind: TransportKind::Inprocess,
            timeout: Millis::new(corticarc_core::transport::DEFAULT_TIMEOUT.as_secs_f64() * 1e3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub raster: bool,
    /// Bin width of the exported population rate series.
    pub rate_bin: Millis,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("corticarc-out"),
            raster: true,
            rate_bin: Millis::new(5.0),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            nx: self.grid.nx,
            ny: self.grid.ny,
            spacing_um: self.grid.spacing.value(),
            neurons_per_column: self.grid.neurons_per_column,
            excitatory_fraction: self.grid.excitatory_fraction,
        }
    }

    /// Simulator configuration, validated.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let dt = self.run.timestep.value();
        if !(dt > 0.0) {
            bail!("run.timestep must be > 0");
        }
        let max_delay_steps = self.synapse.max_delay.value() / dt;
        if (max_delay_steps - max_delay_steps.round()).abs() > 1e-9
            || max_delay_steps < 1.0
            || max_delay_steps > u16::MAX as f64
        {
            bail!(
                "synapse.max_delay ({}) must be a whole number of timesteps ({})",
                self.synapse.max_delay,
                self.run.timestep
            );
        }
        let duration = self.run.duration.value();
        if !(duration >= 0.0) {
            bail!("run.duration must be >= 0");
        }
        let cfg = SimConfig {
            grid: self.grid(),
            kernel: self.kernel.spec(),
            synapses: SynapseGenSpec {
                ee: self.synapse.ee.dist(),
                ei: self.synapse.ei.dist(),
                ie: self.synapse.ie.dist(),
                ii: self.synapse.ii.dist(),
                delay: match self.synapse.delay {
                    DelaySection::Uniform { min, max } => DelayDist::Uniform {
                        min_ms: min.value(),
                        max_ms: max.value(),
                    },
                    DelaySection::Exponential { mean } => DelayDist::Exponential {
                        mean_ms: mean.value(),
                    },
                },
                timestep_ms: dt,
                max_delay_steps: max_delay_steps.round() as u16,
            },
            excitatory: self.neuron.excitatory.params(true),
            inhibitory: self.neuron.inhibitory.params(false),
            external: ExternalInputSpec {
                synapses_per_neuron: self.external.synapses_per_neuron,
                rate_hz: self.external.rate.value(),
                weight_mv: self.external.weight.value(),
            },
            duration_s: duration * 1e-3,
            seed: self.run.seed,
            init: self.run.init,
            record_raster: self.output.raster,
            memory_budget_bytes: self.run.memory_budget.value() as u64,
            trace_injections: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_configuration() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        let s = c.sim_config().unwrap();
        assert_eq!(s.grid, GridSpec::reference(12));
        assert_eq!(s.kernel, KernelSpec::reference_gaussian());
    }

    #[test]
    fn echo_reparses_to_the_same_configuration() {
        let c = RunConfig::parse(
            r#"
            [kernel]
            kind = "exponential"
            [synapse]
            delay = { kind = "exponential", mean = "2.5ms" }
            max_delay = "20ms"
            [run]
            duration = "250ms"
            seed = 9
            "#,
        )
        .unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(c.sim_config().unwrap().synapses.max_delay_steps, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[grid]\nnxx = 3").is_err());
        assert!(RunConfig::parse("[gird]\nnx = 3").is_err());
        assert!(RunConfig::parse("[neuron.excitatory]\ntau_m = \"20ms\"").is_err());
    }

    #[test]
    fn quantities_need_units() {
        assert!(RunConfig::parse("[run]\nduration = 1.0").is_err());
        assert!(RunConfig::parse("[run]\nduration = \"1\"").is_err());
        assert!(RunConfig::parse("[run]\nduration = \"1mV\"").is_err());
        assert!(RunConfig::parse("[run]\nduration = \"1s\"").is_ok());
    }

    #[test]
    fn fractional_max_delay_is_rejected() {
        let c = RunConfig::parse("[run]\ntimestep = \"1ms\"\n[synapse]\nmax_delay = \"7.5ms\"").unwrap();
        assert!(c.sim_config().is_err());
    }
}
