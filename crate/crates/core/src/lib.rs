//! Distributed simulator of spiking cortical columns laid out on a 2D grid.
//!
//! Workers own rectangular blocks of columns and exchange spikes every
//! timestep. Point neurons follow a leaky integrate-and-fire model with
//! spike-frequency adaptation, integrated exactly between input events.

pub mod connectivity;
pub mod construction;
pub mod delivery;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod rng;
pub mod transport;

pub use connectivity::{
    compute_stencil, expected_fanout, kernel_probability, DelayDist, Fanout, GridSpec, KernelKind,
    KernelSpec, Stencil, SynapseChecksum, SynapseGenSpec, WeightDist,
};
pub use construction::{construct_network, ExchangeError, NetworkSpec, WorkerNetwork};
pub use delivery::{deliver_spikes, AxonalSpikeMessage, DeliveryStats};
pub use engine::{
    run, run_worker, ExternalInputSpec, InitialPotential, SimConfig, SimError, WorkerSim,
};
pub use metrics::{
    forecast, normalized_cost, scaling_harness, slowdown_comparison, Forecast, ScalingMode,
    ScalingRow, SimReport,
};
pub use model::{NeuronParams, NeuronState, SpikeEvent, SynapseRecord};
pub use partition::{map_columns_to_workers, ProcessMap};
pub use transport::{Transport, TransportError};
