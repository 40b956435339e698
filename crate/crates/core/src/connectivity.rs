//! Column grid geometry, distance-decay connection kernels, cutoff stencils
//! and deterministic generation of the synapses projected by a neuron.

use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SynapseRecord;
use crate::rng::{KeyedRng, Purpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConnectivityError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid kernel: {0}")]
    Kernel(String),
    #[error("invalid synapse generation spec: {0}")]
    Synapses(String),
    #[error("kernel distance must be > 0, got {0}")]
    NonPositiveDistance(f64),
}

/// A rectangular grid of identical cortical columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Inter-columnar distance in µm.
    pub spacing_um: f64,
    pub neurons_per_column: usize,
    pub excitatory_fraction: f64,
}

impl GridSpec {
    pub const REFERENCE_NEURONS_PER_COLUMN: usize = 1240;

    /// Square grid with the reference column composition: 1240 neurons,
    /// 80% excitatory, 100 µm spacing.
    pub fn reference(side: usize) -> Self {
        Self {
            nx: side,
            ny: side,
            spacing_um: 100.0,
            neurons_per_column: Self::REFERENCE_NEURONS_PER_COLUMN,
            excitatory_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<(), ConnectivityError> {
        if self.nx == 0 || self.ny == 0 {
            return Err(ConnectivityError::Grid("grid must have at least one column".into()));
        }
        if self.neurons_per_column == 0 {
            return Err(ConnectivityError::Grid("neurons_per_column must be >= 1".into()));
        }
        if !(self.spacing_um > 0.0) {
            return Err(ConnectivityError::Grid("spacing must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.excitatory_fraction) {
            return Err(ConnectivityError::Grid("excitatory_fraction must be in [0, 1]".into()));
        }
        if self.neurons() > u32::MAX as usize - 1 {
            return Err(ConnectivityError::Grid("too many neurons for 32-bit ids".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn columns(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn neurons(&self) -> usize {
        self.columns() * self.neurons_per_column
    }

    /// Excitatory neurons occupy local indices `0..excitatory_per_column()`.
    #[inline]
    pub fn excitatory_per_column(&self) -> usize {
        (self.excitatory_fraction * self.neurons_per_column as f64 + 1e-9).floor() as usize
    }

    #[inline]
    pub fn column_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn column_coords(&self, column: usize) -> (usize, usize) {
        (column % self.nx, column / self.nx)
    }

    #[inline]
    pub fn column_of(&self, gid: u32) -> usize {
        gid as usize / self.neurons_per_column
    }

    #[inline]
    pub fn local_index(&self, gid: u32) -> usize {
        gid as usize % self.neurons_per_column
    }

    #[inline]
    pub fn gid(&self, column: usize, local: usize) -> u32 {
        (column * self.neurons_per_column + local) as u32
    }

    #[inline]
    pub fn is_excitatory(&self, gid: u32) -> bool {
        self.local_index(gid) < self.excitatory_per_column()
    }

    /// Column at `(i + di, j + dj)`, or `None` outside the grid (open boundary).
    #[inline]
    pub fn offset_column(&self, column: usize, di: i32, dj: i32) -> Option<usize> {
        let (i, j) = self.column_coords(column);
        let ti = i as i64 + di as i64;
        let tj = j as i64 + dj as i64;
        if ti < 0 || tj < 0 || ti >= self.nx as i64 || tj >= self.ny as i64 {
            None
        } else {
            Some(self.column_index(ti as usize, tj as usize))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Exponential,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Exponential => "exponential",
        })
    }
}

/// Lateral connection law between columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub amplitude: f64,
    /// σ for the Gaussian kernel, λ for the exponential one, in µm.
    pub scale_um: f64,
    pub cutoff_p: f64,
    /// Connection probability between neurons of the same column.
    pub local_p: f64,
}

impl KernelSpec {
    pub const DEFAULT_CUTOFF: f64 = 1e-3;
    pub const DEFAULT_LOCAL_P: f64 = 0.8;

    /// Short-range reference: `0.05 * exp(-r² / (2 * 100²))`.
    pub fn reference_gaussian() -> Self {
        Self {
            kind: KernelKind::Gaussian,
            amplitude: 0.05,
            scale_um: 100.0,
            cutoff_p: Self::DEFAULT_CUTOFF,
            local_p: Self::DEFAULT_LOCAL_P,
        }
    }

    /// Long-range reference: `0.03 * exp(-r / 290)`.
    pub fn reference_exponential() -> Self {
        Self {
            kind: KernelKind::Exponential,
            amplitude: 0.03,
            scale_um: 290.0,
            cutoff_p: Self::DEFAULT_CUTOFF,
            local_p: Self::DEFAULT_LOCAL_P,
        }
    }

    pub fn validate(&self) -> Result<(), ConnectivityError> {
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(ConnectivityError::Kernel("amplitude must be in (0, 1]".into()));
        }
        if !(self.scale_um > 0.0) {
            return Err(ConnectivityError::Kernel("scale must be > 0".into()));
        }
        if !(self.cutoff_p > 0.0) {
            return Err(ConnectivityError::Kernel("cutoff must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.local_p) {
            return Err(ConnectivityError::Kernel("local_p must be in [0, 1]".into()));
        }
        Ok(())
    }

    #[inline]
    fn eval(&self, r: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => {
                self.amplitude * (-(r * r) / (2.0 * self.scale_um * self.scale_um)).exp()
            }
            KernelKind::Exponential => self.amplitude * (-r / self.scale_um).exp(),
        }
    }

    /// Distance (µm) at which the kernel falls to the cutoff; zero when the
    /// amplitude itself is not above it.
    pub fn cutoff_radius_um(&self) -> f64 {
        if self.amplitude <= self.cutoff_p {
            return 0.0;
        }
        let ratio = (self.amplitude / self.cutoff_p).ln();
        match self.kind {
            KernelKind::Gaussian => self.scale_um * (2.0 * ratio).sqrt(),
            KernelKind::Exponential => self.scale_um * ratio,
        }
    }
}

/// Connection probability between neurons of two distinct columns whose
/// centres are `r` µm apart.
pub fn kernel_probability(kernel: &KernelSpec, r: f64) -> Result<f64, ConnectivityError> {
    if !(r > 0.0) {
        return Err(ConnectivityError::NonPositiveDistance(r));
    }
    Ok(kernel.eval(r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilEntry {
    pub di: i32,
    pub dj: i32,
    /// Pair probability at the centre-to-centre distance.
    pub probability: f64,
}

/// Column offsets reached by the projections of one column. The local
/// offset `(0, 0)` is always part of the stencil and is governed by
/// `local_p`; `remote` holds the other offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub radius: i32,
    pub local_p: f64,
    pub remote: Vec<StencilEntry>,
}

impl Stencil {
    /// Side of the square window holding the stencil.
    pub fn window(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    /// All offsets including `(0, 0)`.
    pub fn offsets(&self) -> Vec<(i32, i32)> {
        std::iter::once((0, 0))
            .chain(self.remote.iter().map(|e| (e.di, e.dj)))
            .collect()
    }

    pub fn remote_probability_sum(&self) -> f64 {
        self.remote.iter().map(|e| e.probability).sum()
    }

    /// Sum of remote pair probabilities restricted to offsets that land
    /// inside the grid when projecting from `column`.
    pub fn remote_probability_sum_at(&self, grid: &GridSpec, column: usize) -> f64 {
        self.remote
            .iter()
            .filter(|e| grid.offset_column(column, e.di, e.dj).is_some())
            .map(|e| e.probability)
            .sum()
    }

    /// Text matrix of expected synapses (in thousands) projected by the
    /// excitatory neurons of one column onto each offset of the window.
    pub fn render_thousands(&self, grid: &GridSpec) -> String {
        let n = grid.neurons_per_column as f64;
        let n_exc = grid.excitatory_per_column() as f64;
        let r = self.radius;
        let mut out = String::new();
        for dj in (-r..=r).rev() {
            let row: Vec<String> = (-r..=r)
                .map(|di| {
                    if di == 0 && dj == 0 {
                        format!("{:.1}", n_exc * self.local_p * (n - 1.0) / 1000.0)
                    } else if let Some(e) = self.remote.iter().find(|e| e.di == di && e.dj == dj) {
                        format!("{:.1}", n_exc * n * e.probability / 1000.0)
                    } else {
                        "-".to_owned()
                    }
                })
                .collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Builds the projection stencil. A remote column is included when the
/// kernel, evaluated at the point of that column's square territory nearest
/// to the source column centre, exceeds the cutoff. Pair probabilities use
/// the centre-to-centre distance.
pub fn compute_stencil(kernel: &KernelSpec, grid: &GridSpec) -> Stencil {
    let alpha = grid.spacing_um;
    let reach = kernel.cutoff_radius_um() / alpha;
    // Territories of columns farther than reach + 1/2 cannot intersect the disk.
    let bound = (reach + 0.5).ceil() as i32 + 1;
    let mut remote = Vec::new();
    let mut radius = 0;
    for dj in -bound..=bound {
        for di in -bound..=bound {
            if di == 0 && dj == 0 {
                continue;
            }
            let ni = (di.abs() as f64 - 0.5).max(0.0);
            let nj = (dj.abs() as f64 - 0.5).max(0.0);
            let nearest = alpha * ni.hypot(nj);
            if kernel.eval(nearest) > kernel.cutoff_p {
                let r = alpha * (di as f64).hypot(dj as f64);
                remote.push(StencilEntry {
                    di,
                    dj,
                    probability: kernel.eval(r),
                });
                radius = radius.max(di.abs()).max(dj.abs());
            }
        }
    }
    Stencil {
        radius,
        local_p: kernel.local_p,
        remote,
    }
}

/// Analytic expected projections per neuron for a column far from the borders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fanout {
    pub local: f64,
    /// Remote synapses of an excitatory neuron.
    pub remote_excitatory: f64,
    /// Remote synapses averaged over the column (inhibitory neurons project
    /// only locally).
    pub remote_average: f64,
    pub average_total: f64,
}

pub fn expected_fanout(kernel: &KernelSpec, grid: &GridSpec) -> Fanout {
    let stencil = compute_stencil(kernel, grid);
    fanout_from_sum(grid, kernel.local_p, stencil.remote_probability_sum())
}

/// Like [`expected_fanout`] for a specific column, with border clipping.
pub fn expected_fanout_at(stencil: &Stencil, grid: &GridSpec, column: usize) -> Fanout {
    fanout_from_sum(grid, stencil.local_p, stencil.remote_probability_sum_at(grid, column))
}

/// Fanout averaged over every column of the grid, border clipping included.
pub fn mean_fanout(stencil: &Stencil, grid: &GridSpec) -> Fanout {
    let cols = grid.columns();
    let sum: f64 = (0..cols)
        .map(|c| stencil.remote_probability_sum_at(grid, c))
        .sum();
    fanout_from_sum(grid, stencil.local_p, sum / cols.max(1) as f64)
}

fn fanout_from_sum(grid: &GridSpec, local_p: f64, remote_sum: f64) -> Fanout {
    let n = grid.neurons_per_column as f64;
    let exc_share = grid.excitatory_per_column() as f64 / n;
    let local = local_p * (n - 1.0);
    let remote_excitatory = n * remote_sum + 0.0;
    let remote_average = exc_share * remote_excitatory;
    Fanout {
        local,
        remote_excitatory,
        remote_average,
        average_total: local + remote_average,
    }
}

/// Expected number of recurrent synapses of the whole grid.
pub fn expected_recurrent_synapses(stencil: &Stencil, grid: &GridSpec) -> f64 {
    let n = grid.neurons_per_column as f64;
    let n_exc = grid.excitatory_per_column() as f64;
    let local = n * stencil.local_p * (n - 1.0);
    (0..grid.columns())
        .map(|col| local + n_exc * n * stencil.remote_probability_sum_at(grid, col))
        .sum()
}

/// Variance of [`expected_recurrent_synapses`] under independent pair sampling.
pub fn recurrent_synapses_variance(stencil: &Stencil, grid: &GridSpec) -> f64 {
    let n = grid.neurons_per_column as f64;
    let n_exc = grid.excitatory_per_column() as f64;
    let p = stencil.local_p;
    let local = n * (n - 1.0) * p * (1.0 - p);
    (0..grid.columns())
        .map(|col| {
            let remote: f64 = stencil
                .remote
                .iter()
                .filter(|e| grid.offset_column(col, e.di, e.dj).is_some())
                .map(|e| e.probability * (1.0 - e.probability))
                .sum();
            local + n_exc * n * remote
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDist {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DelayDist {
    /// Uniform over `[min_ms, max_ms]`, quantized to whole timesteps.
    Uniform { min_ms: f64, max_ms: f64 },
    /// Exponential with the given mean, rounded up to whole timesteps.
    Exponential { mean_ms: f64 },
}

/// Weight and delay laws for generated synapses. Weights are per
/// (source population, target population).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynapseGenSpec {
    pub ee: WeightDist,
    pub ei: WeightDist,
    pub ie: WeightDist,
    pub ii: WeightDist,
    pub delay: DelayDist,
    pub timestep_ms: f64,
    pub max_delay_steps: u16,
}

impl Default for SynapseGenSpec {
    fn default() -> Self {
        let w = |mean: f64| WeightDist {
            mean,
            sd: 0.25 * mean.abs(),
        };
        Self {
            ee: w(0.15),
            ei: w(0.15),
            ie: w(-1.2),
            ii: w(-1.2),
            delay: DelayDist::Uniform {
                min_ms: 1.0,
                max_ms: 8.0,
            },
            timestep_ms: 1.0,
            max_delay_steps: 8,
        }
    }
}

impl SynapseGenSpec {
    pub fn validate(&self) -> Result<(), ConnectivityError> {
        let bad = |m: &str| Err(ConnectivityError::Synapses(m.to_owned()));
        if !(self.timestep_ms > 0.0) {
            return bad("timestep must be > 0");
        }
        if self.max_delay_steps == 0 {
            return bad("max delay must be >= 1 timestep");
        }
        for (name, w, excitatory) in [
            ("ee", self.ee, true),
            ("ei", self.ei, true),
            ("ie", self.ie, false),
            ("ii", self.ii, false),
        ] {
            if !w.mean.is_finite() || !(w.sd >= 0.0) || !w.sd.is_finite() {
                return bad(&format!("weight {name} must have finite mean and sd >= 0"));
            }
            if excitatory && w.mean < 0.0 || !excitatory && w.mean > 0.0 {
                return bad(&format!("weight {name} has the wrong sign for its source"));
            }
        }
        match self.delay {
            DelayDist::Uniform { min_ms, max_ms } => {
                if !(min_ms >= 0.0 && max_ms >= min_ms) {
                    return bad("uniform delay needs 0 <= min <= max");
                }
                let (lo, hi) = self.uniform_step_range(min_ms, max_ms);
                if lo > hi {
                    return bad("uniform delay range contains no whole timestep");
                }
            }
            DelayDist::Exponential { mean_ms } => {
                if !(mean_ms > 0.0) {
                    return bad("exponential delay mean must be > 0");
                }
            }
        }
        Ok(())
    }

    fn uniform_step_range(&self, min_ms: f64, max_ms: f64) -> (u16, u16) {
        let lo = ((min_ms / self.timestep_ms) - 1e-9).ceil().max(1.0) as u64;
        let hi = ((max_ms / self.timestep_ms) + 1e-9).floor() as u64;
        let cap = self.max_delay_steps as u64;
        (lo.min(cap + 1) as u16, hi.min(cap) as u16)
    }

    #[inline]
    fn weight_dist(&self, source_exc: bool, target_exc: bool) -> WeightDist {
        match (source_exc, target_exc) {
            (true, true) => self.ee,
            (true, false) => self.ei,
            (false, true) => self.ie,
            (false, false) => self.ii,
        }
    }

    /// Weight of the synapse `source -> target`; sign preserved by clamping.
    pub fn draw_weight(&self, seed: u64, source: u32, target: u32, grid: &GridSpec) -> f32 {
        let source_exc = grid.is_excitatory(source);
        let d = self.weight_dist(source_exc, grid.is_excitatory(target));
        let w = if d.sd > 0.0 {
            let mut rng = KeyedRng::new(seed, Purpose::Weight, source as u64, target as u64);
            Normal::new(d.mean, d.sd)
                .expect("validated weight distribution")
                .sample(&mut rng)
        } else {
            d.mean
        };
        let w = if source_exc { w.max(0.0) } else { w.min(0.0) };
        w as f32
    }

    /// Delay in timesteps, within `[1, max_delay_steps]`.
    pub fn draw_delay(&self, seed: u64, source: u32, target: u32) -> u16 {
        let mut rng = KeyedRng::new(seed, Purpose::Delay, source as u64, target as u64);
        let steps = match self.delay {
            DelayDist::Uniform { min_ms, max_ms } => {
                let (lo, hi) = self.uniform_step_range(min_ms, max_ms);
                let span = (hi - lo) as u64 + 1;
                lo as u64 + ((rng.uniform() * span as f64) as u64).min(span - 1)
            }
            DelayDist::Exponential { mean_ms } => {
                let x: f64 = Exp::new(1.0 / mean_ms)
                    .expect("validated delay distribution")
                    .sample(&mut rng);
                (x / self.timestep_ms).ceil() as u64
            }
        };
        steps.clamp(1, self.max_delay_steps as u64) as u16
    }
}

/// Visits the ids of the neurons `source` connects to, column by column:
/// first its own column, then each stencil offset inside the grid. Only
/// excitatory neurons project remotely; self-connections are excluded.
///
/// Each (source, target column) pair draws from its own keyed stream, so the
/// outcome does not depend on who calls this or in which order.
pub fn for_each_target(
    source: u32,
    grid: &GridSpec,
    stencil: &Stencil,
    seed: u64,
    mut visit: impl FnMut(u32),
) {
    let column = grid.column_of(source);
    let self_local = grid.local_index(source);
    let n = grid.neurons_per_column;

    // Local candidates are the n - 1 other neurons of the column.
    sample_column(seed, source, column, n - 1, stencil.local_p, |k| {
        let local = if k >= self_local { k + 1 } else { k };
        visit(grid.gid(column, local));
    });

    if !grid.is_excitatory(source) {
        return;
    }
    for e in &stencil.remote {
        if let Some(target_col) = grid.offset_column(column, e.di, e.dj) {
            sample_column(seed, source, target_col, n, e.probability, |k| {
                visit(grid.gid(target_col, k));
            });
        }
    }
}

/// Independent Bernoulli(p) over `candidates` indices, realized by drawing
/// geometric gaps between successes.
#[inline]
fn sample_column(
    seed: u64,
    source: u32,
    target_col: usize,
    candidates: usize,
    p: f64,
    mut hit: impl FnMut(usize),
) {
    if p <= 0.0 || candidates == 0 {
        return;
    }
    if p >= 1.0 {
        (0..candidates).for_each(hit);
        return;
    }
    let mut rng = KeyedRng::new(seed, Purpose::Connect, source as u64, target_col as u64);
    let log_q = (-p).ln_1p();
    let mut k = 0usize;
    loop {
        let gap = (rng.uniform_open0().ln() / log_q).floor();
        if gap >= (candidates - k) as f64 {
            return;
        }
        k += gap as usize;
        hit(k);
        k += 1;
        if k >= candidates {
            return;
        }
    }
}

/// Number of synapses the whole grid realizes for `seed`, counted from the
/// same draws as construction but without materializing them.
pub fn count_recurrent_synapses(grid: &GridSpec, stencil: &Stencil, seed: u64) -> u64 {
    let mut n = 0u64;
    for source in 0..grid.neurons() as u32 {
        for_each_target(source, grid, stencil, seed, |_| n += 1);
    }
    n
}

/// Generates every synapse projected by `source`.
pub fn generate_outgoing_synapses(
    source: u32,
    grid: &GridSpec,
    stencil: &Stencil,
    genspec: &SynapseGenSpec,
    seed: u64,
) -> Vec<SynapseRecord> {
    let mut out = Vec::new();
    for_each_target(source, grid, stencil, seed, |target| {
        out.push(SynapseRecord {
            target,
            weight: genspec.draw_weight(seed, source, target, grid),
            delay: genspec.draw_delay(seed, source, target),
            flags: 0,
        });
    });
    out
}

/// Order-independent fingerprint of a synaptic matrix: a wrapping sum of
/// per-synapse hashes, plus the count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynapseChecksum {
    pub count: u64,
    pub digest: u64,
}

impl SynapseChecksum {
    #[inline]
    pub fn add(&mut self, source: u32, rec: &SynapseRecord) {
        let mut h = KeyedRng::new(
            0x5eed,
            Purpose::Connect,
            ((source as u64) << 32) | rec.target as u64,
            ((rec.weight.to_bits() as u64) << 16) | rec.delay as u64,
        );
        self.digest = self.digest.wrapping_add(rand::RngCore::next_u64(&mut h));
        self.count += 1;
    }

    pub fn merge(&mut self, other: &SynapseChecksum) {
        self.digest = self.digest.wrapping_add(other.digest);
        self.count += other.count;
    }
}
