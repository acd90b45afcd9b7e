//! Monte Carlo particle method for the two-stream kinetic equation with an
//! internal adaptation state, coupled to the explicit chemoattractant update.
//!
//! One time step `k` runs, in order:
//! 1. advect every particle with its previous velocity (periodic wrap),
//! 2. deposit the cell densities `rho_i = count_i / N_bar`,
//! 3. advance `S` explicitly with the new density,
//! 4. update each internal state from the concentration change sensed along
//!    the particle's path,
//! 5. draw one uniform per particle and flip its velocity with probability
//!    `dt lambda0 / 2 * Lambda_delta(y)`.
//!
//! [`McSimulation`] fuses 4-5 of step `k` with 1-2 of step `k+1` into a single
//! pass over the particles; the public per-step operations below are the
//! unfused reference and are tested to give identical results.

mod rng;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use rng::{StepKey, StreamKey};

use crate::error::{Error, Result};
use crate::field::{explicit_chemo_dt_limit, step_chemo_into, Grid1D, ScalarField};
use crate::model::ModelParams;
use crate::record::{EngineKind, RunRecord, SeriesPoint, Snapshot};

/// Densities above this abort the run.
pub const BLOWUP_LIMIT: f64 = 1e6;

const CHUNK: usize = 1 << 14;

/// Positions, velocities and internal states of all particles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    /// Exactly `+1` or `-1`.
    pub velocities: Vec<i8>,
    /// Deviation `y = M(S) - m` from the equilibrium internal state.
    pub internal: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Monte Carlo run configuration. Times in `snapshot_times` and `avg_window`
/// are scaled times `t_lambda`; `dt` and `t_end` are raw kinetic times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub params: ModelParams,
    pub grid: Grid1D,
    pub particles_per_cell: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub snapshot_times: Vec<f64>,
    pub avg_window: f64,
    /// 1 runs serially; larger values use a rayon pool of that size.
    pub threads: usize,
}

impl McConfig {
    /// Time step, mesh and particle count used for the reference experiments.
    pub fn reference(params: ModelParams, t_end_lambda: f64, seed: u64) -> Result<Self> {
        let dt = default_dt(params.lambda0);
        let (cells, n_bar) = if params.lambda0 >= 500.0 && params.delta <= 0.01 {
            (100, 7_400)
        } else {
            (50, 28_800)
        };
        let cfg = McConfig {
            params,
            grid: Grid1D::new(cells, params.length)?,
            particles_per_cell: n_bar,
            dt,
            t_end: params.t_from_lambda(t_end_lambda),
            seed,
            snapshot_times: vec![t_end_lambda],
            avg_window: 0.05,
            threads: 1,
        };
        Ok(cfg)
    }

    pub fn total_particles(&self) -> usize {
        self.grid.cells() * self.particles_per_cell
    }

    pub fn steps(&self) -> u64 {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as u64
    }

    pub fn window_steps(&self) -> u64 {
        ((self.params.t_from_lambda(self.avg_window) / self.dt).round() as u64).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate_allow_null().map_err(Error::InvalidParams)?;
        if (self.grid.length() - self.params.length).abs() > 1e-12 * self.params.length {
            return Err(Error::Config("grid length differs from params.length".into()));
        }
        if self.particles_per_cell < 1 {
            return Err(Error::Config("particles_per_cell must be >= 1".into()));
        }
        if !(self.t_end >= 0.0) || !(self.avg_window > 0.0) {
            return Err(Error::Config("t_end must be >= 0 and avg_window > 0".into()));
        }
        let limit = explicit_chemo_dt_limit(&self.grid, &self.params);
        if !(self.dt > 0.0) || self.dt > limit {
            return Err(Error::CflViolation { dt: self.dt, limit });
        }
        if self.dt > self.grid.dx() {
            return Err(Error::Config("dt must not exceed dx (particles would skip cells)".into()));
        }
        let p = max_flip_probability(self.dt, &self.params);
        if p >= 1.0 {
            return Err(Error::ProbabilityOverflow { probability: p });
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Reference time step for a given mean tumbling frequency.
pub fn default_dt(lambda0: f64) -> f64 {
    if lambda0 < 100.0 {
        1e-3
    } else if lambda0 < 500.0 {
        2e-4
    } else {
        5e-5
    }
}

fn max_flip_probability(dt: f64, params: &ModelParams) -> f64 {
    dt * params.lambda0 * (1.0 + params.chi) / 2.0
}

/// `N_bar` particles in every cell, uniform within the cell, `y = 0`, and
/// velocities `+-1` with probability one half.
pub fn init_uniform(cfg: &McConfig) -> ParticleEnsemble {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.total_particles();
    let dx = cfg.grid.dx();
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for i in 0..cfg.grid.cells() {
        let left = i as f64 * dx;
        for _ in 0..cfg.particles_per_cell {
            let mut x = left + rng.gen::<f64>() * dx;
            // keep the particle inside its own cell despite rounding
            if cfg.grid.cell_of(x) != i {
                x = left + 0.5 * dx;
            }
            positions.push(x);
            velocities.push(if rng.gen::<bool>() { 1 } else { -1 });
        }
    }
    ParticleEnsemble {
        positions,
        velocities,
        internal: vec![0.0; n],
    }
}

/// Move every particle by `v dt` and wrap into `[0, L)`.
pub fn advect(ens: &mut ParticleEnsemble, grid: &Grid1D, dt: f64) {
    for (r, &v) in ens.positions.iter_mut().zip(&ens.velocities) {
        *r = grid.wrap(*r + v as f64 * dt);
    }
}

/// Cell counts divided by `N_bar`.
pub fn deposit_density(ens: &ParticleEnsemble, grid: &Grid1D, n_bar: usize) -> ScalarField {
    let mut counts = vec![0u64; grid.cells()];
    for &r in &ens.positions {
        counts[grid.cell_of(r)] += 1;
    }
    let inv = 1.0 / n_bar as f64;
    ScalarField::new(*grid, counts.iter().map(|&c| c as f64 * inv).collect())
}

/// `padded` is `S` with one ghost cell on each side: `[S_{I-1}, S_0, ..,
/// S_{I-1}, S_0]`.
#[inline(always)]
fn interpolate_padded(padded: &[f64], grid: &Grid1D, x: f64) -> f64 {
    let i = grid.cell_of(x);
    let offset = (x - grid.center(i)) * grid.inv_dx();
    // neighbour on the side of the offset, in padded indexing
    let j = i + 2 * (offset >= 0.0) as usize;
    let si = padded[i + 1];
    si + (padded[j] - si) * offset.abs()
}

fn pad(values: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(values[values.len() - 1]);
    out.extend_from_slice(values);
    out.push(values[0]);
}

/// Piecewise-linear value of `S` at `x` in `[0, L)`: the slope left of the
/// cell midpoint uses the left neighbour, right of it the right neighbour.
pub fn interpolate_s(s: &ScalarField, x: f64) -> f64 {
    let n = s.values.len();
    let i = s.grid.cell_of(x);
    let offset = (x - s.grid.center(i)) * s.grid.inv_dx();
    let j = if offset >= 0.0 { (i + 1) % n } else { (i + n - 1) % n };
    s.values[i] + (s.values[j] - s.values[i]) * offset.abs()
}

/// Semi-implicit adaptation update
/// `y_new = (y + (s_new - s_old) / s_old) / (1 + dt / tau)`.
#[inline(always)]
pub fn relax_internal(y: f64, s_new: f64, s_old: f64, inv_relax: f64) -> f64 {
    (y + (s_new - s_old) / s_old) * inv_relax
}

/// Update every internal state from the concentration sensed along its path.
///
/// `sensed` holds each particle's previous sample `S^{k-1}` on entry and the
/// new sample `S^k` on return.
pub fn update_internal(
    ens: &mut ParticleEnsemble,
    s_now: &ScalarField,
    sensed: &mut [f64],
    dt: f64,
    params: &ModelParams,
) -> Result<()> {
    if let Some(index) = sensed.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NonPositiveConcentration {
            index,
            value: sensed[index],
        });
    }
    let inv = 1.0 / (1.0 + dt / params.tau);
    for ((y, &r), prev) in ens.internal.iter_mut().zip(&ens.positions).zip(sensed.iter_mut()) {
        let now = interpolate_s(s_now, r);
        *y = relax_internal(*y, now, *prev, inv);
        *prev = now;
    }
    Ok(())
}

/// Flip velocities with probability `dt lambda0 / 2 * Lambda_delta(y)`, using
/// the counter-based draw for `(particle, step)`.
pub fn tumble(
    ens: &mut ParticleEnsemble,
    dt: f64,
    params: &ModelParams,
    key: &StreamKey,
    step: u64,
) -> Result<()> {
    let p = max_flip_probability(dt, params);
    if p >= 1.0 {
        return Err(Error::ProbabilityOverflow { probability: p });
    }
    let half = 0.5 * dt * params.lambda0;
    let key = key.at_step(step);
    for (l, (v, &y)) in ens.velocities.iter_mut().zip(&ens.internal).enumerate() {
        if key.uniform(l as u64) < half * params.modulation(y) {
            *v = -*v;
        }
    }
    Ok(())
}

/// Trailing time-average of the density over a fixed step range.
#[derive(Debug, Clone)]
struct Window {
    start: u64,
    end: u64,
    sum: Vec<u64>,
    kind: WindowKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum WindowKind {
    Snapshot,
    Deviation,
}

/// Stepwise Monte Carlo simulation.
pub struct McSimulation {
    cfg: McConfig,
    ens: ParticleEnsemble,
    sensed: Vec<f64>,
    s: Vec<f64>,
    s_scratch: Vec<f64>,
    s_padded: Vec<f64>,
    /// Counts of the current positions.
    counts: Vec<u64>,
    /// Counts of the positions after the next advection.
    pending: Vec<u64>,
    lanes: Vec<u32>,
    step: u64,
    key: StreamKey,
    pool: Option<rayon::ThreadPool>,
    windows: Vec<Window>,
    record: RunRecord,
}

impl McSimulation {
    pub fn new(cfg: McConfig) -> Result<Self> {
        cfg.validate()?;
        let ens = init_uniform(&cfg);
        let grid = cfg.grid;
        let n = ens.len();
        let mut counts = vec![0u64; grid.cells()];
        for &r in &ens.positions {
            counts[grid.cell_of(r)] += 1;
        }
        let mut pending = vec![0u64; grid.cells()];
        for (&r, &v) in ens.positions.iter().zip(&ens.velocities) {
            pending[grid.cell_of(grid.wrap(r + v as f64 * cfg.dt))] += 1;
        }
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let windows = Self::plan_windows(&cfg);
        let mut sim = McSimulation {
            key: StreamKey::new(cfg.seed),
            record: RunRecord::new(EngineKind::Mc, grid),
            s: vec![1.0; grid.cells()],
            s_scratch: vec![0.0; grid.cells()],
            s_padded: Vec::with_capacity(grid.cells() + 2),
            sensed: vec![1.0; n],
            ens,
            counts,
            pending,
            lanes: vec![0; grid.cells() * LANES],
            step: 0,
            pool,
            windows,
            cfg,
        };
        sim.observe();
        Ok(sim)
    }

    fn plan_windows(cfg: &McConfig) -> Vec<Window> {
        let total = cfg.steps();
        let w = cfg.window_steps();
        let mut out = Vec::new();
        let mut times: Vec<f64> = cfg.snapshot_times.clone();
        let t_end_lambda = cfg.params.t_lambda(cfg.t_end);
        if !times.iter().any(|t| (t - t_end_lambda).abs() < 1e-12) {
            times.push(t_end_lambda);
        }
        let mut ends: Vec<u64> = times
            .iter()
            .filter(|&&t| t >= 0.0)
            .map(|&t| ((cfg.params.t_from_lambda(t) / cfg.dt).round() as u64).min(total))
            .collect();
        ends.sort_unstable();
        ends.dedup();
        for end in ends {
            let start = if end == 0 { 0 } else { end.saturating_sub(w - 1).max(1) };
            out.push(Window {
                start,
                end,
                sum: vec![0; cfg.grid.cells()],
                kind: WindowKind::Snapshot,
            });
        }
        let mut end = w;
        while end <= total {
            out.push(Window {
                start: end - w + 1,
                end,
                sum: vec![0; cfg.grid.cells()],
                kind: WindowKind::Deviation,
            });
            end += w;
        }
        out
    }

    pub fn config(&self) -> &McConfig {
        &self.cfg
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ens
    }

    /// Current chemoattractant field `S^k`.
    pub fn field(&self) -> ScalarField {
        ScalarField::new(self.cfg.grid, self.s.clone())
    }

    /// Current instantaneous density `rho^k`.
    pub fn density(&self) -> ScalarField {
        let inv = 1.0 / self.cfg.particles_per_cell as f64;
        ScalarField::new(
            self.cfg.grid,
            self.counts.iter().map(|&c| c as f64 * inv).collect(),
        )
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    /// Advance one full time step.
    pub fn step(&mut self) -> Result<()> {
        let cfg = &self.cfg;
        let grid = cfg.grid;
        let inv_nbar = 1.0 / cfg.particles_per_cell as f64;
        std::mem::swap(&mut self.counts, &mut self.pending);
        let rho: Vec<f64> = self.counts.iter().map(|&c| c as f64 * inv_nbar).collect();
        step_chemo_into(&self.s, &rho, cfg.dt, grid.dx(), &cfg.params, &mut self.s_scratch);
        std::mem::swap(&mut self.s, &mut self.s_scratch);

        let smax = self.s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rmax = rho.iter().copied().fold(0.0, f64::max);
        if !(smax.abs() <= BLOWUP_LIMIT) || rmax > BLOWUP_LIMIT {
            return Err(Error::FieldBlowup {
                value: smax.max(rmax),
                limit: BLOWUP_LIMIT,
            });
        }
        if let Some(index) = self.s.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveConcentration {
                index,
                value: self.s[index],
            });
        }

        self.step += 1;
        pad(&self.s, &mut self.s_padded);
        let kernel = Kernel {
            grid,
            dt: cfg.dt,
            half_rate: 0.5 * cfg.dt * cfg.params.lambda0,
            inv_relax: 1.0 / (1.0 + cfg.dt / cfg.params.tau),
            delta: cfg.params.delta,
            chi: cfg.params.chi,
            s: &self.s_padded,
            key: self.key.at_step(self.step),
        };
        let ens = &mut self.ens;
        let sensed = &mut self.sensed;
        let pending = &mut self.pending;
        match &self.pool {
            None => {
                pending.iter_mut().for_each(|c| *c = 0);
                let lanes = &mut self.lanes;
                for (c, (((r, v), y), s)) in ens
                    .positions
                    .chunks_mut(CHUNK)
                    .zip(ens.velocities.chunks_mut(CHUNK))
                    .zip(ens.internal.chunks_mut(CHUNK))
                    .zip(sensed.chunks_mut(CHUNK))
                    .enumerate()
                {
                    lanes.iter_mut().for_each(|x| *x = 0);
                    kernel.run(c * CHUNK, r, v, y, s, lanes);
                    merge_lanes(lanes, grid.cells(), pending);
                }
            }
            Some(pool) => {
                let cells = grid.cells();
                let partial: Vec<Vec<u32>> = pool.install(|| {
                    ens.positions
                        .par_chunks_mut(CHUNK)
                        .zip(ens.velocities.par_chunks_mut(CHUNK))
                        .zip(ens.internal.par_chunks_mut(CHUNK))
                        .zip(sensed.par_chunks_mut(CHUNK))
                        .enumerate()
                        .map(|(c, (((r, v), y), s))| {
                            let mut local = vec![0u32; cells * LANES];
                            kernel.run(c * CHUNK, r, v, y, s, &mut local);
                            local
                        })
                        .collect()
                });
                pending.iter_mut().for_each(|c| *c = 0);
                for local in partial {
                    merge_lanes(&local, cells, pending);
                }
            }
        }
        self.observe();
        Ok(())
    }

    /// Accumulate the current density into active averaging windows.
    fn observe(&mut self) {
        let k = self.step;
        let mut finished = Vec::new();
        for (idx, w) in self.windows.iter_mut().enumerate() {
            if w.start <= k && k <= w.end {
                for (a, &c) in w.sum.iter_mut().zip(&self.counts) {
                    *a += c;
                }
                if k == w.end {
                    finished.push(idx);
                }
            }
        }
        if finished.is_empty() {
            return;
        }
        let grid = self.cfg.grid;
        let t = self.time();
        let t_lambda = self.cfg.params.t_lambda(t);
        for &idx in finished.iter() {
            let w = &self.windows[idx];
            let n = (w.end - w.start + 1) as f64 * self.cfg.particles_per_cell as f64;
            let rho = ScalarField::new(grid, w.sum.iter().map(|&c| c as f64 / n).collect());
            match w.kind {
                WindowKind::Snapshot => self.record.snapshots.push(Snapshot {
                    t,
                    t_lambda,
                    rho,
                    s: ScalarField::new(grid, self.s.clone()),
                }),
                WindowKind::Deviation => {
                    let max_deviation =
                        rho.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
                    self.record.series.push(SeriesPoint {
                        t,
                        t_lambda,
                        max_deviation,
                        peak: rho.max() - 1.0,
                    });
                }
            }
        }
        for idx in finished.into_iter().rev() {
            self.windows.swap_remove(idx);
        }
        self.windows.sort_by_key(|w| (w.end, w.kind == WindowKind::Deviation));
    }

    /// Run to `t_end` and return the record.
    pub fn run(mut self) -> Result<RunRecord> {
        let total = self.cfg.steps();
        while self.step < total {
            self.step()?;
        }
        self.record.steps = self.step;
        Ok(self.record)
    }

    /// Run to `t_end`, keeping the simulation for inspection.
    pub fn run_in_place(&mut self) -> Result<()> {
        let total = self.cfg.steps();
        while self.step < total {
            self.step()?;
        }
        self.record.steps = self.step;
        Ok(())
    }
}

/// Fused per-particle work: sense, adapt, tumble, then advect for the next
/// step and deposit.
#[derive(Clone, Copy)]
struct Kernel<'a> {
    grid: Grid1D,
    dt: f64,
    half_rate: f64,
    inv_relax: f64,
    delta: f64,
    chi: f64,
    s: &'a [f64],
    key: StepKey,
}

impl Kernel<'_> {
    /// `counts` holds `LANES` interleaved histograms of `cells` entries each;
    /// spreading consecutive particles over lanes avoids store-to-load stalls
    /// on a single counter.
    #[inline(always)]
    fn run(
        &self,
        offset: usize,
        pos: &mut [f64],
        vel: &mut [i8],
        internal: &mut [f64],
        sensed: &mut [f64],
        counts: &mut [u32],
    ) {
        let grid = self.grid;
        let cells = grid.cells();
        // Lambda <= 1 + chi, so larger draws never flip
        let skip = self.half_rate * (1.0 + self.chi) * (1.0 + 1e-9);
        let lanes = counts.chunks_exact_mut(cells);
        let mut lanes: Vec<&mut [u32]> = lanes.collect();
        for (j, (((p, v), y), prev)) in pos
            .iter_mut()
            .zip(vel.iter_mut())
            .zip(internal.iter_mut())
            .zip(sensed.iter_mut())
            .enumerate()
        {
            let r = grid.wrap(*p + *v as f64 * self.dt);
            *p = r;
            let now = interpolate_padded(self.s, &grid, r);
            let yn = relax_internal(*y, now, *prev, self.inv_relax);
            *y = yn;
            *prev = now;
            let u = self.key.uniform((offset + j) as u64);
            if u < skip {
                let p = self.half_rate * crate::model::modulation(yn, self.delta, self.chi);
                if u < p {
                    *v = -*v;
                }
            }
            let next = grid.wrap(r + *v as f64 * self.dt);
            lanes[j % LANES][grid.cell_of(next)] += 1;
        }
    }
}

const LANES: usize = 4;

fn merge_lanes(lanes: &[u32], cells: usize, into: &mut [u64]) {
    for lane in lanes.chunks(cells) {
        for (a, &b) in into.iter_mut().zip(lane) {
            *a += b as u64;
        }
    }
}

/// Run a Monte Carlo simulation to completion.
pub fn run_mc(cfg: &McConfig) -> Result<RunRecord> {
    McSimulation::new(cfg.clone())?.run()
}

/// Internal-state dynamics under a frozen, spatially constant log-gradient
/// `g = dM/dx`, bypassing the chemoattractant coupling.
///
/// Positions are irrelevant to `y` here: a particle moving with velocity `v`
/// senses the relative change `exp(g v dt) - 1` each step. Returns the
/// ensemble after `steps` steps; positions are advected on `grid` as usual.
pub fn run_frozen_gradient(
    params: &ModelParams,
    grid: Grid1D,
    particles: usize,
    gradient: f64,
    dt: f64,
    steps: u64,
    seed: u64,
) -> Result<ParticleEnsemble> {
    params.validate_allow_null().map_err(Error::InvalidParams)?;
    let p = max_flip_probability(dt, params);
    if p >= 1.0 {
        return Err(Error::ProbabilityOverflow { probability: p });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ens = ParticleEnsemble {
        positions: (0..particles).map(|_| rng.gen::<f64>() * grid.length()).map(|x| grid.wrap(x)).collect(),
        velocities: (0..particles).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
        internal: vec![0.0; particles],
    };
    let key = StreamKey::new(seed);
    let inv = 1.0 / (1.0 + dt / params.tau);
    let up = (gradient * dt).exp();
    let down = (-gradient * dt).exp();
    for step in 1..=steps {
        advect(&mut ens, &grid, dt);
        for (y, &v) in ens.internal.iter_mut().zip(&ens.velocities) {
            let ratio = if v > 0 { up } else { down };
            *y = relax_internal(*y, ratio, 1.0, inv);
        }
        tumble(&mut ens, dt, params, &key, step)?;
    }
    Ok(ens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> McConfig {
        let params = ModelParams::new(10.0, 0.1, 0.1, 0.5);
        McConfig {
            params,
            grid: Grid1D::new(50, 10.0).unwrap(),
            particles_per_cell: 40,
            dt: 1e-3,
            t_end: 0.5,
            seed,
            snapshot_times: vec![],
            avg_window: 0.05,
            threads: 1,
        }
    }

    #[test]
    fn init_places_exact_counts() {
        let mut cfg = small_cfg(1);
        cfg.particles_per_cell = 100;
        let ens = init_uniform(&cfg);
        assert_eq!(ens.len(), 5000);
        let rho = deposit_density(&ens, &cfg.grid, cfg.particles_per_cell);
        assert!(rho.values.iter().all(|&v| v == 1.0));
        assert!(ens.internal.iter().all(|&y| y == 0.0));
        assert!(ens.velocities.iter().all(|&v| v == 1 || v == -1));
        assert_eq!(init_uniform(&cfg), ens);
    }

    #[test]
    fn init_reference_sizes() {
        let cfg = McConfig::reference(ModelParams::new(10.0, 0.1, 0.1, 0.5), 1.0, 0).unwrap();
        assert_eq!(cfg.grid.cells(), 50);
        assert_eq!(cfg.particles_per_cell, 28_800);
        assert_eq!(cfg.total_particles(), 1_440_000);
        assert_eq!(cfg.dt, 1e-3);
        let hi = McConfig::reference(ModelParams::new(500.0, 0.1, 0.01, 0.5), 1.0, 0).unwrap();
        assert_eq!((hi.grid.cells(), hi.particles_per_cell, hi.dt), (100, 7_400, 5e-5));
        assert_eq!(default_dt(200.0), 2e-4);
    }

    #[test]
    fn advect_examples() {
        let grid = Grid1D::new(50, 10.0).unwrap();
        let mut ens = ParticleEnsemble {
            positions: vec![0.5, 10.0 - 0.5e-3],
            velocities: vec![1, 1],
            internal: vec![0.0; 2],
        };
        advect(&mut ens, &grid, 1e-3);
        assert!((ens.positions[0] - 0.501).abs() < 1e-15);
        assert!((ens.positions[1] - 0.5e-3).abs() < 1e-12);
    }

    #[test]
    fn uniform_ensemble_stays_uniform_under_translation() {
        // one particle per cell at the same offset, all moving right
        let grid = Grid1D::new(50, 10.0).unwrap();
        let mut ens = ParticleEnsemble {
            positions: (0..50).map(|i| grid.center(i)).collect(),
            velocities: vec![1; 50],
            internal: vec![0.0; 50],
        };
        for _ in 0..1234 {
            advect(&mut ens, &grid, 1e-3);
        }
        let rho = deposit_density(&ens, &grid, 1);
        assert!(rho.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deposit_hand_count() {
        let grid = Grid1D::new(4, 4.0).unwrap();
        let ens = ParticleEnsemble {
            positions: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.9],
            velocities: vec![1; 6],
            internal: vec![0.0; 6],
        };
        let rho = deposit_density(&ens, &grid, 3);
        assert_eq!(rho.values, vec![2.0, 0.0, 0.0, 0.0]);
        assert_eq!(rho.values.iter().sum::<f64>() * 3.0, 6.0);
    }

    #[test]
    fn interpolation_examples() {
        let grid = Grid1D::new(4, 4.0).unwrap();
        let s = ScalarField::new(grid, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(interpolate_s(&s, 1.75), 2.25);
        assert_eq!(interpolate_s(&s, 1.5), 2.0);
        assert_eq!(interpolate_s(&s, 1.25), 1.75);
        // periodic neighbours at the ends
        assert_eq!(interpolate_s(&s, 0.25), 1.0 + (1.0 - 4.0) * -0.25);
        assert_eq!(interpolate_s(&s, 3.75), 4.0 + (1.0 - 4.0) * 0.25);
        let c = ScalarField::constant(grid, 2.5);
        for x in [0.0, 0.3, 1.99, 3.999] {
            assert_eq!(interpolate_s(&c, x), 2.5);
        }
    }

    #[test]
    fn update_internal_examples() {
        let grid = Grid1D::new(4, 4.0).unwrap();
        let params = ModelParams::new(10.0, 0.1, 0.1, 0.5);
        let s = ScalarField::constant(grid, 1.0);
        let mut ens = ParticleEnsemble {
            positions: vec![1.5],
            velocities: vec![1],
            internal: vec![0.3],
        };
        let mut sensed = vec![1.0];
        update_internal(&mut ens, &s, &mut sensed, 1e-3, &params).unwrap();
        assert!((ens.internal[0] - 0.3 / 1.01).abs() < 1e-15);

        let s = ScalarField::constant(grid, 1.01);
        ens.internal[0] = 0.0;
        let mut sensed = vec![1.0];
        update_internal(&mut ens, &s, &mut sensed, 1e-3, &params).unwrap();
        assert!((ens.internal[0] - 0.01 / 1.01).abs() < 1e-15);
        assert!((ens.internal[0] - 0.009901).abs() < 1e-6);
        assert_eq!(sensed[0], 1.01);

        let mut bad = vec![0.0];
        assert!(matches!(
            update_internal(&mut ens, &s, &mut bad, 1e-3, &params),
            Err(Error::NonPositiveConcentration { .. })
        ));
    }

    #[test]
    fn internal_state_fixed_point_is_tau_times_gradient() {
        // S = exp(G x) on a fine grid, particle running right
        let g_const = 0.3;
        let params = ModelParams::new(10.0, 0.05, 0.1, 0.5);
        let grid = Grid1D::new(20_000, 10.0).unwrap();
        let s = ScalarField::from_fn(grid, |x| (g_const * x).exp());
        for dt in [1e-3, 1e-4] {
            let mut ens = ParticleEnsemble {
                positions: vec![1.0],
                velocities: vec![1],
                internal: vec![0.0],
            };
            let mut sensed = vec![interpolate_s(&s, 1.0)];
            let steps = (5.0 / dt) as usize;
            for _ in 0..steps {
                advect(&mut ens, &grid, dt);
                update_internal(&mut ens, &s, &mut sensed, dt, &params).unwrap();
            }
            let want = params.tau * g_const;
            let rel = (ens.internal[0] - want).abs() / want;
            assert!(rel < 2.0 * g_const * dt + 1e-4, "dt {dt}: {} vs {want}", ens.internal[0]);
        }
    }

    #[test]
    fn tumble_probability_overflow() {
        let params = ModelParams::new(10.0, 0.1, 0.1, 0.5);
        let mut ens = ParticleEnsemble {
            positions: vec![0.0],
            velocities: vec![1],
            internal: vec![0.0],
        };
        let err = tumble(&mut ens, 0.2, &params, &StreamKey::new(0), 1).unwrap_err();
        assert!(matches!(err, Error::ProbabilityOverflow { .. }));
    }

    #[test]
    fn tumble_fraction_binomial() {
        let params = ModelParams::new(10.0, 0.1, 0.1, 0.5);
        let n = 1_000_000;
        let mut ens = ParticleEnsemble {
            positions: vec![0.0; n],
            velocities: vec![1; n],
            internal: vec![0.0; n],
        };
        tumble(&mut ens, 1e-3, &params, &StreamKey::new(42), 1).unwrap();
        let flipped = ens.velocities.iter().filter(|&&v| v == -1).count() as f64 / n as f64;
        let p: f64 = 0.005;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((flipped - p).abs() < 3.0 * sd, "flipped {flipped}");
    }

    #[test]
    fn tumble_at_saturated_state_uses_lower_bound() {
        let params = ModelParams::new(10.0, 0.1, 0.1, 0.5);
        let n = 400_000;
        let mut ens = ParticleEnsemble {
            positions: vec![0.0; n],
            velocities: vec![1; n],
            internal: vec![1e12; n],
        };
        tumble(&mut ens, 1e-2, &params, &StreamKey::new(5), 1).unwrap();
        let p = 0.05 * 0.5;
        let flipped = ens.velocities.iter().filter(|&&v| v == -1).count() as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((flipped - p).abs() < 3.0 * sd);
    }

    #[test]
    fn mean_run_duration_at_uniform_state() {
        let params = ModelParams::new(10.0, 0.1, 0.1, 0.5);
        for dt in [1e-3, 1e-4] {
            let n = 4_000;
            let mut ens = ParticleEnsemble {
                positions: vec![0.0; n],
                velocities: vec![1; n],
                internal: vec![0.0; n],
            };
            let key = StreamKey::new(17);
            let mut flips = 0u64;
            let steps = (5.0 / dt) as u64;
            for step in 1..=steps {
                let before = ens.velocities.clone();
                tumble(&mut ens, dt, &params, &key, step).unwrap();
                flips += ens.velocities.iter().zip(&before).filter(|(a, b)| a != b).count() as u64;
            }
            // particle time per completed run, counting censored runs' time
            let mean = (n as u64 * steps) as f64 * dt / flips as f64;
            let want = 2.0 / params.lambda0;
            assert!((mean - want).abs() / want < 0.02, "dt {dt}: {mean}");
        }
    }

    /// Reference composition of the public single-step operations.
    fn reference_run(cfg: &McConfig, steps: u64) -> (ParticleEnsemble, Vec<f64>, ScalarField) {
        let mut ens = init_uniform(cfg);
        let grid = cfg.grid;
        let mut s = ScalarField::constant(grid, 1.0);
        let mut sensed: Vec<f64> = ens.positions.iter().map(|&r| interpolate_s(&s, r)).collect();
        let key = StreamKey::new(cfg.seed);
        let mut rho = deposit_density(&ens, &grid, cfg.particles_per_cell);
        for k in 1..=steps {
            advect(&mut ens, &grid, cfg.dt);
            rho = deposit_density(&ens, &grid, cfg.particles_per_cell);
            s = crate::field::step_chemo_explicit(&s, &rho, cfg.dt, &cfg.params).unwrap();
            update_internal(&mut ens, &s, &mut sensed, cfg.dt, &cfg.params).unwrap();
            tumble(&mut ens, cfg.dt, &cfg.params, &key, k).unwrap();
        }
        (ens, rho.values, s)
    }

    #[test]
    fn fused_engine_matches_reference_ops() {
        let cfg = small_cfg(23);
        let (ens, rho, s) = reference_run(&cfg, 200);
        let mut sim = McSimulation::new(cfg).unwrap();
        for _ in 0..200 {
            sim.step().unwrap();
        }
        assert_eq!(sim.ensemble(), &ens);
        assert_eq!(sim.density().values, rho);
        assert_eq!(sim.field(), s);
    }

    #[test]
    fn particle_count_conserved_and_mean_density_one() {
        let mut sim = McSimulation::new(small_cfg(2)).unwrap();
        for _ in 0..300 {
            sim.step().unwrap();
            let rho = sim.density();
            assert!((rho.values.iter().sum::<f64>() - 50.0).abs() < 1e-9);
            assert!(sim.ensemble().positions.iter().all(|&r| (0.0..10.0).contains(&r)));
        }
        assert_eq!(sim.ensemble().len(), 2000);
    }

    #[test]
    fn serial_and_parallel_identical() {
        let mut cfg = small_cfg(4);
        cfg.particles_per_cell = 700; // several chunks
        cfg.t_end = 0.2;
        let a = run_mc(&cfg).unwrap();
        cfg.threads = 3;
        let b = run_mc(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_determinism() {
        let cfg = small_cfg(9);
        assert_eq!(run_mc(&cfg).unwrap(), run_mc(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 10;
        assert_ne!(run_mc(&cfg).unwrap(), run_mc(&other).unwrap());
    }

    #[test]
    fn windows_and_snapshots() {
        let mut cfg = small_cfg(3);
        // lambda0 L^2 = 1000, so window 0.05 t_lambda = 50 time units
        cfg.avg_window = 1e-4; // 0.1 time units = 100 steps
        cfg.t_end = 0.5;
        cfg.snapshot_times = vec![0.0, 2e-4];
        let rec = run_mc(&cfg).unwrap();
        assert_eq!(rec.series.len(), 5);
        assert_eq!(rec.snapshots.len(), 3);
        assert_eq!(rec.snapshots[0].t, 0.0);
        assert!(rec.snapshots[0].rho.values.iter().all(|&v| v == 1.0));
        assert!((rec.snapshots[1].t - 0.2).abs() < 1e-12);
        assert!((rec.snapshots[2].t - 0.5).abs() < 1e-12);
        for w in rec.series.windows(2) {
            assert!(w[1].t_lambda > w[0].t_lambda);
        }
        for snap in &rec.snapshots {
            assert!((snap.rho.mean() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(0);
        cfg.dt = 0.05;
        assert!(matches!(cfg.validate(), Err(Error::CflViolation { .. })));
        let mut cfg = small_cfg(0);
        cfg.params.lambda0 = 200.0;
        cfg.dt = 0.015;
        assert!(matches!(cfg.validate(), Err(Error::ProbabilityOverflow { .. })));
        let mut cfg = small_cfg(0);
        cfg.params.chi = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn frozen_gradient_plus_movers_sit_at_tau_g() {
        let params = ModelParams::from_alpha(10.0, 0.03, 0.1, 0.5);
        let grid = Grid1D::new(50, 10.0).unwrap();
        let g = 0.8;
        let ens = run_frozen_gradient(&params, grid, 20_000, g, 1e-3, 2000, 1).unwrap();
        let mut plus: Vec<f64> = ens
            .internal
            .iter()
            .zip(&ens.velocities)
            .filter(|(_, &v)| v > 0)
            .map(|(&y, _)| y)
            .collect();
        plus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = plus[plus.len() / 2];
        let want = params.tau * g;
        assert!((median - want).abs() / want < 0.01, "{median} vs {want}");
    }
}
