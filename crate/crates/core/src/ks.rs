//! Keller-Segel-type limits `d_t rho = d_xx rho - d_x(c rho d_x M)` with
//! `M = ln S` and `S` the quasi-static chemoattractant.
//!
//! Fluxes live on cell faces: the drift uses the face gradient
//! `(ln S_{i+1} - ln S_i)/dx` with upwinded density, diffusion the 3-point
//! stencil. The scheme is in flux form, so total mass is conserved to
//! round-off.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid1D, QuasiStaticSolver, ScalarField};
use crate::model::ModelParams;
use crate::record::{EngineKind, RunRecord, SeriesPoint, Snapshot, Stationary};

/// Which scaling of the adaptation time the limit describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `tau` of the order of the mean run time.
    Fast,
    /// `tau` much shorter than the run time: no chemotactic drift.
    VeryFast,
    /// `tau` much longer than the run time.
    Moderate,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Fast => "fast",
            Regime::VeryFast => "very_fast",
            Regime::Moderate => "moderate",
        }
    }
}

/// Prefactor `c` of the drift `c rho d_x M`.
pub fn chemotactic_coefficient(params: &ModelParams, regime: Regime) -> f64 {
    match regime {
        Regime::Fast => {
            let a = params.alpha();
            a * params.chi / (params.delta * (1.0 + a))
        }
        Regime::VeryFast => 0.0,
        Regime::Moderate => params.chi / params.delta,
    }
}

/// Initial density `1 + perturbation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `amplitude cos(2 pi n x / L)`.
    Mode { amplitude: f64, n: u32 },
    /// Sum of the first `modes` Fourier modes with seeded random phases and
    /// amplitudes in `[0, amplitude]`, rescaled so the largest deviation
    /// equals `amplitude`.
    Noise { amplitude: f64, seed: u64, modes: u32 },
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::Mode {
            amplitude: 1e-2,
            n: 1,
        }
    }
}

impl Perturbation {
    pub fn density(&self, grid: &Grid1D) -> Result<ScalarField> {
        let l = grid.length();
        match *self {
            Perturbation::Mode { amplitude, n } => {
                if !(amplitude.abs() < 1.0) {
                    return Err(Error::Config("perturbation amplitude must be below 1".into()));
                }
                Ok(ScalarField::from_fn(*grid, |x| {
                    1.0 + amplitude * (TAU * n as f64 * x / l).cos()
                }))
            }
            Perturbation::Noise {
                amplitude,
                seed,
                modes,
            } => {
                if !(amplitude.abs() < 1.0) || modes == 0 {
                    return Err(Error::Config("noise needs amplitude < 1 and modes >= 1".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let terms: Vec<(f64, f64)> = (0..modes)
                    .map(|_| (rng.gen::<f64>(), rng.gen::<f64>() * TAU))
                    .collect();
                let raw: Vec<f64> = grid
                    .centers()
                    .iter()
                    .map(|&x| {
                        terms
                            .iter()
                            .enumerate()
                            .map(|(j, &(a, ph))| a * (TAU * (j + 1) as f64 * x / l + ph).cos())
                            .sum()
                    })
                    .collect();
                let mean = raw.iter().sum::<f64>() / raw.len() as f64;
                let peak = raw.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
                let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
                Ok(ScalarField::new(
                    *grid,
                    raw.iter().map(|v| 1.0 + (v - mean) * scale).collect(),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsConfig {
    pub params: ModelParams,
    pub grid: Grid1D,
    pub regime: Regime,
    /// Requested step; each step is further capped by the stability bound.
    pub dt: f64,
    pub t_end: f64,
    pub perturbation: Perturbation,
    pub snapshot_times: Vec<f64>,
    /// Spacing of the deviation series.
    pub output_interval: f64,
    pub stop_when_stationary: bool,
}

impl KsConfig {
    pub fn new(params: ModelParams, grid: Grid1D, regime: Regime, t_end: f64) -> Self {
        KsConfig {
            params,
            grid,
            regime,
            dt: 1e-2,
            t_end,
            perturbation: Perturbation::default(),
            snapshot_times: vec![],
            output_interval: 0.1,
            stop_when_stationary: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate_allow_null().map_err(Error::InvalidParams)?;
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) || !(self.output_interval > 0.0) {
            return Err(Error::Config("dt, output_interval must be > 0 and t_end >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsState {
    pub rho: ScalarField,
    pub s: ScalarField,
    pub t: f64,
}

impl KsState {
    /// State with the given density and its quasi-static field.
    pub fn from_density(rho: ScalarField, params: &ModelParams) -> Result<Self> {
        let s = crate::field::solve_chemo_quasistatic(&rho, params)?;
        Ok(KsState { rho, s, t: 0.0 })
    }

    pub fn mass(&self) -> f64 {
        self.rho.integral()
    }
}

/// Stability bound `0.9 min(dx^2/2, dx/max|u|)` for face drift velocities `u`.
pub fn stable_dt(dx: f64, max_drift: f64) -> f64 {
    let diff = 0.5 * dx * dx;
    let adv = if max_drift > 0.0 { dx / max_drift } else { f64::INFINITY };
    0.9 * diff.min(adv)
}

/// Step size actually taken: the requested `dt`, the bound above and the
/// sharper positivity bound `0.9 / (2/dx^2 + 2 max|u|/dx)`.
pub fn step_size(requested: f64, dx: f64, max_drift: f64) -> f64 {
    let positive = 0.9 / (2.0 / (dx * dx) + 2.0 * max_drift / dx);
    requested.min(stable_dt(dx, max_drift)).min(positive)
}

/// Reusable workspace for repeated steps on one grid.
pub struct KsSolver {
    c: f64,
    qs: QuasiStaticSolver,
    drift: Vec<f64>,
    next: Vec<f64>,
}

impl KsSolver {
    pub fn new(params: ModelParams, grid: Grid1D, regime: Regime) -> Result<Self> {
        Ok(KsSolver {
            c: chemotactic_coefficient(&params, regime),
            qs: QuasiStaticSolver::new(grid, &params)?,
            drift: vec![0.0; grid.cells()],
            next: vec![0.0; grid.cells()],
        })
    }

    pub fn coefficient(&self) -> f64 {
        self.c
    }

    /// Face drift `u_{i+1/2} = c (ln S_{i+1} - ln S_i)/dx`; returns `max|u|`.
    pub fn compute_drift(&mut self, s: &ScalarField) -> Result<f64> {
        let n = s.values.len();
        if let Some(index) = s.values.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveConcentration {
                index,
                value: s.values[index],
            });
        }
        let inv_dx = 1.0 / s.grid.dx();
        let mut max = 0.0f64;
        for i in 0..n {
            let j = if i + 1 == n { 0 } else { i + 1 };
            let u = self.c * (s.values[j].ln() - s.values[i].ln()) * inv_dx;
            self.drift[i] = u;
            max = max.max(u.abs());
        }
        Ok(max)
    }

    /// Advance `state` by `dt` using the drift from the last
    /// [`compute_drift`](Self::compute_drift) call on `state.s`.
    fn advance(&mut self, state: &mut KsState, dt: f64) -> Result<()> {
        let rho = &state.rho.values;
        let n = rho.len();
        let dx = state.rho.grid.dx();
        let b = dt / dx;
        let flux = |i: usize, rho: &[f64], drift: &[f64]| -> f64 {
            let j = if i + 1 == n { 0 } else { i + 1 };
            let u = drift[i];
            let up = if u > 0.0 { rho[i] } else { rho[j] };
            u * up - (rho[j] - rho[i]) / dx
        };
        let mut left = flux(n - 1, rho, &self.drift);
        for i in 0..n {
            let right = flux(i, rho, &self.drift);
            self.next[i] = rho[i] - b * (right - left);
            left = right;
        }
        if let Some(index) = self.next.iter().position(|&v| v < -1e-12) {
            return Err(Error::NegativeDensity {
                index,
                value: self.next[index],
            });
        }
        state.rho.values.copy_from_slice(&self.next);
        self.qs.solve_into(&state.rho.values, &mut state.s.values);
        state.t += dt;
        Ok(())
    }

    /// One step of size `dt`; errors if `dt` exceeds the stability bound.
    pub fn step(&mut self, state: &mut KsState, dt: f64) -> Result<()> {
        let max_u = self.compute_drift(&state.s)?;
        let limit = stable_dt(state.rho.grid.dx(), max_u);
        if !(dt > 0.0) || dt > limit {
            return Err(Error::CflViolation { dt, limit });
        }
        self.advance(state, dt)
    }

    /// Advance to exactly `t_target`, taking the largest admissible steps.
    pub fn advance_to(&mut self, state: &mut KsState, t_target: f64, requested: f64) -> Result<u64> {
        let mut steps = 0;
        let dx = state.rho.grid.dx();
        while state.t < t_target * (1.0 - 1e-14) - 1e-300 {
            let max_u = self.compute_drift(&state.s)?;
            let mut dt = step_size(requested, dx, max_u);
            let remaining = t_target - state.t;
            if dt >= remaining * (1.0 - 1e-12) {
                dt = remaining;
            }
            self.advance(state, dt)?;
            if dt == remaining {
                state.t = t_target;
            }
            steps += 1;
        }
        Ok(steps)
    }
}

/// One explicit step; the new state carries the refreshed quasi-static `S`.
pub fn step_ks(state: &KsState, cfg: &KsConfig, dt: f64) -> Result<KsState> {
    let mut solver = KsSolver::new(cfg.params, state.rho.grid, cfg.regime)?;
    let mut out = state.clone();
    solver.step(&mut out, dt)?;
    Ok(out)
}

fn max_deviation(rho: &ScalarField) -> f64 {
    rho.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max)
}

/// Shared driver for the continuum engines: integrates with fixed output
/// times, records snapshots and the deviation series, and stops early once
/// `max rho - 1` changes by less than `1e-4` over one time unit.
pub(crate) struct ContinuumDriver {
    pub record: RunRecord,
    pub length: f64,
    pub t_end: f64,
    pub interval: f64,
    pub snapshot_times: Vec<f64>,
    pub stop_when_stationary: bool,
}

/// Threshold on the change of `max rho - 1` over one time unit.
pub const STATIONARY_TOL: f64 = 1e-4;

/// `max rho - 1` moved by less than [`STATIONARY_TOL`] over one time unit.
/// Near the instability threshold a small deviation can grow by less than
/// that while still far from saturation, so the change must also be below
/// a thousandth of the deviation itself unless the state is essentially
/// uniform.
pub fn is_stationary(prev: f64, now: f64) -> bool {
    let change = (now - prev).abs();
    change < STATIONARY_TOL && (change <= 1e-3 * now.abs() || now.abs() < 1e-3)
}

impl ContinuumDriver {
    pub fn output_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = Vec::new();
        let mut k = 1u64;
        loop {
            let t = k as f64 * self.interval;
            if t > self.t_end * (1.0 + 1e-12) {
                break;
            }
            times.push(t);
            k += 1;
        }
        let whole = self.t_end.floor() as u64;
        for u in 1..=whole {
            times.push(u as f64);
        }
        times.extend(self.snapshot_times.iter().copied().filter(|&t| t > 0.0 && t <= self.t_end));
        times.push(self.t_end);
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        times
    }

    pub fn snapshot(&mut self, t: f64, rho: &ScalarField, s: &ScalarField) {
        self.record.snapshots.push(Snapshot {
            t,
            t_lambda: t / (self.length * self.length),
            rho: rho.clone(),
            s: s.clone(),
        });
    }

    /// Run `advance(t)` through every output time. `state` returns the
    /// current `(rho, S)` pair; `on_snapshot` fires after each snapshot.
    pub fn drive<F, G, H>(&mut self, mut advance: F, state: G, mut on_snapshot: H) -> Result<()>
    where
        F: FnMut(f64) -> Result<u64>,
        G: Fn() -> (ScalarField, ScalarField),
        H: FnMut(),
    {
        let (rho0, s0) = state();
        if self.snapshot_times.iter().any(|&t| t == 0.0) {
            self.snapshot(0.0, &rho0, &s0);
            on_snapshot();
        }
        let mut unit_peaks: Vec<f64> = vec![rho0.max() - 1.0];
        let is_out = |t: f64, interval: f64| {
            let q = t / interval;
            (q - q.round()).abs() < 1e-9
        };
        let times = self.output_times();
        for &t in &times {
            self.record.steps += advance(t)?;
            let (rho, s) = state();
            if !rho.is_finite() || rho.max() > crate::mc::BLOWUP_LIMIT {
                return Err(Error::FieldBlowup {
                    value: rho.max(),
                    limit: crate::mc::BLOWUP_LIMIT,
                });
            }
            let peak = rho.max() - 1.0;
            let is_end = (t - self.t_end).abs() <= 1e-12 * self.t_end.max(1.0);
            if is_out(t, self.interval) || is_end {
                self.record.series.push(SeriesPoint {
                    t,
                    t_lambda: t / (self.length * self.length),
                    max_deviation: max_deviation(&rho),
                    peak,
                });
            }
            let snap = self
                .snapshot_times
                .iter()
                .any(|&ts| ts > 0.0 && (ts - t).abs() <= 1e-12 * ts.max(1.0));
            let mut stop = false;
            if (t - t.round()).abs() < 1e-9 && t >= 1.0 {
                let prev = *unit_peaks.last().unwrap();
                unit_peaks.push(peak);
                if is_stationary(prev, peak) && self.record.stationary.is_none() {
                    self.record.stationary = Some(Stationary { t, delta_rho: peak });
                    stop = self.stop_when_stationary;
                }
            }
            if snap || is_end || stop {
                self.snapshot(t, &rho, &s);
                on_snapshot();
            }
            if stop {
                break;
            }
        }
        Ok(())
    }
}

/// Integrate from `rho = 1 + perturbation` to `t_end`.
pub fn run_ks(cfg: &KsConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let rho0 = cfg.perturbation.density(&cfg.grid)?;
    let state = std::cell::RefCell::new(KsState::from_density(rho0, &cfg.params)?);
    let mut solver = KsSolver::new(cfg.params, cfg.grid, cfg.regime)?;
    let mut driver = ContinuumDriver {
        record: RunRecord::new(EngineKind::Ks, cfg.grid),
        length: cfg.grid.length(),
        t_end: cfg.t_end,
        interval: cfg.output_interval,
        snapshot_times: cfg.snapshot_times.clone(),
        stop_when_stationary: cfg.stop_when_stationary,
    };
    driver.drive(
        |t| solver.advance_to(&mut state.borrow_mut(), t, cfg.dt),
        || {
            let s = state.borrow();
            (s.rho.clone(), s.s.clone())
        },
        || {},
    )?;
    Ok(driver.record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stability::{growth_rate, DispersionQuery};

    fn grid() -> Grid1D {
        Grid1D::new(50, 10.0).unwrap()
    }

    fn mode_amplitude(rho: &ScalarField, n: u32) -> f64 {
        let l = rho.grid.length();
        let m = rho.values.len() as f64;
        rho.grid
            .centers()
            .iter()
            .zip(&rho.values)
            .map(|(&x, &v)| (v - 1.0) * (TAU * n as f64 * x / l).cos())
            .sum::<f64>()
            * 2.0
            / m
    }

    #[test]
    fn coefficients() {
        let p = ModelParams::from_alpha(10.0, 1.0, 0.1, 0.5);
        assert!((chemotactic_coefficient(&p, Regime::Fast) - 2.5).abs() < 1e-14);
        assert_eq!(chemotactic_coefficient(&p, Regime::VeryFast), 0.0);
        assert_eq!(chemotactic_coefficient(&p, Regime::Moderate), 5.0);
        let big = ModelParams::from_alpha(10.0, 1e12, 0.1, 0.5);
        let fast = chemotactic_coefficient(&big, Regime::Fast);
        assert!((fast - chemotactic_coefficient(&big, Regime::Moderate)).abs() < 1e-10);
    }

    #[test]
    fn uniform_state_is_fixed() {
        let p = ModelParams::from_alpha(10.0, 1.0, 0.1, 0.5);
        let mut state = KsState::from_density(ScalarField::constant(grid(), 1.0), &p).unwrap();
        let mut solver = KsSolver::new(p, grid(), Regime::Moderate).unwrap();
        solver.advance_to(&mut state, 10.0, 0.01).unwrap();
        assert!(state.rho.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert!(state.s.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn heat_equation_mode_decays_by_discrete_factor() {
        let p = ModelParams::new(10.0, 0.1, 0.1, 0.0);
        let g = grid();
        let rho = ScalarField::from_fn(g, |x| 1.0 + 0.1 * (TAU * 2.0 * x / 10.0).cos());
        let mut state = KsState::from_density(rho, &p).unwrap();
        let mut solver = KsSolver::new(p, g, Regime::Fast).unwrap();
        let dt = 0.005;
        let steps = 100;
        for _ in 0..steps {
            solver.step(&mut state, dt).unwrap();
        }
        let dx = g.dx();
        let k = TAU * 2.0 / 10.0;
        let factor = 1.0 - 4.0 * dt / (dx * dx) * (0.5 * k * dx).sin().powi(2);
        let want = 0.1 * factor.powi(steps);
        assert!((mode_amplitude(&state.rho, 2) - want).abs() < 1e-14);
    }

    #[test]
    fn small_mode_grows_at_dispersion_rate() {
        let p = ModelParams::from_alpha(10.0, 100.0, 0.1, 0.5);
        let g = grid();
        let amp = 1e-4;
        let rho = ScalarField::from_fn(g, |x| 1.0 + amp * (TAU * x / 10.0).cos());
        let mut state = KsState::from_density(rho, &p).unwrap();
        let mut solver = KsSolver::new(p, g, Regime::Fast).unwrap();
        let dt = 1e-4 * g.dx() * g.dx();
        let t = 0.2;
        let steps = (t / dt).round() as usize;
        for _ in 0..steps {
            solver.step(&mut state, dt).unwrap();
        }
        let measured = (mode_amplitude(&state.rho, 1) / amp).ln() / (steps as f64 * dt);
        let mu = growth_rate(&DispersionQuery::mode(&p, 1));
        assert!(((measured - mu) / mu).abs() < 0.05, "{measured} vs {mu}");
    }

    #[test]
    fn mass_conserved_and_cfl_enforced() {
        let p = ModelParams::from_alpha(10.0, 1.0, 0.1, 0.5);
        let mut cfg = KsConfig::new(p, grid(), Regime::Moderate, 10.0);
        cfg.perturbation = Perturbation::Noise { amplitude: 0.05, seed: 3, modes: 5 };
        let rec = run_ks(&cfg).unwrap();
        let m0 = cfg.perturbation.density(&cfg.grid).unwrap().integral();
        for snap in &rec.snapshots {
            assert!((snap.rho.integral() - m0).abs() < 1e-10 * 10.0);
            assert!(snap.rho.min() >= 0.0);
        }
        let state = KsState::from_density(ScalarField::constant(grid(), 1.0), &p).unwrap();
        assert!(matches!(step_ks(&state, &cfg, 0.05), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn fast_with_huge_alpha_matches_moderate() {
        let g = grid();
        let p = ModelParams::from_alpha(10.0, 1e6, 0.1, 0.5);
        let run = |regime| {
            let mut cfg = KsConfig::new(p, g, regime, 2.0);
            cfg.dt = 1e-3;
            run_ks(&cfg).unwrap().last_snapshot().unwrap().rho.clone()
        };
        let a = run(Regime::Fast);
        let b = run(Regime::Moderate);
        assert!(a.max_abs_diff(&b) < 1e-6, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn subcritical_perturbation_decays() {
        let p = ModelParams::from_alpha(10.0, 1.0, 0.5, 0.5);
        let cfg = KsConfig::new(p, grid(), Regime::Fast, 20.0);
        let rec = run_ks(&cfg).unwrap();
        let first = rec.series.first().unwrap().max_deviation;
        let last = rec.series.last().unwrap().max_deviation;
        assert!(last < 0.1 * first);
    }

    #[test]
    fn stationary_peak_increases_with_alpha() {
        let g = grid();
        let peaks: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&alpha| {
                let p = ModelParams::from_alpha(10.0, alpha, 0.1, 0.5);
                let mut cfg = KsConfig::new(p, g, Regime::Fast, 200.0);
                cfg.stop_when_stationary = true;
                let rec = run_ks(&cfg).unwrap();
                rec.stationary.expect("stationary").delta_rho
            })
            .collect();
        assert!(peaks[0] < peaks[1] && peaks[1] < peaks[2], "{peaks:?}");
    }
}
