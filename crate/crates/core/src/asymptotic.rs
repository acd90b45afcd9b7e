//! Large-adaptation-time limit: a phase-space density `p(t, x, m)` over
//! position and internal memory `m`, with
//!
//! `d_t p = d_x(d_x p / Lambda_delta(M - m)) - d_m((M - m) p / tau_tilde)`
//!
//! where `M = ln S` and `S` is quasi-static. Explicit finite volumes:
//! centered diffusion in `x` with face coefficients, first-order upwind in
//! `m`. Both terms are in flux form and the `m` boundary fluxes are zero, so
//! mass is conserved to round-off.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid1D, QuasiStaticSolver, ScalarField};
use crate::ks::{ContinuumDriver, Perturbation};
use crate::model::ModelParams;
use crate::record::{EngineKind, RunRecord};

/// Uniform cells on `[-Y, Y]`; cell `k` is centered at `(k + 1/2 - K/2) dm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MAxis {
    cells: usize,
    dm: f64,
}

impl MAxis {
    pub fn new(cells: usize, half_width: f64) -> Result<Self> {
        if cells == 0 || !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::Config(format!(
                "m axis needs cells >= 1 and Y > 0, got {cells} and {half_width}"
            )));
        }
        Ok(MAxis {
            cells,
            dm: 2.0 * half_width / cells as f64,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dm(&self) -> f64 {
        self.dm
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.cells as f64 * self.dm
    }

    #[inline]
    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5 - 0.5 * self.cells as f64) * self.dm
    }

    /// Cell containing `m`, clamped to the axis.
    pub fn cell_of(&self, m: f64) -> usize {
        let f = (m / self.dm + 0.5 * self.cells as f64).floor();
        if f < 0.0 {
            0
        } else {
            (f as usize).min(self.cells - 1)
        }
    }

    /// Same spacing with `pad` extra cells on each side.
    pub fn padded(&self, pad: usize) -> Self {
        MAxis {
            cells: self.cells + 2 * pad,
            dm: self.dm,
        }
    }
}

/// `p_{i,k}` stored row-major by position: `values[i * K + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDensity {
    pub grid: Grid1D,
    pub axis: MAxis,
    pub values: Vec<f64>,
    pub t: f64,
}

impl PhaseDensity {
    pub fn zeros(grid: Grid1D, axis: MAxis) -> Self {
        PhaseDensity {
            grid,
            axis,
            values: vec![0.0; grid.cells() * axis.cells()],
            t: 0.0,
        }
    }

    /// All of column `i`'s mass `rho_i` in the cell containing `m`.
    pub fn concentrated(rho: &ScalarField, axis: MAxis, m: f64) -> Self {
        let mut p = Self::zeros(rho.grid, axis);
        let k = axis.cell_of(m);
        for (i, &r) in rho.values.iter().enumerate() {
            p.values[i * axis.cells() + k] = r / axis.dm();
        }
        p
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.axis.cells() + k]
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let kc = self.axis.cells();
        &self.values[i * kc..(i + 1) * kc]
    }

    /// `sum p dx dm`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx() * self.axis.dm()
    }

    /// Rows holding any nonzero value, or `None` for an empty density.
    pub fn occupied_rows(&self) -> Option<(usize, usize)> {
        let kc = self.axis.cells();
        let mut lo = usize::MAX;
        let mut hi = 0;
        for col in self.values.chunks_exact(kc) {
            if let Some(a) = col.iter().position(|&v| v != 0.0) {
                lo = lo.min(a);
                let b = col.iter().rposition(|&v| v != 0.0).unwrap();
                hi = hi.max(b);
            }
        }
        (lo != usize::MAX).then_some((lo, hi))
    }

    /// Fraction of the mass sitting in the two outermost `m` rows.
    pub fn boundary_fraction(&self) -> f64 {
        let kc = self.axis.cells();
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let edge: f64 = self
            .values
            .chunks_exact(kc)
            .map(|c| if kc == 1 { c[0] } else { c[0] + c[kc - 1] })
            .sum();
        edge / total
    }

    pub fn pad(&self, pad: usize) -> Self {
        let kc = self.axis.cells();
        let axis = self.axis.padded(pad);
        let mut out = PhaseDensity {
            t: self.t,
            ..Self::zeros(self.grid, axis)
        };
        for (i, col) in self.values.chunks_exact(kc).enumerate() {
            let start = i * axis.cells() + pad;
            out.values[start..start + kc].copy_from_slice(col);
        }
        out
    }
}

/// `rho_i = sum_k p_{i,k} dm`.
pub fn marginal_density(p: &PhaseDensity) -> ScalarField {
    let mut out = ScalarField::constant(p.grid, 0.0);
    marginal_into(p, &mut out.values);
    out
}

fn marginal_into(p: &PhaseDensity, out: &mut [f64]) {
    let dm = p.axis.dm();
    for (o, col) in out.iter_mut().zip(p.values.chunks_exact(p.axis.cells())) {
        *o = col.iter().sum::<f64>() * dm;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticConfig {
    /// Only `tau_tilde`, `delta`, `chi`, `D_S` enter the equation.
    pub params: ModelParams,
    pub grid: Grid1D,
    pub m_cells: usize,
    /// Initial `Y`; `None` picks `max(4 max|M|, 1)`.
    pub m_half_width: Option<f64>,
    /// Requested step, further capped by the positivity bound.
    pub dt: f64,
    pub t_end: f64,
    pub perturbation: Perturbation,
    pub snapshot_times: Vec<f64>,
    pub output_interval: f64,
    pub stop_when_stationary: bool,
}

impl AsymptoticConfig {
    pub fn new(params: ModelParams, grid: Grid1D, t_end: f64) -> Self {
        AsymptoticConfig {
            params,
            grid,
            m_cells: 200,
            m_half_width: None,
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
        if self.m_cells == 0 {
            return Err(Error::Config("m_cells must be >= 1".into()));
        }
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) || !(self.output_interval > 0.0) {
            return Err(Error::Config("dt, output_interval must be > 0 and t_end >= 0".into()));
        }
        Ok(())
    }
}

/// Step-size limits for one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLimits {
    /// `0.9 min(dx^2 Lambda_min / 2, tau_tilde dm / max|M - m|)`.
    pub cfl: f64,
    /// `0.9 / (2 / (Lambda_min dx^2) + max|M - m| / (tau_tilde dm))`, which
    /// keeps every coefficient of the update nonnegative.
    pub positive: f64,
}

/// Workspace for repeated steps. Only the rows that can hold mass after
/// the step (occupied rows widened by one) are touched.
pub struct AsymptoticSolver {
    params: ModelParams,
    m_center: Vec<f64>,
    m_face: Vec<f64>,
    inv_lambda: Vec<f64>,
    next: Vec<f64>,
    lambda_min: f64,
    max_drift: f64,
    rows: (usize, usize),
}

impl AsymptoticSolver {
    pub fn new(params: ModelParams) -> Self {
        AsymptoticSolver {
            params,
            m_center: Vec::new(),
            m_face: Vec::new(),
            inv_lambda: Vec::new(),
            next: Vec::new(),
            lambda_min: 1.0,
            max_drift: 0.0,
            rows: (0, 0),
        }
    }

    /// Face coefficients and drift bounds for `p` under the field `s`.
    fn prepare(&mut self, p: &PhaseDensity, s: &ScalarField) -> Result<StepLimits> {
        if let Some(index) = s.values.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveConcentration {
                index,
                value: s.values[index],
            });
        }
        let n = p.grid.cells();
        let kc = p.axis.cells();
        self.m_center.clear();
        self.m_face.clear();
        for i in 0..n {
            let j = if i + 1 == n { 0 } else { i + 1 };
            self.m_center.push(s.values[i].ln());
            self.m_face.push((0.5 * (s.values[i] + s.values[j])).ln());
        }
        let (lo, hi) = p.occupied_rows().unwrap_or((kc / 2, kc / 2));
        let (a, b) = (lo.saturating_sub(1), (hi + 1).min(kc - 1));
        self.rows = (a, b);
        self.inv_lambda.resize(n * kc, 1.0);
        self.next.resize(n * kc, 0.0);
        let (delta, chi) = (self.params.delta, self.params.chi);
        let mut lmin = f64::INFINITY;
        for i in 0..n {
            let mf = self.m_face[i];
            for k in a..=b {
                let l = crate::model::modulation(mf - p.axis.center(k), delta, chi);
                lmin = lmin.min(l);
                self.inv_lambda[i * kc + k] = 1.0 / l;
            }
        }
        let (ma, mb) = (p.axis.center(a), p.axis.center(b));
        let mut drift = 0.0f64;
        for &m in &self.m_center {
            drift = drift.max((m - ma).abs()).max((m - mb).abs());
        }
        self.lambda_min = lmin;
        self.max_drift = drift;
        let dx = p.grid.dx();
        let tt = self.params.tau_tilde();
        let dm = p.axis.dm();
        let adv = if drift > 0.0 { tt * dm / drift } else { f64::INFINITY };
        Ok(StepLimits {
            cfl: 0.9 * (0.5 * dx * dx * lmin).min(adv),
            positive: 0.9 / (2.0 / (lmin * dx * dx) + drift / (tt * dm)),
        })
    }

    /// Explicit update with the coefficients from [`prepare`](Self::prepare).
    fn update(&mut self, p: &mut PhaseDensity, dt: f64) -> Result<()> {
        let n = p.grid.cells();
        let kc = p.axis.cells();
        let (a, b) = self.rows;
        let dx = p.grid.dx();
        let r = dt / (dx * dx);
        let q = dt / (p.axis.dm() * self.params.tau_tilde());
        let v = &p.values;
        for i in 0..n {
            let ip = if i + 1 == n { 0 } else { i + 1 };
            let im = if i == 0 { n - 1 } else { i - 1 };
            let mc = self.m_center[i];
            let (row, up, down) = (i * kc, ip * kc, im * kc);
            // upward flux through the lower face of row k
            let flux = |k: usize| -> f64 {
                if k == 0 || k >= kc {
                    return 0.0;
                }
                let below = mc - p.axis.center(k - 1);
                let here = mc - p.axis.center(k);
                below.max(0.0) * v[row + k - 1] - (-here).max(0.0) * v[row + k]
            };
            let mut lower = flux(a);
            for k in a..=b {
                let upper = flux(k + 1);
                let c = v[row + k];
                let diff = (v[up + k] - c) * self.inv_lambda[row + k]
                    - (c - v[down + k]) * self.inv_lambda[down + k];
                self.next[row + k] = c + r * diff - q * (upper - lower);
                lower = upper;
            }
        }
        for i in 0..n {
            for k in a..=b {
                let val = self.next[i * kc + k];
                if val < -1e-12 {
                    return Err(Error::NegativeDensity {
                        index: i * kc + k,
                        value: val,
                    });
                }
            }
        }
        for i in 0..n {
            let row = i * kc;
            p.values[row + a..=row + b].copy_from_slice(&self.next[row + a..=row + b]);
        }
        p.t += dt;
        Ok(())
    }

    /// One step under the field `s`; errors when `dt` exceeds the CFL bound.
    pub fn step(&mut self, p: &mut PhaseDensity, s: &ScalarField, dt: f64) -> Result<()> {
        let lim = self.prepare(p, s)?;
        if !(dt > 0.0) || dt > lim.cfl {
            return Err(Error::CflViolation { dt, limit: lim.cfl });
        }
        self.update(p, dt)
    }

    pub fn limits(&mut self, p: &PhaseDensity, s: &ScalarField) -> Result<StepLimits> {
        self.prepare(p, s)
    }
}

/// One explicit step of `p` with the given field `s`.
pub fn step_asymptotic(
    p: &PhaseDensity,
    s: &ScalarField,
    cfg: &AsymptoticConfig,
    dt: f64,
) -> Result<PhaseDensity> {
    let mut solver = AsymptoticSolver::new(cfg.params);
    let mut out = p.clone();
    solver.step(&mut out, s, dt)?;
    Ok(out)
}

/// `max(4 max|ln S|, 1)`.
pub fn default_half_width(s: &ScalarField) -> f64 {
    let m = s.values.iter().map(|v| v.ln().abs()).fold(0.0, f64::max);
    (4.0 * m).max(1.0)
}

/// Phase density with its quasi-static field and marginal.
pub struct AsymptoticState {
    pub p: PhaseDensity,
    pub s: ScalarField,
    pub rho: ScalarField,
    solver: AsymptoticSolver,
    qs: QuasiStaticSolver,
}

impl AsymptoticState {
    pub fn new(p: PhaseDensity, params: ModelParams) -> Result<Self> {
        let rho = marginal_density(&p);
        let mut qs = QuasiStaticSolver::new(p.grid, &params)?;
        let s = qs.solve(&rho)?;
        Ok(AsymptoticState {
            p,
            s,
            rho,
            solver: AsymptoticSolver::new(params),
            qs,
        })
    }

    /// Widen the `m` axis whenever `4 max|M|` exceeds its half-width.
    fn widen(&mut self) {
        let need = 4.0 * self.s.values.iter().map(|v| v.ln().abs()).fold(0.0, f64::max);
        let y = self.p.axis.half_width();
        if need > y {
            let pad = ((need - y) / self.p.axis.dm()).ceil() as usize;
            self.p = self.p.pad(pad);
        }
    }

    /// Advance to exactly `t_target` with steps capped at `requested`.
    pub fn advance_to(&mut self, t_target: f64, requested: f64) -> Result<u64> {
        let mut steps = 0;
        while self.p.t < t_target * (1.0 - 1e-14) - 1e-300 {
            self.widen();
            let lim = self.solver.prepare(&self.p, &self.s)?;
            let mut dt = requested.min(lim.positive);
            let remaining = t_target - self.p.t;
            if dt >= remaining * (1.0 - 1e-12) {
                dt = remaining;
            }
            self.solver.update(&mut self.p, dt)?;
            if dt == remaining {
                self.p.t = t_target;
            }
            marginal_into(&self.p, &mut self.rho.values);
            self.qs.solve_into(&self.rho.values, &mut self.s.values);
            steps += 1;
        }
        let fraction = self.p.boundary_fraction();
        if fraction > 1e-8 {
            return Err(Error::DomainTooSmall { fraction });
        }
        Ok(steps)
    }
}

/// Run output plus the phase density at every snapshot.
#[derive(Debug, Clone)]
pub struct AsymptoticRun {
    pub record: RunRecord,
    pub phases: Vec<PhaseDensity>,
}

/// Integrate from `rho = 1 + perturbation`, every column starting in the
/// `m` cell containing 0.
pub fn run_asymptotic(cfg: &AsymptoticConfig) -> Result<AsymptoticRun> {
    cfg.validate()?;
    let rho0 = cfg.perturbation.density(&cfg.grid)?;
    let s0 = crate::field::solve_chemo_quasistatic(&rho0, &cfg.params)?;
    let y = cfg.m_half_width.unwrap_or_else(|| default_half_width(&s0));
    let axis = MAxis::new(cfg.m_cells, y)?;
    let p0 = PhaseDensity::concentrated(&rho0, axis, 0.0);
    let state = RefCell::new(AsymptoticState::new(p0, cfg.params)?);
    let phases = RefCell::new(Vec::new());
    let mut driver = ContinuumDriver {
        record: RunRecord::new(EngineKind::Asymptotic, cfg.grid),
        length: cfg.grid.length(),
        t_end: cfg.t_end,
        interval: cfg.output_interval,
        snapshot_times: cfg.snapshot_times.clone(),
        stop_when_stationary: cfg.stop_when_stationary,
    };
    driver.drive(
        |t| state.borrow_mut().advance_to(t, cfg.dt),
        || {
            let s = state.borrow();
            (s.rho.clone(), s.s.clone())
        },
        || phases.borrow_mut().push(state.borrow().p.clone()),
    )?;
    Ok(AsymptoticRun {
        record: driver.record,
        phases: phases.into_inner(),
    })
}
