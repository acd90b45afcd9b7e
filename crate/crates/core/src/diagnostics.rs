//! Observables: deviation time averages, aggregate center, internal-state
//! histograms, peak positions, local mean run lengths, peak density and
//! plateau detection.

use serde::{Deserialize, Serialize};

use crate::asymptotic::PhaseDensity;
use crate::error::{Error, Result};
use crate::field::{Grid1D, ScalarField};
use crate::mc::ParticleEnsemble;
use crate::model::ModelParams;

/// `max_x |rho - 1|` sampled at increasing scaled times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviationSeries {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl DeviationSeries {
    /// Panics if the lengths differ, times are not strictly increasing, or a
    /// value is negative.
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(times.len(), values.len(), "times and values differ in length");
        assert!(
            times.windows(2).all(|w| w[1] > w[0]),
            "times must be strictly increasing"
        );
        assert!(values.iter().all(|&v| v >= 0.0), "deviations must be >= 0");
        DeviationSeries { times, values }
    }

    pub fn push(&mut self, t: f64, value: f64) {
        assert!(self.times.last().map_or(true, |&last| t > last));
        assert!(value >= 0.0);
        self.times.push(t);
        self.values.push(value);
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn value_at(&self, t: f64) -> f64 {
        let j = self.times.partition_point(|&s| s < t);
        if j == 0 {
            return self.values[0];
        }
        if j == self.times.len() {
            return self.values[j - 1];
        }
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let w = (t - t0) / (t1 - t0);
        self.values[j - 1] * (1.0 - w) + self.values[j] * w
    }
}

/// `(2/T) * integral over [T/2, T]` of the deviation, by the trapezoidal rule
/// on the samples; the end points are linearly interpolated when they fall
/// between samples.
pub fn time_avg_deviation(series: &DeviationSeries, t_lambda: f64) -> Result<f64> {
    let from = 0.5 * t_lambda;
    let slack = 1e-9 * t_lambda.abs().max(1.0);
    if series.is_empty()
        || !(t_lambda > 0.0)
        || series.times[0] > from + slack
        || *series.times.last().unwrap() < t_lambda - slack
    {
        return Err(Error::InsufficientCoverage {
            from,
            to: t_lambda,
        });
    }
    let mut pts: Vec<(f64, f64)> = vec![(from, series.value_at(from))];
    for (&t, &v) in series.times.iter().zip(&series.values) {
        if t > from && t < t_lambda {
            pts.push((t, v));
        }
    }
    pts.push((t_lambda, series.value_at(t_lambda)));
    let integral: f64 = pts
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    Ok(integral / (t_lambda - from))
}

/// Center of the cell holding the largest `S`; the smallest index wins ties.
pub fn find_center(s: &ScalarField) -> f64 {
    let mut best = 0;
    for (i, &v) in s.values.iter().enumerate() {
        if v > s.values[best] {
            best = i;
        }
    }
    s.grid.center(best)
}

/// `max_i rho_i - 1`.
pub fn peak_density(rho: &ScalarField) -> f64 {
    rho.max() - 1.0
}

/// Uniform bins over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid bins [{lo}, {hi}] x {bins}")));
        }
        Ok(BinSpec { lo, hi, bins })
    }

    /// 101 bins over `[-1.5 tau G, 1.5 tau G]`.
    pub fn scaled(tau: f64, g: f64) -> Result<Self> {
        let w = 1.5 * tau * g.abs();
        Self::new(-w, w, 101)
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn center(&self, b: usize) -> f64 {
        self.lo + (b as f64 + 0.5) * self.width()
    }

    /// Bin index, or `Err(below)` when out of range.
    pub fn locate(&self, y: f64) -> std::result::Result<usize, bool> {
        if y < self.lo {
            return Err(true);
        }
        if y >= self.hi {
            return if y == self.hi { Ok(self.bins - 1) } else { Err(false) };
        }
        Ok((((y - self.lo) / self.width()) as usize).min(self.bins - 1))
    }
}

/// Binned density over `y`. Out-of-range samples are clamped into the edge
/// bins and also counted in `underflow` / `overflow`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub spec: BinSpec,
    /// Density values per bin (mass divided by bin width).
    pub density: Vec<f64>,
    pub samples: u64,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn empty(spec: BinSpec) -> Self {
        Histogram {
            spec,
            density: vec![0.0; spec.bins],
            samples: 0,
            underflow: 0,
            overflow: 0,
        }
    }

    /// Add a sample carrying `weight` units of mass.
    pub fn add(&mut self, y: f64, weight: f64) {
        let b = match self.spec.locate(y) {
            Ok(b) => b,
            Err(true) => {
                self.underflow += 1;
                0
            }
            Err(false) => {
                self.overflow += 1;
                self.spec.bins - 1
            }
        };
        self.density[b] += weight / self.spec.width();
        self.samples += 1;
    }

    /// Sum of density times bin width.
    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.spec.width()
    }

    /// Unit-mass histogram of the given samples.
    pub fn from_samples(spec: BinSpec, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySample("histogram"));
        }
        let mut h = Histogram::empty(spec);
        let w = 1.0 / samples.len() as f64;
        for &y in samples {
            h.add(y, w);
        }
        Ok(h)
    }

    /// Index of the largest bin; the lowest index wins ties.
    pub fn peak_bin(&self) -> usize {
        let mut best = 0;
        for (b, &v) in self.density.iter().enumerate() {
            if v > self.density[best] {
                best = b;
            }
        }
        best
    }

    /// Mode location: the peak bin center refined by a parabola through the
    /// peak and its two neighbours.
    pub fn peak_position(&self) -> f64 {
        let b = self.peak_bin();
        let c = self.spec.center(b);
        if b == 0 || b + 1 == self.spec.bins {
            return c;
        }
        let (l, m, r) = (self.density[b - 1], self.density[b], self.density[b + 1]);
        let denom = l - 2.0 * m + r;
        if denom >= 0.0 || l == m || r == m {
            return c;
        }
        let shift = (0.5 * (l - r) / denom).clamp(-0.5, 0.5);
        c + shift * self.spec.width()
    }

    /// Mass-weighted mean of `1 / (lambda0 Lambda(y))` over bin centers.
    pub fn mean_run_length(&self, params: &ModelParams) -> Result<f64> {
        let mass: f64 = self.density.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::EmptySample("run length"));
        }
        let weighted: f64 = self
            .density
            .iter()
            .enumerate()
            .map(|(b, &f)| f / (params.lambda0 * params.modulation(self.spec.center(b))))
            .sum();
        Ok(weighted / mass)
    }
}

/// Local internal-state distributions at distance `r` from the aggregate
/// center: `plus` collects cells moving toward the center (right-movers at
/// `x0 - r`, left-movers at `x0 + r`), `minus` the mirrored combination.
///
/// Each sample carries weight `1 / (2 N_bar)`, so the two masses add up to
/// the mean density `rho_r` of the two sampling cells.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalHistogram {
    pub x0: f64,
    pub r: f64,
    pub plus: Histogram,
    pub minus: Histogram,
    pub local_density: f64,
}

/// Bin the internal states of particles in the cells containing `x0 - r`
/// and `x0 + r`.
pub fn internal_histogram(
    ens: &ParticleEnsemble,
    grid: &Grid1D,
    n_bar: usize,
    x0: f64,
    r: f64,
    spec: BinSpec,
) -> Result<InternalHistogram> {
    if !(0.0..=0.5 * grid.length()).contains(&r) {
        return Err(Error::Config(format!("r = {r} outside [0, L/2]")));
    }
    let left = grid.cell_of(grid.wrap(x0 - r));
    let right = grid.cell_of(grid.wrap(x0 + r));
    let mut plus = Histogram::empty(spec);
    let mut minus = Histogram::empty(spec);
    let w = 0.5 / n_bar as f64;
    let (mut n_left, mut n_right) = (0u64, 0u64);
    for ((&x, &v), &y) in ens.positions.iter().zip(&ens.velocities).zip(&ens.internal) {
        let c = grid.cell_of(x);
        // with r = 0 both sampling cells coincide and each particle counts twice
        if c == left {
            n_left += 1;
            if v > 0 { plus.add(y, w) } else { minus.add(y, w) }
        }
        if c == right {
            n_right += 1;
            if v < 0 { plus.add(y, w) } else { minus.add(y, w) }
        }
    }
    if n_left == 0 || n_right == 0 {
        return Err(Error::EmptySample("sampling cell"));
    }
    Ok(InternalHistogram {
        x0,
        r,
        plus,
        minus,
        local_density: 0.5 * (n_left + n_right) as f64 / n_bar as f64,
    })
}

/// Mode of `f_r+` and of `f_r-`.
pub fn peak_position(h: &InternalHistogram) -> (f64, f64) {
    (h.plus.peak_position(), h.minus.peak_position())
}

/// Local mean run lengths `(xi_r+, xi_r-)`, each normalized by its own
/// histogram mass.
pub fn mean_run_length(h: &InternalHistogram, params: &ModelParams) -> Result<(f64, f64)> {
    if !(h.local_density > 0.0) {
        return Err(Error::EmptySample("local density"));
    }
    Ok((
        h.plus.mean_run_length(params)?,
        h.minus.mean_run_length(params)?,
    ))
}

/// Bounds `[1/(lambda0 (1+chi)), 1/(lambda0 (1-chi))]` on any mean run length.
pub fn run_length_bounds(params: &ModelParams) -> (f64, f64) {
    (
        1.0 / (params.lambda0 * (1.0 + params.chi)),
        1.0 / (params.lambda0 * (1.0 - params.chi)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLengthProfile {
    pub r: Vec<f64>,
    pub xi_plus: Vec<f64>,
    pub xi_minus: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl RunLengthProfile {
    pub fn within_bounds(&self) -> bool {
        let tol = 1e-12 * self.upper;
        self.xi_plus
            .iter()
            .chain(&self.xi_minus)
            .all(|&x| x >= self.lower - tol && x <= self.upper + tol)
    }
}

/// Mean run lengths at each `r`; distances whose sampling cells are empty
/// are skipped.
pub fn run_length_profile(
    ens: &ParticleEnsemble,
    grid: &Grid1D,
    n_bar: usize,
    x0: f64,
    radii: &[f64],
    spec: BinSpec,
    params: &ModelParams,
) -> Result<RunLengthProfile> {
    let (lower, upper) = run_length_bounds(params);
    let mut out = RunLengthProfile {
        r: Vec::new(),
        xi_plus: Vec::new(),
        xi_minus: Vec::new(),
        lower,
        upper,
    };
    for &r in radii {
        let h = match internal_histogram(ens, grid, n_bar, x0, r, spec) {
            Ok(h) => h,
            Err(Error::EmptySample(_)) => continue,
            Err(e) => return Err(e),
        };
        if let Ok((p, m)) = mean_run_length(&h, params) {
            out.r.push(r);
            out.xi_plus.push(p);
            out.xi_minus.push(m);
        }
    }
    Ok(out)
}

/// Internal-state histograms from a phase density, with `y = ln S - m`.
///
/// The continuum density carries no velocity, so `plus` and `minus` are
/// equal halves; masses add up to the mean density of the two cells.
pub fn phase_histogram(
    p: &PhaseDensity,
    s: &ScalarField,
    x0: f64,
    r: f64,
    spec: BinSpec,
) -> Result<InternalHistogram> {
    let grid = p.grid;
    if !(0.0..=0.5 * grid.length()).contains(&r) {
        return Err(Error::Config(format!("r = {r} outside [0, L/2]")));
    }
    let cells = [
        grid.cell_of(grid.wrap(x0 - r)),
        grid.cell_of(grid.wrap(x0 + r)),
    ];
    let mut plus = Histogram::empty(spec);
    let mut minus = Histogram::empty(spec);
    let dm = p.axis.dm();
    let mut local = 0.0;
    for &i in &cells {
        let m_here = s.values[i].ln();
        for (k, &v) in p.column(i).iter().enumerate() {
            if v > 0.0 {
                let y = m_here - p.axis.center(k);
                plus.add(y, 0.25 * v * dm);
                minus.add(y, 0.25 * v * dm);
                local += 0.5 * v * dm;
            }
        }
    }
    if !(local > 0.0) {
        return Err(Error::EmptySample("sampling cell"));
    }
    Ok(InternalHistogram {
        x0,
        r,
        plus,
        minus,
        local_density: local,
    })
}

/// [`run_length_profile`] for a phase density.
pub fn phase_run_length_profile(
    p: &PhaseDensity,
    s: &ScalarField,
    x0: f64,
    radii: &[f64],
    spec: BinSpec,
    params: &ModelParams,
) -> Result<RunLengthProfile> {
    let (lower, upper) = run_length_bounds(params);
    let mut out = RunLengthProfile {
        r: Vec::new(),
        xi_plus: Vec::new(),
        xi_minus: Vec::new(),
        lower,
        upper,
    };
    for &r in radii {
        let h = match phase_histogram(p, s, x0, r, spec) {
            Ok(h) => h,
            Err(Error::EmptySample(_)) => continue,
            Err(e) => return Err(e),
        };
        let (a, b) = mean_run_length(&h, params)?;
        out.r.push(r);
        out.xi_plus.push(a);
        out.xi_minus.push(b);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plateau {
    pub has_plateau: bool,
    /// Number of contiguous cells around the maximum within tolerance.
    pub extent: usize,
    /// First cell of the arc (periodic).
    pub start: usize,
    /// Every cell is within tolerance.
    pub uniform: bool,
}

/// Largest periodic arc around the maximum with `|rho - rho_max| < tol rho_max`.
pub fn detect_plateau(rho: &ScalarField, tol: f64) -> Plateau {
    let n = rho.values.len();
    let vmax = rho.max();
    let mut top = 0;
    for (i, &v) in rho.values.iter().enumerate() {
        if v > rho.values[top] {
            top = i;
        }
    }
    let inside = |i: usize| (rho.values[i] - vmax).abs() < tol * vmax.abs() || rho.values[i] == vmax;
    let mut right = 0;
    while right + 1 < n && inside((top + right + 1) % n) {
        right += 1;
    }
    if right + 1 == n {
        return Plateau {
            has_plateau: true,
            extent: n,
            start: 0,
            uniform: true,
        };
    }
    let mut left = 0;
    while inside((top + n - left - 1) % n) {
        left += 1;
    }
    let extent = left + right + 1;
    Plateau {
        has_plateau: extent >= 3,
        extent,
        start: (top + n - left) % n,
        uniform: false,
    }
}
