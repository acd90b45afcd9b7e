//! Chemoattractant field on a uniform periodic grid.
//!
//! Values are cell averages collocated at cell centers `x_i = (i + 1/2) dx`.
//! The explicit update drives the Monte Carlo coupling; the quasi-static
//! elliptic solve `-D_S S'' + S = rho` serves the continuum solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Uniform periodic grid of `cells` intervals over `[0, length)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid1D {
    cells: usize,
    length: f64,
    dx: f64,
    inv_dx: f64,
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    cells: usize,
    length: f64,
}

impl TryFrom<GridSpec> for Grid1D {
    type Error = Error;
    fn try_from(g: GridSpec) -> Result<Self> {
        Grid1D::new(g.cells, g.length)
    }
}

impl From<Grid1D> for GridSpec {
    fn from(g: Grid1D) -> Self {
        GridSpec {
            cells: g.cells,
            length: g.length,
        }
    }
}

impl Grid1D {
    pub fn new(cells: usize, length: f64) -> Result<Self> {
        if cells < 4 {
            return Err(Error::Config(format!("grid needs at least 4 cells, got {cells}")));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::Config(format!("grid length must be positive, got {length}")));
        }
        let dx = length / cells as f64;
        Ok(Grid1D {
            cells,
            length,
            dx,
            inv_dx: 1.0 / dx,
        })
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.cells
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.length
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.dx
    }

    #[inline]
    pub fn inv_dx(&self) -> f64 {
        self.inv_dx
    }

    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }

    /// Index of the cell holding `x`, which must already lie in `[0, L)`.
    #[inline]
    pub fn cell_of(&self, x: f64) -> usize {
        // x >= 0, so the signed conversion is exact and cheaper than unsigned
        ((x * self.inv_dx) as i64 as usize).min(self.cells - 1)
    }

    /// Periodic wrap into `[0, L)`.
    #[inline]
    pub fn wrap(&self, x: f64) -> f64 {
        let mut r = x;
        if r >= self.length {
            r -= self.length;
            if r >= self.length {
                r = r.rem_euclid(self.length);
            }
        } else if r < 0.0 {
            r += self.length;
            if r < 0.0 {
                r = r.rem_euclid(self.length);
            }
            // -tiny + L rounds to L
            if r >= self.length {
                r = 0.0;
            }
        }
        r
    }

    #[inline]
    pub fn next(&self, i: usize) -> usize {
        if i + 1 == self.cells {
            0
        } else {
            i + 1
        }
    }

    #[inline]
    pub fn prev(&self, i: usize) -> usize {
        if i == 0 {
            self.cells - 1
        } else {
            i - 1
        }
    }
}

/// Cell-averaged values on a [`Grid1D`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub grid: Grid1D,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.cells(), "field length must match grid");
        ScalarField { grid, values }
    }

    pub fn constant(grid: Grid1D, value: f64) -> Self {
        ScalarField {
            grid,
            values: vec![value; grid.cells()],
        }
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.cells()).map(|i| f(grid.center(i))).collect();
        ScalarField { grid, values }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Integral over the domain, `sum_i v_i dx`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx()
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "{} cells vs {} cells",
                self.grid.cells(),
                other.grid.cells()
            )));
        }
        Ok(())
    }
}

/// Largest explicit time step for the chemoattractant update,
/// `sigma_S / (2 D_S / dx^2 + 1)`.
pub fn explicit_chemo_dt_limit(grid: &Grid1D, params: &ModelParams) -> f64 {
    params.sigma_s / (2.0 * params.d_s / (grid.dx() * grid.dx()) + 1.0)
}

/// One explicit Euler step of `sigma_S dS/dt = D_S S'' - S + rho`, with the
/// three-point periodic Laplacian evaluated on the old field.
pub fn step_chemo_explicit(
    s: &ScalarField,
    rho: &ScalarField,
    dt: f64,
    params: &ModelParams,
) -> Result<ScalarField> {
    s.check_same_grid(rho)?;
    let limit = explicit_chemo_dt_limit(&s.grid, params);
    if !(dt > 0.0) || dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    let mut out = vec![0.0; s.values.len()];
    step_chemo_into(&s.values, &rho.values, dt, s.grid.dx(), params, &mut out);
    Ok(ScalarField::new(s.grid, out))
}

/// Allocation-free kernel of [`step_chemo_explicit`]; no bounds checks on `dt`.
pub(crate) fn step_chemo_into(
    s: &[f64],
    rho: &[f64],
    dt: f64,
    dx: f64,
    params: &ModelParams,
    out: &mut [f64],
) {
    let n = s.len();
    let diff = params.d_s / (dx * dx);
    let rate = dt / params.sigma_s;
    for i in 0..n {
        let left = s[if i == 0 { n - 1 } else { i - 1 }];
        let right = s[if i + 1 == n { 0 } else { i + 1 }];
        let lap = diff * (right - 2.0 * s[i] + left);
        out[i] = s[i] + rate * (lap - s[i] + rho[i]);
    }
}

/// Direct solver for the periodic Helmholtz-type system
/// `-D_S (S_{i+1} - 2 S_i + S_{i-1}) / dx^2 + S_i = rho_i`.
///
/// The constant-coefficient cyclic tridiagonal matrix is factorized once; each
/// solve is O(I).
#[derive(Debug, Clone)]
pub struct QuasiStaticSolver {
    grid: Grid1D,
    off: f64,
    // modified diagonal after the Sherman-Morrison split, then Thomas factors
    cprime: Vec<f64>,
    denom: Vec<f64>,
    gamma: f64,
    z: Vec<f64>,
    z_factor: f64,
    work: Vec<f64>,
}

impl QuasiStaticSolver {
    pub fn new(grid: Grid1D, params: &ModelParams) -> Result<Self> {
        let n = grid.cells();
        let off = -params.d_s / (grid.dx() * grid.dx());
        let diag = 1.0 + 2.0 * params.d_s / (grid.dx() * grid.dx());
        // A = T + u v^T with u = (gamma, 0, .., 0, off), v = (1, 0, .., 0, off/gamma)
        let gamma = -diag;
        let mut main = vec![diag; n];
        main[0] -= gamma;
        main[n - 1] -= off * off / gamma;

        let mut cprime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = main[0];
        if denom[0] == 0.0 {
            return Err(Error::SingularSystem);
        }
        cprime[0] = off / denom[0];
        for i in 1..n {
            denom[i] = main[i] - off * cprime[i - 1];
            if denom[i] == 0.0 || !denom[i].is_finite() {
                return Err(Error::SingularSystem);
            }
            cprime[i] = off / denom[i];
        }

        let mut solver = QuasiStaticSolver {
            grid,
            off,
            cprime,
            denom,
            gamma,
            z: vec![0.0; n],
            z_factor: 0.0,
            work: vec![0.0; n],
        };
        let mut u = vec![0.0; n];
        u[0] = gamma;
        u[n - 1] = off;
        let mut z = vec![0.0; n];
        solver.thomas(&u, &mut z);
        let fact = 1.0 + z[0] + off / gamma * z[n - 1];
        if fact == 0.0 || !fact.is_finite() {
            return Err(Error::SingularSystem);
        }
        solver.z_factor = fact;
        solver.z = z;
        Ok(solver)
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    fn thomas(&self, rhs: &[f64], x: &mut [f64]) {
        let n = rhs.len();
        x[0] = rhs[0] / self.denom[0];
        for i in 1..n {
            x[i] = (rhs[i] - self.off * x[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.cprime[i] * x[i + 1];
        }
    }

    /// Solve in place into `out`.
    pub fn solve_into(&mut self, rho: &[f64], out: &mut [f64]) {
        let n = rho.len();
        let mut y = std::mem::take(&mut self.work);
        self.thomas(rho, &mut y);
        let coeff = (y[0] + self.off / self.gamma * y[n - 1]) / self.z_factor;
        for i in 0..n {
            out[i] = y[i] - coeff * self.z[i];
        }
        self.work = y;
    }

    pub fn solve(&mut self, rho: &ScalarField) -> Result<ScalarField> {
        if rho.grid != self.grid {
            return Err(Error::GridMismatch("quasi-static solver grid".into()));
        }
        let mut out = vec![0.0; rho.values.len()];
        self.solve_into(&rho.values, &mut out);
        Ok(ScalarField::new(rho.grid, out))
    }
}

/// Quasi-static chemoattractant `S0` for density `rho`.
pub fn solve_chemo_quasistatic(rho: &ScalarField, params: &ModelParams) -> Result<ScalarField> {
    if !rho.is_finite() {
        return Err(Error::Config("non-finite density in quasi-static solve".into()));
    }
    QuasiStaticSolver::new(rho.grid, params)?.solve(rho)
}

/// Centered difference of `ln S` at cell centers, periodic.
pub fn gradient_log(s: &ScalarField) -> Result<ScalarField> {
    let m = crate::model::log_sensing(s)?;
    let g = s.grid;
    let inv = 1.0 / (2.0 * g.dx());
    let values = (0..g.cells())
        .map(|i| (m.values[g.next(i)] - m.values[g.prev(i)]) * inv)
        .collect();
    Ok(ScalarField::new(g, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn params() -> ModelParams {
        ModelParams::new(10.0, 0.1, 0.1, 0.5)
    }

    /// Dense Gaussian elimination on the full periodic matrix; independent of
    /// the cyclic Thomas path.
    fn dense_solve(rho: &[f64], d: f64, dx: f64) -> Vec<f64> {
        let n = rho.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            a[i][i] = 1.0 + 2.0 * d / (dx * dx);
            a[i][(i + 1) % n] -= d / (dx * dx);
            a[i][(i + n - 1) % n] -= d / (dx * dx);
            a[i][n] = rho[i];
        }
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| a[x][c].abs().partial_cmp(&a[y][c].abs()).unwrap())
                .unwrap();
            a.swap(c, p);
            for r in 0..n {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=n {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn grid_basics() {
        let g = Grid1D::new(50, 10.0).unwrap();
        assert!((g.dx() * 50.0 - 10.0).abs() < 1e-12);
        assert_eq!(g.center(0), 0.1);
        assert_eq!(g.cell_of(9.99999), 49);
        assert_eq!(g.wrap(10.0), 0.0);
        assert_eq!(g.wrap(-1e-18), 0.0);
        assert!((g.wrap(-0.5) - 9.5).abs() < 1e-15);
        assert!(Grid1D::new(3, 1.0).is_err());
    }

    #[test]
    fn explicit_uniform_steady_state() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let s = ScalarField::constant(g, 1.0);
        let rho = ScalarField::constant(g, 1.0);
        let out = step_chemo_explicit(&s, &rho, 1e-3, &params()).unwrap();
        assert!(out.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn explicit_from_zero() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let s = ScalarField::constant(g, 0.0);
        let rho = ScalarField::constant(g, 1.0);
        let out = step_chemo_explicit(&s, &rho, 1e-3, &params()).unwrap();
        assert!(out.values.iter().all(|&v| (v - 1e-3).abs() < 1e-18));
    }

    #[test]
    fn explicit_cosine_mode_amplification() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let dt = 1e-3;
        let k = 2.0 * PI / 10.0;
        let s = ScalarField::from_fn(g, |x| 1.0 + 0.01 * (k * x).cos());
        let rho = ScalarField::constant(g, 1.0);
        let out = step_chemo_explicit(&s, &rho, dt, &params()).unwrap();
        // symbol of the stencil on exp(i theta j): 2 cos(theta) - 2
        let theta = k * g.dx();
        let symbol = (2.0 * theta.cos() - 2.0) / (g.dx() * g.dx());
        let amp = 1.0 + dt * (symbol - 1.0);
        for (i, v) in out.values.iter().enumerate() {
            let want = 1.0 + 0.01 * amp * (k * g.center(i)).cos();
            assert!((v - want).abs() < 1e-14, "{v} vs {want}");
        }
        let g_closed = 1.0 - dt * (1.0 + 4.0 * (PI / 50.0).sin().powi(2) / (g.dx() * g.dx()));
        assert!((amp - g_closed).abs() < 1e-14);
    }

    #[test]
    fn explicit_cfl_violation() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let s = ScalarField::constant(g, 1.0);
        let limit = explicit_chemo_dt_limit(&g, &params());
        assert!((limit - 1.0 / 51.0).abs() < 1e-15);
        let err = step_chemo_explicit(&s, &s, 0.05, &params()).unwrap_err();
        assert!(matches!(err, Error::CflViolation { .. }));
    }

    #[test]
    fn explicit_mean_dynamics() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ScalarField::new(g, (0..50).map(|_| rng.gen_range(0.5..2.0)).collect());
        let rho = ScalarField::new(g, (0..50).map(|_| rng.gen_range(0.0..3.0)).collect());
        let dt = 0.01;
        let out = step_chemo_explicit(&s, &rho, dt, &params()).unwrap();
        let want = s.mean() + dt * (rho.mean() - s.mean());
        assert!((out.mean() - want).abs() < 1e-12);
    }

    #[test]
    fn quasistatic_constant() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let s = solve_chemo_quasistatic(&ScalarField::constant(g, 1.0), &params()).unwrap();
        for v in &s.values {
            assert!((v - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn quasistatic_fourier_modes() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let k = 2.0 * PI / 10.0;
        let ktilde2 = (2.0 - 2.0 * (k * g.dx()).cos()) / (g.dx() * g.dx());
        let att = 1.0 / (1.0 + ktilde2);
        for phase in [0.0, PI / 2.0] {
            let rho = ScalarField::from_fn(g, |x| 1.0 + 0.01 * (k * x - phase).cos());
            let s = solve_chemo_quasistatic(&rho, &params()).unwrap();
            for (i, v) in s.values.iter().enumerate() {
                let want = 1.0 + 0.01 * att * (k * g.center(i) - phase).cos();
                assert!((v - want).abs() < 1e-14, "{v} vs {want}");
            }
        }
    }

    #[test]
    fn quasistatic_matches_dense_and_residual() {
        let g = Grid1D::new(37, 7.0).unwrap();
        let p = params().with_diffusion(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rho = ScalarField::new(g, (0..37).map(|_| rng.gen_range(0.0..5.0)).collect());
        let s = solve_chemo_quasistatic(&rho, &p).unwrap();
        let dense = dense_solve(&rho.values, p.d_s, g.dx());
        for (a, b) in s.values.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
        let dx2 = g.dx() * g.dx();
        let rmax = rho.max();
        for i in 0..37 {
            let lap = (s.values[g.next(i)] - 2.0 * s.values[i] + s.values[g.prev(i)]) / dx2;
            let res = -p.d_s * lap + s.values[i] - rho.values[i];
            assert!(res.abs() <= 1e-10 * rmax);
        }
    }

    #[test]
    fn quasistatic_equals_explicit_fixed_point() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = ScalarField::new(g, (0..50).map(|_| rng.gen_range(0.5..1.5)).collect());
        let direct = solve_chemo_quasistatic(&rho, &p).unwrap();
        let mut s = ScalarField::constant(g, 1.0);
        let dt = 0.9 * explicit_chemo_dt_limit(&g, &p);
        for _ in 0..20_000 {
            s = step_chemo_explicit(&s, &rho, dt, &p).unwrap();
        }
        assert!(s.max_abs_diff(&direct) <= 1e-8);
    }

    proptest! {
        #[test]
        fn quasistatic_preserves_mean(vals in proptest::collection::vec(0.0f64..4.0, 16..80)) {
            let n = vals.len();
            let g = Grid1D::new(n, 10.0).unwrap();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let rho = ScalarField::new(g, vals.iter().map(|v| v / mean).collect());
            let s = solve_chemo_quasistatic(&rho, &params()).unwrap();
            prop_assert!((s.mean() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_log_examples() {
        let g = Grid1D::new(50, 10.0).unwrap();
        let z = gradient_log(&ScalarField::constant(g, 3.0)).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));

        // exp(x) in the interior (periodic seam excluded)
        let g2 = Grid1D::new(400, 1.0).unwrap();
        let s = ScalarField::from_fn(g2, |x| x.exp());
        let d = gradient_log(&s).unwrap();
        for i in 1..399 {
            assert!((d.values[i] - 1.0).abs() < 1e-12);
        }

        let k = 2.0 * PI / 10.0;
        let mut errs = Vec::new();
        for cells in [50usize, 100, 200] {
            let g = Grid1D::new(cells, 10.0).unwrap();
            let s = ScalarField::from_fn(g, |x| 1.0 + 0.1 * (k * x).cos());
            let d = gradient_log(&s).unwrap();
            let err = (0..cells)
                .map(|i| {
                    let x = g.center(i);
                    let exact = -0.1 * k * (k * x).sin() / (1.0 + 0.1 * (k * x).cos());
                    (d.values[i] - exact).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        // second order: error ratio ~4 per refinement
        assert!(errs[0] / errs[1] > 3.8 && errs[1] / errs[2] > 3.8, "{errs:?}");
        assert!(errs[0] < 1e-3);
    }

    #[test]
    fn gradient_log_rejects_non_positive() {
        let g = Grid1D::new(4, 4.0).unwrap();
        let s = ScalarField::new(g, vec![1.0, -1.0, 1.0, 1.0]);
        assert!(matches!(
            gradient_log(&s),
            Err(Error::NonPositiveConcentration { .. })
        ));
    }
}
