//! Physical model: nondimensional parameters, tumbling-rate modulation and
//! logarithmic sensing.
//!
//! All quantities are nondimensional unless a type says otherwise. The kinetic
//! time scale (`sigma = sigma_s = 1`) is used by the Monte Carlo engine; the
//! continuum solvers work in diffusion time and never read `sigma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::field::ScalarField;

/// Nondimensional model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Mean tumbling frequency.
    pub lambda0: f64,
    /// Adaptation time.
    pub tau: f64,
    /// Stiffness of the chemotactic response.
    pub delta: f64,
    /// Modulation amplitude, strictly inside (0, 1).
    pub chi: f64,
    #[serde(default = "one")]
    pub d_s: f64,
    /// Length of the periodic domain.
    #[serde(default = "ten")]
    pub length: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub sigma_s: f64,
}

fn one() -> f64 {
    1.0
}

fn ten() -> f64 {
    10.0
}

impl ModelParams {
    /// Parameters with `D_S = 1`, `L = 10` and unit time-scale factors.
    pub fn new(lambda0: f64, tau: f64, delta: f64, chi: f64) -> Self {
        ModelParams {
            lambda0,
            tau,
            delta,
            chi,
            d_s: 1.0,
            length: 10.0,
            sigma: 1.0,
            sigma_s: 1.0,
        }
    }

    /// Parameters from the relative adaptation time `alpha = lambda0 * tau`.
    pub fn from_alpha(lambda0: f64, alpha: f64, delta: f64, chi: f64) -> Self {
        Self::new(lambda0, alpha / lambda0, delta, chi)
    }

    pub fn with_length(mut self, length: f64) -> Self {
        self.length = length;
        self
    }

    pub fn with_diffusion(mut self, d_s: f64) -> Self {
        self.d_s = d_s;
        self
    }

    /// Mean run time, `1 / lambda0`.
    pub fn epsilon(&self) -> f64 {
        1.0 / self.lambda0
    }

    /// Relative adaptation time `lambda0 * tau`.
    pub fn alpha(&self) -> f64 {
        self.lambda0 * self.tau
    }

    /// Adaptation time in the large-adaptation scaling, `epsilon * tau`.
    pub fn tau_tilde(&self) -> f64 {
        self.tau / self.lambda0
    }

    /// Response stiffness `chi / delta`, equal to `-Lambda_delta'(0)`.
    pub fn stiffness(&self) -> f64 {
        self.chi / self.delta
    }

    /// Scaled time `t / (lambda0 L^2)` for a raw kinetic time `t`.
    pub fn t_lambda(&self, t: f64) -> f64 {
        t / (self.lambda0 * self.length * self.length)
    }

    /// Raw kinetic time for a scaled time `t_lambda`.
    pub fn t_from_lambda(&self, t_lambda: f64) -> f64 {
        t_lambda * self.lambda0 * self.length * self.length
    }

    /// Tumbling-rate modulation `Lambda_delta(y)`.
    #[inline]
    pub fn modulation(&self, y: f64) -> f64 {
        modulation(y, self.delta, self.chi)
    }

    /// Every violated invariant, or `Ok` when the parameters are usable.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let mut positive = |field: &'static str, value: f64| {
            if !(value > 0.0 && value.is_finite()) {
                out.push(Violation {
                    field,
                    value,
                    message: format!("{field} must be positive"),
                });
            }
        };
        positive("lambda0", self.lambda0);
        positive("tau", self.tau);
        positive("delta", self.delta);
        positive("d_s", self.d_s);
        positive("length", self.length);
        positive("sigma", self.sigma);
        positive("sigma_s", self.sigma_s);
        if !(self.chi > 0.0 && self.chi < 1.0) {
            out.push(Violation {
                field: "chi",
                value: self.chi,
                message: "chi must lie in (0,1)".into(),
            });
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Like [`validate`](Self::validate) but also accepts `chi = 0`, which
    /// switches chemotaxis off (null-control runs).
    pub fn validate_allow_null(&self) -> std::result::Result<(), Vec<Violation>> {
        if self.chi == 0.0 {
            let probe = ModelParams { chi: 0.5, ..*self };
            probe.validate()
        } else {
            self.validate()
        }
    }

    pub fn checked(self) -> Result<Self> {
        self.validate_allow_null().map_err(Error::InvalidParams)?;
        Ok(self)
    }
}

/// `Lambda_delta(y) = 1 - chi (y/delta) / sqrt(1 + (y/delta)^2)`.
///
/// Bounded in `[1 - chi, 1 + chi]` and decreasing in `y`.
#[inline]
pub fn modulation(y: f64, delta: f64, chi: f64) -> f64 {
    let u = y / delta;
    if u.abs() > 1e150 {
        return 1.0 - chi * u.signum();
    }
    1.0 - chi * u / (1.0 + u * u).sqrt()
}

/// Logarithmic sensing `M = ln S`, cellwise.
pub fn log_sensing(s: &ScalarField) -> Result<ScalarField> {
    let mut values = Vec::with_capacity(s.values.len());
    for (index, &value) in s.values.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveConcentration { index, value });
        }
        values.push(value.ln());
    }
    Ok(ScalarField::new(s.grid, values))
}

/// Dimensional inputs, in any consistent unit system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionalParams {
    /// Cell speed.
    pub v0: f64,
    pub lambda0_dim: f64,
    pub tau_dim: f64,
    /// Chemoattractant diffusivity.
    pub d_s_dim: f64,
    /// Degradation rate.
    pub a: f64,
    /// Production rate.
    pub b: f64,
    /// Initial number density.
    pub rho0: f64,
    pub l_dim: f64,
    /// Characteristic time.
    pub t0: f64,
}

impl DimensionalParams {
    /// Diffusion length of the chemoattractant, `sqrt(D_S / a)`.
    pub fn diffusion_length(&self) -> f64 {
        (self.d_s_dim / self.a).sqrt()
    }

    fn check(&self) -> Result<()> {
        let fields = [
            ("v0", self.v0),
            ("lambda0_dim", self.lambda0_dim),
            ("tau_dim", self.tau_dim),
            ("d_s_dim", self.d_s_dim),
            ("a", self.a),
            ("b", self.b),
            ("rho0", self.rho0),
            ("l_dim", self.l_dim),
            ("t0", self.t0),
        ];
        for (field, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidDimensional { field, value });
            }
        }
        Ok(())
    }
}

/// Reference scales kept aside so that a nondimensional parameter set can be
/// mapped back to physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScales {
    pub v0: f64,
    pub a: f64,
    pub b: f64,
    pub rho0: f64,
}

impl From<&DimensionalParams> for ReferenceScales {
    fn from(d: &DimensionalParams) -> Self {
        ReferenceScales {
            v0: d.v0,
            a: d.a,
            b: d.b,
            rho0: d.rho0,
        }
    }
}

/// Nondimensionalize with `L0 = sqrt(D_S / a)`, so `D_S` becomes 1.
///
/// `delta` and `chi` are dimensionless already and passed through.
pub fn nondimensionalize(d: &DimensionalParams, delta: f64, chi: f64) -> Result<ModelParams> {
    d.check()?;
    let l0 = d.diffusion_length();
    Ok(ModelParams {
        lambda0: d.lambda0_dim / (d.v0 / l0),
        tau: d.tau_dim / (l0 / d.v0),
        delta,
        chi,
        d_s: d.d_s_dim / (d.a * l0 * l0),
        length: d.l_dim / l0,
        sigma: l0 / (d.t0 * d.v0),
        sigma_s: 1.0 / (d.a * d.t0),
    })
}

/// Inverse of [`nondimensionalize`].
pub fn redimensionalize(p: &ModelParams, scales: &ReferenceScales) -> DimensionalParams {
    let t0 = 1.0 / (scales.a * p.sigma_s);
    let l0 = p.sigma * t0 * scales.v0;
    DimensionalParams {
        v0: scales.v0,
        lambda0_dim: p.lambda0 * scales.v0 / l0,
        tau_dim: p.tau * l0 / scales.v0,
        d_s_dim: p.d_s * scales.a * l0 * l0,
        a: scales.a,
        b: scales.b,
        rho0: scales.rho0,
        l_dim: p.length * l0,
        t0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid1D;
    use proptest::prelude::*;

    #[test]
    fn modulation_at_zero_is_one() {
        assert_eq!(modulation(0.0, 0.1, 0.5), 1.0);
        assert_eq!(modulation(0.0, 0.01, 0.9), 1.0);
    }

    #[test]
    fn modulation_asymptotes() {
        assert!((modulation(1e9, 0.1, 0.5) - 0.5).abs() < 1e-12);
        assert!((modulation(-1e9, 0.1, 0.5) - 1.5).abs() < 1e-12);
        assert_eq!(modulation(f64::MAX, 0.1, 0.5), 0.5);
        assert_eq!(modulation(f64::MIN, 0.1, 0.5), 1.5);
    }

    #[test]
    fn modulation_at_y_equal_delta() {
        // 1 - 0.5 * 1/sqrt(2), evaluated by hand
        let expected = 1.0 - 0.5 * std::f64::consts::FRAC_1_SQRT_2;
        assert!((modulation(0.1, 0.1, 0.5) - expected).abs() < 1e-15);
        assert!((expected - 0.646447).abs() < 1e-6);
    }

    #[test]
    fn modulation_slope_at_origin() {
        let (delta, chi) = (0.1, 0.5);
        let h = 1e-6;
        let slope = (modulation(h, delta, chi) - modulation(-h, delta, chi)) / (2.0 * h);
        assert!((slope + chi / delta).abs() < 1e-6, "slope {slope}");
    }

    proptest! {
        #[test]
        fn modulation_is_odd_around_one(y in -100.0f64..100.0, delta in 1e-3f64..2.0, chi in 0.01f64..0.99) {
            let s = modulation(y, delta, chi) + modulation(-y, delta, chi);
            prop_assert!((s - 2.0).abs() < 1e-12);
        }

        #[test]
        fn modulation_bounded_and_decreasing(y in -10.0f64..10.0, dy in 1e-6f64..1.0, delta in 1e-2f64..1.0, chi in 0.01f64..0.99) {
            let a = modulation(y, delta, chi);
            let b = modulation(y + dy, delta, chi);
            prop_assert!(b < a);
            prop_assert!(a > 1.0 - chi && a < 1.0 + chi);
        }

        #[test]
        fn nondimensional_round_trip(
            v0 in 0.1f64..100.0, lam in 0.01f64..10.0, tau in 0.01f64..100.0,
            ds in 1e-3f64..10.0, a in 1e-3f64..10.0, b in 0.1f64..10.0,
            rho0 in 0.1f64..10.0, l in 0.1f64..100.0, t0 in 0.01f64..100.0,
        ) {
            let d = DimensionalParams { v0, lambda0_dim: lam, tau_dim: tau, d_s_dim: ds, a, b, rho0, l_dim: l, t0 };
            let p = nondimensionalize(&d, 0.1, 0.5).unwrap();
            let back = redimensionalize(&p, &ReferenceScales::from(&d));
            let pairs = [
                (back.v0, v0), (back.lambda0_dim, lam), (back.tau_dim, tau), (back.d_s_dim, ds),
                (back.a, a), (back.b, b), (back.rho0, rho0), (back.l_dim, l), (back.t0, t0),
            ];
            for (got, want) in pairs {
                prop_assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn log_sensing_examples() {
        let g = Grid1D::new(4, 4.0).unwrap();
        let m = log_sensing(&ScalarField::constant(g, 1.0)).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));

        let m = log_sensing(&ScalarField::constant(g, std::f64::consts::E)).unwrap();
        assert!(m.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let g3 = Grid1D::new(4, 4.0).unwrap();
        let m = log_sensing(&ScalarField::new(g3, vec![1.0, 2.0, 4.0, 1.0])).unwrap();
        assert!((m.values[1] - 0.693147).abs() < 1e-6);
        assert!((m.values[2] - 1.386294).abs() < 1e-6);
        assert!((m.values[2] - 2.0 * m.values[1]).abs() < 1e-15);
    }

    #[test]
    fn log_sensing_rejects_non_positive() {
        let g = Grid1D::new(4, 4.0).unwrap();
        let s = ScalarField::new(g, vec![1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(
            log_sensing(&s),
            Err(Error::NonPositiveConcentration { index: 1, .. })
        ));
    }

    #[test]
    fn nondimensionalize_unit_inputs() {
        let d = DimensionalParams {
            v0: 1.0,
            lambda0_dim: 10.0,
            tau_dim: 1.0,
            d_s_dim: 1.0,
            a: 1.0,
            b: 1.0,
            rho0: 1.0,
            l_dim: 10.0,
            t0: 1.0,
        };
        let p = nondimensionalize(&d, 0.1, 0.5).unwrap();
        assert_eq!(p.lambda0, 10.0);
        assert_eq!(p.tau, 1.0);
        assert_eq!(p.sigma, 1.0);
        assert_eq!(p.sigma_s, 1.0);
        assert_eq!(p.d_s, 1.0);
    }

    #[test]
    fn nondimensionalize_length_scale() {
        let d = DimensionalParams {
            v0: 1.0,
            lambda0_dim: 1.0,
            tau_dim: 1.0,
            d_s_dim: 4.0,
            a: 1.0,
            b: 1.0,
            rho0: 1.0,
            l_dim: 20.0,
            t0: 1.0,
        };
        assert_eq!(d.diffusion_length(), 2.0);
        let p = nondimensionalize(&d, 0.1, 0.5).unwrap();
        assert_eq!(p.length, 10.0);
        assert!((p.d_s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn run_length_ratio_gives_epsilon() {
        // L0 = 100 um, V0 = 20 um/s, lambda0 = 1/s: run length 20 um
        let d = DimensionalParams {
            v0: 20.0,
            lambda0_dim: 1.0,
            tau_dim: 1.0,
            d_s_dim: 1.0e4,
            a: 1.0,
            b: 1.0,
            rho0: 1.0,
            l_dim: 1000.0,
            t0: 5.0,
        };
        let p = nondimensionalize(&d, 0.1, 0.5).unwrap();
        assert!((p.epsilon() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn nondimensionalize_rejects_non_positive() {
        let mut d = DimensionalParams {
            v0: 1.0,
            lambda0_dim: 1.0,
            tau_dim: 1.0,
            d_s_dim: 1.0,
            a: 1.0,
            b: 1.0,
            rho0: 1.0,
            l_dim: 1.0,
            t0: 1.0,
        };
        d.a = 0.0;
        assert!(matches!(
            nondimensionalize(&d, 0.1, 0.5),
            Err(Error::InvalidDimensional { field: "a", .. })
        ));
    }

    #[test]
    fn validate_examples() {
        assert!(ModelParams::new(10.0, 0.1, 0.1, 0.5).validate().is_ok());

        let v = ModelParams::new(10.0, 0.1, 0.1, 1.2).validate().unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "chi must lie in (0,1)");
        assert_eq!(v[0].value, 1.2);

        let v = ModelParams::new(10.0, 0.0, 0.1, 0.5).validate().unwrap_err();
        assert_eq!(v[0].message, "tau must be positive");

        let v = ModelParams::new(-1.0, 0.0, 0.1, 1.5).validate().unwrap_err();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn derived_quantities_are_exact() {
        let p = ModelParams::new(10.0, 0.1, 0.1, 0.5);
        assert_eq!(p.alpha(), 10.0 * 0.1);
        assert_eq!(p.epsilon(), 1.0 / 10.0);
        assert_eq!(p.tau_tilde(), p.tau / p.lambda0);
        let q = ModelParams::from_alpha(10.0, 100.0, 0.01, 0.5);
        assert!((q.tau - 10.0).abs() < 1e-12);
    }
}
