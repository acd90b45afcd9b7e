//! Linear stability of the uniform state of the Keller-Segel system and the
//! three-way classification of simulated outcomes.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// One Fourier mode `k` of the linearized system. `alpha` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionQuery {
    pub k: f64,
    pub alpha: f64,
    pub chi: f64,
    pub delta: f64,
    pub d_s: f64,
}

impl DispersionQuery {
    pub fn mode(params: &ModelParams, n: u32) -> Self {
        DispersionQuery {
            k: TAU * n as f64 / params.length,
            alpha: params.alpha(),
            chi: params.chi,
            delta: params.delta,
            d_s: params.d_s,
        }
    }
}

fn alpha_weight(alpha: f64) -> f64 {
    if alpha.is_infinite() {
        1.0
    } else {
        alpha / (1.0 + alpha)
    }
}

/// `mu = -k^2 (1 - alpha/(1+alpha) * (chi/delta) / (1 + D_S k^2))`.
pub fn growth_rate(q: &DispersionQuery) -> f64 {
    let k2 = q.k * q.k;
    -k2 * (1.0 - alpha_weight(q.alpha) * (q.chi / q.delta) / (1.0 + q.d_s * k2))
}

/// Stiffness `chi/delta` above which mode `k` grows.
pub fn critical_stiffness(k: f64, alpha: f64, d_s: f64) -> f64 {
    (1.0 + d_s * k * k) / alpha_weight(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModeScan {
    Unstable { n: u32, k: f64, mu: f64 },
    /// Every admissible mode decays; `mu` is the slowest decay rate.
    AllStable { n: u32, k: f64, mu: f64 },
}

impl ModeScan {
    pub fn mu(&self) -> f64 {
        match *self {
            ModeScan::Unstable { mu, .. } | ModeScan::AllStable { mu, .. } => mu,
        }
    }

    pub fn n(&self) -> u32 {
        match *self {
            ModeScan::Unstable { n, .. } | ModeScan::AllStable { n, .. } => n,
        }
    }
}

/// Fastest-growing mode among `k = 2 pi n / L`, `n >= 1`.
pub fn most_unstable_mode(params: &ModelParams, length: f64) -> Result<ModeScan> {
    if !(params.d_s > 0.0) || !(length > 0.0) {
        return Err(Error::InvalidDimensional {
            field: "d_s/length",
            value: params.d_s.min(length),
        });
    }
    let base = DispersionQuery {
        k: 0.0,
        alpha: params.alpha(),
        chi: params.chi,
        delta: params.delta,
        d_s: params.d_s,
    };
    let c = alpha_weight(base.alpha) * base.chi / base.delta;
    // mu(k) has at most one interior maximum, below k^2 = (sqrt(c) - 1)/D_S
    let k_peak = if c > 1.0 {
        ((c.sqrt() - 1.0) / params.d_s).sqrt()
    } else {
        0.0
    };
    let mut best = (1u32, f64::NEG_INFINITY);
    let mut prev = f64::NEG_INFINITY;
    let mut n = 1u32;
    loop {
        let k = TAU * n as f64 / length;
        let mu = growth_rate(&DispersionQuery { k, ..base });
        if mu > best.1 {
            best = (n, mu);
        }
        if k > k_peak && mu < prev {
            break;
        }
        prev = mu;
        n += 1;
    }
    let k = TAU * best.0 as f64 / length;
    Ok(if best.1 > 0.0 {
        ModeScan::Unstable { n: best.0, k, mu: best.1 }
    } else {
        ModeScan::AllStable { n: best.0, k, mu: best.1 }
    })
}

/// Supremum of `mu` over continuous `k`: `(sqrt(c) - 1)^2 / D_S` for
/// `c = alpha/(1+alpha) chi/delta > 1`, else 0.
pub fn continuum_max_growth(params: &ModelParams) -> f64 {
    let c = alpha_weight(params.alpha()) * params.chi / params.delta;
    if c > 1.0 {
        (c.sqrt() - 1.0).powi(2) / params.d_s
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Stable,
    Intermediate,
    Unstable,
}

impl Classification {
    pub fn name(&self) -> &'static str {
        match self {
            Classification::Stable => "stable",
            Classification::Intermediate => "intermediate",
            Classification::Unstable => "unstable",
        }
    }
}

/// Below 0.01 stable, below 0.1 intermediate, otherwise unstable.
pub fn classify(delta_rho_bar: f64) -> Classification {
    if delta_rho_bar < 0.01 {
        Classification::Stable
    } else if delta_rho_bar < 0.1 {
        Classification::Intermediate
    } else {
        Classification::Unstable
    }
}
