//! Run output shared by all engines, with CSV writers.
//!
//! Floats are written with Rust's shortest round-trip formatting, so identical
//! runs produce byte-identical files.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diagnostics::DeviationSeries;
use crate::field::{Grid1D, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Mc,
    Ks,
    Asymptotic,
}

impl EngineKind {
    pub fn name(&self) -> &'static str {
        match self {
            EngineKind::Mc => "mc",
            EngineKind::Ks => "ks",
            EngineKind::Asymptotic => "asymptotic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Engine-native time.
    pub t: f64,
    pub t_lambda: f64,
    pub rho: ScalarField,
    pub s: ScalarField,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub t: f64,
    pub t_lambda: f64,
    /// `max_x |rho - 1|`.
    pub max_deviation: f64,
    /// `max_x rho - 1`.
    pub peak: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stationary {
    pub t: f64,
    pub delta_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub engine: EngineKind,
    pub grid: Grid1D,
    pub snapshots: Vec<Snapshot>,
    pub series: Vec<SeriesPoint>,
    pub stationary: Option<Stationary>,
    pub steps: u64,
}

impl RunRecord {
    pub fn new(engine: EngineKind, grid: Grid1D) -> Self {
        RunRecord {
            engine,
            grid,
            snapshots: Vec::new(),
            series: Vec::new(),
            stationary: None,
            steps: 0,
        }
    }

    pub fn last_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    pub fn deviation_series(&self) -> DeviationSeries {
        DeviationSeries::new(
            self.series.iter().map(|p| p.t_lambda).collect(),
            self.series.iter().map(|p| p.max_deviation).collect(),
        )
    }

    pub fn write_snapshot_csv<W: Write>(&self, snap: &Snapshot, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "rho", "S"])?;
        for i in 0..self.grid.cells() {
            out.write_record([
                fmt(self.grid.center(i)),
                fmt(snap.rho.values[i]),
                fmt(snap.s.values[i]),
            ])?;
        }
        out.flush()
    }

    pub fn write_series_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "t_lambda", "max_deviation", "delta_rho"])?;
        for p in &self.series {
            out.write_record([
                fmt(p.t),
                fmt(p.t_lambda),
                fmt(p.max_deviation),
                fmt(p.peak),
            ])?;
        }
        out.flush()
    }
}

/// Shortest round-trip decimal.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}
