//! Parameter sweeps and the stability table.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use toml::{Table, Value};

use crate::harness::config::{resolve, set_key, ConfigErrors, ExperimentConfig, SweepSection};
use crate::harness::run::{execute, Writer};
use crate::record::{fmt, EngineKind};
use crate::stability::{critical_stiffness, most_unstable_mode, Classification, ModeScan};

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub values: Vec<f64>,
    pub delta_rho_bar: Option<f64>,
    pub delta_rho: Option<f64>,
    pub classification: Option<Classification>,
    /// `ok`, or the error that stopped this point.
    pub status: String,
    pub wall_seconds: f64,
}

/// Grid points in row-major order, the last axis varying fastest.
pub fn enumerate_points(sweep: &SweepSection) -> Vec<Vec<f64>> {
    let mut points = vec![Vec::new()];
    for axis in &sweep.axis {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    points
}

fn point_config(
    text: &str,
    base: &Table,
    sweep: &SweepSection,
    values: &[f64],
    engine: Option<EngineKind>,
) -> Result<ExperimentConfig, String> {
    let mut table = base.clone();
    table.remove("sweep");
    for (axis, &v) in sweep.axis.iter().zip(values) {
        // integer-valued keys need an integer TOML value
        let value = if v.fract() == 0.0 && is_integer_key(&axis.key) {
            Value::Integer(v as i64)
        } else {
            Value::Float(v)
        };
        set_key(&mut table, &axis.key, value).map_err(|e| e.to_string())?;
    }
    resolve(text, table, engine).map_err(|e: ConfigErrors| {
        e.errors().iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    })
}

fn is_integer_key(key: &str) -> bool {
    matches!(
        key,
        "seed" | "numerics.cells" | "numerics.particles_per_cell" | "numerics.m_cells"
    )
}

/// Run every grid point on a pool of `workers` threads. Rows come back in
/// grid order; a failing point records its error and the sweep continues.
pub fn run_sweep(
    text: &str,
    base: &Table,
    sweep: &SweepSection,
    engine: Option<EngineKind>,
    workers: usize,
) -> Vec<SweepRow> {
    let points = enumerate_points(sweep);
    let work = |(index, values): (usize, &Vec<f64>)| {
        let start = Instant::now();
        let mut row = SweepRow {
            index,
            values: values.clone(),
            delta_rho_bar: None,
            delta_rho: None,
            classification: None,
            status: "ok".into(),
            wall_seconds: 0.0,
        };
        match point_config(text, base, sweep, values, engine) {
            Err(e) => row.status = e,
            Ok(cfg) => match execute(&cfg, 1) {
                Ok(out) => {
                    row.delta_rho_bar = out.summary.delta_rho_bar;
                    row.delta_rho = Some(out.summary.delta_rho);
                    row.classification = out.summary.classification;
                }
                Err(e) => row.status = e.to_string(),
            },
        }
        row.wall_seconds = start.elapsed().as_secs_f64();
        row
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| points.par_iter().enumerate().map(work).collect())
}

/// Write `sweep.csv`, `sweep_timing.csv` and a manifest. Wall times live
/// only in the timing file so the table itself stays reproducible.
pub fn write_sweep(
    cfg: &ExperimentConfig,
    sweep: &SweepSection,
    rows: &[SweepRow],
    dir: &Path,
) -> std::io::Result<()> {
    let mut w = Writer::new(dir)?;
    w.write("config.toml", cfg.canonical().as_bytes())?;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    w.csv("sweep.csv", |c| {
        let mut header = vec!["point".to_string()];
        header.extend(sweep.axis.iter().map(|a| a.key.clone()));
        header.extend(
            ["delta_rho_bar", "delta_rho", "classification", "status"].map(String::from),
        );
        c.write_record(&header)?;
        for r in rows {
            let mut rec = vec![r.index.to_string()];
            rec.extend(r.values.iter().map(|&v| fmt(v)));
            rec.push(opt(r.delta_rho_bar));
            rec.push(opt(r.delta_rho));
            rec.push(r.classification.map(|c| c.name().to_string()).unwrap_or_default());
            rec.push(r.status.clone());
            c.write_record(&rec)?;
        }
        Ok(())
    })?;
    w.manifest(cfg)?;
    let mut timing = csv::Writer::from_path(dir.join("sweep_timing.csv"))?;
    timing.write_record(["point", "wall_seconds"])?;
    for r in rows {
        timing.write_record([r.index.to_string(), format!("{:.3}", r.wall_seconds)])?;
    }
    timing.flush()
}

/// One row of the linear-stability table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityRow {
    pub alpha: f64,
    pub stiffness: f64,
    pub scan: ModeScan,
    /// Stiffness at which the `n = 1` mode turns unstable.
    pub critical: f64,
}

pub fn stability_table(cfg: &ExperimentConfig) -> crate::error::Result<Vec<StabilityRow>> {
    let sec = cfg
        .stability
        .as_ref()
        .ok_or_else(|| crate::error::Error::Config("missing [stability] section".into()))?;
    let mut rows = Vec::new();
    let k1 = std::f64::consts::TAU / cfg.params.length;
    for &alpha in &sec.alpha {
        for &stiffness in &sec.stiffness {
            let mut p = cfg.params;
            p.tau = alpha / p.lambda0;
            p.delta = p.chi / stiffness;
            rows.push(StabilityRow {
                alpha,
                stiffness,
                scan: most_unstable_mode(&p, p.length)?,
                critical: critical_stiffness(k1, alpha, p.d_s),
            });
        }
    }
    Ok(rows)
}

/// Write `stability.csv` (one row per grid point) and `critical.csv`
/// (critical stiffness per `alpha`).
pub fn write_stability(cfg: &ExperimentConfig, rows: &[StabilityRow], dir: &Path) -> std::io::Result<()> {
    let mut w = Writer::new(dir)?;
    w.write("config.toml", cfg.canonical().as_bytes())?;
    w.csv("stability.csv", |c| {
        c.write_record(["alpha", "stiffness", "n", "k", "mu", "prediction"])?;
        for r in rows {
            let (n, k, mu, label) = match r.scan {
                ModeScan::Unstable { n, k, mu } => (n, k, mu, "unstable"),
                ModeScan::AllStable { n, k, mu } => (n, k, mu, "stable"),
            };
            c.write_record([fmt(r.alpha), fmt(r.stiffness), n.to_string(), fmt(k), fmt(mu), label.into()])?;
        }
        Ok(())
    })?;
    w.csv("critical.csv", |c| {
        c.write_record(["alpha", "critical_stiffness"])?;
        let mut seen: Vec<f64> = Vec::new();
        for r in rows {
            if !seen.contains(&r.alpha) {
                seen.push(r.alpha);
                c.write_record([fmt(r.alpha), fmt(r.critical)])?;
            }
        }
        Ok(())
    })?;
    w.manifest(cfg)
}
