//! Single runs: build the engine config, run it, derive diagnostics and
//! write the output directory.
//!
//! Files written to the output directory:
//!
//! - `config.toml`: the resolved configuration
//! - `snapshots.csv`: index of snapshot files with `t` and `t_lambda`
//! - `snapshot_NNN.csv`: `x,rho,S`
//! - `phase_NNN.csv`: `x,m,p` (asymptotic engine only)
//! - `series.csv`: `t,t_lambda,max_deviation,delta_rho`
//! - `run_length.csv`, `histogram.csv`: when requested
//! - `summary.csv`: `key,value` pairs
//! - `manifest.toml`: config hash, seed, version and a SHA-256 per file
//!
//! Nothing time- or host-dependent is written, so identical inputs give
//! byte-identical directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::asymptotic::{run_asymptotic, AsymptoticConfig, PhaseDensity};
use crate::diagnostics::{
    detect_plateau, find_center, internal_histogram, phase_histogram, phase_run_length_profile,
    run_length_profile, time_avg_deviation, BinSpec, InternalHistogram, Plateau, RunLengthProfile,
};
use crate::error::{Error, Result};
use crate::field::{gradient_log, Grid1D, ScalarField};
use crate::harness::config::{Diagnostic, ExperimentConfig};
use crate::ks::{run_ks, KsConfig};
use crate::mc::{default_dt, McConfig, McSimulation, ParticleEnsemble};
use crate::record::{fmt, EngineKind, RunRecord};
use crate::stability::{classify, Classification};

/// Everything a run produced, before any file is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub phases: Vec<PhaseDensity>,
    pub summary: Summary,
    pub run_length: Option<RunLengthProfile>,
    pub histograms: Vec<InternalHistogram>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub engine: EngineKind,
    pub steps: u64,
    pub t_end_lambda: f64,
    /// Time average of `max|rho - 1|` over `[T/2, T]`.
    pub delta_rho_bar: Option<f64>,
    pub classification: Option<Classification>,
    /// `max rho - 1` of the final (time-averaged for MC) density.
    pub delta_rho: f64,
    pub stationary_t_lambda: Option<f64>,
    pub plateau: Option<Plateau>,
    pub center: f64,
}

pub fn mc_config(cfg: &ExperimentConfig, threads: usize) -> Result<McConfig> {
    let n = &cfg.numerics;
    Ok(McConfig {
        params: cfg.params,
        grid: Grid1D::new(n.cells, cfg.params.length)?,
        particles_per_cell: n.particles_per_cell,
        dt: n.dt.unwrap_or_else(|| default_dt(cfg.params.lambda0)),
        t_end: cfg.engine_time(n.t_end),
        seed: cfg.seed,
        snapshot_times: cfg.outputs.snapshots.clone(),
        avg_window: n.avg_window,
        threads: threads.max(1),
    })
}

pub fn ks_config(cfg: &ExperimentConfig) -> Result<KsConfig> {
    let n = &cfg.numerics;
    Ok(KsConfig {
        params: cfg.params,
        grid: Grid1D::new(n.cells, cfg.params.length)?,
        regime: n.regime,
        dt: n.dt.unwrap_or(1e-2),
        t_end: cfg.engine_time(n.t_end),
        perturbation: n.perturbation.clone(),
        snapshot_times: cfg.outputs.snapshots.iter().map(|&t| cfg.engine_time(t)).collect(),
        output_interval: cfg.engine_time(n.output_interval),
        stop_when_stationary: n.stop_when_stationary,
    })
}

pub fn asymptotic_config(cfg: &ExperimentConfig) -> Result<AsymptoticConfig> {
    let n = &cfg.numerics;
    Ok(AsymptoticConfig {
        params: cfg.params,
        grid: Grid1D::new(n.cells, cfg.params.length)?,
        m_cells: n.m_cells,
        m_half_width: n.m_half_width,
        dt: n.dt.unwrap_or(1e-2),
        t_end: cfg.engine_time(n.t_end),
        perturbation: n.perturbation.clone(),
        snapshot_times: cfg.outputs.snapshots.iter().map(|&t| cfg.engine_time(t)).collect(),
        output_interval: cfg.engine_time(n.output_interval),
        stop_when_stationary: n.stop_when_stationary,
    })
}

fn bin_spec(cfg: &ExperimentConfig, s: &ScalarField) -> Result<BinSpec> {
    let g = gradient_log(s)?
        .values
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let half = cfg.outputs.bin_range * cfg.params.tau * g;
    let half = if half > 0.0 { half } else { cfg.outputs.bin_range };
    BinSpec::new(-half, half, cfg.outputs.bins)
}

/// Run the configured engine and derive the requested diagnostics.
/// `threads` only affects the Monte Carlo engine, whose results do not
/// depend on it.
pub fn execute(cfg: &ExperimentConfig, threads: usize) -> Result<RunOutput> {
    let wants = |d: Diagnostic| cfg.outputs.diagnostics.contains(&d);
    let mut ensemble: Option<ParticleEnsemble> = None;
    let (record, phases) = match cfg.engine {
        EngineKind::Mc => {
            let mut sim = McSimulation::new(mc_config(cfg, threads)?)?;
            sim.run_in_place()?;
            if wants(Diagnostic::RunLength) || wants(Diagnostic::Histogram) {
                ensemble = Some(sim.ensemble().clone());
            }
            (sim.record().clone(), Vec::new())
        }
        EngineKind::Ks => (run_ks(&ks_config(cfg)?)?, Vec::new()),
        EngineKind::Asymptotic => {
            let run = run_asymptotic(&asymptotic_config(cfg)?)?;
            (run.record, run.phases)
        }
    };
    let last = record
        .last_snapshot()
        .ok_or(Error::EmptySample("final snapshot"))?
        .clone();
    let t_end = last.t_lambda;
    let delta_rho_bar = if wants(Diagnostic::Deviation) && !record.series.is_empty() {
        time_avg_deviation(&record.deviation_series(), t_end).ok()
    } else {
        None
    };
    let center = find_center(&last.s);
    let plateau = wants(Diagnostic::Plateau).then(|| detect_plateau(&last.rho, cfg.outputs.plateau_tol));
    let mut run_length = None;
    let mut histograms = Vec::new();
    if wants(Diagnostic::RunLength) || wants(Diagnostic::Histogram) {
        let spec = bin_spec(cfg, &last.s)?;
        let radii = &cfg.outputs.radii;
        match (&ensemble, phases.last()) {
            (Some(ens), _) => {
                let n_bar = cfg.numerics.particles_per_cell;
                if wants(Diagnostic::RunLength) {
                    run_length = Some(run_length_profile(
                        ens, &record.grid, n_bar, center, radii, spec, &cfg.params,
                    )?);
                }
                if wants(Diagnostic::Histogram) {
                    for &r in radii {
                        match internal_histogram(ens, &record.grid, n_bar, center, r, spec) {
                            Ok(h) => histograms.push(h),
                            Err(Error::EmptySample(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
            (None, Some(p)) => {
                if wants(Diagnostic::RunLength) {
                    run_length =
                        Some(phase_run_length_profile(p, &last.s, center, radii, spec, &cfg.params)?);
                }
                if wants(Diagnostic::Histogram) {
                    for &r in radii {
                        match phase_histogram(p, &last.s, center, r, spec) {
                            Ok(h) => histograms.push(h),
                            Err(Error::EmptySample(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
            (None, None) => {}
        }
    }
    let summary = Summary {
        engine: cfg.engine,
        steps: record.steps,
        t_end_lambda: t_end,
        delta_rho_bar,
        classification: delta_rho_bar.map(classify),
        delta_rho: last.rho.max() - 1.0,
        stationary_t_lambda: record
            .stationary
            .map(|s| s.t / (cfg.params.length * cfg.params.length)),
        plateau,
        center,
    };
    Ok(RunOutput {
        record,
        phases,
        summary,
        run_length,
        histograms,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

impl Summary {
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let mut rows = vec![
            ("engine", self.engine.name().to_string()),
            ("steps", self.steps.to_string()),
            ("t_end_lambda", fmt(self.t_end_lambda)),
            ("delta_rho_bar", opt(self.delta_rho_bar)),
            (
                "classification",
                self.classification.map(|c| c.name().to_string()).unwrap_or_default(),
            ),
            ("delta_rho", fmt(self.delta_rho)),
            ("stationary_t_lambda", opt(self.stationary_t_lambda)),
            ("center", fmt(self.center)),
        ];
        if let Some(p) = self.plateau {
            rows.push(("plateau", p.has_plateau.to_string()));
            rows.push(("plateau_extent", p.extent.to_string()));
            rows.push(("plateau_start", p.start.to_string()));
        }
        rows
    }
}

/// A file written by [`write_outputs`] and its SHA-256.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenFile {
    pub name: String,
    pub sha256: String,
}

pub(crate) struct Writer {
    pub dir: PathBuf,
    pub files: Vec<WrittenFile>,
}

impl Writer {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(WrittenFile {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn csv<F>(&mut self, name: &str, f: F) -> std::io::Result<()>
    where
        F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            f(&mut w)?;
            w.flush()?;
        }
        self.write(name, &buf)
    }
}

impl Writer {
    /// Write `manifest.toml` listing every file written so far.
    pub fn manifest(&mut self, cfg: &ExperimentConfig) -> std::io::Result<()> {
        let canonical = cfg.canonical();
        let mut manifest = format!(
            "config_sha256 = \"{}\"\nseed = {}\nengine = \"{}\"\nversion = \"{}\"\n\n[files]\n",
            hex::encode(Sha256::digest(canonical.as_bytes())),
            cfg.seed,
            cfg.engine.name(),
            env!("CARGO_PKG_VERSION"),
        );
        for f in &self.files {
            manifest.push_str(&format!("\"{}\" = \"{}\"\n", f.name, f.sha256));
        }
        let mut file = fs::File::create(self.dir.join("manifest.toml"))?;
        file.write_all(manifest.as_bytes())?;
        self.files.push(WrittenFile {
            name: "manifest.toml".into(),
            sha256: hex::encode(Sha256::digest(manifest.as_bytes())),
        });
        Ok(())
    }
}

fn phase_csv(p: &PhaseDensity) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["x", "m", "p"]).unwrap();
        for i in 0..p.grid.cells() {
            let x = p.grid.center(i);
            for k in 0..p.axis.cells() {
                let v = p.get(i, k);
                if v != 0.0 {
                    w.write_record([fmt(x), fmt(p.axis.center(k)), fmt(v)]).unwrap();
                }
            }
        }
        w.flush().unwrap();
    }
    buf
}

/// Write all outputs of a run into `dir` (created if needed).
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> std::io::Result<Vec<WrittenFile>> {
    let mut w = Writer::new(dir)?;
    let canonical = cfg.canonical();
    w.write("config.toml", canonical.as_bytes())?;
    let rec = &out.record;
    let mut index = Vec::new();
    for (j, snap) in rec.snapshots.iter().enumerate() {
        let name = format!("snapshot_{j:03}.csv");
        let mut buf = Vec::new();
        rec.write_snapshot_csv(snap, &mut buf)?;
        w.write(&name, &buf)?;
        index.push((snap.t, snap.t_lambda, name));
    }
    for (j, p) in out.phases.iter().enumerate() {
        w.write(&format!("phase_{j:03}.csv"), &phase_csv(p))?;
    }
    w.csv("snapshots.csv", |c| {
        c.write_record(["index", "t", "t_lambda", "file"])?;
        for (j, (t, tl, name)) in index.iter().enumerate() {
            c.write_record([j.to_string(), fmt(*t), fmt(*tl), name.clone()])?;
        }
        Ok(())
    })?;
    let mut buf = Vec::new();
    rec.write_series_csv(&mut buf)?;
    w.write("series.csv", &buf)?;
    if let Some(rl) = &out.run_length {
        w.csv("run_length.csv", |c| {
            c.write_record(["r", "xi_plus", "xi_minus", "lower", "upper"])?;
            for j in 0..rl.r.len() {
                c.write_record([
                    fmt(rl.r[j]),
                    fmt(rl.xi_plus[j]),
                    fmt(rl.xi_minus[j]),
                    fmt(rl.lower),
                    fmt(rl.upper),
                ])?;
            }
            Ok(())
        })?;
    }
    if !out.histograms.is_empty() {
        w.csv("histogram.csv", |c| {
            c.write_record(["r", "y", "f_plus", "f_minus"])?;
            for h in &out.histograms {
                for b in 0..h.plus.spec.bins {
                    c.write_record([
                        fmt(h.r),
                        fmt(h.plus.spec.center(b)),
                        fmt(h.plus.density[b]),
                        fmt(h.minus.density[b]),
                    ])?;
                }
            }
            Ok(())
        })?;
    }
    w.csv("summary.csv", |c| {
        c.write_record(["key", "value"])?;
        for (k, v) in out.summary.rows() {
            c.write_record([k, v.as_str()])?;
        }
        Ok(())
    })?;
    w.manifest(cfg)?;
    Ok(w.files)
}
