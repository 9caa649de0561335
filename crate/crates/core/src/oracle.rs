//! Ground-truth stability-region determination: exhaustive grid sweeps
//! over droop coefficients and batch classification of droop samples.
//!
//! Each point runs the full small-signal pipeline. Points are independent,
//! so both operations parallelize over a rayon pool with indexed writes:
//! the output is identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::netmodel::{
    build_admittance, AdmittanceModel, DroopSetting, NetModelError, NetworkConfig,
    DROOP_FLOOR_PCT,
};
use crate::smallsignal::{classify_point, SmallSignalError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Net(#[from] NetModelError),
    #[error(transparent)]
    SmallSignal(#[from] SmallSignalError),
    #[error("grid: {0}")]
    BadGrid(String),
    #[error("sample {index} has {got} entries, expected {expected}")]
    BadSampleWidth { index: usize, got: usize, expected: usize },
    #[error("csv: {0}")]
    Io(#[from] std::io::Error),
}

/// A rectangular grid over the (k_f, k_v) plane of one target source, with
/// every other source pinned to `fixed_droops`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub target_source: usize,
    /// Percent, inclusive on both ends (the droop floor clamps the low end).
    pub kf_range: (f64, f64),
    pub kv_range: (f64, f64),
    pub resolution: (usize, usize),
    pub fixed_droops: DroopSetting,
}

impl GridSpec {
    /// The single-inverter sweep setup: target source 0, others fixed at
    /// kf = 0.1 %, kv = 2 %, ranges [0, 0.4] x [0, 4] percent.
    pub fn paper_single_inverter(resolution: (usize, usize)) -> Self {
        Self {
            target_source: 0,
            kf_range: (0.0, 0.4),
            kv_range: (0.0, 4.0),
            resolution,
            fixed_droops: DroopSetting::uniform(5, 0.1, 2.0, 31.41, 50.0, 4160.0),
        }
    }

    pub fn validate(&self, n_nodes: usize) -> Result<(), OracleError> {
        if self.target_source >= n_nodes {
            return Err(OracleError::BadGrid(format!(
                "target source {} out of range",
                self.target_source
            )));
        }
        for (lo, hi) in [self.kf_range, self.kv_range] {
            if !(lo < hi) && self.resolution != (1, 1) {
                return Err(OracleError::BadGrid(format!("range [{lo}, {hi}] is empty")));
            }
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(OracleError::BadGrid("resolution must be >= 1".into()));
        }
        self.fixed_droops.validate(n_nodes)?;
        Ok(())
    }

    /// Grid value along an axis: closed interval with `n` points, clamped
    /// to the droop floor at the low end.
    fn axis_value(range: (f64, f64), n: usize, index: usize) -> f64 {
        let v = if n == 1 {
            range.0
        } else {
            range.0 + (range.1 - range.0) * index as f64 / (n - 1) as f64
        };
        v.max(DROOP_FLOOR_PCT)
    }

    pub fn kf_value(&self, i: usize) -> f64 {
        Self::axis_value(self.kf_range, self.resolution.0, i)
    }

    pub fn kv_value(&self, j: usize) -> f64 {
        Self::axis_value(self.kv_range, self.resolution.1, j)
    }

    /// The full droop vector at grid point (i, j).
    pub fn droops_at(&self, i: usize, j: usize) -> DroopSetting {
        let mut droops = self.fixed_droops.clone();
        droops.k_f_pct[self.target_source] = self.kf_value(i);
        droops.k_v_pct[self.target_source] = self.kv_value(j);
        droops
    }
}

/// Boolean stability labels over a [`GridSpec`], row-major in kf.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRegion {
    pub grid: GridSpec,
    pub labels: Vec<bool>,
    pub config_id: String,
}

impl StabilityRegion {
    pub fn label(&self, i: usize, j: usize) -> bool {
        self.labels[i * self.grid.resolution.1 + j]
    }

    pub fn n_stable(&self) -> usize {
        self.labels.iter().filter(|&&s| s).count()
    }

    /// CSV export: `kf_pct,kv_pct,stable`, kf outer, kv inner.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), OracleError> {
        writeln!(out, "kf_pct,kv_pct,stable")?;
        let (n_kf, n_kv) = self.grid.resolution;
        for i in 0..n_kf {
            for j in 0..n_kv {
                writeln!(
                    out,
                    "{},{},{}",
                    self.grid.kf_value(i),
                    self.grid.kv_value(j),
                    u8::from(self.label(i, j))
                )?;
            }
        }
        Ok(())
    }

    /// Rebuild a region from its CSV export. The grid geometry is inferred
    /// from the axis values; the fixed droop setting is not stored in the
    /// CSV and comes back as the nominal template (it plays no role in
    /// coverage binning).
    pub fn read_csv<R: std::io::BufRead>(reader: R, config_id: &str) -> Result<Self, OracleError> {
        let bad = |msg: &str| OracleError::BadGrid(format!("region csv: {msg}"));
        let mut rows: Vec<(f64, f64, bool)> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "kf_pct,kv_pct,stable" {
                    return Err(bad("missing kf_pct,kv_pct,stable header"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad(&format!("line {} has {} fields", lineno + 1, fields.len())));
            }
            let kf: f64 = fields[0].parse().map_err(|_| bad("bad kf value"))?;
            let kv: f64 = fields[1].parse().map_err(|_| bad("bad kv value"))?;
            let stable = match fields[2].trim() {
                "1" => true,
                "0" => false,
                other => return Err(bad(&format!("bad stable flag `{other}`"))),
            };
            rows.push((kf, kv, stable));
        }
        if rows.is_empty() {
            return Err(bad("no data rows"));
        }
        let mut kf_values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        kf_values.dedup();
        let n_kf = kf_values.len();
        let n_kv = rows.len() / n_kf;
        if n_kf * n_kv != rows.len() {
            return Err(bad("row count is not a full grid"));
        }
        let kf_lo = rows[0].0;
        let kf_hi = rows[rows.len() - 1].0;
        let kv_lo = rows[0].1;
        let kv_hi = rows[n_kv - 1].1;
        let grid = GridSpec {
            target_source: 0,
            kf_range: (kf_lo, kf_hi),
            kv_range: (kv_lo, kv_hi),
            resolution: (n_kf, n_kv),
            fixed_droops: DroopSetting::ring5_nominal(),
        };
        Ok(Self {
            grid,
            labels: rows.iter().map(|r| r.2).collect(),
            config_id: config_id.to_string(),
        })
    }
}

/// Labeled droop samples; each row is `kf1..kfN, kv1..kvN` in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    /// Rows that violated the droop floor; labeled unstable by policy.
    pub flagged: Vec<bool>,
    pub config_id: String,
}

impl SampleBatch {
    pub fn n_stable(&self) -> usize {
        self.labels.iter().filter(|&&s| s).count()
    }

    /// CSV export: `kf1..kfN,kv1..kvN,stable`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), OracleError> {
        let n = self.rows.first().map_or(0, |r| r.len() / 2);
        let mut header = Vec::new();
        for i in 1..=n {
            header.push(format!("kf{i}"));
        }
        for i in 1..=n {
            header.push(format!("kv{i}"));
        }
        header.push("stable".into());
        writeln!(out, "{}", header.join(","))?;
        for (row, &label) in self.rows.iter().zip(&self.labels) {
            let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            fields.push(u8::from(label).to_string());
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Sweep the grid, classifying every point with the small-signal pipeline.
/// Runs on the current rayon pool; output is independent of thread count.
pub fn sweep(config: &NetworkConfig, grid: &GridSpec) -> Result<StabilityRegion, OracleError> {
    let adm = build_admittance(config)?;
    grid.validate(config.n_nodes)?;
    let (n_kf, n_kv) = grid.resolution;
    let labels = (0..n_kf * n_kv)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n_kv, idx % n_kv);
            let droops = grid.droops_at(i, j);
            classify_point(&adm, &droops).map(|v| v.stable)
        })
        .collect::<Result<Vec<bool>, SmallSignalError>>()?;
    Ok(StabilityRegion { grid: grid.clone(), labels, config_id: config.id.clone() })
}

/// Classify a batch of full droop vectors (`kf1..kfN, kv1..kvN`, percent)
/// with the default power-filter corner frequency. Rows below the droop
/// floor are flagged and labeled unstable rather than failing the whole
/// batch.
pub fn classify_samples(
    config: &NetworkConfig,
    samples: &[Vec<f64>],
) -> Result<SampleBatch, OracleError> {
    let adm = build_admittance(config)?;
    let template = DroopSetting::uniform(
        config.n_nodes,
        0.1,
        2.0,
        crate::netmodel::DEFAULT_OMEGA_C,
        config.f0,
        config.v_base_ll,
    );
    classify_samples_with_model(&adm, &config.id, &template, samples)
}

/// As [`classify_samples`] with a prebuilt admittance model and an
/// explicit droop template supplying omega_c / f0 / v0 (the hot-loop entry
/// point used by benchmarks).
pub fn classify_samples_with_model(
    adm: &AdmittanceModel,
    config_id: &str,
    template: &DroopSetting,
    samples: &[Vec<f64>],
) -> Result<SampleBatch, OracleError> {
    let n_nodes = adm.n_nodes();
    for (index, row) in samples.iter().enumerate() {
        if row.len() != 2 * n_nodes {
            return Err(OracleError::BadSampleWidth {
                index,
                got: row.len(),
                expected: 2 * n_nodes,
            });
        }
    }
    let results = samples
        .par_iter()
        .map(|row| -> Result<(bool, bool), SmallSignalError> {
            if row.iter().any(|&k| k < DROOP_FLOOR_PCT) {
                return Ok((false, true));
            }
            let droops = DroopSetting {
                k_f_pct: row[..n_nodes].to_vec(),
                k_v_pct: row[n_nodes..].to_vec(),
                ..template.clone()
            };
            classify_point(adm, &droops).map(|v| (v.stable, false))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (labels, flagged) = results.into_iter().unzip();
    Ok(SampleBatch {
        rows: samples.to_vec(),
        labels,
        flagged,
        config_id: config_id.to_string(),
    })
}
