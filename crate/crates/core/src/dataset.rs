//! Training datasets of stable system configurations: flattened, scaled
//! feature vectors with per-configuration condition labels.
//!
//! A feature row is the concatenation of the upper triangles of |Y| and
//! arg(Y) (diagonal included), then the k_f and k_v droop vectors in
//! percent: 40 values for a five-node system. Each block is divided by
//! one dataset-wide scaling factor, the per-block maximum absolute value,
//! so every stored magnitude is at most 1 and signs survive the round
//! trip ([`encode`] / [`decode`]).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use thiserror::Error;

use crate::binio;
use crate::netmodel::{
    build_admittance, AdmittanceModel, DroopSetting, NetModelError, NetworkConfig,
    DROOP_FLOOR_PCT,
};
use crate::seeding;
use crate::smallsignal::{classify_point, SmallSignalError};

/// Stable fraction below which rejection sampling aborts: almost-empty
/// acceptance means the model or the ranges are wrong.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

const DATASET_MAGIC: &[u8; 4] = b"DSDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature block `{0}` is identically zero; cannot fit a scaling factor")]
    DegenerateBlock(&'static str),
    #[error("decoded system is non-physical: {0}")]
    NonPhysical(String),
    #[error("stable fraction {ratio:.2e} after {tried} draws is below {MIN_ACCEPTANCE:.0e}")]
    AcceptanceTooLow { ratio: f64, tried: usize },
    #[error("count {count} is not divisible by {n_configs} configurations")]
    CountNotDivisible { count: usize, n_configs: usize },
    #[error("configurations disagree on {0}; one dataset needs one context")]
    MixedContext(&'static str),
    #[error("dataset file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Net(#[from] NetModelError),
    #[error(transparent)]
    SmallSignal(#[from] SmallSignalError),
}

/// Offsets of the four feature blocks inside a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub n_nodes: usize,
    pub y_mag_offset: usize,
    pub y_ang_offset: usize,
    pub k_f_offset: usize,
    pub k_v_offset: usize,
    pub total: usize,
}

impl FeatureLayout {
    pub fn for_nodes(n_nodes: usize) -> Self {
        let tri = n_nodes * (n_nodes + 1) / 2;
        Self {
            n_nodes,
            y_mag_offset: 0,
            y_ang_offset: tri,
            k_f_offset: 2 * tri,
            k_v_offset: 2 * tri + n_nodes,
            total: 2 * tri + 2 * n_nodes,
        }
    }

    pub fn triangle_len(&self) -> usize {
        self.n_nodes * (self.n_nodes + 1) / 2
    }

    /// Width of the condition vector: the two network blocks.
    pub fn condition_width(&self) -> usize {
        2 * self.triangle_len()
    }
}

/// Per-block maximum absolute values, fixed across all data points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFactors {
    pub y_mag: f64,
    pub y_ang: f64,
    pub k_f: f64,
    pub k_v: f64,
}

impl ScalingFactors {
    pub fn identity() -> Self {
        Self { y_mag: 1.0, y_ang: 1.0, k_f: 1.0, k_v: 1.0 }
    }
}

/// How [`decode`] rebuilds the admittance matrix from generated values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepairMode {
    /// Project onto the physical manifold: negative magnitudes clamp to
    /// zero, and the complex diagonal is recomputed as minus the
    /// off-diagonal row sum, restoring the shunt-free structure (and the
    /// structural zero mode).
    Laplacian,
    /// Keep the generated entries as they are; any negative magnitude is
    /// non-physical.
    Raw,
}

impl RepairMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "laplacian" => Some(Self::Laplacian),
            "raw" => Some(Self::Raw),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Laplacian => "laplacian",
            Self::Raw => "raw",
        }
    }
}

/// Scalar context a feature row does not carry but decoding needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeContext {
    pub rho: f64,
    pub z_base: f64,
    pub omega_c: f64,
    pub f0: f64,
    pub v0: f64,
}

/// One conditioning entry: a configuration id and its scaled network
/// feature blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEntry {
    pub id: String,
    pub vector: Vec<f64>,
}

/// A generated training set of stable configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Scaled feature rows, `layout.total` wide.
    pub rows: Vec<Vec<f64>>,
    /// Per-row index into `conditions`.
    pub condition_idx: Vec<u32>,
    pub conditions: Vec<ConditionEntry>,
    pub layout: FeatureLayout,
    pub scaling: ScalingFactors,
    pub ctx: DecodeContext,
    pub seed: u64,
    pub acceptance_ratio: f64,
}

impl TrainingSet {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Row indices belonging to one condition.
    pub fn rows_of_condition(&self, condition: usize) -> Vec<usize> {
        self.condition_idx
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c as usize == condition).then_some(i))
            .collect()
    }

    pub fn condition_by_id(&self, id: &str) -> Option<usize> {
        self.conditions.iter().position(|c| c.id == id)
    }
}

fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_upper_triangle(values: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = values[k];
            m[(j, i)] = values[k];
            k += 1;
        }
    }
    m
}

/// Raw (unscaled) feature row of one system.
pub fn encode_raw(adm: &AdmittanceModel, droops: &DroopSetting, layout: &FeatureLayout) -> Vec<f64> {
    let mut row = Vec::with_capacity(layout.total);
    row.extend(upper_triangle(&adm.y_mag));
    row.extend(upper_triangle(&adm.y_ang));
    row.extend_from_slice(&droops.k_f_pct);
    row.extend_from_slice(&droops.k_v_pct);
    row
}

/// Scaled feature row: each block divided by its scaling factor.
pub fn encode(
    adm: &AdmittanceModel,
    droops: &DroopSetting,
    layout: &FeatureLayout,
    scaling: &ScalingFactors,
) -> Result<Vec<f64>, DatasetError> {
    if adm.n_nodes() != layout.n_nodes || droops.n_sources() != layout.n_nodes {
        return Err(DatasetError::ShapeMismatch(format!(
            "{} nodes / {} sources vs layout for {}",
            adm.n_nodes(),
            droops.n_sources(),
            layout.n_nodes
        )));
    }
    let mut row = encode_raw(adm, droops, layout);
    scale_row(&mut row, layout, scaling, false);
    Ok(row)
}

fn scale_row(row: &mut [f64], layout: &FeatureLayout, scaling: &ScalingFactors, invert: bool) {
    let tri = layout.triangle_len();
    let blocks = [
        (layout.y_mag_offset, tri, scaling.y_mag),
        (layout.y_ang_offset, tri, scaling.y_ang),
        (layout.k_f_offset, layout.n_nodes, scaling.k_f),
        (layout.k_v_offset, layout.n_nodes, scaling.k_v),
    ];
    for (offset, len, factor) in blocks {
        for v in &mut row[offset..offset + len] {
            if invert {
                *v *= factor;
            } else {
                *v /= factor;
            }
        }
    }
}

/// Invert [`encode`]: multiply the scaling factors back in and rebuild the
/// admittance model and droop setting.
pub fn decode(
    vector: &[f64],
    layout: &FeatureLayout,
    scaling: &ScalingFactors,
    ctx: &DecodeContext,
    repair: RepairMode,
) -> Result<(AdmittanceModel, DroopSetting), DatasetError> {
    if vector.len() != layout.total {
        return Err(DatasetError::ShapeMismatch(format!(
            "row width {} vs layout width {}",
            vector.len(),
            layout.total
        )));
    }
    let mut row = vector.to_vec();
    scale_row(&mut row, layout, scaling, true);

    let n = layout.n_nodes;
    let tri = layout.triangle_len();
    let mut y_mag = from_upper_triangle(&row[layout.y_mag_offset..layout.y_mag_offset + tri], n);
    let y_ang = from_upper_triangle(&row[layout.y_ang_offset..layout.y_ang_offset + tri], n);
    let k_f_pct = row[layout.k_f_offset..layout.k_f_offset + n].to_vec();
    let k_v_pct = row[layout.k_v_offset..layout.k_v_offset + n].to_vec();

    for &k in k_f_pct.iter().chain(&k_v_pct) {
        if !(k >= DROOP_FLOOR_PCT) {
            return Err(DatasetError::NonPhysical(format!(
                "droop {k}% at or below the {DROOP_FLOOR_PCT}% floor"
            )));
        }
    }
    match repair {
        // Generated magnitudes hover around zero on absent branches; the
        // physical projection clamps them rather than rejecting the row.
        RepairMode::Laplacian => y_mag.iter_mut().for_each(|v| *v = v.max(0.0)),
        RepairMode::Raw => {
            if let Some(bad) = y_mag.iter().find(|&&v| !(v >= 0.0)) {
                return Err(DatasetError::NonPhysical(format!(
                    "negative admittance magnitude {bad}"
                )));
            }
        }
    }

    let adm = match repair {
        RepairMode::Raw => {
            let b_mat = DMatrix::from_fn(n, n, |i, j| y_mag[(i, j)] * y_ang[(i, j)].sin());
            AdmittanceModel { y_mag, y_ang, b_mat, rho: ctx.rho, z_base: ctx.z_base }
        }
        RepairMode::Laplacian => {
            let mut y = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        y[(i, j)] = Complex64::from_polar(y_mag[(i, j)], y_ang[(i, j)]);
                    }
                }
            }
            for i in 0..n {
                let off_sum = (0..n)
                    .filter(|&j| j != i)
                    .fold(Complex64::ZERO, |acc, j| acc + y[(i, j)]);
                y[(i, i)] = -off_sum;
            }
            AdmittanceModel::from_complex(&y, ctx.rho, ctx.z_base)
        }
    };

    let droops = DroopSetting {
        k_f_pct,
        k_v_pct,
        omega_c: ctx.omega_c,
        f0: ctx.f0,
        v0: ctx.v0,
        p0: 0.0,
        q0: 0.0,
    };
    Ok((adm, droops))
}

/// Fit the per-block maximum absolute values over raw (unscaled) rows.
/// One shared factor per block across the whole dataset.
pub fn fit_scaling(
    raw_rows: &[Vec<f64>],
    layout: &FeatureLayout,
) -> Result<ScalingFactors, DatasetError> {
    if raw_rows.is_empty() {
        return Err(DatasetError::ShapeMismatch("cannot fit scaling on an empty dataset".into()));
    }
    let tri = layout.triangle_len();
    let max_abs = |offset: usize, len: usize| -> f64 {
        raw_rows
            .iter()
            .flat_map(|row| row[offset..offset + len].iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    };
    let factors = ScalingFactors {
        y_mag: max_abs(layout.y_mag_offset, tri),
        y_ang: max_abs(layout.y_ang_offset, tri),
        k_f: max_abs(layout.k_f_offset, layout.n_nodes),
        k_v: max_abs(layout.k_v_offset, layout.n_nodes),
    };
    for (value, name) in [
        (factors.y_mag, "y_mag"),
        (factors.y_ang, "y_ang"),
        (factors.k_f, "k_f"),
        (factors.k_v, "k_v"),
    ] {
        if value == 0.0 {
            return Err(DatasetError::DegenerateBlock(name));
        }
    }
    Ok(factors)
}

/// Per-source droop sampling rectangles in percent; a degenerate
/// rectangle (lo == hi) pins that source.
#[derive(Debug, Clone, PartialEq)]
pub struct DroopRanges {
    pub kf: Vec<(f64, f64)>,
    pub kv: Vec<(f64, f64)>,
}

impl DroopRanges {
    /// Single-inverter experiment: source 0 varies over [0, 0.4] x [0, 4]
    /// percent, the rest pinned at 0.1 % / 2 %.
    pub fn single_inverter(n: usize) -> Self {
        let mut kf = vec![(0.1, 0.1); n];
        let mut kv = vec![(2.0, 2.0); n];
        kf[0] = (0.0, 0.4);
        kv[0] = (0.0, 4.0);
        Self { kf, kv }
    }

    /// All sources vary: kf in [0.1, 0.5] %, kv in [1, 5] %.
    pub fn all_varied(n: usize) -> Self {
        Self { kf: vec![(0.1, 0.5); n], kv: vec![(1.0, 5.0); n] }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let draw_axis = |rng: &mut R, (lo, hi): (f64, f64)| -> f64 {
            let lo = lo.max(DROOP_FLOOR_PCT);
            if hi <= lo {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        let mut row = Vec::with_capacity(self.kf.len() + self.kv.len());
        for &r in &self.kf {
            row.push(draw_axis(rng, r));
        }
        for &r in &self.kv {
            row.push(draw_axis(rng, r));
        }
        row
    }

    fn validate(&self, n: usize) -> Result<(), DatasetError> {
        if self.kf.len() != n || self.kv.len() != n {
            return Err(DatasetError::ShapeMismatch(format!(
                "ranges cover {} sources, config has {}",
                self.kf.len().min(self.kv.len()),
                n
            )));
        }
        Ok(())
    }
}

const SAMPLE_CHUNK: usize = 512;
const ACCEPTANCE_CHECK_AFTER: usize = 4096;

/// Rejection-sample `count` oracle-stable rows, split equally across the
/// configurations. Candidate draws use disjoint counter-based substreams
/// of the master seed, so the result is independent of the worker count.
pub fn sample_stable_dataset(
    configs: &[NetworkConfig],
    ranges: &DroopRanges,
    count: usize,
    seed: u64,
) -> Result<TrainingSet, DatasetError> {
    if configs.is_empty() {
        return Err(DatasetError::ShapeMismatch("no configurations given".into()));
    }
    if count % configs.len() != 0 {
        return Err(DatasetError::CountNotDivisible { count, n_configs: configs.len() });
    }
    let quota = count / configs.len();
    let n = configs[0].n_nodes;
    let layout = FeatureLayout::for_nodes(n);
    ranges.validate(n)?;

    let admittances: Vec<AdmittanceModel> =
        configs.iter().map(build_admittance).collect::<Result<_, _>>()?;
    for (config, adm) in configs.iter().zip(&admittances) {
        if config.n_nodes != n {
            return Err(DatasetError::MixedContext("node count"));
        }
        if (adm.rho - admittances[0].rho).abs() > 1e-9 {
            return Err(DatasetError::MixedContext("R/X ratio"));
        }
        if config.f0 != configs[0].f0 || config.z_base() != configs[0].z_base() {
            return Err(DatasetError::MixedContext("per-unit base or frequency"));
        }
    }

    let omega_c = crate::netmodel::DEFAULT_OMEGA_C;
    let ctx = DecodeContext {
        rho: admittances[0].rho,
        z_base: configs[0].z_base(),
        omega_c,
        f0: configs[0].f0,
        v0: configs[0].v_base_ll,
    };

    let mut per_config_droops: Vec<Vec<Vec<f64>>> = Vec::with_capacity(configs.len());
    let mut total_tried = 0usize;
    let mut total_accepted = 0usize;
    for (config_idx, adm) in admittances.iter().enumerate() {
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(quota);
        let mut next_candidate = 0u64;
        while accepted.len() < quota {
            let counters: Vec<u64> =
                (next_candidate..next_candidate + SAMPLE_CHUNK as u64).collect();
            next_candidate += SAMPLE_CHUNK as u64;
            let kept: Vec<(u64, Vec<f64>)> = counters
                .par_iter()
                .map(|&c| -> Result<Option<(u64, Vec<f64>)>, DatasetError> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(&[
                        seed,
                        config_idx as u64,
                        c,
                    ]));
                    let row = ranges.draw(&mut rng);
                    let droops = DroopSetting {
                        k_f_pct: row[..n].to_vec(),
                        k_v_pct: row[n..].to_vec(),
                        omega_c,
                        f0: ctx.f0,
                        v0: ctx.v0,
                        p0: 0.0,
                        q0: 0.0,
                    };
                    let verdict = classify_point(adm, &droops)?;
                    Ok(verdict.stable.then_some((c, row)))
                })
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .collect();
            total_tried += SAMPLE_CHUNK;
            total_accepted += kept.len();
            for (_, row) in kept {
                if accepted.len() < quota {
                    accepted.push(row);
                }
            }
            if total_tried >= ACCEPTANCE_CHECK_AFTER {
                let ratio = total_accepted as f64 / total_tried as f64;
                if ratio < MIN_ACCEPTANCE {
                    return Err(DatasetError::AcceptanceTooLow { ratio, tried: total_tried });
                }
            }
        }
        per_config_droops.push(accepted);
    }

    // Raw rows for the whole dataset, then one shared scaling fit.
    let mut raw_rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut condition_idx: Vec<u32> = Vec::with_capacity(count);
    for (config_idx, (adm, droop_rows)) in
        admittances.iter().zip(&per_config_droops).enumerate()
    {
        for row in droop_rows {
            let droops = DroopSetting {
                k_f_pct: row[..n].to_vec(),
                k_v_pct: row[n..].to_vec(),
                omega_c,
                f0: ctx.f0,
                v0: ctx.v0,
                p0: 0.0,
                q0: 0.0,
            };
            raw_rows.push(encode_raw(adm, &droops, &layout));
            condition_idx.push(config_idx as u32);
        }
    }
    let scaling = if count == 0 {
        ScalingFactors::identity()
    } else {
        fit_scaling(&raw_rows, &layout)?
    };
    let mut rows = raw_rows;
    for row in &mut rows {
        scale_row(row, &layout, &scaling, false);
    }

    let conditions: Vec<ConditionEntry> = configs
        .iter()
        .zip(&admittances)
        .map(|(config, adm)| {
            let mut network = upper_triangle(&adm.y_mag);
            network.extend(upper_triangle(&adm.y_ang));
            let tri = layout.triangle_len();
            for v in network[..tri].iter_mut() {
                *v /= scaling.y_mag;
            }
            for v in network[tri..].iter_mut() {
                *v /= scaling.y_ang;
            }
            ConditionEntry { id: config.id.clone(), vector: network }
        })
        .collect();

    let acceptance_ratio =
        if total_tried == 0 { 1.0 } else { total_accepted as f64 / total_tried as f64 };
    Ok(TrainingSet {
        rows,
        condition_idx,
        conditions,
        layout,
        scaling,
        ctx,
        seed,
        acceptance_ratio,
    })
}

impl TrainingSet {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        w.write_all(DATASET_MAGIC)?;
        binio::write_u32(&mut w, DATASET_VERSION)?;
        binio::write_u64(&mut w, self.seed)?;
        binio::write_u32(&mut w, self.layout.n_nodes as u32)?;
        for v in [self.ctx.rho, self.ctx.z_base, self.ctx.omega_c, self.ctx.f0, self.ctx.v0] {
            binio::write_f64(&mut w, v)?;
        }
        binio::write_f64(&mut w, self.acceptance_ratio)?;
        for v in [self.scaling.y_mag, self.scaling.y_ang, self.scaling.k_f, self.scaling.k_v] {
            binio::write_f64(&mut w, v)?;
        }
        binio::write_u32(&mut w, self.conditions.len() as u32)?;
        for c in &self.conditions {
            binio::write_str(&mut w, &c.id)?;
            binio::write_u32(&mut w, c.vector.len() as u32)?;
            binio::write_f64_slice(&mut w, &c.vector)?;
        }
        binio::write_u64(&mut w, self.rows.len() as u64)?;
        binio::write_u32(&mut w, self.layout.total as u32)?;
        for row in &self.rows {
            binio::write_f64_slice(&mut w, row)?;
        }
        for &c in &self.condition_idx {
            binio::write_u32(&mut w, c)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, DatasetError> {
        binio::expect_magic(&mut r, DATASET_MAGIC)?;
        let version = binio::read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported dataset version {version}"),
            )));
        }
        let seed = binio::read_u64(&mut r)?;
        let n_nodes = binio::read_u32(&mut r)? as usize;
        let layout = FeatureLayout::for_nodes(n_nodes);
        let rho = binio::read_f64(&mut r)?;
        let z_base = binio::read_f64(&mut r)?;
        let omega_c = binio::read_f64(&mut r)?;
        let f0 = binio::read_f64(&mut r)?;
        let v0 = binio::read_f64(&mut r)?;
        let acceptance_ratio = binio::read_f64(&mut r)?;
        let scaling = ScalingFactors {
            y_mag: binio::read_f64(&mut r)?,
            y_ang: binio::read_f64(&mut r)?,
            k_f: binio::read_f64(&mut r)?,
            k_v: binio::read_f64(&mut r)?,
        };
        let n_conditions = binio::read_u32(&mut r)? as usize;
        let mut conditions = Vec::with_capacity(n_conditions);
        for _ in 0..n_conditions {
            let id = binio::read_str(&mut r)?;
            let len = binio::read_u32(&mut r)? as usize;
            conditions.push(ConditionEntry { id, vector: binio::read_f64_vec(&mut r, len)? });
        }
        let n_rows = binio::read_u64(&mut r)? as usize;
        let width = binio::read_u32(&mut r)? as usize;
        if width != layout.total {
            return Err(DatasetError::ShapeMismatch(format!(
                "file row width {width} vs layout width {}",
                layout.total
            )));
        }
        let mut rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            rows.push(binio::read_f64_vec(&mut r, width)?);
        }
        let mut condition_idx = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            condition_idx.push(binio::read_u32(&mut r)?);
        }
        Ok(Self {
            rows,
            condition_idx,
            conditions,
            layout,
            scaling,
            ctx: DecodeContext { rho, z_base, omega_c, f0, v0 },
            seed,
            acceptance_ratio,
        })
    }

    pub fn write_to_path(&self, path: &std::path::Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn read_from_path(path: &std::path::Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    /// CSV export of the scaled rows, one named column per feature plus
    /// the condition id.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let n = self.layout.n_nodes;
        let mut header = Vec::with_capacity(self.layout.total + 1);
        for i in 1..=n {
            for j in i..=n {
                header.push(format!("ymag_{i}_{j}"));
            }
        }
        for i in 1..=n {
            for j in i..=n {
                header.push(format!("yang_{i}_{j}"));
            }
        }
        for i in 1..=n {
            header.push(format!("kf{i}"));
        }
        for i in 1..=n {
            header.push(format!("kv{i}"));
        }
        header.push("config_id".into());
        writeln!(w, "{}", header.join(","))?;
        for (row, &cond) in self.rows.iter().zip(&self.condition_idx) {
            let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            fields.push(self.conditions[cond as usize].id.clone());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ring5_system() -> (AdmittanceModel, DroopSetting, FeatureLayout) {
        let adm = build_admittance(&NetworkConfig::ring5()).unwrap();
        let droops = DroopSetting::uniform(5, 0.1, 2.0, 31.41, 50.0, 4160.0);
        (adm, droops, FeatureLayout::for_nodes(5))
    }

    fn ring5_ctx() -> DecodeContext {
        DecodeContext { rho: 1.0, z_base: 17.3056, omega_c: 31.41, f0: 50.0, v0: 4160.0 }
    }

    #[test]
    fn layout_width_is_40_for_five_nodes() {
        let layout = FeatureLayout::for_nodes(5);
        assert_eq!(layout.total, 40);
        assert_eq!(layout.y_ang_offset, 15);
        assert_eq!(layout.k_f_offset, 30);
        assert_eq!(layout.k_v_offset, 35);
        assert_eq!(layout.condition_width(), 30);
    }

    #[test]
    fn identity_scaling_copies_blocks() {
        let layout = FeatureLayout::for_nodes(2);
        let y_mag = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let adm = AdmittanceModel {
            y_mag: y_mag.clone(),
            y_ang: DMatrix::zeros(2, 2),
            b_mat: DMatrix::zeros(2, 2),
            rho: 1.0,
            z_base: 1.0,
        };
        let droops = DroopSetting::uniform(2, 0.1, 2.0, 31.41, 50.0, 1.0);
        let row = encode(&adm, &droops, &layout, &ScalingFactors::identity()).unwrap();
        assert_eq!(&row[..3], &[2.0, 1.0, 2.0]);
    }

    #[test]
    fn block_division_arithmetic() {
        let mut row = vec![2.0, 4.0, -1.0];
        for v in &mut row {
            *v /= 4.0;
        }
        assert_eq!(row, vec![0.5, 1.0, -0.25]);
    }

    #[test]
    fn ring5_scaled_magnitudes_at_most_one() {
        let (adm, droops, layout) = ring5_system();
        let raw = encode_raw(&adm, &droops, &layout);
        let scaling = fit_scaling(&[raw], &layout).unwrap();
        let row = encode(&adm, &droops, &layout, &scaling).unwrap();
        assert!(row.iter().all(|v| v.abs() <= 1.0 + 1e-15));
    }

    #[test]
    fn decode_encode_round_trip_raw() {
        let (adm, droops, layout) = ring5_system();
        let raw = encode_raw(&adm, &droops, &layout);
        let scaling = fit_scaling(&[raw], &layout).unwrap();
        let row = encode(&adm, &droops, &layout, &scaling).unwrap();
        let (adm2, droops2) = decode(&row, &layout, &scaling, &ring5_ctx(), RepairMode::Raw).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_relative_eq!(adm2.y_mag[(i, j)], adm.y_mag[(i, j)], epsilon = 1e-12);
                assert_relative_eq!(adm2.y_ang[(i, j)], adm.y_ang[(i, j)], epsilon = 1e-12);
            }
            assert_relative_eq!(droops2.k_f_pct[i], droops.k_f_pct[i], epsilon = 1e-12);
            assert_relative_eq!(droops2.k_v_pct[i], droops.k_v_pct[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn laplacian_repair_is_identity_on_exact_configuration() {
        let (adm, droops, layout) = ring5_system();
        let raw = encode_raw(&adm, &droops, &layout);
        let scaling = fit_scaling(&[raw], &layout).unwrap();
        let row = encode(&adm, &droops, &layout, &scaling).unwrap();
        let (repaired, _) =
            decode(&row, &layout, &scaling, &ring5_ctx(), RepairMode::Laplacian).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_relative_eq!(repaired.y_mag[(i, j)], adm.y_mag[(i, j)], epsilon = 1e-9);
                assert!((repaired.b_mat[(i, j)] - adm.b_mat[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn laplacian_repair_restores_row_sums() {
        let (adm, droops, layout) = ring5_system();
        let raw = encode_raw(&adm, &droops, &layout);
        let scaling = fit_scaling(&[raw], &layout).unwrap();
        let mut row = encode(&adm, &droops, &layout, &scaling).unwrap();
        // Perturb one diagonal magnitude entry (feature 0 is y_mag[1][1]).
        row[0] += 0.01;
        let (raw_mode, _) = decode(&row, &layout, &scaling, &ring5_ctx(), RepairMode::Raw).unwrap();
        assert!(raw_mode.max_row_sum() > 1e-3);
        let (repaired, _) =
            decode(&row, &layout, &scaling, &ring5_ctx(), RepairMode::Laplacian).unwrap();
        assert!(repaired.max_row_sum() < 1e-9);
    }

    #[test]
    fn single_row_scaling_factor_is_max_abs() {
        let layout = FeatureLayout {
            n_nodes: 1,
            y_mag_offset: 0,
            y_ang_offset: 1,
            k_f_offset: 2,
            k_v_offset: 3,
            total: 4,
        };
        let rows = vec![vec![3.0, -6.0, 0.1, 2.0]];
        let scaling = fit_scaling(&rows, &layout).unwrap();
        assert_eq!(scaling.y_mag, 3.0);
        assert_eq!(scaling.y_ang, 6.0);
    }

    #[test]
    fn shared_factor_across_configurations() {
        let base = NetworkConfig::ring5();
        let cont = crate::netmodel::apply_contingency(&base, 0, 1).unwrap();
        let set = sample_stable_dataset(
            &[base, cont],
            &DroopRanges::single_inverter(5),
            16,
            3,
        )
        .unwrap();
        // One factor per block for the whole dataset, every magnitude <= 1.
        for row in &set.rows {
            assert!(row.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
        assert_eq!(set.conditions.len(), 2);
        assert_eq!(set.rows_of_condition(0).len(), 8);
        assert_eq!(set.rows_of_condition(1).len(), 8);
    }

    #[test]
    fn ring5_y_ang_factor_is_three_quarter_pi() {
        // With rho = 1 the off-diagonal angles are 3 pi / 4, the largest
        // magnitude in the angle block.
        let (adm, droops, layout) = ring5_system();
        let raw = encode_raw(&adm, &droops, &layout);
        let scaling = fit_scaling(&[raw], &layout).unwrap();
        assert_relative_eq!(
            scaling.y_ang,
            3.0 * std::f64::consts::FRAC_PI_4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn degenerate_block_is_rejected() {
        let layout = FeatureLayout {
            n_nodes: 1,
            y_mag_offset: 0,
            y_ang_offset: 1,
            k_f_offset: 2,
            k_v_offset: 3,
            total: 4,
        };
        let rows = vec![vec![3.0, 0.0, 0.1, 2.0]];
        assert!(matches!(
            fit_scaling(&rows, &layout),
            Err(DatasetError::DegenerateBlock("y_ang"))
        ));
    }

    #[test]
    fn sampled_rows_are_stable_under_raw_decode() {
        let set = sample_stable_dataset(
            &[NetworkConfig::ring5()],
            &DroopRanges::single_inverter(5),
            12,
            9,
        )
        .unwrap();
        assert_eq!(set.n_rows(), 12);
        for row in &set.rows {
            let (adm, droops) =
                decode(row, &set.layout, &set.scaling, &set.ctx, RepairMode::Raw).unwrap();
            let verdict = classify_point(&adm, &droops).unwrap();
            assert!(verdict.stable);
        }
        assert!(set.acceptance_ratio > 0.0 && set.acceptance_ratio <= 1.0);
    }

    #[test]
    fn identical_seed_reproduces_identical_dataset() {
        let make = || {
            sample_stable_dataset(
                &[NetworkConfig::ring5()],
                &DroopRanges::single_inverter(5),
                8,
                1234,
            )
            .unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn count_not_divisible_is_an_error() {
        let base = NetworkConfig::ring5();
        let cont = crate::netmodel::apply_contingency(&base, 0, 1).unwrap();
        assert!(matches!(
            sample_stable_dataset(&[base, cont], &DroopRanges::single_inverter(5), 7, 1),
            Err(DatasetError::CountNotDivisible { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let set = sample_stable_dataset(
            &[NetworkConfig::ring5()],
            &DroopRanges::single_inverter(5),
            6,
            5,
        )
        .unwrap();
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        let back = TrainingSet::read(buf.as_slice()).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn csv_export_has_named_columns() {
        let set = sample_stable_dataset(
            &[NetworkConfig::ring5()],
            &DroopRanges::single_inverter(5),
            2,
            5,
        )
        .unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("ymag_1_1,ymag_1_2"));
        assert!(header.ends_with("kv4,kv5,config_id"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn non_physical_rows_are_rejected_on_decode() {
        let (adm, droops, layout) = ring5_system();
        let raw = encode_raw(&adm, &droops, &layout);
        let scaling = fit_scaling(&[raw], &layout).unwrap();
        let row = encode(&adm, &droops, &layout, &scaling).unwrap();

        let mut negative_droop = row.clone();
        negative_droop[layout.k_f_offset] = -0.5;
        assert!(matches!(
            decode(&negative_droop, &layout, &scaling, &ring5_ctx(), RepairMode::Raw),
            Err(DatasetError::NonPhysical(_))
        ));

        let mut negative_mag = row;
        negative_mag[0] = -0.2;
        assert!(matches!(
            decode(&negative_mag, &layout, &scaling, &ring5_ctx(), RepairMode::Raw),
            Err(DatasetError::NonPhysical(_))
        ));
        // The physical projection clamps instead of rejecting.
        let (adm, _) =
            decode(&negative_mag, &layout, &scaling, &ring5_ctx(), RepairMode::Laplacian)
                .unwrap();
        assert!(adm.y_mag.iter().all(|&v| v >= 0.0));
    }
}
