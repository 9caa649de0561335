//! Evaluation and benchmarking: oracle-checked accuracy of generated
//! samples, stability-region coverage, traditional-versus-generative
//! runtime comparison, and the training-scalability experiment.

use rayon::prelude::*;
use std::io::Write;
use std::time::Instant;
use thiserror::Error;

use crate::dataset::{sample_stable_dataset, DatasetError, DroopRanges, RepairMode};
use crate::gan::{generate_samples, GanError, GanHyper, GanSpecs, TrainedModel};
use crate::netmodel::{
    apply_contingency, build_admittance, DroopSetting, NetModelError, NetworkConfig,
};
use crate::oracle::{classify_samples_with_model, sweep, GridSpec, OracleError, StabilityRegion};
use crate::seeding;
use crate::smallsignal::{classify_point, SmallSignalError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Net(#[from] NetModelError),
    #[error(transparent)]
    SmallSignal(#[from] SmallSignalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error("epoch budget {max_epochs} exhausted before thresholds were met: {unmet}")]
    BudgetExhausted { max_epochs: usize, unmet: String },
    #[error("report: {0}")]
    Io(#[from] std::io::Error),
}

/// Oracle-checked accuracy of generated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub n_samples: usize,
    pub n_stable: usize,
    /// Stable fraction; non-physical decodes count as unstable.
    pub accuracy: f64,
    pub n_nonphysical: usize,
    pub repair_mode: RepairMode,
    pub condition_id: Option<String>,
}

impl AccuracyReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "condition_id,repair,n_samples,n_stable,n_nonphysical,accuracy")?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.condition_id.as_deref().unwrap_or("-"),
            self.repair_mode.name(),
            self.n_samples,
            self.n_stable,
            self.n_nonphysical,
            self.accuracy
        )
    }
}

/// Fraction of oracle-stable grid cells hit by at least one generated
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub n_stable_cells: usize,
    pub n_covered_cells: usize,
    pub fraction: f64,
    pub n_samples: usize,
    pub condition_id: Option<String>,
}

/// Wall-clock timing of one region-production method.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub method: &'static str,
    pub config_id: String,
    pub n_samples: usize,
    pub wall_seconds: f64,
    pub thread_count: usize,
}

pub fn write_bench_csv<W: Write>(reports: &[BenchReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,config_id,n_samples,wall_seconds,threads")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.method, r.config_id, r.n_samples, r.wall_seconds, r.thread_count
        )?;
    }
    Ok(())
}

/// Generate `count` samples from the model, decode them with the chosen
/// repair mode and classify every full decoded system with the
/// small-signal oracle. Non-physical rows count as unstable.
pub fn accuracy(
    model: &TrainedModel,
    condition_id: Option<&str>,
    count: usize,
    seed: u64,
    repair: RepairMode,
) -> Result<AccuracyReport, EvalError> {
    let samples = generate_samples(model, condition_id, count, seed, repair)?;
    let flags: Vec<(bool, bool)> = samples
        .systems
        .par_iter()
        .map(|sys| -> Result<(bool, bool), SmallSignalError> {
            match sys {
                Some((adm, droops)) => Ok((classify_point(adm, droops)?.stable, false)),
                None => Ok((false, true)),
            }
        })
        .collect::<Result<_, _>>()?;
    let n_stable = flags.iter().filter(|&&(s, _)| s).count();
    let n_nonphysical = flags.iter().filter(|&&(_, n)| n).count();
    Ok(AccuracyReport {
        n_samples: count,
        n_stable,
        accuracy: if count == 0 { 0.0 } else { n_stable as f64 / count as f64 },
        n_nonphysical,
        repair_mode: repair,
        condition_id: condition_id.map(str::to_string),
    })
}

/// Bin the generated (k_f, k_v) pairs of the grid's target source into the
/// reference region and report the fraction of stable cells hit.
pub fn coverage(
    model: &TrainedModel,
    condition_id: Option<&str>,
    count: usize,
    seed: u64,
    reference: &StabilityRegion,
) -> Result<CoverageReport, EvalError> {
    let samples = generate_samples(model, condition_id, count, seed, RepairMode::Raw)?;
    let pairs = samples.droop_pairs(reference.grid.target_source, model.layout.n_nodes);
    Ok(coverage_of_points(&pairs, reference, condition_id))
}

/// Coverage of explicit (k_f, k_v) points, used directly by experiments.
pub fn coverage_of_points(
    pairs: &[(f64, f64)],
    reference: &StabilityRegion,
    condition_id: Option<&str>,
) -> CoverageReport {
    let (n_kf, n_kv) = reference.grid.resolution;
    let (kf_lo, kf_hi) = reference.grid.kf_range;
    let (kv_lo, kv_hi) = reference.grid.kv_range;
    let mut hit = vec![false; n_kf * n_kv];
    for &(kf, kv) in pairs {
        if kf < kf_lo || kf > kf_hi || kv < kv_lo || kv > kv_hi {
            continue;
        }
        let i = if n_kf == 1 {
            0
        } else {
            (((kf - kf_lo) / (kf_hi - kf_lo) * n_kf as f64) as usize).min(n_kf - 1)
        };
        let j = if n_kv == 1 {
            0
        } else {
            (((kv - kv_lo) / (kv_hi - kv_lo) * n_kv as f64) as usize).min(n_kv - 1)
        };
        hit[i * n_kv + j] = true;
    }
    let mut n_stable_cells = 0;
    let mut n_covered_cells = 0;
    for (idx, &stable) in reference.labels.iter().enumerate() {
        if stable {
            n_stable_cells += 1;
            if hit[idx] {
                n_covered_cells += 1;
            }
        }
    }
    CoverageReport {
        n_stable_cells,
        n_covered_cells,
        fraction: if n_stable_cells == 0 {
            0.0
        } else {
            n_covered_cells as f64 / n_stable_cells as f64
        },
        n_samples: pairs.len(),
        condition_id: condition_id.map(str::to_string),
    }
}

/// Time the traditional oracle classification of `count` uniformly drawn
/// droop vectors against generating `count` samples from the trained
/// model (decode included, classification excluded: the deployed path
/// does not run the oracle). Both sides run on `threads` workers.
pub fn bench_compare(
    config: &NetworkConfig,
    model: &TrainedModel,
    condition_id: Option<&str>,
    count: usize,
    threads: usize,
    seed: u64,
) -> Result<(BenchReport, BenchReport), EvalError> {
    let adm = build_admittance(config)?;
    let ranges = DroopRanges::all_varied(config.n_nodes);
    let template = DroopSetting::uniform(
        config.n_nodes,
        0.1,
        2.0,
        crate::netmodel::DEFAULT_OMEGA_C,
        config.f0,
        config.v_base_ll,
    );

    // Draw the inputs outside the timed region.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeding::mix(&[seed, 100]));
    let rows: Vec<Vec<f64>> =
        (0..count).map(|_| draw_row(&ranges, &mut rng)).collect();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
    let start = Instant::now();
    let batch = pool.install(|| classify_samples_with_model(&adm, &config.id, &template, &rows))?;
    let traditional_seconds = start.elapsed().as_secs_f64();
    drop(batch);

    let start = Instant::now();
    let samples = pool.install(|| generate_samples(model, condition_id, count, seed, RepairMode::Laplacian))?;
    let generative_seconds = start.elapsed().as_secs_f64();
    drop(samples);

    Ok((
        BenchReport {
            method: "traditional",
            config_id: config.id.clone(),
            n_samples: count,
            wall_seconds: traditional_seconds,
            thread_count: threads,
        },
        BenchReport {
            method: "generative",
            config_id: config.id.clone(),
            n_samples: count,
            wall_seconds: generative_seconds,
            thread_count: threads,
        },
    ))
}

fn draw_row<R: rand::Rng>(ranges: &DroopRanges, rng: &mut R) -> Vec<f64> {
    let mut row = Vec::with_capacity(ranges.kf.len() + ranges.kv.len());
    for &(lo, hi) in &ranges.kf {
        row.push(if hi <= lo { lo } else { rng.random_range(lo..hi) });
    }
    for &(lo, hi) in &ranges.kv {
        row.push(if hi <= lo { lo } else { rng.random_range(lo..hi) });
    }
    row
}

/// One row of the scalability table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalabilityRow {
    pub n_configs: usize,
    pub epochs_to_95pct: usize,
    pub epochs_to_populated: usize,
    pub final_accuracy: f64,
    pub final_coverage: f64,
}

pub fn write_scalability_csv<W: Write>(
    rows: &[ScalabilityRow],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "n_configs,epochs_to_95pct,epochs_to_populated,final_accuracy,final_coverage")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.n_configs, r.epochs_to_95pct, r.epochs_to_populated, r.final_accuracy, r.final_coverage
        )?;
    }
    Ok(())
}

/// Settings for [`scalability_experiment`].
#[derive(Debug, Clone)]
pub struct ScalabilitySettings {
    /// Rows per configuration in each training set.
    pub rows_per_config: usize,
    /// Accuracy threshold (default 0.95) and the sample count it is
    /// estimated on at each checkpoint.
    pub accuracy_threshold: f64,
    pub accuracy_samples: usize,
    /// Coverage threshold (default 0.9 of stable cells) and the sample
    /// count used for the coverage scatter.
    pub coverage_threshold: f64,
    pub coverage_samples: usize,
    /// Reference-region grid resolution.
    pub grid_resolution: (usize, usize),
}

impl Default for ScalabilitySettings {
    fn default() -> Self {
        Self {
            rows_per_config: 4000,
            accuracy_threshold: 0.95,
            accuracy_samples: 1000,
            coverage_threshold: 0.9,
            coverage_samples: 20000,
            grid_resolution: (100, 100),
        }
    }
}

/// Train one conditional model per configuration count and record the
/// first checkpoint epochs at which generated-sample accuracy and
/// stability-region coverage cross their thresholds.
///
/// Configuration counts index into ring5 plus its three feeder-loss
/// contingencies. Checkpoints are the stopping-criterion evaluations, so
/// thresholds are tested every `hyper.eval_every` epochs.
pub fn scalability_experiment(
    config_counts: &[usize],
    hyper: &GanHyper,
    specs: &GanSpecs,
    settings: &ScalabilitySettings,
) -> Result<Vec<ScalabilityRow>, EvalError> {
    let base = NetworkConfig::ring5();
    let all_configs = vec![
        base.clone(),
        apply_contingency(&base, 0, 1)?,
        apply_contingency(&base, 1, 2)?,
        apply_contingency(&base, 2, 3)?,
    ];
    let mut rows = Vec::new();
    for &n_configs in config_counts {
        let configs = &all_configs[..n_configs.min(all_configs.len())];
        let row = scalability_row(configs, hyper, specs, settings)?;
        rows.push(row);
    }
    Ok(rows)
}

fn scalability_row(
    configs: &[NetworkConfig],
    hyper: &GanHyper,
    specs: &GanSpecs,
    settings: &ScalabilitySettings,
) -> Result<ScalabilityRow, EvalError> {
    let n = configs[0].n_nodes;
    let data = sample_stable_dataset(
        configs,
        &DroopRanges::single_inverter(n),
        settings.rows_per_config * configs.len(),
        hyper.seed,
    )?;
    let references: Vec<StabilityRegion> = configs
        .iter()
        .map(|config| {
            sweep(config, &GridSpec::paper_single_inverter(settings.grid_resolution))
        })
        .collect::<Result<_, _>>()?;

    // Accuracy and coverage are measured on model snapshots as training
    // progresses; training runs until both thresholds are met (or the
    // epoch budget runs out).
    let mut hyper_full = *hyper;
    hyper_full.run_to_max = true;
    let mut epochs_to_95pct = None;
    let mut epochs_to_populated = None;
    let mut last_accuracy = 0.0f64;
    let mut last_coverage = 0.0f64;
    let base_seed = hyper.seed;
    let settings = settings.clone();
    let configs_owned = configs.to_vec();
    let references_owned = references;
    let mut monitor = |snapshot: &TrainedModel,
                       cp: &crate::gan::DcCheckpoint|
     -> Result<bool, GanError> {
        let eval_seed = seeding::mix(&[base_seed, 17, cp.epoch as u64]);
        let mut worst_accuracy = f64::INFINITY;
        let mut worst_coverage = f64::INFINITY;
        for (config, reference) in configs_owned.iter().zip(&references_owned) {
            if epochs_to_95pct.is_none() {
                let report = accuracy(
                    snapshot,
                    Some(&config.id),
                    settings.accuracy_samples,
                    eval_seed,
                    RepairMode::Laplacian,
                )
                .map_err(eval_to_gan)?;
                worst_accuracy = worst_accuracy.min(report.accuracy);
            }
            if epochs_to_populated.is_none() {
                let cov = coverage(
                    snapshot,
                    Some(&config.id),
                    settings.coverage_samples,
                    eval_seed ^ 1,
                    reference,
                )
                .map_err(eval_to_gan)?;
                worst_coverage = worst_coverage.min(cov.fraction);
            }
        }
        if epochs_to_95pct.is_none() {
            last_accuracy = worst_accuracy;
            if worst_accuracy >= settings.accuracy_threshold {
                epochs_to_95pct = Some(cp.epoch);
            }
        }
        if epochs_to_populated.is_none() {
            last_coverage = worst_coverage;
            if worst_coverage >= settings.coverage_threshold {
                epochs_to_populated = Some(cp.epoch);
            }
        }
        Ok(epochs_to_95pct.is_some() && epochs_to_populated.is_some())
    };
    crate::gan::train_cgan_monitored(&data, &hyper_full, specs, &mut monitor)?;

    match (epochs_to_95pct, epochs_to_populated) {
        (Some(a), Some(p)) => Ok(ScalabilityRow {
            n_configs: configs.len(),
            epochs_to_95pct: a,
            epochs_to_populated: p,
            final_accuracy: last_accuracy,
            final_coverage: last_coverage,
        }),
        (a, p) => Err(EvalError::BudgetExhausted {
            max_epochs: hyper.max_epochs,
            unmet: format!(
                "accuracy {a:?} / coverage {p:?} (last worst: {last_accuracy:.3} / {last_coverage:.3})"
            ),
        }),
    }
}

// Monitor closures run inside the training loop, whose error type is
// GanError; evaluation errors are carried through as opaque IO errors.
fn eval_to_gan(e: EvalError) -> GanError {
    match e {
        EvalError::Gan(g) => g,
        other => GanError::Io(std::io::Error::other(other.to_string())),
    }
}

/// Dependency-free SVG scatter of a stability region with generated
/// points; misclassified points drawn in a third color.
pub fn write_region_svg<W: Write>(
    mut w: W,
    region: &StabilityRegion,
    generated: &[(f64, f64)],
    misclassified: &[(f64, f64)],
) -> std::io::Result<()> {
    const WIDTH: f64 = 640.0;
    const HEIGHT: f64 = 480.0;
    const MARGIN: f64 = 48.0;
    let (kf_lo, kf_hi) = region.grid.kf_range;
    let (kv_lo, kv_hi) = region.grid.kv_range;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_of = |kf: f64| MARGIN + (kf - kf_lo) / (kf_hi - kf_lo).max(1e-30) * plot_w;
    let y_of = |kv: f64| HEIGHT - MARGIN - (kv - kv_lo) / (kv_hi - kv_lo).max(1e-30) * plot_h;

    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#)?;
    let (n_kf, n_kv) = region.grid.resolution;
    let cell_w = plot_w / n_kf as f64;
    let cell_h = plot_h / n_kv as f64;
    for i in 0..n_kf {
        for j in 0..n_kv {
            if region.label(i, j) {
                let x = MARGIN + i as f64 * cell_w;
                let y = HEIGHT - MARGIN - (j + 1) as f64 * cell_h;
                writeln!(
                    w,
                    r##"<rect x="{x:.2}" y="{y:.2}" width="{cell_w:.2}" height="{cell_h:.2}" fill="#9ec2e5"/>"##
                )?;
            }
        }
    }
    for &(kf, kv) in generated {
        if kf < kf_lo || kf > kf_hi || kv < kv_lo || kv > kv_hi {
            continue;
        }
        writeln!(
            w,
            r##"<circle cx="{:.2}" cy="{:.2}" r="1.4" fill="#d64545" fill-opacity="0.5"/>"##,
            x_of(kf),
            y_of(kv)
        )?;
    }
    for &(kf, kv) in misclassified {
        if kf < kf_lo || kf > kf_hi || kv < kv_lo || kv > kv_hi {
            continue;
        }
        writeln!(
            w,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="none" stroke="#2e9e4f" stroke-width="1.2"/>"##,
            x_of(kf),
            y_of(kv)
        )?;
    }
    // Axes and range labels.
    writeln!(
        w,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    )?;
    writeln!(
        w,
        r#"<text x="{:.0}" y="{:.0}" font-size="13" text-anchor="middle">kf_pct ({kf_lo} to {kf_hi})</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    )?;
    writeln!(
        w,
        r#"<text x="14" y="{:.0}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.0})">kv_pct ({kv_lo} to {kv_hi})</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )?;
    writeln!(w, "</svg>")
}
