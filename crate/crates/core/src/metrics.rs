//! Geometry-level scores for calibration traces on synthetic samples, and
//! their aggregation over a corpus.

use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{calibrate, CalibrationConfig, CalibrationTrace, Mode};
use crate::geometry::{base_fiducials, estimate_tps, FiducialSet, GeometryError, TpsTransform};
use crate::localizers::LocalizerSpec;
use crate::raster::Image;
use crate::sampler::warp;
use crate::synth::{load_manifest, load_sample, RibbonSample, SynthError};

/// Reported when two images are identical to within rounding.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("fiducial sets differ in size: {0} vs {1}")]
    MismatchedK(usize, usize),
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("trace has no steps")]
    EmptyTrace,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn fiducial_rmse(a: &FiducialSet, b: &FiducialSet) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::MismatchedK(a.len(), b.len()));
    }
    let sum: f64 = a.points().iter().zip(b.points()).map(|(p, q)| {
        let d = p.distance(*q);
        d * d
    }).sum();
    Ok((sum / a.len() as f64).sqrt())
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { 10.0 * (1.0 / mse).log10() })
}

/// The transform that rectifies `sample` exactly, on the trace's base points.
fn gt_transform(trace: &CalibrationTrace, sample: &RibbonSample) -> Result<TpsTransform, MetricsError> {
    let base = base_fiducials(trace.config.k, trace.config.margin)?;
    if base.len() != sample.gt_fiducials.len() {
        return Err(MetricsError::MismatchedK(base.len(), sample.gt_fiducials.len()));
    }
    Ok(estimate_tps(&base, &sample.gt_fiducials)?)
}

fn foreground(img: &Image) -> impl Iterator<Item = bool> + '_ {
    img.data().iter().map(|v| *v >= 0.5)
}

/// Fraction of the ground-truth rectified ribbon that the trace's final output
/// still contains. The mask goes through exactly the resampling chain the image
/// did, so pixels a direct-mode step cropped stay lost.
pub fn mask_coverage(trace: &CalibrationTrace, sample: &RibbonSample) -> Result<f64, MetricsError> {
    let recovered = trace.replay(&sample.gt_mask).ok_or(MetricsError::EmptyTrace)?;
    let (h, w) = (recovered.height(), recovered.width());
    let reference = warp(&sample.gt_mask, &gt_transform(trace, sample)?, h, w);
    let (mut both, mut total) = (0usize, 0usize);
    for (r, g) in foreground(&recovered).zip(foreground(&reference)) {
        if g {
            total += 1;
            both += r as usize;
        }
    }
    Ok(if total == 0 { 1.0 } else { both as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub mode: Mode,
    pub iterations: usize,
    /// RMSE of the original-frame fiducials against ground truth; entry 0 is
    /// the starting point `C`, entry `t` follows step `t`.
    pub rmse: Vec<f64>,
    /// PSNR of each step's output against the ground-truth rectification at
    /// the same size.
    pub psnr: Vec<f64>,
    pub coverage: f64,
}

impl SampleReport {
    pub fn final_rmse(&self) -> f64 {
        self.rmse[self.rmse.len() - 1]
    }

    pub fn final_psnr(&self) -> f64 {
        self.psnr[self.psnr.len() - 1]
    }
}

pub fn sample_report(trace: &CalibrationTrace, sample: &RibbonSample) -> Result<SampleReport, MetricsError> {
    if trace.steps.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let gt = gt_transform(trace, sample)?;
    let mut rmse = vec![fiducial_rmse(gt.base(), &sample.gt_fiducials)?];
    let mut psnrs = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        rmse.push(fiducial_rmse(&step.fiducials_ori, &sample.gt_fiducials)?);
        let (h, w) = (step.output.height(), step.output.width());
        psnrs.push(psnr(&step.output, &warp(&sample.image, &gt, h, w))?);
    }
    Ok(SampleReport {
        mode: trace.config.mode,
        iterations: trace.steps.len(),
        rmse,
        psnr: psnrs,
        coverage: mask_coverage(trace, sample)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub step: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sidecar: PathBuf,
    #[serde(flatten)]
    pub outcome: SampleOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOutcome {
    Report(SampleReport),
    Failure(SampleFailure),
}

/// Mean and population standard deviation. NaN when empty.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates for one `(mode, iterations)` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub mode: Mode,
    pub iters: usize,
    pub n: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub failures: usize,
    /// Mean RMSE after each step, starting with the initial fiducials.
    pub rmse_by_step: Vec<f64>,
    /// Mean PSNR of each step's output.
    pub psnr_by_step: Vec<f64>,
    pub samples: Vec<SampleResult>,
}

impl ConfigSummary {
    pub fn aggregate(mode: Mode, iters: usize, samples: Vec<SampleResult>) -> Self {
        let reports: Vec<&SampleReport> = samples
            .iter()
            .filter_map(|s| match &s.outcome {
                SampleOutcome::Report(r) => Some(r),
                SampleOutcome::Failure(_) => None,
            })
            .collect();
        let column = |f: &dyn Fn(&SampleReport) -> f64| -> Vec<f64> { reports.iter().map(|r| f(r)).collect() };
        let (rmse_mean, rmse_std) = mean_std(&column(&|r| r.final_rmse()));
        let (psnr_mean, psnr_std) = mean_std(&column(&|r| r.final_psnr()));
        let (coverage_mean, coverage_std) = mean_std(&column(&|r| r.coverage));
        let rmse_by_step = (0..=iters).map(|t| mean_std(&column(&|r| r.rmse[t])).0).collect();
        let psnr_by_step = (0..iters).map(|t| mean_std(&column(&|r| r.psnr[t])).0).collect();
        ConfigSummary {
            mode,
            iters,
            n: reports.len(),
            rmse_mean,
            rmse_std,
            psnr_mean,
            psnr_std,
            coverage_mean,
            coverage_std,
            failures: samples.len() - reports.len(),
            rmse_by_step,
            psnr_by_step,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub manifest: PathBuf,
    pub localizer: String,
    pub rows: Vec<ConfigSummary>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    mode: String,
    iters: usize,
    n: usize,
    rmse_mean: f64,
    rmse_std: f64,
    psnr_mean: f64,
    psnr_std: f64,
    coverage_mean: f64,
    coverage_std: f64,
    failures: usize,
}

impl CorpusReport {
    pub fn row(&self, mode: Mode, iters: usize) -> Option<&ConfigSummary> {
        self.rows.iter().find(|r| r.mode == mode && r.iters == iters)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                mode: r.mode.to_string(),
                iters: r.iters,
                n: r.n,
                rmse_mean: r.rmse_mean,
                rmse_std: r.rmse_std,
                psnr_mean: r.psnr_mean,
                psnr_std: r.psnr_std,
                coverage_mean: r.coverage_mean,
                coverage_std: r.coverage_std,
                failures: r.failures,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), MetricsError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| MetricsError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv_path = dir.join("report.csv");
        let json_path = dir.join("report.json");
        std::fs::write(&csv_path, self.to_csv()).map_err(io_err(&csv_path))?;
        std::fs::write(&json_path, self.to_json()).map_err(io_err(&json_path))?;
        Ok((csv_path, json_path))
    }
}

pub fn evaluate_sample(
    sample: &RibbonSample,
    spec: &LocalizerSpec,
    config: &CalibrationConfig,
) -> Result<SampleReport, SampleFailure> {
    let fail = |step, error: String| SampleFailure { step, error };
    let localizer = spec.build(Some(&sample.gt_fiducials)).map_err(|e| fail(None, e.to_string()))?;
    let trace = calibrate(&sample.image, localizer.as_ref(), config)
        .map_err(|f| fail(f.error.step(), f.error.to_string()))?;
    sample_report(&trace, sample).map_err(|e| fail(None, e.to_string()))
}

/// Calibrates every sample under every `(mode, iterations)` pair. Rows and
/// samples come out in input order whatever the thread count.
pub fn eval_samples(
    samples: &[(PathBuf, RibbonSample)],
    spec: &LocalizerSpec,
    base: &CalibrationConfig,
    configs: &[(Mode, usize)],
    jobs: usize,
) -> Result<Vec<ConfigSummary>, MetricsError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| MetricsError::InvalidRequest(e.to_string()))?;
    let mut rows = Vec::with_capacity(configs.len());
    for &(mode, iterations) in configs {
        let config = CalibrationConfig {
            mode,
            iterations,
            ..base.clone()
        };
        config.validate().map_err(|e| MetricsError::InvalidRequest(e.to_string()))?;
        let results: Vec<SampleResult> = pool.install(|| {
            samples
                .par_iter()
                .map(|(path, sample)| SampleResult {
                    sidecar: path.clone(),
                    outcome: match evaluate_sample(sample, spec, &config) {
                        Ok(r) => SampleOutcome::Report(r),
                        Err(f) => {
                            log::warn!("{}: {}", path.display(), f.error);
                            SampleOutcome::Failure(f)
                        }
                    },
                })
                .collect()
        });
        rows.push(ConfigSummary::aggregate(mode, iterations, results));
    }
    Ok(rows)
}

/// `jobs = 0` uses every logical core.
pub fn eval_corpus(
    manifest: &Path,
    spec: &LocalizerSpec,
    base: &CalibrationConfig,
    configs: &[(Mode, usize)],
    jobs: usize,
) -> Result<CorpusReport, MetricsError> {
    if configs.is_empty() {
        return Err(MetricsError::InvalidRequest("no configurations to evaluate".into()));
    }
    let (_, sidecars) = load_manifest(manifest)?;
    let samples = sidecars
        .into_iter()
        .map(|p| load_sample(&p).map(|(_, s)| (p, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = eval_samples(&samples, spec, base, configs, jobs)?;
    Ok(CorpusReport {
        manifest: manifest.to_path_buf(),
        localizer: spec.to_string(),
        rows,
    })
}
