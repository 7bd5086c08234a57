//! The recurrent calibration loop.
//!
//! Every step asks a localizer for offsets against the canonical base points
//! `C`, turns them into calibrated-frame fiducials, and resamples. In
//! fiducial-refinement mode the fiducials are carried back to the original
//! frame through the previous transform and the original image is resampled;
//! in direct mode each step resamples the previous output instead.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{base_fiducials, FiducialSet, GeometryError, Point2, TpsSystem, TpsTransform};
use crate::localizers::{LocalizeError, Localizer};
use crate::raster::Image;
use crate::sampler::warp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[serde(alias = "fp-refine")]
    FpRefine,
    Direct,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FpRefine => "fp-refine",
            Mode::Direct => "direct",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp-refine" | "fp_refine" => Ok(Mode::FpRefine),
            "direct" => Ok(Mode::Direct),
            other => Err(format!("unknown mode '{other}' (expected fp-refine or direct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub iterations: usize,
    pub mode: Mode,
    pub intermediate_size: (usize, usize),
    pub final_size: (usize, usize),
    pub localizer_input_size: (usize, usize),
    pub k: usize,
    pub margin: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            mode: Mode::FpRefine,
            intermediate_size: (64, 256),
            final_size: (32, 100),
            localizer_input_size: (32, 64),
            k: 20,
            margin: 0.0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |msg: String| Err(CalibrationError::InvalidConfig(msg));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        for (name, (h, w)) in [
            ("intermediate_size", self.intermediate_size),
            ("final_size", self.final_size),
            ("localizer_input_size", self.localizer_input_size),
        ] {
            if h < 2 || w < 2 {
                return bad(format!("{name} must be at least 2x2, got {h}x{w}"));
            }
        }
        base_fiducials(self.k, self.margin).map_err(|e| CalibrationError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Output size of step `t` (1-based).
    pub fn output_size(&self, t: usize) -> (usize, usize) {
        if t == self.iterations {
            self.final_size
        } else {
            self.intermediate_size
        }
    }
}

/// Which raster a step resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Previous,
}

#[derive(Debug, Clone)]
pub struct CalibrationStep {
    pub offsets: Vec<Point2>,
    pub fiducials_cal: FiducialSet,
    pub fiducials_ori: FiducialSet,
    pub transform: TpsTransform,
    pub source: Source,
    pub output: Image,
}

/// What a localizer sees besides the image.
pub struct StepContext<'a> {
    /// 1-based step index.
    pub step: usize,
    pub base: &'a FiducialSet,
    /// Transforms carrying the current calibrated frame back to the original,
    /// outermost first: a point maps through the last entry first.
    pub to_original: &'a [TpsTransform],
    pub mode: Mode,
}

impl StepContext<'_> {
    pub fn to_original_point(&self, p: Point2) -> Point2 {
        self.to_original.iter().rev().fold(p, |q, t| t.map_point(q))
    }

    /// Inverse of [`to_original_point`](Self::to_original_point). `index`
    /// selects the fiducial whose targets seed each Newton solve.
    pub fn from_original_point(&self, p: Point2, index: usize) -> Result<Point2, GeometryError> {
        self.to_original.iter().try_fold(p, |q, t| {
            let seed = t.base().points()[index] + (q - t.targets().points()[index]);
            t.invert(q, Some(seed))
        })
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationTrace {
    pub original: Image,
    pub steps: Vec<CalibrationStep>,
    pub config: CalibrationConfig,
}

impl CalibrationTrace {
    pub fn final_output(&self) -> Option<&Image> {
        self.steps.last().map(|s| &s.output)
    }

    /// Applies the trace's sequence of warps to another raster on the
    /// original grid, e.g. a foreground mask.
    pub fn replay(&self, raster: &Image) -> Option<Image> {
        let mut current: Option<Image> = None;
        for (t, step) in self.steps.iter().enumerate() {
            let (h, w) = self.config.output_size(t + 1);
            let src = match step.source {
                Source::Original => raster,
                Source::Previous => current.as_ref()?,
            };
            current = Some(warp(src, &step.transform, h, w));
        }
        current
    }

    /// Transforms that map the frame of the latest output back to the original,
    /// in the order [`StepContext::to_original`] expects.
    pub fn to_original_chain(&self) -> Vec<TpsTransform> {
        let mut chain = Vec::new();
        for step in self.steps.iter().rev() {
            chain.push(step.transform.clone());
            if step.source == Source::Original {
                break;
            }
        }
        chain.reverse();
        chain
    }

    pub fn record(&self, output_files: &[String]) -> TraceRecord {
        TraceRecord {
            config: self.config.clone(),
            steps: self
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| StepRecord {
                    offsets: s.offsets.iter().flat_map(|p| [p.x, p.y]).collect(),
                    fiducials_cal: s.fiducials_cal.points().to_vec(),
                    fiducials_ori: s.fiducials_ori.points().to_vec(),
                    output_file: output_files.get(i).cloned().unwrap_or_default(),
                })
                .collect(),
        }
    }
}

/// Serialized trace: per-step offsets (flattened `x, y` pairs) and fiducials in both frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub config: CalibrationConfig,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub offsets: Vec<f64>,
    pub fiducials_cal: Vec<Point2>,
    pub fiducials_ori: Vec<Point2>,
    pub output_file: String,
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("step {step}: localizer failed: {source}")]
    Localizer {
        step: usize,
        #[source]
        source: LocalizeError,
    },
    #[error("step {step}: localizer returned {found} offsets, expected {expected}")]
    OffsetCount { step: usize, expected: usize, found: usize },
    #[error("step {step}: localizer returned non-finite offsets")]
    NonFinite { step: usize },
    #[error("step {step}: degenerate fiducials: {source}")]
    DegenerateFiducials {
        step: usize,
        #[source]
        source: GeometryError,
    },
}

impl CalibrationError {
    pub fn step(&self) -> Option<usize> {
        match self {
            CalibrationError::InvalidConfig(_) => None,
            CalibrationError::Localizer { step, .. }
            | CalibrationError::OffsetCount { step, .. }
            | CalibrationError::NonFinite { step }
            | CalibrationError::DegenerateFiducials { step, .. } => Some(*step),
        }
    }
}

/// A failed calibration together with the steps completed before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct CalibrationFailure {
    #[source]
    pub error: CalibrationError,
    pub trace: CalibrationTrace,
}

/// Area-averaged downsample handed to the localizer.
pub fn localizer_input(image: &Image, config: &CalibrationConfig) -> Image {
    let (h, w) = config.localizer_input_size;
    image.resize_area(h, w).expect("sizes validated with the config")
}

/// Offsets for the next step, validated for count and finiteness.
pub fn localize(
    localizer: &dyn Localizer,
    image: &Image,
    ctx: &StepContext,
    config: &CalibrationConfig,
) -> Result<Vec<Point2>, CalibrationError> {
    let small = localizer_input(image, config);
    let offsets = localizer
        .offsets(&small, ctx)
        .map_err(|source| CalibrationError::Localizer { step: ctx.step, source })?;
    if offsets.len() != ctx.base.len() {
        return Err(CalibrationError::OffsetCount {
            step: ctx.step,
            expected: ctx.base.len(),
            found: offsets.len(),
        });
    }
    if !offsets.iter().all(Point2::is_finite) {
        return Err(CalibrationError::NonFinite { step: ctx.step });
    }
    Ok(offsets)
}

/// Runs one step on top of `trace`, which holds the steps so far.
pub fn refine_step(
    trace: &CalibrationTrace,
    system: &Arc<TpsSystem>,
    localizer: &dyn Localizer,
) -> Result<CalibrationStep, CalibrationError> {
    let config = &trace.config;
    let t = trace.steps.len() + 1;
    let base = system.base();
    let chain = trace.to_original_chain();
    let ctx = StepContext {
        step: t,
        base,
        to_original: &chain,
        mode: config.mode,
    };
    let current = trace.final_output().unwrap_or(&trace.original);
    let offsets = localize(localizer, current, &ctx, config)?;
    let degenerate = |source| CalibrationError::DegenerateFiducials { step: t, source };

    // The calibrated frame is always remapped to canonical C, so offsets apply to C.
    let fiducials_cal = base.offset_by(&offsets).map_err(degenerate)?;
    let carried = || FiducialSet::new(fiducials_cal.points().iter().map(|p| ctx.to_original_point(*p)).collect());
    let (fiducials_ori, fit_to, source, src_image) = match (t, config.mode) {
        (1, _) => (fiducials_cal.clone(), fiducials_cal.clone(), Source::Original, &trace.original),
        (_, Mode::FpRefine) => {
            let ori = carried().map_err(degenerate)?;
            (ori.clone(), ori, Source::Original, &trace.original)
        }
        (_, Mode::Direct) => (carried().map_err(degenerate)?, fiducials_cal.clone(), Source::Previous, current),
    };
    let transform = system.estimate(&fit_to).map_err(degenerate)?;
    let (h, w) = config.output_size(t);
    let output = warp(src_image, &transform, h, w);
    Ok(CalibrationStep {
        offsets,
        fiducials_cal,
        fiducials_ori,
        transform,
        source,
        output,
    })
}

pub fn calibrate(
    original: &Image,
    localizer: &dyn Localizer,
    config: &CalibrationConfig,
) -> Result<CalibrationTrace, Box<CalibrationFailure>> {
    let mut trace = CalibrationTrace {
        original: original.clone(),
        steps: Vec::with_capacity(config.iterations),
        config: config.clone(),
    };
    let fail = |error, trace| Box::new(CalibrationFailure { error, trace });
    if let Err(e) = config.validate() {
        return Err(fail(e, trace));
    }
    let system = match base_fiducials(config.k, config.margin).and_then(TpsSystem::new) {
        Ok(s) => s,
        Err(source) => return Err(fail(CalibrationError::DegenerateFiducials { step: 0, source }, trace)),
    };
    for _ in 0..config.iterations {
        match refine_step(&trace, &system, localizer) {
            Ok(step) => {
                log::debug!("step {} done", trace.steps.len() + 1);
                trace.steps.push(step);
            }
            Err(e) => return Err(fail(e, trace)),
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizers::{LocalizeError, ZeroLocalizer};

    /// Bends the fiducials a little more each step.
    struct Wobble;

    impl Localizer for Wobble {
        fn offsets(&self, _input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
            let s = 0.03 * ctx.step as f64;
            Ok(ctx
                .base
                .points()
                .iter()
                .map(|p| Point2::new(s * p.y, s * (2.0 * p.x).sin()))
                .collect())
        }
    }

    /// Fails from the given step on.
    struct FailsAt(usize);

    impl Localizer for FailsAt {
        fn offsets(&self, input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
            if ctx.step >= self.0 {
                Err(LocalizeError::NoForeground { fraction: 0.0 })
            } else {
                Wobble.offsets(input, ctx)
            }
        }
    }

    fn texture() -> Image {
        Image::from_fn(64, 256, |r, c| 0.5 + 0.4 * ((r as f64 / 5.0).sin() * (c as f64 / 9.0).cos())).unwrap()
    }

    fn config(iterations: usize, mode: Mode) -> CalibrationConfig {
        CalibrationConfig {
            iterations,
            mode,
            ..CalibrationConfig::default()
        }
    }

    #[test]
    fn zero_offsets_are_a_fixed_point() {
        let img = texture();
        let trace = calibrate(&img, &ZeroLocalizer, &config(3, Mode::FpRefine)).unwrap();
        let base = base_fiducials(20, 0.0).unwrap();
        for step in &trace.steps {
            for (p, c) in step.fiducials_ori.points().iter().zip(base.points()) {
                assert!(p.distance(*c) <= 1e-12);
            }
            assert_eq!(step.source, Source::Original);
        }
        assert_eq!(trace.steps[0].output, img);
        assert_eq!(trace.steps[2].output.shape(), (32, 100, 1));
    }

    #[test]
    fn one_iteration_modes_agree_bitwise() {
        let img = texture();
        let a = calibrate(&img, &Wobble, &config(1, Mode::FpRefine)).unwrap();
        let b = calibrate(&img, &Wobble, &config(1, Mode::Direct)).unwrap();
        assert_eq!(a.steps[0].output, b.steps[0].output);
        assert_eq!(a.steps[0].fiducials_ori, b.steps[0].fiducials_ori);
    }

    #[test]
    fn fp_refine_carries_fiducials_through_the_previous_transform() {
        let trace = calibrate(&texture(), &Wobble, &config(3, Mode::FpRefine)).unwrap();
        let base = base_fiducials(20, 0.0).unwrap();
        for t in 1..3 {
            let prev = &trace.steps[t - 1].transform;
            let step = &trace.steps[t];
            for ((cal, ori), (c, o)) in step
                .fiducials_cal
                .points()
                .iter()
                .zip(step.fiducials_ori.points())
                .zip(base.points().iter().zip(&step.offsets))
            {
                assert!(prev.map_point(*cal).distance(*ori) <= 1e-12);
                assert_eq!(*cal, *c + *o);
            }
            assert_eq!(step.source, Source::Original);
            assert_eq!(step.transform.targets(), &step.fiducials_ori);
        }
    }

    #[test]
    fn direct_mode_chains_resampling() {
        let img = texture();
        let trace = calibrate(&img, &Wobble, &config(3, Mode::Direct)).unwrap();
        assert_eq!(trace.steps[0].source, Source::Original);
        assert_eq!(trace.steps[1].source, Source::Previous);
        let step2 = warp(&trace.steps[0].output, &trace.steps[1].transform, 64, 256);
        assert_eq!(step2, trace.steps[1].output);
        assert_eq!(trace.replay(&img).unwrap(), trace.steps[2].output);
        assert_eq!(trace.steps[2].transform.targets(), &trace.steps[2].fiducials_cal);
    }

    #[test]
    fn calibration_is_deterministic() {
        let img = texture();
        let a = calibrate(&img, &Wobble, &config(3, Mode::FpRefine)).unwrap();
        let b = calibrate(&img, &Wobble, &config(3, Mode::FpRefine)).unwrap();
        assert_eq!(a.record(&[]), b.record(&[]));
        assert_eq!(a.final_output(), b.final_output());
    }

    #[test]
    fn failure_keeps_completed_steps() {
        let err = calibrate(&texture(), &FailsAt(3), &config(3, Mode::FpRefine)).unwrap_err();
        assert_eq!(err.error.step(), Some(3));
        assert_eq!(err.trace.steps.len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(config(0, Mode::Direct).validate().is_err());
        let mut c = CalibrationConfig::default();
        c.final_size = (1, 100);
        assert!(c.validate().is_err());
        c = CalibrationConfig { k: 7, ..CalibrationConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!("fp-refine".parse::<Mode>().unwrap(), Mode::FpRefine);
        assert!("sideways".parse::<Mode>().is_err());
        let json = serde_json::to_string(&CalibrationConfig::default()).unwrap();
        assert!(json.contains("\"fp_refine\""));
    }
}
