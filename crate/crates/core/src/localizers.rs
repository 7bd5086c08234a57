//! Offset predictors standing in for a learned localization network.
//!
//! A localizer looks at the downsampled calibrated image and returns one
//! offset per fiducial, relative to the canonical base points.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::calibration::StepContext;
use crate::geometry::{estimate_tps, FiducialSet, GeometryError, Point2, TpsSystem};
use crate::raster::{pixel_to_norm, Image, ImageError};
use crate::sampler::{loss_grad_with_transform, warp, SamplerError};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("no foreground found ({fraction:.4} of pixels)")]
    NoForeground { fraction: f64 },
    #[error("fiducial {index}: {source}")]
    Inversion {
        index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("descent diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("invalid localizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Predicts calibrated-frame offsets `O_t` for step `ctx.step`.
///
/// Implementations must be stateless across calls so one instance can serve
/// many calibrations in parallel.
pub trait Localizer: Send + Sync {
    fn offsets(&self, input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError>;
}

/// Always predicts no movement.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroLocalizer;

impl Localizer for ZeroLocalizer {
    fn offsets(&self, _input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
        Ok(vec![Point2::default(); ctx.base.len()])
    }
}

fn check_alpha(alpha: f64) -> Result<(), LocalizeError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(LocalizeError::InvalidConfig(format!("damping alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Moves each fiducial a fraction `alpha` of the way to where the ground
/// truth sits in the current calibrated frame.
#[derive(Debug, Clone)]
pub struct OracleLocalizer {
    gt: FiducialSet,
    alpha: f64,
}

impl OracleLocalizer {
    pub fn new(gt: FiducialSet, alpha: f64) -> Result<Self, LocalizeError> {
        check_alpha(alpha)?;
        Ok(Self { gt, alpha })
    }

    /// Ground truth expressed in the current calibrated frame.
    fn desired(&self, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
        if self.gt.len() != ctx.base.len() {
            return Err(GeometryError::MismatchedK {
                expected: ctx.base.len(),
                found: self.gt.len(),
            }
            .into());
        }
        self.gt
            .points()
            .iter()
            .enumerate()
            .map(|(index, g)| {
                ctx.from_original_point(*g, index)
                    .map_err(|source| LocalizeError::Inversion { index, source })
            })
            .collect()
    }
}

impl Localizer for OracleLocalizer {
    fn offsets(&self, _input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
        let desired = self.desired(ctx)?;
        Ok(desired
            .iter()
            .zip(ctx.base.points())
            .map(|(d, c)| (*d - *c).scale(self.alpha))
            .collect())
    }
}

/// An oracle whose first step deliberately leaves out the right-hand `crop`
/// fraction of the ribbon. Later steps behave like [`OracleLocalizer`].
#[derive(Debug, Clone)]
pub struct CropBiasedOracle {
    oracle: OracleLocalizer,
    crop: f64,
}

impl CropBiasedOracle {
    pub fn new(gt: FiducialSet, alpha: f64, crop: f64) -> Result<Self, LocalizeError> {
        if !(0.0..1.0).contains(&crop) {
            return Err(LocalizeError::InvalidConfig(format!("crop must lie in [0, 1), got {crop}")));
        }
        Ok(Self {
            oracle: OracleLocalizer::new(gt, alpha)?,
            crop,
        })
    }
}

impl Localizer for CropBiasedOracle {
    fn offsets(&self, input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
        if ctx.step != 1 {
            return self.oracle.offsets(input, ctx);
        }
        // Re-parametrize the ground-truth ribbon so the fiducial columns only
        // span its leading (1 - crop) part.
        let ribbon = estimate_tps(ctx.base, &self.oracle.gt)?;
        let left = ctx.base.points().iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        Ok(ctx
            .base
            .points()
            .iter()
            .map(|c| {
                let squeezed = Point2::new(left + (1.0 - self.crop) * (c.x - left), c.y);
                (ribbon.map_point(squeezed) - *c).scale(self.oracle.alpha)
            })
            .collect())
    }
}

/// Training-free contour tracker.
///
/// Binarizes with Otsu's threshold, keeps the minority class as foreground,
/// and reads the top and bottom contour in one column band per fiducial pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicLocalizer;

/// Minimum foreground fraction below which the image is treated as blank.
pub const MIN_FOREGROUND: f64 = 0.01;
/// Class means closer than this are not a usable split.
const MIN_CONTRAST: f64 = 0.1;

/// Otsu threshold over a 256-bin histogram of `[0, 1]` values.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let mut hist = [0usize; 256];
    for v in values {
        hist[((v.clamp(0.0, 1.0) * 255.0).round()) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, n)| i as f64 * *n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0usize, -1.0);
    for (i, n) in hist.iter().enumerate() {
        w0 += *n as f64;
        sum0 += i as f64 * *n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    // Values at or below the bin belong to the lower class.
    (best as f64 + 0.5) / 255.0
}

/// Foreground mask of a grayscale image, or `None` when no class split exists.
pub fn foreground(gray: &Image) -> Option<Vec<bool>> {
    let values = gray.data();
    let t = otsu_threshold(values);
    let high: Vec<bool> = values.iter().map(|v| *v > t).collect();
    let n_high = high.iter().filter(|h| **h).count();
    let n_low = values.len() - n_high;
    if n_high == 0 || n_low == 0 {
        return None;
    }
    let mean = |want: bool| {
        values.iter().zip(&high).filter(|(_, h)| **h == want).map(|(v, _)| v).sum::<f64>()
            / if want { n_high } else { n_low } as f64
    };
    if mean(true) - mean(false) < MIN_CONTRAST {
        return None;
    }
    let fg_is_high = n_high < n_low;
    Some(high.into_iter().map(|h| h == fg_is_high).collect())
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fills missing entries from the nearest present neighbours (linear in index).
fn fill_gaps(values: &mut [Option<f64>]) -> Option<()> {
    let known: Vec<(usize, f64)> = values.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    if known.is_empty() {
        return None;
    }
    for (i, v) in values.iter_mut().enumerate() {
        if v.is_some() {
            continue;
        }
        let before = known.iter().rev().find(|(j, _)| *j < i);
        let after = known.iter().find(|(j, _)| *j > i);
        *v = Some(match (before, after) {
            (Some(&(a, va)), Some(&(b, vb))) => va + (vb - va) * (i - a) as f64 / (b - a) as f64,
            (Some(&(_, va)), None) => va,
            (None, Some(&(_, vb))) => vb,
            (None, None) => unreachable!("known is non-empty"),
        });
    }
    Some(())
}

fn moving_average3(values: &[f64]) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

impl HeuristicLocalizer {
    /// Top and bottom contour points in normalized coordinates, top row first.
    pub fn contour(&self, input: &Image, k: usize) -> Result<Vec<Point2>, LocalizeError> {
        let gray = input.to_gray();
        let (h, w) = (gray.height(), gray.width());
        let fg = foreground(&gray).ok_or(LocalizeError::NoForeground { fraction: 0.0 })?;
        let count = fg.iter().filter(|f| **f).count();
        let fraction = count as f64 / fg.len() as f64;
        if fraction < MIN_FOREGROUND {
            return Err(LocalizeError::NoForeground { fraction });
        }

        let columns: Vec<usize> = (0..w).filter(|&c| (0..h).any(|r| fg[r * w + c])).collect();
        let left = (columns[0] as f64 - 0.5).max(0.0);
        let right = (columns[columns.len() - 1] as f64 + 0.5).min((w - 1) as f64);

        let pairs = k / 2;
        let spacing = (right - left) / (pairs - 1) as f64;
        let xs: Vec<f64> = (0..pairs).map(|j| left + spacing * j as f64).collect();
        let mut tops = vec![None; pairs];
        let mut bottoms = vec![None; pairs];
        for (j, x) in xs.iter().enumerate() {
            let (lo, hi) = (x - spacing / 2.0, x + spacing / 2.0);
            let mut rows: Vec<f64> = (0..w)
                .filter(|&c| (c as f64) >= lo && (c as f64) < hi)
                .flat_map(|c| {
                    let fg = &fg;
                    (0..h).filter(move |&r| fg[r * w + c]).map(|r| r as f64)
                })
                .collect();
            if rows.is_empty() {
                continue;
            }
            rows.sort_by(f64::total_cmp);
            let p5 = percentile(&rows, 0.05);
            let p95 = percentile(&rows, 0.95);
            // Undo the inward bias of the percentiles for a uniformly filled
            // column, then extend by half a pixel to the footprint edge.
            let top = (0.95 * p5 - 0.05 * p95) / 0.9 - 0.5;
            let bottom = (0.95 * p95 - 0.05 * p5) / 0.9 + 0.5;
            tops[j] = Some(top.clamp(0.0, (h - 1) as f64));
            bottoms[j] = Some(bottom.clamp(0.0, (h - 1) as f64));
        }
        fill_gaps(&mut tops).ok_or(LocalizeError::NoForeground { fraction })?;
        fill_gaps(&mut bottoms).ok_or(LocalizeError::NoForeground { fraction })?;
        let tops = moving_average3(&tops.into_iter().flatten().collect::<Vec<_>>());
        let bottoms = moving_average3(&bottoms.into_iter().flatten().collect::<Vec<_>>());

        let to_point = |x: f64, y: f64| Point2::new(pixel_to_norm(x, w), pixel_to_norm(y, h));
        Ok(xs
            .iter()
            .zip(&tops)
            .map(|(x, y)| to_point(*x, *y))
            .chain(xs.iter().zip(&bottoms).map(|(x, y)| to_point(*x, *y)))
            .collect())
    }
}

impl Localizer for HeuristicLocalizer {
    fn offsets(&self, input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
        let contour = self.contour(input, ctx.base.len())?;
        Ok(contour.iter().zip(ctx.base.points()).map(|(p, c)| *p - *c).collect())
    }
}

/// Fixed-step gradient descent on the squared difference to a template.
#[derive(Debug, Clone)]
pub struct DescentLocalizer {
    template: Image,
    steps: usize,
    step_size: f64,
}

#[derive(Debug, Clone)]
pub struct DescentOutcome {
    pub offsets: Vec<Point2>,
    /// Loss before each update, followed by the final loss.
    pub losses: Vec<f64>,
}

impl DescentLocalizer {
    pub fn new(template: Image, steps: usize, step_size: f64) -> Result<Self, LocalizeError> {
        if steps < 1 {
            return Err(LocalizeError::InvalidConfig("descent needs at least one step".into()));
        }
        if !(step_size > 0.0 && step_size.is_finite()) {
            return Err(LocalizeError::InvalidConfig(format!("step size must be positive, got {step_size}")));
        }
        Ok(Self {
            template: template.to_gray(),
            steps,
            step_size,
        })
    }

    pub fn template(&self) -> &Image {
        &self.template
    }

    /// Optimizes `C'` starting from `C` for the image against the template.
    pub fn run(&self, image: &Image, base: &FiducialSet) -> Result<DescentOutcome, LocalizeError> {
        let image = image.to_gray();
        let (h, w) = (self.template.height(), self.template.width());
        let system = TpsSystem::new(base.clone())?;
        let mut targets = base.clone();
        let mut losses = Vec::with_capacity(self.steps + 1);
        for iteration in 0..=self.steps {
            let transform = system.estimate(&targets)?;
            let out = warp(&image, &transform, h, w);
            let residual: Vec<f64> = out.data().iter().zip(self.template.data()).map(|(a, b)| a - b).collect();
            let loss: f64 = residual.iter().map(|r| r * r).sum();
            if !loss.is_finite() {
                return Err(LocalizeError::Divergence { iteration });
            }
            losses.push(loss);
            if iteration == self.steps {
                break;
            }
            let adjoint: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
            let grad = loss_grad_with_transform(&image, &transform, h, w, &adjoint)?;
            let moved = targets
                .points()
                .iter()
                .zip(&grad)
                .map(|(p, g)| *p - g.scale(self.step_size))
                .collect();
            targets = FiducialSet::new(moved).map_err(|_| LocalizeError::Divergence { iteration })?;
        }
        Ok(DescentOutcome {
            offsets: targets.difference(base)?,
            losses,
        })
    }
}

impl Localizer for DescentLocalizer {
    fn offsets(&self, input: &Image, ctx: &StepContext) -> Result<Vec<Point2>, LocalizeError> {
        let outcome = self.run(input, ctx.base)?;
        log::debug!(
            "descent step {}: loss {:.6} -> {:.6}",
            ctx.step,
            outcome.losses[0],
            outcome.losses[outcome.losses.len() - 1]
        );
        Ok(outcome.offsets)
    }
}

/// Textual localizer selection, e.g. `oracle:alpha=0.5` or `heuristic`.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalizerSpec {
    Zero,
    Oracle { alpha: f64 },
    Crop { alpha: f64, crop: f64 },
    Heuristic,
    Descent { template: PathBuf, steps: usize, step_size: f64 },
}

impl LocalizerSpec {
    pub fn needs_ground_truth(&self) -> bool {
        matches!(self, LocalizerSpec::Oracle { .. } | LocalizerSpec::Crop { .. })
    }

    /// Instantiates the localizer. Oracles need the sample's ground truth.
    pub fn build(&self, gt: Option<&FiducialSet>) -> Result<Box<dyn Localizer>, LocalizeError> {
        let need_gt = || {
            gt.cloned()
                .ok_or_else(|| LocalizeError::InvalidConfig("oracle localizers need ground-truth fiducials".into()))
        };
        Ok(match self {
            LocalizerSpec::Zero => Box::new(ZeroLocalizer),
            LocalizerSpec::Heuristic => Box::new(HeuristicLocalizer),
            LocalizerSpec::Oracle { alpha } => Box::new(OracleLocalizer::new(need_gt()?, *alpha)?),
            LocalizerSpec::Crop { alpha, crop } => Box::new(CropBiasedOracle::new(need_gt()?, *alpha, *crop)?),
            LocalizerSpec::Descent {
                template,
                steps,
                step_size,
            } => Box::new(DescentLocalizer::new(Image::load(template)?, *steps, *step_size)?),
        })
    }
}

impl std::fmt::Display for LocalizerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LocalizerSpec::Zero => write!(f, "zero"),
            LocalizerSpec::Heuristic => write!(f, "heuristic"),
            LocalizerSpec::Oracle { alpha } => write!(f, "oracle:alpha={alpha}"),
            LocalizerSpec::Crop { alpha, crop } => write!(f, "crop:alpha={alpha},crop={crop}"),
            LocalizerSpec::Descent {
                template,
                steps,
                step_size,
            } => write!(f, "descent:template={},steps={steps},step={step_size}", template.display()),
        }
    }
}

impl FromStr for LocalizerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params = std::collections::BTreeMap::new();
        for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in localizer parameters, got '{kv}'"))?;
            params.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| params.remove(key);
        let num = |key: &str, v: Option<String>, default: f64| -> Result<f64, String> {
            v.map_or(Ok(default), |v| v.parse().map_err(|_| format!("invalid {key} '{v}'")))
        };
        let spec = match name {
            "zero" => LocalizerSpec::Zero,
            "heuristic" => LocalizerSpec::Heuristic,
            "oracle" => LocalizerSpec::Oracle {
                alpha: num("alpha", take("alpha"), 1.0)?,
            },
            "crop" => LocalizerSpec::Crop {
                alpha: num("alpha", take("alpha"), 1.0)?,
                crop: num("crop", take("crop"), 0.15)?,
            },
            "descent" => {
                let template = take("template").ok_or("descent needs template=<path>")?;
                let steps = take("steps").map_or(Ok(200), |v| v.parse().map_err(|_| format!("invalid steps '{v}'")))?;
                LocalizerSpec::Descent {
                    template: PathBuf::from(template),
                    steps,
                    step_size: num("step", take("step"), 1e-3)?,
                }
            }
            other => return Err(format!("unknown localizer '{other}'")),
        };
        if let Some(key) = params.keys().next() {
            return Err(format!("unknown parameter '{key}' for localizer '{name}'"));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::Mode;
    use crate::geometry::base_fiducials;

    fn ctx(base: &FiducialSet) -> StepContext<'_> {
        StepContext {
            step: 1,
            base,
            to_original: &[],
            mode: Mode::FpRefine,
        }
    }

    /// Dark band between rows `top..=bottom` on a light background.
    fn band(h: usize, w: usize, top: usize, bottom: usize) -> Image {
        Image::from_fn(h, w, |r, _| if (top..=bottom).contains(&r) { 0.1 } else { 0.85 }).unwrap()
    }

    #[test]
    fn zero_localizer() {
        let base = base_fiducials(8, 0.0).unwrap();
        let img = Image::filled(4, 4, 1, 0.5).unwrap();
        let o = ZeroLocalizer.offsets(&img, &ctx(&base)).unwrap();
        assert_eq!(o, vec![Point2::default(); 8]);
    }

    #[test]
    fn oracle_first_step_is_a_difference() {
        let base = base_fiducials(8, 0.0).unwrap();
        let gt = FiducialSet::new(base.points().iter().map(|p| Point2::new(0.7 * p.x + 0.05, 0.4 * p.y)).collect()).unwrap();
        let img = Image::filled(4, 4, 1, 0.5).unwrap();
        let o = OracleLocalizer::new(gt.clone(), 1.0).unwrap().offsets(&img, &ctx(&base)).unwrap();
        for ((o, g), c) in o.iter().zip(gt.points()).zip(base.points()) {
            assert!(o.distance(*g - *c) < 1e-15);
        }
        let half = OracleLocalizer::new(base.clone(), 0.5).unwrap().offsets(&img, &ctx(&base)).unwrap();
        assert!(half.iter().all(|p| p.norm() == 0.0));
        assert!(OracleLocalizer::new(base, 0.0).is_err());
    }

    #[test]
    fn otsu_splits_two_levels() {
        let values: Vec<f64> = (0..100).map(|i| if i < 30 { 0.1 } else { 0.85 }).collect();
        let t = otsu_threshold(&values);
        assert!(t > 0.1 && t < 0.85);
    }

    #[test]
    fn heuristic_full_frame_ribbon() {
        let base = base_fiducials(20, 0.0).unwrap();
        // Diagonal ink stripes reaching every border; ink is the minority class.
        let img = Image::from_fn(32, 64, |r, c| if (r + c) % 5 < 2 { 0.1 } else { 0.85 }).unwrap();
        let o = HeuristicLocalizer.offsets(&img, &ctx(&base)).unwrap();
        let worst = o.iter().map(|p| p.x.abs().max(p.y.abs())).fold(0.0, f64::max);
        assert!(worst <= 0.1, "offset {worst}");
    }

    #[test]
    fn heuristic_middle_band() {
        let base = base_fiducials(20, 0.0).unwrap();
        // Rows whose centres fall inside y ∈ [-0.5, 0.5].
        let img = band(32, 64, 8, 23);
        let o = HeuristicLocalizer.offsets(&img, &ctx(&base)).unwrap();
        for p in &o[..10] {
            assert!((p.y - 0.5).abs() <= 0.1, "{p}");
        }
        for p in &o[10..] {
            assert!((p.y + 0.5).abs() <= 0.1, "{p}");
        }
    }

    #[test]
    fn heuristic_rejects_blank_images() {
        let base = base_fiducials(20, 0.0).unwrap();
        let img = Image::filled(32, 64, 1, 0.85).unwrap();
        assert!(matches!(
            HeuristicLocalizer.offsets(&img, &ctx(&base)),
            Err(LocalizeError::NoForeground { .. })
        ));
    }

    #[test]
    fn descent_at_optimum_stays_put() {
        let base = base_fiducials(8, 0.0).unwrap();
        let img = Image::from_fn(16, 32, |r, c| 0.5 + 0.3 * ((r as f64 / 4.0).sin() * (c as f64 / 6.0).cos())).unwrap();
        let d = DescentLocalizer::new(img.clone(), 5, 1e-3).unwrap();
        let out = d.run(&img, &base).unwrap();
        assert!(out.offsets.iter().all(|p| p.norm() < 1e-12));
        assert!(DescentLocalizer::new(img, 5, 0.0).is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("heuristic".parse::<LocalizerSpec>().unwrap(), LocalizerSpec::Heuristic);
        assert_eq!(
            "oracle:alpha=0.5".parse::<LocalizerSpec>().unwrap(),
            LocalizerSpec::Oracle { alpha: 0.5 }
        );
        assert_eq!(
            "crop".parse::<LocalizerSpec>().unwrap(),
            LocalizerSpec::Crop { alpha: 1.0, crop: 0.15 }
        );
        assert!("oracle:beta=1".parse::<LocalizerSpec>().is_err());
        assert!("descent".parse::<LocalizerSpec>().is_err());
        assert!("magic".parse::<LocalizerSpec>().is_err());
        let spec: LocalizerSpec = "descent:template=t.png,steps=10,step=0.01".parse().unwrap();
        assert_eq!(spec.to_string().parse::<LocalizerSpec>().unwrap(), spec);
    }
}
