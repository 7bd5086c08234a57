//! Synthetic "text ribbon" samples with exact ground-truth fiducials.
//!
//! A ribbon of alternating wide and narrow dark blobs fills the canonical
//! frame `[-1, 1]²`. Each distortion family moves the base fiducials in
//! closed form; the image is the canonical ribbon pushed through the TPS
//! those fiducials define, so the fiducials are the ground truth by
//! construction.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{base_fiducials, estimate_tps, FiducialSet, GeometryError, Point2, TpsTransform};
use crate::raster::{pixel_to_norm, Image, ImageError};
use crate::sampler::warp;

/// Pinned identifier of the rendering and sampling scheme, stored in every sidecar.
pub const GENERATOR_VERSION: &str = "ribbon-v1/chacha8";

/// Half-extent of the undistorted ribbon band in the image frame.
pub const RIBBON_SCALE: (f64, f64) = (0.72, 0.42);
pub const BACKGROUND: f64 = 0.85;
pub const INK: f64 = 0.1;
/// Half-width of the uniform pixel noise.
pub const NOISE: f64 = 0.02;
const BLOBS: usize = 8;
const BLOB_WIDTHS: [f64; 2] = [0.13, 0.07];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid family parameters: {0}")]
    InvalidFamily(String),
    #[error("invalid family mix: {0}")]
    InvalidMix(String),
    #[error("invalid corpus request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> SynthError + '_ {
    move |source| SynthError::Json {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum WarpFamily {
    /// Parabolic bend of the baseline.
    Curve { curvature: f64 },
    /// Keystone trapezoid: the left edge shrinks and the right edge grows by
    /// the fraction `displacement`.
    Perspective { displacement: f64 },
    /// Sinusoidal baseline with `period` full waves across the ribbon.
    Sine { amplitude: f64, period: u32 },
    /// Horizontal shear proportional to height.
    Slant { shear: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Curve,
    Perspective,
    Sine,
    Slant,
}

impl WarpFamily {
    pub fn kind(&self) -> FamilyKind {
        match self {
            WarpFamily::Curve { .. } => FamilyKind::Curve,
            WarpFamily::Perspective { .. } => FamilyKind::Perspective,
            WarpFamily::Sine { .. } => FamilyKind::Sine,
            WarpFamily::Slant { .. } => FamilyKind::Slant,
        }
    }

    /// A family that leaves the ribbon straight.
    pub fn straight() -> Self {
        WarpFamily::Curve { curvature: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(SynthError::InvalidFamily(format!("{name} {v} outside [{lo}, {hi}]")))
            }
        };
        match *self {
            WarpFamily::Curve { curvature } => check("curvature", curvature, -0.5, 0.5),
            WarpFamily::Perspective { displacement } => check("displacement", displacement, 0.0, 0.3),
            WarpFamily::Sine { amplitude, period } => {
                check("amplitude", amplitude, 0.0, 0.3)?;
                if period == 1 || period == 2 {
                    Ok(())
                } else {
                    Err(SynthError::InvalidFamily(format!("period {period} must be 1 or 2")))
                }
            }
            WarpFamily::Slant { shear } => check("shear", shear, -0.5, 0.5),
        }
    }

    /// Closed-form image-frame position of a canonical point.
    pub fn displacer(&self) -> impl Fn(Point2) -> Point2 {
        let (sx, sy) = RIBBON_SCALE;
        let family = *self;
        move |p: Point2| {
            let q = Point2::new(sx * p.x, sy * p.y);
            match family {
                WarpFamily::Curve { curvature } => Point2::new(q.x, q.y + curvature * (p.x * p.x - 1.0 / 3.0)),
                WarpFamily::Sine { amplitude, period } => Point2::new(
                    q.x,
                    q.y + amplitude * (std::f64::consts::PI * period as f64 * (p.x + 1.0)).sin(),
                ),
                WarpFamily::Slant { shear } => Point2::new(q.x + shear * q.y, q.y),
                // Keystone: straight edges, half-height growing linearly to the right.
                WarpFamily::Perspective { displacement } => Point2::new(q.x, q.y * (1.0 + displacement * p.x)),
            }
        }
    }
}

/// Blob spans `[start, end]` along canonical x.
fn blob_spans() -> [(f64, f64); BLOBS] {
    let filled: f64 = (0..BLOBS).map(|i| BLOB_WIDTHS[i % 2]).sum();
    let gap = (2.0 - filled) / (BLOBS - 1) as f64;
    let mut x = -1.0;
    std::array::from_fn(|i| {
        let span = (x, x + BLOB_WIDTHS[i % 2]);
        x = span.1 + gap;
        span
    })
}

/// Ink coverage in `[0, 1]` at a canonical point. `scale` converts canonical
/// distances across vertical and horizontal edges into image pixels, so the
/// soft edge is about two pixels wide wherever the ribbon lands.
fn darkness(p: Point2, spans: &[(f64, f64)], scale: (f64, f64)) -> f64 {
    let vertical = (p.y + 1.0).min(1.0 - p.y) * scale.1;
    let inside = spans
        .iter()
        .map(|&(a, b)| ((p.x - a).min(b - p.x) * scale.0).min(vertical))
        .fold(f64::NEG_INFINITY, f64::max);
    (0.5 + inside / 2.0).clamp(0.0, 1.0)
}

/// Canonical frame to image frame: the TPS fitted to the ground truth.
struct Forward(TpsTransform);

impl Forward {
    fn new(gt: &FiducialSet) -> Result<Self, SynthError> {
        let base = base_fiducials(gt.len(), 0.0)?;
        Ok(Forward(estimate_tps(&base, gt)?))
    }

    /// Image pixels per canonical unit across vertical and horizontal edges
    /// for an `h × w` image.
    fn edge_scale(&self, p: Point2, h: usize, w: usize) -> (f64, f64) {
        let [[a, b], [c, d]] = self.0.jacobian(p);
        let (sx, sy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        let (a, b, c, d) = (a * sx, b * sx, c * sy, d * sy);
        let det = (a * d - b * c).abs();
        // Rows of the inverse Jacobian are the gradients of canonical x and y.
        (det / (d * d + b * b).sqrt(), det / (c * c + a * a).sqrt())
    }

    /// Smallest Jacobian determinant over a dense lattice of the canonical frame.
    fn min_determinant(&self) -> f64 {
        let n = 64;
        let mut worst = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let p = Point2::new(-1.0 + 2.0 * i as f64 / n as f64, -1.0 + 2.0 * j as f64 / n as f64);
                let [[a, b], [c, d]] = self.0.jacobian(p);
                worst = worst.min(a * d - b * c);
            }
        }
        worst
    }
}

fn shade(d: f64) -> f64 {
    BACKGROUND + (INK - BACKGROUND) * d
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RibbonSample {
    pub image: Image,
    pub gt_fiducials: FiducialSet,
    /// 1 on ribbon pixels, 0 elsewhere.
    pub gt_mask: Image,
    pub family: WarpFamily,
    pub seed: u64,
}

impl RibbonSample {
    /// The undistorted ribbon as a perfect rectification to `h × w` would show
    /// it: canonical blobs with the edge softness they have in this sample.
    pub fn clean(&self, h: usize, w: usize) -> Result<Image, SynthError> {
        let forward = Forward::new(&self.gt_fiducials)?;
        let spans = blob_spans();
        let (ih, iw) = (self.image.height(), self.image.width());
        Ok(Image::from_fn(h, w, |r, c| {
            let q = Point2::new(pixel_to_norm(c as f64, w), pixel_to_norm(r as f64, h));
            shade(darkness(q, &spans, forward.edge_scale(q, ih, iw)))
        })?)
    }

    /// The image rectified by its ground-truth transform to `h × w`.
    pub fn rectified(&self, h: usize, w: usize) -> Result<Image, GeometryError> {
        let base = base_fiducials(self.gt_fiducials.len(), 0.0)?;
        Ok(warp(&self.image, &estimate_tps(&base, &self.gt_fiducials)?, h, w))
    }
}

/// Renders one sample. `seed` drives the pixel noise only; the geometry is a
/// function of the family.
pub fn gen_ribbon(seed: u64, family: WarpFamily, k: usize, size: (usize, usize)) -> Result<RibbonSample, SynthError> {
    family.validate()?;
    let (h, w) = size;
    if h < 2 || w < 2 {
        return Err(SynthError::InvalidRequest(format!("size must be at least 2x2, got {h}x{w}")));
    }
    let base = base_fiducials(k, 0.0)?;
    let displace = family.displacer();
    let gt = FiducialSet::new(base.points().iter().map(|p| displace(*p)).collect())?;
    let forward = Forward::new(&gt)?;
    if forward.min_determinant() <= 0.0 {
        return Err(SynthError::InvalidFamily(format!(
            "{family:?} folds the ribbon with K = {k}"
        )));
    }
    // Rough inverse used to seed the per-pixel Newton solves.
    let backward = estimate_tps(&gt, &base)?;

    let spans = blob_spans();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let p = Point2::new(pixel_to_norm(c as f64, w), pixel_to_norm(r as f64, h));
            let ink = forward
                .0
                .invert(p, Some(backward.map_point(p)))
                .ok()
                .map(|q| darkness(q, &spans, forward.edge_scale(q, h, w)))
                .unwrap_or(0.0);
            let noise = NOISE * (2.0 * unit(&mut rng) - 1.0);
            data.push((shade(ink) + noise).clamp(0.0, 1.0));
            mask.push(if ink >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(RibbonSample {
        image: Image::new(h, w, 1, data)?,
        gt_fiducials: gt,
        gt_mask: Image::new(h, w, 1, mask)?,
        family,
        seed,
    })
}

/// Relative sampling weights of the four families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMix {
    pub curve: f64,
    pub perspective: f64,
    pub sine: f64,
    pub slant: f64,
}

impl FamilyMix {
    pub fn only(kind: FamilyKind) -> Self {
        let mut mix = Self {
            curve: 0.0,
            perspective: 0.0,
            sine: 0.0,
            slant: 0.0,
        };
        *mix.weight_mut(kind) = 1.0;
        mix
    }

    pub fn uniform() -> Self {
        Self {
            curve: 1.0,
            perspective: 1.0,
            sine: 1.0,
            slant: 1.0,
        }
    }

    fn weight_mut(&mut self, kind: FamilyKind) -> &mut f64 {
        match kind {
            FamilyKind::Curve => &mut self.curve,
            FamilyKind::Perspective => &mut self.perspective,
            FamilyKind::Sine => &mut self.sine,
            FamilyKind::Slant => &mut self.slant,
        }
    }

    fn weights(&self) -> [(FamilyKind, f64); 4] {
        [
            (FamilyKind::Curve, self.curve),
            (FamilyKind::Perspective, self.perspective),
            (FamilyKind::Sine, self.sine),
            (FamilyKind::Slant, self.slant),
        ]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let w = self.weights();
        if w.iter().any(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(SynthError::InvalidMix("weights must be finite and nonnegative".into()));
        }
        if w.iter().all(|(_, v)| *v == 0.0) {
            return Err(SynthError::InvalidMix("at least one weight must be positive".into()));
        }
        Ok(())
    }

    /// Draws a family and its parameters.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> WarpFamily {
        let total: f64 = self.weights().iter().map(|(_, v)| v).sum();
        let mut u = unit(rng) * total;
        let mut kind = FamilyKind::Curve;
        for (k, v) in self.weights() {
            if v > 0.0 {
                kind = k;
                if u < v {
                    break;
                }
                u -= v;
            }
        }
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * unit(rng);
        match kind {
            FamilyKind::Curve => WarpFamily::Curve {
                curvature: draw(rng, -0.4, 0.4),
            },
            FamilyKind::Perspective => WarpFamily::Perspective {
                displacement: draw(rng, 0.0, 0.3),
            },
            FamilyKind::Sine => {
                // Same steepest baseline slope for both periods.
                let period = if unit(rng) < 0.5 { 1 } else { 2 };
                let amplitude = draw(rng, 0.0, 0.2 / period as f64);
                WarpFamily::Sine { amplitude, period }
            }
            FamilyKind::Slant => WarpFamily::Slant {
                shear: draw(rng, -0.5, 0.5),
            },
        }
    }
}

impl FromStr for FamilyMix {
    type Err = String;

    /// Parses `curve:1,sine:2`; a bare name means weight 1 and unlisted families get 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mix = Self {
            curve: 0.0,
            perspective: 0.0,
            sine: 0.0,
            slant: 0.0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, weight) = part.split_once(':').unwrap_or((part, "1"));
            let kind: FamilyKind = serde_json::from_value(serde_json::Value::String(name.trim().into()))
                .map_err(|_| format!("unknown family '{name}'"))?;
            *mix.weight_mut(kind) = weight.trim().parse().map_err(|_| format!("invalid weight '{weight}' for {name}"))?;
        }
        mix.validate().map_err(|e| e.to_string())?;
        Ok(mix)
    }
}

/// Everything that determines a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n: usize,
    pub mix: FamilyMix,
    pub k: usize,
    pub size: (usize, usize),
}

impl CorpusSpec {
    pub fn new(seed: u64, n: usize, mix: FamilyMix) -> Self {
        Self {
            seed,
            n,
            mix,
            k: 20,
            size: (64, 256),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n < 1 {
            return Err(SynthError::InvalidRequest("n must be at least 1".into()));
        }
        self.mix.validate()?;
        base_fiducials(self.k, 0.0)?;
        Ok(())
    }

    /// Family and noise seed of sample `index`, from the generator keyed by
    /// the corpus seed on stream `index`.
    pub fn entry(&self, index: usize) -> (WarpFamily, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let family = self.mix.sample(&mut rng);
        (family, rng.next_u64())
    }

    pub fn generate(&self, index: usize) -> Result<RibbonSample, SynthError> {
        let (family, seed) = self.entry(index);
        gen_ribbon(seed, family, self.k, self.size)
    }

    /// All samples in memory, in index order.
    pub fn generate_all(&self) -> Result<Vec<RibbonSample>, SynthError> {
        self.validate()?;
        (0..self.n).into_par_iter().map(|i| self.generate(i)).collect()
    }
}

/// Per-sample JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub family: WarpFamily,
    #[serde(rename = "K")]
    pub k: usize,
    pub size: [usize; 2],
    pub gt_fiducials: FiducialSet,
    pub mask_file: String,
    pub image_file: String,
    pub generator_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub generator_version: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub size: [usize; 2],
    pub mix: FamilyMix,
    /// Sidecar paths relative to the manifest's directory.
    pub samples: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(json_err(path))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes the corpus to `out_dir` and returns the manifest path.
pub fn gen_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<PathBuf, SynthError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let samples = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let sample = spec.generate(i)?;
            let stem = format!("sample_{i:05}");
            let image_file = format!("{stem}.png");
            let mask_file = format!("{stem}.mask.png");
            sample.image.save_png(&out_dir.join(&image_file))?;
            sample.gt_mask.save_png(&out_dir.join(&mask_file))?;
            let sidecar = Sidecar {
                seed: sample.seed,
                family: sample.family,
                k: spec.k,
                size: [spec.size.0, spec.size.1],
                gt_fiducials: sample.gt_fiducials,
                mask_file,
                image_file,
                generator_version: GENERATOR_VERSION.into(),
            };
            let name = format!("{stem}.json");
            write_json(&out_dir.join(&name), &sidecar)?;
            Ok(name)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let manifest = Manifest {
        seed: spec.seed,
        generator_version: GENERATOR_VERSION.into(),
        n: spec.n,
        k: spec.k,
        size: [spec.size.0, spec.size.1],
        mix: spec.mix,
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let tmp = out_dir.join(".manifest.json.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(json_err(&tmp))?;
        bytes.push(b'\n');
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    log::info!("wrote {} samples to {}", spec.n, out_dir.display());
    Ok(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SynthError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(json_err(path))
}

/// Loads a sample from its sidecar; image paths resolve against the sidecar's directory.
pub fn load_sample(sidecar_path: &Path) -> Result<(Sidecar, RibbonSample), SynthError> {
    let sidecar: Sidecar = read_json(sidecar_path)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let image = Image::load(&dir.join(&sidecar.image_file))?.to_gray();
    let mask = Image::load(&dir.join(&sidecar.mask_file))?.to_gray();
    let mask = Image::new(
        mask.height(),
        mask.width(),
        1,
        mask.data().iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }).collect(),
    )?;
    let sample = RibbonSample {
        image,
        gt_fiducials: sidecar.gt_fiducials.clone(),
        gt_mask: mask,
        family: sidecar.family,
        seed: sidecar.seed,
    };
    Ok((sidecar, sample))
}

/// Manifest plus the resolved sidecar paths, in manifest order.
pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<PathBuf>), SynthError> {
    let manifest: Manifest = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let sidecars = manifest.samples.iter().map(|s| dir.join(s)).collect();
    Ok((manifest, sidecars))
}
