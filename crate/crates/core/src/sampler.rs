//! Grid generation, bilinear sampling and fiducial gradients.
//!
//! Sampling uses zero padding: a grid coordinate outside `[-1, 1]²` yields
//! exactly zero. Inside the frame the four neighbours always exist because
//! pixel centres sit on the corner-aligned lattice.

use thiserror::Error;

use crate::geometry::{lift, FiducialSet, GeometryError, Point2, TpsSystem, TpsTransform};
pub use crate::raster::{norm_to_pixel, pixel_to_norm, Image, ImageError};

/// Slack for coordinates that land a rounding error outside the frame.
const EDGE_EPS: f64 = 1e-9;
/// Fractional pixel positions this close to an integer snap onto it.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("adjoint has {found} values, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("output size must be at least 2x2, got {0}x{1}")]
    OutputSize(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-output-pixel source coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<Point2>,
}

impl SampleGrid {
    /// The grid that maps every output pixel onto itself.
    pub fn identity(height: usize, width: usize) -> Self {
        let coords = (0..height)
            .flat_map(|r| {
                (0..width).map(move |c| {
                    Point2::new(pixel_to_norm(c as f64, width), pixel_to_norm(r as f64, height))
                })
            })
            .collect();
        Self { height, width, coords }
    }

    pub fn at(&self, row: usize, col: usize) -> Point2 {
        self.coords[row * self.width + col]
    }
}

pub fn generate_grid(t: &TpsTransform, out_h: usize, out_w: usize) -> SampleGrid {
    let mut grid = SampleGrid::identity(out_h, out_w);
    for p in grid.coords.iter_mut() {
        *p = t.map_point(*p);
    }
    grid
}

/// Cell index and fractional offset along one axis, or `None` outside the frame.
#[inline]
fn locate(coord: f64, size: usize) -> Option<(usize, f64)> {
    if !(coord >= -1.0 - EDGE_EPS && coord <= 1.0 + EDGE_EPS) {
        return None;
    }
    let mut u = norm_to_pixel(coord.clamp(-1.0, 1.0), size);
    let nearest = u.round();
    if (u - nearest).abs() < SNAP_EPS {
        u = nearest;
    }
    let cell = (u.floor() as usize).min(size - 2);
    Some((cell, u - cell as f64))
}

pub fn bilinear_sample(image: &Image, grid: &SampleGrid) -> Image {
    let ch = image.channels();
    let mut data = vec![0.0; grid.coords.len() * ch];
    for (out, p) in data.chunks_exact_mut(ch).zip(&grid.coords) {
        let (Some((c0, fx)), Some((r0, fy))) = (locate(p.x, image.width()), locate(p.y, image.height()))
        else {
            continue;
        };
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for (k, o) in out.iter_mut().enumerate() {
            let v = w00 * image.get(r0, c0, k)
                + w01 * image.get(r0, c0 + 1, k)
                + w10 * image.get(r0 + 1, c0, k)
                + w11 * image.get(r0 + 1, c0 + 1, k);
            *o = v.clamp(0.0, 1.0);
        }
    }
    Image::from_raw(grid.height, grid.width, ch, data)
}

pub fn warp(image: &Image, t: &TpsTransform, out_h: usize, out_w: usize) -> Image {
    bilinear_sample(image, &generate_grid(t, out_h, out_w))
}

/// Derivative of the sampled value in each channel w.r.t. the normalized
/// sampling coordinate, using the cell of `floor(coordinate)`.
#[inline]
fn sample_gradient(image: &Image, p: Point2, channel: usize) -> Option<(f64, f64)> {
    let (c0, fx) = locate(p.x, image.width())?;
    let (r0, fy) = locate(p.y, image.height())?;
    let v00 = image.get(r0, c0, channel);
    let v01 = image.get(r0, c0 + 1, channel);
    let v10 = image.get(r0 + 1, c0, channel);
    let v11 = image.get(r0 + 1, c0 + 1, channel);
    let du = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let dv = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    Some((
        du * (image.width() - 1) as f64 / 2.0,
        dv * (image.height() - 1) as f64 / 2.0,
    ))
}

/// Gradient of a scalar loss w.r.t. the target fiducials `C'`.
///
/// `adjoint` is `∂loss/∂output`, laid out like the warped output
/// (`out_h × out_w × channels`). The chain runs through the bilinear sampler,
/// the linear projection of the lifted basis, and `T = [C' 0] Δ⁻¹`, which
/// makes each sample coordinate linear in `C'` with weights `Δ⁻¹ · lift(p)`.
pub fn loss_grad_wrt_fiducials(
    image: &Image,
    base: &FiducialSet,
    targets: &FiducialSet,
    out_h: usize,
    out_w: usize,
    adjoint: &[f64],
) -> Result<Vec<Point2>, SamplerError> {
    let system = TpsSystem::new(base.clone())?;
    let transform = system.estimate(targets)?;
    loss_grad_with_transform(image, &transform, out_h, out_w, adjoint)
}

/// [`loss_grad_wrt_fiducials`] for an already fitted transform.
pub fn loss_grad_with_transform(
    image: &Image,
    transform: &TpsTransform,
    out_h: usize,
    out_w: usize,
    adjoint: &[f64],
) -> Result<Vec<Point2>, SamplerError> {
    if out_h < 2 || out_w < 2 {
        return Err(SamplerError::OutputSize(out_h, out_w));
    }
    let ch = image.channels();
    let expected = out_h * out_w * ch;
    if adjoint.len() != expected {
        return Err(SamplerError::ShapeMismatch {
            expected,
            found: adjoint.len(),
        });
    }
    let base = transform.base();
    let k = base.len();
    let mut acc_x = vec![0.0; k + 3];
    let mut acc_y = vec![0.0; k + 3];
    for r in 0..out_h {
        for c in 0..out_w {
            let idx = r * out_w + c;
            let g = &adjoint[idx * ch..(idx + 1) * ch];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let p = Point2::new(pixel_to_norm(c as f64, out_w), pixel_to_norm(r as f64, out_h));
            let q = transform.map_point(p);
            let (mut gx, mut gy) = (0.0, 0.0);
            for (k_ch, &a) in g.iter().enumerate() {
                if let Some((dx, dy)) = sample_gradient(image, q, k_ch) {
                    gx += a * dx;
                    gy += a * dy;
                }
            }
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            for (i, l) in lift(base, p).into_iter().enumerate() {
                acc_x[i] += gx * l;
                acc_y[i] += gy * l;
            }
        }
    }
    let inv = transform.delta_inv();
    Ok((0..k)
        .map(|j| {
            let (mut x, mut y) = (0.0, 0.0);
            for i in 0..k + 3 {
                x += inv[(j, i)] * acc_x[i];
                y += inv[(j, i)] * acc_y[i];
            }
            Point2::new(x, y)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{base_fiducials, estimate_tps};

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0).unwrap()
    }

    #[test]
    fn identity_grid_corners() {
        let c = base_fiducials(4, 0.0).unwrap();
        let t = estimate_tps(&c, &c).unwrap();
        let g = generate_grid(&t, 2, 2);
        let expected = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
        for (p, e) in g.coords.iter().zip(expected) {
            assert!((p.x - e.0).abs() < 1e-12 && (p.y - e.1).abs() < 1e-12);
        }
        assert_eq!(generate_grid(&t, 32, 100).coords.len(), 3200);
    }

    #[test]
    fn translation_grid() {
        let c = base_fiducials(20, 0.0).unwrap();
        let shifted = c.offset_by(&vec![Point2::new(0.1, 0.0); 20]).unwrap();
        let t = estimate_tps(&c, &shifted).unwrap();
        let g = generate_grid(&t, 5, 9);
        let id = SampleGrid::identity(5, 9);
        for (p, q) in g.coords.iter().zip(&id.coords) {
            assert!((p.x - q.x - 0.1).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_sampling_is_exact() {
        let img = ramp(13, 17);
        let out = bilinear_sample(&img, &SampleGrid::identity(13, 17));
        assert_eq!(out, img);
        let c = base_fiducials(20, 0.0).unwrap();
        let t = estimate_tps(&c, &c).unwrap();
        let warped = warp(&img, &t, 13, 17);
        let err = warped
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "identity warp error {err}");
    }

    #[test]
    fn out_of_frame_is_zero() {
        let img = Image::filled(4, 4, 1, 0.9).unwrap();
        let grid = SampleGrid {
            height: 2,
            width: 3,
            coords: vec![Point2::new(-5.0, -5.0); 6],
        };
        assert!(bilinear_sample(&img, &grid).data().iter().all(|v| *v == 0.0));
        let edge = SampleGrid {
            height: 2,
            width: 2,
            coords: vec![
                Point2::new(1.0 + 1e-6, 0.0),
                Point2::new(1.0, 0.0),
                Point2::new(0.0, -1.0 - 1e-6),
                Point2::new(1.0 + 1e-12, -1.0),
            ],
        };
        let out = bilinear_sample(&img, &edge);
        assert_eq!(out.data(), &[0.0, 0.9, 0.0, 0.9]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(6, 9, 3, 0.7).unwrap();
        let grid = SampleGrid {
            height: 2,
            width: 2,
            coords: vec![
                Point2::new(0.13, -0.4),
                Point2::new(-0.99, 0.99),
                Point2::new(0.5, 0.25),
                Point2::new(1.0, 1.0),
            ],
        };
        let out = bilinear_sample(&img, &grid);
        assert_eq!(out.channels(), 3);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn mirror_fiducials_mirror_the_image() {
        let img = ramp(12, 20);
        let c = base_fiducials(10, 0.0).unwrap();
        let mirrored: Vec<Point2> = c.points().iter().map(|p| Point2::new(-p.x, p.y)).collect();
        let t = estimate_tps(&c, &FiducialSet::new(mirrored).unwrap()).unwrap();
        let out = warp(&img, &t, 12, 20);
        for r in 0..12 {
            for col in 0..20 {
                assert!((out.get(r, col, 0) - img.get(r, 19 - col, 0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradients_vanish_on_constants_and_zero_adjoint() {
        let c = base_fiducials(8, 0.0).unwrap();
        let t = FiducialSet::new(c.points().iter().map(|p| p.scale(0.8)).collect()).unwrap();
        let flat = Image::filled(16, 32, 1, 0.3).unwrap();
        let adj = vec![1.0 / 128.0; 8 * 16];
        let g = loss_grad_wrt_fiducials(&flat, &c, &t, 8, 16, &adj).unwrap();
        assert!(g.iter().all(|p| p.x == 0.0 && p.y == 0.0));

        let img = ramp(16, 32);
        let g = loss_grad_wrt_fiducials(&img, &c, &t, 8, 16, &vec![0.0; 128]).unwrap();
        assert!(g.iter().all(|p| p.x == 0.0 && p.y == 0.0));

        assert!(matches!(
            loss_grad_wrt_fiducials(&img, &c, &t, 8, 16, &[0.0; 3]),
            Err(SamplerError::ShapeMismatch { expected: 128, found: 3 })
        ));
    }
}
