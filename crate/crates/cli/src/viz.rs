//! Trace visualization: the original with its original-frame fiducials, then
//! one panel per step, side by side.
//!
//! On a step panel the canonical points (where that step's fiducials sit after
//! the remap) are drawn as hollow green squares, and the next step's predicted
//! fiducials as yellow crosses. Points outside a panel are pinned to its edge
//! and drawn as a diagonal cross.

use recal::calibration::TraceRecord;
use recal::geometry::{base_fiducials, GeometryError, Point2};
use recal::raster::{norm_to_pixel, Image};

pub const GAP: usize = 4;
const GAP_SHADE: f64 = 0.25;
const RADIUS: isize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marker {
    Previous,
    Updated,
}

impl Marker {
    fn color(self) -> [f64; 3] {
        match self {
            Marker::Previous => [0.1, 0.8, 0.2],
            Marker::Updated => [1.0, 0.85, 0.0],
        }
    }
}

pub fn to_rgb(img: &Image) -> Image {
    if img.channels() == 3 {
        return img.clone();
    }
    let gray = img.to_gray();
    let data = gray.data().iter().flat_map(|v| [*v; 3]).collect();
    Image::new(img.height(), img.width(), 3, data).expect("same dimensions")
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn from(img: &Image) -> Self {
        let rgb = to_rgb(img);
        Self {
            h: rgb.height(),
            w: rgb.width(),
            data: rgb.into_data(),
        }
    }

    fn put(&mut self, r: isize, c: isize, color: [f64; 3]) {
        if r < 0 || c < 0 || r >= self.h as isize || c >= self.w as isize {
            return;
        }
        let i = (r as usize * self.w + c as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    fn mark(&mut self, p: Point2, marker: Marker) {
        let col = norm_to_pixel(p.x, self.w);
        let row = norm_to_pixel(p.y, self.h);
        let max_c = (self.w - 1) as f64;
        let max_r = (self.h - 1) as f64;
        let off_frame = !(0.0..=max_c).contains(&col) || !(0.0..=max_r).contains(&row) || !p.is_finite();
        let c = if col.is_finite() { col.clamp(0.0, max_c).round() as isize } else { 0 };
        let r = if row.is_finite() { row.clamp(0.0, max_r).round() as isize } else { 0 };
        let color = marker.color();
        for d in -RADIUS..=RADIUS {
            if off_frame {
                self.put(r + d, c + d, color);
                self.put(r + d, c - d, color);
                continue;
            }
            match marker {
                Marker::Previous => {
                    self.put(r - RADIUS, c + d, color);
                    self.put(r + RADIUS, c + d, color);
                    self.put(r + d, c - RADIUS, color);
                    self.put(r + d, c + RADIUS, color);
                }
                Marker::Updated => {
                    self.put(r + d, c, color);
                    self.put(r, c + d, color);
                }
            }
        }
    }

    fn into_image(self) -> Image {
        Image::new(self.h, self.w, 3, self.data).expect("canvas keeps its shape")
    }
}

pub fn annotate(img: &Image, marks: &[(Point2, Marker)]) -> Image {
    let mut canvas = Canvas::from(img);
    for (p, m) in marks {
        canvas.mark(*p, *m);
    }
    canvas.into_image()
}

/// Concatenates panels left to right, top-aligned, separated by [`GAP`] columns.
pub fn strip(panels: &[Image]) -> Image {
    let h = panels.iter().map(Image::height).max().unwrap_or(1);
    let w = panels.iter().map(Image::width).sum::<usize>() + GAP * panels.len().saturating_sub(1);
    let mut data = vec![GAP_SHADE; h * w * 3];
    let mut left = 0;
    for panel in panels {
        let rgb = to_rgb(panel);
        for r in 0..rgb.height() {
            for c in 0..rgb.width() {
                for k in 0..3 {
                    data[(r * w + left + c) * 3 + k] = rgb.get(r, c, k);
                }
            }
        }
        left += rgb.width() + GAP;
    }
    Image::new(h, w, 3, data).expect("strip dimensions are consistent")
}

/// Builds the strip for a trace whose step outputs are `outputs`.
pub fn render(original: &Image, trace: &TraceRecord, outputs: &[Image]) -> Result<Image, GeometryError> {
    let base = base_fiducials(trace.config.k, trace.config.margin)?;
    let steps = &trace.steps;
    let last = steps.len().saturating_sub(1);
    let ori_marks: Vec<(Point2, Marker)> = steps
        .iter()
        .enumerate()
        .flat_map(|(t, s)| {
            let m = if t == last { Marker::Updated } else { Marker::Previous };
            s.fiducials_ori.iter().map(move |p| (*p, m))
        })
        .collect();
    let mut panels = vec![annotate(original, &ori_marks)];
    for (t, out) in outputs.iter().enumerate() {
        let mut marks: Vec<(Point2, Marker)> = base.points().iter().map(|p| (*p, Marker::Previous)).collect();
        if let Some(next) = steps.get(t + 1) {
            marks.extend(next.fiducials_cal.iter().map(|p| (*p, Marker::Updated)));
        }
        panels.push(annotate(out, &marks));
    }
    Ok(strip(&panels))
}
