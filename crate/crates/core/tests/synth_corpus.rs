use recal::geometry::Point2;
use recal::raster::{norm_to_pixel, Image};
use recal::synth::{gen_corpus, gen_ribbon, load_manifest, load_sample, CorpusSpec, FamilyKind, FamilyMix, RibbonSample, WarpFamily, BACKGROUND};

fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Extreme members of every family.
fn extremes() -> Vec<WarpFamily> {
    vec![
        WarpFamily::straight(),
        WarpFamily::Curve { curvature: 0.5 },
        WarpFamily::Curve { curvature: -0.5 },
        WarpFamily::Perspective { displacement: 0.3 },
        WarpFamily::Sine { amplitude: 0.3, period: 1 },
        WarpFamily::Sine { amplitude: 0.15, period: 2 },
        WarpFamily::Slant { shear: 0.5 },
        WarpFamily::Slant { shear: -0.5 },
    ]
}

fn inside_triangle(p: Point2, a: Point2, b: Point2, c: Point2) -> bool {
    let cross = |o: Point2, u: Point2, v: Point2| (u.x - o.x) * (v.y - o.y) - (u.y - o.y) * (v.x - o.x);
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let t = (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / (ab.x * ab.x + ab.y * ab.y)).clamp(0.0, 1.0);
    p.distance(a + ab.scale(t))
}

/// Distance in pixels from `p` to the fiducial band (zero inside).
fn band_distance(s: &RibbonSample, p: Point2) -> f64 {
    let (h, w) = (s.image.height(), s.image.width());
    let px = |q: Point2| Point2::new(norm_to_pixel(q.x, w), norm_to_pixel(q.y, h));
    let p = px(p);
    let top = s.gt_fiducials.top();
    let bottom = s.gt_fiducials.bottom();
    let mut best = f64::INFINITY;
    for j in 0..top.len() - 1 {
        let quad = [px(top[j]), px(top[j + 1]), px(bottom[j + 1]), px(bottom[j])];
        if inside_triangle(p, quad[0], quad[1], quad[2]) || inside_triangle(p, quad[0], quad[2], quad[3]) {
            return 0.0;
        }
        for e in 0..4 {
            best = best.min(segment_distance(p, quad[e], quad[(e + 1) % 4]));
        }
    }
    best
}

#[test]
fn rectification_restores_the_clean_ribbon() {
    for (i, family) in extremes().into_iter().enumerate() {
        let s = gen_ribbon(i as u64, family, 20, (64, 256)).unwrap();
        let clean = s.clean(64, 256).unwrap();
        let value = psnr(&s.rectified(64, 256).unwrap(), &clean);
        assert!(value >= 28.0, "{family:?}: {value:.2} dB");
    }
}

#[test]
fn mask_marks_dark_pixels_inside_the_band() {
    for (i, family) in extremes().into_iter().enumerate() {
        let s = gen_ribbon(100 + i as u64, family, 20, (64, 256)).unwrap();
        let (h, w) = (s.image.height(), s.image.width());
        let mut fg = 0;
        let mut agree = 0;
        for r in 0..h {
            for c in 0..w {
                if s.gt_mask.get(r, c, 0) < 0.5 {
                    continue;
                }
                fg += 1;
                if BACKGROUND - s.image.get(r, c, 0) >= 0.3 {
                    agree += 1;
                }
                let p = Point2::new(-1.0 + 2.0 * c as f64 / (w - 1) as f64, -1.0 + 2.0 * r as f64 / (h - 1) as f64);
                let d = band_distance(&s, p);
                assert!(d <= 2.0, "{family:?}: pixel ({r}, {c}) is {d:.2} px outside the band");
            }
        }
        assert!(fg > 0);
        assert!(agree as f64 >= 0.99 * fg as f64, "{family:?}: {agree}/{fg}");
    }
}

#[test]
fn generation_is_deterministic() {
    let f = WarpFamily::Sine { amplitude: 0.1, period: 2 };
    assert_eq!(gen_ribbon(42, f, 20, (64, 256)).unwrap(), gen_ribbon(42, f, 20, (64, 256)).unwrap());
    assert_ne!(gen_ribbon(42, f, 20, (64, 256)).unwrap().image, gen_ribbon(43, f, 20, (64, 256)).unwrap().image);
}

#[test]
fn corpus_files_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = CorpusSpec::new(7, 12, FamilyMix::uniform());
    let ma = gen_corpus(&spec, a.path()).unwrap();
    let mb = gen_corpus(&spec, b.path()).unwrap();
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    let (manifest, sidecars) = load_manifest(&ma).unwrap();
    assert_eq!(manifest.samples.len(), 12);
    for (i, path) in sidecars.iter().enumerate() {
        let other = b.path().join(path.file_name().unwrap());
        assert_eq!(std::fs::read(path).unwrap(), std::fs::read(other).unwrap());
        let (sidecar, loaded) = load_sample(path).unwrap();
        assert!(a.path().join(&sidecar.image_file).exists());
        assert_eq!(loaded.image.shape(), (64, 256, 1));
        // The sidecar alone regenerates the sample.
        let again = gen_ribbon(sidecar.seed, sidecar.family, sidecar.k, (64, 256)).unwrap();
        assert_eq!(again.gt_fiducials, loaded.gt_fiducials);
        assert_eq!(again.image.to_u8(), loaded.image.to_u8(), "sample {i}");
    }
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&sidecars[0]).unwrap()).unwrap();
    for key in ["seed", "family", "K", "size", "gt_fiducials", "mask_file", "generator_version"] {
        assert!(raw.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn degenerate_mix_draws_one_family() {
    let spec = CorpusSpec::new(3, 50, FamilyMix::only(FamilyKind::Curve));
    for i in 0..50 {
        let (family, _) = spec.entry(i);
        match family {
            WarpFamily::Curve { curvature } => assert!((-0.4..=0.4).contains(&curvature)),
            other => panic!("unexpected {other:?}"),
        }
    }
    let mut bad = spec.clone();
    bad.n = 0;
    assert!(gen_corpus(&bad, tempfile::tempdir().unwrap().path()).is_err());
}
