use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use recal::calibration::{calibrate, CalibrationConfig, Mode};
use recal::geometry::{base_fiducials, estimate_tps};
use recal::localizers::{DescentLocalizer, OracleLocalizer};
use recal::metrics::{fiducial_rmse, sample_report};
use recal::raster::Image;
use recal::sampler::warp;
use recal::synth::{CorpusSpec, FamilyMix, RibbonSample};

fn corpus(seed: u64, n: usize) -> Vec<RibbonSample> {
    CorpusSpec::new(seed, n, FamilyMix::uniform()).generate_all().unwrap()
}

fn config(iterations: usize, mode: Mode) -> CalibrationConfig {
    CalibrationConfig {
        iterations,
        mode,
        ..CalibrationConfig::default()
    }
}

#[test]
fn undamped_oracle_solves_the_first_step() {
    let base = base_fiducials(20, 0.0).unwrap();
    for s in corpus(1, 8) {
        let oracle = OracleLocalizer::new(s.gt_fiducials.clone(), 1.0).unwrap();
        let trace = calibrate(&s.image, &oracle, &config(1, Mode::FpRefine)).unwrap();
        let step = &trace.steps[0];
        assert!(fiducial_rmse(&step.fiducials_ori, &s.gt_fiducials).unwrap() <= 1e-6);
        let expected = warp(&s.image, &estimate_tps(&base, &s.gt_fiducials).unwrap(), 32, 100);
        let worst = step.output.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "output differs by {worst}");
    }
}

#[test]
fn undamped_oracle_stays_on_the_ground_truth() {
    for s in corpus(2, 6) {
        let oracle = OracleLocalizer::new(s.gt_fiducials.clone(), 1.0).unwrap();
        for mode in [Mode::FpRefine, Mode::Direct] {
            let trace = calibrate(&s.image, &oracle, &config(3, mode)).unwrap();
            for step in &trace.steps {
                let err = fiducial_rmse(&step.fiducials_ori, &s.gt_fiducials).unwrap();
                assert!(err <= 1e-6, "{mode} step error {err}");
            }
        }
    }
}

#[test]
fn damped_oracle_contracts_step_by_step() {
    let samples = corpus(3, 30);
    let mut decreasing = 0;
    for s in &samples {
        let oracle = OracleLocalizer::new(s.gt_fiducials.clone(), 0.5).unwrap();
        let trace = calibrate(&s.image, &oracle, &config(3, Mode::FpRefine)).unwrap();
        let report = sample_report(&trace, s).unwrap();
        if report.rmse.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing * 100 >= samples.len() * 95, "{decreasing}/{}", samples.len());
}

/// Textured patch that fades to zero at every border, so no content crosses
/// the frame edge as the fiducials move.
fn windowed_texture(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.next_u32() as f64 / u32::MAX as f64).collect();
    let blurred = Image::new(h, w, 1, noise).unwrap().gaussian_blur(2.0);
    Image::from_fn(h, w, |r, c| {
        let (x, y) = (c as f64 / (w - 1) as f64, r as f64 / (h - 1) as f64);
        let window = ((std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin()).powi(2);
        window * (0.5 + 8.0 * (blurred.get(r, c, 0) - 0.5)).clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Template and an image holding the same content `shift` pixels to the left.
fn shifted_pair(h: usize, w: usize, shift: usize, seed: u64) -> (Image, Image) {
    let wide = windowed_texture(h, w + 2 * shift, seed);
    let crop = |from: usize| Image::from_fn(h, w, |r, c| wide.get(r, c + from, 0)).unwrap();
    (crop(shift), crop(0))
}

#[test]
fn descent_recovers_a_small_translation() {
    let (h, w, shift) = (32, 64, 3);
    let base = base_fiducials(8, 0.0).unwrap();
    for seed in 0..3 {
        let (template, image) = shifted_pair(h, w, shift, seed);
        let outcome = DescentLocalizer::new(template, 200, 3e-4).unwrap().run(&image, &base).unwrap();
        let (sx, sy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        let sq: f64 = outcome
            .offsets
            .iter()
            .map(|o| (o.x * sx - shift as f64).powi(2) + (o.y * sy).powi(2))
            .sum();
        let rms_px = (sq / outcome.offsets.len() as f64).sqrt();
        assert!(rms_px <= 0.5, "seed {seed}: {rms_px:.3} px off");
    }
}

#[test]
fn small_descent_steps_never_raise_the_loss() {
    let base = base_fiducials(8, 0.0).unwrap();
    for seed in 0..3 {
        let (template, image) = shifted_pair(32, 64, 3, seed);
        let descent = DescentLocalizer::new(template.clone(), 200, 1e-4).unwrap();
        let losses = descent.run(&image, &base).unwrap().losses;
        assert!(losses.windows(2).all(|l| l[1] <= l[0]), "seed {seed}");
        // Already at the optimum: nothing to do.
        let still = DescentLocalizer::new(template.clone(), 20, 1e-4).unwrap().run(&template, &base).unwrap();
        assert!(still.offsets.iter().all(|o| o.norm() < 1e-12));
    }
}

#[test]
fn descent_rejects_bad_configs() {
    let t = Image::filled(8, 8, 1, 0.5).unwrap();
    assert!(DescentLocalizer::new(t.clone(), 10, 0.0).is_err());
    assert!(DescentLocalizer::new(t, 0, 1e-3).is_err());
}
