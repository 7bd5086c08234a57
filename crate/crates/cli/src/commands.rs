use std::path::{Path, PathBuf};

use recal::calibration::{calibrate, CalibrationConfig, Mode, TraceRecord};
use recal::geometry::{base_fiducials, estimate_tps, FiducialSet, Point2};
use recal::localizers::LocalizerSpec;
use recal::metrics::eval_corpus;
use recal::raster::Image;
use recal::sampler::warp;
use recal::synth::{gen_corpus, read_json, CorpusSpec, FamilyMix, Sidecar};
use serde::Deserialize;

use crate::args::{parse_list, parse_size, required, CalibrateArgs, EvalArgs, GenArgs, VizArgs, WarpArgs};
use crate::error::CliError;
use crate::viz;

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// `name.ext` -> `dir/name{suffix}`.
fn sibling(dir: &Path, input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dir.join(format!("{stem}{suffix}"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::runtime)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn parse_localizer(text: Option<String>) -> Result<LocalizerSpec> {
    required("localizer", text)?.parse().map_err(|e| usage(format!("--localizer: {e}")))
}

struct GeometryFlags {
    k: Option<usize>,
    margin: Option<f64>,
    intermediate_size: Option<String>,
    final_size: Option<String>,
    localizer_input_size: Option<String>,
}

fn calibration_config(g: GeometryFlags, iterations: usize, mode: Mode) -> Result<CalibrationConfig> {
    let d = CalibrationConfig::default();
    let size = |flag: &str, v: Option<String>, default| v.map_or(Ok(default), |s| parse_size(flag, &s));
    let config = CalibrationConfig {
        iterations,
        mode,
        intermediate_size: size("intermediate-size", g.intermediate_size, d.intermediate_size)?,
        final_size: size("final-size", g.final_size, d.final_size)?,
        localizer_input_size: size("localizer-input-size", g.localizer_input_size, d.localizer_input_size)?,
        k: g.k.unwrap_or(d.k),
        margin: g.margin.unwrap_or(d.margin),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

pub fn gen(args: GenArgs) -> Result<()> {
    let n = required("n", args.n)?;
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let out = required("out", args.out)?;
    let mix = match args.families {
        Some(text) => text.parse::<FamilyMix>().map_err(|e| usage(format!("--families: {e}")))?,
        None => FamilyMix::uniform(),
    };
    let mut spec = CorpusSpec::new(args.seed.unwrap_or(0), n, mix);
    if let Some(k) = args.k {
        spec.k = k;
    }
    if let Some(size) = args.size {
        spec.size = parse_size("size", &size)?;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = gen_corpus(&spec, &out).map_err(CliError::runtime)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let input = required("input", args.input)?;
    let spec = parse_localizer(args.localizer)?;
    let mode = match args.mode {
        Some(m) => m.parse::<Mode>().map_err(|e| usage(format!("--mode: {e}")))?,
        None => Mode::FpRefine,
    };
    let iterations = args.iters.unwrap_or(3);
    if iterations == 0 {
        return Err(usage("--iters must be at least 1"));
    }
    let geometry = GeometryFlags {
        k: args.k,
        margin: args.margin,
        intermediate_size: args.intermediate_size,
        final_size: args.final_size,
        localizer_input_size: args.localizer_input_size,
    };
    let config = calibration_config(geometry, iterations, mode)?;

    let gt = if spec.needs_ground_truth() {
        let path = args.sidecar.unwrap_or_else(|| input.with_extension("json"));
        let sidecar: Sidecar = read_json(&path).map_err(CliError::runtime)?;
        if sidecar.gt_fiducials.len() != config.k {
            return Err(usage(format!(
                "--k {} does not match the {} fiducials in {}",
                config.k,
                sidecar.gt_fiducials.len(),
                path.display()
            )));
        }
        Some(sidecar.gt_fiducials)
    } else {
        None
    };
    let localizer = spec.build(gt.as_ref()).map_err(CliError::runtime)?;
    let image = Image::load(&input).map_err(CliError::runtime)?;
    let trace = calibrate(&image, localizer.as_ref(), &config).map_err(|failure| {
        let step = failure.error.step().map_or(String::new(), |s| format!(" (failed at step {s})"));
        CliError::Runtime(format!("calibration of {} failed{step}: {}", input.display(), failure.error))
    })?;

    let dir = match args.out_dir {
        Some(d) => d,
        None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for (t, step) in trace.steps.iter().enumerate() {
        let suffix = if t + 1 == trace.steps.len() {
            ".calibrated.png".to_string()
        } else {
            format!(".step{}.png", t + 1)
        };
        let path = sibling(&dir, &input, &suffix);
        step.output.save_png(&path).map_err(CliError::runtime)?;
        files.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    write_json(&sibling(&dir, &input, ".trace.json"), &trace.record(&files))?;
    println!("{}", sibling(&dir, &input, ".calibrated.png").display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let manifest = required("manifest", args.manifest)?;
    let spec = parse_localizer(args.localizer)?;
    let iters: Vec<usize> = parse_list("iters", args.iters.as_deref().unwrap_or("3"))?;
    if iters.contains(&0) {
        return Err(usage("--iters entries must be at least 1"));
    }
    let modes: Vec<Mode> = parse_list("modes", args.modes.as_deref().unwrap_or("fp-refine"))?;
    let geometry = GeometryFlags {
        k: args.k,
        margin: args.margin,
        intermediate_size: args.intermediate_size,
        final_size: args.final_size,
        localizer_input_size: args.localizer_input_size,
    };
    let base = calibration_config(geometry, 1, Mode::FpRefine)?;
    if !spec.needs_ground_truth() {
        // Catch a bad template once instead of once per sample.
        spec.build(None).map_err(CliError::runtime)?;
    }
    let configs: Vec<(Mode, usize)> = modes.iter().flat_map(|m| iters.iter().map(move |i| (*m, *i))).collect();
    let report = eval_corpus(&manifest, &spec, &base, &configs, args.jobs.unwrap_or(0)).map_err(CliError::runtime)?;
    let (csv, json) = report.write(&args.out.unwrap_or_else(|| PathBuf::from("."))).map_err(CliError::runtime)?;
    for row in &report.rows {
        if row.failures > 0 {
            log::warn!("{} x{}: {} of {} samples failed", row.mode, row.iters, row.failures, row.failures + row.n);
        }
    }
    println!("{}\n{}", csv.display(), json.display());
    Ok(())
}

pub fn viz_cmd(args: VizArgs) -> Result<()> {
    let trace_path = required("trace", args.trace)?;
    let input = required("input", args.input)?;
    let malformed = |msg: String| CliError::Runtime(format!("malformed trace {}: {msg}", trace_path.display()));
    let text = std::fs::read_to_string(&trace_path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", trace_path.display())))?;
    let trace: TraceRecord = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if trace.steps.is_empty() {
        return Err(malformed("no steps".into()));
    }
    let dir = trace_path.parent().unwrap_or(Path::new(""));
    let mut outputs = Vec::new();
    for (t, step) in trace.steps.iter().enumerate() {
        if step.fiducials_cal.len() != trace.config.k || step.fiducials_ori.len() != trace.config.k {
            return Err(malformed(format!("step {} does not have {} fiducials", t + 1, trace.config.k)));
        }
        if step.output_file.is_empty() {
            return Err(malformed(format!("step {} has no output file", t + 1)));
        }
        outputs.push(Image::load(&dir.join(&step.output_file)).map_err(CliError::runtime)?);
    }
    let original = Image::load(&input).map_err(CliError::runtime)?;
    let strip = viz::render(&original, &trace, &outputs).map_err(|e| malformed(e.to_string()))?;
    let out = args.out.unwrap_or_else(|| {
        let name = trace_path.file_name().unwrap_or_default().to_string_lossy();
        let stem = name.strip_suffix(".trace.json").or_else(|| name.strip_suffix(".json")).unwrap_or(&name);
        dir.join(format!("{stem}.viz.png"))
    });
    strip.save_png(&out).map_err(CliError::runtime)?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FiducialFile {
    Points(Vec<Point2>),
    Sidecar { gt_fiducials: Vec<Point2> },
    Named { fiducials: Vec<Point2> },
}

pub fn warp_cmd(args: WarpArgs) -> Result<()> {
    let input = required("input", args.input)?;
    let fid_path = required("fiducials", args.fiducials)?;
    let size = args.size.map(|s| parse_size("size", &s)).transpose()?;
    let text = std::fs::read_to_string(&fid_path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", fid_path.display())))?;
    let points = match serde_json::from_str(&text) {
        Ok(FiducialFile::Points(p) | FiducialFile::Sidecar { gt_fiducials: p } | FiducialFile::Named { fiducials: p }) => p,
        Err(_) => {
            return Err(CliError::Runtime(format!(
                "{}: expected a list of [x, y] points or an object with gt_fiducials",
                fid_path.display()
            )))
        }
    };
    if let Some(k) = args.k {
        if k != points.len() {
            return Err(usage(format!("--k {k} does not match the {} points in {}", points.len(), fid_path.display())));
        }
    }
    let base = base_fiducials(points.len(), args.margin.unwrap_or(0.0)).map_err(|e| usage(format!("--k: {e}")))?;
    let targets = FiducialSet::new(points).map_err(|e| CliError::Runtime(format!("degenerate fiducials: {e}")))?;
    let transform = estimate_tps(&base, &targets).map_err(|e| CliError::Runtime(format!("degenerate fiducials: {e}")))?;
    let image = Image::load(&input).map_err(CliError::runtime)?;
    let (h, w) = size.unwrap_or((image.height(), image.width()));
    let out = args.out.unwrap_or_else(|| sibling(input.parent().unwrap_or(Path::new("")), &input, ".warped.png"));
    warp(&image, &transform, h, w).save_png(&out).map_err(CliError::runtime)?;
    println!("{}", out.display());
    Ok(())
}
