use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use elastic_warp::align::{corner_error, evaluate_suite, multi_stitch, stitch, AlignTrace};
use elastic_warp::homography::Homography;
use elastic_warp::imageio::{load_image, save_image};
use elastic_warp::synth::{generate_suite, read_manifest, write_suite, SuiteOptions};
use elastic_warp::{Error, Result};

use crate::config::Config;

/// What a command reports back to `main`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    StitchFailed,
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn trace_value(trace: &AlignTrace) -> Value {
    serde_json::from_str(&trace.to_json()).expect("trace is valid json")
}

fn read_homography(path: &Path) -> Result<Homography<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let m: [[f64; 3]; 3] =
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    Ok(Homography::from_matrix(m))
}

fn sidecar(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("json"))
}

pub struct StitchArgs {
    pub reference: PathBuf,
    pub target: PathBuf,
    pub metrics: Option<PathBuf>,
    pub jt: Option<PathBuf>,
    pub gt_homography: Option<PathBuf>,
}

pub fn cmd_stitch(args: StitchArgs, cfg: &Config) -> Result<Status> {
    let align = cfg.single()?;
    let reference = load_image(&args.reference)?;
    let target = load_image(&args.target)?;
    let truth = args.gt_homography.as_deref().map(read_homography).transpose()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("stitched.png"));
    let start = Instant::now();
    let result = stitch(&reference, &target, &align, cfg.blend)?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;

    let mut metrics = result.metrics.clone();
    if let (Some(h), Some(al)) = (&truth, &result.alignment) {
        let (w, hh) = reference.size();
        metrics.corner_error = Some(corner_error(&al.homography, h, w, hh));
    }
    let mut report = json!({ "metrics": metrics, "offset": result.offset });
    if let Some(al) = &result.alignment {
        report["homography"] = json!(al.homography.m);
    }
    if cfg.timing {
        report["time_ms"] = json!(elapsed);
    }
    if let Some(img) = &result.image {
        save_image(&out, img)?;
    }
    if let (Some(path), Some(al)) = (&args.jt, &result.alignment) {
        save_image(path, &al.globally_aligned)?;
    }
    write_json(&sidecar(&out, args.metrics), &report)?;
    if let Some(path) = &cfg.trace {
        write_json(path, &trace_value(&result.trace))?;
    }
    if cfg.verbosity > 0 {
        eprintln!("{}", serde_json::to_string(&report["metrics"]).expect("metrics serialize"));
    }
    Ok(if metrics.failure.is_some() { Status::StitchFailed } else { Status::Success })
}

pub fn cmd_multistitch(reference: &Path, targets: &[PathBuf], metrics: Option<PathBuf>, cfg: &Config) -> Result<Status> {
    let align = cfg.single()?;
    let reference = load_image(reference)?;
    let images: Vec<_> = targets.iter().map(load_image).collect::<Result<_>>()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("multistitch.png"));
    let result = multi_stitch(&reference, &images, &align, cfg.blend)?;
    let per_target: Vec<Value> = targets
        .iter()
        .zip(&result.metrics)
        .zip(&result.alignments)
        .map(|((path, m), al)| {
            let mut v = json!({ "path": path.display().to_string(), "metrics": m });
            if let Some(al) = al {
                v["homography"] = json!(al.homography.m);
            }
            v
        })
        .collect();
    let report = json!({ "targets": per_target, "offset": result.offset, "failures": result.failures() });
    if let Some(img) = &result.image {
        save_image(&out, img)?;
    }
    write_json(&sidecar(&out, metrics), &report)?;
    if let Some(path) = &cfg.trace {
        write_json(path, &Value::Array(result.traces.iter().map(trace_value).collect()))?;
    }
    if cfg.verbosity > 0 {
        for (path, m) in targets.iter().zip(&result.metrics) {
            match m.failure {
                Some(f) => eprintln!("{}: failed ({f})", path.display()),
                None => eprintln!("{}: mPSNR {:.2} dB", path.display(), m.mpsnr.unwrap_or(f64::NAN)),
            }
        }
    }
    Ok(if result.failures() == targets.len() { Status::StitchFailed } else { Status::Success })
}

pub struct SynthArgs {
    pub counts: [usize; 3],
    pub options: SuiteOptions,
}

pub fn cmd_synth(args: SynthArgs, cfg: &Config) -> Result<Status> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("suite"));
    let specs = generate_suite(cfg.seed, args.counts, &args.options);
    let manifest = write_suite(&dir, cfg.seed, args.counts, &args.options, &specs)?;
    if cfg.verbosity > 0 {
        eprintln!("wrote {} pairs to {}", manifest.entries.len(), dir.display());
    }
    Ok(Status::Success)
}

pub fn cmd_eval(manifest: &Path, cfg: &Config) -> Result<Status> {
    let manifest = read_manifest(manifest)?;
    let specs: Vec<_> = manifest.entries.iter().map(|e| e.spec.clone()).collect();
    let configs = cfg.align_configs()?;
    let mut reports = Vec::with_capacity(configs.len());
    let mut traces = serde_json::Map::new();
    for align in &configs {
        let (report, outcomes) = evaluate_suite(&specs, align, cfg.warp, cfg.timing)?;
        if cfg.verbosity > 0 || configs.len() > 1 {
            eprintln!("iters_h={} iters_t={} warp={:?}", align.iters_h, align.iters_t, cfg.warp);
            eprintln!("{}", report.to_table());
        }
        if configs.len() == 1 {
            for o in &outcomes {
                traces.insert(o.result.id.clone(), trace_value(&o.trace));
            }
        }
        reports.push(report);
    }
    let text = if configs.len() == 1 {
        reports[0].to_json()
    } else {
        let sweep: Vec<Value> = configs
            .iter()
            .zip(&reports)
            .map(|(c, r)| {
                let report: Value = serde_json::from_str(&r.to_json()).expect("report is valid json");
                json!({ "iters_h": c.iters_h, "iters_t": c.iters_t, "report": report })
            })
            .collect();
        serde_json::to_string_pretty(&sweep).expect("sweep serializes")
    };
    match &cfg.out {
        Some(path) => fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
        None => println!("{text}"),
    }
    if let Some(path) = &cfg.trace {
        write_json(path, &Value::Object(traces))?;
    }
    Ok(Status::Success)
}
