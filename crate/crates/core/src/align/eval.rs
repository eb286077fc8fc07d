//! Stitching synthetic scenes against their ground truth.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stitch::{align_pair, warp_into_reference, Alignment};
use super::{AlignConfig, AlignTrace};
use crate::error::{Error, Result};
use crate::homography::{project_corners, CornerSet, Homography};
use crate::metrics::{mpsnr, suite_report, Failure, Report, SuiteResult};
use crate::raster::Image;
use crate::synth::{generate_pair, GroundTruth, SceneSpec};
use crate::tps::WarpField;
use crate::warp::{canvas_extent, Placement};

/// Which part of the estimated warp is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarpMode {
    #[serde(rename = "h")]
    Homography,
    #[serde(rename = "h+tps")]
    HomographyTps,
}

impl FromStr for WarpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(WarpMode::Homography),
            "h+tps" => Ok(WarpMode::HomographyTps),
            other => Err(Error::InvalidArgument(format!("unknown warp mode '{other}' (expected h or h+tps)"))),
        }
    }
}

/// Mean distance between estimated and true images of the four frame corners.
pub fn corner_error(est: &Homography<f64>, truth: &Homography<f64>, width: usize, height: usize) -> f64 {
    let base = CornerSet::of_frame(width, height);
    match (project_corners(est, &base), project_corners(truth, &base)) {
        (Some(a), Some(b)) => a.sub(&b).total_norm() / 4.0,
        _ => f64::INFINITY,
    }
}

/// Mean `|H·p + F(p) − c(p)|` over ground-truth overlap pixels with a visible
/// correspondence `c`.
pub fn endpoint_error(h: &Homography<f64>, field: &WarpField<f64>, truth: &GroundTruth) -> Option<f64> {
    let w = truth.overlap.width;
    let (mut s, mut n) = (0.0, 0usize);
    for (i, c) in truth.correspondence.iter().enumerate() {
        if !truth.overlap.inside[i] || !c[0].is_finite() {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let Some(q) = h.apply_point([x as f64, y as f64]) else { continue };
        let f = field.at_pixel(x as i64, y as i64);
        s += (q[0] + f[0] - c[0]).hypot(q[1] + f[1] - c[1]);
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub result: SuiteResult,
    pub trace: AlignTrace,
    /// mPSNR of the same alignment with the local field dropped.
    pub h_only_mpsnr: Option<f64>,
    pub alignment: Option<Alignment>,
}

fn masked_mpsnr(reference: &Image<f64>, target: &Image<f64>, h: &Homography<f64>, field: &WarpField<f64>) -> Result<(f64, f64)> {
    let (warped, mask) = warp_into_reference(reference, target, h, field);
    Ok((mpsnr(reference, &warped, &mask)?, mask.ratio()))
}

/// Renders `spec`, aligns it and scores the result against the ground truth.
pub fn evaluate_scene(spec: &SceneSpec, cfg: &AlignConfig, mode: WarpMode, timing: bool) -> Result<SceneOutcome> {
    let pair = generate_pair(spec)?;
    let truth = &pair.truth;
    let mut cfg = cfg.clone();
    if mode == WarpMode::Homography {
        cfg.iters_t = 0;
    }
    let start = Instant::now();
    let aligned = align_pair(&pair.reference, &pair.target, &cfg);
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut result = SuiteResult {
        id: spec.id.clone(),
        bucket: truth.bucket(),
        mpsnr: None,
        overlap_ratio: truth.overlap_ratio,
        corner_error: None,
        epe: None,
        failure: None,
        time_ms: timing.then_some(elapsed),
    };
    let fail = |e: Error| Failure::from_error(&e).ok_or(e);
    let (al, trace) = match aligned {
        Ok(v) => v,
        Err((e, trace)) => {
            result.failure = Some(fail(e)?);
            return Ok(SceneOutcome { result, trace, h_only_mpsnr: None, alignment: None });
        }
    };
    let placed = [Placement { image: &pair.target, homography: &al.homography, field: &al.field }];
    let scored = canvas_extent(&pair.reference, &placed, cfg.area_cap)
        .and_then(|_| masked_mpsnr(&pair.reference, &pair.target, &al.homography, &al.field));
    let (value, _) = match scored {
        Ok(v) => v,
        Err(e) => {
            result.failure = Some(fail(e)?);
            return Ok(SceneOutcome { result, trace, h_only_mpsnr: None, alignment: Some(al) });
        }
    };
    let h_only = masked_mpsnr(&pair.reference, &pair.target, &al.homography, &WarpField::none()).ok().map(|v| v.0);
    result.mpsnr = Some(value);
    result.corner_error = Some(corner_error(&al.homography, &truth.homography, spec.width, spec.height));
    result.epe = endpoint_error(&al.homography, &al.field, truth);
    Ok(SceneOutcome { result, trace, h_only_mpsnr: h_only, alignment: Some(al) })
}

/// Evaluates every scene (in parallel) and aggregates the report. The report is
/// independent of the worker count; wall time is included only when `timing` is set.
pub fn evaluate_suite(specs: &[SceneSpec], cfg: &AlignConfig, mode: WarpMode, timing: bool) -> Result<(Report, Vec<SceneOutcome>)> {
    cfg.validate()?;
    let outcomes: Vec<SceneOutcome> = specs
        .par_iter()
        .map(|s| evaluate_scene(s, cfg, mode, timing))
        .collect::<Result<_>>()?;
    let report = suite_report(outcomes.iter().map(|o| o.result.clone()).collect());
    Ok((report, outcomes))
}
