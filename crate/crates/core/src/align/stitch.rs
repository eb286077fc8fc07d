//! End-to-end pairwise and multi-target stitching.

use super::cost::{build_cost_volume, global_matches, CostVolume};
use super::global::h_stage_with;
use super::local::t_stage_with;
use super::{AlignConfig, AlignTrace, Photometric};
use crate::error::{Error, Result};
use crate::homography::Homography;
use crate::metrics::{mpsnr, Failure, Metrics};
use crate::raster::{make_uniform_grid, Image, OverlapMask};
use crate::tps::{eval_warpfield_rect, solve_tps, ControlGrid, WarpField};
use crate::warp::{blend, canvas_extent, compute_canvas_multi, warp_image, BlendMode, Placement};

/// Below this normalized cross-correlation the aligned overlap is taken to be
/// unrelated content.
const MIN_OVERLAP_NCC: f64 = 0.25;
/// Minimum share of cell matches that agree with the estimated homography.
const MIN_CONSENSUS: f64 = 0.3;
/// Agreement radius of a cell match, in cells.
const CONSENSUS_RADIUS: f64 = 1.5;

/// Estimated warp of one target: `q = H·p + F(p)`.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub homography: Homography<f64>,
    pub grid: ControlGrid<f64>,
    pub field: WarpField<f64>,
    /// `J_t`, the target resampled by the homography alone.
    pub globally_aligned: Image<f64>,
}

#[derive(Debug, Clone)]
pub struct StitchOutput {
    /// Blended canvas; `None` when the pair failed.
    pub image: Option<Image<f64>>,
    /// Canvas pixel of reference pixel `(0, 0)`.
    pub offset: [i64; 2],
    pub metrics: Metrics,
    pub trace: AlignTrace,
    pub alignment: Option<Alignment>,
}

fn check_input(img: &Image<f64>) -> Result<()> {
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidImage("non-finite intensity".into()));
    }
    Ok(())
}

/// NCC of reference and mapped target over their common support; `None` when either
/// side is flat.
fn overlap_ncc(photo: &Photometric, h: &Homography<f64>) -> Option<f64> {
    let r = photo.reference.base();
    let t = photo.target.base();
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..r.height {
        for x in 0..r.width {
            let Some(a) = r.at(x, y) else { continue };
            let Some(q) = h.apply_point([x as f64, y as f64]) else { continue };
            let Some(b) = t.sample(q) else { continue };
            n += 1.0;
            sa += a;
            sb += b[0];
            saa += a * a;
            sbb += b[0] * b[0];
            sab += a * b[0];
        }
    }
    if n < 1.0 {
        return Some(0.0);
    }
    let va = saa / n - (sa / n).powi(2);
    let vb = sbb / n - (sb / n).powi(2);
    if va < 1e-8 || vb < 1e-8 {
        return None;
    }
    Some((sab / n - sa * sb / (n * n)) / (va * vb).sqrt())
}

/// Share of reference cells, among those `h` sends inside the target, whose global
/// match lies within [`CONSENSUS_RADIUS`] of the prediction. `None` when no cell
/// carries any correlation.
fn match_consensus(cv: &CostVolume, h: &Homography<f64>) -> Option<f64> {
    let l = &cv.levels[0];
    let (xmax, ymax) = ((l.tgt_width - 1) as f64, (l.tgt_height - 1) as f64);
    let (mut agree, mut total) = (0usize, 0usize);
    for (j, m) in global_matches(cv).iter().enumerate() {
        let Some((pos, peak)) = m else { continue };
        if !(*peak > 0.0) {
            continue;
        }
        let c = [cv.cell_center((j % cv.ref_width) as f64), cv.cell_center((j / cv.ref_width) as f64)];
        let Some(q) = h.apply_point(c) else { continue };
        let pred = [cv.to_cell(q[0]), cv.to_cell(q[1])];
        if pred[0] < 0.0 || pred[1] < 0.0 || pred[0] > xmax || pred[1] > ymax {
            continue;
        }
        total += 1;
        if (pred[0] - pos[0]).hypot(pred[1] - pos[1]) <= CONSENSUS_RADIUS {
            agree += 1;
        }
    }
    (total > 0).then(|| agree as f64 / total as f64)
}

/// Both stages for one target. Errors that count as stitching failures come back
/// together with the trace gathered so far.
pub(crate) fn align_pair(
    reference: &Image<f64>,
    target: &Image<f64>,
    cfg: &AlignConfig,
) -> std::result::Result<(Alignment, AlignTrace), (Error, AlignTrace)> {
    let fail = |e: Error| (e, AlignTrace::default());
    let cv = build_cost_volume(reference, target, cfg.pyramid_levels).map_err(fail)?;
    let photo = Photometric::new(reference, target);
    let (h, mut trace) = h_stage_with(&photo, &cv, cfg).map_err(fail)?;
    let unrelated = overlap_ncc(&photo, &h).is_some_and(|c| c < MIN_OVERLAP_NCC)
        || match_consensus(&cv, &h).is_some_and(|c| c < MIN_CONSENSUS);
    if unrelated {
        return Err((Error::NoOverlap, trace));
    }
    let (w, hh) = reference.size();
    let jt = warp_image(target, &h.apply(&make_uniform_grid(w, hh)));
    let (grid, field) = if cfg.iters_t > 0 {
        let cvt = match build_cost_volume(reference, &jt, cfg.pyramid_levels) {
            Ok(c) => c,
            Err(e) => return Err((e, trace)),
        };
        let (grid, t_trace) = match t_stage_with(&photo, &cvt, &h, cfg) {
            Ok(v) => v,
            Err(e) => return Err((e, trace)),
        };
        trace.records.extend(t_trace.records);
        let field = if grid.displacement().iter().all(|d| d[0] == 0.0 && d[1] == 0.0) {
            WarpField::none()
        } else {
            let coeffs = match solve_tps(&grid) {
                Ok(c) => c,
                Err(e) => return Err((e, trace)),
            };
            let r = grid.region();
            let (x0, y0) = (r.x0 as i64, r.y0 as i64);
            let fw = (r.x1 - r.x0) as usize + 1;
            let fh = (r.y1 - r.y0) as usize + 1;
            eval_warpfield_rect(&coeffs, &grid, [x0, y0], fw, fh)
        };
        (grid, field)
    } else {
        let region = crate::tps::Region::new(0.0, 0.0, w as f64, hh as f64);
        (ControlGrid::zero(cfg.grid_n, region).map_err(|e| (e, trace.clone()))?, WarpField::none())
    };
    Ok((Alignment { homography: h, grid, field, globally_aligned: jt }, trace))
}

/// Target resampled into the reference frame by `q = H·p + F(p)`, and the mask of
/// reference pixels it covers.
pub fn warp_into_reference(
    reference: &Image<f64>,
    target: &Image<f64>,
    h: &Homography<f64>,
    field: &WarpField<f64>,
) -> (Image<f64>, OverlapMask) {
    let (w, hh) = reference.size();
    let mut grid = make_uniform_grid::<f64>(w, hh);
    for (i, c) in grid.coords.iter_mut().enumerate() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        *c = match h.apply_point(*c) {
            Some(q) => {
                let f = field.at_pixel(x, y);
                [q[0] + f[0], q[1] + f[1]]
            }
            None => [f64::NAN; 2],
        };
    }
    let warped = warp_image(target, &grid);
    let inside = (0..w * hh).map(|i| warped.valid()[i] && reference.valid()[i]).collect();
    (warped, OverlapMask::from_inside(w, hh, inside))
}

fn common_channels(a: &Image<f64>, b: &Image<f64>) -> (Image<f64>, Image<f64>) {
    if a.channels() == b.channels() {
        (a.clone(), b.clone())
    } else {
        (a.to_gray(), b.to_gray())
    }
}

/// mPSNR between the reference and the warped target over the covered overlap.
fn pair_metrics(reference: &Image<f64>, target: &Image<f64>, al: &Alignment) -> Result<Metrics> {
    let (warped, mask) = warp_into_reference(reference, target, &al.homography, &al.field);
    let (a, b) = common_channels(reference, &warped);
    let value = mpsnr(&a, &b, &mask)?;
    Ok(Metrics::success(value, mask.ratio()))
}

fn failed_output(e: Error, trace: AlignTrace) -> Result<StitchOutput> {
    match Failure::from_error(&e) {
        Some(f) => Ok(StitchOutput { image: None, offset: [0, 0], metrics: Metrics::failed(f, 0.0), trace, alignment: None }),
        None => Err(e),
    }
}

/// Aligns `target` to `reference`, composes the canvas and blends it.
///
/// Stitching failures (no overlap, unreasonable warp) are reported through
/// `metrics.failure`; only invalid input is an `Err`.
pub fn stitch(reference: &Image<f64>, target: &Image<f64>, cfg: &AlignConfig, mode: BlendMode) -> Result<StitchOutput> {
    cfg.validate()?;
    check_input(reference)?;
    check_input(target)?;
    let (al, trace) = match align_pair(reference, target, cfg) {
        Ok(v) => v,
        Err((e, trace)) => return failed_output(e, trace),
    };
    let metrics = match pair_metrics(reference, target, &al) {
        Ok(m) => m,
        Err(e) => return failed_output(e, trace),
    };
    let placement = [Placement { image: target, homography: &al.homography, field: &al.field }];
    let canvas = match compute_canvas_multi(reference, &placement, cfg.area_cap) {
        Ok(c) => c,
        Err(e) => {
            let mut out = failed_output(e, trace)?;
            out.metrics.overlap_ratio = metrics.overlap_ratio;
            out.metrics.bucket = metrics.bucket;
            return Ok(out);
        }
    };
    Ok(StitchOutput { image: Some(blend(&canvas, mode)), offset: canvas.offset, metrics, trace, alignment: Some(al) })
}

#[derive(Debug, Clone)]
pub struct MultiStitchOutput {
    /// Blended canvas of the reference and every aligned target; `None` if none aligned.
    pub image: Option<Image<f64>>,
    pub offset: [i64; 2],
    /// Per-target outcome in input order.
    pub metrics: Vec<Metrics>,
    pub traces: Vec<AlignTrace>,
    pub alignments: Vec<Option<Alignment>>,
}

impl MultiStitchOutput {
    pub fn failures(&self) -> usize {
        self.metrics.iter().filter(|m| m.failure.is_some()).count()
    }
}

/// Aligns every target to the reference independently, then composes all aligned
/// targets on one canvas and blends them pairwise in input order.
pub fn multi_stitch(reference: &Image<f64>, targets: &[Image<f64>], cfg: &AlignConfig, mode: BlendMode) -> Result<MultiStitchOutput> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("at least one target is required".into()));
    }
    check_input(reference)?;
    let mut metrics = Vec::new();
    let mut traces = Vec::new();
    let mut alignments = Vec::new();
    for t in targets {
        check_input(t)?;
        let (m, trace, al) = match align_pair(reference, t, cfg) {
            Ok((al, trace)) => {
                let placed = [Placement { image: t, homography: &al.homography, field: &al.field }];
                match pair_metrics(reference, t, &al).and_then(|m| canvas_extent(reference, &placed, cfg.area_cap).map(|_| m)) {
                    Ok(m) => (m, trace, Some(al)),
                    Err(e) => (Metrics::failed(Failure::from_error(&e).ok_or(e)?, 0.0), trace, None),
                }
            }
            Err((e, trace)) => (Metrics::failed(Failure::from_error(&e).ok_or(e)?, 0.0), trace, None),
        };
        metrics.push(m);
        traces.push(trace);
        alignments.push(al);
    }
    let placements: Vec<Placement<'_, f64>> = targets
        .iter()
        .zip(&alignments)
        .filter_map(|(t, al)| al.as_ref().map(|a| Placement { image: t, homography: &a.homography, field: &a.field }))
        .collect();
    if placements.is_empty() {
        return Ok(MultiStitchOutput { image: None, offset: [0, 0], metrics, traces, alignments });
    }
    match compute_canvas_multi(reference, &placements, cfg.area_cap) {
        Ok(canvas) => Ok(MultiStitchOutput { image: Some(blend(&canvas, mode)), offset: canvas.offset, metrics, traces, alignments }),
        Err(e) => {
            Failure::from_error(&e).ok_or(e)?;
            Ok(MultiStitchOutput { image: None, offset: [0, 0], metrics, traces, alignments })
        }
    }
}
