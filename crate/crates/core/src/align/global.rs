//! Global stage: accumulates corner displacements `D^G = Σ_k ΔD^G_k`.

use std::collections::BTreeMap;

use nalgebra::{SMatrix, SVector};

use super::cost::{global_matches, lookup, window_peak, CostVolume, LOOKUP_RADIUS};
use super::fit::robust_fit;
use super::{huber, min_overlap, ordered_chunks, AlignConfig, AlignTrace, IterationRecord, Photometric, Stage, ROW_CHUNK};
use crate::error::{Error, Result};
use crate::homography::{dlt_solve, project_corners, CornerDisplacement, CornerSet, Homography};
use crate::raster::{Grid, Image};

/// Minimum correlation for a cell match to vote.
const MIN_PEAK: f32 = 0.5;
/// Inlier radius around the displacement mode, in cells.
const VOTE_RADIUS: f64 = 3.0;
const MAX_SAMPLES: usize = 40_000;
const INNER_STEPS: [usize; 3] = [4, 5, 6];
const HALVINGS: usize = 4;
const LM_TRIES: usize = 4;

type Mat8 = SMatrix<f64, 8, 8>;
type Vec8 = SVector<f64, 8>;

/// `∂h/∂θ` for `h = (m00, m01, m02, m10, m11, m12, m20, m21)` with `m22 = 1`, by
/// central differences through the corner solve.
fn param_jacobian(base: &CornerSet<f64>, d: &CornerDisplacement<f64>) -> Option<Mat8> {
    const EPS: f64 = 1e-3;
    let p = d.params();
    let mut j = Mat8::zeros();
    for k in 0..8 {
        let mut a = p;
        let mut b = p;
        a[k] += EPS;
        b[k] -= EPS;
        let ha = dlt_solve(base, &CornerDisplacement::from_params(&a)).ok()?;
        let hb = dlt_solve(base, &CornerDisplacement::from_params(&b)).ok()?;
        for (r, (ra, rb)) in flat(&ha).iter().zip(flat(&hb)).enumerate() {
            j[(r, k)] = (ra - rb) / (2.0 * EPS);
        }
    }
    Some(j)
}

fn flat(h: &Homography<f64>) -> [f64; 8] {
    let m = &h.m;
    let s = m[2][2];
    [m[0][0] / s, m[0][1] / s, m[0][2] / s, m[1][0] / s, m[1][1] / s, m[1][2] / s, m[2][0] / s, m[2][1] / s]
}

struct GlobalSolver<'a> {
    photo: &'a Photometric,
    base: CornerSet<f64>,
}

impl GlobalSolver<'_> {
    fn loss(&self, d: &CornerDisplacement<f64>) -> Option<(f64, usize)> {
        let h = dlt_solve(&self.base, d).ok()?;
        Some(self.photo.l1(&|x, y| h.apply_point([x as f64, y as f64])))
    }

    /// Normal equations (in `h` space) and mean Huber loss on one level.
    fn accumulate(&self, level: usize, stride: usize, h: &Homography<f64>) -> (Mat8, Vec8, f64, usize) {
        let rl = &self.photo.reference.levels[level];
        let tl = &self.photo.target.levels[level];
        let m = flat(h);
        let rows: Vec<usize> = (0..rl.height).step_by(stride).collect();
        let parts = ordered_chunks(rows.len(), ROW_CHUNK, |range| {
            let mut a = Mat8::zeros();
            let mut b = Vec8::zeros();
            let (mut loss, mut n) = (0.0, 0usize);
            for &y in &rows[range] {
                for x in (0..rl.width).step_by(stride) {
                    let Some(iv) = rl.at(x, y) else { continue };
                    let p = rl.to_base(x, y);
                    let den = m[6] * p[0] + m[7] * p[1] + 1.0;
                    if !(den.abs() > 1e-12) {
                        continue;
                    }
                    let qx = (m[0] * p[0] + m[1] * p[1] + m[2]) / den;
                    let qy = (m[3] * p[0] + m[4] * p[1] + m[5]) / den;
                    let Some(s) = tl.sample([qx, qy]) else { continue };
                    let r = s[0] - iv;
                    let (w, l) = huber(r);
                    let (gx, gy) = (s[1] / den, s[2] / den);
                    let jr = Vec8::from([
                        gx * p[0],
                        gx * p[1],
                        gx,
                        gy * p[0],
                        gy * p[1],
                        gy,
                        -(gx * qx + gy * qy) * p[0],
                        -(gx * qx + gy * qy) * p[1],
                    ]);
                    a += w * jr * jr.transpose();
                    b += (w * r) * jr;
                    loss += l;
                    n += 1;
                }
            }
            (a, b, loss, n)
        });
        let mut a = Mat8::zeros();
        let mut b = Vec8::zeros();
        let (mut loss, mut n) = (0.0, 0);
        for (pa, pb, pl, pn) in parts {
            a += pa;
            b += pb;
            loss += pl;
            n += pn;
        }
        (a, b, if n > 0 { loss / n as f64 } else { f64::INFINITY }, n)
    }

    fn huber_loss(&self, level: usize, stride: usize, d: &CornerDisplacement<f64>) -> Option<f64> {
        let h = dlt_solve(&self.base, d).ok()?;
        let rl = &self.photo.reference.levels[level];
        let tl = &self.photo.target.levels[level];
        let rows: Vec<usize> = (0..rl.height).step_by(stride).collect();
        let parts = ordered_chunks(rows.len(), ROW_CHUNK, |range| {
            let (mut loss, mut n) = (0.0, 0usize);
            for &y in &rows[range] {
                for x in (0..rl.width).step_by(stride) {
                    let Some(iv) = rl.at(x, y) else { continue };
                    let Some(q) = h.apply_point(rl.to_base(x, y)) else { continue };
                    if let Some(s) = tl.sample(q) {
                        loss += huber(s[0] - iv).1;
                        n += 1;
                    }
                }
            }
            (loss, n)
        });
        let (loss, n) = parts.into_iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        (n > 0).then(|| loss / n as f64)
    }

    /// Coarse-to-fine damped Gauss-Newton on the corner parameters.
    fn refine(&self, start: &CornerDisplacement<f64>) -> CornerDisplacement<f64> {
        let mut d = *start;
        let levels = self.photo.reference.levels.len();
        for level in (0..levels).rev() {
            let rl = &self.photo.reference.levels[level];
            let stride = ((rl.width * rl.height) as f64 / MAX_SAMPLES as f64).sqrt().ceil().max(1.0) as usize;
            let mut mu = 1e-3;
            for _ in 0..INNER_STEPS[level.min(INNER_STEPS.len() - 1)] {
                let Ok(h) = dlt_solve(&self.base, &d) else { return d };
                let Some(jh) = param_jacobian(&self.base, &d) else { return d };
                let (ah, bh, loss, n) = self.accumulate(level, stride, &h);
                if n < 16 {
                    break;
                }
                let a = jh.transpose() * ah * jh;
                let b = jh.transpose() * bh;
                let mut improved = false;
                let mut step_size = 0.0;
                for _ in 0..LM_TRIES {
                    let mut damped = a;
                    for i in 0..8 {
                        damped[(i, i)] += mu * a[(i, i)] + 1e-12;
                    }
                    let Some(step) = damped.cholesky().map(|c| c.solve(&(-b))) else {
                        mu *= 8.0;
                        continue;
                    };
                    let mut p = d.params();
                    for (k, v) in p.iter_mut().enumerate() {
                        *v += step[k];
                    }
                    let cand = CornerDisplacement::from_params(&p);
                    match self.huber_loss(level, stride, &cand) {
                        Some(l) if l < loss => {
                            d = cand;
                            mu = (mu * 0.25).max(1e-7);
                            improved = true;
                            step_size = step.amax();
                            break;
                        }
                        _ => mu *= 8.0,
                    }
                }
                if !improved || step_size < 1e-3 * rl.scale {
                    break;
                }
            }
        }
        d
    }
}

fn cell_centers(cv: &CostVolume) -> Vec<[f64; 2]> {
    (0..cv.ref_height)
        .flat_map(|y| (0..cv.ref_width).map(move |x| [cv.cell_center(x as f64), cv.cell_center(y as f64)]))
        .collect()
}

/// Histogram bin, smoothed count and tie-break key.
type Vote = ((i64, i64), f64, (i64, i64, i64));

/// Mode of the displacement votes, smoothed over the 3×3 neighbourhood.
fn vote_mode(deltas: &[[f64; 2]]) -> Option<[f64; 2]> {
    let mut hist: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for d in deltas {
        *hist.entry((d[0].round() as i64, d[1].round() as i64)).or_insert(0.0) += 1.0;
    }
    let mut best: Option<Vote> = None;
    for &(kx, ky) in hist.keys() {
        let mut score = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                score += hist.get(&(kx + dx, ky + dy)).copied().unwrap_or(0.0);
            }
        }
        let tie = (kx * kx + ky * ky, ky, kx);
        let better = match &best {
            None => true,
            Some((_, s, t)) => score > *s || (score == *s && tie < *t),
        };
        if better {
            best = Some(((kx, ky), score, tie));
        }
    }
    best.map(|((x, y), _, _)| [x as f64, y as f64])
}

/// Cost-volume proposal for the accumulated displacement.
fn propose(cv: &CostVolume, base: &CornerSet<f64>, d: &CornerDisplacement<f64>, first: bool) -> Option<CornerDisplacement<f64>> {
    let centers = cell_centers(cv);
    let cell = cv.cell as f64;
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    if first {
        let matches = global_matches(cv);
        let mut deltas = Vec::new();
        let mut pairs = Vec::new();
        for (i, m) in matches.iter().enumerate() {
            if let Some((pos, v)) = m {
                if *v >= MIN_PEAK {
                    let (cx, cy) = ((i % cv.ref_width) as f64, (i / cv.ref_width) as f64);
                    deltas.push([pos[0] - cx, pos[1] - cy]);
                    pairs.push((centers[i], [cv.cell_center(pos[0]), cv.cell_center(pos[1])]));
                }
            }
        }
        let mode = vote_mode(&deltas)?;
        for (dl, (p, q)) in deltas.iter().zip(pairs) {
            if (dl[0] - mode[0]).abs() <= VOTE_RADIUS && (dl[1] - mode[1]).abs() <= VOTE_RADIUS {
                src.push(p);
                dst.push(q);
            }
        }
    } else {
        let h = dlt_solve(base, d).ok()?;
        let tl = &cv.levels[0];
        let coords: Vec<[f64; 2]> = centers
            .iter()
            .map(|p| match h.apply_point(*p) {
                Some(q) => [cv.to_cell(q[0]), cv.to_cell(q[1])],
                None => [f64::NAN; 2],
            })
            .collect();
        let grid = Grid::new(cv.ref_width, cv.ref_height, coords).ok()?;
        let slice = lookup(cv, &grid, LOOKUP_RADIUS);
        let r = LOOKUP_RADIUS as f64;
        for (i, g) in grid.coords.iter().enumerate() {
            if !(g[0] >= 0.0 && g[1] >= 0.0 && g[0] <= (tl.tgt_width - 1) as f64 && g[1] <= (tl.tgt_height - 1) as f64) {
                continue;
            }
            let Some((mut off, mut v)) = window_peak(&slice, i, 0) else { continue };
            if (off[0].abs() >= r - 0.5 || off[1].abs() >= r - 0.5) && cv.levels.len() > 1 {
                if let Some((o1, v1)) = window_peak(&slice, i, 1) {
                    off = [2.0 * o1[0], 2.0 * o1[1]];
                    v = v1;
                }
            }
            if v < MIN_PEAK {
                continue;
            }
            src.push(centers[i]);
            dst.push([cv.cell_center(g[0] + off[0]), cv.cell_center(g[1] + off[1])]);
        }
    }
    if src.len() < 4 {
        return None;
    }
    let fit = robust_fit(&src, &dst, cell, 4.0 * cell)?;
    project_corners(&fit, base).filter(|c| c.is_finite())
}

/// Scales the non-translational part of `delta` so no corner deviates from the mean
/// motion by more than `cap`.
fn trust_region(delta: &CornerDisplacement<f64>, cap: f64) -> CornerDisplacement<f64> {
    let t = delta.mean();
    let rest = delta.sub(&CornerDisplacement::uniform(t[0], t[1]));
    let m = rest.max_norm();
    if m <= cap {
        return *delta;
    }
    CornerDisplacement::uniform(t[0], t[1]).add(&rest.scale(cap / m))
}

/// Runs `cfg.iters_h` global iterations and returns `dlt_solve(V, Σ ΔD)`.
pub fn h_stage(reference: &Image<f64>, target: &Image<f64>, cv: &CostVolume, cfg: &AlignConfig) -> Result<(Homography<f64>, AlignTrace)> {
    cfg.validate()?;
    let photo = Photometric::new(reference, target);
    h_stage_with(&photo, cv, cfg)
}

pub(crate) fn h_stage_with(photo: &Photometric, cv: &CostVolume, cfg: &AlignConfig) -> Result<(Homography<f64>, AlignTrace)> {
    let (w, h) = (photo.reference.base().width, photo.reference.base().height);
    let base = CornerSet::of_frame(w, h);
    let solver = GlobalSolver { photo, base };
    let floor = min_overlap(w, h);
    let mut d = CornerDisplacement::zero();
    let mut trace = AlignTrace::default();
    let (mut loss, mut count) = solver.loss(&d).ok_or(Error::SingularHomography)?;
    if count == 0 {
        return Err(Error::NoOverlap);
    }
    let mut replay: Option<IterationRecord> = None;
    for k in 0..cfg.iters_h {
        // an iteration from an unchanged state repeats the previous rejected one
        if let Some(prev) = &replay {
            trace.records.push(IterationRecord { iteration: k, ..prev.clone() });
            continue;
        }
        let loss_before = loss;
        let mut start = d;
        if let Some(fit) = propose(cv, &base, &d, k == 0) {
            if let Some((l, n)) = solver.loss(&fit) {
                if n >= floor && l < loss_before {
                    start = fit;
                }
            }
        }
        let refined = solver.refine(&start);
        let best = solver.loss(&refined).filter(|(_, n)| *n >= floor).map(|(l, _)| (refined, l));
        let mut applied = CornerDisplacement::zero();
        let mut accepted = false;
        if let Some((cand, _)) = best {
            let delta = trust_region(&cand.sub(&d), cfg.max_step_h);
            if delta.max_norm() > 0.0 {
                let mut scale = 1.0;
                for _ in 0..=HALVINGS {
                    let step = delta.scale(scale);
                    let next = d.add(&step);
                    if let Some((l, n)) = solver.loss(&next) {
                        if n >= floor && l <= loss_before {
                            applied = step;
                            d = next;
                            loss = l;
                            count = n;
                            accepted = true;
                            break;
                        }
                    }
                    scale *= 0.5;
                }
            }
        }
        if count == 0 {
            return Err(Error::NoOverlap);
        }
        let record = IterationRecord {
            stage: Stage::H,
            iteration: k,
            delta: applied.deltas.to_vec(),
            accumulated: d.deltas.to_vec(),
            loss_before,
            loss_after: if accepted { loss } else { loss_before },
            accepted,
        };
        if !accepted && k > 0 {
            replay = Some(record.clone());
        }
        trace.records.push(record);
    }
    let homog = dlt_solve(&base, &trace.corner_sum())?;
    Ok((homog, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trust_region_caps_only_shape_change() {
        let mut d = CornerDisplacement::uniform(100.0, -50.0);
        d.deltas[0][0] += 40.0;
        let c = trust_region(&d, 16.0);
        assert!((c.mean()[0] - d.mean()[0]).abs() < 1e-9 && (c.mean()[1] - d.mean()[1]).abs() < 1e-9);
        let rest = c.sub(&CornerDisplacement::uniform(c.mean()[0], c.mean()[1]));
        assert!((rest.max_norm() - 16.0).abs() < 1e-9);
        let small = CornerDisplacement::uniform(3.0, 4.0);
        assert_eq!(trust_region(&small, 16.0), small);
    }

    #[test]
    fn vote_mode_prefers_dense_cluster() {
        let mut v = vec![[5.2, -1.1], [5.0, -0.8], [4.9, -1.0], [6.1, -1.2]];
        v.extend((0..3).map(|i| [-(i as f64) * 7.0, 3.0]));
        assert_eq!(vote_mode(&v), Some([5.0, -1.0]));
    }

    #[test]
    fn param_jacobian_matches_identity_translation() {
        let base = CornerSet::of_frame(100, 80);
        let j = param_jacobian(&base, &CornerDisplacement::zero()).unwrap();
        // moving all x corner coordinates together is a pure x translation
        let sum_x: f64 = (0..4).map(|c| j[(2, 2 * c)]).sum();
        assert!((sum_x - 1.0).abs() < 1e-6);
    }
}
