//! Local stage: accumulates interior control displacements `D^L = Σ_n ΔD^L_n` of a
//! zero-edge spline laid over the overlap.

use nalgebra::{DMatrix, DVector};

use super::cost::{lookup, window_peak, CostVolume, LOOKUP_RADIUS};
use super::{huber, AlignConfig, AlignTrace, IterationRecord, Photometric, Stage};
use crate::error::{Error, Result};
use crate::homography::Homography;
use crate::raster::{overlap_mask, Grid, Image};
use crate::tps::{apply_dirichlet, ControlGrid, InteriorBasis, Region};

const TARGET_SAMPLES: f64 = 4000.0;
const MIN_PEAK: f32 = 0.5;
const INNER_STEPS: usize = 3;
const HALVINGS: usize = 4;

struct Samples {
    points: Vec<[f64; 2]>,
    /// `H·p` per sample.
    warped: Vec<[f64; 2]>,
    /// Reference intensity per pyramid level, `None` where invalid.
    reference: Vec<Vec<Option<f64>>>,
    /// Sample indices used on each level.
    per_level: Vec<Vec<usize>>,
    basis: InteriorBasis<f64>,
}

struct LocalSolver<'a> {
    photo: &'a Photometric,
    s: Samples,
    params: usize,
}

type Interior = Vec<[f64; 2]>;

impl LocalSolver<'_> {
    #[inline]
    fn position(&self, i: usize, d: &Interior) -> [f64; 2] {
        let f = self.s.basis.apply(i, d);
        [self.s.warped[i][0] + f[0], self.s.warped[i][1] + f[1]]
    }

    /// Sampled mean L1 at full resolution and the number of contributing samples.
    fn loss(&self, d: &Interior) -> (f64, usize) {
        let t = self.photo.target.base();
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..self.s.points.len() {
            let Some(rv) = self.s.reference[0][i] else { continue };
            if let Some(tv) = t.sample(self.position(i, d)) {
                s += (tv[0] - rv).abs();
                n += 1;
            }
        }
        if n == 0 {
            (f64::INFINITY, 0)
        } else {
            (s / n as f64, n)
        }
    }

    fn huber_loss(&self, level: usize, d: &Interior) -> f64 {
        let t = &self.photo.target.levels[level];
        let (mut s, mut n) = (0.0, 0usize);
        for &i in &self.s.per_level[level] {
            let Some(rv) = self.s.reference[level][i] else { continue };
            if let Some(tv) = t.sample(self.position(i, d)) {
                s += huber(tv[0] - rv).1;
                n += 1;
            }
        }
        if n == 0 {
            f64::INFINITY
        } else {
            s / n as f64
        }
    }

    /// Joint damped Gauss-Newton over all interior displacements, coarse to fine.
    fn refine(&self, start: &Interior) -> Interior {
        let m = self.params;
        let mut d = start.clone();
        for level in (0..self.photo.target.levels.len()).rev() {
            let t = &self.photo.target.levels[level];
            let idx = &self.s.per_level[level];
            let mut mu = 1e-3;
            for _ in 0..INNER_STEPS {
                let mut rows = Vec::with_capacity(idx.len());
                let (mut loss, mut n) = (0.0, 0usize);
                for &i in idx {
                    let Some(rv) = self.s.reference[level][i] else { continue };
                    let Some(tv) = t.sample(self.position(i, &d)) else { continue };
                    let r = tv[0] - rv;
                    let (w, l) = huber(r);
                    loss += l;
                    n += 1;
                    rows.push((i, w.sqrt(), tv[1], tv[2], r));
                }
                if n < 16 {
                    break;
                }
                loss /= n as f64;
                let mut j = DMatrix::<f64>::zeros(rows.len(), 2 * m);
                let mut rv = DVector::<f64>::zeros(rows.len());
                for (row, &(i, sw, gx, gy, r)) in rows.iter().enumerate() {
                    let b = self.s.basis.row(i);
                    for (k, bk) in b.iter().enumerate() {
                        j[(row, k)] = sw * gx * bk;
                        j[(row, m + k)] = sw * gy * bk;
                    }
                    rv[row] = sw * r;
                }
                let jt = j.transpose();
                let a = &jt * &j;
                let g = &jt * &rv;
                let mean_diag = (0..2 * m).map(|k| a[(k, k)]).sum::<f64>() / (2 * m) as f64;
                if !(mean_diag > 0.0) {
                    break;
                }
                let mut improved = false;
                let mut step_size = 0.0;
                for _ in 0..6 {
                    let mut damped = a.clone();
                    for k in 0..2 * m {
                        damped[(k, k)] += mu * a[(k, k)] + 1e-4 * mean_diag;
                    }
                    let Some(chol) = damped.cholesky() else {
                        mu *= 8.0;
                        continue;
                    };
                    let step = chol.solve(&(-&g));
                    let cand: Interior = d.iter().enumerate().map(|(k, v)| [v[0] + step[k], v[1] + step[m + k]]).collect();
                    if self.huber_loss(level, &cand) < loss {
                        d = cand;
                        mu = (mu * 0.25).max(1e-7);
                        improved = true;
                        step_size = step.amax();
                        break;
                    }
                    mu *= 8.0;
                }
                if !improved || step_size < 1e-3 * t.scale {
                    break;
                }
            }
        }
        d
    }
}

fn jacobian(h: &Homography<f64>, p: [f64; 2]) -> Option<[[f64; 2]; 2]> {
    const E: f64 = 0.5;
    let xa = h.apply_point([p[0] + E, p[1]])?;
    let xb = h.apply_point([p[0] - E, p[1]])?;
    let ya = h.apply_point([p[0], p[1] + E])?;
    let yb = h.apply_point([p[0], p[1] - E])?;
    Some([
        [(xa[0] - xb[0]) / (2.0 * E), (ya[0] - yb[0]) / (2.0 * E)],
        [(xa[1] - xb[1]) / (2.0 * E), (ya[1] - yb[1]) / (2.0 * E)],
    ])
}

/// Cost-volume flow in target coordinates, averaged over the Voronoi cell of every
/// interior control point. Points without matches get no update.
fn propose(cv: &CostVolume, grid: &ControlGrid<f64>, h: &Homography<f64>, inside: &dyn Fn([f64; 2]) -> bool, d: &Interior, lambda: f64) -> Option<Interior> {
    let coords: Vec<[f64; 2]> =
        (0..cv.ref_height).flat_map(|y| (0..cv.ref_width).map(move |x| [x as f64, y as f64])).collect();
    let ident = Grid::new(cv.ref_width, cv.ref_height, coords).ok()?;
    let slice = lookup(cv, &ident, LOOKUP_RADIUS);
    let r = LOOKUP_RADIUS as f64;
    let mut centers = Vec::new();
    let mut flows = Vec::new();
    for (i, c) in ident.coords.iter().enumerate() {
        let p = [cv.cell_center(c[0]), cv.cell_center(c[1])];
        if !inside(p) {
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
        let Some(jh) = jacobian(h, p) else { continue };
        let f = [off[0] * cv.cell as f64, off[1] * cv.cell as f64];
        centers.push(p);
        flows.push([jh[0][0] * f[0] + jh[0][1] * f[1], jh[1][0] * f[0] + jh[1][1] * f[1]]);
    }
    if centers.is_empty() {
        return None;
    }
    let current = InteriorBasis::new(grid, &centers).ok()?;
    let n = grid.n();
    let refs = grid.ref_points();
    let mut sum = vec![[0.0; 2]; d.len()];
    let mut cnt = vec![0usize; d.len()];
    for (c, (p, f)) in centers.iter().zip(&flows).enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (k, q) in refs.iter().enumerate() {
            let dd = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if dd < best.0 {
                best = (dd, k);
            }
        }
        if grid.is_edge(best.1) {
            continue;
        }
        let (i, j) = (best.1 / n - 1, best.1 % n - 1);
        let slot = i * (n - 2) + j;
        let fk = current.apply(c, d);
        sum[slot][0] += f[0] - fk[0];
        sum[slot][1] += f[1] - fk[1];
        cnt[slot] += 1;
    }
    if cnt.iter().all(|c| *c == 0) {
        return None;
    }
    Some(
        d.iter()
            .zip(sum.iter().zip(&cnt))
            .map(|(v, (s, c))| {
                if *c == 0 {
                    *v
                } else {
                    [v[0] + lambda * s[0] / *c as f64, v[1] + lambda * s[1] / *c as f64]
                }
            })
            .collect(),
    )
}

fn cap_step(delta: &Interior, cap: f64) -> Interior {
    delta
        .iter()
        .map(|v| {
            let m = v[0].hypot(v[1]);
            if m > cap {
                [v[0] * cap / m, v[1] * cap / m]
            } else {
                *v
            }
        })
        .collect()
}

/// Runs `cfg.iters_t` local iterations on top of the global homography `h`.
///
/// `cv` correlates the reference with the globally aligned target
/// `J_t = W(I_t, H·U)`; the photometric terms sample `target` at `H·p + F(p)`
/// directly. The control lattice spans the bounding box of the overlap.
pub fn t_stage(
    reference: &Image<f64>,
    target: &Image<f64>,
    cv: &CostVolume,
    h: &Homography<f64>,
    cfg: &AlignConfig,
) -> Result<(ControlGrid<f64>, AlignTrace)> {
    cfg.validate()?;
    let photo = Photometric::new(reference, target);
    t_stage_with(&photo, cv, h, cfg)
}

pub(crate) fn t_stage_with(
    photo: &Photometric,
    cv: &CostVolume,
    h: &Homography<f64>,
    cfg: &AlignConfig,
) -> Result<(ControlGrid<f64>, AlignTrace)> {
    let rb = photo.reference.base();
    let tb = photo.target.base();
    let n = cfg.grid_n;
    let mask = overlap_mask((rb.width, rb.height), h, (tb.width, tb.height))?;
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(Error::NoOverlap)?;
    let mut trace = AlignTrace::default();
    let min_side = (n - 1) as f64;
    if ((x1 - x0) as f64) < min_side || ((y1 - y0) as f64) < min_side {
        let region = Region::new(0.0, 0.0, rb.width as f64, rb.height as f64);
        return Ok((ControlGrid::zero(n, region)?, trace));
    }
    let region = Region::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
    let zero = ControlGrid::zero(n, region)?;

    let stride = ((mask.pixel_count as f64 / TARGET_SAMPLES).sqrt().ceil() as usize).max(1);
    let mut points = Vec::new();
    let mut lattice = Vec::new();
    for (iy, y) in (y0..=y1).step_by(stride).enumerate() {
        for (ix, x) in (x0..=x1).step_by(stride).enumerate() {
            if mask.contains(x, y) && rb.valid[y * rb.width + x] {
                points.push([x as f64, y as f64]);
                lattice.push((ix, iy));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::NoOverlap);
    }
    let warped: Vec<[f64; 2]> = points.iter().map(|p| h.apply_point(*p).unwrap_or([f64::NAN; 2])).collect();
    let levels = photo.reference.levels.len();
    let reference = (0..levels)
        .map(|l| points.iter().map(|p| photo.reference.levels[l].sample(*p).map(|v| v[0])).collect())
        .collect();
    let per_level = (0..levels)
        .map(|l| {
            let sub = (1usize << l).min(2);
            lattice.iter().enumerate().filter(|(_, (ix, iy))| ix % sub == 0 && iy % sub == 0).map(|(i, _)| i).collect()
        })
        .collect();
    let basis = InteriorBasis::new(&zero, &points)?;
    let params = basis.cols;
    let solver = LocalSolver { photo, s: Samples { points, warped, reference, per_level, basis }, params };

    let mut d: Interior = vec![[0.0; 2]; params];
    let (mut loss, mut count) = solver.loss(&d);
    if count == 0 {
        return Err(Error::NoOverlap);
    }
    let inside = |p: [f64; 2]| {
        let (x, y) = (p[0].round(), p[1].round());
        x >= x0 as f64 && y >= y0 as f64 && x <= x1 as f64 && y <= y1 as f64 && mask.contains(x as usize, y as usize)
    };
    for k in 0..cfg.iters_t {
        let loss_before = loss;
        let mut start = d.clone();
        if let Some(prop) = propose(cv, &zero, h, &inside, &d, cfg.lambda_local) {
            let (lp, np) = solver.loss(&prop);
            if np * 2 >= count && lp < loss_before {
                start = prop;
            }
        }
        let cand = solver.refine(&start);
        let delta: Interior = cap_step(&cand.iter().zip(&d).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect(), cfg.max_step_t);
        let mut applied = vec![[0.0; 2]; params];
        let mut accepted = false;
        if delta.iter().any(|v| v[0] != 0.0 || v[1] != 0.0) {
            let mut scale = 1.0;
            for _ in 0..=HALVINGS {
                let step: Interior = delta.iter().map(|v| [v[0] * scale, v[1] * scale]).collect();
                let next: Interior = d.iter().zip(&step).map(|(a, b)| [a[0] + b[0], a[1] + b[1]]).collect();
                let (l, c) = solver.loss(&next);
                if c * 2 >= count && l <= loss_before {
                    applied = step;
                    d = next;
                    loss = l;
                    count = c;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
        }
        trace.records.push(IterationRecord {
            stage: Stage::T,
            iteration: k,
            delta: apply_dirichlet(&applied, n),
            accumulated: apply_dirichlet(&d, n),
            loss_before,
            loss_after: if accepted { loss } else { loss_before },
            accepted,
        });
    }
    Ok((ControlGrid::new(n, region, &d)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_step_limits_each_point() {
        let c = cap_step(&vec![[1.5, 2.0], [30.0, 40.0]], 4.0);
        assert_eq!(c[0], [1.5, 2.0]);
        assert!((c[1][0] - 2.4).abs() < 1e-12 && (c[1][1] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn jacobian_of_affine_map() {
        let h = Homography::from_matrix([[1.2, 0.1, 3.0], [-0.2, 0.9, 1.0], [0.0, 0.0, 1.0]]);
        let j = jacobian(&h, [10.0, 20.0]).unwrap();
        assert!((j[0][0] - 1.2).abs() < 1e-12 && (j[0][1] - 0.1).abs() < 1e-12);
        assert!((j[1][0] + 0.2).abs() < 1e-12 && (j[1][1] - 0.9).abs() < 1e-12);
    }
}
