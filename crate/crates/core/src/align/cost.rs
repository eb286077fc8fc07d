//! All-pairs normalized correlation between coarse patch descriptors.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{Grid, Image};

pub const MIN_IMAGE_SIDE: usize = 64;
pub const CELL: usize = 8;
pub const PATCH: usize = 7;
pub const LOOKUP_RADIUS: usize = 3;
/// Upper bound on stored level-0 entries; the cell size doubles until it fits.
const MAX_ENTRIES: usize = 1 << 24;
const ROW_BLOCK: usize = 256;

/// Correlation tensor for one pyramid level, indexed `[ref_cell][tgt_cell]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLevel {
    pub tgt_width: usize,
    pub tgt_height: usize,
    pub corr: Vec<f32>,
}

impl CostLevel {
    #[inline]
    fn row(&self, r: usize) -> &[f32] {
        let n = self.tgt_width * self.tgt_height;
        &self.corr[r * n..(r + 1) * n]
    }

    /// Bilinear value at fractional target cell `(x, y)`; `None` outside the level.
    fn bilinear(&self, r: usize, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.tgt_width, self.tgt_height);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        let row = self.row(r);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let v = |xx: usize, yy: usize| row[yy * w + xx] as f64;
        Some(
            v(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + v(x1, y0) * fx * (1.0 - fy)
                + v(x0, y1) * (1.0 - fx) * fy
                + v(x1, y1) * fx * fy,
        )
    }
}

/// Level 0 holds correlations at cell resolution; level `ℓ+1` averages 2×2 blocks of
/// target cells of level `ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    /// Pixel side of a level-0 cell.
    pub cell: usize,
    pub ref_width: usize,
    pub ref_height: usize,
    pub levels: Vec<CostLevel>,
}

impl CostVolume {
    /// Pixel coordinate of the center of cell index `j`.
    #[inline]
    pub fn cell_center(&self, j: f64) -> f64 {
        self.cell as f64 * j + 0.5 * (self.cell as f64 - 1.0)
    }

    /// Cell coordinate of pixel coordinate `x`.
    #[inline]
    pub fn to_cell(&self, x: f64) -> f64 {
        (x - 0.5 * (self.cell as f64 - 1.0)) / self.cell as f64
    }

    pub fn corr(&self, level: usize, ref_cell: (usize, usize), tgt_cell: (usize, usize)) -> f32 {
        let l = &self.levels[level];
        l.row(ref_cell.1 * self.ref_width + ref_cell.0)[tgt_cell.1 * l.tgt_width + tgt_cell.0]
    }
}

/// Box-averaged cells; `NaN` where no pixel of the cell is valid.
fn cell_means(gray: &Image<f64>, cell: usize) -> (usize, usize, Vec<f64>) {
    let (w, h) = gray.size();
    let (cw, ch) = (w / cell, h / cell);
    let mut out = vec![f64::NAN; cw * ch];
    for cy in 0..ch {
        for cx in 0..cw {
            let (mut s, mut n) = (0.0, 0usize);
            for y in cy * cell..(cy + 1) * cell {
                for x in cx * cell..(cx + 1) * cell {
                    if gray.is_valid(x, y) {
                        s += gray.get(x, y, 0);
                        n += 1;
                    }
                }
            }
            if n > 0 {
                out[cy * cw + cx] = s / n as f64;
            }
        }
    }
    (cw, ch, out)
}

const ZERO_VARIANCE: f64 = 1e-10;

/// Unit-norm, zero-mean `PATCH × PATCH` descriptors with edge clamping. Constant or
/// partially invalid patches get the zero descriptor.
fn descriptors(cw: usize, ch: usize, cells: &[f64]) -> DMatrix<f32> {
    let dim = PATCH * PATCH;
    let r = (PATCH / 2) as i64;
    let mut m = DMatrix::<f32>::zeros(cw * ch, dim);
    let mut patch = vec![0.0; dim];
    for cy in 0..ch {
        for cx in 0..cw {
            let mut ok = true;
            for (k, v) in patch.iter_mut().enumerate() {
                let dx = (k % PATCH) as i64 - r;
                let dy = (k / PATCH) as i64 - r;
                let x = (cx as i64 + dx).clamp(0, cw as i64 - 1) as usize;
                let y = (cy as i64 + dy).clamp(0, ch as i64 - 1) as usize;
                *v = cells[y * cw + x];
                ok &= v.is_finite();
            }
            if !ok {
                continue;
            }
            let mean = patch.iter().sum::<f64>() / dim as f64;
            let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            if var <= ZERO_VARIANCE * dim as f64 {
                continue;
            }
            let inv = 1.0 / var.sqrt();
            for (k, v) in patch.iter().enumerate() {
                m[(cy * cw + cx, k)] = ((v - mean) * inv) as f32;
            }
        }
    }
    m
}

fn pool(level: &CostLevel, rows: usize) -> CostLevel {
    let (w, h) = (level.tgt_width, level.tgt_height);
    let (nw, nh) = ((w / 2).max(1), (h / 2).max(1));
    let n = w * h;
    let mut corr = vec![0.0f32; rows * nw * nh];
    corr.par_chunks_mut(nw * nh).enumerate().for_each(|(r, out)| {
        let src = &level.corr[r * n..(r + 1) * n];
        for y in 0..nh {
            for x in 0..nw {
                let mut s = 0.0f32;
                let mut c = 0.0f32;
                for (yy, xx) in [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)] {
                    if xx < w && yy < h {
                        s += src[yy * w + xx];
                        c += 1.0;
                    }
                }
                out[y * nw + x] = s / c;
            }
        }
    });
    CostLevel { tgt_width: nw, tgt_height: nh, corr }
}

/// Builds a cost volume with `levels` pyramid levels (at least one).
pub fn build_cost_volume(reference: &Image<f64>, target: &Image<f64>, levels: usize) -> Result<CostVolume> {
    for img in [reference, target] {
        let (w, h) = img.size();
        if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
            return Err(Error::ImageTooSmall { width: w, height: h, min: MIN_IMAGE_SIDE });
        }
    }
    let mut cell = CELL;
    loop {
        let rc = (reference.width() / cell) * (reference.height() / cell);
        let tc = (target.width() / cell) * (target.height() / cell);
        if rc * tc <= MAX_ENTRIES {
            break;
        }
        cell *= 2;
    }
    let (rw, rh, rcells) = cell_means(&reference.to_gray(), cell);
    let (tw, th, tcells) = cell_means(&target.to_gray(), cell);
    let rd = descriptors(rw, rh, &rcells);
    let td = descriptors(tw, th, &tcells);
    let rows = rw * rh;
    let ntgt = tw * th;
    let mut corr = vec![0.0f32; rows * ntgt];
    // column-major (tgt x ref) product is the row-major [ref][tgt] layout
    corr.par_chunks_mut(ROW_BLOCK * ntgt).enumerate().for_each(|(b, out)| {
        let r0 = b * ROW_BLOCK;
        let nr = out.len() / ntgt;
        let block = &td * rd.rows(r0, nr).transpose();
        out.copy_from_slice(block.as_slice());
        out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    });
    let mut lv = vec![CostLevel { tgt_width: tw, tgt_height: th, corr }];
    for _ in 1..levels.max(1) {
        let next = pool(lv.last().expect("level 0 exists"), rows);
        lv.push(next);
    }
    Ok(CostVolume { cell, ref_width: rw, ref_height: rh, levels: lv })
}

/// Correlation windows gathered around per-cell correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSlice {
    pub width: usize,
    pub height: usize,
    pub radius: usize,
    pub levels: usize,
    /// `[cell][level][(dy + r)·(2r+1) + (dx + r)]`.
    pub values: Vec<f32>,
    /// Set where the window entry fell outside the target support.
    pub flagged: Vec<bool>,
}

impl CostSlice {
    fn window(&self) -> usize {
        (2 * self.radius + 1) * (2 * self.radius + 1)
    }

    pub fn entries(&self, cell: usize, level: usize) -> (&[f32], &[bool]) {
        let n = self.window();
        let o = (cell * self.levels + level) * n;
        (&self.values[o..o + n], &self.flagged[o..o + n])
    }
}

/// Samples a `(2r+1)²` window at every level around `grid`, which holds one target
/// position per reference cell, in level-0 target cell units.
pub fn lookup(cv: &CostVolume, grid: &Grid<f64>, radius: usize) -> CostSlice {
    assert_eq!((grid.width, grid.height), (cv.ref_width, cv.ref_height));
    let side = 2 * radius + 1;
    let n = side * side;
    let nl = cv.levels.len();
    let cells = grid.width * grid.height;
    let mut values = vec![0.0f32; cells * nl * n];
    let mut flagged = vec![true; cells * nl * n];
    for (c, p) in grid.coords.iter().enumerate() {
        let mut pos = *p;
        for (l, level) in cv.levels.iter().enumerate() {
            if l > 0 {
                pos = [(pos[0] - 0.5) / 2.0, (pos[1] - 0.5) / 2.0];
            }
            for k in 0..n {
                let dx = (k % side) as f64 - radius as f64;
                let dy = (k / side) as f64 - radius as f64;
                if let Some(v) = level.bilinear(c, pos[0] + dx, pos[1] + dy) {
                    let o = (c * nl + l) * n + k;
                    values[o] = v as f32;
                    flagged[o] = false;
                }
            }
        }
    }
    CostSlice { width: grid.width, height: grid.height, radius, levels: nl, values, flagged }
}

/// Index of the maximum with ties broken by smallest `|δ|`, then by `(dy, dx)`.
fn argmax_window(vals: &[f32], flags: &[bool], side: usize) -> Option<(usize, f32)> {
    let r = (side / 2) as i64;
    let mut best: Option<(usize, f32, (i64, i64, i64))> = None;
    for (k, (v, f)) in vals.iter().zip(flags).enumerate() {
        if *f {
            continue;
        }
        let dx = (k % side) as i64 - r;
        let dy = (k / side) as i64 - r;
        let key = (dx * dx + dy * dy, dy, dx);
        let better = match &best {
            None => true,
            Some((_, bv, bk)) => *v > *bv || (*v == *bv && key < *bk),
        };
        if better {
            best = Some((k, *v, key));
        }
    }
    best.map(|(k, v, _)| (k, v))
}

fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if den < 0.0 {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Window peak of one cell at one level: sub-cell offset from the window center (in
/// that level's cells) and the peak correlation.
pub fn window_peak(slice: &CostSlice, cell: usize, level: usize) -> Option<([f64; 2], f32)> {
    let side = 2 * slice.radius + 1;
    let (vals, flags) = slice.entries(cell, level);
    let (k, v) = argmax_window(vals, flags, side)?;
    let (kx, ky) = (k % side, k / side);
    let at = |x: usize, y: usize| {
        let i = y * side + x;
        (!flags[i]).then(|| vals[i] as f64)
    };
    let mut off = [kx as f64 - slice.radius as f64, ky as f64 - slice.radius as f64];
    if kx > 0 && kx + 1 < side {
        if let (Some(a), Some(b)) = (at(kx - 1, ky), at(kx + 1, ky)) {
            off[0] += parabolic(a, v as f64, b);
        }
    }
    if ky > 0 && ky + 1 < side {
        if let (Some(a), Some(b)) = (at(kx, ky - 1), at(kx, ky + 1)) {
            off[1] += parabolic(a, v as f64, b);
        }
    }
    Some((off, v))
}

/// Global best match of every reference cell over the whole level-0 target, with
/// sub-cell refinement. Entries are `(target cell position, peak)`.
pub fn global_matches(cv: &CostVolume) -> Vec<Option<([f64; 2], f32)>> {
    let l = &cv.levels[0];
    let (w, h) = (l.tgt_width, l.tgt_height);
    (0..cv.ref_width * cv.ref_height)
        .map(|r| {
            let row = l.row(r);
            let (rx, ry) = ((r % cv.ref_width) as i64, (r / cv.ref_width) as i64);
            let mut best: Option<(usize, f32, (i64, i64, i64))> = None;
            for (k, v) in row.iter().enumerate() {
                let dx = (k % w) as i64 - rx;
                let dy = (k / w) as i64 - ry;
                let key = (dx * dx + dy * dy, dy, dx);
                let better = match &best {
                    None => true,
                    Some((_, bv, bk)) => *v > *bv || (*v == *bv && key < *bk),
                };
                if better {
                    best = Some((k, *v, key));
                }
            }
            let (k, v, _) = best?;
            if v <= 0.0 {
                return None;
            }
            let (kx, ky) = (k % w, k / w);
            let mut pos = [kx as f64, ky as f64];
            if kx > 0 && kx + 1 < w {
                pos[0] += parabolic(row[k - 1] as f64, v as f64, row[k + 1] as f64);
            }
            if ky > 0 && ky + 1 < h {
                pos[1] += parabolic(row[k - w] as f64, v as f64, row[k + w] as f64);
            }
            Some((pos, v))
        })
        .collect()
}
