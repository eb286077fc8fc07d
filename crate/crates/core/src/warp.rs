//! Backward warping, canvas sizing and layer blending.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::homography::{Homography, DENOM_EPS};
use crate::raster::{Grid, Image};
use crate::scalar::Real;
use crate::tps::WarpField;

/// Default bound on canvas area, as a multiple of the reference frame area.
pub const DEFAULT_AREA_CAP: f64 = 16.0;

/// `W(I, X)`: output pixel `p` takes the bilinear sample of `img` at `grid(p)`.
///
/// Samples that are non-finite or outside `[0, w-1] x [0, h-1]` are marked invalid.
pub fn warp_image<T: Real>(img: &Image<T>, grid: &Grid<T>) -> Image<T> {
    let c = img.channels();
    let (w, h) = (grid.width, grid.height);
    let mut data = vec![T::zero(); w * h * c];
    let mut valid = vec![false; w * h];
    data.par_chunks_mut(w * c).zip(valid.par_chunks_mut(w)).enumerate().for_each(|(row, (d, v))| {
        let mut px = [T::zero(); 3];
        for col in 0..w {
            let [x, y] = grid.coords[row * w + col];
            if img.sample(x, y, &mut px) {
                d[col * c..(col + 1) * c].copy_from_slice(&px[..c]);
                v[col] = true;
            }
        }
    });
    Image::from_parts(w, h, c, data, valid)
}

/// Stitched frame: every layer is already resampled into canvas coordinates.
#[derive(Debug, Clone)]
pub struct Canvas<T> {
    pub width: usize,
    pub height: usize,
    /// Canvas pixel of reference pixel `(0, 0)`.
    pub offset: [i64; 2],
    pub layers: Vec<Image<T>>,
}

/// One target to place on a canvas: `h` maps reference coordinates into the target,
/// `field` adds a displacement (in target pixels) on top of `h · p`.
pub struct Placement<'a, T> {
    pub image: &'a Image<T>,
    pub homography: &'a Homography<T>,
    pub field: &'a WarpField<T>,
}

/// Sizes the canvas for one target and resamples both images onto it.
pub fn compute_canvas<T: Real>(
    reference: &Image<T>,
    target: &Image<T>,
    h: &Homography<T>,
    field: &WarpField<T>,
    area_cap: f64,
) -> Result<Canvas<T>> {
    compute_canvas_multi(reference, &[Placement { image: target, homography: h, field }], area_cap)
}

/// Reference-frame bounding box of a target placed by `h`, grown by `pad` pixels.
fn target_footprint<T: Real>(target: &Image<T>, h: &Homography<T>, pad: f64) -> Result<[f64; 4]> {
    let inv = h.invert().map_err(|_| Error::UnreasonableWarp("singular homography".into()))?;
    let (tw, th) = (target.width() as f64 - 1.0, target.height() as f64 - 1.0);
    let corners = [[0.0, 0.0], [tw, 0.0], [0.0, th], [tw, th]];
    let mut sign = 0.0;
    let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in corners {
        let p = [T::lit(c[0]), T::lit(c[1])];
        let den = inv.denominator(p).as_f64();
        if den.abs() < DENOM_EPS || (sign != 0.0 && den.signum() != sign) {
            return Err(Error::UnreasonableWarp("target footprint crosses the horizon".into()));
        }
        sign = den.signum();
        let q = inv
            .apply_point(p)
            .ok_or_else(|| Error::UnreasonableWarp("target corner maps to infinity".into()))?;
        let (x, y) = (q[0].as_f64(), q[1].as_f64());
        bb = [bb[0].min(x - pad), bb[1].min(y - pad), bb[2].max(x + pad), bb[3].max(y + pad)];
    }
    Ok(bb)
}

/// Canvas size and the canvas position of reference pixel `(0, 0)` for the given
/// placements; `UnreasonableWarp` when the area exceeds `area_cap` reference areas.
pub fn canvas_extent<T: Real>(
    reference: &Image<T>,
    targets: &[Placement<'_, T>],
    area_cap: f64,
) -> Result<(usize, usize, [i64; 2])> {
    let (rw, rh) = reference.size();
    let mut bb = [0.0, 0.0, rw as f64 - 1.0, rh as f64 - 1.0];
    for t in targets {
        let pad = t.field.max_magnitude().as_f64().ceil();
        let f = target_footprint(t.image, t.homography, pad)?;
        bb = [bb[0].min(f[0]), bb[1].min(f[1]), bb[2].max(f[2]), bb[3].max(f[3])];
    }
    if !bb.iter().all(|v| v.is_finite()) {
        return Err(Error::UnreasonableWarp("non-finite canvas bounds".into()));
    }
    let (x0, y0) = (bb[0].floor(), bb[1].floor());
    let (x1, y1) = (bb[2].ceil(), bb[3].ceil());
    let width = x1 - x0 + 1.0;
    let height = y1 - y0 + 1.0;
    let cap = area_cap * (rw * rh) as f64;
    if width * height > cap {
        return Err(Error::UnreasonableWarp(format!(
            "canvas {width}x{height} exceeds {area_cap}x the input area"
        )));
    }
    Ok((width as usize, height as usize, [-(x0 as i64), -(y0 as i64)]))
}

/// Canvas holding the reference (layer 0) and every placed target, in order.
pub fn compute_canvas_multi<T: Real>(
    reference: &Image<T>,
    targets: &[Placement<'_, T>],
    area_cap: f64,
) -> Result<Canvas<T>> {
    let (width, height, offset) = canvas_extent(reference, targets, area_cap)?;
    let mut layers = Vec::with_capacity(targets.len() + 1);
    layers.push(place_reference(reference, width, height, offset));
    for t in targets {
        layers.push(place_target(t, width, height, offset));
    }
    Ok(Canvas { width, height, offset, layers })
}

fn place_reference<T: Real>(img: &Image<T>, width: usize, height: usize, offset: [i64; 2]) -> Image<T> {
    let c = img.channels();
    let mut data = vec![T::zero(); width * height * c];
    let mut valid = vec![false; width * height];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let cx = (x as i64 + offset[0]) as usize;
            let cy = (y as i64 + offset[1]) as usize;
            if img.is_valid(x, y) {
                valid[cy * width + cx] = true;
                for ch in 0..c {
                    data[(cy * width + cx) * c + ch] = img.get(x, y, ch);
                }
            }
        }
    }
    Image::from_parts(width, height, c, data, valid)
}

fn place_target<T: Real>(t: &Placement<'_, T>, width: usize, height: usize, offset: [i64; 2]) -> Image<T> {
    let mut coords = Vec::with_capacity(width * height);
    for cy in 0..height {
        for cx in 0..width {
            let px = cx as i64 - offset[0];
            let py = cy as i64 - offset[1];
            let p = [T::lit(px as f64), T::lit(py as f64)];
            let coord = match t.homography.apply_point(p) {
                Some(q) => {
                    let f = t.field.at_pixel(px, py);
                    [q[0] + f[0], q[1] + f[1]]
                }
                None => [T::nan(), T::nan()],
            };
            coords.push(coord);
        }
    }
    warp_image(t.image, &Grid { width, height, coords })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendMode {
    /// Equal-weight mean on the overlap.
    Average,
    /// Weight ramps linearly across the overlap along its longer axis.
    Linear,
}

impl std::str::FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(BlendMode::Average),
            "linear" => Ok(BlendMode::Linear),
            other => Err(Error::InvalidArgument(format!("unknown blend mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for BlendMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlendMode::Average => "average",
            BlendMode::Linear => "linear",
        })
    }
}

/// Composites the canvas layers pairwise in order: `((L0 ⊕ L1) ⊕ L2) ...`.
pub fn blend<T: Real>(canvas: &Canvas<T>, mode: BlendMode) -> Image<T> {
    let mut layers = canvas.layers.iter();
    let first = layers.next().expect("canvas has at least one layer").clone();
    layers.fold(first, |acc, next| blend_pair(&acc, next, mode))
}

fn broadcast<T: Real>(img: &Image<T>, channels: usize) -> Image<T> {
    if img.channels() == channels {
        return img.clone();
    }
    let data = img.data().iter().flat_map(|v| std::iter::repeat_n(*v, channels)).collect();
    Image::from_parts(img.width(), img.height(), channels, data, img.valid().to_vec())
}

/// Mean coordinate along `axis` of the pixels selected by `pick`.
fn centroid(w: usize, h: usize, axis: usize, pick: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if pick(y * w + x) {
                s += if axis == 0 { x as f64 } else { y as f64 };
                n += 1;
            }
        }
    }
    (n > 0).then(|| s / n as f64)
}

fn blend_pair<T: Real>(a: &Image<T>, b: &Image<T>, mode: BlendMode) -> Image<T> {
    assert_eq!(a.size(), b.size(), "layers must share the canvas size");
    let c = a.channels().max(b.channels());
    let (a, b) = (broadcast(a, c), broadcast(b, c));
    let (w, h) = a.size();
    let (va, vb) = (a.valid(), b.valid());

    // overlap box and ramp geometry
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if va[i] && vb[i] {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    let axis = if x1 >= x0 && (x1 - x0) < (y1.saturating_sub(y0)) { 1 } else { 0 };
    let (lo, hi) = if axis == 0 { (x0, x1) } else { (y0, y1) };
    let only_a = centroid(w, h, axis, |i| va[i] && !vb[i]);
    let only_b = centroid(w, h, axis, |i| vb[i] && !va[i]);
    let flip = match (only_a, only_b) {
        (Some(ca), Some(cb)) => cb < ca,
        _ => {
            let ca = centroid(w, h, axis, |i| va[i]);
            let cb = centroid(w, h, axis, |i| vb[i]);
            matches!((ca, cb), (Some(ca), Some(cb)) if cb < ca)
        }
    };

    let half = T::lit(0.5);
    let mut data = vec![T::zero(); w * h * c];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let out = &mut data[i * c..(i + 1) * c];
            match (va[i], vb[i]) {
                (true, true) => {
                    let wb = match mode {
                        BlendMode::Average => half,
                        BlendMode::Linear => {
                            let pos = if axis == 0 { x } else { y };
                            let t = if hi > lo { (pos - lo) as f64 / (hi - lo) as f64 } else { 0.5 };
                            T::lit(if flip { 1.0 - t } else { t })
                        }
                    };
                    for (ch, o) in out.iter_mut().enumerate() {
                        let (pa, pb) = (a.get(x, y, ch), b.get(x, y, ch));
                        let v = match mode {
                            BlendMode::Average => (pa + pb) * half,
                            BlendMode::Linear => pa * (T::one() - wb) + pb * wb,
                        };
                        // keep the convex combination inside the envelope despite rounding
                        *o = v.max(pa.min(pb)).min(pa.max(pb));
                    }
                    valid[i] = true;
                }
                (true, false) => {
                    out.copy_from_slice(&a.data()[i * c..(i + 1) * c]);
                    valid[i] = true;
                }
                (false, true) => {
                    out.copy_from_slice(&b.data()[i * c..(i + 1) * c]);
                    valid[i] = true;
                }
                (false, false) => {}
            }
        }
    }
    Image::from_parts(w, h, c, data, valid)
}
