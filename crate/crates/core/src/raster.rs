//! Raster, grid and mask types shared by every stage of the pipeline.
//!
//! Coordinates are in pixel units with pixel centers at integer positions:
//! `x` grows to the right (columns), `y` grows downward (rows).

use crate::error::{Error, Result};
use crate::homography::Homography;
use crate::scalar::Real;

/// Luma weights used when collapsing RGB to a single alignment channel.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major raster with 1 or 3 channels in `[0, 1]` plus a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> Image<T> {
    /// Builds an image with every pixel valid.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let valid = vec![true; width * height];
        Self::with_mask(width, height, channels, data, valid)
    }

    pub fn with_mask(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<T>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero-sized image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if valid.len() != width * height {
            return Err(Error::InvalidImage("validity mask length mismatch".into()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
            return Err(Error::InvalidImage(format!("intensity {v:?} outside [0,1]")));
        }
        Ok(Self { width, height, channels, data, valid })
    }

    /// Constant image, all pixels valid.
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        let v = value.max(T::zero()).min(T::one());
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
            valid: vec![true; width * height],
        }
    }

    /// Single-channel image from a closure of `(x, y)`; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).max(T::zero()).min(T::one()));
            }
        }
        Self { width, height, channels: 1, data, valid: vec![true; width * height] }
    }

    /// Builds from raw parts without range checks. Callers guarantee the invariants.
    pub(crate) fn from_parts(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<T>,
        valid: Vec<bool>,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        debug_assert_eq!(valid.len(), width * height);
        Self { width, height, channels, data, valid }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Single-channel luma version; grayscale images are returned unchanged.
    pub fn to_gray(&self) -> Image<T> {
        if self.channels == 1 {
            return self.clone();
        }
        let w = [T::lit(LUMA[0]), T::lit(LUMA[1]), T::lit(LUMA[2])];
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| (w[0] * px[0] + w[1] * px[1] + w[2] * px[2]).min(T::one()))
            .collect();
        Image::from_parts(self.width, self.height, 1, data, self.valid.clone())
    }

    /// Maps every intensity through `f`, leaving the mask untouched.
    pub fn map(&self, f: impl Fn(T) -> T) -> Image<T> {
        let data = self.data.iter().map(|v| f(*v).max(T::zero()).min(T::one())).collect();
        Image::from_parts(self.width, self.height, self.channels, data, self.valid.clone())
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> Image<U> {
        let data = self.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Image::from_parts(self.width, self.height, self.channels, data, self.valid.clone())
    }

    /// Bilinear sample of every channel at `(x, y)`.
    ///
    /// Returns `None` when the point is non-finite, lies outside `[0, w-1] x [0, h-1]`,
    /// or any contributing source pixel is invalid.
    pub fn sample(&self, x: T, y: T, out: &mut [T]) -> bool {
        if !(x.is_finite() && y.is_finite()) {
            return false;
        }
        let wmax = T::lit((self.width - 1) as f64);
        let hmax = T::lit((self.height - 1) as f64);
        if x < T::zero() || y < T::zero() || x > wmax || y > hmax {
            return false;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let xi = x0.to_usize().unwrap_or(0).min(self.width - 1);
        let yi = y0.to_usize().unwrap_or(0).min(self.height - 1);
        let xj = (xi + 1).min(self.width - 1);
        let yj = (yi + 1).min(self.height - 1);
        let zero = T::zero();
        let w00 = (T::one() - fx) * (T::one() - fy);
        let w10 = fx * (T::one() - fy);
        let w01 = (T::one() - fx) * fy;
        let w11 = fx * fy;
        let taps = [(xi, yi, w00), (xj, yi, w10), (xi, yj, w01), (xj, yj, w11)];
        for &(tx, ty, w) in &taps {
            if w != zero && !self.is_valid(tx, ty) {
                return false;
            }
        }
        let c = self.channels;
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            *o = self.get(xi, yi, ch) * w00
                + self.get(xj, yi, ch) * w10
                + self.get(xi, yj, ch) * w01
                + self.get(xj, yj, ch) * w11;
        }
        true
    }
}

/// Point lattice stored row-major; `coords[i * width + j]` is the point for column `j`, row `i`.
///
/// Entries may be non-finite (`NaN`) to flag points that could not be mapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[T; 2]>,
}

impl<T: Real> Grid<T> {
    pub fn new(width: usize, height: usize, coords: Vec<[T; 2]>) -> Result<Self> {
        if coords.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "grid has {} coords, expected {}",
                coords.len(),
                width * height
            )));
        }
        Ok(Self { width, height, coords })
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> [T; 2] {
        self.coords[row * self.width + col]
    }

    /// Adds a constant offset to every coordinate.
    pub fn translated(&self, dx: T, dy: T) -> Grid<T> {
        Grid {
            width: self.width,
            height: self.height,
            coords: self.coords.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }
}

/// The uniform grid `U`: column `j`, row `i` holds `(j, i)`.
pub fn make_uniform_grid<T: Real>(width: usize, height: usize) -> Grid<T> {
    assert!(width >= 1 && height >= 1, "grid must be at least 1x1");
    let mut coords = Vec::with_capacity(width * height);
    for i in 0..height {
        for j in 0..width {
            coords.push([T::lit(j as f64), T::lit(i as f64)]);
        }
    }
    Grid { width, height, coords }
}

/// Pixels of a frame that take part in the overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMask {
    pub width: usize,
    pub height: usize,
    pub inside: Vec<bool>,
    pub pixel_count: usize,
}

impl OverlapMask {
    pub fn from_inside(width: usize, height: usize, inside: Vec<bool>) -> Self {
        assert_eq!(inside.len(), width * height);
        let pixel_count = inside.iter().filter(|v| **v).count();
        Self { width, height, inside, pixel_count }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::from_inside(width, height, vec![true; width * height])
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.inside[y * self.width + x]
    }

    /// Fraction of the frame covered.
    pub fn ratio(&self) -> f64 {
        self.pixel_count as f64 / (self.width * self.height) as f64
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of the covered set.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        if self.pixel_count == 0 {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.contains(x, y) {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        Some((x0, y0, x1, y1))
    }

    pub fn intersect(&self, other: &OverlapMask) -> OverlapMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let inside = self.inside.iter().zip(&other.inside).map(|(a, b)| *a && *b).collect();
        OverlapMask::from_inside(self.width, self.height, inside)
    }
}

/// Overlap of the reference frame with the target under `h`.
///
/// `h` maps reference pixel coordinates into target pixel coordinates (the sampling
/// direction used throughout the pipeline). A reference pixel `p` is inside when
/// `h · p` lands within `[0, tw-1] x [0, th-1]`.
pub fn overlap_mask<T: Real>(
    ref_size: (usize, usize),
    h: &Homography<T>,
    tgt_size: (usize, usize),
) -> Result<OverlapMask> {
    h.check_invertible()?;
    let (rw, rh) = ref_size;
    let (tw, th) = tgt_size;
    let wmax = T::lit(tw as f64 - 1.0);
    let hmax = T::lit(th as f64 - 1.0);
    let mut inside = Vec::with_capacity(rw * rh);
    for y in 0..rh {
        for x in 0..rw {
            let hit = match h.apply_point([T::lit(x as f64), T::lit(y as f64)]) {
                Some([u, v]) => u >= T::zero() && v >= T::zero() && u <= wmax && v <= hmax,
                None => false,
            };
            inside.push(hit);
        }
    }
    Ok(OverlapMask::from_inside(rw, rh, inside))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_examples() {
        let g = make_uniform_grid::<f64>(2, 2);
        assert_eq!(g.coords, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let g = make_uniform_grid::<f64>(1, 1);
        assert_eq!(g.coords, vec![[0.0, 0.0]]);
        let g = make_uniform_grid::<f32>(3, 1);
        assert_eq!(g.coords, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn grid_index_round_trip_is_bitwise() {
        let g = make_uniform_grid::<f64>(7, 5).translated(0.1, -0.3);
        let mut coords = Vec::new();
        for r in 0..g.height {
            for c in 0..g.width {
                coords.push(g.at(c, r));
            }
        }
        let rebuilt = Grid::new(g.width, g.height, coords).unwrap();
        for (a, b) in rebuilt.coords.iter().zip(&g.coords) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::<f64>::new(2, 1, 1, vec![0.5, 1.5]).is_err());
        assert!(Image::<f64>::new(2, 1, 1, vec![0.5, f64::NAN]).is_err());
        assert!(Image::<f64>::new(2, 1, 2, vec![0.5; 4]).is_err());
        assert!(Image::<f64>::new(2, 2, 1, vec![0.5; 3]).is_err());
        assert!(Image::<f64>::new(2, 2, 3, vec![0.5; 12]).is_ok());
    }

    #[test]
    fn luma_weights() {
        let img = Image::<f64>::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.to_gray().get(0, 0, 0) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn overlap_identity_is_full() {
        let m = overlap_mask((40, 30), &Homography::<f64>::identity(), (40, 30)).unwrap();
        assert_eq!(m.pixel_count, 40 * 30);
        assert_eq!(m.ratio(), 1.0);
    }

    #[test]
    fn overlap_half_translation() {
        let w = 64;
        let h = Homography::<f64>::translation(w as f64 / 2.0, 0.0);
        let m = overlap_mask((w, 48), &h, (w, 48)).unwrap();
        // rectangle intersection: [0, w-1] ∩ [-w/2, w/2 - 1] spans w/2 columns
        let oracle = (w / 2) as f64 / w as f64;
        assert!((m.ratio() - oracle).abs() <= 1.0 / w as f64);
    }

    #[test]
    fn overlap_disjoint() {
        let h = Homography::<f64>::translation(2.0 * 50.0, 0.0);
        let m = overlap_mask((50, 20), &h, (50, 20)).unwrap();
        assert_eq!(m.pixel_count, 0);
        assert!(m.bounding_box().is_none());
    }

    #[test]
    fn overlap_singular_errors() {
        let h = Homography::<f64>::from_matrix([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(overlap_mask((4, 4), &h, (4, 4)), Err(Error::SingularHomography));
    }

    #[test]
    fn overlap_swap_symmetry() {
        let h = Homography::<f64>::from_matrix([
            [1.02, 0.03, 17.0],
            [-0.02, 0.98, -9.0],
            [1e-4, -5e-5, 1.0],
        ]);
        let (w, hh) = (80, 60);
        let a = overlap_mask((w, hh), &h, (w, hh)).unwrap();
        let b = overlap_mask((w, hh), &h.invert().unwrap(), (w, hh)).unwrap();
        // perimeter-scale rasterization slack
        let slack = 2.0 * (w + hh) as f64 / (w * hh) as f64;
        assert!((a.ratio() - b.ratio()).abs() <= slack, "{} vs {}", a.ratio(), b.ratio());
    }
}
