//! Projective transforms parameterized by four corner displacements.

use crate::error::{Error, Result};
use crate::linalg::{rcond1, Lu};
use crate::raster::Grid;
use crate::scalar::Real;

/// Homogeneous denominators below this magnitude are treated as points at infinity.
pub const DENOM_EPS: f64 = 1e-12;
/// Reciprocal condition number below which the four-point system is rejected.
pub const DLT_RCOND_MIN: f64 = 1e-10;

/// 3x3 projective matrix, normalized so `m[2][2] == 1` whenever that entry is usable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Homography<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, tx], [z, o, ty], [z, z, o]] }
    }

    /// Wraps and normalizes a raw matrix.
    pub fn from_matrix(m: [[T; 3]; 3]) -> Self {
        Self { m: normalize(m) }
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    fn frobenius(&self) -> T {
        self.m.iter().flatten().fold(T::zero(), |s, v| s + *v * *v).sqrt()
    }

    /// Fails with `SingularHomography` when `|det|` is negligible relative to the matrix scale.
    pub fn check_invertible(&self) -> Result<()> {
        let f = self.frobenius();
        let d = self.det();
        if !d.is_finite() || f == T::zero() || d.abs() <= T::lit(DENOM_EPS) * f * f * f {
            return Err(Error::SingularHomography);
        }
        Ok(())
    }

    /// Maps one point; `None` when the homogeneous denominator vanishes.
    #[inline]
    pub fn apply_point(&self, p: [T; 2]) -> Option<[T; 2]> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if !(w.abs() >= T::lit(DENOM_EPS)) {
            return None;
        }
        let x = (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w;
        let y = (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w;
        if x.is_finite() && y.is_finite() {
            Some([x, y])
        } else {
            None
        }
    }

    /// Homogeneous denominator at `p`, useful to detect points behind the horizon.
    #[inline]
    pub fn denominator(&self, p: [T; 2]) -> T {
        self.m[2][0] * p[0] + self.m[2][1] * p[1] + self.m[2][2]
    }

    /// Maps every grid point. Points at infinity come back as `NaN`.
    pub fn apply(&self, g: &Grid<T>) -> Grid<T> {
        let nan = T::nan();
        Grid {
            width: g.width,
            height: g.height,
            coords: g.coords.iter().map(|p| self.apply_point(*p).unwrap_or([nan, nan])).collect(),
        }
    }

    pub fn invert(&self) -> Result<Self> {
        self.check_invertible()?;
        let m = &self.m;
        let d = self.det();
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut inv = adj;
        for row in inv.iter_mut() {
            for v in row.iter_mut() {
                *v = *v / d;
            }
        }
        Ok(Self::from_matrix(inv))
    }

    /// `self · other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::from_matrix(matmul(&self.m, &other.m))
    }

    pub fn cast<U: Real>(&self) -> Homography<U> {
        let mut m = [[U::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = U::lit(self.m[r][c].as_f64());
            }
        }
        Homography { m }
    }
}

pub(crate) fn matmul<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

fn normalize<T: Real>(mut m: [[T; 3]; 3]) -> [[T; 3]; 3] {
    let s = m[2][2];
    let scale = if s.abs() >= T::lit(DENOM_EPS) {
        s
    } else {
        let f = m.iter().flatten().fold(T::zero(), |a, v| a + *v * *v).sqrt();
        if f == T::zero() {
            return m;
        }
        f
    };
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v = *v / scale;
        }
    }
    m
}

/// The four frame corners `(0,0), (w,0), (0,h), (w,h)` in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet<T> {
    pub corners: [[T; 2]; 4],
}

impl<T: Real> CornerSet<T> {
    pub fn of_frame(width: usize, height: usize) -> Self {
        let (w, h) = (T::lit(width as f64), T::lit(height as f64));
        let z = T::zero();
        Self { corners: [[z, z], [w, z], [z, h], [w, h]] }
    }

    pub fn displaced(&self, d: &CornerDisplacement<T>) -> [[T; 2]; 4] {
        let mut out = self.corners;
        for (o, dd) in out.iter_mut().zip(&d.deltas) {
            o[0] = o[0] + dd[0];
            o[1] = o[1] + dd[1];
        }
        out
    }
}

/// Per-corner displacement `(dx, dy)`, the accumulated quantity of the global stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CornerDisplacement<T> {
    pub deltas: [[T; 2]; 4],
}

impl<T: Real> CornerDisplacement<T> {
    pub fn zero() -> Self {
        Self { deltas: [[T::zero(); 2]; 4] }
    }

    pub fn uniform(dx: T, dy: T) -> Self {
        Self { deltas: [[dx, dy]; 4] }
    }

    pub fn from_params(p: &[T; 8]) -> Self {
        let mut d = Self::zero();
        for i in 0..4 {
            d.deltas[i] = [p[2 * i], p[2 * i + 1]];
        }
        d
    }

    pub fn params(&self) -> [T; 8] {
        let mut p = [T::zero(); 8];
        for i in 0..4 {
            p[2 * i] = self.deltas[i][0];
            p[2 * i + 1] = self.deltas[i][1];
        }
        p
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut d = *self;
        for (a, b) in d.deltas.iter_mut().zip(&o.deltas) {
            a[0] = a[0] + b[0];
            a[1] = a[1] + b[1];
        }
        d
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-T::one()))
    }

    pub fn scale(&self, s: T) -> Self {
        let mut d = *self;
        for a in d.deltas.iter_mut() {
            a[0] = a[0] * s;
            a[1] = a[1] * s;
        }
        d
    }

    /// Mean of the four corner vectors.
    pub fn mean(&self) -> [T; 2] {
        let q = T::lit(0.25);
        let sx = self.deltas.iter().fold(T::zero(), |s, d| s + d[0]);
        let sy = self.deltas.iter().fold(T::zero(), |s, d| s + d[1]);
        [sx * q, sy * q]
    }

    /// Largest corner vector length.
    pub fn max_norm(&self) -> T {
        self.deltas.iter().map(|d| d[0].hypot(d[1])).fold(T::zero(), T::max)
    }

    /// Sum of corner vector lengths.
    pub fn total_norm(&self) -> T {
        self.deltas.iter().fold(T::zero(), |s, d| s + d[0].hypot(d[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.deltas.iter().flatten().all(|v| v.is_finite())
    }
}

/// Where `h` sends each base corner, expressed as displacements from the base.
pub fn project_corners<T: Real>(h: &Homography<T>, base: &CornerSet<T>) -> Option<CornerDisplacement<T>> {
    let mut d = CornerDisplacement::zero();
    for (i, c) in base.corners.iter().enumerate() {
        let p = h.apply_point(*c)?;
        d.deltas[i] = [p[0] - c[0], p[1] - c[1]];
    }
    Some(d)
}

/// Similarity that centers points on their centroid with mean distance `sqrt(2)`.
fn conditioning<T: Real>(pts: &[[T; 2]; 4]) -> [[T; 3]; 3] {
    let q = T::lit(0.25);
    let cx = pts.iter().fold(T::zero(), |s, p| s + p[0]) * q;
    let cy = pts.iter().fold(T::zero(), |s, p| s + p[1]) * q;
    let md = pts.iter().fold(T::zero(), |s, p| s + (p[0] - cx).hypot(p[1] - cy)) * q;
    let s = if md > T::zero() { T::lit(2f64.sqrt()) / md } else { T::one() };
    let z = T::zero();
    [[s, z, -s * cx], [z, s, -s * cy], [z, z, T::one()]]
}

/// Exact four-point DLT: the homography sending each base corner to `base + disp`.
pub fn dlt_solve<T: Real>(base: &CornerSet<T>, disp: &CornerDisplacement<T>) -> Result<Homography<T>> {
    if !disp.is_finite() {
        return Err(Error::DegenerateCorners { rcond: 0.0 });
    }
    let src = base.corners;
    let dst = base.displaced(disp);
    let ts = conditioning(&src);
    let td = conditioning(&dst);
    let tf = |t: &[[T; 3]; 3], p: [T; 2]| [t[0][0] * p[0] + t[0][2], t[1][1] * p[1] + t[1][2]];

    let mut a = vec![T::zero(); 64];
    let mut b = vec![T::zero(); 8];
    for k in 0..4 {
        let [x, y] = tf(&ts, src[k]);
        let [u, v] = tf(&td, dst[k]);
        let r0 = 2 * k;
        let r1 = r0 + 1;
        a[r0 * 8] = x;
        a[r0 * 8 + 1] = y;
        a[r0 * 8 + 2] = T::one();
        a[r0 * 8 + 6] = -x * u;
        a[r0 * 8 + 7] = -y * u;
        b[r0] = u;
        a[r1 * 8 + 3] = x;
        a[r1 * 8 + 4] = y;
        a[r1 * 8 + 5] = T::one();
        a[r1 * 8 + 6] = -x * v;
        a[r1 * 8 + 7] = -y * v;
        b[r1] = v;
    }
    let rc = rcond1(&a, 8);
    if !(rc >= T::lit(DLT_RCOND_MIN)) {
        return Err(Error::DegenerateCorners { rcond: rc.as_f64() });
    }
    let lu = Lu::factor(a, 8).ok_or(Error::DegenerateCorners { rcond: 0.0 })?;
    lu.solve_in_place(&mut b);
    let hn = [[b[0], b[1], b[2]], [b[3], b[4], b[5]], [b[6], b[7], T::one()]];
    let td_inv = Homography { m: td }.invert()?;
    let m = matmul(&matmul(&td_inv.m, &hn), &ts);
    let h = Homography::from_matrix(m);
    h.check_invertible().map_err(|_| Error::DegenerateCorners { rcond: rc.as_f64() })?;
    Ok(h)
}
