//! Thin-plate-spline warp over an `n x n` control lattice whose edge ring is pinned
//! to zero displacement.
//!
//! The spline maps reference points `P_r` onto displaced points `P_r + D`, where `D`
//! is non-zero only on interior lattice points. With the edge ring fixed the warp
//! dies out toward the border of the region, so the warped overlap meets the
//! unwarped surroundings without a seam.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::raster::Grid;
use crate::scalar::Real;

/// Default lattice side.
pub const DEFAULT_GRID_N: usize = 12;
/// Tikhonov weight relative to the mean absolute kernel entry.
pub const REGULARIZATION: f64 = 1e-8;

/// Radial basis `z² log z²`, extended by its limit 0 at `z = 0`.
#[inline]
pub fn rbf<T: Real>(z: T) -> T {
    rbf_sq(z * z)
}

/// Same kernel written in terms of the squared distance.
#[inline]
pub fn rbf_sq<T: Real>(r2: T) -> T {
    if r2 <= T::zero() {
        T::zero()
    } else {
        r2 * r2.ln()
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Real> Region<T> {
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    pub fn height(&self) -> T {
        self.y1 - self.y0
    }
}

/// Pads interior displacements with a ring of exact zeros: `(n-2)² -> n²`.
pub fn apply_dirichlet<T: Real>(raw: &[[T; 2]], n: usize) -> Vec<[T; 2]> {
    assert!(n >= 3, "control grid side must be at least 3");
    let m = n - 2;
    assert_eq!(raw.len(), m * m, "expected {}x{} interior displacements", m, m);
    let mut out = vec![[T::zero(); 2]; n * n];
    for i in 0..m {
        for j in 0..m {
            out[(i + 1) * n + (j + 1)] = raw[i * m + j];
        }
    }
    out
}

/// Control lattice over a region together with its effective displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid<T> {
    n: usize,
    region: Region<T>,
    ref_points: Vec<[T; 2]>,
    displacement: Vec<[T; 2]>,
}

impl<T: Real> ControlGrid<T> {
    /// Lattice with the given interior displacements (`(n-2)²`, row-major).
    pub fn new(n: usize, region: Region<T>, interior: &[[T; 2]]) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!("control grid side {n} < 3")));
        }
        if interior.len() != (n - 2) * (n - 2) {
            return Err(Error::InvalidArgument(format!(
                "expected {} interior displacements, got {}",
                (n - 2) * (n - 2),
                interior.len()
            )));
        }
        if !(region.width() > T::zero() && region.height() > T::zero()) {
            return Err(Error::InvalidArgument("control region is degenerate".into()));
        }
        if interior.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite control displacement".into()));
        }
        Ok(Self {
            n,
            region,
            ref_points: lattice(n, &region),
            displacement: apply_dirichlet(interior, n),
        })
    }

    pub fn zero(n: usize, region: Region<T>) -> Result<Self> {
        Self::new(n, region, &vec![[T::zero(); 2]; (n - 2) * (n - 2)])
    }

    /// Bypasses the zero-edge constraint. Only for checking spline properties that
    /// need a displaced edge ring.
    #[cfg(test)]
    pub(crate) fn unconstrained(n: usize, region: Region<T>, displacement: Vec<[T; 2]>) -> Self {
        assert_eq!(displacement.len(), n * n);
        Self { n, region, ref_points: lattice(n, &region), displacement }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn region(&self) -> &Region<T> {
        &self.region
    }

    /// Reference lattice `P_r`, row-major.
    pub fn ref_points(&self) -> &[[T; 2]] {
        &self.ref_points
    }

    /// Effective `n²` displacement with the zero edge ring.
    pub fn displacement(&self) -> &[[T; 2]] {
        &self.displacement
    }

    /// Interior displacements, `(n-2)²` row-major.
    pub fn interior(&self) -> Vec<[T; 2]> {
        let n = self.n;
        let mut out = Vec::with_capacity((n - 2) * (n - 2));
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                out.push(self.displacement[i * n + j]);
            }
        }
        out
    }

    /// Displaced points `P_r + D`.
    pub fn target_points(&self) -> Vec<[T; 2]> {
        self.ref_points
            .iter()
            .zip(&self.displacement)
            .map(|(p, d)| [p[0] + d[0], p[1] + d[1]])
            .collect()
    }

    pub fn is_edge(&self, idx: usize) -> bool {
        let (i, j) = (idx / self.n, idx % self.n);
        i == 0 || j == 0 || i == self.n - 1 || j == self.n - 1
    }
}

fn lattice<T: Real>(n: usize, r: &Region<T>) -> Vec<[T; 2]> {
    let step = T::lit((n - 1) as f64);
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        let y = r.y0 + r.height() * T::lit(i as f64) / step;
        for j in 0..n {
            let x = r.x0 + r.width() * T::lit(j as f64) / step;
            pts.push([x, y]);
        }
    }
    pts
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.dim + c]
    }
}

/// System matrix `[[K, P], [Pᵀ, 0]]` with `K_ij = B(‖P_i − P_j‖)` and rows `P_i = [1, x, y]`.
pub fn build_l<T: Real>(points: &[[T; 2]]) -> Result<Matrix<T>> {
    let m = points.len();
    for i in 0..m {
        for j in (i + 1)..m {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            if dx == T::zero() && dy == T::zero() {
                return Err(Error::DuplicateControlPoints(i, j));
            }
        }
    }
    let dim = m + 3;
    let mut data = vec![T::zero(); dim * dim];
    for i in 0..m {
        for j in 0..m {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            data[i * dim + j] = rbf_sq(dx * dx + dy * dy);
        }
        let row = [T::one(), points[i][0], points[i][1]];
        for (k, v) in row.iter().enumerate() {
            data[i * dim + m + k] = *v;
            data[(m + k) * dim + i] = *v;
        }
    }
    Ok(Matrix { dim, data })
}

/// Factored, regularized system for one reference lattice.
///
/// The Tikhonov term only conditions the factorization; solutions are polished by
/// iterative refinement against the unregularized matrix so interpolation stays exact.
struct Solver<T> {
    lu: Lu<T>,
    l: Matrix<T>,
    m: usize,
}

const REFINEMENT_STEPS: usize = 4;

impl<T: Real> Solver<T> {
    fn new(points: &[[T; 2]]) -> Result<Self> {
        let l = build_l(points)?;
        let m = points.len();
        let mut mean_k = T::zero();
        for i in 0..m {
            for j in 0..m {
                mean_k = mean_k + l.at(i, j).abs();
            }
        }
        mean_k = mean_k / T::lit((m * m) as f64);
        let reg = T::lit(REGULARIZATION) * mean_k;
        let mut lr = l.data.clone();
        for i in 0..m {
            lr[i * l.dim + i] = lr[i * l.dim + i] + reg;
        }
        let lu = Lu::factor(lr, l.dim).ok_or(Error::SingularL)?;
        if !(lu.pivot_ratio() > T::epsilon()) {
            return Err(Error::SingularL);
        }
        Ok(Self { lu, l, m })
    }

    fn solve(&self, rhs: &mut [T]) {
        let dim = self.l.dim;
        let b = rhs.to_vec();
        self.lu.solve_in_place(rhs);
        let mut r = vec![T::zero(); dim];
        for _ in 0..REFINEMENT_STEPS {
            for (i, ri) in r.iter_mut().enumerate() {
                let row = &self.l.data[i * dim..(i + 1) * dim];
                *ri = b[i] - row.iter().zip(rhs.iter()).fold(T::zero(), |s, (a, x)| s + *a * *x);
            }
            self.lu.solve_in_place(&mut r);
            for (x, d) in rhs.iter_mut().zip(&r) {
                *x = *x + *d;
            }
        }
    }
}

/// Kernel weights `w` (one per control point) and affine part `v` of the position map.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsCoefficients<T> {
    /// `w[m] = [w_x, w_y]`.
    pub kernel_weights: Vec<[T; 2]>,
    /// Rows `[a, b, c]` of `a + b·x + c·y`; column 0 is the x axis, column 1 the y axis.
    pub affine: [[T; 2]; 3],
}

impl<T: Real> TpsCoefficients<T> {
    /// Spline position of `p`.
    pub fn evaluate(&self, points: &[[T; 2]], p: [T; 2]) -> [T; 2] {
        let d = self.displacement_at(points, p);
        [p[0] + d[0], p[1] + d[1]]
    }

    /// Spline position minus `p`.
    #[inline]
    pub fn displacement_at(&self, points: &[[T; 2]], p: [T; 2]) -> [T; 2] {
        let a = &self.affine;
        let mut fx = a[0][0] + (a[1][0] - T::one()) * p[0] + a[2][0] * p[1];
        let mut fy = a[0][1] + a[1][1] * p[0] + (a[2][1] - T::one()) * p[1];
        for (q, w) in points.iter().zip(&self.kernel_weights) {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let b = rbf_sq(dx * dx + dy * dy);
            fx = fx + w[0] * b;
            fy = fy + w[1] * b;
        }
        [fx, fy]
    }

    /// Largest violation of `Σw = 0`, `Σw·x = 0`, `Σw·y = 0` over both axes.
    pub fn side_condition_residual(&self, points: &[[T; 2]]) -> T {
        let mut worst = T::zero();
        for axis in 0..2 {
            let mut s = [T::zero(); 3];
            for (p, w) in points.iter().zip(&self.kernel_weights) {
                s[0] = s[0] + w[axis];
                s[1] = s[1] + w[axis] * p[0];
                s[2] = s[2] + w[axis] * p[1];
            }
            worst = s.iter().fold(worst, |acc, v| acc.max(v.abs()));
        }
        worst
    }
}

/// Solves the spline sending `P_r` to `P_r + D`.
///
/// The system is solved for the displacement and the identity is added back to the
/// affine part, which keeps a zero displacement exactly zero.
pub fn solve_tps<T: Real>(grid: &ControlGrid<T>) -> Result<TpsCoefficients<T>> {
    let solver = Solver::new(&grid.ref_points)?;
    solve_with(&solver, grid)
}

fn solve_with<T: Real>(solver: &Solver<T>, grid: &ControlGrid<T>) -> Result<TpsCoefficients<T>> {
    let m = solver.m;
    let mut cols = [vec![T::zero(); m + 3], vec![T::zero(); m + 3]];
    for (axis, col) in cols.iter_mut().enumerate() {
        for (i, d) in grid.displacement.iter().enumerate() {
            col[i] = d[axis];
        }
        solver.solve(col);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularL);
        }
    }
    let kernel_weights = (0..m).map(|i| [cols[0][i], cols[1][i]]).collect();
    let affine = [
        [cols[0][m], cols[1][m]],
        [T::one() + cols[0][m + 1], cols[1][m + 1]],
        [cols[0][m + 2], T::one() + cols[1][m + 2]],
    ];
    Ok(TpsCoefficients { kernel_weights, affine })
}

/// Dense per-pixel displacement `F = X_t − U`.
///
/// Pixel `(col, row)` of the field describes the frame pixel
/// `(origin[0] + col, origin[1] + row)`; outside the field the displacement is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField<T> {
    pub width: usize,
    pub height: usize,
    pub origin: [i64; 2],
    pub flow: Vec<[T; 2]>,
}

impl<T: Real> WarpField<T> {
    pub fn zero(width: usize, height: usize) -> Self {
        Self { width, height, origin: [0, 0], flow: vec![[T::zero(); 2]; width * height] }
    }

    /// An empty field: zero displacement everywhere.
    pub fn none() -> Self {
        Self { width: 0, height: 0, origin: [0, 0], flow: Vec::new() }
    }

    /// Displacement at an integer frame pixel.
    #[inline]
    pub fn at_pixel(&self, x: i64, y: i64) -> [T; 2] {
        let cx = x - self.origin[0];
        let cy = y - self.origin[1];
        if cx < 0 || cy < 0 || cx >= self.width as i64 || cy >= self.height as i64 {
            return [T::zero(); 2];
        }
        self.flow[cy as usize * self.width + cx as usize]
    }

    pub fn max_magnitude(&self) -> T {
        self.flow.iter().map(|f| f[0].hypot(f[1])).fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.flow.iter().flatten().all(|v| v.is_finite())
    }
}

/// Evaluates the displacement at every coordinate of `region`.
///
/// Rows are evaluated in parallel; each pixel's kernel sum runs in a fixed order,
/// so the output does not depend on the thread count.
pub fn eval_warpfield<T: Real>(
    coeffs: &TpsCoefficients<T>,
    grid: &ControlGrid<T>,
    region: &Grid<T>,
) -> WarpField<T> {
    let points = grid.ref_points();
    let mut flow = vec![[T::zero(); 2]; region.width * region.height];
    if region.width > 0 {
        flow.par_chunks_mut(region.width).enumerate().for_each(|(row, out)| {
            let coords = &region.coords[row * region.width..(row + 1) * region.width];
            for (o, p) in out.iter_mut().zip(coords) {
                *o = coeffs.displacement_at(points, *p);
            }
        });
    }
    WarpField { width: region.width, height: region.height, origin: [0, 0], flow }
}

/// Field over the integer pixels of `[x0, x0+w) x [y0, y0+h)`, tagged with that origin.
pub fn eval_warpfield_rect<T: Real>(
    coeffs: &TpsCoefficients<T>,
    grid: &ControlGrid<T>,
    origin: [i64; 2],
    width: usize,
    height: usize,
) -> WarpField<T> {
    let mut coords = Vec::with_capacity(width * height);
    for i in 0..height {
        for j in 0..width {
            coords.push([T::lit((origin[0] + j as i64) as f64), T::lit((origin[1] + i as i64) as f64)]);
        }
    }
    let region = Grid { width, height, coords };
    let mut f = eval_warpfield(coeffs, grid, &region);
    f.origin = origin;
    f
}

/// Linear map from interior displacements to spline displacement at fixed points.
///
/// Row `s` holds the `(n-2)²` weights for `points[s]`; the same weights apply to the
/// x and y components independently.
#[derive(Debug, Clone)]
pub struct InteriorBasis<T> {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<T>,
}

impl<T: Real> InteriorBasis<T> {
    pub fn new(grid: &ControlGrid<T>, points: &[[T; 2]]) -> Result<Self> {
        let solver = Solver::new(grid.ref_points())?;
        let n = grid.n();
        let m = solver.m;
        let dim = m + 3;
        let interior: Vec<usize> = (0..m).filter(|i| !grid.is_edge(*i)).collect();
        let cols = interior.len();
        // cardinal coefficients, row-major dim x cols
        let mut card = vec![T::zero(); dim * cols];
        let mut rhs = vec![T::zero(); dim];
        for (c, &idx) in interior.iter().enumerate() {
            rhs.iter_mut().for_each(|v| *v = T::zero());
            rhs[idx] = T::one();
            solver.solve(&mut rhs);
            for k in 0..dim {
                card[k * cols + c] = rhs[k];
            }
        }
        debug_assert_eq!(cols, (n - 2) * (n - 2));
        let refs = grid.ref_points();
        let mut weights = vec![T::zero(); points.len() * cols];
        weights.par_chunks_mut(cols.max(1)).zip(points.par_iter()).for_each(|(out, p)| {
            let mut phi = Vec::with_capacity(dim);
            for q in refs {
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                phi.push(rbf_sq(dx * dx + dy * dy));
            }
            phi.extend_from_slice(&[T::one(), p[0], p[1]]);
            for (k, f) in phi.iter().enumerate() {
                if *f == T::zero() {
                    continue;
                }
                let row = &card[k * cols..(k + 1) * cols];
                for (o, c) in out.iter_mut().zip(row) {
                    *o = *o + *f * *c;
                }
            }
        });
        Ok(Self { rows: points.len(), cols, weights })
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[T] {
        &self.weights[s * self.cols..(s + 1) * self.cols]
    }

    /// Displacement at point `s` for interior displacements `d`.
    pub fn apply(&self, s: usize, d: &[[T; 2]]) -> [T; 2] {
        let mut out = [T::zero(); 2];
        for (w, v) in self.row(s).iter().zip(d) {
            out[0] = out[0] + *w * v[0];
            out[1] = out[1] + *w * v[1];
        }
        out
    }
}
