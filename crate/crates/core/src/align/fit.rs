//! Least-squares homography fits to point correspondences.

use nalgebra::{DMatrix, Matrix3};

use crate::homography::Homography;

fn normalizer(pts: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let d = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(d > 1e-9) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / d;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized DLT over `n ≥ 4` weighted correspondences `src → dst`.
pub fn fit_homography(src: &[[f64; 2]], dst: &[[f64; 2]], weights: &[f64]) -> Option<Homography<f64>> {
    let n = src.len();
    if n < 4 {
        return None;
    }
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let w = weights[i].sqrt();
        let p = ts * nalgebra::Vector3::new(src[i][0], src[i][1], 1.0);
        let q = td * nalgebra::Vector3::new(dst[i][0], dst[i][1], 1.0);
        let (x, y) = (p[0], p[1]);
        let (u, v) = (q[0], q[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for k in 0..9 {
            a[(2 * i, k)] = w * r0[k];
            a[(2 * i + 1, k)] = w * r1[k];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let m = td.try_inverse()? * hn * ts;
    let arr = [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]];
    if arr.iter().flatten().any(|v| !v.is_finite()) {
        return None;
    }
    let hom = Homography::from_matrix(arr);
    hom.check_invertible().ok()?;
    Some(hom)
}

/// Weighted mean displacement.
pub fn fit_translation(src: &[[f64; 2]], dst: &[[f64; 2]], weights: &[f64]) -> Option<Homography<f64>> {
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return None;
    }
    let mut t = [0.0; 2];
    for ((p, q), w) in src.iter().zip(dst).zip(weights) {
        t[0] += w * (q[0] - p[0]);
        t[1] += w * (q[1] - p[1]);
    }
    Some(Homography::translation(t[0] / wsum, t[1] / wsum))
}

/// Homography fit with Cauchy reweighting of reprojection residuals (scale in pixels).
/// Falls back to a translation when the points do not span a quadrilateral.
pub fn robust_fit(src: &[[f64; 2]], dst: &[[f64; 2]], scale: f64, min_span: f64) -> Option<Homography<f64>> {
    if src.is_empty() {
        return None;
    }
    let span = |axis: usize| {
        let lo = src.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = src.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let mut w = vec![1.0; src.len()];
    let projective = src.len() >= 8 && span(0) >= min_span && span(1) >= min_span;
    let mut h = if projective { fit_homography(src, dst, &w) } else { None };
    if h.is_none() {
        return fit_translation(src, dst, &w);
    }
    for _ in 0..5 {
        let cur = h.as_ref().expect("set above");
        for (i, (p, q)) in src.iter().zip(dst).enumerate() {
            w[i] = match cur.apply_point(*p) {
                Some(r) => {
                    let e2 = (r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2);
                    1.0 / (1.0 + e2 / (scale * scale))
                }
                None => 0.0,
            };
        }
        match fit_homography(src, dst, &w) {
            Some(next) => h = Some(next),
            None => break,
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_homography() {
        let h = Homography::from_matrix([[1.05, 0.02, 7.0], [-0.03, 0.97, -4.0], [1e-4, -5e-5, 1.0]]);
        let src: Vec<[f64; 2]> = (0..30).map(|i| [(i % 6) as f64 * 40.0, (i / 6) as f64 * 50.0]).collect();
        let dst: Vec<[f64; 2]> = src.iter().map(|p| h.apply_point(*p).unwrap()).collect();
        let fit = fit_homography(&src, &dst, &vec![1.0; 30]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((fit.m[i][j] - h.m[i][j]).abs() < 1e-9 * (1.0 + h.m[i][j].abs()));
            }
        }
    }

    #[test]
    fn outliers_are_downweighted() {
        let h = Homography::translation(12.0, -7.0);
        let src: Vec<[f64; 2]> = (0..49).map(|i| [(i % 7) as f64 * 30.0, (i / 7) as f64 * 30.0]).collect();
        let mut dst: Vec<[f64; 2]> = src.iter().map(|p| h.apply_point(*p).unwrap()).collect();
        dst[3] = [500.0, -300.0];
        dst[20][0] += 60.0;
        let fit = robust_fit(&src, &dst, 4.0, 32.0).unwrap();
        let q = fit.apply_point([100.0, 100.0]).unwrap();
        assert!((q[0] - 112.0).abs() < 0.05 && (q[1] - 93.0).abs() < 0.05, "{q:?}");
    }

    #[test]
    fn narrow_support_falls_back_to_translation() {
        let src = vec![[0.0, 0.0], [0.0, 10.0], [0.0, 20.0]];
        let dst = vec![[3.0, 1.0], [3.0, 11.0], [3.0, 21.0]];
        let fit = robust_fit(&src, &dst, 4.0, 32.0).unwrap();
        assert_eq!(fit.m, Homography::translation(3.0, 1.0).m);
    }
}
