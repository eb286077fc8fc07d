use proptest::prelude::*;

use elastic_warp::homography::{dlt_solve, project_corners, CornerDisplacement, CornerSet, Homography};
use elastic_warp::metrics::{bucketize, mpsnr, suite_report, Bucket, Failure, SuiteResult};
use elastic_warp::raster::{make_uniform_grid, overlap_mask, Grid, Image, OverlapMask};
use elastic_warp::synth::parallax_error;
use elastic_warp::tps::{eval_warpfield_rect, solve_tps, ControlGrid, Region};
use elastic_warp::warp::{blend, compute_canvas, warp_image, BlendMode};
use elastic_warp::WarpField64;

fn normalized(h: &Homography<f64>) -> [[f64; 3]; 3] {
    let s = h.m[2][2];
    h.m.map(|row| row.map(|v| v / s))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn homography() -> impl Strategy<Value = Homography<f64>> {
    (
        prop::array::uniform4(-0.2f64..0.2),
        prop::array::uniform2(-40.0f64..40.0),
        prop::array::uniform2(-5e-4f64..5e-4),
    )
        .prop_map(|(a, t, g)| {
            Homography::from_matrix([[1.0 + a[0], a[1], t[0]], [a[2], 1.0 + a[3], t[1]], [g[0], g[1], 1.0]])
        })
}

fn texture(w: usize, h: usize, seed: u64) -> Image<f64> {
    let s = seed as f64 * 0.37;
    Image::from_fn(w, h, |x, y| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.2 * (0.31 * x + s).sin() * (0.23 * y - s).cos() + 0.15 * (0.07 * x + 0.11 * y + s).sin()
    })
}

fn interior(n: usize, bound: f64) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-bound..bound), (n - 2) * (n - 2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dlt_inverts_corner_projection(h in homography(), w in 32usize..600, hh in 32usize..600) {
        let base = CornerSet::of_frame(w, hh);
        let d = project_corners(&h, &base).unwrap();
        let est = normalized(&dlt_solve(&base, &d).unwrap());
        let truth = normalized(&h);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((est[i][j] - truth[i][j]).abs() <= 1e-9 * truth[i][j].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn dlt_commutes_with_scaling(h in homography(), s in 0.1f64..10.0) {
        let base = CornerSet::of_frame(256, 256);
        let d = project_corners(&h, &base).unwrap();
        let scaled_base = CornerSet { corners: base.corners.map(|c| [s * c[0], s * c[1]]) };
        let scaled_d = d.scale(s);
        let hs = normalized(&dlt_solve(&scaled_base, &scaled_d).unwrap());
        let sm = [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]];
        let si = [[1.0 / s, 0.0, 0.0], [0.0, 1.0 / s, 0.0], [0.0, 0.0, 1.0]];
        let conj = mat_mul(&mat_mul(&sm, &normalized(&h)), &si);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((hs[i][j] - conj[i][j]).abs() <= 1e-9 * conj[i][j].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn homography_preserves_collinearity(h in homography(), p in prop::array::uniform2(0.0f64..256.0), q in prop::array::uniform2(0.0f64..256.0), t in -1.0f64..2.0) {
        let r = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
        let (a, b, c) = (h.apply_point(p).unwrap(), h.apply_point(q).unwrap(), h.apply_point(r).unwrap());
        let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        prop_assert!(cross.abs() <= 1e-6);
    }

    #[test]
    fn grid_round_trip_is_bitwise(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let coords: Vec<[f64; 2]> = (0..w * h)
            .map(|i| [(i as f64 * 0.618 + seed as f64).sin() * 1e3, (i as f64).cos() / 3.0])
            .collect();
        let g = Grid::new(w, h, coords.clone()).unwrap();
        let rebuilt: Vec<[f64; 2]> = (0..h).flat_map(|r| (0..w).map(move |c| (c, r))).map(|(c, r)| g.at(c, r)).collect();
        prop_assert_eq!(rebuilt.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        coords.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(Grid::new(w, h, rebuilt).unwrap(), g);
    }

    #[test]
    fn overlap_ratio_symmetric_under_inverse(theta in -0.3f64..0.3, t in prop::array::uniform2(-60.0f64..60.0)) {
        // equal ratios need an area-preserving map
        let (c, s) = (theta.cos(), theta.sin());
        let h = Homography::from_matrix([[c, -s, t[0]], [s, c, t[1]], [0.0, 0.0, 1.0]]);
        let (w, hh) = (96, 80);
        let fwd = overlap_mask((w, hh), &h, (w, hh)).unwrap();
        let inv = overlap_mask((w, hh), &h.invert().unwrap(), (w, hh)).unwrap();
        let slack = 2.0 * (w + hh) as f64 / (w * hh) as f64;
        prop_assert!((fwd.ratio() - inv.ratio()).abs() <= slack, "{} vs {}", fwd.ratio(), inv.ratio());
    }

    #[test]
    fn warp_commutes_with_intensity_affine(h in homography(), a in 0.2f64..0.8, b in 0.0f64..0.2, seed in 0u64..100) {
        let img = texture(64, 48, seed);
        let grid = h.apply(&make_uniform_grid(64, 48));
        let lhs = warp_image(&img.map(|v| a * v + b), &grid);
        let rhs = warp_image(&img, &grid);
        prop_assert_eq!(lhs.valid(), rhs.valid());
        for (i, (l, r)) in lhs.data().iter().zip(rhs.data()).enumerate() {
            if lhs.valid()[i] {
                prop_assert!((l - (a * r + b)).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn blend_stays_in_layer_envelope(tx in -40.0f64..40.0, ty in -30.0f64..30.0, linear in any::<bool>(), seed in 0u64..50) {
        let r = texture(64, 48, seed);
        let t = texture(64, 48, seed + 1);
        let h = Homography::translation(tx, ty);
        let canvas = compute_canvas(&r, &t, &h, &WarpField64::none(), 16.0).unwrap();
        let mode = if linear { BlendMode::Linear } else { BlendMode::Average };
        let out = blend(&canvas, mode);
        let (l0, l1) = (&canvas.layers[0], &canvas.layers[1]);
        for i in 0..out.width() * out.height() {
            prop_assert_eq!(out.valid()[i], l0.valid()[i] || l1.valid()[i]);
            if l0.valid()[i] && l1.valid()[i] {
                let (a, b) = (l0.data()[i], l1.data()[i]);
                let v = out.data()[i];
                prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
            }
        }
    }

    #[test]
    fn mpsnr_symmetric_and_blind_to_invalid(seed in 0u64..100, junk in 0.0f64..1.0, k in 0usize..(32 * 32)) {
        let a = texture(32, 32, seed);
        let b = texture(32, 32, seed + 7);
        let mut inside = vec![true; 32 * 32];
        inside[k] = false;
        let mask = OverlapMask::from_inside(32, 32, inside);
        let ab = mpsnr(&a, &b, &mask).unwrap();
        prop_assert_eq!(ab, mpsnr(&b, &a, &mask).unwrap());
        let mut data = b.data().to_vec();
        data[k] = junk;
        let b2 = Image::new(32, 32, 1, data).unwrap();
        prop_assert_eq!(ab, mpsnr(&a, &b2, &mask).unwrap());
    }

    #[test]
    fn mpsnr_decreases_with_error(seed in 0u64..100, k in 0usize..(32 * 32), bump in 0.01f64..0.3) {
        let a = texture(32, 32, seed);
        let b = texture(32, 32, seed + 3);
        let mask = OverlapMask::full(32, 32);
        let mut data = b.data().to_vec();
        let d = data[k] - a.data()[k];
        data[k] = if d >= 0.0 { (data[k] + bump).min(1.0) } else { (data[k] - bump).max(0.0) };
        prop_assume!((data[k] - a.data()[k]).abs() > d.abs());
        let worse = Image::new(32, 32, 1, data).unwrap();
        prop_assert!(mpsnr(&a, &worse, &mask).unwrap() < mpsnr(&a, &b, &mask).unwrap());
    }

    #[test]
    fn failure_percentage_is_exact(total in 1usize..60, fails in 0usize..60, ratio in 0.0f64..=1.0) {
        let fails = fails.min(total);
        let rows = (0..total)
            .map(|i| SuiteResult {
                id: format!("{i:03}"),
                bucket: bucketize(ratio),
                mpsnr: (i >= fails).then_some(30.0),
                overlap_ratio: ratio,
                corner_error: None,
                epe: None,
                failure: (i < fails).then_some(Failure::NoOverlap),
                time_ms: None,
            })
            .collect();
        let report = suite_report(rows);
        prop_assert_eq!(report.summary.failure_pct, 100.0 * fails as f64 / total as f64);
        let b = bucketize(ratio);
        prop_assert_eq!(Bucket::ALL.iter().filter(|x| **x == b).count(), 1);
        prop_assert_eq!(b == Bucket::Low, ratio <= 0.30);
        prop_assert_eq!(b == Bucket::High, ratio > 0.60);
    }

    #[test]
    fn spline_interpolates_with_zero_edges(d in interior(12, 10.0), x0 in -50.0f64..50.0, w in 40.0f64..400.0) {
        let region = Region::new(x0, 2.0 * x0, x0 + w, 2.0 * x0 + 0.8 * w);
        let grid = ControlGrid::new(12, region, &d).unwrap();
        for (i, disp) in grid.displacement().iter().enumerate() {
            if grid.is_edge(i) {
                prop_assert_eq!((disp[0].to_bits(), disp[1].to_bits()), (0, 0));
            }
        }
        let coeffs = solve_tps(&grid).unwrap();
        let pts = grid.ref_points();
        for (i, (p, q)) in pts.iter().zip(grid.target_points()).enumerate() {
            let e = coeffs.evaluate(pts, *p);
            prop_assert!((e[0] - q[0]).hypot(e[1] - q[1]) <= 1e-6);
            if grid.is_edge(i) {
                let f = coeffs.displacement_at(pts, *p);
                prop_assert!(f[0].hypot(f[1]) <= 1e-6);
            }
        }
    }

    #[test]
    fn parallax_vanishes_on_the_plane(h in homography(), a in homography(), p in prop::array::uniform2(0.0f64..256.0)) {
        // plane map A2·A1⁻¹ built to equal H
        let a2 = h.compose(&a);
        let e = parallax_error(p, &h, &a, &a2).unwrap();
        prop_assert!(e[0].hypot(e[1]) <= 1e-9);
    }
}

#[test]
fn identity_overlap_is_full() {
    let m = overlap_mask((40, 30), &Homography::<f64>::identity(), (40, 30)).unwrap();
    assert_eq!(m.ratio(), 1.0);
}

#[test]
fn rect_field_matches_spline_at_pixels() {
    let d: Vec<[f64; 2]> = (0..100).map(|i| [(i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos() * 2.0]).collect();
    let grid = ControlGrid::new(12, Region::new(10.0, 5.0, 120.0, 90.0), &d).unwrap();
    let coeffs = solve_tps(&grid).unwrap();
    let field = eval_warpfield_rect(&coeffs, &grid, [10, 5], 111, 86);
    for (x, y) in [(10, 5), (64, 40), (120, 90), (33, 77)] {
        let f = field.at_pixel(x, y);
        let g = coeffs.displacement_at(grid.ref_points(), [x as f64, y as f64]);
        assert_eq!(f, g);
    }
    assert_eq!(field.at_pixel(9, 5), [0.0, 0.0]);
    let zero = CornerDisplacement::<f64>::zero();
    assert_eq!(normalized(&dlt_solve(&CornerSet::of_frame(8, 8), &zero).unwrap()), normalized(&Homography::identity()));
}
