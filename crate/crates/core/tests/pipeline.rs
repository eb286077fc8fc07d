use elastic_warp::align::{
    build_cost_volume, corner_error, evaluate_scene, h_stage, multi_stitch, stitch, t_stage, AlignConfig, Stage, WarpMode,
};
use elastic_warp::homography::{dlt_solve, CornerSet, Homography};
use elastic_warp::metrics::{Failure, MPSNR_CAP_DB};
use elastic_warp::raster::make_uniform_grid;
use elastic_warp::synth::{generate_jitter_specs, generate_pair, three_view_scene, SceneSpec, SuiteOptions};
use elastic_warp::warp::{warp_image, BlendMode};

fn shifted_scene(tx: f64, ty: f64) -> SceneSpec {
    let mut spec = SceneSpec::identity("shift", 192, 160, 21);
    spec.plane_homography = Homography::translation(tx, ty).m;
    spec
}

#[test]
fn self_stitch_is_exact() {
    let pair = generate_pair(&SceneSpec::identity("same", 128, 128, 3)).unwrap();
    let out = stitch(&pair.reference, &pair.reference, &AlignConfig::default(), BlendMode::Linear).unwrap();
    assert_eq!(out.metrics.failure, None);
    assert_eq!(out.metrics.mpsnr, Some(MPSNR_CAP_DB));
    let al = out.alignment.unwrap();
    assert!(corner_error(&al.homography, &Homography::identity(), 128, 128) < 1e-6);
    assert_eq!(out.image.unwrap().size(), (128, 128));
    assert_eq!(out.trace.monotonicity_violations(), 0);
}

#[test]
fn translation_is_recovered() {
    let pair = generate_pair(&shifted_scene(12.0, -7.0)).unwrap();
    let out = stitch(&pair.reference, &pair.target, &AlignConfig::default(), BlendMode::Average).unwrap();
    let al = out.alignment.expect("aligned");
    let err = corner_error(&al.homography, &pair.truth.homography, 192, 160);
    assert!(err < 0.5, "corner error {err}");
    // sub-pixel estimates may widen the rounded canvas by one pixel
    let (w, h) = out.image.unwrap().size();
    assert!((204..=205).contains(&w) && (167..=168).contains(&h), "{w}x{h}");
    assert!((12..=13).contains(&out.offset[0]) && (0..=1).contains(&out.offset[1]), "{:?}", out.offset);
}

#[test]
fn homography_equals_accumulated_corners() {
    let spec = &generate_jitter_specs(5, 1, &SuiteOptions::homography_only())[0];
    let pair = generate_pair(spec).unwrap();
    let cfg = AlignConfig::default();
    let cv = build_cost_volume(&pair.reference, &pair.target, cfg.pyramid_levels).unwrap();
    let (h, trace) = h_stage(&pair.reference, &pair.target, &cv, &cfg).unwrap();
    let again = dlt_solve(&CornerSet::of_frame(spec.width, spec.height), &trace.corner_sum()).unwrap();
    assert_eq!(h, again);
    assert_eq!(trace.stage(Stage::H).count(), cfg.iters_h);
    assert!(trace.records.iter().any(|r| r.accepted));
    assert!(trace.sequence_loss(Stage::H, cfg.alpha) <= trace.baseline_sequence_loss(Stage::H, cfg.alpha));
}

#[test]
fn local_stage_keeps_edges_fixed() {
    let spec = &generate_jitter_specs(6, 1, &SuiteOptions::default())[0];
    let pair = generate_pair(spec).unwrap();
    let cfg = AlignConfig::default();
    let cv = build_cost_volume(&pair.reference, &pair.target, cfg.pyramid_levels).unwrap();
    let (h, _) = h_stage(&pair.reference, &pair.target, &cv, &cfg).unwrap();
    let jt = warp_image(&pair.target, &h.apply(&make_uniform_grid(spec.width, spec.height)));
    let cvt = build_cost_volume(&pair.reference, &jt, cfg.pyramid_levels).unwrap();
    let (grid, trace) = t_stage(&pair.reference, &pair.target, &cvt, &h, &cfg).unwrap();
    let n = grid.n();
    for r in trace.stage(Stage::T) {
        assert_eq!(r.delta.len(), n * n);
        for (i, (d, a)) in r.delta.iter().zip(&r.accumulated).enumerate() {
            if grid.is_edge(i) {
                assert_eq!([d[0].to_bits(), d[1].to_bits(), a[0].to_bits(), a[1].to_bits()], [0; 4]);
            }
        }
        if r.accepted {
            assert!(r.loss_after <= r.loss_before);
        }
    }
    assert!(trace.sequence_loss(Stage::T, cfg.alpha) <= trace.baseline_sequence_loss(Stage::T, cfg.alpha));
}

#[test]
fn tps_improves_on_homography_alone() {
    let spec = &generate_jitter_specs(8, 1, &SuiteOptions::default())[0];
    let out = evaluate_scene(spec, &AlignConfig::default(), WarpMode::HomographyTps, false).unwrap();
    let (full, h_only) = (out.result.mpsnr.unwrap(), out.h_only_mpsnr.unwrap());
    assert!(full > h_only, "{full} vs {h_only}");
    assert!(out.result.epe.unwrap() < 1.0);
    assert!(out.result.time_ms.is_none());
}

#[test]
fn alignment_is_deterministic() {
    let spec = &generate_jitter_specs(9, 1, &SuiteOptions::default())[0];
    let pair = generate_pair(spec).unwrap();
    let cfg = AlignConfig::default();
    let a = stitch(&pair.reference, &pair.target, &cfg, BlendMode::Linear).unwrap();
    let b = stitch(&pair.reference, &pair.target, &cfg, BlendMode::Linear).unwrap();
    assert_eq!(a.trace.to_json(), b.trace.to_json());
    assert_eq!(a.image.unwrap().data(), b.image.unwrap().data());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn three_views_share_one_canvas() {
    let (reference, targets, truth) = three_view_scene(4, 160, 128, 40.0);
    let out = multi_stitch(&reference, &targets, &AlignConfig::default(), BlendMode::Linear).unwrap();
    assert_eq!(out.failures(), 0);
    for (al, h) in out.alignments.iter().zip(&truth) {
        let al = al.as_ref().unwrap();
        assert!(corner_error(&al.homography, h, 160, 128) < 0.5);
    }
    let (w, h) = out.image.unwrap().size();
    assert!((240..=242).contains(&w) && (133..=135).contains(&h), "{w}x{h}");
}

#[test]
fn unrelated_target_reports_no_overlap() {
    let a = generate_pair(&SceneSpec::identity("a", 128, 128, 1)).unwrap().reference;
    let b = generate_pair(&SceneSpec::identity("b", 128, 128, 2)).unwrap().reference;
    let single = stitch(&a, &b, &AlignConfig::default(), BlendMode::Linear).unwrap();
    assert_eq!(single.metrics.failure, Some(Failure::NoOverlap));
    assert!(single.image.is_none());
    let multi = multi_stitch(&a, &[a.clone(), b], &AlignConfig::default(), BlendMode::Linear).unwrap();
    assert_eq!(multi.metrics[0].failure, None);
    assert_eq!(multi.metrics[1].failure, Some(Failure::NoOverlap));
    assert_eq!(multi.image.unwrap().size(), (128, 128));
}

#[test]
fn tiny_inputs_are_rejected() {
    let small = generate_pair(&SceneSpec::identity("s", 32, 32, 1)).unwrap().reference;
    assert!(stitch(&small, &small, &AlignConfig::default(), BlendMode::Linear).is_err());
    let cfg = AlignConfig { iters_h: 0, ..Default::default() };
    assert!(stitch(&small, &small, &cfg, BlendMode::Linear).is_err());
}
