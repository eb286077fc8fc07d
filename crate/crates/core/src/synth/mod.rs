//! Synthetic two-view scenes with exact ground truth.
//!
//! The target view shows a procedural texture directly. The reference view is
//! rendered by looking up, for every reference pixel `p`, the texture at its true
//! correspondence `c(p) = H·p + F(p)` in the target, optionally replaced by a
//! sprite on a second depth plane that is seen with an extra shift. Because the
//! texture is a continuous function, `ref(p) == tgt(c(p))` holds without any
//! resampling error, and the correspondence field is known exactly.

mod manifest;
mod texture;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::{dlt_solve, project_corners, CornerDisplacement, CornerSet, Homography};
use crate::imageio;
use crate::metrics::{bucketize, Bucket};
use crate::raster::{overlap_mask, Image, OverlapMask, LUMA};
use crate::tps::{eval_warpfield_rect, solve_tps, ControlGrid, Region};

pub use manifest::{field_checksum, read_manifest, write_suite, Manifest, ManifestEntry};
pub use texture::NoiseTexture;
pub(crate) use texture::mix64;

/// Side of the cells used for the alignability check.
pub const CONTRAST_CELL: usize = 16;
/// Minimum mean squared gradient (intensity / px)² per cell of the reference.
pub const GRADIENT_FLOOR: f64 = 5e-5;

/// `ε = A₂·A₁⁻¹·x₁ − H·x₁`, the residual a single homography leaves for a point
/// whose true mapping goes through another plane.
pub fn parallax_error(
    x1: [f64; 2],
    h: &Homography<f64>,
    a1: &Homography<f64>,
    a2: &Homography<f64>,
) -> Result<[f64; 2]> {
    let plane = a2.compose(&a1.invert()?);
    let ideal = plane.apply_point(x1).ok_or(Error::SingularHomography)?;
    let approx = h.apply_point(x1).ok_or(Error::SingularHomography)?;
    Ok([ideal[0] - approx[0], ideal[1] - approx[1]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TextureSource {
    Procedural { seed: u64 },
    /// A natural image; target coordinates plus the origin index into it.
    File { path: String },
}

/// A sprite on a second depth plane. It occupies `rect` in target coordinates and is
/// seen from the reference with an extra displacement `shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallaxLayer {
    /// `[x0, y0, x1, y1]` in target pixels.
    pub rect: [f64; 4],
    pub depth_offset: f64,
    pub shift: [f64; 2],
    pub texture_seed: u64,
}

impl ParallaxLayer {
    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.rect[0] && p[0] <= self.rect[2] && p[1] >= self.rect[1] && p[1] <= self.rect[3]
    }
}

/// Interior control displacements of a ground-truth spline laid over the overlap box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsPerturbation {
    pub n: usize,
    pub interior: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub texture: TextureSource,
    /// Scene position of target pixel `(0, 0)`.
    pub target_origin: [f64; 2],
    /// Plane-induced homography, reference pixels to target pixels.
    pub plane_homography: [[f64; 3]; 3],
    #[serde(default)]
    pub layers: Vec<ParallaxLayer>,
    #[serde(default)]
    pub tps_gt: Option<TpsPerturbation>,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Plain scene: identity homography, no parallax, no noise.
    pub fn identity(id: &str, width: usize, height: usize, texture_seed: u64) -> Self {
        Self {
            id: id.to_string(),
            width,
            height,
            texture: TextureSource::Procedural { seed: texture_seed },
            target_origin: [0.0, 0.0],
            plane_homography: Homography::<f64>::identity().m,
            layers: Vec::new(),
            tps_gt: None,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn homography(&self) -> Homography<f64> {
        Homography::from_matrix(self.plane_homography)
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub homography: Homography<f64>,
    /// `H(V) − V` for the reference frame corners.
    pub corners: CornerDisplacement<f64>,
    /// True target position of every reference pixel; `NaN` where occluded in the target.
    pub correspondence: Vec<[f64; 2]>,
    /// Reference pixels with a visible, in-bounds correspondence.
    pub overlap: OverlapMask,
    /// Fraction of reference pixels whose correspondence lands inside the target.
    pub overlap_ratio: f64,
    /// Box carrying the ground-truth spline, if any.
    pub tps_region: Option<Region<f64>>,
    /// Smallest per-cell mean squared gradient of the reference (alignability).
    pub min_cell_energy: f64,
}

impl GroundTruth {
    pub fn bucket(&self) -> Bucket {
        bucketize(self.overlap_ratio)
    }
}

#[derive(Debug, Clone)]
pub struct ScenePair {
    pub reference: Image<f64>,
    pub target: Image<f64>,
    pub truth: GroundTruth,
}

enum Sampler {
    Noise(NoiseTexture),
    Raster(Image<f64>),
}

impl Sampler {
    fn rgb(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        match self {
            Sampler::Noise(t) => Some(t.rgb(x, y)),
            Sampler::Raster(img) => {
                let mut px = [0.0; 3];
                if !img.sample(x, y, &mut px) {
                    return None;
                }
                if img.channels() == 1 {
                    px = [px[0]; 3];
                }
                Some(px)
            }
        }
    }
}

fn tps_field(
    spec: &SceneSpec,
    h: &Homography<f64>,
) -> Result<Option<(Region<f64>, crate::tps::WarpField<f64>)>> {
    let Some(tps) = &spec.tps_gt else { return Ok(None) };
    let mask = overlap_mask((spec.width, spec.height), h, (spec.width, spec.height))?;
    let Some((x0, y0, x1, y1)) = mask.bounding_box() else { return Ok(None) };
    if x1 <= x0 || y1 <= y0 {
        return Ok(None);
    }
    let region = Region::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
    let grid = ControlGrid::new(tps.n, region, &tps.interior)?;
    let coeffs = solve_tps(&grid)?;
    let field = eval_warpfield_rect(&coeffs, &grid, [x0 as i64, y0 as i64], x1 - x0 + 1, y1 - y0 + 1);
    Ok(Some((region, field)))
}

/// Renders the reference and target views and their exact correspondence.
pub fn generate_pair(spec: &SceneSpec) -> Result<ScenePair> {
    let (w, h) = (spec.width, spec.height);
    if w < 2 || h < 2 {
        return Err(Error::InvalidArgument("scene must be at least 2x2".into()));
    }
    let homog = spec.homography();
    homog.check_invertible()?;
    let sampler = match &spec.texture {
        TextureSource::Procedural { seed } => Sampler::Noise(NoiseTexture { seed: *seed }),
        TextureSource::File { path } => Sampler::Raster(imageio::load_image(path)?),
    };
    let sprites: Vec<NoiseTexture> = spec.layers.iter().map(|l| NoiseTexture { seed: l.texture_seed }).collect();
    let o = spec.target_origin;
    let tps = tps_field(spec, &homog)?;

    // target
    let mut tgt = vec![0.0; w * h * 3];
    let mut tgt_valid = vec![true; w * h];
    for y in 0..h {
        for x in 0..w {
            let q = [x as f64, y as f64];
            let layer = spec.layers.iter().rposition(|l| l.contains(q));
            let px = match layer {
                Some(k) => Some(sprites[k].rgb(q[0] + o[0], q[1] + o[1])),
                None => sampler.rgb(q[0] + o[0], q[1] + o[1]),
            };
            match px {
                Some(v) => tgt[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&v),
                None => tgt_valid[y * w + x] = false,
            }
        }
    }

    // reference and correspondence
    let mut refd = vec![0.0; w * h * 3];
    let mut ref_valid = vec![true; w * h];
    let mut corr = vec![[f64::NAN; 2]; w * h];
    let mut in_bounds = vec![false; w * h];
    let mut visible = vec![false; w * h];
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(mut c) = homog.apply_point([x as f64, y as f64]) else {
                ref_valid[i] = false;
                continue;
            };
            if let Some((_, f)) = &tps {
                let d = f.at_pixel(x as i64, y as i64);
                c = [c[0] + d[0], c[1] + d[1]];
            }
            let hit = spec.layers.iter().enumerate().rev().find_map(|(k, l)| {
                let cs = [c[0] + l.shift[0], c[1] + l.shift[1]];
                l.contains(cs).then_some((k, cs))
            });
            let (px, truth, occluded) = match hit {
                Some((k, cs)) => (Some(sprites[k].rgb(cs[0] + o[0], cs[1] + o[1])), cs, false),
                None => {
                    let occ = spec.layers.iter().any(|l| l.contains(c));
                    (sampler.rgb(c[0] + o[0], c[1] + o[1]), c, occ)
                }
            };
            match px {
                Some(v) => refd[i * 3..i * 3 + 3].copy_from_slice(&v),
                None => ref_valid[i] = false,
            }
            let inside = truth[0] >= 0.0 && truth[1] >= 0.0 && truth[0] <= wmax && truth[1] <= hmax;
            in_bounds[i] = inside;
            if !occluded {
                corr[i] = truth;
                visible[i] = inside && ref_valid[i];
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ 0xA11CE));
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in tgt.iter_mut().chain(refd.iter_mut()) {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let reference = Image::from_parts(w, h, 3, refd, ref_valid);
    let target = Image::from_parts(w, h, 3, tgt, tgt_valid);
    let base = CornerSet::of_frame(w, h);
    let corners = project_corners(&homog, &base).ok_or(Error::SingularHomography)?;
    let overlap_ratio = in_bounds.iter().filter(|v| **v).count() as f64 / (w * h) as f64;
    let min_cell_energy = min_cell_gradient_energy(&reference.to_gray());
    Ok(ScenePair {
        reference,
        target,
        truth: GroundTruth {
            homography: homog,
            corners,
            correspondence: corr,
            overlap: OverlapMask::from_inside(w, h, visible),
            overlap_ratio,
            tps_region: tps.map(|t| t.0),
            min_cell_energy,
        },
    })
}

/// Smallest mean squared central-difference gradient over `CONTRAST_CELL`-sized cells.
pub fn min_cell_gradient_energy(gray: &Image<f64>) -> f64 {
    let (w, h) = gray.size();
    let mut worst = f64::INFINITY;
    let mut cy = 0;
    while cy + CONTRAST_CELL <= h {
        let mut cx = 0;
        while cx + CONTRAST_CELL <= w {
            let (mut s, mut n) = (0.0, 0usize);
            for y in cy.max(1)..(cy + CONTRAST_CELL).min(h - 1) {
                for x in cx.max(1)..(cx + CONTRAST_CELL).min(w - 1) {
                    let gx = 0.5 * (gray.get(x + 1, y, 0) - gray.get(x - 1, y, 0));
                    let gy = 0.5 * (gray.get(x, y + 1, 0) - gray.get(x, y - 1, 0));
                    s += gx * gx + gy * gy;
                    n += 1;
                }
            }
            if n > 0 {
                worst = worst.min(s / n as f64);
            }
            cx += CONTRAST_CELL;
        }
        cy += CONTRAST_CELL;
    }
    worst
}

/// Knobs for random scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub width: usize,
    pub height: usize,
    /// Upper bound on the projective perturbation of each corner, in pixels.
    pub max_corner_motion: f64,
    /// Amplitude range of a ground-truth spline bump; `None` for homography-only scenes.
    pub tps_amplitude: Option<[f64; 2]>,
    pub grid_n: usize,
    /// Number of off-plane sprites per scene.
    pub layers: usize,
    pub noise_sigma: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            max_corner_motion: 25.0,
            tps_amplitude: Some([3.0, 8.0]),
            grid_n: crate::tps::DEFAULT_GRID_N,
            layers: 0,
            noise_sigma: 0.002,
        }
    }
}

impl SuiteOptions {
    pub fn homography_only() -> Self {
        Self { tps_amplitude: None, ..Self::default() }
    }
}

fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(stream.wrapping_mul(0x1_0000_0001) ^ index)))
}

/// Random corner perturbation with every corner moving at most `max_motion` pixels.
fn corner_jitter(rng: &mut ChaCha8Rng, max_motion: f64) -> CornerDisplacement<f64> {
    let mut d = CornerDisplacement::zero();
    for c in d.deltas.iter_mut() {
        let r = rng.random_range(0.0..=max_motion);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        *c = [r * a.cos(), r * a.sin()];
    }
    d
}

/// Gaussian bump of interior displacements, peak magnitude `amplitude`.
fn tps_bump(rng: &mut ChaCha8Rng, n: usize, amplitude: f64) -> TpsPerturbation {
    let m = n - 2;
    let lo = 1.5f64.min((m as f64 - 1.0) / 2.0);
    let ci = rng.random_range(lo..=(m as f64 - 1.0 - lo));
    let cj = rng.random_range(lo..=(m as f64 - 1.0 - lo));
    let sigma = rng.random_range(1.2..=2.2);
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = [amplitude * a.cos(), amplitude * a.sin()];
    let mut interior = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            let g = (-d2 / (2.0 * sigma * sigma)).exp();
            interior.push([amp[0] * g, amp[1] * g]);
        }
    }
    TpsPerturbation { n, interior }
}

fn pick_texture(rng: &mut ChaCha8Rng, homog: &Homography<f64>, opts: &SuiteOptions) -> (u64, [f64; 2]) {
    // rejection sampling on the alignability floor of the patch the reference sees
    let mut fallback = (0, [0.0, 0.0], f64::NEG_INFINITY);
    for _ in 0..64 {
        let seed: u64 = rng.random();
        let origin = [rng.random_range(-4096.0..4096.0f64).round(), rng.random_range(-4096.0..4096.0f64).round()];
        let tex = NoiseTexture { seed };
        let probe = Image::from_fn(opts.width, opts.height, |x, y| {
            let c = homog.apply_point([x as f64, y as f64]).unwrap_or([x as f64, y as f64]);
            let v = tex.rgb(c[0] + origin[0], c[1] + origin[1]);
            (0..3).map(|k| LUMA[k] * v[k]).sum()
        });
        let e = min_cell_gradient_energy(&probe);
        if e >= 1.5 * GRADIENT_FLOOR {
            return (seed, origin);
        }
        if e > fallback.2 {
            fallback = (seed, origin, e);
        }
    }
    (fallback.0, fallback.1)
}

fn random_homography(rng: &mut ChaCha8Rng, translation: [f64; 2], opts: &SuiteOptions) -> Homography<f64> {
    let base = CornerSet::of_frame(opts.width, opts.height);
    for _ in 0..32 {
        let d = CornerDisplacement::uniform(translation[0], translation[1]).add(&corner_jitter(rng, opts.max_corner_motion));
        if let Ok(h) = dlt_solve(&base, &d) {
            return h;
        }
    }
    Homography::translation(translation[0], translation[1])
}

/// Fills in texture, spline, sprites and noise for a scene with the given geometry.
pub fn random_spec(id: String, rng: &mut ChaCha8Rng, homog: Homography<f64>, opts: &SuiteOptions) -> SceneSpec {
    let (texture_seed, origin) = pick_texture(rng, &homog, opts);
    let tps_gt = opts.tps_amplitude.map(|[lo, hi]| {
        let amp = rng.random_range(lo..=hi);
        tps_bump(rng, opts.grid_n, amp)
    });
    let layers = (0..opts.layers)
        .map(|_| {
            let sw = rng.random_range(0.12..0.25) * opts.width as f64;
            let sh = rng.random_range(0.12..0.25) * opts.height as f64;
            let x0 = rng.random_range(0.25..0.6) * opts.width as f64;
            let y0 = rng.random_range(0.25..0.6) * opts.height as f64;
            let depth_offset = rng.random_range(0.5..1.5);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let mag = 4.0 * depth_offset;
            ParallaxLayer {
                rect: [x0, y0, x0 + sw, y0 + sh],
                depth_offset,
                shift: [mag * dir.cos(), mag * dir.sin()],
                texture_seed: rng.random(),
            }
        })
        .collect();
    SceneSpec {
        id,
        width: opts.width,
        height: opts.height,
        texture: TextureSource::Procedural { seed: texture_seed },
        target_origin: origin,
        plane_homography: homog.m,
        layers,
        tps_gt,
        noise_sigma: opts.noise_sigma,
        seed: rng.random(),
    }
}

/// `count` scenes without a global shift: each corner moves at most
/// `opts.max_corner_motion` pixels.
pub fn generate_jitter_specs(seed: u64, count: usize, opts: &SuiteOptions) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(seed, 7, i as u64);
            let h = random_homography(&mut rng, [0.0, 0.0], opts);
            random_spec(format!("jitter-{i:03}"), &mut rng, h, opts)
        })
        .collect()
}

fn bucket_range(b: Bucket) -> (f64, f64) {
    match b {
        Bucket::Low => (0.20, 0.29),
        Bucket::Mid => (0.36, 0.57),
        Bucket::High => (0.66, 0.92),
    }
}

/// Scenes stratified into the low / mid / high overlap buckets.
///
/// `counts[k]` scenes are drawn for bucket `k`. The global shift is chosen so the
/// plane-induced overlap ratio falls inside the bucket; draws that land outside it
/// after the corner jitter are rejected.
pub fn generate_suite(seed: u64, counts: [usize; 3], opts: &SuiteOptions) -> Vec<SceneSpec> {
    let mut specs = Vec::with_capacity(counts.iter().sum());
    for (bi, bucket) in Bucket::ALL.iter().enumerate() {
        for i in 0..counts[bi] {
            let mut rng = derive_rng(seed, bi as u64 + 1, i as u64);
            let id = format!("{}-{i:03}", bucket.label());
            let (lo, hi) = bucket_range(*bucket);
            let mut homog = None;
            for _ in 0..500 {
                let target = rng.random_range(lo..=hi);
                let fy = rng.random_range(0.0..0.08);
                let fx = (1.0 - target / (1.0 - fy)).max(0.0);
                let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let t = [sx * fx * opts.width as f64, sy * fy * opts.height as f64];
                let cand = random_homography(&mut rng, t, opts);
                let ratio = overlap_mask((opts.width, opts.height), &cand, (opts.width, opts.height))
                    .map(|m| m.ratio())
                    .unwrap_or(0.0);
                if bucketize(ratio) == *bucket && ratio > 0.05 {
                    homog = Some(cand);
                    break;
                }
            }
            let homog = homog.expect("bucket reachable with the configured corner motion");
            specs.push(random_spec(id, &mut rng, homog, opts));
        }
    }
    specs
}

/// Reference plus two views shifted left and right of it, all sharing one texture.
///
/// Returns the shared reference, the targets, and each target's ground-truth
/// homography (reference to target pixels).
pub fn three_view_scene(seed: u64, width: usize, height: usize, shift: f64) -> (Image<f64>, Vec<Image<f64>>, Vec<Homography<f64>>) {
    let mut rng = derive_rng(seed, 99, 0);
    let opts = SuiteOptions { width, height, ..SuiteOptions::homography_only() };
    let (tex, origin) = pick_texture(&mut rng, &Homography::identity(), &opts);
    let mut targets = Vec::new();
    let mut homs = Vec::new();
    let mut reference = None;
    for t in [[-shift, 3.0], [shift, -2.0]] {
        let spec = SceneSpec {
            id: "view".into(),
            width,
            height,
            texture: TextureSource::Procedural { seed: tex },
            target_origin: [origin[0] - t[0], origin[1] - t[1]],
            plane_homography: Homography::translation(t[0], t[1]).m,
            layers: Vec::new(),
            tps_gt: None,
            noise_sigma: 0.0,
            seed,
        };
        let pair = generate_pair(&spec).expect("valid three-view spec");
        reference.get_or_insert(pair.reference);
        targets.push(pair.target);
        homs.push(pair.truth.homography);
    }
    (reference.expect("two views rendered"), targets, homs)
}
