//! Recurrent alignment: a global corner-displacement stage followed by a local
//! control-point stage, both accumulating per-iteration residual updates.
//!
//! Each iteration proposes an update from correlation cost-volume matches, refines it
//! with damped Gauss-Newton on a Huber photometric objective, and keeps it only if
//! the masked mean L1 photometric loss does not increase.

mod cost;
mod eval;
mod fit;
mod global;
mod local;
mod pyramid;
mod stitch;

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::CornerDisplacement;
use crate::raster::Image;

pub use cost::{build_cost_volume, global_matches, lookup, window_peak, CostLevel, CostSlice, CostVolume, CELL, LOOKUP_RADIUS, MIN_IMAGE_SIDE, PATCH};
pub use eval::{corner_error, endpoint_error, evaluate_scene, evaluate_suite, SceneOutcome, WarpMode};
pub use fit::{fit_homography, robust_fit};
pub use global::h_stage;
pub use local::t_stage;
pub use pyramid::{Level, Pyramid};
pub use stitch::{multi_stitch, stitch, warp_into_reference, Alignment, MultiStitchOutput, StitchOutput};

/// Huber threshold of the smooth photometric surrogate, in intensity units.
pub const HUBER_DELTA: f64 = 0.01;
/// Pyramid depth of the photometric refinement.
pub const PHOTO_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Global-stage iterations `K`.
    pub iters_h: usize,
    /// Local-stage iterations `N`.
    pub iters_t: usize,
    /// Sequence weight used when reporting the weighted trace loss.
    pub alpha: f64,
    /// Scale on cost-volume local displacement proposals.
    pub lambda_local: f64,
    /// Per-iteration cap on the non-translational corner motion, in pixels.
    pub max_step_h: f64,
    /// Per-iteration cap on each control-point update, in pixels.
    pub max_step_t: f64,
    /// Levels of the correlation pyramid.
    pub pyramid_levels: usize,
    /// Control lattice side, edge ring included.
    pub grid_n: usize,
    /// Canvas area limit as a multiple of the reference area.
    pub area_cap: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iters_h: 6,
            iters_t: 3,
            alpha: 0.85,
            lambda_local: 1.0,
            max_step_h: 16.0,
            max_step_t: 4.0,
            pyramid_levels: 2,
            grid_n: crate::tps::DEFAULT_GRID_N,
            area_cap: crate::warp::DEFAULT_AREA_CAP,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iters_h < 1 {
            return bad("iters_h must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.lambda_local > 0.0) {
            return bad("lambda_local must be positive");
        }
        if !(self.max_step_h > 0.0 && self.max_step_t > 0.0) {
            return bad("step caps must be positive");
        }
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be at least 1");
        }
        if self.grid_n < 3 {
            return bad("grid side must be at least 3");
        }
        if !(self.area_cap > 0.0) {
            return bad("area_cap must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    H,
    T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: Stage,
    pub iteration: usize,
    /// Applied update: 4 corners for `H`, the full `n²` lattice for `T`.
    pub delta: Vec<[f64; 2]>,
    /// Running sum of the applied updates.
    pub accumulated: Vec<[f64; 2]>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignTrace {
    pub records: Vec<IterationRecord>,
}

impl AlignTrace {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// `Σ_k α^{K−k} L_k` over the iterations of `stage`, with `L_k` the loss after
    /// iteration `k`.
    pub fn sequence_loss(&self, stage: Stage, alpha: f64) -> f64 {
        let recs: Vec<_> = self.stage(stage).collect();
        let k = recs.len();
        recs.iter()
            .enumerate()
            .map(|(i, r)| alpha.powi((k - 1 - i) as i32) * r.loss_after)
            .sum()
    }

    /// The same weighted sum with every update forced to zero.
    pub fn baseline_sequence_loss(&self, stage: Stage, alpha: f64) -> f64 {
        let recs: Vec<_> = self.stage(stage).collect();
        let Some(first) = recs.first() else { return 0.0 };
        let k = recs.len();
        (0..k).map(|i| alpha.powi((k - 1 - i) as i32) * first.loss_before).sum()
    }

    /// `Σ_k ΔD^G_k` recomputed from the recorded updates.
    pub fn corner_sum(&self) -> CornerDisplacement<f64> {
        let mut d = CornerDisplacement::zero();
        for r in self.stage(Stage::H) {
            for (c, v) in d.deltas.iter_mut().zip(&r.delta) {
                c[0] += v[0];
                c[1] += v[1];
            }
        }
        d
    }

    /// Number of accepted iterations whose loss went up; zero by construction.
    pub fn monotonicity_violations(&self) -> usize {
        self.records.iter().filter(|r| r.accepted && !(r.loss_after <= r.loss_before)).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Shared photometric inputs of both stages.
pub(crate) struct Photometric {
    pub reference: Pyramid,
    pub target: Pyramid,
}

impl Photometric {
    pub fn new(reference: &Image<f64>, target: &Image<f64>) -> Self {
        Self {
            reference: Pyramid::new(&reference.to_gray(), PHOTO_LEVELS),
            target: Pyramid::new(&target.to_gray(), PHOTO_LEVELS),
        }
    }

    /// Mean absolute intensity difference over the reference pixels of `rows` whose
    /// mapped position lands on a valid target sample, and their count.
    pub fn l1(&self, map: &(impl Fn(usize, usize) -> Option<[f64; 2]> + Sync)) -> (f64, usize) {
        let r = self.reference.base();
        let t = self.target.base();
        let parts = ordered_chunks(r.height, ROW_CHUNK, |rows| {
            let (mut s, mut n) = (0.0, 0usize);
            for y in rows {
                for x in 0..r.width {
                    let Some(iv) = r.at(x, y) else { continue };
                    let Some(q) = map(x, y) else { continue };
                    if let Some(tv) = t.sample(q) {
                        s += (tv[0] - iv).abs();
                        n += 1;
                    }
                }
            }
            (s, n)
        });
        let (s, n) = parts.into_iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if n == 0 {
            (f64::INFINITY, 0)
        } else {
            (s / n as f64, n)
        }
    }
}

pub(crate) const ROW_CHUNK: usize = 16;

/// Maps fixed-size chunks of `0..n` in parallel and returns results in chunk order,
/// so reductions over them do not depend on the thread count.
pub(crate) fn ordered_chunks<R: Send>(n: usize, chunk: usize, f: impl Fn(Range<usize>) -> R + Sync) -> Vec<R> {
    let chunks = n.div_ceil(chunk.max(1));
    (0..chunks)
        .into_par_iter()
        .map(|c| f(c * chunk..((c + 1) * chunk).min(n)))
        .collect()
}

/// IRLS weight and loss of the Huber surrogate.
#[inline]
pub(crate) fn huber(r: f64) -> (f64, f64) {
    let a = r.abs();
    if a <= HUBER_DELTA {
        (1.0, 0.5 * r * r)
    } else {
        (HUBER_DELTA / a, HUBER_DELTA * (a - 0.5 * HUBER_DELTA))
    }
}

/// Minimum overlap, in reference pixels, for a state to count as overlapping.
pub(crate) fn min_overlap(width: usize, height: usize) -> usize {
    ((width * height) / 50).max(64)
}
