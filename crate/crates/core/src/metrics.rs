//! Evaluation protocol: valid-region PSNR, overlap buckets and failure accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, OverlapMask};
use crate::scalar::Real;

/// Reported value when the masked MSE vanishes.
pub const MPSNR_CAP_DB: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

/// PSNR with peak 1.0 over the pixels selected by `valid` (and valid in both images),
/// averaging squared error over all channels.
pub fn mpsnr<T: Real>(a: &Image<T>, b: &Image<T>, valid: &OverlapMask) -> Result<f64> {
    if a.size() != b.size() || a.size() != (valid.width, valid.height) {
        return Err(Error::InvalidArgument("mpsnr inputs differ in size".into()));
    }
    if a.channels() != b.channels() {
        return Err(Error::InvalidArgument("mpsnr inputs differ in channel count".into()));
    }
    let c = a.channels();
    let (w, h) = a.size();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !(valid.contains(x, y) && a.is_valid(x, y) && b.is_valid(x, y)) {
                continue;
            }
            for ch in 0..c {
                let d = a.get(x, y, ch).as_f64() - b.get(x, y, ch).as_f64();
                sum += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / (count * c) as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        MPSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(MPSNR_CAP_DB)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Low,
    Mid,
    High,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Low, Bucket::Mid, Bucket::High];

    pub fn label(&self) -> &'static str {
        match self {
            Bucket::Low => "low",
            Bucket::Mid => "mid",
            Bucket::High => "high",
        }
    }
}

/// `low` up to 0.30 inclusive, `mid` up to 0.60 inclusive, `high` above.
pub fn bucketize(ratio: f64) -> Bucket {
    if ratio <= 0.30 {
        Bucket::Low
    } else if ratio <= 0.60 {
        Bucket::Mid
    } else {
        Bucket::High
    }
}

/// Why a pair could not be stitched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Failure {
    NoOverlap,
    UnreasonableWarp,
}

impl Failure {
    /// Maps pipeline errors onto stitching failures; other errors are not failures.
    pub fn from_error(e: &Error) -> Option<Failure> {
        match e {
            Error::NoOverlap | Error::EmptyMask => Some(Failure::NoOverlap),
            Error::UnreasonableWarp(_) | Error::SingularHomography | Error::DegenerateCorners { .. } => {
                Some(Failure::UnreasonableWarp)
            }
            _ => None,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Failure::NoOverlap => "NoOverlap",
            Failure::UnreasonableWarp => "UnreasonableWarp",
        })
    }
}

/// Outcome of one stitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpsnr: Option<f64>,
    pub overlap_ratio: f64,
    pub bucket: Bucket,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corner_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl Metrics {
    pub fn success(mpsnr: f64, overlap_ratio: f64) -> Self {
        Self {
            mpsnr: Some(mpsnr),
            overlap_ratio,
            bucket: bucketize(overlap_ratio),
            corner_error: None,
            epe: None,
            failure: None,
        }
    }

    pub fn failed(failure: Failure, overlap_ratio: f64) -> Self {
        Self {
            mpsnr: None,
            overlap_ratio,
            bucket: bucketize(overlap_ratio),
            corner_error: None,
            epe: None,
            failure: Some(failure),
        }
    }
}

/// One row of a suite evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub id: String,
    pub bucket: Bucket,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpsnr: Option<f64>,
    pub overlap_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corner_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub count: usize,
    pub failures: usize,
    pub mean_mpsnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_bucket: BTreeMap<String, BucketSummary>,
    pub average: Option<f64>,
    pub failure_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_time_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_corner_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_epe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<SuiteResult>,
    pub summary: Summary,
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates results; rows are ordered by id so the report does not depend on
/// evaluation order.
pub fn suite_report(mut results: Vec<SuiteResult>) -> Report {
    results.sort_by(|a, b| a.id.cmp(&b.id));
    let total = results.len();
    let failures = results.iter().filter(|r| r.failure.is_some()).count();
    let mut per_bucket = BTreeMap::new();
    for b in Bucket::ALL {
        let rows: Vec<&SuiteResult> = results.iter().filter(|r| r.bucket == b).collect();
        per_bucket.insert(
            b.label().to_string(),
            BucketSummary {
                count: rows.len(),
                failures: rows.iter().filter(|r| r.failure.is_some()).count(),
                mean_mpsnr: mean(rows.iter().filter_map(|r| r.mpsnr)),
            },
        );
    }
    let summary = Summary {
        per_bucket,
        average: mean(results.iter().filter_map(|r| r.mpsnr)),
        failure_pct: if total == 0 { 0.0 } else { 100.0 * failures as f64 / total as f64 },
        mean_time_ms: mean(results.iter().filter_map(|r| r.time_ms)),
        mean_corner_error: mean(results.iter().filter_map(|r| r.corner_error)),
        mean_epe: mean(results.iter().filter_map(|r| r.epe)),
    };
    Report { results, summary }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table: one row per bucket plus the overall line.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>6} {:>9} {:>12}", "bucket", "pairs", "failures", "mPSNR (dB)");
        for b in Bucket::ALL {
            let s = &self.summary.per_bucket[b.label()];
            let _ = writeln!(out, "{:<8} {:>6} {:>9} {:>12}", b.label(), s.count, s.failures, fmt(s.mean_mpsnr));
        }
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>8.1}% {:>12}",
            "all",
            self.results.len(),
            self.summary.failure_pct,
            fmt(self.summary.average)
        );
        if let Some(t) = self.summary.mean_time_ms {
            let _ = writeln!(out, "mean time: {t:.1} ms");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, bucket: Bucket, mpsnr: Option<f64>, failure: Option<Failure>) -> SuiteResult {
        SuiteResult {
            id: id.into(),
            bucket,
            mpsnr,
            overlap_ratio: 0.5,
            corner_error: None,
            epe: None,
            failure,
            time_ms: None,
        }
    }

    #[test]
    fn mpsnr_examples() {
        let a = Image::<f64>::filled(8, 8, 1, 0.0);
        let b = Image::<f64>::filled(8, 8, 1, 0.5);
        let m = OverlapMask::full(8, 8);
        assert_eq!(mpsnr(&a, &a, &m).unwrap(), 99.0);
        let v = mpsnr(&a, &b, &m).unwrap();
        // 10 log10(1 / 0.25)
        assert!((v - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn mpsnr_ignores_masked_out_pixels() {
        let a = Image::<f64>::filled(4, 4, 3, 0.2);
        let mut data = a.data().to_vec();
        data[0] = 0.9;
        let b = Image::new(4, 4, 3, data).unwrap();
        let mut inside = vec![true; 16];
        inside[0] = false;
        let m = OverlapMask::from_inside(4, 4, inside);
        assert_eq!(mpsnr(&a, &b, &m).unwrap(), 99.0);
    }

    #[test]
    fn mpsnr_empty_mask() {
        let a = Image::<f64>::filled(4, 4, 1, 0.2);
        let m = OverlapMask::from_inside(4, 4, vec![false; 16]);
        assert_eq!(mpsnr(&a, &a, &m), Err(Error::EmptyMask));
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(bucketize(0.30), Bucket::Low);
        assert_eq!(bucketize(0.31), Bucket::Mid);
        assert_eq!(bucketize(0.60), Bucket::Mid);
        assert_eq!(bucketize(0.61), Bucket::High);
        assert_eq!(bucketize(1.0), Bucket::High);
        assert_eq!(bucketize(0.0), Bucket::Low);
    }

    #[test]
    fn single_success() {
        let r = suite_report(vec![row("a", Bucket::High, Some(20.0), None)]);
        assert_eq!(r.summary.average, Some(20.0));
        assert_eq!(r.summary.failure_pct, 0.0);
    }

    #[test]
    fn failure_percentage() {
        let mut rows: Vec<_> = (0..9).map(|i| row(&format!("p{i}"), Bucket::Mid, Some(25.0), None)).collect();
        rows.push(row("p9", Bucket::Low, None, Some(Failure::NoOverlap)));
        let r = suite_report(rows);
        assert_eq!(r.summary.failure_pct, 10.0);
        assert_eq!(r.summary.per_bucket["low"].failures, 1);
        assert_eq!(r.summary.per_bucket["low"].mean_mpsnr, None);
    }

    #[test]
    fn per_bucket_means() {
        let rows = vec![
            row("c", Bucket::Low, Some(10.0), None),
            row("a", Bucket::Low, Some(14.0), None),
            row("b", Bucket::High, Some(30.0), None),
            row("d", Bucket::Mid, Some(21.0), None),
            row("e", Bucket::High, Some(33.0), None),
        ];
        let r = suite_report(rows);
        assert_eq!(r.summary.per_bucket["low"].mean_mpsnr, Some(12.0));
        assert_eq!(r.summary.per_bucket["mid"].mean_mpsnr, Some(21.0));
        assert_eq!(r.summary.per_bucket["high"].mean_mpsnr, Some(31.5));
        assert_eq!(r.summary.average, Some(108.0 / 5.0));
        let ids: Vec<_> = r.results.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d", "e"]);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["summary"]["per_bucket"]["low"].is_object());
        assert!(r.to_table().contains("all"));
    }
}
