//! On-disk suite layout: one PNG pair per scene plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_pair, SceneSpec, SuiteOptions};
use crate::error::{Error, Result};
use crate::imageio::save_image;
use crate::metrics::Bucket;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub bucket: Bucket,
    pub overlap_ratio: f64,
    pub reference: String,
    pub target: String,
    /// Ground-truth `H(V) − V`, corners in (0,0), (w,0), (0,h), (w,h) order.
    pub corner_displacement: [[f64; 2]; 4],
    /// FNV-1a 64 over the bit patterns of the ground-truth correspondence.
    pub gt_field_checksum: String,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub counts: [usize; 3],
    pub options: SuiteOptions,
    pub entries: Vec<ManifestEntry>,
}

pub fn field_checksum(field: &[[f64; 2]]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in field.iter().flatten() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Renders every scene into `dir` and writes the manifest. Output is a pure
/// function of the arguments.
pub fn write_suite(
    dir: impl AsRef<Path>,
    seed: u64,
    counts: [usize; 3],
    opts: &SuiteOptions,
    specs: &[SceneSpec],
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let pair = generate_pair(spec)?;
        let reference = format!("{}_ref.png", spec.id);
        let target = format!("{}_tgt.png", spec.id);
        save_image(dir.join(&reference), &pair.reference)?;
        save_image(dir.join(&target), &pair.target)?;
        entries.push(ManifestEntry {
            id: spec.id.clone(),
            bucket: pair.truth.bucket(),
            overlap_ratio: pair.truth.overlap_ratio,
            reference,
            target,
            corner_displacement: pair.truth.corners.deltas,
            gt_field_checksum: field_checksum(&pair.truth.correspondence),
            spec: spec.clone(),
        });
    }
    let manifest = Manifest { seed, counts, options: opts.clone(), entries };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_suite;

    #[test]
    fn checksum_distinguishes_fields() {
        let a = field_checksum(&[[0.0, 1.0]]);
        assert_eq!(a, field_checksum(&[[0.0, 1.0]]));
        assert_ne!(a, field_checksum(&[[0.0, 1.0000001]]));
        assert_ne!(field_checksum(&[[0.0, 0.0]]), field_checksum(&[[-0.0, 0.0]]));
    }

    #[test]
    fn suite_export_is_byte_identical() {
        let opts = SuiteOptions { width: 96, height: 80, ..SuiteOptions::default() };
        let specs = generate_suite(4, [1, 1, 1], &opts);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_suite(a.path(), 4, [1, 1, 1], &opts, &specs).unwrap();
        write_suite(b.path(), 4, [1, 1, 1], &opts, &specs).unwrap();
        for e in &ma.entries {
            for f in [&e.reference, &e.target] {
                assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
            }
        }
        let ja = fs::read(a.path().join("manifest.json")).unwrap();
        assert_eq!(ja, fs::read(b.path().join("manifest.json")).unwrap());
        assert_eq!(read_manifest(a.path().join("manifest.json")).unwrap(), ma);
    }
}
