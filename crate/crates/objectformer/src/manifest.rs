//! Dataset manifest: one JSON record per line, paths relative to the
//! manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use objectformer_core::synth::{DegradationSpec, TamperKind};
use objectformer_core::{Plane, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: String,
    pub label: u8,
    pub kind: TamperKind,
    pub degradations: Vec<DegradationSpec>,
    pub seed: u64,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// One decoded sample.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub image: RgbImage,
    pub mask: Plane,
    pub label: u8,
}

impl ManifestRecord {
    fn validate(&self) -> Result<(), String> {
        if self.label > 1 {
            return Err(format!("label {} outside {{0, 1}}", self.label));
        }
        if (self.label == 1) != (self.kind != TamperKind::Pristine) {
            return Err(format!("label {} contradicts kind {}", self.label, self.kind.name()));
        }
        Ok(())
    }
}

/// Serializes records, one per line, each line terminated by `\n`.
pub fn to_jsonl(records: &[ManifestRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records always serialize") + "\n").collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> RunResult<()> {
    fs::write(path, to_jsonl(records)).map_err(|e| RunError::io(path, e))
}

impl Manifest {
    pub fn read(path: &Path) -> RunResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: ManifestRecord =
                serde_json::from_str(line).map_err(|e| RunError::format(path, format!("line {}: {e}", n + 1)))?;
            record.validate().map_err(|e| RunError::format(path, format!("line {}: {e}", n + 1)))?;
            records.push(record);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.base.join(&self.records[i].image_path)
    }

    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.base.join(&self.records[i].mask_path)
    }

    /// Reads sample `i`, checking that image and mask agree in size.
    pub fn load(&self, i: usize) -> RunResult<LoadedSample> {
        let image = io::read_rgb(&self.image_path(i))?;
        let mask = io::read_mask(&self.mask_path(i))?;
        if mask.shape() != (image.height(), image.width()) {
            return Err(RunError::format(self.mask_path(i), format!("mask {:?} does not match image {}x{}", mask.shape(), image.height(), image.width())));
        }
        Ok(LoadedSample { image, mask, label: self.records[i].label })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, kind: TamperKind) -> ManifestRecord {
        ManifestRecord {
            image_path: "images/00000.png".into(),
            mask_path: "masks/00000.png".into(),
            label,
            kind,
            degradations: vec![DegradationSpec::Jpeg { quality: 80 }, DegradationSpec::GaussianNoise { sigma: 1.5 }],
            seed: 9,
        }
    }

    #[test]
    fn round_trip_and_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let records = vec![record(1, TamperKind::CopyMove), record(0, TamperKind::Pristine)];
        write_manifest(&path, &records).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["image_path", "mask_path", "label", "kind", "degradations", "seed"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["kind"], "copy_move");
        let m = Manifest::read(&path).unwrap();
        assert_eq!(m.records, records);
        assert_eq!(m.image_path(0), dir.path().join("images/00000.png"));
    }

    #[test]
    fn inconsistent_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        write_manifest(&path, &[record(0, TamperKind::Splice)]).unwrap();
        assert!(matches!(Manifest::read(&path), Err(RunError::Format { .. })));
        fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(Manifest::read(&path), Err(RunError::Format { .. })));
    }
}
