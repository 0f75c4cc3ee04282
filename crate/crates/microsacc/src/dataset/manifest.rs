//! Dataset manifest: per-sample records, split assignment, and digests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Eye;
use crate::error::{Error, Result};
use crate::scene::ClassSpec;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unassigned,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the dataset root.
    pub path: String,
    pub class_id: u8,
    pub eye: Eye,
    pub peak_amplitude_millideg: u32,
    pub duration_ns: u64,
    pub raw_event_count: u64,
    pub resampled_event_count: u64,
    pub seed: u64,
    /// SHA-256 of the sample file bytes, lowercase hex.
    pub digest: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sensor_width: u16,
    pub sensor_height: u16,
    pub roi_width: u16,
    pub roi_height: u16,
    pub roi_x0: u16,
    pub roi_y0: u16,
    pub classes: Vec<ClassSpec>,
    pub resample_enabled: bool,
    pub global_seed: u64,
    pub base_instances: usize,
    pub durations_per_instance: usize,
    pub resamples_per_sequence: usize,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn path_in(dir: &Path) -> std::path::PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::domain(format!(
                "unsupported manifest schema {}",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }

    /// Write atomically (temp file + rename); the manifest is the dataset's
    /// completion marker, so it must appear only once fully written.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = serde_json::to_vec_pretty(self)?;
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let path = Self::path_in(dir);
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn records_for(&self, eye: Eye, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records
            .iter()
            .filter(move |r| r.eye == eye && r.split == split)
    }

    /// SHA-256 of the serialized manifest, the dataset's identity digest.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&serde_json::to_vec_pretty(self)?))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(out.len() * 2);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
