//! Run manifests: the versioned JSON record of one experiment arm, with
//! content hashes for every artifact the run wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackScores;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{atomic_write, file_sha256_hex};
use crate::metrics::RocReport;
use crate::training::GapEstimate;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Failed,
}

/// Path relative to the run directory plus the content hash recorded at
/// write time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub params: serde_json::Value,
    pub scores: AttackScores,
    pub roc: RocReport,
    /// ROC points CSV, relative to the run directory.
    pub roc_csv: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub energy_distance: Option<f64>,
    pub memorization_eps: Option<f64>,
    pub memorization_fraction: Option<f64>,
    pub memorization_detection: Option<RocReport>,
    /// Cross gaps for disjoint teachers: theta1 scored on D2, theta2 on D1.
    pub teacher_cross_gaps: Option<Vec<GapEstimate>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub status: RunStatus,
    #[serde(default)]
    pub failure: Option<String>,
    pub config: ExperimentConfig,
    pub checkpoints: BTreeMap<String, FileRef>,
    pub samples: BTreeMap<String, FileRef>,
    pub attacks: Vec<AttackReport>,
    pub metrics: MetricsBlock,
    /// Wall-clock stage timings; excluded from the reproducible block.
    pub timings_s: BTreeMap<String, f64>,
}

/// The subset of the manifest a re-run with the same config must reproduce
/// byte for byte. Timings are the only volatile field.
#[derive(Serialize)]
struct MetricView<'a> {
    checkpoints: &'a BTreeMap<String, FileRef>,
    samples: &'a BTreeMap<String, FileRef>,
    attacks: &'a [AttackReport],
    metrics: &'a MetricsBlock,
}

impl RunManifest {
    pub fn metric_block_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&MetricView {
            checkpoints: &self.checkpoints,
            samples: &self.samples,
            attacks: &self.attacks,
            metrics: &self.metrics,
        })?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let manifest: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "manifest version {} unsupported, expected {MANIFEST_VERSION}",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    /// Re-hashes every referenced file under `run_dir`; any byte-level
    /// tampering surfaces as a hash mismatch.
    pub fn verify_files(&self, run_dir: &Path) -> Result<()> {
        let all = self.checkpoints.values().chain(self.samples.values());
        for file_ref in all {
            let actual = file_sha256_hex(&run_dir.join(&file_ref.path))?;
            if actual != file_ref.sha256 {
                return Err(Error::Manifest(format!(
                    "{} hash mismatch: manifest {}, file {actual}",
                    file_ref.path, file_ref.sha256
                )));
            }
        }
        Ok(())
    }
}
