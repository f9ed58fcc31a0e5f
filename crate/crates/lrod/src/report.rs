//! Run manifests and the consolidated report bundle.
//!
//! Every command writes a `manifest.json` next to its outputs recording the
//! hash of its configuration, the seed, and the source revision, so a run
//! directory is self-describing. `export_report` gathers the artifacts of a
//! full pipeline run into one bundle for external plotting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LrodError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// `git describe` of the working tree, or "unknown" outside a repository.
pub fn git_describe() -> String {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output();
    match out {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).trim().to_string(),
        _ => "unknown".to_string(),
    }
}

/// Inputs of one command invocation. Deliberately timestamp-free: repeating a
/// run must reproduce the manifest byte for byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub verb: String,
    pub seed: u64,
    #[serde(rename = "config-sha256")]
    pub config_sha256: String,
    #[serde(rename = "git-describe")]
    pub git_describe: String,
    pub outputs: Vec<String>,
}

pub fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| LrodError::io(dir, e))?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| LrodError::io(&path, e))?;
    Ok(path)
}

/// Artifacts a complete pipeline run is expected to leave behind, relative to
/// the run directory. The restorer sweep is optional because detector-only
/// checkpoints have no restoration head.
pub const REQUIRED_ARTIFACTS: &[&str] = &[
    "train/loss.csv",
    "train/manifest.json",
    "analyze/lipschitz-detector.csv",
    "analyze/audit.csv",
    "analyze/feature-shift.json",
    "landscape/grid-total.csv",
    "landscape/trajectory.csv",
    "eval/eval.json",
];

pub const OPTIONAL_ARTIFACTS: &[&str] = &[
    "analyze/lipschitz-detector.json",
    "analyze/lipschitz-restorer.csv",
    "analyze/lipschitz-restorer.json",
    "analyze/beta-sensitivity.csv",
    "landscape/grid-det.csv",
    "landscape/grid-res.csv",
    "landscape/grid-det.meta.json",
    "landscape/grid-res.meta.json",
    "landscape/grid-total.meta.json",
    "train/stage1-loss.csv",
];

/// One consolidated bundle: raw text of every artifact keyed by its relative
/// path, plus a digest per artifact. Schema tag `lrod-report-v1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema: String,
    #[serde(rename = "git-describe")]
    pub git_describe: String,
    /// Relative path -> sha256 of the raw bytes.
    pub digests: std::collections::BTreeMap<String, String>,
    /// Relative path -> file content (text artifacts only).
    pub contents: std::collections::BTreeMap<String, String>,
}

/// Collect a pipeline run into `run_dir/report/report.json`. Missing required
/// artifacts abort with the full list of absent names; optional artifacts are
/// included when present. Re-export over an existing bundle is byte-identical
/// as long as the inputs are.
pub fn export_report(run_dir: &Path) -> Result<PathBuf> {
    let missing: Vec<String> = REQUIRED_ARTIFACTS
        .iter()
        .filter(|rel| !run_dir.join(rel).is_file())
        .map(|rel| rel.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(LrodError::MissingArtifacts(missing));
    }
    let mut digests = std::collections::BTreeMap::new();
    let mut contents = std::collections::BTreeMap::new();
    for rel in REQUIRED_ARTIFACTS.iter().chain(OPTIONAL_ARTIFACTS) {
        let path = run_dir.join(rel);
        if !path.is_file() {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| LrodError::io(&path, e))?;
        digests.insert(rel.to_string(), sha256_hex(&bytes));
        contents.insert(
            rel.to_string(),
            String::from_utf8(bytes).map_err(|e| LrodError::Format {
                path: path.display().to_string(),
                reason: format!("not valid utf-8: {e}"),
            })?,
        );
    }
    let bundle = ReportBundle {
        schema: "lrod-report-v1".to_string(),
        git_describe: git_describe(),
        digests,
        contents,
    };
    let report_dir = run_dir.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| LrodError::io(&report_dir, e))?;
    let path = report_dir.join("report.json");
    let text = serde_json::to_string_pretty(&bundle).expect("bundle serializes");
    fs::write(&path, text).map_err(|e| LrodError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed_run_dir(dir: &Path) {
        for rel in REQUIRED_ARTIFACTS {
            let p = dir.join(rel);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(&p, format!("content of {rel}\n")).unwrap();
        }
    }

    #[test]
    fn empty_run_dir_lists_every_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        match export_report(dir.path()) {
            Err(LrodError::MissingArtifacts(names)) => {
                assert_eq!(names.len(), REQUIRED_ARTIFACTS.len());
                for rel in REQUIRED_ARTIFACTS {
                    assert!(names.contains(&rel.to_string()));
                }
            }
            other => panic!("expected missing-artifacts error, got {other:?}"),
        }
    }

    #[test]
    fn bundle_schema_and_idempotent_reexport() {
        let dir = tempfile::tempdir().unwrap();
        seed_run_dir(dir.path());
        let p1 = export_report(dir.path()).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let bundle: ReportBundle = serde_json::from_slice(&b1).unwrap();
        assert_eq!(bundle.schema, "lrod-report-v1");
        assert_eq!(bundle.digests.len(), REQUIRED_ARTIFACTS.len());
        for rel in REQUIRED_ARTIFACTS {
            let content = &bundle.contents[*rel];
            assert_eq!(bundle.digests[*rel], sha256_hex(content.as_bytes()));
        }
        let p2 = export_report(dir.path()).unwrap();
        assert_eq!(b1, fs::read(&p2).unwrap());
    }

    #[test]
    fn manifest_roundtrip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            verb: "train".into(),
            seed: 7,
            config_sha256: sha256_hex(b"{}"),
            git_describe: "unknown".into(),
            outputs: vec!["loss.csv".into()],
        };
        let p1 = write_run_manifest(dir.path(), &m).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let parsed: RunManifest = serde_json::from_slice(&b1).unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.config_sha256, m.config_sha256);
        let p2 = write_run_manifest(dir.path(), &parsed).unwrap();
        assert_eq!(b1, fs::read(&p2).unwrap());
    }
}
