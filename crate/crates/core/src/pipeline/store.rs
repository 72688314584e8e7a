use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::report::ArtifactRecord;
use super::PipelineError;
use crate::io::{self, ArtifactError};

/// Output directory of a run plus the hash of every artifact written so far.
/// Stages read inputs only through [`Workspace::verified`].
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    force: bool,
    records: BTreeMap<String, (PathBuf, ArtifactRecord)>,
}

impl Workspace {
    /// Opens `root`. Without `force`, an existing non-empty directory is
    /// refused.
    pub fn create(root: &Path, force: bool) -> Result<Self, PipelineError> {
        if !force && root.exists() {
            let non_empty = std::fs::read_dir(root)
                .map_err(|e| ArtifactError::io(root, e))?
                .next()
                .is_some();
            if non_empty {
                return Err(ArtifactError::Exists {
                    path: root.to_path_buf(),
                }
                .into());
            }
        }
        io::create_dir(root)?;
        Ok(Workspace {
            root: root.to_path_buf(),
            force,
            records: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn force(&self) -> bool {
        self.force
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Hashes the artifact at `rel` (file or directory) and registers it.
    pub fn record(&mut self, name: &str, rel: &str) -> Result<ArtifactRecord, PipelineError> {
        let abs = self.path(rel);
        let rec = ArtifactRecord {
            name: name.to_string(),
            path: rel.to_string(),
            sha256: io::artifact_sha256(&abs)?,
        };
        self.records.insert(name.to_string(), (abs, rec.clone()));
        Ok(rec)
    }

    /// Registers an artifact owned by another workspace. Its report path is
    /// given relative to this workspace's root.
    pub fn adopt(&mut self, other: &Workspace, name: &str, rel_from_here: &str) -> Result<ArtifactRecord, PipelineError> {
        let (abs, rec) = other
            .records
            .get(name)
            .ok_or_else(|| PipelineError::MissingArtifact(name.to_string()))?
            .clone();
        let rec = ArtifactRecord {
            path: rel_from_here.to_string(),
            ..rec
        };
        self.records.insert(name.to_string(), (abs, rec.clone()));
        Ok(rec)
    }

    /// Path of a registered artifact after checking its hash is unchanged.
    pub fn verified(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let (abs, rec) = self
            .records
            .get(name)
            .ok_or_else(|| PipelineError::MissingArtifact(name.to_string()))?;
        let actual = io::artifact_sha256(abs)?;
        if actual != rec.sha256 {
            return Err(PipelineError::HashMismatch {
                name: name.to_string(),
                expected: rec.sha256.clone(),
                actual,
            });
        }
        Ok(abs.clone())
    }

    pub fn records(&self) -> impl Iterator<Item = &ArtifactRecord> {
        self.records.values().map(|(_, r)| r)
    }
}
