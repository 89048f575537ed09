//! Case-local workspaces, content-hash snapshots and file-change evidence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::fsutil::{sha256_hex, to_json_pretty, write_atomic};
use crate::instantiator::CaseCandidate;
use crate::paths::is_under;

pub const REPO_MOUNT_DIR: &str = "repo_under_test";
pub const OUTPUT_DIR: &str = "output";
pub const LOGS_DIR: &str = "logs";

/// Tool caches that show up in evidence but never count as unexpected.
pub const DEFAULT_IGNORE: &[&str] = &[".pytest_cache", "__pycache__", ".coverage"];

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("base repository {0} is not a readable directory")]
    MissingBase(PathBuf),
    #[error("invalid repository name {0:?}")]
    BadRepoName(String),
    #[error("copy into {path} failed: {source}")]
    Copy {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("snapshot of {path} failed: {source}")]
    Snapshot {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    File,
    Symlink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub digest: String,
    pub size: u64,
    pub kind: FileKind,
}

/// Workspace-relative path → content record. Directories are implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Snapshot {
    pub entries: BTreeMap<String, SnapshotEntry>,
}

impl Snapshot {
    pub fn capture(root: &Path) -> Result<Snapshot, WorkspaceError> {
        let err = |path: &Path, source: io::Error| WorkspaceError::Snapshot {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = BTreeMap::new();
        for item in WalkDir::new(root).follow_links(false).min_depth(1) {
            let item = item.map_err(|e| {
                let path = e.path().unwrap_or(root).to_path_buf();
                err(&path, e.into())
            })?;
            let ft = item.file_type();
            if ft.is_dir() {
                continue;
            }
            let rel = relative_key(root, item.path());
            let entry = if ft.is_symlink() {
                let target = fs::read_link(item.path()).map_err(|e| err(item.path(), e))?;
                let target = target.to_string_lossy().into_owned();
                SnapshotEntry {
                    digest: sha256_hex(target.as_bytes()),
                    size: target.len() as u64,
                    kind: FileKind::Symlink,
                }
            } else {
                let bytes = fs::read(item.path()).map_err(|e| err(item.path(), e))?;
                SnapshotEntry {
                    digest: sha256_hex(&bytes),
                    size: bytes.len() as u64,
                    kind: FileKind::File,
                }
            };
            entries.insert(rel, entry);
        }
        Ok(Snapshot { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Digest of the canonical serialization; names the manifest on disk.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("snapshot serializes"));
        hex::encode(h.finalize())
    }

    pub fn restrict_to(&self, dir: &str) -> Snapshot {
        Snapshot {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| is_under(k, dir))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

fn relative_key(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Field order follows the trace artifact: the unexpected set comes first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChangeEvidence {
    #[serde(default)]
    pub unexpected_changed_files: Vec<String>,
    #[serde(default)]
    pub added_files: Vec<String>,
    #[serde(default)]
    pub modified_files: Vec<String>,
    #[serde(default)]
    pub deleted_files: Vec<String>,
}

impl FileChangeEvidence {
    pub fn is_empty(&self) -> bool {
        self.added_files.is_empty() && self.modified_files.is_empty() && self.deleted_files.is_empty()
    }

    pub fn changed(&self) -> impl Iterator<Item = &String> {
        self.added_files.iter().chain(&self.modified_files).chain(&self.deleted_files)
    }
}

pub fn diff(before: &Snapshot, after: &Snapshot) -> FileChangeEvidence {
    let mut ev = FileChangeEvidence::default();
    for (path, entry) in &after.entries {
        match before.entries.get(path) {
            None => ev.added_files.push(path.clone()),
            Some(old) if old != entry => ev.modified_files.push(path.clone()),
            Some(_) => {}
        }
    }
    ev.deleted_files = before
        .entries
        .keys()
        .filter(|k| !after.entries.contains_key(*k))
        .cloned()
        .collect();
    ev
}

/// Which changes count as unexpected for one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeScope {
    /// Workspace-relative repository mount, e.g. `repo_under_test/click`.
    pub repo_mount: String,
    pub ignore: Vec<String>,
}

impl ChangeScope {
    pub fn new(repo_mount: impl Into<String>) -> Self {
        ChangeScope {
            repo_mount: repo_mount.into(),
            ignore: DEFAULT_IGNORE.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_ignore(mut self, ignore: Vec<String>) -> Self {
        self.ignore = ignore;
        self
    }

    pub fn is_ignored(&self, path: &str) -> bool {
        path.split('/').any(|seg| self.ignore.iter().any(|i| i == seg))
    }
}

pub fn classify_changes(
    mut evidence: FileChangeEvidence,
    candidate: &CaseCandidate,
    scope: &ChangeScope,
) -> FileChangeEvidence {
    let allowed_mod: BTreeSet<&str> = candidate.expected_modified_files.iter().map(String::as_str).collect();
    let allowed_new: BTreeSet<&str> = candidate.expected_new_files.iter().map(String::as_str).collect();
    let in_scope = |p: &str| is_under(p, &scope.repo_mount) && !scope.is_ignored(p);

    let mut unexpected: BTreeSet<String> = BTreeSet::new();
    for p in evidence.modified_files.iter().chain(&evidence.deleted_files) {
        if in_scope(p) && !allowed_mod.contains(p.as_str()) {
            unexpected.insert(p.clone());
        }
    }
    for p in &evidence.added_files {
        if in_scope(p) && !allowed_new.contains(p.as_str()) && !allowed_mod.contains(p.as_str()) {
            unexpected.insert(p.clone());
        }
    }
    evidence.unexpected_changed_files = unexpected.into_iter().collect();
    evidence
}

/// A provisioned case-local directory. `root` is a host path and stays out
/// of every serialized artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workspace {
    pub case_id: String,
    #[serde(skip)]
    root: PathBuf,
    pub repo_mount: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct ProvisionSpec<'a> {
    pub case_id: &'a str,
    pub base_repo: &'a Path,
    pub repo_name: &'a str,
    /// Files copied over the workspace root after the repository.
    pub overlay: Option<&'a Path>,
}

impl Workspace {
    /// Creates a pristine workspace at `root`, wiping anything already there.
    pub fn provision(root: &Path, spec: &ProvisionSpec<'_>, now: DateTime<Utc>) -> Result<Workspace, WorkspaceError> {
        if !spec.base_repo.is_dir() {
            return Err(WorkspaceError::MissingBase(spec.base_repo.to_path_buf()));
        }
        if spec.repo_name.is_empty() || spec.repo_name.contains(['/', '\\']) || spec.repo_name == ".." || spec.repo_name == "." {
            return Err(WorkspaceError::BadRepoName(spec.repo_name.to_string()));
        }
        let copy_err = |path: &Path, source: io::Error| WorkspaceError::Copy {
            path: path.to_path_buf(),
            source,
        };
        if root.exists() {
            fs::remove_dir_all(root).map_err(|e| copy_err(root, e))?;
        }
        let mount = root.join(REPO_MOUNT_DIR).join(spec.repo_name);
        copy_tree(spec.base_repo, &mount).map_err(|e| copy_err(&mount, e))?;
        for d in [OUTPUT_DIR, LOGS_DIR] {
            fs::create_dir_all(root.join(d)).map_err(|e| copy_err(root, e))?;
        }
        if let Some(overlay) = spec.overlay {
            copy_tree(overlay, root).map_err(|e| copy_err(root, e))?;
        }
        Ok(Workspace {
            case_id: spec.case_id.to_string(),
            root: root.to_path_buf(),
            repo_mount: format!("{REPO_MOUNT_DIR}/{}", spec.repo_name),
            created_at: now,
        })
    }

    /// Reattaches to an existing workspace directory.
    pub fn open(root: &Path, case_id: &str, repo_name: &str, created_at: DateTime<Utc>) -> Workspace {
        Workspace {
            case_id: case_id.to_string(),
            root: root.to_path_buf(),
            repo_mount: format!("{REPO_MOUNT_DIR}/{repo_name}"),
            created_at,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn snapshot(&self) -> Result<Snapshot, WorkspaceError> {
        Snapshot::capture(&self.root)
    }

    pub fn scope(&self) -> ChangeScope {
        ChangeScope::new(self.repo_mount.clone())
    }
}

/// Recursive copy that recreates symlinks instead of following them.
pub fn copy_tree(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for item in WalkDir::new(from).follow_links(false).min_depth(1) {
        let item = item.map_err(io::Error::from)?;
        let rel = item.path().strip_prefix(from).expect("walk stays under root");
        let dest = to.join(rel);
        let ft = item.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&dest)?;
        } else if ft.is_symlink() {
            let target = fs::read_link(item.path())?;
            if dest.symlink_metadata().is_ok() {
                fs::remove_file(&dest)?;
            }
            make_symlink(&target, &dest)?;
        } else {
            fs::copy(item.path(), &dest)?;
        }
    }
    Ok(())
}

#[cfg(unix)]
fn make_symlink(target: &Path, link: &Path) -> io::Result<()> {
    std::os::unix::fs::symlink(target, link)
}

#[cfg(not(unix))]
fn make_symlink(target: &Path, link: &Path) -> io::Result<()> {
    // No portable symlinks; store the target text instead.
    fs::write(link, target.to_string_lossy().as_bytes())
}

/// Content-addressed snapshot manifests plus a label index.
#[derive(Debug, Clone)]
pub struct EvidenceStore {
    dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceIndex {
    /// Label (e.g. `provision`, `S03`, `final`) → manifest digest.
    pub snapshots: BTreeMap<String, String>,
}

impl EvidenceStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        EvidenceStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn manifest_path(&self, digest: &str) -> PathBuf {
        self.dir.join("snapshots").join(format!("{digest}.json"))
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join("index.json")
    }

    pub fn put(&self, label: &str, snapshot: &Snapshot) -> io::Result<String> {
        let digest = snapshot.digest();
        let path = self.manifest_path(&digest);
        if !path.exists() {
            write_atomic(&path, to_json_pretty(snapshot).as_bytes())?;
        }
        let mut index = self.index()?;
        index.snapshots.insert(label.to_string(), digest.clone());
        write_atomic(&self.index_path(), to_json_pretty(&index).as_bytes())?;
        Ok(digest)
    }

    pub fn get(&self, digest: &str) -> io::Result<Snapshot> {
        let text = fs::read_to_string(self.manifest_path(digest))?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }

    pub fn index(&self) -> io::Result<EvidenceIndex> {
        match fs::read_to_string(self.index_path()) {
            Ok(text) => serde_json::from_str(&text).map_err(io::Error::other),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(EvidenceIndex::default()),
            Err(e) => Err(e),
        }
    }

    pub fn clear(&self) -> io::Result<()> {
        match fs::remove_dir_all(&self.dir) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}
