//! Sandbox request model and validation.
//!
//! A [`SpecCandidate`] is whatever the front end managed to collect from the
//! user. [`validate_spec`] turns it into a [`SandboxSpec`], whose fields can
//! only be read, never mutated, so every type invariant holds for the
//! lifetime of the value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

/// Default location of the old root, relative to the new root.
pub const DEFAULT_OLD_ROOT_DIR: &str = "mnt";

/// Namespaces the sandboxed child is created in.
///
/// User and mount namespaces are always part of the set; there is no way to
/// express a set without them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NamespaceSet {
    net: bool,
    ipc: bool,
}

impl NamespaceSet {
    pub fn new(net: bool, ipc: bool) -> Self {
        NamespaceSet { net, ipc }
    }

    pub fn user(&self) -> bool {
        true
    }

    pub fn mount(&self) -> bool {
        true
    }

    pub fn net(&self) -> bool {
        self.net
    }

    pub fn ipc(&self) -> bool {
        self.ipc
    }

    /// Rebuild a set from all four flags. Returns `None` if user or mount
    /// is disabled.
    pub fn from_flags(user: bool, mount: bool, net: bool, ipc: bool) -> Option<Self> {
        (user && mount).then_some(NamespaceSet { net, ipc })
    }

    /// Raw `CLONE_NEW*` bits for this set.
    pub fn clone_flags(&self) -> libc::c_int {
        let mut flags = libc::CLONE_NEWUSER | libc::CLONE_NEWNS;
        if self.net {
            flags |= libc::CLONE_NEWNET;
        }
        if self.ipc {
            flags |= libc::CLONE_NEWIPC;
        }
        flags
    }
}

impl fmt::Display for NamespaceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("user,mount")?;
        if self.net {
            f.write_str(",net")?;
        }
        if self.ipc {
            f.write_str(",ipc")?;
        }
        Ok(())
    }
}

/// How the invoking user's ids appear inside the user namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum IdMapPolicy {
    /// Outer uid/gid become 0/0 inside.
    #[default]
    RootInside,
    /// Outer uid/gid keep their numeric values inside.
    SameIdInside,
}

impl IdMapPolicy {
    /// The id the outer `id` maps to inside the namespace.
    pub fn inside_id(&self, outer: u32) -> u32 {
        match self {
            IdMapPolicy::RootInside => 0,
            IdMapPolicy::SameIdInside => outer,
        }
    }

    /// Content of a single-line `uid_map`/`gid_map` for `outer`.
    pub fn map_line(&self, outer: u32) -> String {
        format!("{} {} 1", self.inside_id(outer), outer)
    }
}

/// One shared directory, mounted from the host into the new root.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BindMount {
    source: PathBuf,
    target: PathBuf,
    read_only: bool,
}

impl BindMount {
    /// Host path, as seen before the pivot.
    pub fn source(&self) -> &Path {
        &self.source
    }

    /// Path inside the new root.
    pub fn target(&self) -> &Path {
        &self.target
    }

    pub fn read_only(&self) -> bool {
        self.read_only
    }
}

/// Unvalidated bind request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindRequest {
    pub source: PathBuf,
    pub target: PathBuf,
    pub read_only: bool,
}

impl BindRequest {
    pub fn new(source: impl Into<PathBuf>, target: impl Into<PathBuf>, read_only: bool) -> Self {
        BindRequest {
            source: source.into(),
            target: target.into(),
            read_only,
        }
    }
}

/// Everything the user asked for, before any checking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecCandidate {
    pub new_root: PathBuf,
    pub old_root_dir: PathBuf,
    pub binds: Vec<BindRequest>,
    pub namespaces: NamespaceSet,
    pub id_map: IdMapPolicy,
    pub command: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub dry_run: bool,
}

impl SpecCandidate {
    /// A candidate with default old-root dir, no binds and an empty environment.
    pub fn new(new_root: impl Into<PathBuf>, command: Vec<String>) -> Self {
        SpecCandidate {
            new_root: new_root.into(),
            old_root_dir: PathBuf::from(DEFAULT_OLD_ROOT_DIR),
            binds: Vec::new(),
            namespaces: NamespaceSet::default(),
            id_map: IdMapPolicy::default(),
            command,
            env: BTreeMap::new(),
            dry_run: false,
        }
    }
}

/// A validated sandbox run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxSpec {
    new_root: PathBuf,
    old_root_dir: PathBuf,
    binds: Vec<BindMount>,
    namespaces: NamespaceSet,
    id_map: IdMapPolicy,
    command: Vec<String>,
    env: BTreeMap<String, String>,
    dry_run: bool,
}

impl SandboxSpec {
    pub fn new_root(&self) -> &Path {
        &self.new_root
    }

    /// Old-root directory, relative to the new root.
    pub fn old_root_dir(&self) -> &Path {
        &self.old_root_dir
    }

    /// Where the old root lives once the pivot is done, e.g. `/mnt`.
    pub fn old_root_in_sandbox(&self) -> PathBuf {
        Path::new("/").join(&self.old_root_dir)
    }

    pub fn binds(&self) -> &[BindMount] {
        &self.binds
    }

    pub fn namespaces(&self) -> NamespaceSet {
        self.namespaces
    }

    pub fn id_map(&self) -> IdMapPolicy {
        self.id_map
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    pub fn env(&self) -> &BTreeMap<String, String> {
        &self.env
    }

    pub fn dry_run(&self) -> bool {
        self.dry_run
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("{field}: path must be absolute: {path}")]
    NonAbsolutePath { field: String, path: PathBuf },
    #[error("{field}: bind target {target} is already used by another bind")]
    DuplicateBindTarget { field: String, target: PathBuf },
    #[error("command: no command given")]
    EmptyCommand,
    #[error("old_root_dir: must be a relative path inside the new root without '..': {path}")]
    BadOldRootDir { path: PathBuf },
    #[error("{field}: bind target {target} overlaps the old-root directory {old_root}")]
    BindTargetConflictsWithOldRoot {
        field: String,
        target: PathBuf,
        old_root: PathBuf,
    },
}

impl ValidationError {
    /// Name of the offending field, e.g. `binds[1].target`.
    pub fn field(&self) -> &str {
        match self {
            ValidationError::NonAbsolutePath { field, .. }
            | ValidationError::DuplicateBindTarget { field, .. }
            | ValidationError::BindTargetConflictsWithOldRoot { field, .. } => field,
            ValidationError::EmptyCommand => "command",
            ValidationError::BadOldRootDir { .. } => "old_root_dir",
        }
    }
}

/// Lexically normalize an absolute path: drop `.` and empty components,
/// resolve `..` against the preceding component (`/..` stays `/`).
/// Returns `None` for relative paths.
pub fn normalize_absolute(path: &Path) -> Option<PathBuf> {
    if !path.is_absolute() {
        return None;
    }
    let mut out = PathBuf::from("/");
    for component in path.components() {
        match component {
            Component::RootDir | Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            Component::Normal(part) => out.push(part),
            Component::Prefix(_) => return None,
        }
    }
    Some(out)
}

fn absolute(field: &str, path: &Path) -> Result<PathBuf, ValidationError> {
    normalize_absolute(path).ok_or_else(|| ValidationError::NonAbsolutePath {
        field: field.to_string(),
        path: path.to_path_buf(),
    })
}

fn old_root_dir(path: &Path) -> Result<PathBuf, ValidationError> {
    let bad = || ValidationError::BadOldRootDir {
        path: path.to_path_buf(),
    };
    let mut out = PathBuf::new();
    for component in path.components() {
        match component {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return Err(bad()),
        }
    }
    if out.as_os_str().is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// True if one path is an ancestor of (or equal to) the other, comparing
/// whole components.
fn overlaps(a: &Path, b: &Path) -> bool {
    a.starts_with(b) || b.starts_with(a)
}

/// Check a candidate against every rule and normalize its paths.
///
/// Rules are checked in field order (new root, old-root dir, command, binds
/// in order) and the first violation is reported.
pub fn validate_spec(candidate: SpecCandidate) -> Result<SandboxSpec, ValidationError> {
    let new_root = absolute("new_root", &candidate.new_root)?;
    let old_root_dir = old_root_dir(&candidate.old_root_dir)?;
    if candidate.command.is_empty() {
        return Err(ValidationError::EmptyCommand);
    }

    let old_root = Path::new("/").join(&old_root_dir);
    let mut binds: Vec<BindMount> = Vec::with_capacity(candidate.binds.len());
    for (i, bind) in candidate.binds.iter().enumerate() {
        let source = absolute(&format!("binds[{i}].source"), &bind.source)?;
        let target_field = format!("binds[{i}].target");
        let target = absolute(&target_field, &bind.target)?;
        if overlaps(&target, &old_root) {
            return Err(ValidationError::BindTargetConflictsWithOldRoot {
                field: target_field,
                target,
                old_root,
            });
        }
        if binds.iter().any(|b| b.target == target) {
            return Err(ValidationError::DuplicateBindTarget {
                field: target_field,
                target,
            });
        }
        binds.push(BindMount {
            source,
            target,
            read_only: bind.read_only,
        });
    }

    Ok(SandboxSpec {
        new_root,
        old_root_dir,
        binds,
        namespaces: candidate.namespaces,
        id_map: candidate.id_map,
        command: candidate.command,
        env: candidate.env,
        dry_run: candidate.dry_run,
    })
}
