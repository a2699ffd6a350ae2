//! Compiling a [`SandboxSpec`] into an ordered script of primitive operations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::spec::{NamespaceSet, SandboxSpec};

/// One primitive step of a sandbox run.
///
/// Every variant carries the data needed to perform it. The one piece of
/// state the executor carries between ops is the old-root location set by
/// [`Op::PivotRoot`], which [`Op::ApplyBind`] uses to find its source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    EnterNamespaces(NamespaceSet),
    /// Block until the parent has written the id maps.
    AwaitIdMapHandshake,
    /// Recursively mark every mount private so nothing propagates to the host.
    MakeMountTreePrivate,
    /// Bind the new root onto itself so it becomes a mount point.
    SelfBindNewRoot {
        new_root: PathBuf,
    },
    /// Fail unless `path` (new root joined with the old-root dir) is a directory.
    CheckOldRootDir {
        path: PathBuf,
    },
    PivotRoot {
        new_root: PathBuf,
        old_root_dir: PathBuf,
    },
    ChdirRoot,
    /// `source` is a host path; it is resolved under the old root at run time.
    ApplyBind {
        source: PathBuf,
        target: PathBuf,
        read_only: bool,
    },
    /// Lazily unmount `/<old_root_dir>`.
    DetachOldRoot {
        old_root_dir: PathBuf,
    },
    Exec {
        command: Vec<String>,
        env: BTreeMap<String, String>,
    },
}

/// Payload-free tag for an [`Op`], used as the stage name in diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    EnterNamespaces,
    AwaitIdMapHandshake,
    MakeMountTreePrivate,
    SelfBindNewRoot,
    CheckOldRootDir,
    PivotRoot,
    ChdirRoot,
    ApplyBind,
    DetachOldRoot,
    Exec,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::EnterNamespaces,
        OpKind::AwaitIdMapHandshake,
        OpKind::MakeMountTreePrivate,
        OpKind::SelfBindNewRoot,
        OpKind::CheckOldRootDir,
        OpKind::PivotRoot,
        OpKind::ChdirRoot,
        OpKind::ApplyBind,
        OpKind::DetachOldRoot,
        OpKind::Exec,
    ];

    /// CamelCase name, as used in diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::EnterNamespaces => "EnterNamespaces",
            OpKind::AwaitIdMapHandshake => "AwaitIdMapHandshake",
            OpKind::MakeMountTreePrivate => "MakeMountTreePrivate",
            OpKind::SelfBindNewRoot => "SelfBindNewRoot",
            OpKind::CheckOldRootDir => "CheckOldRootDir",
            OpKind::PivotRoot => "PivotRoot",
            OpKind::ChdirRoot => "ChdirRoot",
            OpKind::ApplyBind => "ApplyBind",
            OpKind::DetachOldRoot => "DetachOldRoot",
            OpKind::Exec => "Exec",
        }
    }

    /// SCREAMING_SNAKE name, as used in rendered plans.
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::EnterNamespaces => "ENTER_NAMESPACES",
            OpKind::AwaitIdMapHandshake => "AWAIT_ID_MAP_HANDSHAKE",
            OpKind::MakeMountTreePrivate => "MAKE_MOUNT_TREE_PRIVATE",
            OpKind::SelfBindNewRoot => "SELF_BIND_NEW_ROOT",
            OpKind::CheckOldRootDir => "CHECK_OLD_ROOT_DIR",
            OpKind::PivotRoot => "PIVOT_ROOT",
            OpKind::ChdirRoot => "CHDIR_ROOT",
            OpKind::ApplyBind => "APPLY_BIND",
            OpKind::DetachOldRoot => "DETACH_OLD_ROOT",
            OpKind::Exec => "EXEC",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn from_tag(tag: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::EnterNamespaces(_) => OpKind::EnterNamespaces,
            Op::AwaitIdMapHandshake => OpKind::AwaitIdMapHandshake,
            Op::MakeMountTreePrivate => OpKind::MakeMountTreePrivate,
            Op::SelfBindNewRoot { .. } => OpKind::SelfBindNewRoot,
            Op::CheckOldRootDir { .. } => OpKind::CheckOldRootDir,
            Op::PivotRoot { .. } => OpKind::PivotRoot,
            Op::ChdirRoot => OpKind::ChdirRoot,
            Op::ApplyBind { .. } => OpKind::ApplyBind,
            Op::DetachOldRoot { .. } => OpKind::DetachOldRoot,
            Op::Exec { .. } => OpKind::Exec,
        }
    }
}

/// Ordered list of ops for one sandbox run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OperationScript {
    ops: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed operation script: {0}")]
pub struct InvariantViolation(pub String);

impl OperationScript {
    /// Wrap an arbitrary op list. Nothing is checked; see
    /// [`OperationScript::check_invariants`].
    pub fn from_ops(ops: Vec<Op>) -> Self {
        OperationScript { ops }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn into_ops(self) -> Vec<Op> {
        self.ops
    }

    fn positions(&self, kind: OpKind) -> Vec<usize> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, op)| op.kind() == kind)
            .map(|(i, _)| i)
            .collect()
    }

    fn single(&self, kind: OpKind) -> Result<usize, InvariantViolation> {
        match self.positions(kind).as_slice() {
            [i] => Ok(*i),
            other => Err(InvariantViolation(format!(
                "expected exactly one {kind}, found {}",
                other.len()
            ))),
        }
    }

    /// Check the ordering rules every compiled script obeys.
    pub fn check_invariants(&self) -> Result<(), InvariantViolation> {
        let fail = |msg: &str| Err(InvariantViolation(msg.to_string()));
        let kinds: Vec<OpKind> = self.ops.iter().map(Op::kind).collect();
        if kinds.first() != Some(&OpKind::EnterNamespaces) {
            return fail("first op must be EnterNamespaces");
        }
        if kinds.get(1) != Some(&OpKind::AwaitIdMapHandshake) {
            return fail("second op must be AwaitIdMapHandshake");
        }
        let enter = self.single(OpKind::EnterNamespaces)?;
        let await_maps = self.single(OpKind::AwaitIdMapHandshake)?;
        let private = self.single(OpKind::MakeMountTreePrivate)?;
        let self_bind = self.single(OpKind::SelfBindNewRoot)?;
        let pivot = self.single(OpKind::PivotRoot)?;
        let chdir = self.single(OpKind::ChdirRoot)?;
        let detach = self.single(OpKind::DetachOldRoot)?;
        let exec = self.single(OpKind::Exec)?;
        debug_assert!(enter == 0 && await_maps == 1);
        if !(private < self_bind && self_bind < pivot) {
            return fail("MakeMountTreePrivate < SelfBindNewRoot < PivotRoot violated");
        }
        if chdir != pivot + 1 {
            return fail("ChdirRoot must immediately follow PivotRoot");
        }
        if self
            .positions(OpKind::ApplyBind)
            .iter()
            .any(|&i| i < chdir || i > detach)
        {
            return fail("ApplyBind must sit between ChdirRoot and DetachOldRoot");
        }
        if detach < chdir {
            return fail("DetachOldRoot must follow ChdirRoot");
        }
        if exec != self.ops.len() - 1 {
            return fail("Exec must be the final op");
        }
        Ok(())
    }

    /// The `ApplyBind` ops, in order.
    pub fn binds(&self) -> impl Iterator<Item = (&Path, &Path, bool)> {
        self.ops.iter().filter_map(|op| match op {
            Op::ApplyBind {
                source,
                target,
                read_only,
            } => Some((source.as_path(), target.as_path(), *read_only)),
            _ => None,
        })
    }
}

/// Compile a validated spec into its operation script.
pub fn compile_plan(spec: &SandboxSpec) -> OperationScript {
    let new_root = spec.new_root().to_path_buf();
    let old_root_dir = spec.old_root_dir().to_path_buf();

    let mut ops = vec![
        Op::EnterNamespaces(spec.namespaces()),
        Op::AwaitIdMapHandshake,
        Op::MakeMountTreePrivate,
        Op::SelfBindNewRoot {
            new_root: new_root.clone(),
        },
        Op::CheckOldRootDir {
            path: new_root.join(&old_root_dir),
        },
        Op::PivotRoot {
            new_root,
            old_root_dir: old_root_dir.clone(),
        },
        Op::ChdirRoot,
    ];
    ops.extend(spec.binds().iter().map(|b| Op::ApplyBind {
        source: b.source().to_path_buf(),
        target: b.target().to_path_buf(),
        read_only: b.read_only(),
    }));
    ops.push(Op::DetachOldRoot { old_root_dir });
    ops.push(Op::Exec {
        command: spec.command().to_vec(),
        env: spec.env().clone(),
    });
    OperationScript { ops }
}
