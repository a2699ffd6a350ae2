//! Running an [`OperationScript`].
//!
//! All kernel access goes through a [`SyscallBackend`]. [`LinuxBackend`]
//! talks to the kernel; [`RecordingBackend`] only logs what it was asked to
//! do; [`TracingBackend`] logs and then forwards to another backend.
//!
//! The executor is single-invocation-at-a-time: the Linux backend forks and
//! adjusts signal dispositions of the calling process while a child runs,
//! so it must not be driven from several threads at once.

mod linux;
mod recording;
mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::plan::{InvariantViolation, Op, OpKind, OperationScript};
use crate::spec::{IdMapPolicy, NamespaceSet};

pub use linux::{write_map_file, LinuxBackend, LinuxChild, MapFile};
pub use recording::{run_recorded, simulate, CallLog, RecordingBackend};
pub use trace::TracingBackend;

/// Exit status used by a child that failed before exec.
pub const SETUP_FAILURE_STATUS: u8 = 125;
/// Exit status for a command that exists but could not be executed.
pub const EXEC_NOT_EXECUTABLE_STATUS: u8 = 126;
/// Exit status for a command that could not be found.
pub const EXEC_NOT_FOUND_STATUS: u8 = 127;

/// Result of [`SyscallBackend::create_isolated_child`], seen from each side
/// of the fork.
#[derive(Debug)]
pub enum Spawned<C> {
    Parent(C),
    /// We are the child, already inside the new namespaces.
    Child,
}

/// An exec attempt that returned instead of replacing the process image.
#[derive(Debug)]
pub struct ExecFailure {
    /// The path (or bare name) that was being executed.
    pub command: String,
    pub error: io::Error,
}

impl ExecFailure {
    /// 127 when nothing was found, 126 otherwise.
    pub fn status(&self) -> u8 {
        match self.error.raw_os_error() {
            Some(libc::ENOENT) | Some(libc::ENOTDIR) => EXEC_NOT_FOUND_STATUS,
            _ => EXEC_NOT_EXECUTABLE_STATUS,
        }
    }
}

impl fmt::Display for ExecFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.command, self.error)
    }
}

/// A sandbox op that failed before the command ran.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupFailure {
    pub stage: OpKind,
    pub detail: String,
}

/// How the child side of a run ended.
#[derive(Debug)]
pub enum SandboxEnd {
    /// Exec succeeded; only observable with a backend that does not really exec.
    Replaced,
    SetupFailed(SetupFailure),
    ExecFailed(ExecFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Exited(u8),
    Signaled(i32),
}

/// What `wait` learned about a child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildStatus {
    pub termination: Termination,
    /// Set when the child reported a failed setup op before exiting.
    pub setup_failure: Option<SetupFailure>,
}

impl ChildStatus {
    pub fn outcome(self) -> ExecutionOutcome {
        match (self.setup_failure, self.termination) {
            (Some(SetupFailure { stage, detail }), _) => {
                ExecutionOutcome::SetupFailed { stage, detail }
            }
            (None, Termination::Exited(code)) => ExecutionOutcome::Exited(code),
            (None, Termination::Signaled(sig)) => ExecutionOutcome::Signaled(sig),
        }
    }
}

/// How the sandboxed command terminated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecutionOutcome {
    Exited(u8),
    Signaled(i32),
    SetupFailed { stage: OpKind, detail: String },
}

#[derive(Debug, Error)]
pub enum HandshakeError {
    #[error("kernel rejected write to {}: {source}", file.display())]
    MapWriteRejected { file: PathBuf, source: io::Error },
    #[error("child exited during the id-map handshake")]
    ChildDiedDuringHandshake,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(
        "cannot create {namespaces} namespaces: {source}. This kernel does not allow \
         unprivileged user namespaces; user namespace support (Linux 3.10+ with \
         CONFIG_USER_NS, user.max_user_namespaces > 0 and, where present, \
         kernel.unprivileged_userns_clone=1) is required"
    )]
    NamespacesUnavailable {
        namespaces: NamespaceSet,
        source: io::Error,
    },
    #[error("id-map handshake failed: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("waiting for the sandboxed child failed: {0}")]
    WaitFailed(io::Error),
    #[error(transparent)]
    MalformedScript(#[from] InvariantViolation),
}

/// The single boundary between the executor and the kernel.
pub trait SyscallBackend {
    type Child;

    /// Create a child in fresh namespaces. Returns on both sides of the fork.
    fn create_isolated_child(
        &mut self,
        namespaces: NamespaceSet,
    ) -> io::Result<Spawned<Self::Child>>;
    /// Parent side: write `setgroups`, `gid_map` and `uid_map` for the child.
    fn write_id_maps(
        &mut self,
        child: &Self::Child,
        policy: IdMapPolicy,
    ) -> Result<(), HandshakeError>;
    /// Parent side: release the child blocked in [`Self::await_maps_ready`].
    fn signal_maps_ready(&mut self, child: &mut Self::Child) -> Result<(), HandshakeError>;
    fn await_maps_ready(&mut self) -> io::Result<()>;
    fn make_mounts_private(&mut self) -> io::Result<()>;
    fn bind_mount(&mut self, source: &Path, target: &Path, recursive: bool) -> io::Result<()>;
    fn remount_read_only(&mut self, target: &Path) -> io::Result<()>;
    fn check_directory(&mut self, path: &Path) -> io::Result<()>;
    fn pivot_root(&mut self, new_root: &Path, put_old: &Path) -> io::Result<()>;
    fn chdir(&mut self, path: &Path) -> io::Result<()>;
    fn detach_unmount(&mut self, path: &Path) -> io::Result<()>;
    /// Replace the process image. Returning `Ok` means the backend does not
    /// really exec.
    fn exec(
        &mut self,
        command: &[String],
        env: &BTreeMap<String, String>,
    ) -> Result<(), ExecFailure>;
    /// Child side: terminate after the ops ran.
    fn finish_child(&mut self, end: &SandboxEnd) -> !;
    fn wait(&mut self, child: Self::Child) -> io::Result<ChildStatus>;
}

/// One backend call with its resolved arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Call {
    CreateIsolatedChild {
        namespaces: NamespaceSet,
    },
    WriteIdMaps {
        policy: IdMapPolicy,
    },
    SignalMapsReady,
    AwaitMapsReady,
    MakeMountsPrivate,
    BindMount {
        source: PathBuf,
        target: PathBuf,
        recursive: bool,
    },
    RemountReadOnly {
        target: PathBuf,
    },
    CheckDirectory {
        path: PathBuf,
    },
    PivotRoot {
        new_root: PathBuf,
        put_old: PathBuf,
    },
    Chdir {
        path: PathBuf,
    },
    DetachUnmount {
        path: PathBuf,
    },
    Exec {
        command: Vec<String>,
        env: BTreeMap<String, String>,
    },
    Wait,
}

impl Call {
    pub fn name(&self) -> &'static str {
        match self {
            Call::CreateIsolatedChild { .. } => "create_isolated_child",
            Call::WriteIdMaps { .. } => "write_id_maps",
            Call::SignalMapsReady => "signal_maps_ready",
            Call::AwaitMapsReady => "await_maps_ready",
            Call::MakeMountsPrivate => "make_mounts_private",
            Call::BindMount { .. } => "bind_mount",
            Call::RemountReadOnly { .. } => "remount_read_only",
            Call::CheckDirectory { .. } => "check_directory",
            Call::PivotRoot { .. } => "pivot_root",
            Call::Chdir { .. } => "chdir",
            Call::DetachUnmount { .. } => "detach_unmount",
            Call::Exec { .. } => "exec",
            Call::Wait => "wait",
        }
    }

    /// False for the parent's handshake and reaping calls, which have no op
    /// of their own in the script.
    pub fn is_script_step(&self) -> bool {
        !matches!(
            self,
            Call::WriteIdMaps { .. } | Call::SignalMapsReady | Call::Wait
        )
    }
}

impl fmt::Display for Call {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name())?;
        match self {
            Call::CreateIsolatedChild { namespaces } => write!(f, "namespaces={namespaces}")?,
            Call::WriteIdMaps { policy } => write!(f, "policy={policy:?}")?,
            Call::BindMount {
                source,
                target,
                recursive,
            } => write!(
                f,
                "source={}, target={}, recursive={recursive}",
                source.display(),
                target.display()
            )?,
            Call::RemountReadOnly { target } => write!(f, "target={}", target.display())?,
            Call::CheckDirectory { path } | Call::Chdir { path } | Call::DetachUnmount { path } => {
                write!(f, "path={}", path.display())?
            }
            Call::PivotRoot { new_root, put_old } => write!(
                f,
                "new_root={}, put_old={}",
                new_root.display(),
                put_old.display()
            )?,
            Call::Exec { command, env } => write!(f, "command={command:?}, env={env:?}")?,
            Call::SignalMapsReady | Call::AwaitMapsReady | Call::MakeMountsPrivate | Call::Wait => {
            }
        }
        f.write_str(")")
    }
}

/// Kernel answers to a namespace-creation request that mean "not supported
/// or not permitted here", as opposed to a transient failure.
pub fn is_namespace_rejection(err: &io::Error) -> bool {
    matches!(
        err.raw_os_error(),
        Some(libc::EPERM | libc::EINVAL | libc::ENOSPC | libc::EUSERS | libc::ENOSYS)
    )
}

/// Parent side of the id-map handshake.
pub fn id_map_handshake<B: SyscallBackend>(
    backend: &mut B,
    child: &mut B::Child,
    policy: IdMapPolicy,
) -> Result<(), HandshakeError> {
    backend.write_id_maps(child, policy)?;
    backend.signal_maps_ready(child)
}

fn in_old_root(old_root: &Path, source: &Path) -> PathBuf {
    old_root.join(source.strip_prefix("/").unwrap_or(source))
}

fn ctx(path: &Path, err: io::Error) -> String {
    format!("{}: {err}", path.display())
}

/// Run the child-side ops (everything after `EnterNamespaces`) in order,
/// stopping at the first failure.
pub fn run_sandbox_ops<B: SyscallBackend + ?Sized>(backend: &mut B, ops: &[Op]) -> SandboxEnd {
    let mut old_root: Option<PathBuf> = None;
    for op in ops {
        let result: Result<(), String> = match op {
            Op::EnterNamespaces(_) => Err("already inside the sandbox namespaces".into()),
            Op::AwaitIdMapHandshake => backend
                .await_maps_ready()
                .map_err(|e| format!("waiting for id maps: {e}")),
            Op::MakeMountTreePrivate => backend
                .make_mounts_private()
                .map_err(|e| ctx(Path::new("/"), e)),
            Op::SelfBindNewRoot { new_root } => backend
                .bind_mount(new_root, new_root, true)
                .map_err(|e| ctx(new_root, e)),
            Op::CheckOldRootDir { path } => backend.check_directory(path).map_err(|e| {
                format!(
                    "old-root directory {} must exist inside the new root: {e}",
                    path.display()
                )
            }),
            Op::PivotRoot {
                new_root,
                old_root_dir,
            } => {
                let put_old = new_root.join(old_root_dir);
                let r = backend
                    .pivot_root(new_root, &put_old)
                    .map_err(|e| ctx(new_root, e));
                if r.is_ok() {
                    old_root = Some(Path::new("/").join(old_root_dir));
                }
                r
            }
            Op::ChdirRoot => backend
                .chdir(Path::new("/"))
                .map_err(|e| ctx(Path::new("/"), e)),
            Op::ApplyBind {
                source,
                target,
                read_only,
            } => match &old_root {
                None => Err("bind requested before the root was pivoted".into()),
                Some(old_root) => {
                    let resolved = in_old_root(old_root, source);
                    backend
                        .bind_mount(&resolved, target, true)
                        .map_err(|e| format!("{} -> {}: {e}", source.display(), target.display()))
                        .and_then(|()| {
                            if *read_only {
                                backend.remount_read_only(target).map_err(|e| {
                                    format!("read-only remount of {}: {e}", target.display())
                                })
                            } else {
                                Ok(())
                            }
                        })
                }
            },
            Op::DetachOldRoot { old_root_dir } => {
                let path = Path::new("/").join(old_root_dir);
                backend.detach_unmount(&path).map_err(|e| ctx(&path, e))
            }
            Op::Exec { command, env } => {
                return match backend.exec(command, env) {
                    Ok(()) => SandboxEnd::Replaced,
                    Err(failure) => SandboxEnd::ExecFailed(failure),
                };
            }
        };
        if let Err(detail) = result {
            return SandboxEnd::SetupFailed(SetupFailure {
                stage: op.kind(),
                detail,
            });
        }
    }
    SandboxEnd::SetupFailed(SetupFailure {
        stage: OpKind::Exec,
        detail: "script ended without an exec".into(),
    })
}

/// Execute a compiled script: create the isolated child, perform the id-map
/// handshake, and wait for the command to finish.
///
/// On the child side of the fork this never returns.
pub fn execute<B: SyscallBackend>(
    backend: &mut B,
    script: &OperationScript,
    policy: IdMapPolicy,
) -> Result<ExecutionOutcome, ExecError> {
    script.check_invariants()?;
    let Op::EnterNamespaces(namespaces) = script.ops()[0] else {
        unreachable!("checked by check_invariants");
    };

    let mut child = match backend.create_isolated_child(namespaces) {
        Ok(Spawned::Parent(child)) => child,
        Ok(Spawned::Child) => {
            let end = run_sandbox_ops(backend, &script.ops()[1..]);
            backend.finish_child(&end)
        }
        Err(source) if is_namespace_rejection(&source) => {
            return Err(ExecError::NamespacesUnavailable { namespaces, source })
        }
        Err(e) => {
            return Ok(ExecutionOutcome::SetupFailed {
                stage: OpKind::EnterNamespaces,
                detail: e.to_string(),
            })
        }
    };

    if let Err(e) = id_map_handshake(backend, &mut child, policy) {
        // The child sees the handshake channel close and exits on its own.
        let _ = backend.wait(child);
        return Err(e.into());
    }
    let status = backend.wait(child).map_err(ExecError::WaitFailed)?;
    Ok(status.outcome())
}
