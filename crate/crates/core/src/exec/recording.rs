//! A backend that records calls instead of making them.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::{Path, PathBuf};

use super::{
    id_map_handshake, is_namespace_rejection, run_sandbox_ops, Call, ChildStatus, ExecError,
    ExecFailure, ExecutionOutcome, HandshakeError, SandboxEnd, SetupFailure, Spawned,
    SyscallBackend, Termination, SETUP_FAILURE_STATUS,
};
use crate::plan::{Op, OpKind, OperationScript};
use crate::spec::{IdMapPolicy, NamespaceSet};

/// Pretend pid handed out for the fake child.
const FAKE_PID: u32 = 4242;

/// Handle for the child that never existed.
#[derive(Debug)]
pub struct RecordedChild {
    pid: u32,
}

/// Logs every call and returns scripted results. Nothing touches the kernel.
///
/// All calls succeed unless [`RecordingBackend::fail_on`] says otherwise.
/// `create_isolated_child` always answers as the parent; use [`simulate`]
/// to drive the child-side ops in-process.
#[derive(Debug)]
pub struct RecordingBackend {
    calls: Vec<Call>,
    failures: HashMap<&'static str, i32>,
    outer_uid: u32,
    outer_gid: u32,
    map_writes: Vec<(PathBuf, String)>,
    exit_code: u8,
    child_end: Option<ChildStatus>,
}

impl Default for RecordingBackend {
    fn default() -> Self {
        RecordingBackend::new(1000, 1000)
    }
}

impl RecordingBackend {
    /// A backend whose caller appears to have the given outer ids.
    pub fn new(outer_uid: u32, outer_gid: u32) -> Self {
        RecordingBackend {
            calls: Vec::new(),
            failures: HashMap::new(),
            outer_uid,
            outer_gid,
            map_writes: Vec::new(),
            exit_code: 0,
            child_end: None,
        }
    }

    /// Make the call named `call` (see [`Call::name`]) fail with `errno`.
    pub fn fail_on(mut self, call: &'static str, errno: i32) -> Self {
        self.failures.insert(call, errno);
        self
    }

    /// Exit code reported by `wait` when the command "ran".
    pub fn exit_code(mut self, code: u8) -> Self {
        self.exit_code = code;
        self
    }

    pub fn calls(&self) -> &[Call] {
        &self.calls
    }

    /// `(file, content)` for every map file write, in order.
    pub fn map_writes(&self) -> &[(PathBuf, String)] {
        &self.map_writes
    }

    pub fn into_calls(self) -> Vec<Call> {
        self.calls
    }

    fn record(&mut self, call: Call) -> io::Result<()> {
        let name = call.name();
        self.calls.push(call);
        match self.failures.get(name) {
            Some(&errno) => Err(io::Error::from_raw_os_error(errno)),
            None => Ok(()),
        }
    }

    fn map_write(&mut self, file: &str, content: String) -> Result<(), HandshakeError> {
        let path = PathBuf::from(format!("/proc/{FAKE_PID}/{file}"));
        let key: &'static str = match file {
            "setgroups" => "write_setgroups",
            "gid_map" => "write_gid_map",
            _ => "write_uid_map",
        };
        if let Some(&errno) = self.failures.get(key) {
            return Err(HandshakeError::MapWriteRejected {
                file: path,
                source: io::Error::from_raw_os_error(errno),
            });
        }
        self.map_writes.push((path, content));
        Ok(())
    }

    fn set_child_end(&mut self, end: &SandboxEnd) {
        self.child_end = Some(match end {
            SandboxEnd::Replaced => ChildStatus {
                termination: Termination::Exited(self.exit_code),
                setup_failure: None,
            },
            SandboxEnd::SetupFailed(failure) => ChildStatus {
                termination: Termination::Exited(SETUP_FAILURE_STATUS),
                setup_failure: Some(failure.clone()),
            },
            SandboxEnd::ExecFailed(failure) => ChildStatus {
                termination: Termination::Exited(failure.status()),
                setup_failure: None,
            },
        });
    }
}

impl SyscallBackend for RecordingBackend {
    type Child = RecordedChild;

    fn create_isolated_child(
        &mut self,
        namespaces: NamespaceSet,
    ) -> io::Result<Spawned<RecordedChild>> {
        self.record(Call::CreateIsolatedChild { namespaces })?;
        Ok(Spawned::Parent(RecordedChild { pid: FAKE_PID }))
    }

    fn write_id_maps(
        &mut self,
        child: &RecordedChild,
        policy: IdMapPolicy,
    ) -> Result<(), HandshakeError> {
        debug_assert_eq!(child.pid, FAKE_PID);
        self.record(Call::WriteIdMaps { policy })
            .map_err(|source| HandshakeError::MapWriteRejected {
                file: format!("/proc/{}", child.pid).into(),
                source,
            })?;
        self.map_write("setgroups", "deny".to_string())?;
        self.map_write("gid_map", policy.map_line(self.outer_gid))?;
        self.map_write("uid_map", policy.map_line(self.outer_uid))
    }

    fn signal_maps_ready(&mut self, _child: &mut RecordedChild) -> Result<(), HandshakeError> {
        self.record(Call::SignalMapsReady)
            .map_err(|_| HandshakeError::ChildDiedDuringHandshake)
    }

    fn await_maps_ready(&mut self) -> io::Result<()> {
        self.record(Call::AwaitMapsReady)
    }

    fn make_mounts_private(&mut self) -> io::Result<()> {
        self.record(Call::MakeMountsPrivate)
    }

    fn bind_mount(&mut self, source: &Path, target: &Path, recursive: bool) -> io::Result<()> {
        self.record(Call::BindMount {
            source: source.to_path_buf(),
            target: target.to_path_buf(),
            recursive,
        })
    }

    fn remount_read_only(&mut self, target: &Path) -> io::Result<()> {
        self.record(Call::RemountReadOnly {
            target: target.to_path_buf(),
        })
    }

    fn check_directory(&mut self, path: &Path) -> io::Result<()> {
        self.record(Call::CheckDirectory {
            path: path.to_path_buf(),
        })
    }

    fn pivot_root(&mut self, new_root: &Path, put_old: &Path) -> io::Result<()> {
        self.record(Call::PivotRoot {
            new_root: new_root.to_path_buf(),
            put_old: put_old.to_path_buf(),
        })
    }

    fn chdir(&mut self, path: &Path) -> io::Result<()> {
        self.record(Call::Chdir {
            path: path.to_path_buf(),
        })
    }

    fn detach_unmount(&mut self, path: &Path) -> io::Result<()> {
        self.record(Call::DetachUnmount {
            path: path.to_path_buf(),
        })
    }

    fn exec(
        &mut self,
        command: &[String],
        env: &BTreeMap<String, String>,
    ) -> Result<(), ExecFailure> {
        self.record(Call::Exec {
            command: command.to_vec(),
            env: env.clone(),
        })
        .map_err(|error| ExecFailure {
            command: command.first().cloned().unwrap_or_default(),
            error,
        })
    }

    fn finish_child(&mut self, _end: &SandboxEnd) -> ! {
        unreachable!("the recording backend never runs on the child side")
    }

    fn wait(&mut self, _child: RecordedChild) -> io::Result<ChildStatus> {
        self.record(Call::Wait)?;
        Ok(self.child_end.take().unwrap_or(ChildStatus {
            termination: Termination::Exited(self.exit_code),
            setup_failure: None,
        }))
    }
}

/// Drive a whole run through a recording backend in-process: parent setup,
/// handshake, every child-side op, then `wait`.
pub fn simulate(
    backend: &mut RecordingBackend,
    script: &OperationScript,
    policy: IdMapPolicy,
) -> Result<ExecutionOutcome, ExecError> {
    let (namespaces, rest) = match script.ops().split_first() {
        Some((Op::EnterNamespaces(ns), rest)) => (*ns, rest),
        _ => (NamespaceSet::default(), script.ops()),
    };
    let mut child = match backend.create_isolated_child(namespaces) {
        Ok(Spawned::Parent(child)) => child,
        Ok(Spawned::Child) => unreachable!(),
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
        backend.set_child_end(&SandboxEnd::SetupFailed(SetupFailure {
            stage: OpKind::AwaitIdMapHandshake,
            detail: "handshake channel closed".into(),
        }));
        let _ = backend.wait(child);
        return Err(e.into());
    }
    let end = run_sandbox_ops(backend, rest);
    backend.set_child_end(&end);
    let status = backend.wait(child).map_err(ExecError::WaitFailed)?;
    Ok(status.outcome())
}

/// Every call made while simulating a script, plus how it ended.
#[derive(Debug)]
pub struct CallLog {
    pub calls: Vec<Call>,
    pub outcome: Result<ExecutionOutcome, String>,
}

impl CallLog {
    /// Calls that implement script ops, in script order.
    pub fn script_steps(&self) -> Vec<&Call> {
        self.calls.iter().filter(|c| c.is_script_step()).collect()
    }

    /// Parent-side handshake and reaping calls.
    pub fn host_steps(&self) -> Vec<&Call> {
        self.calls.iter().filter(|c| !c.is_script_step()).collect()
    }
}

/// Record the calls a script makes against an all-succeeding backend.
pub fn run_recorded(script: &OperationScript, policy: IdMapPolicy) -> CallLog {
    let mut backend = RecordingBackend::default();
    let outcome = simulate(&mut backend, script, policy).map_err(|e| e.to_string());
    CallLog {
        calls: backend.into_calls(),
        outcome,
    }
}
