//! The kernel-facing backend.
//!
//! The child is created with `fork` + `unshare`, so it is single-threaded
//! when it enters the user namespace. Two close-on-exec pipes connect the
//! two sides:
//!
//! * report (child to parent): `READY` once the namespaces exist, or
//!   `UNSHARE <errno>`; later at most one `FAIL <stage>\t<detail>` line.
//! * go (parent to child): one byte once the id maps are written. EOF means
//!   the parent gave up.
//!
//! A successful exec closes both child ends, so an empty report after
//! `READY` means no setup op failed.

use std::collections::BTreeMap;
use std::ffi::CString;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use nix::errno::Errno;
use nix::mount::{mount, umount2, MntFlags, MsFlags};
use nix::sched::{unshare, CloneFlags};
use nix::sys::signal::{sigaction, SaFlags, SigAction, SigHandler, SigSet, Signal};
use nix::sys::statvfs::{statvfs, FsFlags};
use nix::sys::wait::{waitpid, WaitStatus};
use nix::unistd::{self, fork, ForkResult, Pid};

use super::{
    ChildStatus, ExecFailure, HandshakeError, SandboxEnd, SetupFailure, Spawned, SyscallBackend,
    Termination, SETUP_FAILURE_STATUS,
};
use crate::plan::OpKind;
use crate::spec::{IdMapPolicy, NamespaceSet};

const DEFAULT_PATH: &str = "/bin:/usr/bin";

/// One of the three per-process id-mapping control files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFile {
    Setgroups,
    GidMap,
    UidMap,
}

impl MapFile {
    pub fn file_name(&self) -> &'static str {
        match self {
            MapFile::Setgroups => "setgroups",
            MapFile::GidMap => "gid_map",
            MapFile::UidMap => "uid_map",
        }
    }

    pub fn path(&self, pid: i32) -> PathBuf {
        PathBuf::from(format!("/proc/{pid}/{}", self.file_name()))
    }
}

/// Write `content` to one of `pid`'s mapping files in a single `write`.
pub fn write_map_file(pid: i32, file: MapFile, content: &str) -> Result<(), HandshakeError> {
    let path = file.path(pid);
    if !Path::new(&format!("/proc/{pid}")).exists() {
        return Err(HandshakeError::ChildDiedDuringHandshake);
    }
    let rejected = |source| HandshakeError::MapWriteRejected {
        file: path.clone(),
        source,
    };
    let mut f = OpenOptions::new()
        .write(true)
        .open(&path)
        .map_err(rejected)?;
    match f.write(content.as_bytes()) {
        Ok(n) if n == content.len() => Ok(()),
        Ok(_) => Err(rejected(io::Error::new(
            io::ErrorKind::WriteZero,
            "short write",
        ))),
        Err(e) => Err(rejected(e)),
    }
}

struct ChildChannel {
    report: File,
    go: File,
}

/// Talks to the Linux kernel.
#[derive(Default)]
pub struct LinuxBackend {
    // Only set on the child side of the fork.
    channel: Option<ChildChannel>,
}

impl LinuxBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Parent-side handle for a sandboxed child.
pub struct LinuxChild {
    pid: Pid,
    report: File,
    go: Option<File>,
    saved_signals: Vec<(Signal, SigAction)>,
}

impl LinuxChild {
    pub fn pid(&self) -> i32 {
        self.pid.as_raw()
    }
}

fn read_line(file: &mut File) -> io::Result<Option<String>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match file.read(&mut byte) {
            Ok(0) if line.is_empty() => return Ok(None),
            Ok(0) => break,
            Ok(_) if byte[0] == b'\n' => break,
            Ok(_) => line.push(byte[0]),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Some(String::from_utf8_lossy(&line).into_owned()))
}

fn reap(pid: Pid) -> io::Result<WaitStatus> {
    loop {
        match waitpid(pid, None) {
            Err(Errno::EINTR) => continue,
            Ok(status @ (WaitStatus::Exited(..) | WaitStatus::Signaled(..))) => return Ok(status),
            Ok(_) => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

fn child_exit(code: u8) -> ! {
    // SAFETY: _exit is async-signal-safe and skips atexit handlers and
    // stdio flushing, which belong to the parent.
    unsafe { libc::_exit(code as libc::c_int) }
}

fn ignore_interactive_signals() -> Vec<(Signal, SigAction)> {
    let ignore = SigAction::new(SigHandler::SigIgn, SaFlags::empty(), SigSet::empty());
    [Signal::SIGINT, Signal::SIGQUIT]
        .into_iter()
        .filter_map(|sig| {
            // SAFETY: installing SIG_IGN has no handler code to race with.
            unsafe { sigaction(sig, &ignore) }
                .ok()
                .map(|old| (sig, old))
        })
        .collect()
}

fn read_only_remount_flags(target: &Path) -> io::Result<MsFlags> {
    // Flags locked by the user namespace must be carried over, or the
    // remount is refused with EPERM.
    let current = statvfs(target)?.flags();
    let mut flags = MsFlags::MS_REMOUNT | MsFlags::MS_BIND | MsFlags::MS_RDONLY;
    for (st, ms) in [
        (FsFlags::ST_NOSUID, MsFlags::MS_NOSUID),
        (FsFlags::ST_NODEV, MsFlags::MS_NODEV),
        (FsFlags::ST_NOEXEC, MsFlags::MS_NOEXEC),
        (FsFlags::ST_NOATIME, MsFlags::MS_NOATIME),
        (FsFlags::ST_NODIRATIME, MsFlags::MS_NODIRATIME),
        (FsFlags::ST_RELATIME, MsFlags::MS_RELATIME),
    ] {
        if current.contains(st) {
            flags |= ms;
        }
    }
    Ok(flags)
}

fn cstring(s: &str) -> io::Result<CString> {
    CString::new(s).map_err(|_| io::Error::from_raw_os_error(libc::EINVAL))
}

/// `execvp`-style lookup, using PATH from `env` rather than our own.
fn exec_with_search(command: &[String], env: &BTreeMap<String, String>) -> ExecFailure {
    let name = command[0].clone();
    let fail = |error| ExecFailure {
        command: name.clone(),
        error,
    };
    let argv: Vec<CString> = match command.iter().map(|a| cstring(a)).collect() {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let envp: Vec<CString> = match env
        .iter()
        .map(|(k, v)| cstring(&format!("{k}={v}")))
        .collect()
    {
        Ok(v) => v,
        Err(e) => return fail(e),
    };

    if name.contains('/') {
        let Err(errno) = unistd::execve(&argv[0], &argv, &envp);
        return fail(errno.into());
    }

    let search = env.get("PATH").map(String::as_str).unwrap_or(DEFAULT_PATH);
    let mut last = Errno::ENOENT;
    let mut saw_eacces = false;
    for dir in search.split(':') {
        let dir = if dir.is_empty() { "." } else { dir };
        let candidate = match cstring(&format!("{dir}/{name}")) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        let Err(errno) = unistd::execve(&candidate, &argv, &envp);
        match errno {
            Errno::EACCES => saw_eacces = true,
            Errno::ENOENT | Errno::ENOTDIR | Errno::ESTALE | Errno::ENODEV | Errno::ETIMEDOUT => {}
            other => {
                last = other;
                break;
            }
        }
    }
    fail(if saw_eacces && last == Errno::ENOENT {
        Errno::EACCES.into()
    } else {
        last.into()
    })
}

impl SyscallBackend for LinuxBackend {
    type Child = LinuxChild;

    fn create_isolated_child(
        &mut self,
        namespaces: NamespaceSet,
    ) -> io::Result<Spawned<LinuxChild>> {
        let (report_r, report_w) = unistd::pipe2(nix::fcntl::OFlag::O_CLOEXEC)?;
        let (go_r, go_w) = unistd::pipe2(nix::fcntl::OFlag::O_CLOEXEC)?;

        // SAFETY: the child only makes syscalls, writes to pipes and
        // formats short messages before exec or _exit.
        match unsafe { fork() }? {
            ForkResult::Child => {
                drop(report_r);
                drop(go_w);
                let mut report = File::from(report_w);
                let flags = CloneFlags::from_bits_retain(namespaces.clone_flags());
                if let Err(errno) = unshare(flags) {
                    let _ = writeln!(report, "UNSHARE {}", errno as i32);
                    child_exit(SETUP_FAILURE_STATUS);
                }
                if report.write_all(b"READY\n").is_err() {
                    child_exit(SETUP_FAILURE_STATUS);
                }
                self.channel = Some(ChildChannel {
                    report,
                    go: File::from(go_r),
                });
                Ok(Spawned::Child)
            }
            ForkResult::Parent { child } => {
                drop(report_w);
                drop(go_r);
                let mut report = File::from(report_r);
                let line = read_line(&mut report);
                let first = match line {
                    Ok(Some(line)) => line,
                    Ok(None) => {
                        let _ = reap(child);
                        return Err(io::Error::other(
                            "child exited before entering its namespaces",
                        ));
                    }
                    Err(e) => {
                        let _ = reap(child);
                        return Err(e);
                    }
                };
                if let Some(errno) = first.strip_prefix("UNSHARE ") {
                    let _ = reap(child);
                    let errno = errno.trim().parse().unwrap_or(libc::EPERM);
                    return Err(io::Error::from_raw_os_error(errno));
                }
                if first != "READY" {
                    let _ = reap(child);
                    return Err(io::Error::other(format!(
                        "unexpected message from child: {first:?}"
                    )));
                }
                Ok(Spawned::Parent(LinuxChild {
                    pid: child,
                    report,
                    go: Some(File::from(go_w)),
                    saved_signals: ignore_interactive_signals(),
                }))
            }
        }
    }

    fn write_id_maps(
        &mut self,
        child: &LinuxChild,
        policy: IdMapPolicy,
    ) -> Result<(), HandshakeError> {
        let pid = child.pid();
        let uid = unistd::geteuid().as_raw();
        let gid = unistd::getegid().as_raw();
        // Kernels before 3.19 have no setgroups file.
        if MapFile::Setgroups.path(pid).exists() {
            write_map_file(pid, MapFile::Setgroups, "deny")?;
        }
        write_map_file(pid, MapFile::GidMap, &policy.map_line(gid))?;
        write_map_file(pid, MapFile::UidMap, &policy.map_line(uid))
    }

    fn signal_maps_ready(&mut self, child: &mut LinuxChild) -> Result<(), HandshakeError> {
        let mut go = child
            .go
            .take()
            .ok_or(HandshakeError::ChildDiedDuringHandshake)?;
        go.write_all(b"1")
            .map_err(|_| HandshakeError::ChildDiedDuringHandshake)
    }

    fn await_maps_ready(&mut self) -> io::Result<()> {
        let channel = self
            .channel
            .as_mut()
            .ok_or_else(|| io::Error::other("not running as the sandboxed child"))?;
        let mut token = [0u8; 1];
        loop {
            match channel.go.read(&mut token) {
                Ok(1) => return Ok(()),
                Ok(_) => {
                    return Err(io::Error::other(
                        "parent closed the handshake channel without writing the maps",
                    ))
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }

    fn make_mounts_private(&mut self) -> io::Result<()> {
        mount(
            None::<&str>,
            "/",
            None::<&str>,
            MsFlags::MS_REC | MsFlags::MS_PRIVATE,
            None::<&str>,
        )
        .map_err(Into::into)
    }

    fn bind_mount(&mut self, source: &Path, target: &Path, recursive: bool) -> io::Result<()> {
        let mut flags = MsFlags::MS_BIND;
        if recursive {
            flags |= MsFlags::MS_REC;
        }
        mount(Some(source), target, None::<&str>, flags, None::<&str>).map_err(Into::into)
    }

    fn remount_read_only(&mut self, target: &Path) -> io::Result<()> {
        let flags = read_only_remount_flags(target)?;
        mount(None::<&str>, target, None::<&str>, flags, None::<&str>).map_err(Into::into)
    }

    fn check_directory(&mut self, path: &Path) -> io::Result<()> {
        let meta = std::fs::metadata(path)?;
        if meta.is_dir() {
            Ok(())
        } else {
            Err(io::Error::from_raw_os_error(libc::ENOTDIR))
        }
    }

    fn pivot_root(&mut self, new_root: &Path, put_old: &Path) -> io::Result<()> {
        unistd::pivot_root(new_root, put_old).map_err(Into::into)
    }

    fn chdir(&mut self, path: &Path) -> io::Result<()> {
        unistd::chdir(path).map_err(Into::into)
    }

    fn detach_unmount(&mut self, path: &Path) -> io::Result<()> {
        umount2(path, MntFlags::MNT_DETACH).map_err(Into::into)
    }

    fn exec(
        &mut self,
        command: &[String],
        env: &BTreeMap<String, String>,
    ) -> Result<(), ExecFailure> {
        if command.is_empty() {
            return Err(ExecFailure {
                command: String::new(),
                error: io::Error::from_raw_os_error(libc::ENOENT),
            });
        }
        Err(exec_with_search(command, env))
    }

    fn finish_child(&mut self, end: &SandboxEnd) -> ! {
        match end {
            SandboxEnd::SetupFailed(SetupFailure { stage, detail }) => {
                if let Some(channel) = self.channel.as_mut() {
                    let detail = detail.replace('\n', " ");
                    let _ = writeln!(channel.report, "FAIL {}\t{detail}", stage.name());
                }
                child_exit(SETUP_FAILURE_STATUS)
            }
            SandboxEnd::ExecFailed(failure) => {
                let _ = writeln!(io::stderr(), "nsroot: {failure}");
                child_exit(failure.status())
            }
            SandboxEnd::Replaced => child_exit(0),
        }
    }

    fn wait(&mut self, mut child: LinuxChild) -> io::Result<ChildStatus> {
        drop(child.go.take());
        let status = reap(child.pid);
        for (sig, old) in child.saved_signals.drain(..) {
            // SAFETY: restoring the disposition we replaced.
            let _ = unsafe { sigaction(sig, &old) };
        }
        let termination = match status? {
            WaitStatus::Exited(_, code) => Termination::Exited(code as u8),
            WaitStatus::Signaled(_, sig, _) => Termination::Signaled(sig as i32),
            other => {
                return Err(io::Error::other(format!(
                    "unexpected wait status {other:?}"
                )))
            }
        };

        let mut setup_failure = None;
        while let Ok(Some(line)) = read_line(&mut child.report) {
            let Some(rest) = line.strip_prefix("FAIL ") else {
                continue;
            };
            let (stage, detail) = rest.split_once('\t').unwrap_or((rest, ""));
            setup_failure = Some(SetupFailure {
                stage: OpKind::from_name(stage).unwrap_or(OpKind::EnterNamespaces),
                detail: detail.to_string(),
            });
        }
        Ok(ChildStatus {
            termination,
            setup_failure,
        })
    }
}
