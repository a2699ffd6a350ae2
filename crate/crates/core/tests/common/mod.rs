//! Helpers shared by the integration suites. `TestEnv` builds a throwaway
//! rootfs from host binaries and launches the tool unprivileged.

#![allow(dead_code)]

pub mod corpus;
pub mod strategies;

use std::collections::BTreeSet;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// uid/gid the tool runs as when the test runner is root.
pub const UNPRIVILEGED_ID: u32 = 65534;

/// Host tools copied into the rootfs under `/bin`.
const TOOLS: [&str; 4] = ["sh", "ls", "true", "false"];

/// Directories every test rootfs has at its top level (plus `probe`).
pub const ROOTFS_DIRS: [&str; 6] = ["bin", "data1", "data2", "lib", "lib64", "mnt"];

pub struct TestEnv {
    // Keeps everything alive; removed on drop.
    pub dir: TempDir,
    /// Copy of the tool outside the (possibly 0700) build tree.
    pub nsroot: PathBuf,
    pub rootfs: PathBuf,
    /// Exists on the host, not inside the rootfs.
    pub host_only: PathBuf,
    /// World-writable host directories for bind tests.
    pub share_rw: PathBuf,
    pub share_ro: PathBuf,
}

fn world_readable(path: &Path, mode: u32) {
    fs::set_permissions(path, fs::Permissions::from_mode(mode)).unwrap();
}

fn find_tool(name: &str) -> PathBuf {
    for dir in ["/bin", "/usr/bin"] {
        let p = Path::new(dir).join(name);
        if p.exists() {
            return fs::canonicalize(p).unwrap();
        }
    }
    panic!("host has no {name}");
}

/// Shared libraries `binary` needs, as absolute paths (ldd's view).
fn shared_libs(binary: &Path) -> Vec<PathBuf> {
    let out = Command::new("ldd").arg(binary).output().expect("ldd");
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            let path = match line.split_once("=>") {
                Some((_, rhs)) => rhs.trim().split(' ').next()?,
                None => line.split(' ').next()?,
            };
            path.starts_with('/').then(|| PathBuf::from(path))
        })
        .collect()
}

fn stage(rootfs: &Path, host: &Path, inside: &Path) {
    let dest = rootfs.join(inside.strip_prefix("/").unwrap());
    fs::create_dir_all(dest.parent().unwrap()).unwrap();
    fs::copy(host, &dest).unwrap();
    world_readable(&dest, 0o755);
    for lib in shared_libs(host) {
        let lib_dest = rootfs.join(lib.strip_prefix("/").unwrap());
        if !lib_dest.exists() {
            fs::create_dir_all(lib_dest.parent().unwrap()).unwrap();
            fs::copy(&lib, &lib_dest).unwrap();
            world_readable(&lib_dest, 0o755);
        }
    }
}

fn chmod_tree(path: &Path) {
    let meta = fs::symlink_metadata(path).unwrap();
    if meta.is_dir() {
        world_readable(path, 0o755);
        for entry in fs::read_dir(path).unwrap() {
            chmod_tree(&entry.unwrap().path());
        }
    }
}

impl TestEnv {
    pub fn new() -> TestEnv {
        let dir = tempfile::Builder::new()
            .prefix("nsroot-test")
            .tempdir()
            .unwrap();
        world_readable(dir.path(), 0o755);

        let nsroot = dir.path().join("nsroot");
        fs::copy(env!("CARGO_BIN_EXE_nsroot"), &nsroot).unwrap();
        world_readable(&nsroot, 0o755);

        let rootfs = dir.path().join("rootfs");
        for d in ROOTFS_DIRS {
            fs::create_dir_all(rootfs.join(d)).unwrap();
        }
        for tool in TOOLS {
            stage(&rootfs, &find_tool(tool), &Path::new("/bin").join(tool));
        }
        stage(
            &rootfs,
            Path::new(env!("CARGO_BIN_EXE_nsroot")),
            Path::new("/probe"),
        );
        chmod_tree(&rootfs);

        let host_only = dir.path().join("host-only");
        fs::create_dir(&host_only).unwrap();
        let share_rw = dir.path().join("share-rw");
        let share_ro = dir.path().join("share-ro");
        for d in [&share_rw, &share_ro] {
            fs::create_dir(d).unwrap();
            world_readable(d, 0o777);
        }
        fs::write(share_ro.join("hello"), "hello\n").unwrap();
        world_readable(&share_ro.join("hello"), 0o644);

        TestEnv {
            dir,
            nsroot,
            rootfs,
            host_only,
            share_rw,
            share_ro,
        }
    }

    /// Sorted top-level names of the rootfs.
    pub fn rootfs_listing(&self) -> Vec<String> {
        let names: BTreeSet<String> = fs::read_dir(&self.rootfs)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.into_iter().collect()
    }

    /// The tool, ready to run unprivileged.
    pub fn command(&self) -> Command {
        let mut cmd = Command::new(&self.nsroot);
        cmd.current_dir(self.dir.path());
        cmd.env("LC_ALL", "C");
        if is_root() {
            cmd.uid(UNPRIVILEGED_ID).gid(UNPRIVILEGED_ID);
        }
        cmd
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.command().args(args).output().unwrap()
    }

    pub fn rootfs_str(&self) -> &str {
        self.rootfs.to_str().unwrap()
    }

    /// `nsroot [extra...] ROOTFS /probe --verify --host-path HOST_ONLY [probe_args...]`
    pub fn probe(&self, extra: &[&str], probe_args: &[&str]) -> Output {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend([
            self.rootfs_str(),
            "/probe",
            "--verify",
            "--host-path",
            self.host_only.to_str().unwrap(),
        ]);
        args.extend(probe_args);
        self.run(&args)
    }

    /// Why privileged tests cannot run here, if they cannot.
    pub fn skip_reason(&self) -> Option<String> {
        if !cfg!(target_os = "linux") {
            return Some("not running on Linux".into());
        }
        let out = self.run(&[self.rootfs_str(), "/bin/true"]);
        if out.status.code() == Some(0) {
            return None;
        }
        let stderr = String::from_utf8_lossy(&out.stderr).trim().to_string();
        Some(if stderr.contains("user namespace") {
            format!("unprivileged user namespaces unavailable: {stderr}")
        } else {
            format!("sandbox smoke run failed ({:?}): {stderr}", out.status)
        })
    }
}

pub fn is_root() -> bool {
    nix::unistd::geteuid().is_root()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A System V shared-memory segment created on the host, removed on drop.
pub struct HostSegment {
    pub key: i32,
    id: i32,
}

impl HostSegment {
    pub fn create() -> HostSegment {
        let base = 0x6e73_0000 | (std::process::id() as i32 & 0xffff);
        for salt in 0..64 {
            let key = base ^ (salt << 16);
            // SAFETY: plain syscall with valid arguments.
            let id = unsafe { libc::shmget(key, 4096, libc::IPC_CREAT | libc::IPC_EXCL | 0o600) };
            if id >= 0 {
                return HostSegment { key, id };
            }
        }
        panic!("could not create a host shm segment");
    }
}

impl Drop for HostSegment {
    fn drop(&mut self) {
        // SAFETY: removing the segment we created.
        unsafe {
            libc::shmctl(self.id, libc::IPC_RMID, std::ptr::null_mut());
        }
    }
}

pub fn host_mountinfo() -> Vec<u8> {
    fs::read("/proc/self/mountinfo").unwrap()
}

/// Run `check` in a forked child and return its verdict. The child never
/// returns into the test harness.
pub fn in_child(check: impl FnOnce() -> Result<(), String>) -> Result<(), String> {
    use nix::unistd::{fork, ForkResult};
    use std::io::{Read, Write};

    let (read_end, write_end) = nix::unistd::pipe2(nix::fcntl::OFlag::O_CLOEXEC).unwrap();
    // SAFETY: the child only runs `check` and then _exits.
    match unsafe { fork() }.unwrap() {
        ForkResult::Child => {
            drop(read_end);
            let verdict = check();
            let mut out = fs::File::from(write_end);
            let code = match verdict {
                Ok(()) => 0,
                Err(msg) => {
                    let _ = out.write_all(msg.as_bytes());
                    1
                }
            };
            drop(out);
            // SAFETY: terminating the forked child without running atexit handlers.
            unsafe { libc::_exit(code) }
        }
        ForkResult::Parent { child } => {
            drop(write_end);
            let mut msg = String::new();
            fs::File::from(read_end).read_to_string(&mut msg).unwrap();
            let status = nix::sys::wait::waitpid(child, None).unwrap();
            match status {
                nix::sys::wait::WaitStatus::Exited(_, 0) => Ok(()),
                other => Err(format!("{other:?}: {msg}")),
            }
        }
    }
}

/// Enter fresh user and mount namespaces with the caller mapped to root.
pub fn become_namespace_root() -> Result<(), String> {
    use nix::sched::{unshare, CloneFlags};
    let uid = nix::unistd::geteuid().as_raw();
    let gid = nix::unistd::getegid().as_raw();
    unshare(CloneFlags::CLONE_NEWUSER | CloneFlags::CLONE_NEWNS)
        .map_err(|e| format!("unshare: {e}"))?;
    fs::write("/proc/self/setgroups", "deny").map_err(|e| format!("setgroups: {e}"))?;
    fs::write("/proc/self/gid_map", format!("0 {gid} 1")).map_err(|e| format!("gid_map: {e}"))?;
    fs::write("/proc/self/uid_map", format!("0 {uid} 1")).map_err(|e| format!("uid_map: {e}"))?;
    Ok(())
}

/// Drop to the unprivileged id when running as root, keeping /proc files
/// of this process owned by that id.
pub fn drop_to_unprivileged() -> Result<(), String> {
    use nix::unistd::{setgroups, setresgid, setresuid, Gid, Uid};
    if !is_root() {
        return Ok(());
    }
    let gid = Gid::from_raw(UNPRIVILEGED_ID);
    let uid = Uid::from_raw(UNPRIVILEGED_ID);
    setgroups(&[]).map_err(|e| format!("setgroups: {e}"))?;
    setresgid(gid, gid, gid).map_err(|e| format!("setresgid: {e}"))?;
    setresuid(uid, uid, uid).map_err(|e| format!("setresuid: {e}"))?;
    // SAFETY: plain prctl.
    if unsafe { libc::prctl(libc::PR_SET_DUMPABLE, 1, 0, 0, 0) } != 0 {
        return Err("prctl(PR_SET_DUMPABLE)".into());
    }
    Ok(())
}
