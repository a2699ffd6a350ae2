//! In-sandbox isolation probes (`nsroot --verify`).
//!
//! The report is plain text: one `key=value` line per probe, in a fixed
//! order, followed by one `# evidence: key: ...` line per probe holding the
//! raw observation behind the value. A probe whose kernel interface is
//! missing reports the value `unavailable`.

use std::fmt;
use std::io;
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::spec::DEFAULT_OLD_ROOT_DIR;

const UNAVAILABLE: &str = "unavailable";
const EVIDENCE_PREFIX: &str = "# evidence: ";

/// What the probes look for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeConfig {
    /// A path that exists on the host but should not be reachable inside.
    pub host_only_path: Option<PathBuf>,
    /// Key of a System V shared-memory segment created on the host.
    pub ipc_key: Option<i32>,
    /// Old-root directory relative to `/`.
    pub old_root_dir: PathBuf,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            host_only_path: None,
            ipc_key: None,
            old_root_dir: PathBuf::from(DEFAULT_OLD_ROOT_DIR),
        }
    }
}

/// One probe result with the raw observation it was derived from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe<T> {
    /// `None` when the probe could not run.
    pub value: Option<T>,
    pub evidence: String,
}

impl<T> Probe<T> {
    fn measured(value: T, evidence: impl Into<String>) -> Self {
        Probe {
            value: Some(value),
            evidence: evidence.into(),
        }
    }

    fn unavailable(evidence: impl Into<String>) -> Self {
        Probe {
            value: None,
            evidence: evidence.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeReport {
    pub inside_uid: Probe<u32>,
    pub old_root_mounted: Probe<bool>,
    pub host_path_visible: Probe<bool>,
    pub interfaces: Probe<Vec<String>>,
    pub ipc_segment_visible: Probe<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportParseError {
    #[error("line {0:?} is not key=value")]
    Malformed(String),
    #[error("unexpected key {0:?}")]
    UnknownKey(String),
    #[error("{key}: bad value {value:?}")]
    BadValue { key: String, value: String },
    #[error("missing {0}")]
    Missing(&'static str),
    #[error("{0} appears more than once")]
    Duplicate(String),
}

const KEYS: [&str; 5] = [
    "inside_uid",
    "old_root_mounted",
    "host_path_visible",
    "interfaces",
    "ipc_segment_visible",
];

fn one_line(s: &str) -> String {
    let s = s.replace(['\n', '\r'], " ");
    if s.is_empty() {
        "(none)".to_string()
    } else {
        s
    }
}

impl ProbeReport {
    fn values(&self) -> [String; 5] {
        fn show<T>(p: &Probe<T>, f: impl Fn(&T) -> String) -> String {
            p.value
                .as_ref()
                .map(f)
                .unwrap_or_else(|| UNAVAILABLE.into())
        }
        [
            show(&self.inside_uid, u32::to_string),
            show(&self.old_root_mounted, bool::to_string),
            show(&self.host_path_visible, bool::to_string),
            show(&self.interfaces, |v| v.join(",")),
            show(&self.ipc_segment_visible, bool::to_string),
        ]
    }

    fn evidence(&self) -> [&str; 5] {
        [
            &self.inside_uid.evidence,
            &self.old_root_mounted.evidence,
            &self.host_path_visible.evidence,
            &self.interfaces.evidence,
            &self.ipc_segment_visible.evidence,
        ]
    }

    /// Parse the text form produced by `Display`.
    pub fn parse(text: &str) -> Result<ProbeReport, ReportParseError> {
        let mut values: [Option<String>; 5] = Default::default();
        let mut evidence: [Option<String>; 5] = Default::default();
        for line in text.lines() {
            let (slot, rest) = match line.strip_prefix(EVIDENCE_PREFIX) {
                Some(rest) => {
                    let (key, ev) = rest
                        .split_once(": ")
                        .ok_or_else(|| ReportParseError::Malformed(line.into()))?;
                    (&mut evidence, (key, ev))
                }
                None => {
                    let (key, value) = line
                        .split_once('=')
                        .ok_or_else(|| ReportParseError::Malformed(line.into()))?;
                    (&mut values, (key, value))
                }
            };
            let (key, value) = rest;
            let idx = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| ReportParseError::UnknownKey(key.into()))?;
            if slot[idx].replace(value.to_string()).is_some() {
                return Err(ReportParseError::Duplicate(key.into()));
            }
        }

        fn take(
            values: &mut [Option<String>; 5],
            evidence: &mut [Option<String>; 5],
            i: usize,
        ) -> Result<(Option<String>, String), ReportParseError> {
            let value = values[i].take().ok_or(ReportParseError::Missing(KEYS[i]))?;
            let ev = evidence[i]
                .take()
                .ok_or(ReportParseError::Missing(KEYS[i]))?;
            Ok(((value != UNAVAILABLE).then_some(value), ev))
        }
        fn typed<T>(
            i: usize,
            (value, evidence): (Option<String>, String),
            parse: impl Fn(&str) -> Option<T>,
        ) -> Result<Probe<T>, ReportParseError> {
            let value = match value {
                None => None,
                Some(v) => Some(parse(&v).ok_or_else(|| ReportParseError::BadValue {
                    key: KEYS[i].into(),
                    value: v.clone(),
                })?),
            };
            Ok(Probe { value, evidence })
        }
        let flag = |s: &str| s.parse::<bool>().ok();
        let list = |s: &str| {
            Some(if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(String::from).collect()
            })
        };

        let (v, e) = (&mut values, &mut evidence);
        Ok(ProbeReport {
            inside_uid: typed(0, take(v, e, 0)?, |s| s.parse().ok())?,
            old_root_mounted: typed(1, take(v, e, 1)?, flag)?,
            host_path_visible: typed(2, take(v, e, 2)?, flag)?,
            interfaces: typed(3, take(v, e, 3)?, list)?,
            ipc_segment_visible: typed(4, take(v, e, 4)?, flag)?,
        })
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, value) in KEYS.iter().zip(self.values()) {
            writeln!(f, "{key}={value}")?;
        }
        for (key, evidence) in KEYS.iter().zip(self.evidence()) {
            writeln!(f, "{EVIDENCE_PREFIX}{key}: {}", one_line(evidence))?;
        }
        Ok(())
    }
}

fn probe_uid() -> Probe<u32> {
    let uid = nix::unistd::geteuid().as_raw();
    Probe::measured(uid, format!("geteuid() = {uid}"))
}

/// Undo the octal escaping mountinfo applies to spaces and friends.
fn unescape_mountinfo(field: &str) -> String {
    let bytes = field.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\'
            && i + 3 < bytes.len()
            && bytes[i + 1..i + 4].iter().all(u8::is_ascii_digit)
        {
            if let Ok(b) = u8::from_str_radix(&field[i + 1..i + 4], 8) {
                out.push(b);
                i += 4;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Mount points listed in mountinfo text.
pub fn mount_points(mountinfo: &str) -> Vec<String> {
    mountinfo
        .lines()
        .filter_map(|line| line.split(' ').nth(4).map(unescape_mountinfo))
        .collect()
}

fn statx_mount_root(path: &Path) -> io::Result<Option<bool>> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;

    let c_path = CString::new(path.as_os_str().as_bytes())
        .map_err(|_| io::Error::from_raw_os_error(libc::EINVAL))?;
    let mut buf = std::mem::MaybeUninit::<libc::statx>::zeroed();
    // SAFETY: valid NUL-terminated path and a properly sized output buffer.
    let rc = unsafe {
        libc::statx(
            libc::AT_FDCWD,
            c_path.as_ptr(),
            libc::AT_SYMLINK_NOFOLLOW,
            libc::STATX_BASIC_STATS,
            buf.as_mut_ptr(),
        )
    };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: statx returned 0, so the buffer is initialized.
    let stx = unsafe { buf.assume_init() };
    let attr = libc::STATX_ATTR_MOUNT_ROOT as u64;
    if stx.stx_attributes_mask & attr == 0 {
        return Ok(None);
    }
    Ok(Some(stx.stx_attributes & attr != 0))
}

fn probe_old_root(old_root_dir: &Path) -> Probe<bool> {
    let path = Path::new("/").join(old_root_dir);
    let shown = path.display();
    match statx_mount_root(&path) {
        Ok(Some(is_root)) => {
            return Probe::measured(
                is_root,
                format!("statx({shown}) STATX_ATTR_MOUNT_ROOT = {is_root}"),
            )
        }
        Err(e) if e.raw_os_error() == Some(libc::ENOENT) => {
            return Probe::measured(false, format!("statx({shown}): {e}"))
        }
        Ok(None) | Err(_) => {}
    }
    match std::fs::read_to_string("/proc/self/mountinfo") {
        Ok(info) => {
            let points = mount_points(&info);
            let target = path.to_string_lossy();
            let hit = points.iter().any(|p| *p == target);
            Probe::measured(
                hit,
                format!(
                    "/proc/self/mountinfo: {} mounts, {} at {shown}",
                    points.len(),
                    if hit { "one" } else { "none" }
                ),
            )
        }
        Err(e) => Probe::unavailable(format!(
            "no STATX_ATTR_MOUNT_ROOT and /proc/self/mountinfo unreadable: {e}"
        )),
    }
}

fn probe_host_path(path: Option<&Path>) -> Probe<bool> {
    let Some(path) = path else {
        return Probe::unavailable("no host path given");
    };
    match std::fs::symlink_metadata(path) {
        Ok(meta) => Probe::measured(
            true,
            format!(
                "lstat({}) succeeded, mode {:o}",
                path.display(),
                meta.mode()
            ),
        ),
        Err(e) => Probe::measured(false, format!("lstat({}): {e}", path.display())),
    }
}

fn probe_interfaces() -> Probe<Vec<String>> {
    match nix::net::if_::if_nameindex() {
        Ok(list) => {
            let mut pairs: Vec<(u32, String)> = list
                .iter()
                .map(|i| (i.index(), i.name().to_string_lossy().into_owned()))
                .collect();
            pairs.sort();
            let evidence = pairs
                .iter()
                .map(|(i, n)| format!("{i}:{n}"))
                .collect::<Vec<_>>()
                .join(" ");
            Probe::measured(
                pairs.into_iter().map(|(_, n)| n).collect(),
                format!("if_nameindex: {evidence}"),
            )
        }
        Err(e) => Probe::unavailable(format!("if_nameindex: {e}")),
    }
}

/// Names of the network interfaces visible to this process, sorted by index.
pub fn interface_names() -> io::Result<Vec<String>> {
    probe_interfaces()
        .value
        .ok_or_else(|| io::Error::other("if_nameindex failed"))
}

fn probe_ipc(key: Option<i32>) -> Probe<bool> {
    let Some(key) = key else {
        return Probe::unavailable("no ipc key given");
    };
    // SAFETY: shmget with size 0 and no flags only looks the key up.
    let id = unsafe { libc::shmget(key as libc::key_t, 0, 0) };
    if id >= 0 {
        return Probe::measured(true, format!("shmget(key={key:#x}) = shmid {id}"));
    }
    let err = io::Error::last_os_error();
    match err.raw_os_error() {
        Some(libc::ENOENT) => Probe::measured(false, format!("shmget(key={key:#x}): {err}")),
        Some(libc::EACCES) => Probe::measured(
            true,
            format!("shmget(key={key:#x}): {err} (segment exists)"),
        ),
        _ => Probe::unavailable(format!("shmget(key={key:#x}): {err}")),
    }
}

/// Run every probe once.
pub fn run_probes(config: &ProbeConfig) -> ProbeReport {
    ProbeReport {
        inside_uid: probe_uid(),
        old_root_mounted: probe_old_root(&config.old_root_dir),
        host_path_visible: probe_host_path(config.host_only_path.as_deref()),
        interfaces: probe_interfaces(),
        ipc_segment_visible: probe_ipc(config.ipc_key),
    }
}
