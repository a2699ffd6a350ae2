//! A fixed set of specs and the backend calls each must produce.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nsroot::exec::Call;
use nsroot::spec::BindRequest;
use nsroot::{IdMapPolicy, NamespaceSet, SpecCandidate};

fn cmd(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

fn spec(
    new_root: &str,
    old: &str,
    binds: &[(&str, &str, bool)],
    net: bool,
    ipc: bool,
    id_map: IdMapPolicy,
    command: &[&str],
) -> SpecCandidate {
    let mut env = BTreeMap::new();
    env.insert("PATH".to_string(), "/bin:/usr/bin".to_string());
    SpecCandidate {
        new_root: PathBuf::from(new_root),
        old_root_dir: PathBuf::from(old),
        binds: binds
            .iter()
            .map(|(s, t, ro)| BindRequest::new(*s, *t, *ro))
            .collect(),
        namespaces: NamespaceSet::new(net, ipc),
        id_map,
        command: cmd(command),
        env,
        dry_run: false,
    }
}

/// 24 specs varying binds, old-root names, namespace flags and id maps.
pub fn corpus() -> Vec<SpecCandidate> {
    use IdMapPolicy::{RootInside as R, SameIdInside as S};
    vec![
        spec("/srv/rootfs", "mnt", &[], false, false, R, &["/bin/sh"]),
        spec(
            "/srv/rootfs",
            "mnt",
            &[],
            true,
            false,
            R,
            &["/bin/sh", "-c", "ip a"],
        ),
        spec("/srv/rootfs", "mnt", &[], false, true, R, &["/bin/true"]),
        spec("/srv/rootfs", "mnt", &[], true, true, S, &["/bin/true"]),
        spec(
            "/srv/rootfs",
            "mnt",
            &[("/data", "/data", false)],
            false,
            false,
            R,
            &["ls"],
        ),
        spec(
            "/srv/rootfs",
            "mnt",
            &[("/data", "/data", true)],
            false,
            false,
            R,
            &["ls"],
        ),
        spec(
            "/srv/rootfs",
            "mnt",
            &[("/home/u", "/home", false), ("/etc", "/etc", true)],
            false,
            false,
            R,
            &["/bin/sh"],
        ),
        spec(
            "/srv/rootfs",
            "put_old",
            &[("/data", "/data", true)],
            true,
            false,
            R,
            &["cat"],
        ),
        spec(
            "/srv/rootfs",
            "a/b",
            &[("/x", "/y", false)],
            false,
            false,
            S,
            &["/bin/sh"],
        ),
        spec(
            "/srv/rootfs",
            "mnt",
            &[("/mnt/data", "/data", false)],
            false,
            false,
            R,
            &["sh"],
        ),
        spec(
            "/srv/rootfs",
            "mnt",
            &[("/", "/host", true)],
            false,
            true,
            R,
            &["sh"],
        ),
        spec(
            "/r",
            "mnt",
            &[
                ("/a", "/a", false),
                ("/b", "/b", false),
                ("/c", "/c", false),
            ],
            false,
            false,
            R,
            &["/bin/sh"],
        ),
        spec(
            "/r",
            "mnt",
            &[("/a", "/a", true), ("/b", "/b", true), ("/c", "/c", true)],
            false,
            false,
            R,
            &["/bin/sh"],
        ),
        spec(
            "/r",
            "mnt",
            &[("/a", "/z", true), ("/b", "/y", false), ("/c", "/x", true)],
            true,
            true,
            S,
            &["/bin/sh"],
        ),
        spec(
            "/r",
            ".old",
            &[("/usr", "/usr", true)],
            false,
            false,
            R,
            &["env"],
        ),
        spec(
            "/with space/root",
            "mnt",
            &[("/src dir", "/dst dir", false)],
            false,
            false,
            R,
            &["/bin/echo", "a b", "c\"d"],
        ),
        spec(
            "/r",
            "mnt",
            &[("/data", "/deep/nested/target", false)],
            false,
            false,
            R,
            &["sh"],
        ),
        spec(
            "/r",
            "mnt",
            &[
                ("/t", "/tmp", false),
                ("/v", "/var", true),
                ("/o", "/opt", false),
                ("/s", "/srv", true),
            ],
            false,
            false,
            R,
            &["/bin/sh"],
        ),
        spec(
            "/r",
            "old/root",
            &[("/data", "/data", false)],
            true,
            false,
            S,
            &["/bin/sh"],
        ),
        spec("/r", "mnt", &[], false, false, S, &["/bin/sh", "-i"]),
        spec(
            "/r",
            "mnt",
            &[("/d1", "/data1", false), ("/d2", "/data2", true)],
            false,
            false,
            R,
            &["/bin/sh", "-c", "pwd; ls /"],
        ),
        spec(
            "/r",
            "mnt",
            &[("/dev", "/dev", false)],
            true,
            true,
            R,
            &["/probe", "--verify"],
        ),
        spec(
            "/r",
            "mnt",
            &[("/proc", "/proc", true)],
            false,
            false,
            R,
            &["ps"],
        ),
        spec(
            "/very/long/path/to/a/root/filesystem",
            "m",
            &[("/q", "/q", true)],
            true,
            false,
            R,
            &["/bin/sh"],
        ),
    ]
}

/// The script-step calls a valid candidate must produce, derived from the
/// mount sequence rather than from a compiled script.
pub fn expected_script_calls(c: &SpecCandidate) -> Vec<Call> {
    let old = c.old_root_dir.clone();
    let old_in_sandbox = PathBuf::from("/").join(&old);
    let mut calls = vec![
        Call::CreateIsolatedChild {
            namespaces: c.namespaces,
        },
        Call::AwaitMapsReady,
        Call::MakeMountsPrivate,
        Call::BindMount {
            source: c.new_root.clone(),
            target: c.new_root.clone(),
            recursive: true,
        },
        Call::CheckDirectory {
            path: c.new_root.join(&old),
        },
        Call::PivotRoot {
            new_root: c.new_root.clone(),
            put_old: c.new_root.join(&old),
        },
        Call::Chdir {
            path: PathBuf::from("/"),
        },
    ];
    for b in &c.binds {
        let src = b.source.to_str().unwrap().trim_start_matches('/');
        let source = if src.is_empty() {
            old_in_sandbox.clone()
        } else {
            old_in_sandbox.join(src)
        };
        calls.push(Call::BindMount {
            source,
            target: b.target.clone(),
            recursive: true,
        });
        if b.read_only {
            calls.push(Call::RemountReadOnly {
                target: b.target.clone(),
            });
        }
    }
    calls.push(Call::DetachUnmount {
        path: old_in_sandbox,
    });
    calls.push(Call::Exec {
        command: c.command.clone(),
        env: c.env.clone(),
    });
    calls
}

pub fn expected_host_calls(c: &SpecCandidate) -> Vec<Call> {
    vec![
        Call::WriteIdMaps { policy: c.id_map },
        Call::SignalMapsReady,
        Call::Wait,
    ]
}
