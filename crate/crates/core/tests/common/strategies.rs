//! Random specs and string-level oracles for the plan compiler.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nsroot::spec::BindRequest;
use nsroot::{IdMapPolicy, NamespaceSet, Op, SpecCandidate};
use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

fn segment() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-z][a-z0-9_-]{0,7}",
        1 => "[a-zA-Z0-9 ._:=\"\\\\-]{1,6}".prop_filter("no dot names", |s| s != "." && s != ".."),
    ]
}

/// `/seg/seg...` with 1..=4 segments, already normal.
pub fn abs_path() -> impl Strategy<Value = String> {
    vec(segment(), 1..=4).prop_map(|segs| format!("/{}", segs.join("/")))
}

/// Like [`abs_path`] but with stray `.`, `..` and doubled slashes.
pub fn messy_abs_path() -> impl Strategy<Value = String> {
    vec(
        prop_oneof![4 => segment(), 1 => Just(".".to_string()), 1 => Just("..".to_string()),
                    1 => Just(String::new())],
        0..=5,
    )
    .prop_map(|segs| format!("/{}", segs.join("/")))
}

/// Lexical normalization on strings: `.` and empty parts vanish, `..` pops.
pub fn oracle_clean(path: &str) -> Option<String> {
    if !path.starts_with('/') {
        return None;
    }
    let mut parts: Vec<&str> = Vec::new();
    for part in path.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            p => parts.push(p),
        }
    }
    Some(format!("/{}", parts.join("/")))
}

/// True when one path equals or is a component-wise ancestor of the other.
pub fn oracle_overlap(a: &str, b: &str) -> bool {
    let a: Vec<&str> = a.split('/').filter(|s| !s.is_empty()).collect();
    let b: Vec<&str> = b.split('/').filter(|s| !s.is_empty()).collect();
    let n = a.len().min(b.len());
    a[..n] == b[..n]
}

fn env_map() -> impl Strategy<Value = BTreeMap<String, String>> {
    btree_map("[A-Z_][A-Z0-9_]{0,6}", any::<String>(), 0..4)
}

fn command() -> impl Strategy<Value = Vec<String>> {
    vec(
        prop_oneof![3 => "[a-z/.-]{1,10}", 1 => any::<String>()],
        1..4,
    )
}

fn policy() -> impl Strategy<Value = IdMapPolicy> {
    prop_oneof![
        Just(IdMapPolicy::RootInside),
        Just(IdMapPolicy::SameIdInside)
    ]
}

/// Candidates that always validate: normal absolute paths, unique bind
/// targets, none overlapping the old-root directory.
pub fn valid_candidate() -> impl Strategy<Value = SpecCandidate> {
    (
        abs_path(),
        prop_oneof![3 => Just("mnt".to_string()), 1 => "[a-z]{1,5}(/[a-z]{1,5})?"],
        vec((abs_path(), abs_path(), any::<bool>()), 0..6),
        any::<(bool, bool)>(),
        policy(),
        command(),
        env_map(),
    )
        .prop_map(
            |(new_root, old, raw_binds, (net, ipc), id_map, command, env)| {
                let old_root = format!("/{old}");
                let mut targets: Vec<String> = Vec::new();
                let mut binds = Vec::new();
                for (source, target, read_only) in raw_binds {
                    if oracle_overlap(&target, &old_root) || targets.contains(&target) {
                        continue;
                    }
                    targets.push(target.clone());
                    binds.push(BindRequest::new(source, target, read_only));
                }
                SpecCandidate {
                    new_root: PathBuf::from(new_root),
                    old_root_dir: PathBuf::from(old),
                    binds,
                    namespaces: NamespaceSet::new(net, ipc),
                    id_map,
                    command,
                    env,
                    dry_run: false,
                }
            },
        )
}

/// Candidates that may break any rule.
pub fn any_candidate() -> impl Strategy<Value = SpecCandidate> {
    let maybe_relative = || {
        prop_oneof![
            4 => messy_abs_path(),
            1 => "[a-z]{1,4}(/[a-z]{1,4})?",
            1 => Just(String::new()),
        ]
    };
    let old = prop_oneof![
        3 => Just("mnt".to_string()),
        1 => "[a-z]{1,3}",
        1 => Just(".".to_string()),
        1 => Just("./mnt".to_string()),
        1 => Just("../x".to_string()),
        1 => Just("/mnt".to_string()),
        1 => Just("a/../b".to_string()),
        1 => Just(String::new()),
    ];
    let target = prop_oneof![
        3 => maybe_relative(),
        2 => prop::sample::select(vec!["/", "/mnt", "/mnt/x", "/data", "/data/", "/data/./"])
            .prop_map(str::to_string),
    ];
    (
        maybe_relative(),
        old,
        vec((maybe_relative(), target, any::<bool>()), 0..5),
        prop_oneof![4 => command(), 1 => Just(Vec::new())],
    )
        .prop_map(|(new_root, old, binds, command)| SpecCandidate {
            new_root: PathBuf::from(new_root),
            old_root_dir: PathBuf::from(old),
            binds: binds
                .into_iter()
                .map(|(s, t, ro)| BindRequest::new(s, t, ro))
                .collect(),
            namespaces: NamespaceSet::default(),
            id_map: IdMapPolicy::default(),
            command,
            env: BTreeMap::new(),
            dry_run: false,
        })
}

/// Which rule the first violation breaks, as a short tag, or `None` when
/// the candidate is valid. Written against the rules, not the validator.
pub fn oracle_first_violation(c: &SpecCandidate) -> Option<(String, &'static str)> {
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    if oracle_clean(&s(&c.new_root)).is_none() {
        return Some(("new_root".into(), "absolute"));
    }
    let old = s(&c.old_root_dir);
    let old_parts: Vec<&str> = old
        .split('/')
        .filter(|p| !p.is_empty() && *p != ".")
        .collect();
    if old.starts_with('/') || old_parts.is_empty() || old_parts.contains(&"..") {
        return Some(("old_root_dir".into(), "old_root"));
    }
    if c.command.is_empty() {
        return Some(("command".into(), "command"));
    }
    let old_root = format!("/{}", old_parts.join("/"));
    let mut seen: Vec<String> = Vec::new();
    for (i, b) in c.binds.iter().enumerate() {
        if oracle_clean(&s(&b.source)).is_none() {
            return Some((format!("binds[{i}].source"), "absolute"));
        }
        let Some(target) = oracle_clean(&s(&b.target)) else {
            return Some((format!("binds[{i}].target"), "absolute"));
        };
        if oracle_overlap(&target, &old_root) {
            return Some((format!("binds[{i}].target"), "overlap"));
        }
        if seen.contains(&target) {
            return Some((format!("binds[{i}].target"), "duplicate"));
        }
        seen.push(target);
    }
    None
}

/// The script a valid candidate must compile to, built from the rules.
pub fn oracle_script(c: &SpecCandidate) -> Vec<Op> {
    let p = |s: String| PathBuf::from(s);
    let new_root = oracle_clean(c.new_root.to_str().unwrap()).unwrap();
    let old = c.old_root_dir.to_str().unwrap().to_string();
    let mut ops = vec![
        Op::EnterNamespaces(c.namespaces),
        Op::AwaitIdMapHandshake,
        Op::MakeMountTreePrivate,
        Op::SelfBindNewRoot {
            new_root: p(new_root.clone()),
        },
        Op::CheckOldRootDir {
            path: p(format!("{new_root}/{old}")),
        },
        Op::PivotRoot {
            new_root: p(new_root),
            old_root_dir: p(old.clone()),
        },
        Op::ChdirRoot,
    ];
    for b in &c.binds {
        ops.push(Op::ApplyBind {
            source: p(oracle_clean(b.source.to_str().unwrap()).unwrap()),
            target: p(oracle_clean(b.target.to_str().unwrap()).unwrap()),
            read_only: b.read_only,
        });
    }
    ops.push(Op::DetachOldRoot {
        old_root_dir: p(old),
    });
    ops.push(Op::Exec {
        command: c.command.clone(),
        env: c.env.clone(),
    });
    ops
}
