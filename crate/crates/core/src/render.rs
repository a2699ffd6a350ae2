//! Dry-run text form of an [`OperationScript`].
//!
//! One line per op: `N. TAG key=value ...`, numbered from 1. Values made of
//! plain path characters are written bare; anything else is double-quoted
//! with backslash escapes. `EXEC` repeats `argv=` once per argument and
//! `env=` once per variable (`env=NAME=VALUE`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::plan::{Op, OpKind, OperationScript};
use crate::spec::NamespaceSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct PlanParseError {
    pub line: usize,
    pub message: String,
}

fn is_bare(c: char) -> bool {
    c.is_ascii_alphanumeric() || "/._-+,:@%^=~".contains(c)
}

fn quote(value: &str, out: &mut String) {
    if !value.is_empty() && value.chars().all(is_bare) {
        out.push_str(value);
        return;
    }
    out.push('"');
    for c in value.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{{{:x}}}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn field(out: &mut String, key: &str, value: &str) {
    out.push(' ');
    out.push_str(key);
    out.push('=');
    quote(value, out);
}

fn path_field(out: &mut String, key: &str, value: &std::path::Path) {
    field(out, key, &value.to_string_lossy());
}

fn render_op(op: &Op, out: &mut String) {
    out.push_str(op.kind().tag());
    match op {
        Op::EnterNamespaces(ns) => {
            field(out, "user", &ns.user().to_string());
            field(out, "mount", &ns.mount().to_string());
            field(out, "net", &ns.net().to_string());
            field(out, "ipc", &ns.ipc().to_string());
        }
        Op::AwaitIdMapHandshake | Op::MakeMountTreePrivate | Op::ChdirRoot => {}
        Op::SelfBindNewRoot { new_root } => path_field(out, "new_root", new_root),
        Op::CheckOldRootDir { path } => path_field(out, "path", path),
        Op::PivotRoot {
            new_root,
            old_root_dir,
        } => {
            path_field(out, "new_root", new_root);
            path_field(out, "old_root_dir", old_root_dir);
        }
        Op::ApplyBind {
            source,
            target,
            read_only,
        } => {
            path_field(out, "source", source);
            path_field(out, "target", target);
            field(out, "read_only", &read_only.to_string());
        }
        Op::DetachOldRoot { old_root_dir } => path_field(out, "old_root_dir", old_root_dir),
        Op::Exec { command, env } => {
            for arg in command {
                field(out, "argv", arg);
            }
            for (name, value) in env {
                field(out, "env", &format!("{name}={value}"));
            }
        }
    }
}

/// Render a script, one numbered line per op, each terminated by `\n`.
pub fn render_plan(script: &OperationScript) -> String {
    let mut out = String::new();
    for (i, op) in script.ops().iter().enumerate() {
        let _ = write!(out, "{}. ", i + 1);
        render_op(op, &mut out);
        out.push('\n');
    }
    out
}

/// Split ` key=value key="quoted value"` into pairs.
fn tokenize(mut rest: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    while !rest.is_empty() {
        rest = rest
            .strip_prefix(' ')
            .ok_or_else(|| format!("expected a space before {rest:?}"))?;
        let eq = rest
            .find('=')
            .ok_or_else(|| format!("missing '=' in {rest:?}"))?;
        let key = &rest[..eq];
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            return Err(format!("bad key {key:?}"));
        }
        rest = &rest[eq + 1..];
        let value = if let Some(quoted) = rest.strip_prefix('"') {
            let mut value = String::new();
            let mut chars = quoted.char_indices();
            let end = loop {
                let (i, c) = chars.next().ok_or("unterminated quoted value")?;
                match c {
                    '"' => break i + 1,
                    '\\' => {
                        let (_, esc) = chars.next().ok_or("dangling backslash")?;
                        match esc {
                            '"' => value.push('"'),
                            '\\' => value.push('\\'),
                            'n' => value.push('\n'),
                            't' => value.push('\t'),
                            'r' => value.push('\r'),
                            'u' => {
                                let tail = &quoted[i + 2..];
                                let body = tail
                                    .strip_prefix('{')
                                    .and_then(|t| t.find('}').map(|e| &t[..e]))
                                    .ok_or("bad \\u escape")?;
                                let code = u32::from_str_radix(body, 16)
                                    .ok()
                                    .and_then(char::from_u32)
                                    .ok_or("bad \\u escape")?;
                                value.push(code);
                                // Skip "{hex}".
                                for _ in 0..body.len() + 2 {
                                    chars.next();
                                }
                            }
                            other => return Err(format!("unknown escape \\{other}")),
                        }
                    }
                    c => value.push(c),
                }
            };
            rest = &quoted[end..];
            value
        } else {
            let end = rest.find(' ').unwrap_or(rest.len());
            let value = &rest[..end];
            if value.is_empty() || !value.chars().all(is_bare) {
                return Err(format!("bad bare value {value:?}"));
            }
            rest = &rest[end..];
            value.to_string()
        };
        pairs.push((key.to_string(), value));
    }
    Ok(pairs)
}

struct Fields {
    pairs: std::vec::IntoIter<(String, String)>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Result<String, String> {
        match self.pairs.next() {
            Some((k, v)) if k == key => Ok(v),
            Some((k, _)) => Err(format!("expected key {key:?}, found {k:?}")),
            None => Err(format!("missing key {key:?}")),
        }
    }

    fn flag(&mut self, key: &str) -> Result<bool, String> {
        match self.take(key)?.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("{key}: expected true/false, found {other:?}")),
        }
    }

    fn path(&mut self, key: &str) -> Result<PathBuf, String> {
        self.take(key).map(PathBuf::from)
    }

    fn finish(mut self) -> Result<(), String> {
        match self.pairs.next() {
            None => Ok(()),
            Some((k, _)) => Err(format!("unexpected key {k:?}")),
        }
    }
}

fn parse_op(kind: OpKind, pairs: Vec<(String, String)>) -> Result<Op, String> {
    if kind == OpKind::Exec {
        let mut command = Vec::new();
        let mut env = BTreeMap::new();
        for (key, value) in pairs {
            match key.as_str() {
                "argv" if env.is_empty() => command.push(value),
                "env" => {
                    let (name, val) = value
                        .split_once('=')
                        .ok_or_else(|| format!("env entry without '=': {value:?}"))?;
                    env.insert(name.to_string(), val.to_string());
                }
                other => return Err(format!("unexpected key {other:?}")),
            }
        }
        return Ok(Op::Exec { command, env });
    }

    let mut f = Fields {
        pairs: pairs.into_iter(),
    };
    let op = match kind {
        OpKind::EnterNamespaces => {
            let (user, mount) = (f.flag("user")?, f.flag("mount")?);
            let (net, ipc) = (f.flag("net")?, f.flag("ipc")?);
            Op::EnterNamespaces(
                NamespaceSet::from_flags(user, mount, net, ipc)
                    .ok_or("user and mount namespaces cannot be disabled")?,
            )
        }
        OpKind::AwaitIdMapHandshake => Op::AwaitIdMapHandshake,
        OpKind::MakeMountTreePrivate => Op::MakeMountTreePrivate,
        OpKind::ChdirRoot => Op::ChdirRoot,
        OpKind::SelfBindNewRoot => Op::SelfBindNewRoot {
            new_root: f.path("new_root")?,
        },
        OpKind::CheckOldRootDir => Op::CheckOldRootDir {
            path: f.path("path")?,
        },
        OpKind::PivotRoot => Op::PivotRoot {
            new_root: f.path("new_root")?,
            old_root_dir: f.path("old_root_dir")?,
        },
        OpKind::ApplyBind => Op::ApplyBind {
            source: f.path("source")?,
            target: f.path("target")?,
            read_only: f.flag("read_only")?,
        },
        OpKind::DetachOldRoot => Op::DetachOldRoot {
            old_root_dir: f.path("old_root_dir")?,
        },
        OpKind::Exec => unreachable!(),
    };
    f.finish()?;
    Ok(op)
}

/// Parse text produced by [`render_plan`] back into a script.
pub fn parse_plan(text: &str) -> Result<OperationScript, PlanParseError> {
    let mut ops = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let number = i + 1;
        let err = |message: String| PlanParseError {
            line: number,
            message,
        };
        let body = line
            .strip_prefix(&format!("{number}. "))
            .ok_or_else(|| err(format!("expected line to start with \"{number}. \"")))?;
        let (tag, rest) = body.split_at(body.find(' ').unwrap_or(body.len()));
        let kind = OpKind::from_tag(tag).ok_or_else(|| err(format!("unknown op {tag:?}")))?;
        let pairs = tokenize(rest).map_err(&err)?;
        ops.push(parse_op(kind, pairs).map_err(err)?);
    }
    Ok(OperationScript::from_ops(ops))
}
