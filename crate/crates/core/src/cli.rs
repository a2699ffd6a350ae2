//! chroot-style command line front end.
//!
//! ```text
//! nsroot [OPTIONS] NEWROOT [COMMAND [ARG]...]
//! ```
//!
//! Option parsing stops at the first positional word, like `chroot`: every
//! word after NEWROOT belongs to the command.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::Parser;
use thiserror::Error;

use crate::exec::{self, ExecError, ExecutionOutcome, LinuxBackend};
use crate::plan::compile_plan;
use crate::probe::{run_probes, ProbeConfig};
use crate::render::render_plan;
use crate::spec::{
    normalize_absolute, validate_spec, BindRequest, IdMapPolicy, NamespaceSet, SpecCandidate,
    DEFAULT_OLD_ROOT_DIR,
};

/// Exit code for failures of the tool itself.
pub const TOOL_FAILURE: i32 = 125;

pub const USAGE: &str = "nsroot [OPTIONS] NEWROOT [COMMAND [ARG]...]";

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (requires Linux 3.10 or newer with user namespaces)"
);

const DEFAULT_SHELL: &str = "/bin/sh";

#[derive(Debug, Parser)]
#[command(
    name = "nsroot",
    version = VERSION,
    about = "Run COMMAND with its root directory set to NEWROOT, without privileges.",
    long_about = "Run COMMAND with its root directory set to NEWROOT, using user and mount \
                  namespaces so no privileges are needed. NEWROOT must contain the old-root \
                  directory (default: mnt). With no COMMAND, runs '\"$SHELL\" -i' \
                  (default: '/bin/sh -i').",
    override_usage = USAGE,
    after_help = "Bind specs are SRC[:DST][:ro]; DST defaults to SRC. Paths containing ':' \
                  cannot be bound.",
    disable_help_subcommand = true,
    args_override_self = true
)]
struct Args {
    /// Bind-mount host directory SRC at DST inside NEWROOT (repeatable)
    #[arg(short = 'b', long = "bind", value_name = "SRC[:DST][:ro]")]
    binds: Vec<String>,

    /// Run in a new network namespace (loopback only)
    #[arg(short = 'n', long)]
    net: bool,

    /// Run in a new IPC namespace
    #[arg(short = 'i', long)]
    ipc: bool,

    /// Keep the current uid/gid inside instead of mapping them to root
    #[arg(long)]
    map_current: bool,

    /// Old-root directory inside NEWROOT
    #[arg(long, value_name = "DIR", default_value = DEFAULT_OLD_ROOT_DIR)]
    old_root: PathBuf,

    /// Print the operation plan and exit
    #[arg(long)]
    dry_run: bool,

    #[arg(long, hide = true)]
    verify: bool,

    #[arg(long, hide = true, requires = "verify", value_name = "PATH")]
    host_path: Option<PathBuf>,

    #[arg(long, hide = true, requires = "verify", value_name = "KEY")]
    ipc_key: Option<i32>,

    /// NEWROOT followed by COMMAND and its arguments
    #[arg(
        value_name = "NEWROOT [COMMAND [ARG]...]",
        trailing_var_arg = true,
        required_unless_present = "verify"
    )]
    rest: Vec<String>,
}

/// A parsed sandbox invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliInvocation {
    pub program: String,
    pub binds: Vec<BindRequest>,
    pub net: bool,
    pub ipc: bool,
    pub id_map: IdMapPolicy,
    pub old_root_dir: PathBuf,
    pub dry_run: bool,
    pub new_root: PathBuf,
    /// Empty when no command was given.
    pub command: Vec<String>,
}

impl CliInvocation {
    /// The command to run: the given one, or `$SHELL -i`.
    pub fn effective_command(&self, shell: Option<&str>) -> Vec<String> {
        if !self.command.is_empty() {
            return self.command.clone();
        }
        let shell = shell.filter(|s| !s.is_empty()).unwrap_or(DEFAULT_SHELL);
        vec![shell.to_string(), "-i".to_string()]
    }

    /// Build a spec candidate. Relative NEWROOT and bind paths are taken
    /// relative to `cwd`, as `chroot` would.
    pub fn to_candidate(&self, cwd: &Path, env: &BTreeMap<String, String>) -> SpecCandidate {
        let anchor = |p: &Path| {
            let joined = if p.is_absolute() {
                p.to_path_buf()
            } else {
                cwd.join(p)
            };
            normalize_absolute(&joined).unwrap_or(joined)
        };
        let binds = self
            .binds
            .iter()
            .map(|b| BindRequest {
                source: anchor(&b.source),
                target: b.target.clone(),
                read_only: b.read_only,
            })
            .collect();
        SpecCandidate {
            new_root: anchor(&self.new_root),
            old_root_dir: self.old_root_dir.clone(),
            binds,
            namespaces: NamespaceSet::new(self.net, self.ipc),
            id_map: self.id_map,
            command: self.effective_command(env.get("SHELL").map(String::as_str)),
            env: env.clone(),
            dry_run: self.dry_run,
        }
    }
}

/// What the command line asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Run(CliInvocation),
    Verify(ProbeConfig),
    /// `--help` or `--version`: print this to standard output and exit 0.
    Info(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct UsageError {
    /// One line, without the program name.
    pub message: String,
}

impl UsageError {
    fn new(message: impl Into<String>) -> Self {
        UsageError {
            message: message.into(),
        }
    }
}

/// Parse `SRC[:DST][:ro]`.
pub fn parse_bind(spec: &str) -> Result<BindRequest, UsageError> {
    let bad = |why: &str| UsageError::new(format!("invalid bind spec '{spec}': {why}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let (src, dst, ro) = match parts.as_slice() {
        [src] => (*src, *src, false),
        [src, "ro"] => (*src, *src, true),
        [src, dst] => (*src, *dst, false),
        [src, dst, "ro"] => (*src, *dst, true),
        [_, _, flag] => {
            return Err(bad(&format!(
                "unknown flag '{flag}' (only 'ro' is supported)"
            )))
        }
        _ => return Err(bad("too many ':' separators")),
    };
    if src.is_empty() || dst.is_empty() {
        return Err(bad("empty path"));
    }
    Ok(BindRequest::new(src, dst, ro))
}

fn first_line(err: &clap::Error) -> String {
    let text = err.to_string();
    let line = text.lines().next().unwrap_or("invalid arguments").trim();
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

/// Parse a full argument vector (including the program name).
pub fn parse_args<I, S>(argv: I) -> Result<Parsed, UsageError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let program = argv.first().cloned().unwrap_or_else(|| "nsroot".into());
    let args = match Args::try_parse_from(&argv) {
        Ok(args) => args,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    Ok(Parsed::Info(e.render().to_string()))
                }
                _ => Err(UsageError::new(first_line(&e))),
            }
        }
    };

    if args.verify {
        if !args.rest.is_empty() {
            return Err(UsageError::new("--verify takes no positional arguments"));
        }
        return Ok(Parsed::Verify(ProbeConfig {
            host_only_path: args.host_path,
            ipc_key: args.ipc_key,
            old_root_dir: args.old_root,
        }));
    }

    let mut rest = args.rest.into_iter();
    let new_root = rest
        .next()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| UsageError::new("missing NEWROOT"))?;
    let binds = args
        .binds
        .iter()
        .map(|b| parse_bind(b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Parsed::Run(CliInvocation {
        program,
        binds,
        net: args.net,
        ipc: args.ipc,
        id_map: if args.map_current {
            IdMapPolicy::SameIdInside
        } else {
            IdMapPolicy::RootInside
        },
        old_root_dir: args.old_root,
        dry_run: args.dry_run,
        new_root: PathBuf::from(new_root),
        command: rest.collect(),
    }))
}

/// Process exit code for an execution result.
pub fn exit_code(result: &Result<ExecutionOutcome, ExecError>) -> i32 {
    match result {
        Ok(ExecutionOutcome::Exited(code)) => i32::from(*code),
        Ok(ExecutionOutcome::Signaled(sig)) => 128 + sig,
        Ok(ExecutionOutcome::SetupFailed { .. }) | Err(_) => TOOL_FAILURE,
    }
}

/// One-line diagnostic for results that are the tool's fault, if any.
pub fn diagnostic(result: &Result<ExecutionOutcome, ExecError>) -> Option<String> {
    match result {
        Ok(ExecutionOutcome::SetupFailed { stage, detail }) => {
            Some(format!("setup failed at {stage}: {detail}"))
        }
        Err(e) => Some(e.to_string()),
        Ok(_) => None,
    }
}

/// Everything `main` needs from the outside world.
pub struct Context<'a> {
    pub env: BTreeMap<String, String>,
    pub cwd: PathBuf,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

/// Parse, validate, compile, then dry-run or execute. Returns the exit code.
pub fn run<I, S>(argv: I, ctx: Context<'_>) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let Context {
        env,
        cwd,
        stdout,
        stderr,
    } = ctx;
    let invocation = match parse_args(argv) {
        Ok(Parsed::Info(text)) => {
            let _ = write!(stdout, "{text}");
            return 0;
        }
        Ok(Parsed::Verify(config)) => {
            let _ = write!(stdout, "{}", run_probes(&config));
            return 0;
        }
        Ok(Parsed::Run(invocation)) => invocation,
        Err(e) => {
            let _ = writeln!(
                stderr,
                "nsroot: {e}\nUsage: {USAGE}\nTry 'nsroot --help' for more information."
            );
            return TOOL_FAILURE;
        }
    };

    let spec = match validate_spec(invocation.to_candidate(&cwd, &env)) {
        Ok(spec) => spec,
        Err(e) => {
            let _ = writeln!(stderr, "nsroot: {e}");
            return TOOL_FAILURE;
        }
    };
    let script = compile_plan(&spec);
    if spec.dry_run() {
        let _ = write!(stdout, "{}", render_plan(&script));
        return 0;
    }

    let _ = stdout.flush();
    let result = exec::execute(&mut LinuxBackend::new(), &script, spec.id_map());
    if let Some(message) = diagnostic(&result) {
        let _ = writeln!(stderr, "nsroot: {message}");
    }
    exit_code(&result)
}
