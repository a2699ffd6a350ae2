//! Unprivileged process isolation with Linux user and mount namespaces.
//!
//! A run goes through four stages:
//!
//! 1. [`spec::validate_spec`] checks a [`spec::SpecCandidate`] and
//!    normalizes its paths.
//! 2. [`plan::compile_plan`] turns the resulting [`spec::SandboxSpec`] into an
//!    [`plan::OperationScript`]: enter namespaces, wait for id maps, make
//!    mounts private, bind the new root onto itself, pivot into it, apply the
//!    user binds from the old root, detach the old root, exec.
//! 3. [`render::render_plan`] prints that script for `--dry-run`.
//! 4. [`exec::execute`] runs it through a [`exec::SyscallBackend`].
//!
//! [`cli`] wires these together behind a `chroot`-compatible command line,
//! and [`probe`] implements the hidden `--verify` mode used to check
//! isolation from inside a sandbox.

pub mod cli;
pub mod exec;
pub mod plan;
pub mod probe;
pub mod render;
pub mod spec;

pub use exec::{execute, ExecError, ExecutionOutcome};
pub use plan::{compile_plan, Op, OpKind, OperationScript};
pub use render::{parse_plan, render_plan};
pub use spec::{validate_spec, BindMount, IdMapPolicy, NamespaceSet, SandboxSpec, SpecCandidate};
