//! A backend wrapper that journals every call before forwarding it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use super::{Call, ChildStatus, ExecFailure, HandshakeError, SandboxEnd, Spawned, SyscallBackend};
use crate::spec::{IdMapPolicy, NamespaceSet};

/// Writes one line per call (the [`Call`] `Display` form) to `journal`,
/// then delegates to `inner`.
///
/// The journal is shared across the fork, so with a pipe the parent sees
/// the child's calls too. Give it a close-on-exec descriptor.
pub struct TracingBackend<B> {
    inner: B,
    journal: File,
}

impl<B> TracingBackend<B> {
    pub fn new(inner: B, journal: File) -> Self {
        TracingBackend { inner, journal }
    }

    pub fn into_inner(self) -> B {
        self.inner
    }

    fn log(&mut self, call: Call) {
        // One write per line keeps lines from both processes intact.
        let line = format!("{call}\n");
        let _ = self.journal.write_all(line.as_bytes());
    }
}

impl<B: SyscallBackend> SyscallBackend for TracingBackend<B> {
    type Child = B::Child;

    fn create_isolated_child(&mut self, namespaces: NamespaceSet) -> io::Result<Spawned<B::Child>> {
        self.log(Call::CreateIsolatedChild { namespaces });
        self.inner.create_isolated_child(namespaces)
    }

    fn write_id_maps(
        &mut self,
        child: &B::Child,
        policy: IdMapPolicy,
    ) -> Result<(), HandshakeError> {
        self.log(Call::WriteIdMaps { policy });
        self.inner.write_id_maps(child, policy)
    }

    fn signal_maps_ready(&mut self, child: &mut B::Child) -> Result<(), HandshakeError> {
        self.log(Call::SignalMapsReady);
        self.inner.signal_maps_ready(child)
    }

    fn await_maps_ready(&mut self) -> io::Result<()> {
        self.log(Call::AwaitMapsReady);
        self.inner.await_maps_ready()
    }

    fn make_mounts_private(&mut self) -> io::Result<()> {
        self.log(Call::MakeMountsPrivate);
        self.inner.make_mounts_private()
    }

    fn bind_mount(&mut self, source: &Path, target: &Path, recursive: bool) -> io::Result<()> {
        self.log(Call::BindMount {
            source: source.to_path_buf(),
            target: target.to_path_buf(),
            recursive,
        });
        self.inner.bind_mount(source, target, recursive)
    }

    fn remount_read_only(&mut self, target: &Path) -> io::Result<()> {
        self.log(Call::RemountReadOnly {
            target: target.to_path_buf(),
        });
        self.inner.remount_read_only(target)
    }

    fn check_directory(&mut self, path: &Path) -> io::Result<()> {
        self.log(Call::CheckDirectory {
            path: path.to_path_buf(),
        });
        self.inner.check_directory(path)
    }

    fn pivot_root(&mut self, new_root: &Path, put_old: &Path) -> io::Result<()> {
        self.log(Call::PivotRoot {
            new_root: new_root.to_path_buf(),
            put_old: put_old.to_path_buf(),
        });
        self.inner.pivot_root(new_root, put_old)
    }

    fn chdir(&mut self, path: &Path) -> io::Result<()> {
        self.log(Call::Chdir {
            path: path.to_path_buf(),
        });
        self.inner.chdir(path)
    }

    fn detach_unmount(&mut self, path: &Path) -> io::Result<()> {
        self.log(Call::DetachUnmount {
            path: path.to_path_buf(),
        });
        self.inner.detach_unmount(path)
    }

    fn exec(
        &mut self,
        command: &[String],
        env: &BTreeMap<String, String>,
    ) -> Result<(), ExecFailure> {
        self.log(Call::Exec {
            command: command.to_vec(),
            env: env.clone(),
        });
        self.inner.exec(command, env)
    }

    fn finish_child(&mut self, end: &SandboxEnd) -> ! {
        self.inner.finish_child(end)
    }

    fn wait(&mut self, child: B::Child) -> io::Result<ChildStatus> {
        self.log(Call::Wait);
        self.inner.wait(child)
    }
}
