use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::PackageError;

const LOCK_WAIT: Duration = Duration::from_secs(30);

/// Exclusive sibling lock file `<dir>.lock`, removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, PackageError> {
        Self::acquire_within(dir, LOCK_WAIT)
    }

    pub fn acquire_within(dir: &Path, wait: Duration) -> Result<Self, PackageError> {
        let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".lock");
        let path = dir.with_file_name(name);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() >= wait {
                        return Err(PackageError::LockBusy(path));
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(source) => return Err(PackageError::IoFailure { path, source }),
            }
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_holder_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("b");
        let held = DirLock::acquire(&target).unwrap();
        assert!(matches!(DirLock::acquire_within(&target, Duration::from_millis(50)), Err(PackageError::LockBusy(_))));
        drop(held);
        DirLock::acquire_within(&target, Duration::from_millis(50)).unwrap();
    }
}
