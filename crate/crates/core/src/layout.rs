//! Where each command reads and writes inside an experiment directory.

use std::path::{Path, PathBuf};

/// `<root>/data`, `<root>/checkpoints`, `<root>/logs`, `<root>/eval`, `<root>/bench`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, kind: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{kind}.fspk"))
    }

    pub fn loss_csv(&self, kind: &str) -> PathBuf {
        self.root.join("logs").join(format!("{kind}_loss.csv"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn separate_dir(&self) -> PathBuf {
        self.root.join("separate")
    }
}

pub(crate) fn ensure_parent(path: &Path) -> crate::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    Ok(())
}
