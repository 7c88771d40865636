//! All-or-nothing artifact writes. Files are written into a staging
//! directory inside the output directory and renamed into place only when
//! the command succeeds; a failed command leaves no partial artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct Staging {
    out_dir: PathBuf,
    dir: PathBuf,
    entries: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(out_dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let dir = out_dir.join(format!(".staging-{command}-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).ok();
        }
        fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Staging {
            out_dir: out_dir.to_path_buf(),
            dir,
            entries: Vec::new(),
            committed: false,
        })
    }

    /// Staging path for top-level artifact `name` (a file or directory).
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.entries.iter().any(|e| e == name) {
            self.entries.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// Moves every staged artifact into the output directory, replacing
    /// older versions, and returns the final paths.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::new();
        for name in &self.entries {
            let from = self.dir.join(name);
            if !from.exists() {
                continue;
            }
            let to = self.out_dir.join(name);
            if to.is_dir() {
                fs::remove_dir_all(&to).with_context(|| format!("replacing {}", to.display()))?;
            } else if to.exists() {
                fs::remove_file(&to).with_context(|| format!("replacing {}", to.display()))?;
            }
            fs::rename(&from, &to).with_context(|| format!("moving {} into place", to.display()))?;
            done.push(to);
        }
        self.committed = true;
        fs::remove_dir_all(&self.dir).ok();
        Ok(done)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            fs::remove_dir_all(&self.dir).ok();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_files_and_dirs() {
        let out = tempfile::tempdir().unwrap();
        let mut s = Staging::new(out.path(), "t").unwrap();
        s.write("a.txt", "one").unwrap();
        let d = s.path("model");
        fs::create_dir(&d).unwrap();
        fs::write(d.join("m.json"), "{}").unwrap();
        let paths = s.commit().unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(fs::read_to_string(out.path().join("a.txt")).unwrap(), "one");
        assert!(out.path().join("model/m.json").exists());
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 2);
    }

    #[test]
    fn dropped_staging_leaves_nothing() {
        let out = tempfile::tempdir().unwrap();
        {
            let mut s = Staging::new(out.path(), "t").unwrap();
            s.write("a.txt", "partial").unwrap();
        }
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_replaces_old_artifacts() {
        let out = tempfile::tempdir().unwrap();
        fs::create_dir(out.path().join("model")).unwrap();
        fs::write(out.path().join("model/stale.bin"), "x").unwrap();
        let mut s = Staging::new(out.path(), "t").unwrap();
        fs::create_dir(s.path("model")).unwrap();
        s.commit().unwrap();
        assert!(!out.path().join("model/stale.bin").exists());
    }
}
