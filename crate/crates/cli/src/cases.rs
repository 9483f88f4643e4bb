use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::failure::{io_failure, CmdResult};

pub const IMAGE_SUFFIX: &str = ".img.svol";
pub const LABEL_SUFFIX: &str = ".lbl.svol";

pub fn image_name(case: &str) -> String {
    format!("{case}{IMAGE_SUFFIX}")
}

pub fn label_name(case: &str) -> String {
    format!("{case}{LABEL_SUFFIX}")
}

/// Files in `dir` ending in `suffix`, keyed and sorted by case id.
pub fn list(dir: &Path, suffix: &str) -> CmdResult<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_failure(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(id) = name.strip_suffix(suffix) {
            if !id.is_empty() {
                out.insert(id.to_string(), entry.path());
            }
        }
    }
    Ok(out)
}

/// Removes files created by a command that later failed.
pub struct Cleanup {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    armed: bool,
}

impl Cleanup {
    pub fn new() -> Self {
        Cleanup {
            files: Vec::new(),
            dirs: Vec::new(),
            armed: true,
        }
    }

    pub fn file(&mut self, p: PathBuf) {
        self.files.push(p);
    }

    /// Creates `dir` (and parents) and registers every directory that did
    /// not exist before.
    pub fn create_dir(&mut self, dir: &Path) -> CmdResult {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        self.dirs.extend(missing);
        Ok(())
    }

    pub fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        // innermost first
        for d in &self.dirs {
            let _ = std::fs::remove_dir(d);
        }
    }
}
