//! Artifact writing. All files go under one root and are written from the
//! main thread, in a fixed order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Format;
use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "NBALL_OUT_DIR";

pub struct Output {
    root: PathBuf,
    formats: Vec<Format>,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn new(root: PathBuf, formats: &[Format]) -> Result<Self, CliError> {
        fs::create_dir_all(&root).map_err(|source| CliError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Self {
            root,
            formats: formats.to_vec(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Paths relative to the root, in write order.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn json(&mut self, rel: impl AsRef<Path>, text: &str) -> Result<(), CliError> {
        self.put(Format::Json, rel.as_ref(), text)
    }

    pub fn csv(&mut self, rel: impl AsRef<Path>, text: &str) -> Result<(), CliError> {
        self.put(Format::Csv, rel.as_ref(), text)
    }

    fn put(&mut self, f: Format, rel: &Path, text: &str) -> Result<(), CliError> {
        if !self.formats.contains(&f) {
            return Ok(());
        }
        let path = self.root.join(rel);
        let io = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(&path, text).map_err(io)?;
        self.written.push(rel.to_path_buf());
        Ok(())
    }
}

/// `--out` wins over the environment override, which wins over the config.
pub fn resolve_dir(flag: Option<&Path>, env: Option<&str>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(crate::config::DEFAULT_OUT_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_precedence() {
        let p = |s: &str| PathBuf::from(s);
        assert_eq!(resolve_dir(Some(&p("a")), Some("b"), Some(&p("c"))), p("a"));
        assert_eq!(resolve_dir(None, Some("b"), Some(&p("c"))), p("b"));
        assert_eq!(resolve_dir(None, Some(""), Some(&p("c"))), p("c"));
        assert_eq!(resolve_dir(None, None, None), p(crate::config::DEFAULT_OUT_DIR));
    }
}
