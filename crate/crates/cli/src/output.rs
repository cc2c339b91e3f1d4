//! Error classification for exit codes and atomic file output.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use d2feat::{D2Error, ErrorClass};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    TestFailure = 1,
    Io = 2,
    Format = 3,
    Shape = 4,
}

impl From<ErrorClass> for ExitCode {
    fn from(c: ErrorClass) -> Self {
        match c {
            ErrorClass::Io => ExitCode::Io,
            ErrorClass::Format => ExitCode::Format,
            ErrorClass::Shape => ExitCode::Shape,
        }
    }
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Format, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<D2Error> for CliError {
    fn from(e: D2Error) -> Self {
        Self::new(e.class().into(), e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches the offending file to a library error.
pub trait WithPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> WithPath<T> for d2feat::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::new(e.class().into(), format!("{}: {e}", path.display())))
    }
}

impl<T> WithPath<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display())))
    }
}

/// A temporary file in the target's directory, so the final rename stays
/// on one filesystem and an interrupted run never leaves a partial file.
fn temp_beside(path: &Path, bytes: &[u8]) -> CliResult<tempfile::NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).at(path)?;
    tmp.write_all(bytes).at(path)?;
    Ok(tmp)
}

fn persist(tmp: tempfile::NamedTempFile, path: &Path) -> CliResult<()> {
    tmp.persist(path).map_err(|e| CliError::new(ExitCode::Io, format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// A batch of outputs committed only after all of them were produced.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    /// Stages every file before renaming any, so an unwritable target leaves
    /// all of them untouched.
    pub fn commit(self) -> CliResult<()> {
        let staged = self
            .files
            .iter()
            .map(|(path, bytes)| Ok((temp_beside(path, bytes)?, path)))
            .collect::<CliResult<Vec<_>>>()?;
        for (tmp, path) in staged {
            persist(tmp, path)?;
        }
        Ok(())
    }
}
