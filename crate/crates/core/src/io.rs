//! File helpers shared by every writer in the pipeline.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never sees a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("refusing to overwrite {0} with different content (use --force)")]
    WouldClobber(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What [`write_output`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Written,
    Unchanged,
}

/// Idempotent write: identical existing content is left alone, different
/// content is an error unless `force` is set.
pub fn write_output(path: &Path, bytes: &[u8], force: bool) -> Result<WriteOutcome, OutputError> {
    match fs::read(path) {
        Ok(existing) if existing == bytes => return Ok(WriteOutcome::Unchanged),
        Ok(_) if !force => return Err(OutputError::WouldClobber(path.display().to_string())),
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    write_atomic(path, bytes)?;
    Ok(WriteOutcome::Written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clobber_rules() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        assert_eq!(
            write_output(&p, b"one", false).unwrap(),
            WriteOutcome::Written
        );
        assert_eq!(
            write_output(&p, b"one", false).unwrap(),
            WriteOutcome::Unchanged
        );
        assert!(matches!(
            write_output(&p, b"two", false),
            Err(OutputError::WouldClobber(_))
        ));
        assert_eq!(
            write_output(&p, b"two", true).unwrap(),
            WriteOutcome::Written
        );
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
