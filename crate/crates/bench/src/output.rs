//! Atomic artifact writes and output-directory resolution.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::BenchError;

pub const OUT_DIR_ENV: &str = "BILEVEL_LAB_OUT";

/// `--out`, then the environment override, then the config, then `out`.
pub fn resolve_output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"))
}

fn io_err(path: &Path, e: std::io::Error) -> BenchError {
    BenchError::Io(format!("{}: {e}", path.display()))
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), BenchError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(contents).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
