//! On-disk formats. Every file is written to a temporary sibling and renamed
//! into place.

pub mod bundle;
pub mod params;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use bundle::{read_bundle, write_bundle, Bundle, BundleHeader, BundleKind, Record};
pub use params::{read_params, write_params};

/// Writes `bytes` to a temporary file beside `path`, syncs it and renames it
/// over `path`. Readers see either the old contents or the new ones.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
