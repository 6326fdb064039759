use std::fmt::Write as _;
use std::path::Path;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::MainModel;

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Renders extractor features as CSV with header `source,label,f0,..,f{d-1}`.
/// Real rows come first, tagged `real`, then synthetic rows tagged `synthetic`.
pub fn embeddings_csv(model: &MainModel, real: &Dataset, synthetic: &Dataset) -> Result<String> {
    let d = model.architecture().feature_dim;
    let mut out = String::from("source,label");
    for j in 0..d {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for (tag, data) in [("real", real), ("synthetic", synthetic)] {
        if data.is_empty() {
            continue;
        }
        let f = model.features(&data.x)?;
        for (i, &label) in data.y.iter().enumerate() {
            write!(out, "{tag},{label}").unwrap();
            for v in f.row(i) {
                write!(out, ",{v:e}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes [`embeddings_csv`] to `path` atomically and returns the row count.
pub fn export_embeddings(model: &MainModel, real: &Dataset, synthetic: &Dataset, path: &Path) -> Result<usize> {
    let csv = embeddings_csv(model, real, synthetic)?;
    write_atomic(path, csv.as_bytes())?;
    Ok(real.len() + synthetic.len())
}
