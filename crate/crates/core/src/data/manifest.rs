//! Dataset manifests: one record per line, tab-separated
//! `image_path \t mask_path \t expression [\t category]`, UTF-8.
//! Relative paths resolve against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::raster::{write_image, write_mask};
use super::scene::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub expression: String,
    pub category: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 or 4 tab-separated fields", lineno + 1),
            ));
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(ManifestRecord {
            image: resolve(fields[0]),
            mask: resolve(fields[1]),
            expression: fields[2].to_string(),
            category: fields
                .get(3)
                .map(|s| s.to_string())
                .filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        let _ = write!(
            text,
            "{}\t{}\t{}",
            r.image.display(),
            r.mask.display(),
            r.expression
        );
        if let Some(c) = &r.category {
            let _ = write!(text, "\t{c}");
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write images, masks and `manifest.tsv` into `dir`; returns the manifest path.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("image_{i:05}.png"));
        let mask = PathBuf::from(format!("mask_{i:05}.png"));
        write_image(&s.image, &dir.join(&image))?;
        write_mask(&s.mask, &dir.join(&mask))?;
        records.push(ManifestRecord {
            image,
            mask,
            expression: s.expression.clone(),
            category: Some(s.meta.category.clone()),
        });
    }
    let path = dir.join("manifest.tsv");
    write_manifest(&records, &path)?;
    Ok(path)
}
