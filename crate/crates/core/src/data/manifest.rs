use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{manifest_root, Attributes, Split, StyleTag};
use crate::error::{Error, Result};

/// Version stamped into every manifest line as `"v"`.
pub const MANIFEST_VERSION: u32 = 1;

/// One query row: a gallery image and one query of a given style for it.
///
/// Paths are relative to the manifest's directory. Text rows carry `text`
/// and no `query_path`; every other style carries `query_path` and no `text`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub gallery_id: String,
    pub image_path: PathBuf,
    pub style: StyleTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Attributes>,
}

#[derive(Serialize, Deserialize)]
struct Line<R> {
    v: u32,
    #[serde(flatten)]
    record: R,
}

impl ManifestRecord {
    fn check_shape(&self) -> std::result::Result<(), String> {
        if self.gallery_id.trim().is_empty() {
            return Err("gallery_id is empty".into());
        }
        match (self.style, &self.query_path, &self.text) {
            (StyleTag::Text, None, Some(t)) if !t.trim().is_empty() => Ok(()),
            (StyleTag::Text, _, _) => Err("text rows need a non-empty `text` and no `query_path`".into()),
            (_, Some(_), None) => Ok(()),
            (style, _, _) => Err(format!("{style} rows need `query_path` and no `text`")),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, &Line { v: MANIFEST_VERSION, record })?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Parses and validates a manifest, keeping on-disk order.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let parsed: Line<ManifestRecord> = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if parsed.v != MANIFEST_VERSION {
            return Err(parse_err(format!("unsupported manifest version {}", parsed.v)));
        }
        parsed.record.check_shape().map_err(|m| {
            Error::Validation(format!("{}:{}: {m}", path.display(), idx + 1))
        })?;
        records.push(parsed.record);
    }
    validate(&manifest_root(path), &records)?;
    Ok(records)
}

fn validate(root: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen_pairs = HashSet::new();
    let mut per_id: BTreeMap<&str, (Split, &Path)> = BTreeMap::new();
    let mut missing = Vec::new();
    let mut checked = HashSet::new();
    for r in records {
        if !seen_pairs.insert((r.gallery_id.as_str(), r.style)) {
            problems.push(format!("duplicate {} query for {}", r.style, r.gallery_id));
        }
        match per_id.get(r.gallery_id.as_str()) {
            Some((split, image)) => {
                if *split != r.split {
                    problems.push(format!("{} appears in both splits", r.gallery_id));
                }
                if *image != r.image_path.as_path() {
                    problems.push(format!("{} references two gallery images", r.gallery_id));
                }
            }
            None => {
                per_id.insert(&r.gallery_id, (r.split, &r.image_path));
            }
        }
        for p in [Some(&r.image_path), r.query_path.as_ref()].into_iter().flatten() {
            if checked.insert(p.clone()) && !root.join(p).is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        problems.push(format!("missing files: {}", missing.join(", ")));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems.join("; ")))
    }
}
