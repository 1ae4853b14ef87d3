use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{GroundTruth, RankedItem, Ranking};

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let gt: GroundTruth = read_json(path)?;
    gt.validate()?;
    Ok(gt)
}

pub fn write_ground_truth(path: impl AsRef<Path>, gt: &GroundTruth) -> Result<()> {
    write_json(path, gt)
}

/// One image with one feature-map file per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Paths relative to the manifest, aligned with [`Manifest::scales`].
    #[serde(default)]
    pub files: Vec<String>,
    /// Reason the image produced no files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scales: Vec<f64>,
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    /// Entries of `split` that have files.
    pub fn entries<'a>(&'a self, split: Option<&'a str>) -> impl Iterator<Item = &'a ManifestEntry> {
        self.images
            .iter()
            .filter(move |e| e.skipped.is_none() && split.is_none_or(|s| e.split.as_deref() == Some(s)))
    }

    /// Index of the scale closest to 1.
    pub fn unit_scale(&self) -> usize {
        (0..self.scales.len())
            .min_by(|&a, &b| (self.scales[a] - 1.0).abs().total_cmp(&(self.scales[b] - 1.0).abs()))
            .unwrap_or(0)
    }

    pub fn resolve(base: &Path, file: &str) -> PathBuf {
        base.join(file)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Input("manifest lists no scales".into()));
        }
        for e in &self.images {
            if e.skipped.is_none() && e.files.len() != self.scales.len() {
                return Err(Error::Input(format!(
                    "manifest entry {} has {} files for {} scales",
                    e.id,
                    e.files.len(),
                    self.scales.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let m: Manifest = read_json(path)?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    write_json(path, m)
}

const TSV_HEADER: &str = "query_id\trank\tdb_id\tsimilarity";

/// `query_id, rank (1-based), db_id, similarity`, one row per ranked item.
pub fn rankings_to_tsv(rankings: &[Ranking]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rankings {
        for (i, item) in r.items.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", r.query_id, i + 1, item.id, item.similarity).expect("write to string");
        }
    }
    out
}

pub fn write_rankings_tsv(path: impl AsRef<Path>, rankings: &[Ranking]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, rankings_to_tsv(rankings)).map_err(|e| Error::io(path, e))
}

/// Groups rows by query in order of first appearance; rows must be in rank order.
pub fn read_rankings_tsv(path: impl AsRef<Path>) -> Result<Vec<Ranking>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, why: String| Error::Input(format!("{}:{line}: {why}", path.display()));
    let mut out: Vec<Ranking> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line.starts_with("query_id") || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(n + 1, format!("expected 4 columns, found {}", cols.len())));
        }
        let rank: usize = cols[1].parse().map_err(|e| bad(n + 1, format!("rank: {e}")))?;
        let similarity: f64 = cols[3].parse().map_err(|e| bad(n + 1, format!("similarity: {e}")))?;
        let idx = match out.iter().position(|r| r.query_id == cols[0]) {
            Some(i) => i,
            None => {
                out.push(Ranking {
                    query_id: cols[0].to_string(),
                    items: Vec::new(),
                });
                out.len() - 1
            }
        };
        let r = &mut out[idx];
        if rank != r.items.len() + 1 {
            return Err(bad(
                n + 1,
                format!("rank {rank} out of sequence for query {}", r.query_id),
            ));
        }
        r.items.push(RankedItem {
            id: cols[2].to_string(),
            similarity,
        });
    }
    Ok(out)
}
