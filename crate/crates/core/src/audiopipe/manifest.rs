//! `path,label,split` manifests. Relative paths resolve against the
//! manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: Option<String>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    classes: Vec<String>,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| data_err(path, e))?;
        let headers = rdr.headers().map_err(|e| data_err(path, e))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let path_col = col("path").ok_or_else(|| data_err(path, "header has no `path` column"))?;
        let (label_col, split_col) = (col("label"), col("split"));
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| data_err(path, e))?;
            let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()).map(str::to_owned);
            let rel = field(Some(path_col)).ok_or_else(|| data_err(path, format!("row {} has an empty path", i + 2)))?;
            let p = base.join(&rel);
            if !p.is_file() {
                return Err(data_err(path, format!("row {}: {} does not exist", i + 2, p.display())));
            }
            rows.push(ManifestRow { path: p, label: field(label_col), split: field(split_col) });
        }
        Ok(Self::from_rows(rows))
    }

    /// Builds the class vocabulary: numeric labels sort numerically,
    /// otherwise lexicographically.
    pub fn from_rows(rows: Vec<ManifestRow>) -> Self {
        let set: BTreeSet<&str> = rows.iter().filter_map(|r| r.label.as_deref()).collect();
        let mut classes: Vec<String> = set.into_iter().map(str::to_owned).collect();
        if classes.iter().all(|c| c.parse::<i64>().is_ok()) {
            classes.sort_by_key(|c| c.parse::<i64>().unwrap());
        }
        Self { rows, classes }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Rows whose split equals `split`; `None` keeps rows without a split.
    pub fn split(&self, split: Option<&str>) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split.as_deref() == split).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
