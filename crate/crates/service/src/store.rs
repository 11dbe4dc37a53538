//! File persistence under the data directory. Every write goes to a temporary
//! file in the target directory and is renamed into place.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use trajkd_core::pipeline::PipelineRecord;

/// Ids used as file names: ASCII alphanumerics, `-`, `_` and `.`, not leading `.`.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub db_id: String,
    pub allow_incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub db_id: String,
    pub revision: u64,
    pub record: PipelineRecord,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("datasets"))?;
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dataset_path(&self, db_id: &str, ext: &str) -> PathBuf {
        self.root.join("datasets").join(format!("{db_id}.{ext}"))
    }

    /// Keeps the uploaded bytes so a reload re-ingests exactly the same samples.
    pub fn save_dataset(&self, meta: &DatasetMeta, upload: &[u8]) -> io::Result<()> {
        write_atomic(&self.dataset_path(&meta.db_id, "csv"), upload)?;
        // the metadata file marks the dataset complete, so it is written last
        let json = serde_json::to_vec_pretty(meta).map_err(io::Error::other)?;
        write_atomic(&self.dataset_path(&meta.db_id, "json"), &json)
    }

    pub fn load_datasets(&self) -> io::Result<Vec<(DatasetMeta, Vec<u8>)>> {
        let mut out = Vec::new();
        for path in sorted_entries(&self.root.join("datasets"), "json")? {
            let meta: DatasetMeta = serde_json::from_slice(&fs::read(&path)?).map_err(io::Error::other)?;
            let bytes = fs::read(self.dataset_path(&meta.db_id, "csv"))?;
            out.push((meta, bytes));
        }
        Ok(out)
    }

    pub fn save_session(&self, snapshot: &SessionSnapshot) -> io::Result<()> {
        let json = serde_json::to_vec_pretty(snapshot).map_err(io::Error::other)?;
        write_atomic(
            &self.root.join("sessions").join(format!("{}.json", snapshot.session_id)),
            &json,
        )
    }

    pub fn load_sessions(&self) -> io::Result<Vec<SessionSnapshot>> {
        sorted_entries(&self.root.join("sessions"), "json")?
            .into_iter()
            .map(|p| serde_json::from_slice(&fs::read(p)?).map_err(io::Error::other))
            .collect()
    }
}

fn sorted_entries(dir: &Path, ext: &str) -> io::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == ext) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}
