//! Knowledge databases: the final object → group mapping with provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{ObjectDatabase, ObjectId};

pub const KDB_SCHEMA_VERSION: u32 = 1;
pub const EXCLUDED_TOKEN: &str = "(excluded)";
pub const UNASSIGNED_TOKEN: &str = "(unassigned)";

#[derive(Debug, Error)]
pub enum KdbError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("object {0} listed more than once")]
    Duplicate(ObjectId),
    #[error("invalid group path {0:?}")]
    InvalidPath(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionViolation {
    #[error("object {0} is missing from the knowledge database")]
    Missing(ObjectId),
    #[error("object {0} is not in the source database")]
    Unknown(ObjectId),
    #[error("object {0} is placed more than once")]
    Overlap(ObjectId),
}

/// Checks one slash-separated group path.
pub fn valid_group_path(path: &str) -> bool {
    !path.is_empty() && path.split('/').all(valid_group_name)
}

/// A single path segment: non-empty, trimmed, no separators, not a reserved token.
pub fn valid_group_name(name: &str) -> bool {
    !name.is_empty()
        && name.trim() == name
        && !name.contains('/')
        && !name.starts_with('(')
        && !name.contains(',')
        && !name.contains('\n')
}

/// Where an object ended up.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "path", rename_all = "snake_case")]
pub enum Placement {
    Group(String),
    Excluded,
    Unassigned,
}

impl Placement {
    /// Group path, or the reserved token for the two pseudo-groups.
    pub fn label(&self) -> &str {
        match self {
            Placement::Group(p) => p,
            Placement::Excluded => EXCLUDED_TOKEN,
            Placement::Unassigned => UNASSIGNED_TOKEN,
        }
    }

    pub fn from_label(label: &str) -> Result<Self, KdbError> {
        match label {
            EXCLUDED_TOKEN => Ok(Placement::Excluded),
            UNASSIGNED_TOKEN => Ok(Placement::Unassigned),
            p if valid_group_path(p) => Ok(Placement::Group(p.to_string())),
            p => Err(KdbError::InvalidPath(p.to_string())),
        }
    }

    /// Label truncated to the first `depth` path segments; pseudo-groups unchanged.
    pub fn label_at_depth(&self, depth: usize) -> String {
        match self {
            Placement::Group(p) => p.split('/').take(depth.max(1)).collect::<Vec<_>>().join("/"),
            other => other.label().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDatabase {
    pub schema_version: u32,
    pub db_id: String,
    /// Hex SHA-256 of the compact JSON serialization of the pipeline record.
    pub pipeline_hash: String,
    /// Leaf group path per grouped object.
    pub groups: BTreeMap<ObjectId, String>,
    pub excluded: BTreeSet<ObjectId>,
    pub unassigned: BTreeSet<ObjectId>,
    /// Step that last placed each object; objects never touched have none.
    pub provenance: BTreeMap<ObjectId, String>,
}

impl KnowledgeDatabase {
    pub fn new(db_id: impl Into<String>, pipeline_hash: impl Into<String>) -> Self {
        KnowledgeDatabase {
            schema_version: KDB_SCHEMA_VERSION,
            db_id: db_id.into(),
            pipeline_hash: pipeline_hash.into(),
            groups: BTreeMap::new(),
            excluded: BTreeSet::new(),
            unassigned: BTreeSet::new(),
            provenance: BTreeMap::new(),
        }
    }

    /// Every object of `db` unassigned.
    pub fn all_unassigned(db: &ObjectDatabase, pipeline_hash: impl Into<String>) -> Self {
        let mut kdb = Self::new(db.db_id(), pipeline_hash);
        kdb.unassigned = db.object_ids().cloned().collect();
        kdb
    }

    pub fn insert(&mut self, id: ObjectId, placement: Placement, provenance: Option<String>) {
        self.groups.remove(&id);
        self.excluded.remove(&id);
        self.unassigned.remove(&id);
        match placement {
            Placement::Group(p) => {
                self.groups.insert(id.clone(), p);
            }
            Placement::Excluded => {
                self.excluded.insert(id.clone());
            }
            Placement::Unassigned => {
                self.unassigned.insert(id.clone());
            }
        }
        match provenance {
            Some(step) => self.provenance.insert(id, step),
            None => self.provenance.remove(&id),
        };
    }

    pub fn placement(&self, id: &str) -> Option<Placement> {
        if let Some(p) = self.groups.get(id) {
            Some(Placement::Group(p.clone()))
        } else if self.excluded.contains(id) {
            Some(Placement::Excluded)
        } else if self.unassigned.contains(id) {
            Some(Placement::Unassigned)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len() + self.excluded.len() + self.unassigned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All object ids, sorted.
    pub fn object_ids(&self) -> BTreeSet<ObjectId> {
        self.groups
            .keys()
            .chain(self.excluded.iter())
            .chain(self.unassigned.iter())
            .cloned()
            .collect()
    }

    /// Members per leaf group path.
    pub fn leaf_groups(&self) -> BTreeMap<String, BTreeSet<ObjectId>> {
        let mut out: BTreeMap<String, BTreeSet<ObjectId>> = BTreeMap::new();
        for (id, path) in &self.groups {
            out.entry(path.clone()).or_default().insert(id.clone());
        }
        out
    }

    /// Checks that every object of `db` is placed exactly once.
    pub fn check_partition(&self, db: &ObjectDatabase) -> Vec<PartitionViolation> {
        let mut violations = Vec::new();
        let mut seen = BTreeSet::new();
        for id in self.groups.keys().chain(&self.excluded).chain(&self.unassigned) {
            if !seen.insert(id) {
                violations.push(PartitionViolation::Overlap(id.clone()));
            }
            if !db.contains(id) {
                violations.push(PartitionViolation::Unknown(id.clone()));
            }
        }
        for id in db.object_ids() {
            if !seen.contains(id) {
                violations.push(PartitionViolation::Missing(id.clone()));
            }
        }
        violations
    }

    /// CSV rows `object_id,group_path,provenance_step`, sorted by object id.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["object_id", "group_path", "provenance_step"])?;
        for id in self.object_ids() {
            let placement = self.placement(&id).expect("id comes from the kdb");
            let prov = self.provenance.get(&id).map(String::as_str).unwrap_or("");
            w.write_record([id.as_str(), placement.label(), prov])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }

    /// Reads the CSV export. The pipeline hash and db id are not part of it.
    pub fn read_csv<R: Read>(reader: R, db_id: impl Into<String>) -> Result<Self, KdbError> {
        let mut kdb = Self::new(db_id, "");
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        for record in r.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let id = record
                .get(0)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| KdbError::Row { line, message: "missing object_id".into() })?;
            let label = record
                .get(1)
                .ok_or_else(|| KdbError::Row { line, message: "missing group_path".into() })?;
            let placement = Placement::from_label(label)?;
            if kdb.placement(id).is_some() {
                return Err(KdbError::Duplicate(id.to_string()));
            }
            let prov = record.get(2).filter(|s| !s.is_empty()).map(str::to_string);
            kdb.insert(id.to_string(), placement, prov);
        }
        Ok(kdb)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}
