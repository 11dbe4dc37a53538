//! Trajectory domain model, canonical table ingestion and validation.
//!
//! An [`ObjectDatabase`] is immutable once built. Every mutation of a grouping
//! happens elsewhere and refers back to objects by id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type ObjectId = String;

/// Canonical header of the trajectory table.
pub const CANONICAL_HEADER: [&str; 5] = ["object_id", "frame", "x", "y", "z"];

/// Significant digits written for coordinates in the canonical table.
pub const COORDINATE_DIGITS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn coord(self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub frame: u32,
    pub pos: Point3,
}

impl Sample {
    pub fn new(frame: u32, pos: Point3) -> Self {
        Self { frame, pos }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("trajectory {object_id} has {samples} sample(s), at least 2 required")]
    TooFewSamples { object_id: ObjectId, samples: usize },
    #[error("trajectory {object_id}: frame {frame} does not follow frame {previous}")]
    FrameOrder {
        object_id: ObjectId,
        previous: u32,
        frame: u32,
    },
    #[error("trajectory {object_id}: non-finite position at frame {frame}")]
    NonFinite { object_id: ObjectId, frame: u32 },
    #[error("duplicate object id {0}")]
    DuplicateObject(ObjectId),
    #[error("trajectory {object_id}: frame {frame} outside database frame range {min}..={max}")]
    OutsideFrameRange {
        object_id: ObjectId,
        frame: u32,
        min: u32,
        max: u32,
    },
    #[error("invalid database metadata: {0}")]
    InvalidMetadata(String),
}

/// One object's positions over strictly increasing frames.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    object_id: ObjectId,
    samples: Vec<Sample>,
}

impl Trajectory {
    pub fn new(
        object_id: impl Into<ObjectId>,
        samples: Vec<Sample>,
    ) -> Result<Self, TrajectoryError> {
        let object_id = object_id.into();
        if samples.len() < 2 {
            return Err(TrajectoryError::TooFewSamples {
                object_id,
                samples: samples.len(),
            });
        }
        for pair in samples.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(TrajectoryError::FrameOrder {
                    object_id,
                    previous: pair[0].frame,
                    frame: pair[1].frame,
                });
            }
        }
        if let Some(bad) = samples.iter().find(|s| !s.pos.is_finite()) {
            return Err(TrajectoryError::NonFinite {
                object_id,
                frame: bad.frame,
            });
        }
        Ok(Self { object_id, samples })
    }

    /// Builds a trajectory with consecutive frames starting at `first_frame`.
    pub fn from_positions(
        object_id: impl Into<ObjectId>,
        first_frame: u32,
        positions: impl IntoIterator<Item = Point3>,
    ) -> Result<Self, TrajectoryError> {
        let samples = positions
            .into_iter()
            .zip(first_frame..)
            .map(|(pos, frame)| Sample::new(frame, pos))
            .collect();
        Self::new(object_id, samples)
    }

    pub fn object_id(&self) -> &str {
        &self.object_id
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = Point3> + '_ {
        self.samples.iter().map(|s| s.pos)
    }

    pub fn first(&self) -> Sample {
        self.samples[0]
    }

    pub fn last(&self) -> Sample {
        self.samples[self.samples.len() - 1]
    }

    pub fn first_frame(&self) -> u32 {
        self.first().frame
    }

    pub fn last_frame(&self) -> u32 {
        self.last().frame
    }

    /// Mean position over all samples.
    pub fn centroid(&self) -> Point3 {
        let sum = self.positions().fold(Point3::ORIGIN, |acc, p| acc + p);
        sum * (1.0 / self.samples.len() as f64)
    }

    /// True when consecutive samples are exactly one frame apart.
    pub fn is_gapless(&self) -> bool {
        self.samples.windows(2).all(|w| w[1].frame == w[0].frame + 1)
    }

    pub fn covers(&self, min_frame: u32, max_frame: u32) -> bool {
        self.first_frame() == min_frame && self.last_frame() == max_frame && self.is_gapless()
    }

    /// Applies `f` to every position, keeping frames.
    pub fn map_positions(&self, f: impl Fn(Point3) -> Point3) -> Result<Self, TrajectoryError> {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample::new(s.frame, f(s.pos)))
            .collect();
        Self::new(self.object_id.clone(), samples)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            object_id: ObjectId,
            samples: Vec<Sample>,
        }
        let raw = Raw::deserialize(deserializer)?;
        Trajectory::new(raw.object_id, raw.samples).map_err(serde::de::Error::custom)
    }
}

/// Metadata carried alongside the trajectories of a database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseMeta {
    /// Every trajectory is expected to cover the whole frame range.
    pub complete_tracks: bool,
    /// Time units per frame.
    pub frame_scale: f64,
    pub vertical_axis: Axis,
}

impl Default for DatabaseMeta {
    fn default() -> Self {
        Self {
            complete_tracks: true,
            frame_scale: 1.0,
            vertical_axis: Axis::Y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDatabase")]
pub struct ObjectDatabase {
    db_id: String,
    frame_range: (u32, u32),
    meta: DatabaseMeta,
    trajectories: BTreeMap<ObjectId, Trajectory>,
    #[serde(skip)]
    centroid: Point3,
}

#[derive(Deserialize)]
struct RawDatabase {
    db_id: String,
    frame_range: (u32, u32),
    meta: DatabaseMeta,
    trajectories: BTreeMap<ObjectId, Trajectory>,
}

impl TryFrom<RawDatabase> for ObjectDatabase {
    type Error = TrajectoryError;

    fn try_from(raw: RawDatabase) -> Result<Self, Self::Error> {
        for (key, traj) in &raw.trajectories {
            if key != traj.object_id() {
                return Err(TrajectoryError::InvalidMetadata(format!(
                    "trajectory keyed {key} carries id {}",
                    traj.object_id()
                )));
            }
        }
        ObjectDatabase::with_frame_range(
            raw.db_id,
            raw.trajectories.into_values().collect(),
            raw.meta,
            Some(raw.frame_range),
        )
    }
}

impl ObjectDatabase {
    pub fn new(
        db_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        meta: DatabaseMeta,
    ) -> Result<Self, TrajectoryError> {
        Self::with_frame_range(db_id, trajectories, meta, None)
    }

    /// Builds a database; when `frame_range` is `None` it is the span of the data.
    pub fn with_frame_range(
        db_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        meta: DatabaseMeta,
        frame_range: Option<(u32, u32)>,
    ) -> Result<Self, TrajectoryError> {
        if !(meta.frame_scale.is_finite() && meta.frame_scale > 0.0) {
            return Err(TrajectoryError::InvalidMetadata(format!(
                "frame scale must be positive and finite, got {}",
                meta.frame_scale
            )));
        }
        let mut map = BTreeMap::new();
        for traj in trajectories {
            let id = traj.object_id.clone();
            if map.insert(id.clone(), traj).is_some() {
                return Err(TrajectoryError::DuplicateObject(id));
            }
        }
        let span = map.values().fold(None, |acc: Option<(u32, u32)>, t| {
            Some(match acc {
                None => (t.first_frame(), t.last_frame()),
                Some((lo, hi)) => (lo.min(t.first_frame()), hi.max(t.last_frame())),
            })
        });
        let frame_range = match (frame_range, span) {
            (Some((lo, hi)), _) if lo > hi => {
                return Err(TrajectoryError::InvalidMetadata(format!(
                    "frame range {lo}..={hi} is empty"
                )))
            }
            (Some(range), _) => range,
            (None, Some(range)) => range,
            (None, None) => (0, 0),
        };
        for t in map.values() {
            for frame in [t.first_frame(), t.last_frame()] {
                if frame < frame_range.0 || frame > frame_range.1 {
                    return Err(TrajectoryError::OutsideFrameRange {
                        object_id: t.object_id.clone(),
                        frame,
                        min: frame_range.0,
                        max: frame_range.1,
                    });
                }
            }
        }
        let centroid = compute_centroid(map.values());
        Ok(Self {
            db_id: db_id.into(),
            frame_range,
            meta,
            trajectories: map,
            centroid,
        })
    }

    pub fn db_id(&self) -> &str {
        &self.db_id
    }

    pub fn frame_range(&self) -> (u32, u32) {
        self.frame_range
    }

    pub fn meta(&self) -> &DatabaseMeta {
        &self.meta
    }

    pub fn complete_tracks(&self) -> bool {
        self.meta.complete_tracks
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.trajectories.contains_key(id)
    }

    /// Trajectories in object-id order.
    pub fn trajectories(&self) -> impl ExactSizeIterator<Item = &Trajectory> {
        self.trajectories.values()
    }

    pub fn object_ids(&self) -> impl ExactSizeIterator<Item = &ObjectId> {
        self.trajectories.keys()
    }

    /// Mean of every sample position in the database.
    pub fn centroid(&self) -> Point3 {
        self.centroid
    }

    /// Re-labels the database under a new id.
    pub fn with_db_id(mut self, db_id: impl Into<String>) -> Self {
        self.db_id = db_id.into();
        self
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

fn compute_centroid<'a>(trajectories: impl Iterator<Item = &'a Trajectory>) -> Point3 {
    let (sum, count) = trajectories
        .flat_map(|t| t.positions())
        .fold((Point3::ORIGIN, 0usize), |(acc, n), p| (acc + p, n + 1));
    if count == 0 {
        Point3::ORIGIN
    } else {
        sum * (1.0 / count as f64)
    }
}

/// A set of object ids drawn from one database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub db_id: String,
    pub ids: BTreeSet<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("selection belongs to database {selection}, not {database}")]
    WrongDatabase { selection: String, database: String },
    #[error("object {0} does not exist in the database")]
    UnknownObject(ObjectId),
}

impl Selection {
    pub fn all(db: &ObjectDatabase) -> Self {
        Self {
            db_id: db.db_id.clone(),
            ids: db.trajectories.keys().cloned().collect(),
        }
    }

    pub fn empty(db: &ObjectDatabase) -> Self {
        Self {
            db_id: db.db_id.clone(),
            ids: BTreeSet::new(),
        }
    }

    pub fn new<I, S>(db: &ObjectDatabase, ids: I) -> Result<Self, SelectionError>
    where
        I: IntoIterator<Item = S>,
        S: Into<ObjectId>,
    {
        let ids: BTreeSet<ObjectId> = ids.into_iter().map(Into::into).collect();
        let selection = Self {
            db_id: db.db_id.clone(),
            ids,
        };
        selection.check(db)?;
        Ok(selection)
    }

    pub fn check(&self, db: &ObjectDatabase) -> Result<(), SelectionError> {
        if self.db_id != db.db_id {
            return Err(SelectionError::WrongDatabase {
                selection: self.db_id.clone(),
                database: db.db_id.clone(),
            });
        }
        match self.ids.iter().find(|id| !db.contains(id)) {
            Some(id) => Err(SelectionError::UnknownObject(id.clone())),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectId> {
        self.ids.iter()
    }
}

// ---------------------------------------------------------------------------
// Ingestion

/// Locates a column either by header name or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl From<&str> for ColumnRef {
    fn from(s: &str) -> Self {
        ColumnRef::Name(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub object_id: ColumnRef,
    pub frame: ColumnRef,
    pub x: ColumnRef,
    pub y: ColumnRef,
    pub z: ColumnRef,
    pub has_header: bool,
    pub delimiter: u8,
}

impl Default for TableSchema {
    fn default() -> Self {
        Self {
            object_id: "object_id".into(),
            frame: "frame".into(),
            x: "x".into(),
            y: "y".into(),
            z: "z".into(),
            has_header: true,
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Database id; derived from the content digest when absent.
    pub db_id: Option<String>,
    /// Accept trajectories that do not span the full frame range.
    pub allow_incomplete: bool,
    pub frame_scale: f64,
    pub vertical_axis: Axis,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            db_id: None,
            allow_incomplete: false,
            frame_scale: 1.0,
            vertical_axis: Axis::Y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    /// 1-based line number in the source table.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedTrajectory {
    pub object_id: ObjectId,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub database: ObjectDatabase,
    pub rejected_rows: Vec<RowDiagnostic>,
    pub excluded: Vec<ExcludedTrajectory>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read table: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0} not found in header")]
    MissingColumn(String),
    #[error("line {line}: cannot parse {column} value {value:?}")]
    Parse {
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("duplicate sample for object {object_id} at frame {frame}")]
    DuplicateFrame { object_id: ObjectId, frame: u32 },
    #[error("{} trajectories do not cover frames {min}..={max} (first: {})", object_ids.len(), object_ids.first().map(String::as_str).unwrap_or(""))]
    IncompleteTracks {
        object_ids: Vec<ObjectId>,
        min: u32,
        max: u32,
    },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Content-derived id of a database's samples; independent of input row order.
pub fn content_id(db: &ObjectDatabase) -> String {
    let mut hasher = Sha256::new();
    for traj in db.trajectories() {
        hasher.update(traj.object_id().as_bytes());
        hasher.update([0u8]);
        for s in traj.samples() {
            hasher.update(s.frame.to_le_bytes());
            for c in s.pos.to_array() {
                hasher.update(c.to_bits().to_le_bytes());
            }
        }
    }
    format!("db-{}", &hex::encode(hasher.finalize())[..16])
}

/// Reads a row-oriented table of `(object_id, frame, x, y, z)` samples.
pub fn ingest_table<R: Read>(
    mut reader: R,
    schema: &TableSchema,
    options: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    ingest_bytes(&bytes, schema, options)
}

pub fn ingest_csv(bytes: &[u8], options: &IngestOptions) -> Result<IngestReport, IngestError> {
    ingest_bytes(bytes, &TableSchema::default(), options)
}

fn ingest_bytes(
    bytes: &[u8],
    schema: &TableSchema,
    options: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .from_reader(bytes);

    let header = if schema.has_header {
        Some(rdr.headers()?.clone())
    } else {
        None
    };
    let resolve = |col: &ColumnRef| -> Result<usize, IngestError> {
        match col {
            ColumnRef::Index(i) => Ok(*i),
            ColumnRef::Name(name) => header
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| IngestError::MissingColumn(name.clone())),
        }
    };
    let cols = [
        resolve(&schema.object_id)?,
        resolve(&schema.frame)?,
        resolve(&schema.x)?,
        resolve(&schema.y)?,
        resolve(&schema.z)?,
    ];

    let mut rows: BTreeMap<ObjectId, BTreeMap<u32, Point3>> = BTreeMap::new();
    let mut rejected_rows = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize, column: &'static str| -> Result<&str, IngestError> {
            record.get(cols[i]).ok_or_else(|| IngestError::Parse {
                line,
                column,
                value: String::new(),
            })
        };
        let object_id = field(0, "object_id")?.to_string();
        let frame_raw = field(1, "frame")?;
        let frame: u32 = frame_raw.parse().map_err(|_| IngestError::Parse {
            line,
            column: "frame",
            value: frame_raw.to_string(),
        })?;
        let mut coords = [0.0; 3];
        for (k, name) in ["x", "y", "z"].into_iter().enumerate() {
            let raw = field(2 + k, name)?;
            coords[k] = raw.parse().map_err(|_| IngestError::Parse {
                line,
                column: name,
                value: raw.to_string(),
            })?;
        }
        let pos = Point3::from_array(coords);
        if !pos.is_finite() {
            rejected_rows.push(RowDiagnostic {
                line,
                message: format!("non-finite coordinate for object {object_id} at frame {frame}"),
            });
            continue;
        }
        if rows
            .entry(object_id.clone())
            .or_default()
            .insert(frame, pos)
            .is_some()
        {
            return Err(IngestError::DuplicateFrame { object_id, frame });
        }
    }

    let mut excluded = Vec::new();
    let mut trajectories = Vec::with_capacity(rows.len());
    for (object_id, samples) in rows {
        if samples.len() < 2 {
            excluded.push(ExcludedTrajectory {
                object_id,
                samples: samples.len(),
            });
            continue;
        }
        let samples = samples
            .into_iter()
            .map(|(frame, pos)| Sample::new(frame, pos))
            .collect();
        trajectories.push(Trajectory::new(object_id, samples)?);
    }

    let meta = DatabaseMeta {
        complete_tracks: !options.allow_incomplete,
        frame_scale: options.frame_scale,
        vertical_axis: options.vertical_axis,
    };
    let database = ObjectDatabase::new("", trajectories, meta)?;
    let db_id = options.db_id.clone().unwrap_or_else(|| content_id(&database));
    let database = database.with_db_id(db_id);
    if database.complete_tracks() {
        let (min, max) = database.frame_range();
        let object_ids: Vec<ObjectId> = database
            .trajectories()
            .filter(|t| !t.covers(min, max))
            .map(|t| t.object_id().to_string())
            .collect();
        if !object_ids.is_empty() {
            return Err(IngestError::IncompleteTracks {
                object_ids,
                min,
                max,
            });
        }
    }
    Ok(IngestReport {
        database,
        rejected_rows,
        excluded,
    })
}

/// Formats a coordinate with at most [`COORDINATE_DIGITS`] significant digits.
pub fn format_coordinate(v: f64) -> String {
    let rounded: f64 = format!("{:.*e}", COORDINATE_DIGITS - 1, v)
        .parse()
        .expect("scientific formatting of a finite float parses");
    format!("{rounded}")
}

/// Writes the canonical table, rows ordered by object id then frame.
pub fn write_csv<W: Write>(db: &ObjectDatabase, writer: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    w.write_record(CANONICAL_HEADER)?;
    for traj in db.trajectories() {
        for s in traj.samples() {
            w.write_record([
                traj.object_id(),
                &s.frame.to_string(),
                &format_coordinate(s.pos.x),
                &format_coordinate(s.pos.y),
                &format_coordinate(s.pos.z),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_bytes(db: &ObjectDatabase) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(db, &mut out).expect("writing to memory cannot fail");
    out
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    TooFewSamples { object_id: ObjectId, samples: usize },
    FrameOrder { object_id: ObjectId, frame: u32 },
    NonFinite { object_id: ObjectId, frame: u32 },
    OutsideFrameRange { object_id: ObjectId, frame: u32 },
    IncompleteTrack {
        object_id: ObjectId,
        first_frame: u32,
        last_frame: u32,
        samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub db_id: String,
    pub object_count: usize,
    pub frame_range: (u32, u32),
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} objects, frames {}..={}, {} violation(s)",
            self.db_id,
            self.object_count,
            self.frame_range.0,
            self.frame_range.1,
            self.violations.len()
        )
    }
}

/// Re-checks every database invariant and lists the violations found.
pub fn validate(db: &ObjectDatabase) -> ValidationReport {
    let (min, max) = db.frame_range();
    let mut violations = Vec::new();
    for t in db.trajectories() {
        let id = || t.object_id().to_string();
        if t.len() < 2 {
            violations.push(Violation::TooFewSamples {
                object_id: id(),
                samples: t.len(),
            });
        }
        for w in t.samples().windows(2) {
            if w[1].frame <= w[0].frame {
                violations.push(Violation::FrameOrder {
                    object_id: id(),
                    frame: w[1].frame,
                });
            }
        }
        for s in t.samples() {
            if !s.pos.is_finite() {
                violations.push(Violation::NonFinite {
                    object_id: id(),
                    frame: s.frame,
                });
            }
            if s.frame < min || s.frame > max {
                violations.push(Violation::OutsideFrameRange {
                    object_id: id(),
                    frame: s.frame,
                });
            }
        }
        if db.complete_tracks() && !t.covers(min, max) {
            violations.push(Violation::IncompleteTrack {
                object_id: id(),
                first_frame: t.first_frame(),
                last_frame: t.last_frame(),
                samples: t.len(),
            });
        }
    }
    ValidationReport {
        db_id: db.db_id().to_string(),
        object_count: db.len(),
        frame_range: db.frame_range(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_rows(rows: &[(&str, u32, f64, f64, f64)]) -> Vec<u8> {
        let mut s = String::from("object_id,frame,x,y,z\n");
        for (id, f, x, y, z) in rows {
            s.push_str(&format!("{id},{f},{x},{y},{z}\n"));
        }
        s.into_bytes()
    }

    #[test]
    fn minimal_table() {
        let bytes = csv_rows(&[("a", 0, 0.0, 0.0, 0.0), ("a", 1, 1.0, 0.0, 0.0), ("a", 2, 2.0, 0.0, 0.0)]);
        let report = ingest_csv(&bytes, &IngestOptions::default()).unwrap();
        assert_eq!(report.database.len(), 1);
        assert_eq!(report.database.frame_range(), (0, 2));
        assert!(report.rejected_rows.is_empty());
        assert!(validate(&report.database).is_valid());
    }

    #[test]
    fn duplicate_frame_is_hard_error() {
        let bytes = csv_rows(&[("a", 0, 0.0, 0.0, 0.0), ("a", 1, 1.0, 0.0, 0.0), ("a", 1, 2.0, 0.0, 0.0)]);
        match ingest_csv(&bytes, &IngestOptions::default()) {
            Err(IngestError::DuplicateFrame { object_id, frame }) => {
                assert_eq!(object_id, "a");
                assert_eq!(frame, 1);
            }
            other => panic!("expected duplicate frame error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_rows_are_rejected_with_diagnostic() {
        let bytes = b"object_id,frame,x,y,z\na,0,0,0,0\na,1,NaN,0,0\na,1,1,0,0\na,2,inf,0,0\na,2,2,0,0\n";
        let report = ingest_csv(bytes, &IngestOptions::default()).unwrap();
        assert_eq!(report.rejected_rows.len(), 2);
        assert_eq!(report.rejected_rows[0].line, 3);
        assert_eq!(report.database.get("a").unwrap().len(), 3);
    }

    #[test]
    fn single_sample_trajectories_are_excluded() {
        let bytes = csv_rows(&[("a", 0, 0.0, 0.0, 0.0), ("a", 1, 1.0, 0.0, 0.0), ("b", 0, 5.0, 5.0, 5.0)]);
        let report = ingest_csv(&bytes, &IngestOptions { allow_incomplete: true, ..Default::default() }).unwrap();
        assert_eq!(report.database.len(), 1);
        assert_eq!(report.excluded, vec![ExcludedTrajectory { object_id: "b".into(), samples: 1 }]);
    }

    #[test]
    fn incomplete_tracks_need_the_flag() {
        let bytes = csv_rows(&[
            ("a", 0, 0.0, 0.0, 0.0),
            ("a", 1, 1.0, 0.0, 0.0),
            ("a", 2, 2.0, 0.0, 0.0),
            ("b", 1, 0.0, 1.0, 0.0),
            ("b", 2, 0.0, 2.0, 0.0),
        ]);
        assert!(matches!(
            ingest_csv(&bytes, &IngestOptions::default()),
            Err(IngestError::IncompleteTracks { ref object_ids, .. }) if object_ids == &["b".to_string()]
        ));
        let report = ingest_csv(&bytes, &IngestOptions { allow_incomplete: true, ..Default::default() }).unwrap();
        assert!(!report.database.complete_tracks());
        assert!(validate(&report.database).is_valid());
    }

    #[test]
    fn validate_flags_short_track_under_complete_contract() {
        let a = Trajectory::from_positions("a", 0, (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0))).unwrap();
        let b = Trajectory::from_positions("b", 0, (0..3).map(|i| Point3::new(0.0, i as f64, 0.0))).unwrap();
        let db = ObjectDatabase::new("t", vec![a, b], DatabaseMeta::default()).unwrap();
        let report = validate(&db);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(&report.violations[0], Violation::IncompleteTrack { object_id, .. } if object_id == "b"));
    }

    #[test]
    fn empty_database_reports_zero_objects() {
        let db = ObjectDatabase::new("empty", vec![], DatabaseMeta::default()).unwrap();
        let report = validate(&db);
        assert!(report.is_valid());
        assert!(report.to_string().contains("0 objects"));
    }

    #[test]
    fn schema_by_position_without_header() {
        let bytes = b"1.0;2.0;3.0;7;obj\n4.0;5.0;6.0;8;obj\n";
        let schema = TableSchema {
            object_id: ColumnRef::Index(4),
            frame: ColumnRef::Index(3),
            x: ColumnRef::Index(0),
            y: ColumnRef::Index(1),
            z: ColumnRef::Index(2),
            has_header: false,
            delimiter: b';',
        };
        let report = ingest_table(&bytes[..], &schema, &IngestOptions::default()).unwrap();
        let t = report.database.get("obj").unwrap();
        assert_eq!(t.first(), Sample::new(7, Point3::new(1.0, 2.0, 3.0)));
        assert_eq!(report.database.frame_range(), (7, 8));
    }

    #[test]
    fn missing_column_is_reported() {
        let bytes = b"id,frame,x,y,z\na,0,0,0,0\n";
        assert!(matches!(
            ingest_csv(bytes, &IngestOptions::default()),
            Err(IngestError::MissingColumn(c)) if c == "object_id"
        ));
    }

    #[test]
    fn trajectory_constructor_enforces_invariants() {
        let p = Point3::ORIGIN;
        assert!(Trajectory::new("a", vec![Sample::new(0, p)]).is_err());
        assert!(Trajectory::new("a", vec![Sample::new(1, p), Sample::new(1, p)]).is_err());
        assert!(Trajectory::new("a", vec![Sample::new(0, p), Sample::new(1, Point3::new(f64::NAN, 0.0, 0.0))]).is_err());
    }

    #[test]
    fn coordinate_formatting_keeps_nine_digits() {
        assert_eq!(format_coordinate(1.0), "1");
        assert_eq!(format_coordinate(0.123456789123), "0.123456789");
        assert_eq!(format_coordinate(-12345.6789012), "-12345.6789");
    }

    #[test]
    fn json_round_trip() {
        let a = Trajectory::from_positions("a", 3, (0..4).map(|i| Point3::new(i as f64, 0.5, -1.0))).unwrap();
        let db = ObjectDatabase::new("j", vec![a], DatabaseMeta::default()).unwrap();
        let back = ObjectDatabase::from_json(&db.to_json().unwrap()).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.centroid(), db.centroid());
    }
}
