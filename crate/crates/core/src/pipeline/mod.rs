//! Recorded, replayable knowledge-discovery pipelines.
//!
//! A [`Session`] applies steps one at a time to a [`Grouping`] and records them
//! in a [`PipelineRecord`]; [`replay`] runs a record on any database.

mod example;
mod grouping;
mod record;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use example::{example_labels_from_truth, example_pipeline, example_projection, EXAMPLE_PROJECTION_ANGLE_DEG};
pub use grouping::{ClusterFamily, ClusterRun, Grouping, GroupingView, StepReport, StepStatus, Tag};
pub use record::{
    apply_overrides, insert_step, ClusterOutput, Input, PipelineRecord, Step, StepKind, StepOverride,
    RECORD_FORMAT_VERSION,
};

use crate::fcm::{hard_assign, FcmError};
use crate::features::FeatureError;
use crate::filters::FilterError;
use crate::kdb::KnowledgeDatabase;
use crate::trajectory::{ObjectDatabase, ObjectId};

/// Why a single step could not run against the current grouping.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("group {0} does not exist")]
    UnknownGroup(String),
    #[error("group {0} is not a leaf")]
    NotALeaf(String),
    #[error("input {0} is empty")]
    EmptyInput(String),
    #[error("group {path} would clash with existing group {existing}")]
    NameCollision { path: String, existing: String },
    #[error("group {0} has no remaining sibling cluster to absorb its members")]
    NoRedistributionTarget(String),
    #[error("partition broken; objects without a placement: {0:?}")]
    PartitionBroken(Vec<ObjectId>),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Fcm(#[from] FcmError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("step {step_id}: {source}")]
    Step {
        step_id: String,
        #[source]
        source: StepError,
    },
    #[error("step {step_id}: {message}")]
    InvalidStep { step_id: String, message: String },
    #[error("step {step_id} reads group {group}, which no earlier step produces")]
    BrokenReference { step_id: String, group: String },
    #[error("duplicate step id {0}")]
    DuplicateStepId(String),
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("override: {0}")]
    Override(String),
    #[error("record: {0}")]
    Format(String),
}

impl PipelineError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Step { source, .. } => match source {
                StepError::UnknownGroup(_) => "unknown_group",
                StepError::NotALeaf(_) => "not_a_leaf",
                StepError::EmptyInput(_) => "empty_input",
                StepError::NameCollision { .. } => "name_collision",
                StepError::NoRedistributionTarget(_) => "no_redistribution_target",
                StepError::PartitionBroken(_) => "partition_broken",
                StepError::Invalid(_) => "invalid_step",
                StepError::Filter(_) => "filter_error",
                StepError::Feature(_) => "feature_error",
                StepError::Fcm(_) => "clustering_error",
            },
            PipelineError::InvalidStep { .. } => "invalid_step",
            PipelineError::BrokenReference { .. } => "broken_reference",
            PipelineError::DuplicateStepId(_) => "duplicate_step_id",
            PipelineError::NothingToUndo => "nothing_to_undo",
            PipelineError::Override(_) => "invalid_override",
            PipelineError::Format(_) => "invalid_record",
        }
    }
}

/// How manual-label steps behave on replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManualPolicy {
    /// Stored labels apply where object ids match; other members become unassigned.
    #[default]
    ById,
    /// The step's input group is left unassigned for interactive completion.
    Pending,
}

/// Cluster summary returned by previews.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub name: String,
    pub size: usize,
    /// Mean membership of the hard-assigned members.
    pub mean_membership: f64,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPreview {
    pub labels: BTreeMap<ObjectId, String>,
    pub clusters: Vec<ClusterSummary>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&ClusterRun> for ClusterPreview {
    fn from(run: &ClusterRun) -> Self {
        let labels = hard_assign(&run.partition);
        let c = run.names.len();
        let mut sizes = vec![0usize; c];
        let mut sums = vec![0.0; c];
        for (row, &k) in labels.iter().enumerate() {
            sizes[k] += 1;
            sums[k] += run.partition.memberships[[row, k]];
        }
        ClusterPreview {
            labels: run
                .object_ids
                .iter()
                .zip(&labels)
                .map(|(id, &k)| (id.clone(), run.names[k].clone()))
                .collect(),
            clusters: (0..c)
                .map(|k| ClusterSummary {
                    name: run.names[k].clone(),
                    size: sizes[k],
                    mean_membership: if sizes[k] > 0 { sums[k] / sizes[k] as f64 } else { 0.0 },
                    center: run.partition.centers.row(k).to_vec(),
                })
                .collect(),
            objective: run.partition.objective(),
            iterations: run.partition.iterations,
            converged: run.partition.converged,
        }
    }
}

/// What a step would do, computed without touching the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPreview {
    /// Session revision the preview was computed against.
    pub revision: u64,
    pub report: StepReport,
    pub grouping: GroupingView,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterPreview>,
}

/// An interactive session over one database.
#[derive(Debug, Clone)]
pub struct Session {
    db: Arc<ObjectDatabase>,
    record: PipelineRecord,
    grouping: Grouping,
    revision: u64,
}

impl Session {
    pub fn new(db: Arc<ObjectDatabase>) -> Self {
        let grouping = Grouping::new(&db);
        let record = PipelineRecord::new(db.db_id());
        Session {
            db,
            record,
            grouping,
            revision: 0,
        }
    }

    /// Rebuilds a session by committing every step of `record` in order.
    pub fn from_record(db: Arc<ObjectDatabase>, record: &PipelineRecord) -> Result<Self, PipelineError> {
        record.validate()?;
        let mut session = Session::new(db);
        for step in &record.steps {
            session.commit(step.clone())?;
        }
        Ok(session)
    }

    /// Like [`Session::from_record`], keeping a revision counter persisted earlier.
    pub fn restore(db: Arc<ObjectDatabase>, record: &PipelineRecord, revision: u64) -> Result<Self, PipelineError> {
        let mut session = Self::from_record(db, record)?;
        session.revision = session.revision.max(revision);
        Ok(session)
    }

    pub fn db(&self) -> &Arc<ObjectDatabase> {
        &self.db
    }

    pub fn record(&self) -> &PipelineRecord {
        &self.record
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }

    /// Incremented by every commit and undo.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Fills in the id and normalization and checks the step against the record.
    fn prepare(&self, mut step: Step) -> Result<Step, PipelineError> {
        if step.id.is_empty() {
            step.id = self.record.next_step_id();
        }
        step.resolve();
        insert_step(&self.record, self.record.steps.len(), step.clone())?;
        Ok(step)
    }

    pub fn preview(&self, step: Step) -> Result<StepPreview, PipelineError> {
        let step = self.prepare(step)?;
        let mut scratch = self.grouping.clone();
        let outcome = scratch
            .apply(&self.db, &step, ManualPolicy::ById)
            .map_err(|source| PipelineError::Step {
                step_id: step.id.clone(),
                source,
            })?;
        Ok(StepPreview {
            revision: self.revision,
            report: outcome.report,
            grouping: scratch.view(),
            cluster: outcome.cluster.as_ref().map(ClusterPreview::from),
        })
    }

    /// Applies and records a step; nothing changes on error.
    pub fn commit(&mut self, step: Step) -> Result<StepReport, PipelineError> {
        let step = self.prepare(step)?;
        let outcome = self
            .grouping
            .apply(&self.db, &step, ManualPolicy::ById)
            .map_err(|source| PipelineError::Step {
                step_id: step.id.clone(),
                source,
            })?;
        self.record.steps.push(step);
        self.revision += 1;
        Ok(outcome.report)
    }

    /// Drops the last step and recomputes the grouping from the remaining ones.
    pub fn undo(&mut self) -> Result<Step, PipelineError> {
        let last = self.record.steps.pop().ok_or(PipelineError::NothingToUndo)?;
        let mut grouping = Grouping::new(&self.db);
        for step in &self.record.steps {
            grouping
                .apply(&self.db, step, ManualPolicy::ById)
                .map_err(|source| PipelineError::Step {
                    step_id: step.id.clone(),
                    source,
                })?;
        }
        self.grouping = grouping;
        self.revision += 1;
        Ok(last)
    }

    pub fn finalize(&self) -> KnowledgeDatabase {
        self.grouping.to_kdb(self.db.db_id(), &self.record.digest())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    #[serde(default)]
    pub overrides: Vec<StepOverride>,
    #[serde(default)]
    pub manual_policy: ManualPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub db_id: String,
    pub pipeline_hash: String,
    pub steps: Vec<StepReport>,
}

impl ReplayReport {
    pub fn skipped(&self) -> impl Iterator<Item = &StepReport> {
        self.steps.iter().filter(|s| s.status == StepStatus::Skipped)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub kdb: KnowledgeDatabase,
    pub report: ReplayReport,
    /// The record after overrides; its digest is the kdb's pipeline hash.
    pub record: PipelineRecord,
}

/// Runs `record` on `db`. Steps that cannot run are skipped and reported.
pub fn replay(record: &PipelineRecord, db: &ObjectDatabase, options: &ReplayOptions) -> Result<ReplayOutput, PipelineError> {
    let record = apply_overrides(record, &options.overrides)?;
    record.validate()?;
    let mut grouping = Grouping::new(db);
    let mut steps = Vec::with_capacity(record.steps.len());
    for step in &record.steps {
        let report = match grouping.apply(db, step, options.manual_policy) {
            Ok(outcome) => outcome.report,
            Err(e) => StepReport::skipped(step, e.to_string()),
        };
        steps.push(report);
    }
    let hash = record.digest();
    Ok(ReplayOutput {
        kdb: grouping.to_kdb(db.db_id(), &hash),
        report: ReplayReport {
            db_id: db.db_id().to_string(),
            pipeline_hash: hash,
            steps,
        },
        record,
    })
}
