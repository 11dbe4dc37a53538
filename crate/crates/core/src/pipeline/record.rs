use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::fcm::FcmConfig;
use crate::features::{resolve_normalization, FeatureSpec};
use crate::filters::FilterSpec;
use crate::kdb::{valid_group_name, valid_group_path, UNASSIGNED_TOKEN};
use crate::trajectory::ObjectId;

pub const RECORD_FORMAT_VERSION: u32 = 1;

/// What a step operates on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Input {
    /// Objects not yet placed in any group (the whole database on a fresh session).
    Unassigned,
    /// A group and all its descendants.
    Group(String),
}

impl Input {
    pub fn group(path: impl Into<String>) -> Self {
        Input::Group(path.into())
    }

    /// Prefix for groups created under this input; empty at the top level.
    pub fn base(&self) -> &str {
        match self {
            Input::Unassigned => "",
            Input::Group(p) => p,
        }
    }
}

impl fmt::Display for Input {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Input::Unassigned => f.write_str(UNASSIGNED_TOKEN),
            Input::Group(p) => f.write_str(p),
        }
    }
}

impl From<Input> for String {
    fn from(i: Input) -> String {
        i.to_string()
    }
}

impl TryFrom<String> for Input {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == UNASSIGNED_TOKEN {
            Ok(Input::Unassigned)
        } else if valid_group_path(&s) {
            Ok(Input::Group(s))
        } else {
            Err(format!("invalid group reference {s:?}"))
        }
    }
}

pub(crate) fn child_path(base: &str, name: &str) -> String {
    if base.is_empty() {
        name.to_string()
    } else {
        format!("{base}/{name}")
    }
}

/// How cluster results are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterOutput {
    /// Members move into one child group per cluster.
    #[default]
    Subgroups,
    /// Members stay where they are and carry the cluster name as a side tag;
    /// the tag is spliced into the group path below the input group at finalize.
    Tag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StepKind {
    Filter {
        input: Input,
        filter: FilterSpec,
        /// Child group for passing objects; `None` leaves them in place.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<String>,
        /// Child group for failing objects; `None` sends them to unassigned.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rejected_group: Option<String>,
    },
    Cluster {
        input: Input,
        features: Vec<FeatureSpec>,
        config: FcmConfig,
        /// One name per cluster in canonical center order; empty means `c0..`.
        #[serde(default)]
        names: Vec<String>,
        #[serde(default)]
        output: ClusterOutput,
    },
    ManualLabel {
        input: Input,
        labels: BTreeMap<ObjectId, String>,
        /// Group for unlabeled members; `None` sends them to unassigned.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default_group: Option<String>,
    },
    Merge {
        groups: Vec<String>,
        name: String,
    },
    SplitRecluster {
        group: String,
        features: Vec<FeatureSpec>,
        config: FcmConfig,
        #[serde(default)]
        names: Vec<String>,
    },
    /// Spreads members over the nearest remaining sibling clusters.
    Dissolve {
        group: String,
    },
    Exclude {
        groups: Vec<String>,
    },
}

impl StepKind {
    pub fn is_modification(&self) -> bool {
        matches!(
            self,
            StepKind::Merge { .. } | StepKind::SplitRecluster { .. } | StepKind::Dissolve { .. } | StepKind::Exclude { .. }
        )
    }

    pub fn op_name(&self) -> &'static str {
        match self {
            StepKind::Filter { .. } => "filter",
            StepKind::Cluster { .. } => "cluster",
            StepKind::ManualLabel { .. } => "manual_label",
            StepKind::Merge { .. } => "merge",
            StepKind::SplitRecluster { .. } => "split_recluster",
            StepKind::Dissolve { .. } => "dissolve",
            StepKind::Exclude { .. } => "exclude",
        }
    }

    /// Group references read by this step.
    pub fn references(&self) -> Vec<String> {
        match self {
            StepKind::Filter { input, .. } | StepKind::Cluster { input, .. } | StepKind::ManualLabel { input, .. } => {
                match input {
                    Input::Unassigned => vec![],
                    Input::Group(p) => vec![p.clone()],
                }
            }
            StepKind::Merge { groups, .. } | StepKind::Exclude { groups } => groups.clone(),
            StepKind::SplitRecluster { group, .. } | StepKind::Dissolve { group } => vec![group.clone()],
        }
    }

    /// Paths this step may create, and paths it removes.
    fn effects(&self) -> (Vec<String>, Vec<String>) {
        let names_or_default = |names: &[String], c: usize| -> Vec<String> {
            if names.is_empty() {
                (0..c).map(|k| format!("c{k}")).collect()
            } else {
                names.to_vec()
            }
        };
        match self {
            StepKind::Filter {
                input,
                output,
                rejected_group,
                ..
            } => (
                output
                    .iter()
                    .chain(rejected_group.iter())
                    .map(|n| child_path(input.base(), n))
                    .collect(),
                vec![],
            ),
            StepKind::Cluster {
                input,
                config,
                names,
                output,
                ..
            } => match output {
                ClusterOutput::Tag => (vec![], vec![]),
                ClusterOutput::Subgroups => (
                    names_or_default(names, config.clusters)
                        .iter()
                        .map(|n| child_path(input.base(), n))
                        .collect(),
                    vec![],
                ),
            },
            StepKind::ManualLabel {
                input,
                labels,
                default_group,
            } => {
                let names: BTreeSet<&String> = labels.values().chain(default_group.iter()).collect();
                (names.into_iter().map(|n| child_path(input.base(), n)).collect(), vec![])
            }
            StepKind::Merge { groups, name } => (vec![child_path(&common_parent(groups), name)], groups.clone()),
            StepKind::SplitRecluster {
                group, config, names, ..
            } => (
                names_or_default(names, config.clusters)
                    .iter()
                    .map(|n| child_path(group, n))
                    .collect(),
                vec![],
            ),
            StepKind::Dissolve { group } => (vec![], vec![group.clone()]),
            StepKind::Exclude { groups } => (vec![], groups.clone()),
        }
    }

    /// Names introduced by the step, for syntax checks.
    fn new_names(&self) -> Vec<&String> {
        match self {
            StepKind::Filter {
                output, rejected_group, ..
            } => output.iter().chain(rejected_group.iter()).collect(),
            StepKind::Cluster { names, .. } | StepKind::SplitRecluster { names, .. } => names.iter().collect(),
            StepKind::ManualLabel {
                labels, default_group, ..
            } => labels.values().chain(default_group.iter()).collect(),
            StepKind::Merge { name, .. } => vec![name],
            StepKind::Dissolve { .. } | StepKind::Exclude { .. } => vec![],
        }
    }
}

/// Longest shared parent path of the given groups; empty at the top level.
pub(crate) fn common_parent(groups: &[String]) -> String {
    let parents: Vec<Vec<&str>> = groups
        .iter()
        .map(|g| {
            let mut segs: Vec<&str> = g.split('/').collect();
            segs.pop();
            segs
        })
        .collect();
    let Some(first) = parents.first() else {
        return String::new();
    };
    let mut len = first.len();
    for p in &parents[1..] {
        len = len.min(p.len());
        len = (0..len).find(|&i| p[i] != first[i]).unwrap_or(len);
    }
    first[..len].join("/")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub id: String,
    /// Free-text problem formulation for this step.
    #[serde(default)]
    pub annotation: String,
    pub action: StepKind,
}

impl Step {
    pub fn new(id: impl Into<String>, action: StepKind) -> Self {
        Step {
            id: id.into(),
            annotation: String::new(),
            action,
        }
    }

    pub fn annotated(mut self, text: impl Into<String>) -> Self {
        self.annotation = text.into();
        self
    }

    /// Fills in automatic feature normalization so the record replays exactly.
    pub(crate) fn resolve(&mut self) {
        match &mut self.action {
            StepKind::Cluster { features, .. } | StepKind::SplitRecluster { features, .. } => {
                *features = resolve_normalization(features);
            }
            _ => {}
        }
    }

    /// Syntax checks that do not need a grouping.
    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |message: String| PipelineError::InvalidStep {
            step_id: self.id.clone(),
            message,
        };
        if !valid_group_name(&self.id) {
            return Err(bad(format!("invalid step id {:?}", self.id)));
        }
        for name in self.action.new_names() {
            if !valid_group_name(name) {
                return Err(bad(format!("invalid group name {name:?}")));
            }
        }
        for r in self.action.references() {
            if !valid_group_path(&r) {
                return Err(bad(format!("invalid group reference {r:?}")));
            }
        }
        match &self.action {
            StepKind::Filter { filter, .. } => filter.validate().map_err(|e| bad(e.to_string()))?,
            StepKind::Cluster {
                features, config, names, ..
            }
            | StepKind::SplitRecluster {
                features, config, names, ..
            } => {
                config.validate().map_err(|e| bad(e.to_string()))?;
                if features.is_empty() {
                    return Err(bad("clustering needs at least one feature".into()));
                }
                for f in features {
                    f.validate().map_err(|e| bad(e.to_string()))?;
                }
                if !names.is_empty() && names.len() != config.clusters {
                    return Err(bad(format!(
                        "{} output names for {} clusters",
                        names.len(),
                        config.clusters
                    )));
                }
                let unique: BTreeSet<&String> = names.iter().collect();
                if unique.len() != names.len() {
                    return Err(bad("output names must be distinct".into()));
                }
            }
            StepKind::Merge { groups, .. } | StepKind::Exclude { groups } if groups.is_empty() => {
                return Err(bad("no groups named".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub format_version: u32,
    pub source_db_id: String,
    pub steps: Vec<Step>,
}

impl PipelineRecord {
    pub fn new(source_db_id: impl Into<String>) -> Self {
        PipelineRecord {
            format_version: RECORD_FORMAT_VERSION,
            source_db_id: source_db_id.into(),
            steps: Vec::new(),
        }
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("records always serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("records always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let record: PipelineRecord = serde_json::from_str(s).map_err(|e| PipelineError::Format(e.to_string()))?;
        if record.format_version != RECORD_FORMAT_VERSION {
            return Err(PipelineError::Format(format!(
                "unsupported record format version {}",
                record.format_version
            )));
        }
        Ok(record)
    }

    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.id == id)
    }

    /// First unused id of the form `s<k>`.
    pub fn next_step_id(&self) -> String {
        (self.steps.len() + 1..)
            .map(|k| format!("s{k}"))
            .find(|id| self.step(id).is_none())
            .expect("unbounded search")
    }

    /// Static consistency: unique ids, valid steps, and every reference produced earlier.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut ids = BTreeSet::new();
        let mut known: BTreeSet<String> = BTreeSet::new();
        for step in &self.steps {
            step.check()?;
            if !ids.insert(step.id.as_str()) {
                return Err(PipelineError::DuplicateStepId(step.id.clone()));
            }
            for r in step.action.references() {
                if !known.contains(&r) {
                    return Err(PipelineError::BrokenReference {
                        step_id: step.id.clone(),
                        group: r,
                    });
                }
            }
            let (created, removed) = step.action.effects();
            for r in removed {
                known.retain(|k| k != &r && !k.starts_with(&format!("{r}/")));
            }
            for path in created {
                let segs: Vec<&str> = path.split('/').collect();
                for i in 1..=segs.len() {
                    known.insert(segs[..i].join("/"));
                }
            }
        }
        Ok(())
    }
}

/// Inserts `step` at `position` and revalidates the whole record.
pub fn insert_step(record: &PipelineRecord, position: usize, mut step: Step) -> Result<PipelineRecord, PipelineError> {
    if position > record.steps.len() {
        return Err(PipelineError::InvalidStep {
            step_id: step.id.clone(),
            message: format!("position {position} is past the end ({} steps)", record.steps.len()),
        });
    }
    if step.id.is_empty() {
        step.id = record.next_step_id();
    }
    step.resolve();
    let mut out = record.clone();
    out.steps.insert(position, step);
    out.validate()?;
    Ok(out)
}

/// A parameter patch applied to one step before replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOverride {
    pub step_id: String,
    /// Dot-separated path into the step's action; numeric segments index arrays.
    pub path: String,
    pub value: Value,
}

impl StepOverride {
    /// Parses `step=path:value`; the value is JSON when it parses, else a string.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let err = || PipelineError::Override(format!("expected step=path:value, got {text:?}"));
        let (step_id, rest) = text.split_once('=').ok_or_else(err)?;
        let (path, raw) = rest.split_once(':').ok_or_else(err)?;
        if step_id.is_empty() || path.is_empty() {
            return Err(err());
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(StepOverride {
            step_id: step_id.to_string(),
            path: path.to_string(),
            value,
        })
    }
}

/// Applies overrides to a copy of `record`; only existing keys may be patched.
pub fn apply_overrides(record: &PipelineRecord, overrides: &[StepOverride]) -> Result<PipelineRecord, PipelineError> {
    let mut out = record.clone();
    for o in overrides {
        let step = out
            .steps
            .iter_mut()
            .find(|s| s.id == o.step_id)
            .ok_or_else(|| PipelineError::Override(format!("no step {}", o.step_id)))?;
        let mut action = serde_json::to_value(&step.action).expect("actions serialize");
        let mut slot = &mut action;
        for seg in o.path.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(seg),
                Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| PipelineError::Override(format!("step {} has no parameter {}", o.step_id, o.path)))?;
        }
        *slot = o.value.clone();
        step.action = serde_json::from_value(action)
            .map_err(|e| PipelineError::Override(format!("step {}: {e}", o.step_id)))?;
    }
    Ok(out)
}
