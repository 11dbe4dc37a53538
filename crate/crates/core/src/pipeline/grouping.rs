use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::record::{child_path, common_parent, ClusterOutput, Input, Step, StepKind};
use super::{ManualPolicy, StepError};
use crate::fcm::{fit_matrix, hard_assign, FcmConfig, FuzzyPartition};
use crate::features::{build_feature_matrix, build_with_normalization, ColumnNormalization, FeatureSpec};
use crate::filters::apply_filter;
use crate::kdb::{KnowledgeDatabase, Placement, UNASSIGNED_TOKEN};
use crate::trajectory::{ObjectDatabase, ObjectId, Selection};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tag {
    /// Group below which the tag is spliced into the path.
    pub scope: String,
    pub name: String,
}

/// Sibling groups produced by one clustering, with their centers in the
/// feature space of that clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFamily {
    pub step_id: String,
    pub features: Vec<FeatureSpec>,
    pub normalization: Vec<ColumnNormalization>,
    pub centers: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Applied,
    Skipped,
    /// Manual step left for interactive completion.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_id: String,
    pub op: String,
    pub status: StepStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub input_size: usize,
    /// Destination label → number of input objects sent there.
    pub outputs: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmatched_labels: Vec<ObjectId>,
}

impl StepReport {
    pub(crate) fn skipped(step: &Step, reason: String) -> Self {
        StepReport {
            step_id: step.id.clone(),
            op: step.action.op_name().to_string(),
            status: StepStatus::Skipped,
            reason: Some(reason),
            input_size: 0,
            outputs: BTreeMap::new(),
            unmatched_labels: Vec::new(),
        }
    }
}

/// Clustering details kept for previews.
#[derive(Debug, Clone)]
pub struct ClusterRun {
    pub object_ids: Vec<ObjectId>,
    pub names: Vec<String>,
    pub partition: FuzzyPartition,
}

pub(crate) struct StepOutcome {
    pub report: StepReport,
    pub cluster: Option<ClusterRun>,
}

/// The evolving placement of every object during a session.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    placement: BTreeMap<ObjectId, Placement>,
    provenance: BTreeMap<ObjectId, String>,
    tags: BTreeMap<ObjectId, Vec<Tag>>,
    families: Vec<ClusterFamily>,
}

/// Serializable snapshot of a grouping, before tags are spliced in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingView {
    pub groups: BTreeMap<String, Vec<ObjectId>>,
    pub excluded: Vec<ObjectId>,
    pub unassigned: Vec<ObjectId>,
    /// Tag scope → tag name → member count.
    pub tags: BTreeMap<String, BTreeMap<String, usize>>,
}

fn under(path: &str, prefix: &str) -> bool {
    path == prefix || (path.len() > prefix.len() && path.starts_with(prefix) && path.as_bytes()[prefix.len()] == b'/')
}

fn names_for(names: &[String], clusters: usize) -> Vec<String> {
    if names.is_empty() {
        (0..clusters).map(|k| format!("c{k}")).collect()
    } else {
        names.to_vec()
    }
}

impl Grouping {
    /// Everything unassigned.
    pub fn new(db: &ObjectDatabase) -> Self {
        Grouping {
            placement: db.object_ids().map(|id| (id.clone(), Placement::Unassigned)).collect(),
            provenance: BTreeMap::new(),
            tags: BTreeMap::new(),
            families: Vec::new(),
        }
    }

    pub fn placement(&self, id: &str) -> Option<&Placement> {
        self.placement.get(id)
    }

    pub fn provenance(&self, id: &str) -> Option<&str> {
        self.provenance.get(id).map(String::as_str)
    }

    pub fn tags(&self, id: &str) -> &[Tag] {
        self.tags.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn families(&self) -> &[ClusterFamily] {
        &self.families
    }

    /// Members of an input: unassigned objects, or a group with its descendants.
    pub fn members(&self, input: &Input) -> BTreeSet<ObjectId> {
        self.placement
            .iter()
            .filter(|(_, p)| match (input, p) {
                (Input::Unassigned, Placement::Unassigned) => true,
                (Input::Group(g), Placement::Group(q)) => under(q, g),
                _ => false,
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Leaf group sizes.
    pub fn leaves(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.placement.values() {
            if let Placement::Group(g) = p {
                *out.entry(g.clone()).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn group_exists(&self, path: &str) -> bool {
        self.placement
            .values()
            .any(|p| matches!(p, Placement::Group(q) if under(q, path)))
    }

    pub fn is_leaf(&self, path: &str) -> bool {
        let mut exact = false;
        for p in self.placement.values() {
            if let Placement::Group(q) = p {
                if q == path {
                    exact = true;
                } else if under(q, path) {
                    return false;
                }
            }
        }
        exact
    }

    fn place(&mut self, id: &ObjectId, to: Placement, step_id: &str) {
        let slot = self.placement.get_mut(id).expect("members come from the grouping");
        if *slot != to {
            *slot = to;
            self.provenance.insert(id.clone(), step_id.to_string());
        }
    }

    pub fn view(&self) -> GroupingView {
        let mut view = GroupingView {
            groups: BTreeMap::new(),
            excluded: Vec::new(),
            unassigned: Vec::new(),
            tags: BTreeMap::new(),
        };
        for (id, p) in &self.placement {
            match p {
                Placement::Group(g) => view.groups.entry(g.clone()).or_default().push(id.clone()),
                Placement::Excluded => view.excluded.push(id.clone()),
                Placement::Unassigned => view.unassigned.push(id.clone()),
            }
        }
        for tags in self.tags.values() {
            for t in tags {
                *view.tags.entry(t.scope.clone()).or_default().entry(t.name.clone()).or_insert(0) += 1;
            }
        }
        view
    }

    /// Final leaf path of an object with side tags spliced in below their scopes.
    fn tagged_path(&self, id: &str, path: &str) -> String {
        let mut tags: Vec<&Tag> = self.tags(id).iter().filter(|t| under(path, &t.scope)).collect();
        // deepest scope first so shallower insert positions stay valid
        tags.sort_by(|a, b| b.scope.len().cmp(&a.scope.len()));
        let mut out = path.to_string();
        for t in tags {
            out.insert_str(t.scope.len(), &format!("/{}", t.name));
        }
        out
    }

    pub fn to_kdb(&self, db_id: &str, pipeline_hash: &str) -> KnowledgeDatabase {
        let mut kdb = KnowledgeDatabase::new(db_id, pipeline_hash);
        for (id, p) in &self.placement {
            let placement = match p {
                Placement::Group(g) => Placement::Group(self.tagged_path(id, g)),
                other => other.clone(),
            };
            kdb.insert(id.clone(), placement, self.provenance.get(id).cloned());
        }
        kdb
    }

    fn check_partition(&self, db: &ObjectDatabase) -> Result<(), StepError> {
        let missing: Vec<ObjectId> = db
            .object_ids()
            .filter(|id| !self.placement.contains_key(*id))
            .cloned()
            .collect();
        if missing.is_empty() && self.placement.len() == db.len() {
            Ok(())
        } else {
            Err(StepError::PartitionBroken(missing))
        }
    }

    /// New paths must not coincide with, contain, or sit below groups of unmoved objects.
    fn check_new_paths<'a>(
        &self,
        moved: &BTreeSet<ObjectId>,
        new_paths: impl IntoIterator<Item = &'a String>,
    ) -> Result<(), StepError> {
        let existing: BTreeSet<&String> = self
            .placement
            .iter()
            .filter(|(id, _)| !moved.contains(*id))
            .filter_map(|(_, p)| match p {
                Placement::Group(g) => Some(g),
                _ => None,
            })
            .collect();
        for path in new_paths {
            if let Some(clash) = existing.iter().find(|q| under(q, path) || under(path, q)) {
                return Err(StepError::NameCollision {
                    path: path.clone(),
                    existing: (*clash).clone(),
                });
            }
        }
        Ok(())
    }

    fn require_leaf(&self, path: &str) -> Result<(), StepError> {
        if self.is_leaf(path) {
            Ok(())
        } else if self.group_exists(path) {
            Err(StepError::NotALeaf(path.to_string()))
        } else {
            Err(StepError::UnknownGroup(path.to_string()))
        }
    }

    fn input_members(&self, input: &Input) -> Result<BTreeSet<ObjectId>, StepError> {
        if let Input::Group(g) = input {
            if !self.group_exists(g) {
                return Err(StepError::UnknownGroup(g.clone()));
            }
        }
        let members = self.members(input);
        if members.is_empty() {
            return Err(StepError::EmptyInput(input.to_string()));
        }
        Ok(members)
    }

    fn drop_from_families(&mut self, path: &str) {
        for f in &mut self.families {
            f.centers.remove(path);
        }
        self.families.retain(|f| !f.centers.is_empty());
    }

    /// Runs one step; on error the grouping is left untouched.
    pub(crate) fn apply(&mut self, db: &ObjectDatabase, step: &Step, policy: ManualPolicy) -> Result<StepOutcome, StepError> {
        let mut next = self.clone();
        let outcome = next.apply_in_place(db, step, policy)?;
        next.check_partition(db)?;
        *self = next;
        Ok(outcome)
    }

    fn apply_in_place(&mut self, db: &ObjectDatabase, step: &Step, policy: ManualPolicy) -> Result<StepOutcome, StepError> {
        let mut report = StepReport {
            step_id: step.id.clone(),
            op: step.action.op_name().to_string(),
            status: StepStatus::Applied,
            reason: None,
            input_size: 0,
            outputs: BTreeMap::new(),
            unmatched_labels: Vec::new(),
        };
        let mut cluster = None;
        let count = |report: &mut StepReport, label: &str| *report.outputs.entry(label.to_string()).or_insert(0) += 1;

        match &step.action {
            StepKind::Filter {
                input,
                filter,
                output,
                rejected_group,
            } => {
                let members = self.input_members(input)?;
                report.input_size = members.len();
                let selection = Selection {
                    db_id: db.db_id().to_string(),
                    ids: members.clone(),
                };
                let kept = apply_filter(db, &selection, filter)?;
                let pass_to = output.as_ref().map(|o| Placement::Group(child_path(input.base(), o)));
                let fail_to = rejected_group
                    .as_ref()
                    .map(|r| Placement::Group(child_path(input.base(), r)))
                    .unwrap_or(Placement::Unassigned);
                let new_paths: Vec<String> = pass_to
                    .iter()
                    .chain(std::iter::once(&fail_to))
                    .filter_map(|p| match p {
                        Placement::Group(g) => Some(g.clone()),
                        _ => None,
                    })
                    .collect();
                self.check_new_paths(&members, &new_paths)?;
                for id in &members {
                    let to = if kept.contains(id) {
                        match &pass_to {
                            Some(p) => p.clone(),
                            None => self.placement[id].clone(),
                        }
                    } else {
                        fail_to.clone()
                    };
                    count(&mut report, to.label());
                    self.place(id, to, &step.id);
                }
            }

            StepKind::Cluster {
                input,
                features,
                config,
                names,
                output,
            } => {
                let members = self.input_members(input)?;
                report.input_size = members.len();
                let names = names_for(names, config.clusters);
                match output {
                    ClusterOutput::Subgroups => {
                        let run = self.split(db, &step.id, input.base(), &members, features, config, &names)?;
                        for (label, n) in run_counts(&run, &members, input.base()) {
                            report.outputs.insert(label, n);
                        }
                        cluster = Some(run);
                    }
                    ClusterOutput::Tag => {
                        let Input::Group(scope) = input else {
                            return Err(StepError::Invalid("tag output needs a group input".into()));
                        };
                        let (run, _) = cluster_members(db, &members, features, config, &names)?;
                        let labels = hard_assign(&run.partition);
                        for (id, &k) in run.object_ids.iter().zip(&labels) {
                            let tags = self.tags.entry(id.clone()).or_default();
                            tags.retain(|t| &t.scope != scope);
                            tags.push(Tag {
                                scope: scope.clone(),
                                name: names[k].clone(),
                            });
                            count(&mut report, &names[k]);
                        }
                        let untagged = members.len() - run.object_ids.len();
                        if untagged > 0 {
                            report.outputs.insert("(untagged)".into(), untagged);
                        }
                        cluster = Some(run);
                    }
                }
            }

            StepKind::ManualLabel {
                input,
                labels,
                default_group,
            } => {
                let members = match (self.input_members(input), policy) {
                    (Ok(m), _) => m,
                    (Err(StepError::EmptyInput(_)), ManualPolicy::Pending) => BTreeSet::new(),
                    (Err(e), _) => return Err(e),
                };
                report.input_size = members.len();
                if policy == ManualPolicy::Pending {
                    report.status = StepStatus::Pending;
                    for id in &members {
                        count(&mut report, UNASSIGNED_TOKEN);
                        self.place(id, Placement::Unassigned, &step.id);
                    }
                    return Ok(StepOutcome { report, cluster });
                }
                let base = input.base();
                let new_paths: BTreeSet<String> = labels
                    .values()
                    .chain(default_group.iter())
                    .map(|n| child_path(base, n))
                    .collect();
                self.check_new_paths(&members, &new_paths)?;
                let fallback = default_group
                    .as_ref()
                    .map(|d| Placement::Group(child_path(base, d)))
                    .unwrap_or(Placement::Unassigned);
                for id in &members {
                    let to = labels
                        .get(id)
                        .map(|n| Placement::Group(child_path(base, n)))
                        .unwrap_or_else(|| fallback.clone());
                    count(&mut report, to.label());
                    self.place(id, to, &step.id);
                }
                report.unmatched_labels = labels.keys().filter(|id| !members.contains(*id)).cloned().collect();
            }

            StepKind::Merge { groups, name } => {
                let unique: BTreeSet<&String> = groups.iter().collect();
                if unique.len() != groups.len() {
                    return Err(StepError::Invalid("a group is named twice".into()));
                }
                for g in groups {
                    self.require_leaf(g)?;
                }
                let target = child_path(&common_parent(groups), name);
                let mut members = BTreeSet::new();
                for g in groups {
                    members.extend(self.members(&Input::Group(g.clone())));
                }
                report.input_size = members.len();
                self.check_new_paths(&members, [&target])?;

                // a merged group stays in its cluster family when all parts shared one
                let shared = self
                    .families
                    .iter()
                    .find(|f| groups.iter().all(|g| f.centers.contains_key(g)))
                    .cloned();
                for g in groups {
                    self.drop_from_families(g);
                }
                self.drop_from_families(&target);
                if let Some(mut family) = shared {
                    let merged: Vec<Vec<f64>> = groups.iter().flat_map(|g| family.centers[g].clone()).collect();
                    family.centers.retain(|p, _| !groups.contains(p));
                    family.centers.insert(target.clone(), merged);
                    match self.families.iter_mut().find(|f| f.step_id == family.step_id) {
                        Some(f) => *f = family,
                        None => self.families.push(family),
                    }
                }
                for id in &members {
                    count(&mut report, &target);
                    self.place(id, Placement::Group(target.clone()), &step.id);
                }
            }

            StepKind::SplitRecluster {
                group,
                features,
                config,
                names,
            } => {
                self.require_leaf(group)?;
                let members = self.members(&Input::Group(group.clone()));
                report.input_size = members.len();
                let names = names_for(names, config.clusters);
                self.drop_from_families(group);
                let run = self.split(db, &step.id, group, &members, features, config, &names)?;
                for (label, n) in run_counts(&run, &members, group) {
                    report.outputs.insert(label, n);
                }
                cluster = Some(run);
            }

            StepKind::Dissolve { group } => {
                self.require_leaf(group)?;
                let family = self
                    .families
                    .iter()
                    .find(|f| f.centers.contains_key(group))
                    .cloned()
                    .ok_or_else(|| StepError::NoRedistributionTarget(group.clone()))?;
                let targets: Vec<(&String, &Vec<Vec<f64>>)> = family
                    .centers
                    .iter()
                    .filter(|(path, _)| *path != group && self.is_leaf(path))
                    .collect();
                if targets.is_empty() {
                    return Err(StepError::NoRedistributionTarget(group.clone()));
                }
                let members = self.members(&Input::Group(group.clone()));
                report.input_size = members.len();
                let selection = Selection {
                    db_id: db.db_id().to_string(),
                    ids: members.clone(),
                };
                let matrix = build_with_normalization(db, &selection, &family.features, &family.normalization)?;
                let mut moves: Vec<(ObjectId, Placement)> = Vec::with_capacity(members.len());
                for (row, id) in matrix.values.rows().into_iter().zip(&matrix.object_ids) {
                    let mut best: Option<(f64, &String)> = None;
                    for (path, centers) in &targets {
                        for c in centers.iter() {
                            let d: f64 = row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                            if best.is_none_or(|(bd, _)| d < bd) {
                                best = Some((d, path));
                            }
                        }
                    }
                    let (_, path) = best.expect("targets are non-empty");
                    moves.push((id.clone(), Placement::Group(path.clone())));
                }
                for s in &matrix.skipped {
                    moves.push((s.object_id.clone(), Placement::Unassigned));
                }
                self.drop_from_families(group);
                for (id, to) in moves {
                    count(&mut report, to.label());
                    self.place(&id, to, &step.id);
                }
            }

            StepKind::Exclude { groups } => {
                let mut members = BTreeSet::new();
                for g in groups {
                    self.require_leaf(g)?;
                    members.extend(self.members(&Input::Group(g.clone())));
                }
                report.input_size = members.len();
                for g in groups {
                    self.drop_from_families(g);
                }
                for id in &members {
                    count(&mut report, Placement::Excluded.label());
                    self.place(id, Placement::Excluded, &step.id);
                }
            }
        }
        Ok(StepOutcome { report, cluster })
    }

    /// Clusters `members` into child groups of `base`, recording a new family.
    #[allow(clippy::too_many_arguments)]
    fn split(
        &mut self,
        db: &ObjectDatabase,
        step_id: &str,
        base: &str,
        members: &BTreeSet<ObjectId>,
        features: &[FeatureSpec],
        config: &FcmConfig,
        names: &[String],
    ) -> Result<ClusterRun, StepError> {
        let (run, normalization) = cluster_members(db, members, features, config, names)?;
        let paths: Vec<String> = names.iter().map(|n| child_path(base, n)).collect();
        self.check_new_paths(members, &paths)?;
        for p in &paths {
            self.drop_from_families(p);
        }
        let labels = hard_assign(&run.partition);
        let placed: BTreeSet<&ObjectId> = run.object_ids.iter().collect();
        for (id, &k) in run.object_ids.iter().zip(&labels) {
            self.place(id, Placement::Group(paths[k].clone()), step_id);
        }
        for id in members.iter().filter(|id| !placed.contains(id)) {
            self.place(id, Placement::Unassigned, step_id);
        }
        self.families.push(ClusterFamily {
            step_id: step_id.to_string(),
            features: features.to_vec(),
            normalization,
            centers: paths
                .iter()
                .enumerate()
                .map(|(k, p)| (p.clone(), vec![run.partition.centers.row(k).to_vec()]))
                .collect(),
        });
        Ok(run)
    }
}

fn run_counts(run: &ClusterRun, members: &BTreeSet<ObjectId>, base: &str) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for &k in &hard_assign(&run.partition) {
        *out.entry(child_path(base, &run.names[k])).or_insert(0) += 1;
    }
    let dropped = members.len() - run.object_ids.len();
    if dropped > 0 {
        out.insert(UNASSIGNED_TOKEN.to_string(), dropped);
    }
    out
}

fn cluster_members(
    db: &ObjectDatabase,
    members: &BTreeSet<ObjectId>,
    features: &[FeatureSpec],
    config: &FcmConfig,
    names: &[String],
) -> Result<(ClusterRun, Vec<ColumnNormalization>), StepError> {
    if names.len() != config.clusters {
        return Err(StepError::Invalid(format!(
            "{} output names for {} clusters",
            names.len(),
            config.clusters
        )));
    }
    let selection = Selection {
        db_id: db.db_id().to_string(),
        ids: members.clone(),
    };
    let matrix = build_feature_matrix(db, &selection, features)?;
    let partition = fit_matrix(&matrix, config)?;
    Ok((
        ClusterRun {
            object_ids: matrix.object_ids,
            names: names.to_vec(),
            partition,
        },
        matrix.normalization,
    ))
}
