//! Per-group feature statistics and knowledge-database comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureContext, FeatureError, FeatureSpec, SkippedObject};
use crate::kdb::{KnowledgeDatabase, PartitionViolation, Placement, EXCLUDED_TOKEN, UNASSIGNED_TOKEN};
use crate::trajectory::{ObjectDatabase, ObjectId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluationError {
    #[error("knowledge database does not match the object database: {0}")]
    Mismatch(PartitionViolation),
    #[error("{0} is not a scalar feature")]
    NotScalar(String),
    #[error("at least one histogram bin is required")]
    NoBins,
    #[error("object {object_id}: {source}")]
    Feature {
        object_id: ObjectId,
        #[source]
        source: FeatureError,
    },
    #[error("the two knowledge databases share no objects")]
    EmptyIntersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    /// Moments are absent for empty groups.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub median: Option<f64>,
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub feature: String,
    /// Shared by every group; `bins + 1` edges spanning the global value range.
    pub bin_edges: Vec<f64>,
    /// Leaf groups in path order, then the excluded and unassigned pseudo-groups.
    pub groups: Vec<GroupSummary>,
    pub evaluated: usize,
    pub skipped: Vec<SkippedObject>,
}

fn summarize(group: String, mut values: Vec<f64>, edges: &[f64]) -> GroupSummary {
    let bins = edges.len() - 1;
    let mut histogram = vec![0; bins];
    let (lo, hi) = (edges[0], edges[bins]);
    let width = (hi - lo) / bins as f64;
    for &v in &values {
        let bin = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        histogram[bin] += 1;
    }
    let count = values.len();
    if count == 0 {
        return GroupSummary {
            group,
            count,
            mean: None,
            std: None,
            min: None,
            max: None,
            median: None,
            histogram,
        };
    }
    values.sort_by(f64::total_cmp);
    let n = count as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let median = if count % 2 == 1 {
        values[count / 2]
    } else {
        (values[count / 2 - 1] + values[count / 2]) / 2.0
    };
    GroupSummary {
        group,
        count,
        mean: Some(mean),
        std: Some(std),
        min: Some(values[0]),
        max: Some(values[count - 1]),
        median: Some(median),
        histogram,
    }
}

/// Statistics of a scalar feature per leaf group and pseudo-group.
pub fn group_stats(
    db: &ObjectDatabase,
    kdb: &KnowledgeDatabase,
    feature: &FeatureSpec,
    bins: usize,
) -> Result<GroupStats, EvaluationError> {
    if bins == 0 {
        return Err(EvaluationError::NoBins);
    }
    if feature.feature.width() != 1 {
        return Err(EvaluationError::NotScalar(feature.feature.base_name().to_string()));
    }
    if let Some(v) = kdb.check_partition(db).into_iter().next() {
        return Err(EvaluationError::Mismatch(v));
    }
    let ctx = FeatureContext::for_database(db);
    let mut by_group: BTreeMap<String, Vec<f64>> = kdb.leaf_groups().into_keys().map(|g| (g, Vec::new())).collect();
    let mut excluded = Vec::new();
    let mut unassigned = Vec::new();
    let mut skipped = Vec::new();
    for traj in db.trajectories() {
        let id = traj.object_id();
        let value = match feature.evaluate_scalar(traj, &ctx) {
            Ok(v) => v,
            Err(e) if feature.skip_on_error => {
                skipped.push(SkippedObject {
                    object_id: id.to_string(),
                    reason: e.to_string(),
                });
                continue;
            }
            Err(source) => {
                return Err(EvaluationError::Feature {
                    object_id: id.to_string(),
                    source,
                })
            }
        };
        match kdb.placement(id).expect("partition checked") {
            Placement::Group(g) => by_group.get_mut(&g).expect("leaf groups listed").push(value),
            Placement::Excluded => excluded.push(value),
            Placement::Unassigned => unassigned.push(value),
        }
    }
    let all = by_group.values().flatten().chain(&excluded).chain(&unassigned);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (0.0, 0.0) };
    let mut bin_edges: Vec<f64> = (0..bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    bin_edges.push(hi);

    let evaluated = db.len() - skipped.len();
    let mut groups: Vec<GroupSummary> = by_group
        .into_iter()
        .map(|(g, values)| summarize(g, values, &bin_edges))
        .collect();
    groups.push(summarize(EXCLUDED_TOKEN.into(), excluded, &bin_edges));
    groups.push(summarize(UNASSIGNED_TOKEN.into(), unassigned, &bin_edges));
    Ok(GroupStats {
        feature: feature.feature.base_name().to_string(),
        bin_edges,
        groups,
        evaluated,
        skipped,
    })
}

impl GroupStats {
    /// Rows `group,count,mean,std,min,max,median`; absent moments are empty cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["group", "count", "mean", "std", "min", "max", "median"])?;
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for g in &self.groups {
            w.write_record([
                g.group.clone(),
                g.count.to_string(),
                cell(g.mean),
                cell(g.std),
                cell(g.min),
                cell(g.max),
                cell(g.median),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Granularity of group labels in a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareLevel {
    #[default]
    Leaf,
    /// Paths truncated to this many segments.
    Depth(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMatch {
    pub group: String,
    pub size: usize,
    pub best_match: String,
    pub overlap: usize,
    /// `overlap / size`.
    pub recall: f64,
    /// Size of the matched group minus size of this group.
    pub size_delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdbComparison {
    pub level: CompareLevel,
    /// Objects in both databases; all metrics are over these.
    pub objects: usize,
    pub only_in_a: usize,
    pub only_in_b: usize,
    pub labels_a: Vec<String>,
    pub labels_b: Vec<String>,
    /// `contingency[i][j]` counts objects labelled `labels_a[i]` and `labels_b[j]`.
    pub contingency: Vec<Vec<usize>>,
    /// Fraction of object pairs on which both groupings agree (same vs different group).
    pub agreement: f64,
    pub adjusted_rand_index: f64,
    pub matches_a: Vec<GroupMatch>,
    pub matches_b: Vec<GroupMatch>,
}

fn label(kdb: &KnowledgeDatabase, id: &str, level: CompareLevel) -> String {
    let p = kdb.placement(id).expect("id taken from the kdb");
    match level {
        CompareLevel::Leaf => p.label().to_string(),
        CompareLevel::Depth(d) => p.label_at_depth(d),
    }
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Pair-counting agreement and adjusted Rand index from a contingency table.
pub fn pair_scores(contingency: &[Vec<usize>]) -> (f64, f64) {
    let n: usize = contingency.iter().flatten().sum();
    if n < 2 {
        return (1.0, 1.0);
    }
    let total = pairs(n);
    let same_both: f64 = contingency.iter().flatten().map(|&c| pairs(c)).sum();
    let same_a: f64 = contingency.iter().map(|row| pairs(row.iter().sum())).sum();
    let cols = contingency.first().map_or(0, Vec::len);
    let same_b: f64 = (0..cols).map(|j| pairs(contingency.iter().map(|r| r[j]).sum())).sum();
    let agreement = (total + 2.0 * same_both - same_a - same_b) / total;
    let expected = same_a * same_b / total;
    let max = 0.5 * (same_a + same_b);
    let ari = if max == expected {
        1.0
    } else {
        (same_both - expected) / (max - expected)
    };
    (agreement, ari)
}

fn best_matches(labels: &[String], other: &[String], table: &[Vec<usize>], transpose: bool) -> Vec<GroupMatch> {
    let cell = |i: usize, j: usize| if transpose { table[j][i] } else { table[i][j] };
    let other_size = |j: usize| (0..labels.len()).map(|i| cell(i, j)).sum::<usize>();
    labels
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let size: usize = (0..other.len()).map(|j| cell(i, j)).sum();
            let (j, overlap) = (0..other.len())
                .map(|j| (j, cell(i, j)))
                .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
            GroupMatch {
                group: g.clone(),
                size,
                best_match: other[j].clone(),
                overlap,
                recall: if size > 0 { overlap as f64 / size as f64 } else { 0.0 },
                size_delta: other_size(j) as i64 - size as i64,
            }
        })
        .collect()
}

/// Compares two groupings over their shared objects.
pub fn compare_kdbs(
    a: &KnowledgeDatabase,
    b: &KnowledgeDatabase,
    level: CompareLevel,
) -> Result<KdbComparison, EvaluationError> {
    let ids_a = a.object_ids();
    let ids_b = b.object_ids();
    let shared: Vec<&ObjectId> = ids_a.intersection(&ids_b).collect();
    if shared.is_empty() {
        return Err(EvaluationError::EmptyIntersection);
    }
    let la: Vec<String> = shared.iter().map(|id| label(a, id, level)).collect();
    let lb: Vec<String> = shared.iter().map(|id| label(b, id, level)).collect();
    let labels_a: Vec<String> = la.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels_b: Vec<String> = lb.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index = |labels: &[String], l: &String| labels.binary_search(l).expect("label collected above");
    let mut contingency = vec![vec![0usize; labels_b.len()]; labels_a.len()];
    for (x, y) in la.iter().zip(&lb) {
        contingency[index(&labels_a, x)][index(&labels_b, y)] += 1;
    }
    let (agreement, ari) = pair_scores(&contingency);
    Ok(KdbComparison {
        level,
        objects: shared.len(),
        only_in_a: ids_a.len() - shared.len(),
        only_in_b: ids_b.len() - shared.len(),
        matches_a: best_matches(&labels_a, &labels_b, &contingency, false),
        matches_b: best_matches(&labels_b, &labels_a, &contingency, true),
        labels_a,
        labels_b,
        contingency,
        agreement,
        adjusted_rand_index: ari,
    })
}

impl KdbComparison {
    /// Contingency table as CSV with `a\b` in the corner cell.
    pub fn write_contingency_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["a\\b".to_string()];
        header.extend(self.labels_b.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.labels_a.iter().zip(&self.contingency) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::trajectory::{DatabaseMeta, Point3, Trajectory};

    fn kdb(pairs: &[(&str, &str)]) -> KnowledgeDatabase {
        let mut k = KnowledgeDatabase::new("x", "");
        for (id, g) in pairs {
            k.insert(id.to_string(), Placement::from_label(g).unwrap(), None);
        }
        k
    }

    /// Counts pair categories by enumeration: same/same, same/diff, diff/same, diff/diff.
    fn brute_pairs(a: &[usize], b: &[usize]) -> [f64; 4] {
        let mut c = [0.0; 4];
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let k = match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                c[k] += 1.0;
            }
        }
        c
    }

    #[test]
    fn four_object_crossing() {
        let a = kdb(&[("a", "x"), ("b", "x"), ("c", "y"), ("d", "y")]);
        let b = kdb(&[("a", "p"), ("c", "p"), ("b", "q"), ("d", "q")]);
        let cmp = compare_kdbs(&a, &b, CompareLevel::Leaf).unwrap();
        assert_eq!(cmp.contingency, vec![vec![1, 1], vec![1, 1]]);
        let [ss, sd, ds, dd] = brute_pairs(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert_eq!(cmp.agreement, (ss + dd) / (ss + sd + ds + dd));
        assert_eq!(cmp.agreement, 2.0 / 6.0);
    }

    #[test]
    fn self_and_trivial_comparisons() {
        let a = kdb(&[("a", "x"), ("b", "x"), ("c", "y"), ("d", "(unassigned)")]);
        let cmp = compare_kdbs(&a, &a, CompareLevel::Leaf).unwrap();
        assert_eq!((cmp.agreement, cmp.adjusted_rand_index), (1.0, 1.0));
        let one = kdb(&[("a", "g"), ("b", "g"), ("c", "g"), ("d", "g")]);
        let cmp = compare_kdbs(&a, &one, CompareLevel::Leaf).unwrap();
        assert!(cmp.adjusted_rand_index.abs() < 1e-12);
        let cmp = compare_kdbs(&one, &one, CompareLevel::Leaf).unwrap();
        assert_eq!(cmp.adjusted_rand_index, 1.0);
    }

    fn from_labels(labels: &[usize], prefix: &str) -> KnowledgeDatabase {
        let mut k = KnowledgeDatabase::new("x", "");
        for (i, g) in labels.iter().enumerate() {
            k.insert(format!("o{i}"), Placement::Group(format!("{prefix}{g}")), None);
        }
        k
    }

    #[test]
    fn ari_matches_pair_formula() {
        let a = [0, 0, 0, 1, 1, 2, 2, 2, 2];
        let b = [0, 0, 1, 1, 1, 1, 2, 2, 0];
        let cmp = compare_kdbs(&from_labels(&a, "g"), &from_labels(&b, "h"), CompareLevel::Leaf).unwrap();
        let [ss, sd, ds, dd] = brute_pairs(&a, &b);
        let oracle = 2.0 * (ss * dd - sd * ds) / ((ss + sd) * (sd + dd) + (ss + ds) * (ds + dd));
        assert!((cmp.adjusted_rand_index - oracle).abs() < 1e-12);
    }

    #[test]
    fn restricted_to_intersection_and_best_matches() {
        let a = kdb(&[("a", "x"), ("b", "x"), ("c", "y"), ("z", "y")]);
        let b = kdb(&[("a", "p"), ("b", "p"), ("c", "p"), ("w", "q")]);
        let cmp = compare_kdbs(&a, &b, CompareLevel::Leaf).unwrap();
        assert_eq!((cmp.objects, cmp.only_in_a, cmp.only_in_b), (3, 1, 1));
        let x = &cmp.matches_a[0];
        assert_eq!((x.group.as_str(), x.best_match.as_str(), x.overlap, x.recall, x.size_delta), ("x", "p", 2, 1.0, 1));
        let disjoint = kdb(&[("q", "x")]);
        assert_eq!(compare_kdbs(&a, &disjoint, CompareLevel::Leaf), Err(EvaluationError::EmptyIntersection));
    }

    #[test]
    fn depth_level_merges_sides() {
        let a = kdb(&[("a", "upper/left/deep"), ("b", "upper/right/deep")]);
        let b = kdb(&[("a", "upper/left/deep"), ("b", "upper/left/deep")]);
        assert_eq!(compare_kdbs(&a, &b, CompareLevel::Leaf).unwrap().agreement, 0.0);
        assert_eq!(compare_kdbs(&a, &b, CompareLevel::Depth(1)).unwrap().agreement, 1.0);
    }

    fn stats_db() -> (ObjectDatabase, KnowledgeDatabase) {
        let still = Trajectory::from_positions("s", 0, [Point3::ORIGIN; 3]).unwrap();
        let still2 = Trajectory::from_positions("t", 0, [Point3::new(1.0, 1.0, 1.0); 3]).unwrap();
        let mover = Trajectory::from_positions(
            "m",
            0,
            [Point3::ORIGIN, Point3::new(2.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0)],
        )
        .unwrap();
        let db = ObjectDatabase::new("d", vec![still, still2, mover], DatabaseMeta::default()).unwrap();
        let k = kdb(&[("s", "rest"), ("t", "rest"), ("m", "move")]);
        (db, k)
    }

    #[test]
    fn stats_per_group() {
        let (db, k) = stats_db();
        let st = group_stats(&db, &k, &FeatureSpec::new(FeatureKind::MeanCurvilinearSpeed), 4).unwrap();
        assert_eq!(st.bin_edges, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let rest = st.groups.iter().find(|g| g.group == "rest").unwrap();
        assert_eq!((rest.count, rest.mean, rest.std), (2, Some(0.0), Some(0.0)));
        let mv = st.groups.iter().find(|g| g.group == "move").unwrap();
        assert_eq!((mv.mean, mv.std, mv.median), (Some(2.0), Some(0.0), Some(2.0)));
        assert_eq!(mv.histogram, vec![0, 0, 0, 1]);
        let empty = st.groups.iter().find(|g| g.group == EXCLUDED_TOKEN).unwrap();
        assert_eq!((empty.count, empty.mean), (0, None));
        assert_eq!(st.groups.iter().map(|g| g.count).sum::<usize>(), db.len());
        for g in &st.groups {
            assert_eq!(g.histogram.iter().sum::<usize>(), g.count);
        }
    }

    #[test]
    fn stats_errors() {
        let (db, k) = stats_db();
        assert!(matches!(
            group_stats(&db, &k, &FeatureSpec::new(FeatureKind::StartPoint), 4),
            Err(EvaluationError::NotScalar(_))
        ));
        let angle = FeatureKind::PlaneAngle {
            normal: [0.0, 1.0, 0.0],
            zero_displacement_as_zero: false,
        };
        assert!(matches!(
            group_stats(&db, &k, &FeatureSpec::new(angle.clone()), 4),
            Err(EvaluationError::Feature { .. })
        ));
        let st = group_stats(&db, &k, &FeatureSpec::new(angle).skipping_errors(), 4).unwrap();
        assert_eq!((st.evaluated, st.skipped.len()), (1, 2));
        let partial = kdb(&[("s", "rest")]);
        assert!(matches!(
            group_stats(&db, &partial, &FeatureSpec::new(FeatureKind::PathLength), 4),
            Err(EvaluationError::Mismatch(_))
        ));
    }
}
