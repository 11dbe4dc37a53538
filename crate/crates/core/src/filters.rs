//! Temporal, spatial and characteristic-based object filters.
//!
//! Every filter is a per-object predicate, so results never depend on which
//! other objects are in the input selection.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureContext, FeatureError, FeatureSpec, Normalization};
use crate::trajectory::{Axis, ObjectDatabase, ObjectId, Point3, Selection, SelectionError, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("invalid filter: {0}")]
    InvalidSpec(String),
    #[error("object {object_id}: {source}")]
    Feature {
        object_id: ObjectId,
        #[source]
        source: FeatureError,
    },
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// Value at least the threshold (inclusive).
    Ge,
    /// Value at most the threshold (inclusive).
    Le,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Ge => value >= threshold,
            Comparator::Le => value <= threshold,
        }
    }
}

/// Which per-trajectory location a spatial filter looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialStatistic {
    /// Mean position over all frames.
    #[default]
    Centroid,
    Start,
    End,
    /// Every sample must pass.
    AllPoints,
    /// At least one sample must pass.
    AnyPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisBounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl AxisBounds {
    fn contains(&self, v: f64) -> bool {
        self.min.is_none_or(|lo| v >= lo) && self.max.is_none_or(|hi| v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "snake_case")]
pub enum CharacteristicTest {
    AtLeast { value: f64 },
    AtMost { value: f64 },
    Within { low: f64, high: f64 },
}

impl CharacteristicTest {
    fn holds(&self, v: f64) -> bool {
        match *self {
            CharacteristicTest::AtLeast { value } => v >= value,
            CharacteristicTest::AtMost { value } => v <= value,
            CharacteristicTest::Within { low, high } => v >= low && v <= high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FilterSpec {
    /// Keeps objects observed at least once within the frame window.
    Temporal { frame_min: u32, frame_max: u32 },
    SpatialThreshold {
        axis: Axis,
        comparator: Comparator,
        value: f64,
        #[serde(default)]
        statistic: SpatialStatistic,
    },
    SpatialBox {
        #[serde(default)]
        x: AxisBounds,
        #[serde(default)]
        y: AxisBounds,
        #[serde(default)]
        z: AxisBounds,
        #[serde(default)]
        statistic: SpatialStatistic,
    },
    /// Tests a scalar feature computed on raw (unnormalized) values.
    Characteristic {
        feature: FeatureSpec,
        #[serde(flatten)]
        test: CharacteristicTest,
    },
}

impl FilterSpec {
    /// Filter that keeps every object.
    pub fn pass_all() -> Self {
        FilterSpec::SpatialBox {
            x: AxisBounds::default(),
            y: AxisBounds::default(),
            z: AxisBounds::default(),
            statistic: SpatialStatistic::Centroid,
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(FilterError::InvalidSpec(format!("{what} must be finite")))
            }
        };
        match self {
            FilterSpec::Temporal { frame_min, frame_max } => {
                if frame_min > frame_max {
                    return Err(FilterError::InvalidSpec(format!(
                        "frame window {frame_min}..={frame_max} is empty"
                    )));
                }
            }
            FilterSpec::SpatialThreshold { value, .. } => finite(*value, "threshold")?,
            FilterSpec::SpatialBox { x, y, z, .. } => {
                for b in [x, y, z] {
                    for v in [b.min, b.max].into_iter().flatten() {
                        finite(v, "box bound")?;
                    }
                    if let (Some(lo), Some(hi)) = (b.min, b.max) {
                        if lo > hi {
                            return Err(FilterError::InvalidSpec(format!("box bound {lo} > {hi}")));
                        }
                    }
                }
            }
            FilterSpec::Characteristic { feature, test } => {
                feature.validate().map_err(|e| FilterError::InvalidSpec(e.to_string()))?;
                if feature.feature.width() != 1 {
                    return Err(FilterError::InvalidSpec(format!(
                        "{} is not a scalar feature",
                        feature.feature.base_name()
                    )));
                }
                if feature.normalization == Some(Normalization::ZScore) {
                    return Err(FilterError::InvalidSpec(
                        "characteristic filters compare raw feature values".into(),
                    ));
                }
                match *test {
                    CharacteristicTest::AtLeast { value } | CharacteristicTest::AtMost { value } => {
                        finite(value, "characteristic threshold")?
                    }
                    CharacteristicTest::Within { low, high } => {
                        finite(low, "interval bound")?;
                        finite(high, "interval bound")?;
                        if low > high {
                            return Err(FilterError::InvalidSpec(format!("interval [{low}, {high}] is empty")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Decides one object. `Ok(None)` means the object is dropped by skip-on-error.
    fn decide(&self, traj: &Trajectory, ctx: &FeatureContext) -> Result<Option<bool>, FeatureError> {
        Ok(Some(match self {
            FilterSpec::Temporal { frame_min, frame_max } => traj
                .samples()
                .iter()
                .any(|s| s.frame >= *frame_min && s.frame <= *frame_max),
            FilterSpec::SpatialThreshold {
                axis,
                comparator,
                value,
                statistic,
            } => spatial_test(traj, *statistic, |p| comparator.holds(p.coord(*axis), *value)),
            FilterSpec::SpatialBox { x, y, z, statistic } => spatial_test(traj, *statistic, |p| {
                x.contains(p.x) && y.contains(p.y) && z.contains(p.z)
            }),
            FilterSpec::Characteristic { feature, test } => match feature.evaluate_scalar(traj, ctx) {
                Ok(v) => test.holds(v),
                Err(_) if feature.skip_on_error => return Ok(None),
                Err(e) => return Err(e),
            },
        }))
    }
}

fn spatial_test(traj: &Trajectory, statistic: SpatialStatistic, pred: impl Fn(Point3) -> bool) -> bool {
    match statistic {
        SpatialStatistic::Centroid => pred(traj.centroid()),
        SpatialStatistic::Start => pred(traj.first().pos),
        SpatialStatistic::End => pred(traj.last().pos),
        SpatialStatistic::AllPoints => traj.positions().all(pred),
        SpatialStatistic::AnyPoint => traj.positions().any(pred),
    }
}

/// Subset of `selection` passing `spec`.
pub fn apply_filter(db: &ObjectDatabase, selection: &Selection, spec: &FilterSpec) -> Result<Selection, FilterError> {
    spec.validate()?;
    selection.check(db)?;
    let ctx = FeatureContext::for_database(db);
    let ids: Vec<&ObjectId> = selection.iter().collect();
    let decisions: Vec<Result<bool, FilterError>> = ids
        .par_iter()
        .map(|id| {
            let traj = db.get(id).expect("selection checked against database");
            spec.decide(traj, &ctx)
                .map(|d| d.unwrap_or(false))
                .map_err(|source| FilterError::Feature {
                    object_id: (*id).clone(),
                    source,
                })
        })
        .collect();
    let mut kept = BTreeSet::new();
    for (id, decision) in ids.into_iter().zip(decisions) {
        if decision? {
            kept.insert(id.clone());
        }
    }
    Ok(Selection {
        db_id: selection.db_id.clone(),
        ids: kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPreview {
    pub selected: usize,
    pub rejected: usize,
    pub selected_ids: Vec<ObjectId>,
}

/// Read-only preview of [`apply_filter`].
pub fn preview_filter(db: &ObjectDatabase, selection: &Selection, spec: &FilterSpec) -> Result<FilterPreview, FilterError> {
    let result = apply_filter(db, selection, spec)?;
    Ok(FilterPreview {
        selected: result.len(),
        rejected: selection.len() - result.len(),
        selected_ids: result.ids.into_iter().collect(),
    })
}
