//! The bundled four-step pipeline for the default benchmark scenario.

use std::collections::BTreeMap;

use super::record::{ClusterOutput, Input, PipelineRecord, Step, StepKind};
use crate::fcm::FcmConfig;
use crate::features::{FeatureKind, FeatureSpec, Normalization, Plane, ProjectionParams};
use crate::filters::{Comparator, FilterSpec, SpatialStatistic};
use crate::kdb::KnowledgeDatabase;
use crate::trajectory::{Axis, ObjectId};

/// Rotation applied before measuring the vertical projection range in step 3.
pub const EXAMPLE_PROJECTION_ANGLE_DEG: f64 = 15.0;

pub fn example_projection() -> ProjectionParams {
    ProjectionParams {
        angle_deg: EXAMPLE_PROJECTION_ANGLE_DEG,
        rotation_axis: Axis::X,
        projection_plane: Plane::Yz,
        extent_axis: Axis::Y,
    }
}

/// Labels for the manual step: the last path segment of every `deep` group.
pub fn example_labels_from_truth(truth: &KnowledgeDatabase) -> BTreeMap<ObjectId, String> {
    truth
        .groups
        .iter()
        .filter_map(|(id, path)| {
            let segs: Vec<&str> = path.split('/').collect();
            let i = segs.iter().position(|s| *s == "deep")?;
            segs.get(i + 1).map(|label| (id.clone(), label.to_string()))
        })
        .collect()
}

/// Upper-half filter, side split, deep/surface split, manual deep labels.
pub fn example_pipeline(source_db_id: impl Into<String>, labels: BTreeMap<ObjectId, String>) -> PipelineRecord {
    let mut record = PipelineRecord::new(source_db_id);
    record.steps = vec![
        Step::new(
            "s1",
            StepKind::Filter {
                input: Input::Unassigned,
                filter: FilterSpec::SpatialThreshold {
                    axis: Axis::Y,
                    comparator: Comparator::Ge,
                    value: 0.0,
                    statistic: SpatialStatistic::Centroid,
                },
                output: Some("upper".into()),
                rejected_group: None,
            },
        )
        .annotated("Keep objects located in the upper half."),
        Step::new(
            "s2",
            StepKind::Cluster {
                input: Input::group("upper"),
                features: vec![FeatureSpec::new(FeatureKind::StartPoint).with_normalization(Normalization::None)],
                config: FcmConfig::new(2, 11),
                names: vec!["left".into(), "right".into()],
                output: ClusterOutput::Tag,
            },
        )
        .annotated("Separate the two sides by start point; keep both sides together downstream."),
        Step::new(
            "s3",
            StepKind::Cluster {
                input: Input::group("upper"),
                features: vec![
                    FeatureSpec::new(FeatureKind::PlaneAngle {
                        normal: [0.0, 1.0, 0.0],
                        zero_displacement_as_zero: true,
                    })
                    .with_normalization(Normalization::ZScore),
                    FeatureSpec::new(FeatureKind::RotatedProjectionRange(example_projection()))
                        .with_normalization(Normalization::ZScore),
                ],
                config: FcmConfig::new(2, 12),
                names: vec!["deep".into(), "surface".into()],
                output: ClusterOutput::Subgroups,
            },
        )
        .annotated("Split straight movers near the surface from objects moving in the interior."),
        Step::new(
            "s4",
            StepKind::ManualLabel {
                input: Input::group("upper/deep"),
                labels,
                default_group: None,
            },
        )
        .annotated("Label interior objects by movement direction."),
    ];
    record
}
