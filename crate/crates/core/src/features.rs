//! Per-trajectory movement features and feature-matrix assembly.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Axis, ObjectDatabase, ObjectId, Point3, Selection, SelectionError, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("feature needs at least {needed} samples, trajectory has {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("frame gap between frames {from} and {to}")]
    FrameGap { from: u32, to: u32 },
    #[error("zero net displacement, plane angle undefined")]
    ZeroDisplacement,
    #[error("invalid feature parameter: {0}")]
    InvalidParameter(String),
    #[error("zero variance column {0}, cannot z-score")]
    ZeroVarianceColumn(String),
    #[error("non-finite value in column {0}")]
    NonFinite(String),
    #[error("feature selection is empty")]
    EmptySelection,
    #[error("no features requested")]
    NoFeatures,
    #[error("object {object_id}: {source}")]
    Object {
        object_id: ObjectId,
        #[source]
        source: Box<FeatureError>,
    },
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

/// A coordinate plane spanned by two principal axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Yz,
    Xz,
}

impl Plane {
    pub fn contains(self, axis: Axis) -> bool {
        !matches!(
            (self, axis),
            (Plane::Xy, Axis::Z) | (Plane::Yz, Axis::X) | (Plane::Xz, Axis::Y)
        )
    }
}

/// Parameters of the rotated-projection range feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// Rotation in degrees, right-handed about `rotation_axis`, in `[0, 360)`.
    pub angle_deg: f64,
    pub rotation_axis: Axis,
    pub projection_plane: Plane,
    /// Axis inside `projection_plane` along which the extent is measured.
    pub extent_axis: Axis,
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.angle_deg.is_finite() && (0.0..360.0).contains(&self.angle_deg)) {
            return Err(FeatureError::InvalidParameter(format!(
                "rotation angle {} outside [0, 360)",
                self.angle_deg
            )));
        }
        if !self.projection_plane.contains(self.extent_axis) {
            return Err(FeatureError::InvalidParameter(format!(
                "extent axis {} does not lie in the projection plane {:?}",
                self.extent_axis, self.projection_plane
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    StartPoint,
    EndPoint,
    PathLength,
    NetDisplacement,
    Straightness,
    MeanTurningAngle,
    MeanCurvilinearSpeed,
    PlaneAngle {
        normal: [f64; 3],
        /// Report 0° instead of failing when start and end coincide.
        #[serde(default)]
        zero_displacement_as_zero: bool,
    },
    RotatedProjectionRange(ProjectionParams),
}

/// Physical dimension of a feature, used to pick the default normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureUnit {
    Length,
    Speed,
    Angle,
    Ratio,
}

impl FeatureKind {
    pub fn unit(&self) -> FeatureUnit {
        match self {
            FeatureKind::StartPoint
            | FeatureKind::EndPoint
            | FeatureKind::PathLength
            | FeatureKind::NetDisplacement
            | FeatureKind::RotatedProjectionRange(_) => FeatureUnit::Length,
            FeatureKind::MeanCurvilinearSpeed => FeatureUnit::Speed,
            FeatureKind::MeanTurningAngle | FeatureKind::PlaneAngle { .. } => FeatureUnit::Angle,
            FeatureKind::Straightness => FeatureUnit::Ratio,
        }
    }

    pub fn base_name(&self) -> &'static str {
        match self {
            FeatureKind::StartPoint => "start",
            FeatureKind::EndPoint => "end",
            FeatureKind::PathLength => "path_length",
            FeatureKind::NetDisplacement => "net_displacement",
            FeatureKind::Straightness => "straightness",
            FeatureKind::MeanTurningAngle => "mean_turning_angle",
            FeatureKind::MeanCurvilinearSpeed => "mean_curvilinear_speed",
            FeatureKind::PlaneAngle { .. } => "plane_angle",
            FeatureKind::RotatedProjectionRange(_) => "rotated_projection_range",
        }
    }

    pub fn columns(&self) -> Vec<String> {
        match self {
            FeatureKind::StartPoint | FeatureKind::EndPoint => ["x", "y", "z"]
                .iter()
                .map(|c| format!("{}_{c}", self.base_name()))
                .collect(),
            _ => vec![self.base_name().to_string()],
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FeatureKind::StartPoint | FeatureKind::EndPoint => 3,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        match self {
            FeatureKind::PlaneAngle { normal, .. } => unit_normal(*normal).map(|_| ()),
            FeatureKind::RotatedProjectionRange(p) => p.validate(),
            _ => Ok(()),
        }
    }

    /// Parses a parameterless kind from its snake-case name.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "start_point" => FeatureKind::StartPoint,
            "end_point" => FeatureKind::EndPoint,
            "path_length" => FeatureKind::PathLength,
            "net_displacement" => FeatureKind::NetDisplacement,
            "straightness" => FeatureKind::Straightness,
            "mean_turning_angle" => FeatureKind::MeanTurningAngle,
            "mean_curvilinear_speed" => FeatureKind::MeanCurvilinearSpeed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    ZScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature: FeatureKind,
    /// `None` means "pick the default for the feature set"; resolved before recording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Drop objects whose feature cannot be computed instead of failing.
    #[serde(default)]
    pub skip_on_error: bool,
}

impl FeatureSpec {
    pub fn new(feature: FeatureKind) -> Self {
        Self {
            feature,
            normalization: None,
            skip_on_error: false,
        }
    }

    pub fn raw(feature: FeatureKind) -> Self {
        Self::new(feature).with_normalization(Normalization::None)
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = Some(normalization);
        self
    }

    pub fn skipping_errors(mut self) -> Self {
        self.skip_on_error = true;
        self
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        self.feature.validate()
    }

    /// Computes the raw (unnormalized) values of this feature for one trajectory.
    pub fn evaluate(&self, traj: &Trajectory, ctx: &FeatureContext) -> Result<Vec<f64>, FeatureError> {
        Ok(match &self.feature {
            FeatureKind::StartPoint => start_point(traj).to_array().to_vec(),
            FeatureKind::EndPoint => end_point(traj).to_array().to_vec(),
            FeatureKind::PathLength => vec![path_length(traj)],
            FeatureKind::NetDisplacement => vec![net_displacement(traj)],
            FeatureKind::Straightness => vec![straightness(traj)],
            FeatureKind::MeanTurningAngle => vec![mean_turning_angle(traj)?],
            FeatureKind::MeanCurvilinearSpeed => {
                vec![mean_curvilinear_speed(traj, ctx.require_consecutive_frames)?]
            }
            FeatureKind::PlaneAngle {
                normal,
                zero_displacement_as_zero,
            } => match plane_angle(traj, Point3::from_array(*normal)) {
                Err(FeatureError::ZeroDisplacement) if *zero_displacement_as_zero => vec![0.0],
                other => vec![other?],
            },
            FeatureKind::RotatedProjectionRange(p) => {
                vec![rotated_projection_range(traj, p, ctx.rotation_center)?]
            }
        })
    }

    /// Evaluates a scalar feature; vector features are rejected.
    pub fn evaluate_scalar(&self, traj: &Trajectory, ctx: &FeatureContext) -> Result<f64, FeatureError> {
        if self.feature.width() != 1 {
            return Err(FeatureError::InvalidParameter(format!(
                "{} is not a scalar feature",
                self.feature.base_name()
            )));
        }
        Ok(self.evaluate(traj, ctx)?[0])
    }
}

/// Database-level context some features depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureContext {
    pub rotation_center: Point3,
    /// Frame gaps are errors under the complete-track contract.
    pub require_consecutive_frames: bool,
}

impl FeatureContext {
    pub fn for_database(db: &ObjectDatabase) -> Self {
        Self {
            rotation_center: db.centroid(),
            require_consecutive_frames: db.complete_tracks(),
        }
    }
}

impl Default for FeatureContext {
    fn default() -> Self {
        Self {
            rotation_center: Point3::ORIGIN,
            require_consecutive_frames: true,
        }
    }
}

/// Fills unresolved normalizations: z-score when the specs mix units, none otherwise.
pub fn resolve_normalization(specs: &[FeatureSpec]) -> Vec<FeatureSpec> {
    let mixed = specs
        .windows(2)
        .any(|w| w[0].feature.unit() != w[1].feature.unit());
    let default = if mixed {
        Normalization::ZScore
    } else {
        Normalization::None
    };
    specs
        .iter()
        .map(|s| FeatureSpec {
            normalization: Some(s.normalization.unwrap_or(default)),
            ..s.clone()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Single-trajectory features

pub fn start_point(traj: &Trajectory) -> Point3 {
    traj.first().pos
}

pub fn end_point(traj: &Trajectory) -> Point3 {
    traj.last().pos
}

fn steps(traj: &Trajectory) -> impl Iterator<Item = Point3> + '_ {
    traj.samples().windows(2).map(|w| w[1].pos - w[0].pos)
}

pub fn path_length(traj: &Trajectory) -> f64 {
    steps(traj).map(Point3::norm).sum()
}

pub fn net_displacement(traj: &Trajectory) -> f64 {
    end_point(traj).distance(start_point(traj))
}

/// Net displacement over path length, 0 for a path of length 0.
pub fn straightness(traj: &Trajectory) -> f64 {
    let path = path_length(traj);
    if path == 0.0 {
        0.0
    } else {
        (net_displacement(traj) / path).clamp(0.0, 1.0)
    }
}

fn angle_between_deg(a: Point3, b: Point3) -> f64 {
    let cross = Point3::new(
        a.y * b.z - a.z * b.y,
        a.z * b.x - a.x * b.z,
        a.x * b.y - a.y * b.x,
    );
    cross.norm().atan2(a.dot(b)).to_degrees()
}

/// Mean angle between consecutive non-zero displacements, in degrees.
pub fn mean_turning_angle(traj: &Trajectory) -> Result<f64, FeatureError> {
    if traj.len() < 3 {
        return Err(FeatureError::TooFewSamples {
            needed: 3,
            got: traj.len(),
        });
    }
    let moving: Vec<Point3> = steps(traj).filter(|d| d.norm() > 0.0).collect();
    if moving.len() < 2 {
        return Ok(0.0);
    }
    let total: f64 = moving
        .windows(2)
        .map(|w| angle_between_deg(w[0], w[1]))
        .sum();
    Ok(total / (moving.len() - 1) as f64)
}

/// Mean distance between consecutive samples (length units per frame).
pub fn mean_curvilinear_speed(traj: &Trajectory, require_consecutive: bool) -> Result<f64, FeatureError> {
    if require_consecutive {
        if let Some(w) = traj.samples().windows(2).find(|w| w[1].frame != w[0].frame + 1) {
            return Err(FeatureError::FrameGap {
                from: w[0].frame,
                to: w[1].frame,
            });
        }
    }
    Ok(path_length(traj) / (traj.len() - 1) as f64)
}

fn unit_normal(normal: [f64; 3]) -> Result<Point3, FeatureError> {
    let n = Point3::from_array(normal);
    let len = n.norm();
    if !(len.is_finite() && len > 0.0) {
        return Err(FeatureError::InvalidParameter(format!(
            "plane normal {normal:?} cannot be normalized"
        )));
    }
    Ok(n * (1.0 / len))
}

/// Angle between the net displacement and the plane with the given normal, in `[0, 90]`.
pub fn plane_angle(traj: &Trajectory, normal: Point3) -> Result<f64, FeatureError> {
    let n = unit_normal(normal.to_array())?;
    let d = end_point(traj) - start_point(traj);
    let len = d.norm();
    if len == 0.0 {
        return Err(FeatureError::ZeroDisplacement);
    }
    Ok((d.dot(n).abs() / len).min(1.0).asin().to_degrees())
}

/// Rotates `p` by `angle_deg` about the line through `center` along `axis` (right-handed).
pub fn rotate_about(p: Point3, axis: Axis, angle_deg: f64, center: Point3) -> Point3 {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let q = p - center;
    let r = match axis {
        Axis::X => Point3::new(q.x, c * q.y - s * q.z, s * q.y + c * q.z),
        Axis::Y => Point3::new(c * q.x + s * q.z, q.y, -s * q.x + c * q.z),
        Axis::Z => Point3::new(c * q.x - s * q.y, s * q.x + c * q.y, q.z),
    };
    r + center
}

/// Extent along `extent_axis` of the trajectory after rotation and projection.
pub fn rotated_projection_range(
    traj: &Trajectory,
    params: &ProjectionParams,
    center: Point3,
) -> Result<f64, FeatureError> {
    params.validate()?;
    // Orthogonal projection onto a principal plane keeps the in-plane coordinates,
    // so the extent is read straight off the rotated coordinate.
    let (lo, hi) = traj
        .positions()
        .map(|p| rotate_about(p, params.rotation_axis, params.angle_deg, center).coord(params.extent_axis))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Ok(hi - lo)
}

// ---------------------------------------------------------------------------
// Feature matrices

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ColumnNormalization {
    None,
    ZScore { mean: f64, std: f64 },
}

impl ColumnNormalization {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            ColumnNormalization::None => v,
            ColumnNormalization::ZScore { mean, std } => (v - mean) / std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedObject {
    pub object_id: ObjectId,
    pub reason: String,
}

/// Row-per-object numeric features with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub object_ids: Vec<ObjectId>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
    pub normalization: Vec<ColumnNormalization>,
    /// Objects dropped by skip-on-error features.
    pub skipped: Vec<SkippedObject>,
}

impl FeatureMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, id: &str) -> Option<Vec<f64>> {
        self.object_ids
            .iter()
            .position(|o| o == id)
            .map(|i| self.values.row(i).to_vec())
    }

    /// Writes `object_id` followed by one column per feature component.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["object_id".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.object_ids.iter().zip(self.values.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for FeatureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} [{}]", self.nrows(), self.ncols(), self.columns.join(", "))
    }
}

fn column_names(specs: &[FeatureSpec]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for spec in specs {
        for base in spec.feature.columns() {
            let mut name = base.clone();
            let mut k = 2;
            while names.contains(&name) {
                name = format!("{base}_{k}");
                k += 1;
            }
            names.push(name);
        }
    }
    names
}

/// Raw feature rows for the selection, in id order, honouring skip-on-error.
fn raw_rows(
    db: &ObjectDatabase,
    selection: &Selection,
    specs: &[FeatureSpec],
) -> Result<(Vec<ObjectId>, Vec<Vec<f64>>, Vec<SkippedObject>), FeatureError> {
    selection.check(db)?;
    if selection.is_empty() {
        return Err(FeatureError::EmptySelection);
    }
    if specs.is_empty() {
        return Err(FeatureError::NoFeatures);
    }
    for spec in specs {
        spec.validate()?;
    }
    let ctx = FeatureContext::for_database(db);
    let ids: Vec<&ObjectId> = selection.iter().collect();
    let results: Vec<Result<Vec<f64>, (bool, FeatureError)>> = ids
        .par_iter()
        .map(|id| {
            let traj = db.get(id).expect("selection checked against database");
            let mut row = Vec::new();
            for spec in specs {
                match spec.evaluate(traj, &ctx) {
                    Ok(v) => row.extend(v),
                    Err(e) => return Err((spec.skip_on_error, e)),
                }
            }
            Ok(row)
        })
        .collect();

    let mut kept_ids = Vec::with_capacity(ids.len());
    let mut rows = Vec::with_capacity(ids.len());
    let mut skipped = Vec::new();
    for (id, result) in ids.into_iter().zip(results) {
        match result {
            Ok(row) => {
                kept_ids.push(id.clone());
                rows.push(row);
            }
            Err((true, e)) => skipped.push(SkippedObject {
                object_id: id.clone(),
                reason: e.to_string(),
            }),
            Err((false, e)) => {
                return Err(FeatureError::Object {
                    object_id: id.clone(),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok((kept_ids, rows, skipped))
}

fn assemble(rows: Vec<Vec<f64>>, columns: &[String]) -> Result<Array2<f64>, FeatureError> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, columns.len()), flat)
        .map_err(|e| FeatureError::InvalidParameter(e.to_string()))?;
    if let Some((j, _)) = values
        .indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|((_, j), v)| (j, v))
    {
        return Err(FeatureError::NonFinite(columns[j].clone()));
    }
    Ok(values)
}

/// Builds the feature matrix for a selection; normalization follows each spec.
pub fn build_feature_matrix(
    db: &ObjectDatabase,
    selection: &Selection,
    specs: &[FeatureSpec],
) -> Result<FeatureMatrix, FeatureError> {
    let specs = resolve_normalization(specs);
    let (object_ids, rows, skipped) = raw_rows(db, selection, &specs)?;
    if object_ids.is_empty() {
        return Err(FeatureError::EmptySelection);
    }
    let columns = column_names(&specs);
    let mut values = assemble(rows, &columns)?;

    let mut normalization = Vec::with_capacity(columns.len());
    let mut col = 0;
    for spec in &specs {
        for _ in 0..spec.feature.width() {
            let norm = match spec.normalization.unwrap_or(Normalization::None) {
                Normalization::None => ColumnNormalization::None,
                Normalization::ZScore => {
                    let column = values.column(col);
                    let n = column.len() as f64;
                    let mean = column.sum() / n;
                    let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt();
                    if !(std > 0.0) {
                        return Err(FeatureError::ZeroVarianceColumn(columns[col].clone()));
                    }
                    ColumnNormalization::ZScore { mean, std }
                }
            };
            values.column_mut(col).mapv_inplace(|v| norm.apply(v));
            normalization.push(norm);
            col += 1;
        }
    }
    Ok(FeatureMatrix {
        object_ids,
        columns,
        values,
        normalization,
        skipped,
    })
}

/// Builds a matrix using a previously recorded per-column normalization.
pub fn build_with_normalization(
    db: &ObjectDatabase,
    selection: &Selection,
    specs: &[FeatureSpec],
    normalization: &[ColumnNormalization],
) -> Result<FeatureMatrix, FeatureError> {
    let (object_ids, rows, skipped) = raw_rows(db, selection, specs)?;
    let columns = column_names(specs);
    if normalization.len() != columns.len() {
        return Err(FeatureError::InvalidParameter(format!(
            "{} normalization records for {} columns",
            normalization.len(),
            columns.len()
        )));
    }
    let mut values = assemble(rows, &columns)?;
    for (j, norm) in normalization.iter().enumerate() {
        values.column_mut(j).mapv_inplace(|v| norm.apply(v));
    }
    Ok(FeatureMatrix {
        object_ids,
        columns,
        values,
        normalization: normalization.to_vec(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::DatabaseMeta;

    fn traj(points: &[[f64; 3]]) -> Trajectory {
        Trajectory::from_positions("t", 0, points.iter().copied().map(Point3::from_array)).unwrap()
    }

    #[test]
    fn start_and_end() {
        let t = traj(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(start_point(&t), Point3::new(1.0, 2.0, 3.0));
        assert_eq!(end_point(&t), Point3::new(4.0, 5.0, 6.0));
        let line = traj(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 2.0, 0.0]]);
        assert_eq!(start_point(&line), Point3::ORIGIN);
    }

    #[test]
    fn curvilinear_speed_examples() {
        let t = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
        assert_eq!(mean_curvilinear_speed(&t, true).unwrap(), 1.0);
        let still = traj(&[[3.0, 3.0, 3.0]; 5]);
        assert_eq!(mean_curvilinear_speed(&still, true).unwrap(), 0.0);
    }

    #[test]
    fn curvilinear_speed_rejects_gaps_when_strict() {
        let t = Trajectory::new(
            "g",
            vec![
                crate::trajectory::Sample::new(0, Point3::ORIGIN),
                crate::trajectory::Sample::new(2, Point3::new(1.0, 0.0, 0.0)),
            ],
        )
        .unwrap();
        assert_eq!(
            mean_curvilinear_speed(&t, true),
            Err(FeatureError::FrameGap { from: 0, to: 2 })
        );
        assert_eq!(mean_curvilinear_speed(&t, false).unwrap(), 1.0);
    }

    #[test]
    fn collinear_path() {
        let t = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(straightness(&t), 1.0);
        assert_eq!(mean_turning_angle(&t).unwrap(), 0.0);
        assert_eq!(path_length(&t), 3.0);
    }

    #[test]
    fn out_and_back_path() {
        let t = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(straightness(&t), 0.0);
        assert!((mean_turning_angle(&t).unwrap() - 180.0).abs() < 1e-12);
    }

    #[test]
    fn turning_angle_needs_three_samples() {
        let t = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(mean_turning_angle(&t), Err(FeatureError::TooFewSamples { needed: 3, got: 2 })));
    }

    #[test]
    fn turning_angle_skips_stationary_segments() {
        let t = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(mean_turning_angle(&t).unwrap(), 0.0);
        let corner = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
        assert!((mean_turning_angle(&corner).unwrap() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn plane_angle_examples() {
        let up = traj(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let flat = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let n = Point3::new(0.0, 1.0, 0.0);
        assert_eq!(plane_angle(&up, n).unwrap(), 90.0);
        assert_eq!(plane_angle(&flat, n).unwrap(), 0.0);
        let back = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(plane_angle(&back, n), Err(FeatureError::ZeroDisplacement));
        assert!(plane_angle(&up, Point3::ORIGIN).is_err());
        let spec = FeatureSpec::new(FeatureKind::PlaneAngle {
            normal: [0.0, 1.0, 0.0],
            zero_displacement_as_zero: true,
        });
        assert_eq!(spec.evaluate(&back, &FeatureContext::default()).unwrap(), vec![0.0]);
    }

    #[test]
    fn projection_range_examples() {
        let params = ProjectionParams {
            angle_deg: 0.0,
            rotation_axis: Axis::Y,
            projection_plane: Plane::Xy,
            extent_axis: Axis::X,
        };
        let t = traj(&[[0.0, 5.0, 1.0], [2.0, 3.0, -1.0], [1.0, 0.0, 0.0]]);
        assert_eq!(rotated_projection_range(&t, &params, Point3::ORIGIN).unwrap(), 2.0);
        let still = traj(&[[1.0, 2.0, 3.0]; 4]);
        assert_eq!(rotated_projection_range(&still, &params, Point3::ORIGIN).unwrap(), 0.0);
    }

    #[test]
    fn projection_params_are_validated() {
        let mut p = ProjectionParams {
            angle_deg: 360.0,
            rotation_axis: Axis::Y,
            projection_plane: Plane::Xy,
            extent_axis: Axis::X,
        };
        assert!(p.validate().is_err());
        p.angle_deg = 45.0;
        p.extent_axis = Axis::Z;
        assert!(p.validate().is_err());
    }

    fn small_db() -> ObjectDatabase {
        let a = Trajectory::from_positions("a", 0, [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let b = Trajectory::from_positions("b", 0, [Point3::new(5.0, 6.0, 7.0), Point3::new(5.0, 8.0, 7.0)]).unwrap();
        ObjectDatabase::new("small", vec![a, b], DatabaseMeta::default()).unwrap()
    }

    #[test]
    fn start_point_matrix() {
        let db = small_db();
        let m = build_feature_matrix(&db, &Selection::all(&db), &[FeatureSpec::new(FeatureKind::StartPoint)]).unwrap();
        assert_eq!(m.columns, ["start_x", "start_y", "start_z"]);
        assert_eq!(m.values.row(0).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(m.values.row(1).to_vec(), vec![5.0, 6.0, 7.0]);
        assert_eq!(m.normalization, vec![ColumnNormalization::None; 3]);
    }

    #[test]
    fn zero_variance_column_is_an_error() {
        let db = small_db();
        let spec = FeatureSpec::new(FeatureKind::MeanCurvilinearSpeed).with_normalization(Normalization::ZScore);
        // speeds are 1 and 2, straightness is 1 for both
        let equal = FeatureSpec::new(FeatureKind::Straightness).with_normalization(Normalization::ZScore);
        assert!(build_feature_matrix(&db, &Selection::all(&db), &[spec]).is_ok());
        assert_eq!(
            build_feature_matrix(&db, &Selection::all(&db), &[equal]),
            Err(FeatureError::ZeroVarianceColumn("straightness".into()))
        );
    }

    #[test]
    fn mixed_units_default_to_zscore() {
        let specs = resolve_normalization(&[
            FeatureSpec::new(FeatureKind::PathLength),
            FeatureSpec::new(FeatureKind::Straightness),
        ]);
        assert!(specs.iter().all(|s| s.normalization == Some(Normalization::ZScore)));
        let same = resolve_normalization(&[FeatureSpec::new(FeatureKind::StartPoint)]);
        assert_eq!(same[0].normalization, Some(Normalization::None));
    }

    #[test]
    fn feature_errors_abort_or_skip() {
        let a = Trajectory::from_positions("a", 0, [Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let b = Trajectory::from_positions("b", 0, [Point3::ORIGIN, Point3::ORIGIN]).unwrap();
        let db = ObjectDatabase::new("e", vec![a, b], DatabaseMeta::default()).unwrap();
        let angle = FeatureKind::PlaneAngle { normal: [0.0, 1.0, 0.0], zero_displacement_as_zero: false };
        let err = build_feature_matrix(&db, &Selection::all(&db), &[FeatureSpec::new(angle.clone())]).unwrap_err();
        assert!(matches!(err, FeatureError::Object { ref object_id, .. } if object_id == "b"));
        let m = build_feature_matrix(&db, &Selection::all(&db), &[FeatureSpec::new(angle).skipping_errors()]).unwrap();
        assert_eq!(m.object_ids, ["a"]);
        assert_eq!(m.skipped.len(), 1);
        assert_eq!(m.skipped[0].object_id, "b");
    }

    #[test]
    fn empty_selection_is_an_error() {
        let db = small_db();
        assert_eq!(
            build_feature_matrix(&db, &Selection::empty(&db), &[FeatureSpec::new(FeatureKind::PathLength)]),
            Err(FeatureError::EmptySelection)
        );
    }

    #[test]
    fn spec_json_shape() {
        let spec = FeatureSpec::new(FeatureKind::RotatedProjectionRange(ProjectionParams {
            angle_deg: 30.0,
            rotation_axis: Axis::Z,
            projection_plane: Plane::Yz,
            extent_axis: Axis::Y,
        }));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"feature":{"kind":"rotated_projection_range","angle_deg":30.0,"rotation_axis":"z","projection_plane":"yz","extent_axis":"y"},"skip_on_error":false}"#
        );
        let back: FeatureSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
