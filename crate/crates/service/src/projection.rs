//! Decimated 2-D projections of trajectories for the front and side views.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use trajkd_core::trajectory::{ObjectDatabase, ObjectId, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// x horizontal, y vertical.
    Front,
    /// z horizontal, y vertical.
    Side,
}

impl View {
    pub fn project(self, p: Point3) -> [f64; 2] {
        match self {
            View::Front => [p.x, p.y],
            View::Side => [p.z, p.y],
        }
    }
}

/// Indices of at most `max_points` samples out of `len`, evenly strided and
/// always including the first and last sample. `max_points` must be at least 2.
pub fn decimate_indices(len: usize, max_points: usize) -> Vec<usize> {
    assert!(max_points >= 2, "max_points must be at least 2");
    if len <= max_points {
        return (0..len).collect();
    }
    let last = (len - 1) as u128;
    let steps = (max_points - 1) as u128;
    // integer rounding keeps the choice exact and platform independent
    (0..max_points as u128).map(|k| ((k * last + steps / 2) / steps) as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub object_id: ObjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewProjection {
    pub db_id: String,
    pub view: View,
    pub max_points: usize,
    pub polylines: Vec<Polyline>,
}

/// Projects `ids` (every object when `None`), labelling each with its group when known.
pub fn project(
    db: &ObjectDatabase,
    view: View,
    max_points: usize,
    ids: Option<&[ObjectId]>,
    groups: Option<&BTreeMap<ObjectId, String>>,
) -> ViewProjection {
    let trajs: Vec<_> = match ids {
        Some(ids) => ids.iter().filter_map(|id| db.get(id)).collect(),
        None => db.trajectories().collect(),
    };
    let polylines = trajs
        .into_iter()
        .map(|t| {
            let samples = t.samples();
            Polyline {
                object_id: t.object_id().to_string(),
                group: groups.and_then(|g| g.get(t.object_id()).cloned()),
                points: decimate_indices(samples.len(), max_points)
                    .into_iter()
                    .map(|i| view.project(samples[i].pos))
                    .collect(),
            }
        })
        .collect();
    ViewProjection {
        db_id: db.db_id().to_string(),
        view,
        max_points,
        polylines,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_hundred_to_two_hundred() {
        let idx = decimate_indices(400, 200);
        assert_eq!(idx.len(), 200);
        assert_eq!((idx[0], idx[199]), (0, 399));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn short_tracks_are_kept_whole() {
        assert_eq!(decimate_indices(3, 200), vec![0, 1, 2]);
        assert_eq!(decimate_indices(5, 2), vec![0, 4]);
    }

    #[test]
    fn every_length_keeps_endpoints() {
        for len in 2..120 {
            for max in 2..40 {
                let idx = decimate_indices(len, max);
                assert!(idx.len() <= max);
                assert_eq!(idx[0], 0);
                assert_eq!(*idx.last().unwrap(), len - 1);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
