//! Micro-image feature observations: which point was seen in which micro
//! image of which view, and where.

use std::ops::Range;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point: usize,
    pub view: usize,
    pub lens: usize,
    /// Distorted raw-image position, pixels.
    pub xy: Vector2<f64>,
}

/// All micro-image observations of one point in one view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Track {
    pub point: usize,
    pub view: usize,
    pub records: Range<usize>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObservationError {
    #[error("duplicate observation of point {point} in view {view}, lens {lens}")]
    Duplicate { point: usize, view: usize, lens: usize },
    #[error("observation has a non-finite position (point {point}, view {view}, lens {lens})")]
    NonFinite { point: usize, view: usize, lens: usize },
}

/// Observations sorted by `(point, view, lens)` with per-point and per-view
/// indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    records: Vec<Observation>,
    tracks: Vec<Track>,
    /// Range into `tracks` for every point id.
    point_tracks: Vec<Range<usize>>,
    /// Track indices per view id.
    view_tracks: Vec<Vec<usize>>,
}

/// What a minimum-view filtering pass removed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub dropped_points: Vec<usize>,
    pub dropped_records: usize,
}

impl ObservationSet {
    pub fn new(mut records: Vec<Observation>) -> Result<Self, ObservationError> {
        for r in &records {
            if !(r.xy.x.is_finite() && r.xy.y.is_finite()) {
                return Err(ObservationError::NonFinite {
                    point: r.point,
                    view: r.view,
                    lens: r.lens,
                });
            }
        }
        records.sort_by_key(|r| (r.point, r.view, r.lens));
        for w in records.windows(2) {
            if (w[0].point, w[0].view, w[0].lens) == (w[1].point, w[1].view, w[1].lens) {
                return Err(ObservationError::Duplicate {
                    point: w[0].point,
                    view: w[0].view,
                    lens: w[0].lens,
                });
            }
        }
        let num_points = records.iter().map(|r| r.point + 1).max().unwrap_or(0);
        let num_views = records.iter().map(|r| r.view + 1).max().unwrap_or(0);
        let mut tracks: Vec<Track> = Vec::new();
        let mut start = 0;
        for i in 1..=records.len() {
            if i == records.len() || (records[i].point, records[i].view) != (records[start].point, records[start].view)
            {
                tracks.push(Track {
                    point: records[start].point,
                    view: records[start].view,
                    records: start..i,
                });
                start = i;
            }
        }
        let mut point_tracks = vec![0..0; num_points];
        let mut t = 0;
        while t < tracks.len() {
            let p = tracks[t].point;
            let s = t;
            while t < tracks.len() && tracks[t].point == p {
                t += 1;
            }
            point_tracks[p] = s..t;
        }
        let mut view_tracks = vec![Vec::new(); num_views];
        for (i, tr) in tracks.iter().enumerate() {
            view_tracks[tr.view].push(i);
        }
        Ok(Self {
            records,
            tracks,
            point_tracks,
            view_tracks,
        })
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One past the largest point id.
    pub fn num_points(&self) -> usize {
        self.point_tracks.len()
    }

    /// One past the largest view id.
    pub fn num_views(&self) -> usize {
        self.view_tracks.len()
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track_records(&self, track: &Track) -> &[Observation] {
        &self.records[track.records.clone()]
    }

    /// Tracks of a point, ordered by view.
    pub fn point_tracks(&self, point: usize) -> &[Track] {
        match self.point_tracks.get(point) {
            Some(r) => &self.tracks[r.clone()],
            None => &[],
        }
    }

    /// Range into [`records`](Self::records) covering all observations of `point`.
    pub fn point_records(&self, point: usize) -> Range<usize> {
        let tr = self.point_tracks(point);
        match (tr.first(), tr.last()) {
            (Some(a), Some(b)) => a.records.start..b.records.end,
            _ => 0..0,
        }
    }

    /// Indices into [`tracks`](Self::tracks) of all tracks in `view`.
    pub fn view_tracks(&self, view: usize) -> &[usize] {
        self.view_tracks.get(view).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn views_of_point(&self, point: usize) -> impl Iterator<Item = usize> + '_ {
        self.point_tracks(point).iter().map(|t| t.view)
    }

    /// Removes points observed in fewer than `min_views` views.
    pub fn filter_min_views(&self, min_views: usize) -> (Self, FilterReport) {
        let mut report = FilterReport::default();
        let mut keep = Vec::with_capacity(self.records.len());
        for p in 0..self.num_points() {
            let tr = self.point_tracks(p);
            if tr.is_empty() {
                continue;
            }
            if tr.len() >= min_views {
                keep.extend_from_slice(&self.records[self.point_records(p)]);
            } else {
                report.dropped_points.push(p);
                report.dropped_records += self.point_records(p).len();
            }
        }
        let set = Self::new(keep).expect("subset of a valid set is valid");
        (set, report)
    }

    /// Keeps only records accepted by `keep`.
    pub fn retain(&self, mut keep: impl FnMut(&Observation) -> bool) -> Self {
        let records = self.records.iter().copied().filter(|r| keep(r)).collect();
        Self::new(records).expect("subset of a valid set is valid")
    }
}
