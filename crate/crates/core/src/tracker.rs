//! IoU-association tracker: predict every live trajectory, match detections
//! to predictions, then update, spawn or age trajectories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::match_iou;
use crate::dataio::SequenceManifest;
use crate::geometry::{iou_matrix, BBox, ImageDims};
use crate::kalman::{self, KalmanState, NoiseConfig};
use crate::perception::DetectorBackend;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("frame {got} does not follow frame {previous}")]
    FrameOrder { previous: u32, got: u32 },
    #[error("invalid tracker configuration: {0}")]
    InvalidConfig(String),
    #[error("frame {frame} lists id {id} twice")]
    DuplicateId { frame: u32, id: u64 },
    #[error("frame {frame} outside 1..={frame_count}")]
    FrameOutOfRange { frame: u32, frame_count: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryStatus {
    Active,
    Temporary,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub frame: u32,
    pub bbox: BBox,
    pub status: TrajectoryStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub kalman: KalmanState,
    pub status: TrajectoryStatus,
    pub missing_count: u32,
    /// Detections absorbed, including the one that created the trajectory.
    pub hits: u32,
    pub history: Vec<HistoryEntry>,
}

impl Trajectory {
    pub fn is_live(&self) -> bool {
        self.status != TrajectoryStatus::Terminated
    }

    pub fn last_box(&self) -> Option<BBox> {
        self.history.last().map(|h| h.bbox)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Minimum IoU between a detection and a prediction for a match.
    pub tau_iou: f64,
    /// A trajectory missing for more than this many consecutive frames is
    /// terminated.
    pub delta_max: u32,
    /// Also emit coasting (temporary) trajectories at their predicted box.
    pub emit_temporary: bool,
    /// Active trajectories are emitted only once they have this many hits.
    pub min_hits: u32,
    pub noise: NoiseConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau_iou: 0.3,
            delta_max: 30,
            emit_temporary: false,
            min_hits: 0,
            noise: NoiseConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(0.0..=1.0).contains(&self.tau_iou) {
            return Err(TrackerError::InvalidConfig(format!("tau_iou {} outside [0, 1]", self.tau_iou)));
        }
        if self.delta_max < 1 {
            return Err(TrackerError::InvalidConfig("delta_max must be at least 1".into()));
        }
        let n = &self.noise;
        if !(n.position_weight > 0.0 && n.velocity_weight > 0.0 && n.position_weight.is_finite() && n.velocity_weight.is_finite()) {
            return Err(TrackerError::InvalidConfig("noise weights must be positive".into()));
        }
        Ok(())
    }
}

/// Single-sequence tracker state. Frames must arrive in strictly increasing
/// order.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    trajectories: Vec<Trajectory>,
    next_id: u64,
    last_frame: Option<u32>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Self { cfg, trajectories: Vec::new(), next_id: 1, last_frame: None })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Every trajectory ever created, terminated ones included, in id order.
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, id: u64) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    /// Processes one frame and returns the emitted `(id, box)` pairs sorted
    /// by id. Matched and new trajectories emit their detection box.
    pub fn step(&mut self, detections: &[BBox], frame: u32) -> Result<Vec<(u64, BBox)>, TrackerError> {
        if let Some(previous) = self.last_frame {
            if frame <= previous {
                return Err(TrackerError::FrameOrder { previous, got: frame });
            }
        }
        self.last_frame = Some(frame);
        let noise = self.cfg.noise;
        let dets: Vec<BBox> = detections.iter().copied().filter(BBox::has_positive_area).collect();

        let live: Vec<usize> = (0..self.trajectories.len()).filter(|&i| self.trajectories[i].is_live()).collect();
        let mut predicted = Vec::with_capacity(live.len());
        for &i in &live {
            let t = &mut self.trajectories[i];
            t.kalman = kalman::predict(&t.kalman, &noise);
            predicted.push(kalman::state_to_box(&t.kalman).ok());
        }

        // a degenerate prediction cannot overlap anything
        let mut iou = iou_matrix(&dets, &predicted.iter().map(|p| p.unwrap_or_else(zero_box)).collect::<Vec<_>>());
        for (j, p) in predicted.iter().enumerate() {
            if p.is_none() {
                iou.column_mut(j).fill(0.0);
            }
        }
        let assignment = match_iou(&iou, self.cfg.tau_iou);

        let mut emitted = Vec::new();
        for &(d, j) in &assignment.pairs {
            let t = &mut self.trajectories[live[j]];
            let det = dets[d];
            t.kalman = match kalman::update(&t.kalman, &det, &noise) {
                Ok(s) => s,
                Err(_) => kalman::init_from_box(&det, &noise).expect("detections have positive area"),
            };
            t.status = TrajectoryStatus::Active;
            t.missing_count = 0;
            t.hits += 1;
            t.history.push(HistoryEntry { frame, bbox: det, status: TrajectoryStatus::Active });
            if t.hits >= self.cfg.min_hits {
                emitted.push((t.id, det));
            }
        }

        for &j in &assignment.unmatched_cols {
            let t = &mut self.trajectories[live[j]];
            t.missing_count += 1;
            t.status = if t.missing_count > self.cfg.delta_max {
                TrajectoryStatus::Terminated
            } else {
                TrajectoryStatus::Temporary
            };
            let coast = predicted[j].or_else(|| t.last_box()).expect("live trajectories have history");
            t.history.push(HistoryEntry { frame, bbox: coast, status: t.status });
            if t.status == TrajectoryStatus::Temporary && self.cfg.emit_temporary {
                if let Some(p) = predicted[j] {
                    emitted.push((t.id, p));
                }
            }
        }

        for &d in &assignment.unmatched_rows {
            let det = dets[d];
            let id = self.next_id;
            self.next_id += 1;
            let traj = Trajectory {
                id,
                kalman: kalman::init_from_box(&det, &noise).expect("detections have positive area"),
                status: TrajectoryStatus::Active,
                missing_count: 0,
                hits: 1,
                history: vec![HistoryEntry { frame, bbox: det, status: TrajectoryStatus::Active }],
            };
            if traj.hits >= self.cfg.min_hits {
                emitted.push((id, det));
            }
            self.trajectories.push(traj);
        }

        emitted.sort_by_key(|(id, _)| *id);
        Ok(emitted)
    }
}

fn zero_box() -> BBox {
    BBox::new(0.0, 0.0, 0.0, 0.0).expect("degenerate box is representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    pub id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameWarning {
    pub frame: u32,
    pub message: String,
}

/// Per-frame `(id, box)` sets for one sequence. Frames without boxes are
/// absent from `frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingResult {
    pub name: String,
    pub frame_count: u32,
    pub dims: ImageDims,
    pub frames: BTreeMap<u32, Vec<TrackedBox>>,
    #[serde(default)]
    pub warnings: Vec<FrameWarning>,
}

impl TrackingResult {
    pub fn new(name: &str, frame_count: u32, dims: ImageDims) -> Self {
        Self { name: name.to_string(), frame_count, dims, frames: BTreeMap::new(), warnings: Vec::new() }
    }

    pub fn push(&mut self, frame: u32, id: u64, bbox: BBox) {
        self.frames.entry(frame).or_default().push(TrackedBox { id, bbox });
    }

    pub fn boxes(&self, frame: u32) -> &[TrackedBox] {
        self.frames.get(&frame).map_or(&[], Vec::as_slice)
    }

    pub fn num_boxes(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.frames.values().flatten().map(|b| b.id).collect()
    }

    /// Frames within `1..=frame_count`, each id at most once per frame.
    pub fn validate(&self) -> Result<(), TrackerError> {
        for (&frame, boxes) in &self.frames {
            if frame < 1 || frame > self.frame_count {
                return Err(TrackerError::FrameOutOfRange { frame, frame_count: self.frame_count });
            }
            let mut seen = BTreeSet::new();
            for b in boxes {
                if !seen.insert(b.id) {
                    return Err(TrackerError::DuplicateId { frame, id: b.id });
                }
            }
        }
        Ok(())
    }
}

/// Tracks one expression through a sequence. A backend failure on a frame
/// becomes an empty detection set plus a warning.
pub fn run_sequence(
    backend: &mut dyn DetectorBackend,
    manifest: &SequenceManifest,
    query: &str,
    cfg: &TrackerConfig,
) -> Result<TrackingResult, TrackerError> {
    let mut tracker = Tracker::new(*cfg)?;
    let mut result = TrackingResult::new(&manifest.name, manifest.frame_count, manifest.dims);
    for frame in manifest.frames() {
        let boxes: Vec<BBox> = match backend.detect(&frame, query) {
            Ok(dets) => dets.into_iter().map(|d| d.bbox).collect(),
            Err(e) => {
                log::warn!("{} frame {}: {e}", manifest.name, frame.index);
                result.warnings.push(FrameWarning { frame: frame.index, message: e.to_string() });
                Vec::new()
            }
        };
        for (id, bbox) in tracker.step(&boxes, frame.index)? {
            result.push(frame.index, id, bbox);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn cfg(delta_max: u32) -> TrackerConfig {
        TrackerConfig { delta_max, ..TrackerConfig::default() }
    }

    #[test]
    fn initialization() {
        let mut t = Tracker::new(cfg(30)).unwrap();
        let out = t.step(&[bb(0., 0., 10., 10.), bb(50., 50., 70., 80.)], 1).unwrap();
        assert_eq!(out.iter().map(|(id, _)| *id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(t.trajectories().iter().all(|tr| tr.status == TrajectoryStatus::Active && tr.missing_count == 0));
    }

    #[test]
    fn match_keeps_identity() {
        let mut t = Tracker::new(cfg(30)).unwrap();
        t.step(&[bb(0., 0., 100., 100.)], 1).unwrap();
        // the first prediction of a fresh track is its own box (zero velocity)
        let det = bb(0., 0., 100., 90.);
        assert!((iou(&det, &bb(0., 0., 100., 100.)) - 0.9).abs() < 1e-12);
        let out = t.step(&[det], 2).unwrap();
        assert_eq!(out, vec![(1, det)]);
        let tr = t.trajectory(1).unwrap();
        assert_eq!((tr.status, tr.missing_count), (TrajectoryStatus::Active, 0));
        assert_eq!(t.trajectories().len(), 1);
    }

    #[test]
    fn temporary_then_terminated() {
        let mut t = Tracker::new(cfg(2)).unwrap();
        t.step(&[bb(0., 0., 10., 10.)], 1).unwrap();
        let expected = [
            (TrajectoryStatus::Temporary, 1),
            (TrajectoryStatus::Temporary, 2),
            (TrajectoryStatus::Terminated, 3),
        ];
        for (k, (status, missing)) in expected.into_iter().enumerate() {
            let out = t.step(&[], 2 + k as u32).unwrap();
            assert!(out.is_empty());
            let tr = t.trajectory(1).unwrap();
            assert_eq!((tr.status, tr.missing_count), (status, missing));
        }
        // terminated is absorbing and ids are not reused
        let out = t.step(&[bb(0., 0., 10., 10.)], 5).unwrap();
        assert_eq!(out[0].0, 2);
        assert_eq!(t.trajectory(1).unwrap().status, TrajectoryStatus::Terminated);
    }

    #[test]
    fn temporary_is_reacquired_and_optionally_emitted() {
        let c = TrackerConfig { emit_temporary: true, ..cfg(5) };
        let mut t = Tracker::new(c).unwrap();
        t.step(&[bb(0., 0., 10., 10.)], 1).unwrap();
        let coast = t.step(&[], 2).unwrap();
        assert_eq!(coast.len(), 1);
        let back = t.step(&[bb(0., 0., 10., 10.)], 3).unwrap();
        assert_eq!(back[0].0, 1);
        assert_eq!(t.trajectory(1).unwrap().status, TrajectoryStatus::Active);
    }

    #[test]
    fn frame_order_enforced() {
        let mut t = Tracker::new(cfg(30)).unwrap();
        t.step(&[], 3).unwrap();
        assert_eq!(t.step(&[], 3), Err(TrackerError::FrameOrder { previous: 3, got: 3 }));
        assert!(t.step(&[], 2).is_err());
    }

    #[test]
    fn zero_area_detections_ignored() {
        let mut t = Tracker::new(cfg(30)).unwrap();
        let out = t.step(&[bb(5., 5., 5., 9.)], 1).unwrap();
        assert!(out.is_empty());
        assert!(t.trajectories().is_empty());
    }

    #[test]
    fn min_hits_delays_emission() {
        let c = TrackerConfig { min_hits: 2, ..cfg(30) };
        let mut t = Tracker::new(c).unwrap();
        assert!(t.step(&[bb(0., 0., 10., 10.)], 1).unwrap().is_empty());
        assert_eq!(t.step(&[bb(0., 0., 10., 10.)], 2).unwrap().len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(Tracker::new(TrackerConfig { tau_iou: 1.5, ..TrackerConfig::default() }).is_err());
        assert!(Tracker::new(TrackerConfig { delta_max: 0, ..TrackerConfig::default() }).is_err());
    }

    #[test]
    fn result_validation() {
        let dims = ImageDims::new(10, 10).unwrap();
        let mut r = TrackingResult::new("s", 2, dims);
        r.push(1, 1, bb(0., 0., 1., 1.));
        assert!(r.validate().is_ok());
        r.push(1, 1, bb(0., 0., 2., 2.));
        assert_eq!(r.validate(), Err(TrackerError::DuplicateId { frame: 1, id: 1 }));
        let mut r = TrackingResult::new("s", 2, dims);
        r.push(3, 1, bb(0., 0., 1., 1.));
        assert!(r.validate().is_err());
    }
}
