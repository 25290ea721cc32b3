//! Referring multi-object tracking over paired RGB and thermal video.
//!
//! The crate holds the deterministic pieces: box geometry, optimal
//! assignment, a constant-velocity Kalman filter, the IoU-association
//! tracker, HOTA-family metrics, the rule-based rewards and group policy
//! objective used for fine-tuning the detector, dataset I/O and the detector
//! backends.

pub mod assignment;
pub mod dataio;
pub mod geometry;
pub mod gspo;
pub mod kalman;
pub mod metrics;
pub mod perception;
pub mod rewards;
pub mod tracker;

pub use assignment::{match_iou, solve, Assignment};
pub use dataio::{ExpressionAnnotation, FrameRef, GroundTruth, Sequence, SequenceManifest, SynthConfig};
pub use geometry::{iou, BBox, ImageDims};
pub use gspo::{AdvantageMode, GspoConfig};
pub use kalman::{KalmanState, NoiseConfig};
pub use metrics::{evaluate, Aggregation, MetricReport};
pub use perception::{Detection, DetectorBackend, PerturbationConfig};
pub use rewards::{parse_answer, ParsedAnswer, RewardConfig};
pub use tracker::{Tracker, TrackerConfig, TrackingResult, TrajectoryStatus};
