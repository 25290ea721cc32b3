//! Fixture builders shared by the benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reftrack_core::dataio::simulate_targets;
use reftrack_core::{BBox, SynthConfig, TrackingResult};

/// Uniform costs in `[0, 1)`.
pub fn random_costs(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
}

/// Per-frame detections of `n_targets` bouncing boxes.
pub fn detection_stream(n_targets: u32, n_frames: u32, seed: u64) -> Vec<Vec<BBox>> {
    let cfg = SynthConfig { n_targets, n_frames, seed, ..SynthConfig::default() };
    let tracks = simulate_targets(&cfg).expect("valid fixture config");
    (0..n_frames as usize).map(|f| tracks.iter().map(|t| t[f]).collect()).collect()
}

/// Ground truth and a jittered, partly relabelled prediction of it.
pub fn result_pair(n_targets: u32, n_frames: u32, seed: u64) -> (TrackingResult, TrackingResult) {
    let cfg = SynthConfig { n_targets, n_frames, seed, ..SynthConfig::default() };
    let tracks = simulate_targets(&cfg).expect("valid fixture config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut gt = TrackingResult::new("bench", n_frames, cfg.dims);
    let mut pred = TrackingResult::new("bench", n_frames, cfg.dims);
    for (k, track) in tracks.iter().enumerate() {
        let id = k as u64 + 1;
        for (f, b) in track.iter().enumerate() {
            let frame = f as u32 + 1;
            gt.push(frame, id, *b);
            if rng.random::<f64>() < 0.1 {
                continue;
            }
            let dx = rng.random_range(-3.0..3.0);
            let dy = rng.random_range(-3.0..3.0);
            let shifted = BBox::new(b.x1() + dx, b.y1() + dy, b.x2() + dx, b.y2() + dy).expect("shift keeps size");
            // identity switch halfway through
            let pid = if frame > n_frames / 2 { id + 100 } else { id };
            pred.push(frame, pid, shifted);
        }
    }
    (pred, gt)
}
