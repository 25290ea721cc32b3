//! On-disk sequence layout, MOT text files and the synthetic sequence
//! generator.
//!
//! A sequence directory looks like
//!
//! ```text
//! <root>/seqinfo.json        {"name": ..., "width": ..., "height": ...}
//! <root>/visible/000001.jpg  RGB frames, 1-based, zero padded to six digits
//! <root>/infrared/000001.jpg thermal frames, pixel-aligned with visible/
//! <root>/gt.txt              MOT ground truth: frame,id,x,y,w,h,conf,class,visibility
//! <root>/expressions.json    [{"expression": ..., "targets": [{"id": 1, "ranges": [[1, 200]]}]}]
//! ```
//!
//! A dataset root is either one sequence directory or a directory whose
//! subdirectories are sequences.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, ImageDims};
use crate::tracker::TrackingResult;

pub const RGB_DIR: &str = "visible";
pub const THERMAL_DIR: &str = "infrared";
pub const GT_FILE: &str = "gt.txt";
pub const EXPRESSIONS_FILE: &str = "expressions.json";
pub const SEQINFO_FILE: &str = "seqinfo.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot load sequence at {path}: {message}")]
    SequenceLoad { path: PathBuf, message: String },
    #[error("{rgb} RGB frames but {thermal} thermal frames")]
    AlignmentViolation { rgb: usize, thermal: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid expression {expression:?}: {message}")]
    InvalidExpression { expression: String, message: String },
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn frame_file_name(frame: u32) -> String {
    format!("{frame:06}.jpg")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub name: String,
    pub root: PathBuf,
    pub rgb_frames: Vec<PathBuf>,
    pub thermal_frames: Vec<PathBuf>,
    pub dims: ImageDims,
    pub frame_count: u32,
}

/// Paths of one aligned RGB/thermal frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRef {
    /// 1-based frame index.
    pub index: u32,
    pub rgb: PathBuf,
    pub thermal: PathBuf,
}

impl SequenceManifest {
    pub fn frame(&self, index: u32) -> Option<FrameRef> {
        let i = usize::try_from(index.checked_sub(1)?).ok()?;
        Some(FrameRef {
            index,
            rgb: self.rgb_frames.get(i)?.clone(),
            thermal: self.thermal_frames.get(i)?.clone(),
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameRef> + '_ {
        (1..=self.frame_count).filter_map(|i| self.frame(i))
    }
}

/// One line of a MOT text file. Fields past `conf` are kept verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRecord {
    pub frame: u32,
    pub id: u64,
    pub bbox: BBox,
    pub conf: f64,
    pub extra: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Sorted by (frame, id).
    pub records: Vec<MotRecord>,
}

impl GroundTruth {
    pub fn new(mut records: Vec<MotRecord>) -> Self {
        records.sort_by_key(|r| (r.frame, r.id));
        Self { records }
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// `(id, box)` pairs present at `frame`.
    pub fn boxes_at(&self, frame: u32) -> impl Iterator<Item = (u64, BBox)> + '_ {
        let start = self.records.partition_point(|r| r.frame < frame);
        self.records[start..]
            .iter()
            .take_while(move |r| r.frame == frame)
            .map(|r| (r.id, r.bbox))
    }

    /// Ground truth restricted to the targets and frame ranges of `expr`.
    pub fn for_expression(&self, expr: &ExpressionAnnotation, manifest: &SequenceManifest) -> TrackingResult {
        let mut out = TrackingResult::new(&manifest.name, manifest.frame_count, manifest.dims);
        for r in &self.records {
            if expr.covers(r.id, r.frame) {
                out.push(r.frame, r.id, r.bbox);
            }
        }
        out
    }

    /// All ground truth as a tracking result.
    pub fn to_result(&self, manifest: &SequenceManifest) -> TrackingResult {
        let mut out = TrackingResult::new(&manifest.name, manifest.frame_count, manifest.dims);
        for r in &self.records {
            out.push(r.frame, r.id, r.bbox);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRanges {
    pub id: u64,
    /// Inclusive `[start, end]` frame ranges, sorted and disjoint.
    pub ranges: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionAnnotation {
    pub expression: String,
    pub targets: Vec<TargetRanges>,
}

impl ExpressionAnnotation {
    pub fn covers(&self, id: u64, frame: u32) -> bool {
        self.targets
            .iter()
            .filter(|t| t.id == id)
            .any(|t| t.ranges.iter().any(|[s, e]| (*s..=*e).contains(&frame)))
    }

    /// File-name-safe identifier derived from the expression text.
    pub fn slug(&self) -> String {
        expression_slug(&self.expression)
    }

    fn validate(&self, frame_count: u32, gt: &GroundTruth) -> Result<(), DataError> {
        let fail = |message: String| DataError::InvalidExpression { expression: self.expression.clone(), message };
        if self.expression.trim().is_empty() {
            return Err(fail("empty expression text".into()));
        }
        let present: HashSet<(u64, u32)> = gt.records.iter().map(|r| (r.id, r.frame)).collect();
        for t in &self.targets {
            let mut prev_end = 0u32;
            for &[start, end] in &t.ranges {
                if start < 1 || end > frame_count || start > end {
                    return Err(fail(format!("target {} range [{start}, {end}] outside [1, {frame_count}]", t.id)));
                }
                if start <= prev_end {
                    return Err(fail(format!("target {} ranges overlap or are unsorted", t.id)));
                }
                prev_end = end;
                if let Some(f) = (start..=end).find(|f| !present.contains(&(t.id, *f))) {
                    return Err(fail(format!("target {} has no ground-truth box at frame {f}", t.id)));
                }
            }
        }
        Ok(())
    }
}

pub fn expression_slug(text: &str) -> String {
    let mut slug = String::with_capacity(text.len());
    let mut dash = false;
    for c in text.trim().chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
            dash = false;
        } else if !dash && !slug.is_empty() {
            slug.push('-');
            dash = true;
        }
    }
    while slug.ends_with('-') {
        slug.pop();
    }
    if slug.is_empty() {
        slug.push_str("expression");
    }
    slug
}

/// Everything known about one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub manifest: SequenceManifest,
    pub gt: GroundTruth,
    pub expressions: Vec<ExpressionAnnotation>,
}

fn load_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::SequenceLoad { path: path.to_path_buf(), message: message.into() }
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    if !dir.is_dir() {
        return Err(load_err(dir, "missing frame directory"));
    }
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, path: &Path, line: usize) -> Result<T, DataError> {
    field.trim().parse().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} field {field:?}"),
    })
}

/// Parses MOT text (`frame,id,x,y,w,h[,conf[,...]]`). Blank lines are skipped.
pub fn parse_mot(text: &str, path: &Path) -> Result<Vec<MotRecord>, DataError> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() < 6 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected at least 6 fields, got {}", fields.len()),
            });
        }
        let frame: u32 = parse_field(fields[0], "frame", path, line)?;
        let id: u64 = parse_field(fields[1], "id", path, line)?;
        if frame == 0 {
            return Err(DataError::Parse { path: path.to_path_buf(), line, message: "frames are 1-based".into() });
        }
        let x: f64 = parse_field(fields[2], "x", path, line)?;
        let y: f64 = parse_field(fields[3], "y", path, line)?;
        let w: f64 = parse_field(fields[4], "w", path, line)?;
        let h: f64 = parse_field(fields[5], "h", path, line)?;
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let conf = match fields.get(6) {
            Some(f) => parse_field(f, "conf", path, line)?,
            None => 1.0,
        };
        let extra = fields.iter().skip(7).map(|s| s.trim().to_string()).collect();
        records.push(MotRecord { frame, id, bbox, conf, extra });
    }
    Ok(records)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn load_sequence(root: &Path) -> Result<Sequence, DataError> {
    if !root.is_dir() {
        return Err(load_err(root, "not a directory"));
    }
    let info: SequenceInfo = read_json(&root.join(SEQINFO_FILE))?;
    let dims = ImageDims::new(info.width, info.height).map_err(|e| load_err(root, e.to_string()))?;
    let rgb_frames = list_frames(&root.join(RGB_DIR))?;
    let thermal_frames = list_frames(&root.join(THERMAL_DIR))?;
    if rgb_frames.len() != thermal_frames.len() {
        return Err(DataError::AlignmentViolation { rgb: rgb_frames.len(), thermal: thermal_frames.len() });
    }
    if rgb_frames.is_empty() {
        return Err(load_err(root, "sequence has no frames"));
    }
    let frame_count = u32::try_from(rgb_frames.len()).map_err(|_| load_err(root, "too many frames"))?;

    let gt_path = root.join(GT_FILE);
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| load_err(&gt_path, e.to_string()))?;
    let records = parse_mot(&gt_text, &gt_path)?;
    if let Some(r) = records.iter().find(|r| r.frame > frame_count) {
        return Err(DataError::Parse {
            path: gt_path,
            line: 0,
            message: format!("frame {} beyond the {frame_count} frames on disk", r.frame),
        });
    }
    let gt = GroundTruth::new(records);

    let expressions: Vec<ExpressionAnnotation> = read_json(&root.join(EXPRESSIONS_FILE))?;
    let mut slugs = HashSet::new();
    for e in &expressions {
        e.validate(frame_count, &gt)?;
        if !slugs.insert(e.slug()) {
            return Err(DataError::InvalidExpression {
                expression: e.expression.clone(),
                message: "duplicate expression".into(),
            });
        }
    }

    Ok(Sequence {
        manifest: SequenceManifest {
            name: info.name,
            root: root.to_path_buf(),
            rgb_frames,
            thermal_frames,
            dims,
            frame_count,
        },
        gt,
        expressions,
    })
}

/// Loads one sequence, or every sequence directory directly under `root`
/// (sorted by directory name).
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>, DataError> {
    if root.join(SEQINFO_FILE).is_file() {
        return Ok(vec![load_sequence(root)?]);
    }
    if !root.is_dir() {
        return Err(load_err(root, "dataset root is not a directory"));
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.join(SEQINFO_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(load_err(root, "no sequences found"));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn fmt2(v: f64) -> String {
    let s = format!("{:.2}", round2(v));
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

/// `x,y,w,h` at two decimals. Width and height come from the rounded
/// corners so reloading recovers each corner within 0.005 px.
fn xywh_fields(b: &BBox) -> String {
    let x = round2(b.x1());
    let y = round2(b.y1());
    let w = round2(b.x2()) - x;
    let h = round2(b.y2()) - y;
    format!("{},{},{},{}", fmt2(x), fmt2(y), fmt2(w), fmt2(h))
}

/// MOT result text: `frame,id,x,y,w,h,1,-1,-1,-1`, sorted by frame then id.
pub fn format_results(r: &TrackingResult) -> String {
    let mut out = String::new();
    for (frame, boxes) in &r.frames {
        let mut sorted: Vec<_> = boxes.iter().collect();
        sorted.sort_by_key(|b| b.id);
        for b in sorted {
            let _ = writeln!(out, "{frame},{},{},1,-1,-1,-1", b.id, xywh_fields(&b.bbox));
        }
    }
    out
}

pub fn write_results(r: &TrackingResult, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, format_results(r))?;
    Ok(())
}

/// Reads a MOT result file into a result shaped like `manifest`.
pub fn load_results(path: &Path, manifest: &SequenceManifest) -> Result<TrackingResult, DataError> {
    let text = fs::read_to_string(path)?;
    let mut out = TrackingResult::new(&manifest.name, manifest.frame_count, manifest.dims);
    for r in parse_mot(&text, path)? {
        out.push(r.frame, r.id, r.bbox);
    }
    Ok(out)
}

pub fn format_gt(gt: &GroundTruth) -> String {
    let mut out = String::new();
    for r in &gt.records {
        let _ = write!(out, "{},{},{},{}", r.frame, r.id, xywh_fields(&r.bbox), r.conf);
        for e in &r.extra {
            let _ = write!(out, ",{e}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub n_targets: u32,
    pub n_frames: u32,
    pub dims: ImageDims,
    /// Speed range in px/frame; direction is uniform.
    pub speed: (f64, f64),
    /// Side-length range in px for width and height independently.
    pub size: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            n_targets: 5,
            n_frames: 200,
            dims: ImageDims::new(640, 480).expect("valid dims"),
            speed: (0.5, 3.0),
            size: (30.0, 80.0),
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_targets == 0 || self.n_frames == 0 {
            return bad("n_targets and n_frames must be positive");
        }
        let (s0, s1) = self.speed;
        if !(s0 >= 0.0 && s1 >= s0 && s1.is_finite()) {
            return bad("speed range must satisfy 0 <= min <= max");
        }
        let (z0, z1) = self.size;
        let min_side = f64::from(self.dims.width().min(self.dims.height()));
        if !(z0 > 0.0 && z1 >= z0 && z1 <= min_side) {
            return bad("size range must satisfy 0 < min <= max <= smaller image side");
        }
        Ok(())
    }
}

/// Bounces a 1-D interval `[pos, pos + len]` inside `[0, extent]`.
fn reflect(pos: &mut f64, vel: &mut f64, len: f64, extent: f64) {
    let hi = extent - len;
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(0.0, hi);
}

/// Constant-velocity targets with wall bounce. Returns, per target, one box
/// per frame.
pub fn simulate_targets(cfg: &SynthConfig) -> Result<Vec<Vec<BBox>>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = f64::from(cfg.dims.width());
    let height = f64::from(cfg.dims.height());
    let mut tracks = Vec::with_capacity(cfg.n_targets as usize);
    for _ in 0..cfg.n_targets {
        let w = rng.random_range(cfg.size.0..=cfg.size.1);
        let h = rng.random_range(cfg.size.0..=cfg.size.1);
        let mut x = rng.random_range(0.0..=width - w);
        let mut y = rng.random_range(0.0..=height - h);
        let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
        let angle = rng.random_range(0.0..TAU);
        let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
        let mut boxes = Vec::with_capacity(cfg.n_frames as usize);
        for frame in 0..cfg.n_frames {
            if frame > 0 {
                x += vx;
                y += vy;
                reflect(&mut x, &mut vx, w, width);
                reflect(&mut y, &mut vy, h, height);
            }
            boxes.push(BBox::from_xywh(x, y, w, h).map_err(|e| DataError::InvalidConfig(e.to_string()))?);
        }
        tracks.push(boxes);
    }
    Ok(tracks)
}

fn blank_jpeg(dims: ImageDims) -> Result<Vec<u8>, DataError> {
    let img = image::GrayImage::new(dims.width(), dims.height());
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Jpeg)
        .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
    Ok(bytes.into_inner())
}

pub const AUTO_EXPRESSION: &str = "all moving targets";

/// Writes a synthetic sequence under `dest` and returns it with its exact
/// (unrounded) ground truth.
pub fn synth_generate(cfg: &SynthConfig, dest: &Path) -> Result<Sequence, DataError> {
    let tracks = simulate_targets(cfg)?;
    let rgb_dir = dest.join(RGB_DIR);
    let thermal_dir = dest.join(THERMAL_DIR);
    fs::create_dir_all(&rgb_dir)?;
    fs::create_dir_all(&thermal_dir)?;

    let frame_bytes = blank_jpeg(cfg.dims)?;
    let mut rgb_frames = Vec::with_capacity(cfg.n_frames as usize);
    let mut thermal_frames = Vec::with_capacity(cfg.n_frames as usize);
    for frame in 1..=cfg.n_frames {
        let name = frame_file_name(frame);
        let (rgb, thermal) = (rgb_dir.join(&name), thermal_dir.join(&name));
        fs::write(&rgb, &frame_bytes)?;
        fs::write(&thermal, &frame_bytes)?;
        rgb_frames.push(rgb);
        thermal_frames.push(thermal);
    }

    let mut records = Vec::new();
    for (t, boxes) in tracks.iter().enumerate() {
        for (f, bbox) in boxes.iter().enumerate() {
            records.push(MotRecord {
                frame: f as u32 + 1,
                id: t as u64 + 1,
                bbox: *bbox,
                conf: 1.0,
                extra: vec!["1".into(), "1".into()],
            });
        }
    }
    let gt = GroundTruth::new(records);
    fs::write(dest.join(GT_FILE), format_gt(&gt))?;

    let expressions = vec![ExpressionAnnotation {
        expression: AUTO_EXPRESSION.to_string(),
        targets: (1..=u64::from(cfg.n_targets))
            .map(|id| TargetRanges { id, ranges: vec![[1, cfg.n_frames]] })
            .collect(),
    }];
    let json = serde_json::to_string_pretty(&expressions).map_err(|e| DataError::Io(e.into()))?;
    fs::write(dest.join(EXPRESSIONS_FILE), json + "\n")?;
    let info = SequenceInfo { name: cfg.name.clone(), width: cfg.dims.width(), height: cfg.dims.height() };
    let json = serde_json::to_string_pretty(&info).map_err(|e| DataError::Io(e.into()))?;
    fs::write(dest.join(SEQINFO_FILE), json + "\n")?;

    Ok(Sequence {
        manifest: SequenceManifest {
            name: cfg.name.clone(),
            root: dest.to_path_buf(),
            rgb_frames,
            thermal_frames,
            dims: cfg.dims,
            frame_count: cfg.n_frames,
        },
        gt,
        expressions,
    })
}

/// Per-frame boxes of each id, handy for tests and summaries.
pub fn boxes_by_id(gt: &GroundTruth) -> BTreeMap<u64, Vec<(u32, BBox)>> {
    let mut out: BTreeMap<u64, Vec<(u32, BBox)>> = BTreeMap::new();
    for r in &gt.records {
        out.entry(r.id).or_default().push((r.frame, r.bbox));
    }
    out
}
