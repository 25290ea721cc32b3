//! Detector backends: a ground-truth oracle with controllable degradation, a
//! parser over cached completion files, and an HTTP client for a remote
//! vision-language model.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{ExpressionAnnotation, FrameRef, GroundTruth};
use crate::geometry::{clamp_to_image, rescale, BBox, ImageDims};
use crate::rewards::parse_answer;

pub const ENDPOINT_ENV: &str = "REFTRACK_ENDPOINT";
pub const TIMEOUT_ENV: &str = "REFTRACK_TIMEOUT_MS";

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("no cached completion at {0}")]
    MissingCache(PathBuf),
    #[error("remote detection failed after {attempts} attempt(s): {message}")]
    Remote { attempts: u32, message: String },
    #[error("malformed response from detection service: {0}")]
    Protocol(String),
    #[error("invalid perturbation configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    Oracle,
    FalsePositive,
    Parser,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub source: DetectionSource,
}

pub trait DetectorBackend {
    fn detect(&mut self, frame: &FrameRef, query: &str) -> Result<Vec<Detection>, PerceptionError>;
}

/// Degradation model applied by the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    /// Center noise standard deviation as a fraction of the box size.
    pub jitter_sigma: f64,
    /// Standard deviation of the noise added to log width and log height.
    pub scale_sigma: f64,
    /// Independent per-target, per-frame miss probability.
    pub p_miss: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { jitter_sigma: 0.0, scale_sigma: 0.0, p_miss: 0.0, fp_rate: 0.0, seed: 0 }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let ok = self.jitter_sigma >= 0.0
            && self.jitter_sigma.is_finite()
            && self.scale_sigma >= 0.0
            && self.scale_sigma.is_finite()
            && (0.0..=1.0).contains(&self.p_miss)
            && self.fp_rate >= 0.0
            && self.fp_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(PerceptionError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        self.jitter_sigma == 0.0 && self.scale_sigma == 0.0 && self.p_miss == 0.0 && self.fp_rate == 0.0
    }
}

/// Ground-truth boxes of the expression's targets at `frame`, degraded per
/// `p`. Each target consumes the same random draws whatever the
/// configuration, so runs that differ only in `p_miss` share their noise.
pub fn oracle_detect<R: Rng + ?Sized>(
    gt: &GroundTruth,
    expr: &ExpressionAnnotation,
    frame: u32,
    dims: ImageDims,
    p: &PerturbationConfig,
    rng: &mut R,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (id, bbox) in gt.boxes_at(frame) {
        if !expr.covers(id, frame) {
            continue;
        }
        let u: f64 = rng.random();
        let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if u < p.p_miss {
            continue;
        }
        let bbox = if p.jitter_sigma > 0.0 || p.scale_sigma > 0.0 {
            let (cx, cy) = bbox.center();
            let (w, h) = (bbox.width(), bbox.height());
            let cx = cx + z[0] * p.jitter_sigma * w;
            let cy = cy + z[1] * p.jitter_sigma * h;
            let w = w * (z[2] * p.scale_sigma).exp();
            let h = h * (z[3] * p.scale_sigma).exp();
            match BBox::from_center(cx, cy, w, h) {
                Ok(b) => clamp_to_image(&b, dims),
                Err(_) => continue,
            }
        } else {
            bbox
        };
        if bbox.has_positive_area() {
            out.push(Detection { bbox, confidence: 1.0, source: DetectionSource::Oracle });
        }
    }
    if p.fp_rate > 0.0 {
        let n = Poisson::new(p.fp_rate).map_or(0.0, |d| d.sample(rng)) as usize;
        let (iw, ih) = (f64::from(dims.width()), f64::from(dims.height()));
        for _ in 0..n {
            let w = rng.random_range(0.05..0.3) * iw;
            let h = rng.random_range(0.05..0.3) * ih;
            let x = rng.random_range(0.0..iw - w);
            let y = rng.random_range(0.0..ih - h);
            if let Ok(b) = BBox::from_xywh(x, y, w, h) {
                let b = clamp_to_image(&b, dims);
                if b.has_positive_area() {
                    out.push(Detection { bbox: b, confidence: 1.0, source: DetectionSource::FalsePositive });
                }
            }
        }
    }
    out
}

/// Oracle detector bound to one expression of one sequence.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    gt: GroundTruth,
    expr: ExpressionAnnotation,
    dims: ImageDims,
    perturbation: PerturbationConfig,
    rng: ChaCha8Rng,
}

impl OracleBackend {
    pub fn new(
        gt: GroundTruth,
        expr: ExpressionAnnotation,
        dims: ImageDims,
        perturbation: PerturbationConfig,
    ) -> Result<Self, PerceptionError> {
        perturbation.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(perturbation.seed);
        Ok(Self { gt, expr, dims, perturbation, rng })
    }
}

impl DetectorBackend for OracleBackend {
    fn detect(&mut self, frame: &FrameRef, _query: &str) -> Result<Vec<Detection>, PerceptionError> {
        Ok(oracle_detect(&self.gt, &self.expr, frame.index, self.dims, &self.perturbation, &mut self.rng))
    }
}

/// Reads `<dir>/NNNNNN.txt` completions and extracts their answer boxes.
#[derive(Debug, Clone)]
pub struct ParserBackend {
    dir: PathBuf,
}

impl ParserBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn cache_path(&self, frame: u32) -> PathBuf {
        self.dir.join(format!("{frame:06}.txt"))
    }
}

pub fn parser_detect(completion: &str, source: DetectionSource) -> Vec<Detection> {
    parse_answer(completion)
        .boxes
        .into_iter()
        .map(|bbox| Detection { bbox, confidence: 1.0, source })
        .collect()
}

impl DetectorBackend for ParserBackend {
    fn detect(&mut self, frame: &FrameRef, _query: &str) -> Result<Vec<Detection>, PerceptionError> {
        let path = self.cache_path(frame.index);
        let text = fs::read_to_string(&path).map_err(|_| PerceptionError::MissingCache(path))?;
        Ok(parser_detect(&text, DetectionSource::Parser))
    }
}

const PROMPT_PREFIX: &str = "You are a Visual Language Model specifically designed for paired and perfectly aligned \
RGB + thermal images. Please utilize the information from both modes simultaneously and detect all targets that match: ";
const PROMPT_SUFFIX: &str = " in the image and output their coordinates with [x1,y1,x2,y2] format. First output the \
thinking process in <think></think> tags and then output the final answer in <answer></answer> tags. Note that the \
<answer></answer> tags should not contain any text, only the coordinates in the [x1,y1,x2,y2] format.";

/// Detection prompt for a referring expression. The query is inserted
/// verbatim.
pub fn build_prompt(query: &str) -> Result<String, PerceptionError> {
    if query.trim().is_empty() {
        return Err(PerceptionError::EmptyQuery);
    }
    Ok(format!("{PROMPT_PREFIX}{query}{PROMPT_SUFFIX}"))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectRequest {
    pub rgb_image: String,
    pub thermal_image: String,
    pub prompt: String,
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectResponse {
    pub raw_text: String,
    #[serde(default)]
    pub boxes: Vec<[f64; 4]>,
    pub model_width: u32,
    pub model_height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL; requests go to `<endpoint>/detect`.
    pub endpoint: String,
    pub timeout: Duration,
    /// Extra attempts after a failed one.
    pub retries: u32,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout: Duration::from_millis(30_000), retries: 2 }
    }

    pub fn detect_url(&self) -> String {
        format!("{}/detect", self.endpoint.trim_end_matches('/'))
    }
}

/// Client for the `/detect` service.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    dims: ImageDims,
    agent: ureq::Agent,
    /// Raw completion of the most recent successful request.
    pub last_raw_text: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(PerceptionError),
}

impl RemoteBackend {
    /// `dims` is the sequence's image size; returned boxes are mapped into it.
    pub fn new(cfg: RemoteConfig, dims: ImageDims) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, dims, agent, last_raw_text: None }
    }

    fn request(&self, frame: &FrameRef, query: &str) -> Result<DetectRequest, PerceptionError> {
        Ok(DetectRequest {
            rgb_image: BASE64.encode(fs::read(&frame.rgb)?),
            thermal_image: BASE64.encode(fs::read(&frame.thermal)?),
            prompt: build_prompt(query)?,
            image_width: self.dims.width(),
            image_height: self.dims.height(),
        })
    }

    fn attempt(&self, url: &str, body: &DetectRequest) -> Result<DetectResponse, Attempt> {
        let mut resp = self.agent.post(url).send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}: {}", text.trim())));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(PerceptionError::Remote {
                attempts: 1,
                message: format!("HTTP {status}: {}", text.trim()),
            }));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(PerceptionError::Protocol(e.to_string())))
    }

    /// Sends one frame and returns the parsed, rescaled detections together
    /// with the raw completion.
    pub fn detect_raw(&mut self, frame: &FrameRef, query: &str) -> Result<(Vec<Detection>, String), PerceptionError> {
        let body = self.request(frame, query)?;
        let url = self.cfg.detect_url();
        let attempts = self.cfg.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&url, &body) {
                Ok(resp) => {
                    let model = ImageDims::new(resp.model_width, resp.model_height)
                        .map_err(|e| PerceptionError::Protocol(e.to_string()))?;
                    let dets = parser_detect(&resp.raw_text, DetectionSource::Remote)
                        .into_iter()
                        .filter_map(|mut d| {
                            d.bbox = clamp_to_image(&rescale(&d.bbox, model, self.dims), self.dims);
                            d.bbox.has_positive_area().then_some(d)
                        })
                        .collect();
                    self.last_raw_text = Some(resp.raw_text.clone());
                    return Ok((dets, resp.raw_text));
                }
                Err(Attempt::Fatal(PerceptionError::Remote { message, .. })) => {
                    return Err(PerceptionError::Remote { attempts: attempt, message });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    log::debug!("attempt {attempt}/{attempts} for frame {} failed: {message}", frame.index);
                    last = message;
                }
            }
        }
        Err(PerceptionError::Remote { attempts, message: last })
    }
}

impl DetectorBackend for RemoteBackend {
    fn detect(&mut self, frame: &FrameRef, query: &str) -> Result<Vec<Detection>, PerceptionError> {
        self.detect_raw(frame, query).map(|(d, _)| d)
    }
}

/// Writes `completion` as the cached text for `frame` under `dir`.
pub fn write_cache(dir: &Path, frame: u32, completion: &str) -> Result<(), PerceptionError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{frame:06}.txt")), completion)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{MotRecord, TargetRanges};

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn fixture() -> (GroundTruth, ExpressionAnnotation, ImageDims) {
        let rec = |frame, id, b| MotRecord { frame, id, bbox: b, conf: 1.0, extra: vec![] };
        let gt = GroundTruth::new(vec![
            rec(1, 1, bb(10., 10., 50., 60.)),
            rec(1, 2, bb(100., 100., 150., 170.)),
            rec(1, 3, bb(200., 10., 240., 40.)),
        ]);
        let expr = ExpressionAnnotation {
            expression: "two of them".into(),
            targets: vec![
                TargetRanges { id: 1, ranges: vec![[1, 1]] },
                TargetRanges { id: 2, ranges: vec![[1, 1]] },
            ],
        };
        (gt, expr, ImageDims::new(320, 240).unwrap())
    }

    #[test]
    fn zero_perturbation_passes_through() {
        let (gt, expr, dims) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = oracle_detect(&gt, &expr, 1, dims, &PerturbationConfig::default(), &mut rng);
        let boxes: Vec<BBox> = d.iter().map(|d| d.bbox).collect();
        assert_eq!(boxes, vec![bb(10., 10., 50., 60.), bb(100., 100., 150., 170.)]);
    }

    #[test]
    fn full_miss_is_empty() {
        let (gt, expr, dims) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PerturbationConfig { p_miss: 1.0, ..PerturbationConfig::default() };
        assert!(oracle_detect(&gt, &expr, 1, dims, &p, &mut rng).is_empty());
    }

    #[test]
    fn false_positive_rate() {
        let (gt, expr, dims) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = PerturbationConfig { fp_rate: 2.0, ..PerturbationConfig::default() };
        let frames = 10_000;
        let fps: usize = (0..frames)
            .map(|_| {
                oracle_detect(&gt, &expr, 1, dims, &p, &mut rng)
                    .iter()
                    .filter(|d| d.source == DetectionSource::FalsePositive)
                    .count()
            })
            .sum();
        let mean = fps as f64 / frames as f64;
        assert!((1.9..=2.1).contains(&mean), "{mean}");
    }

    #[test]
    fn jitter_stays_in_image() {
        let (gt, expr, dims) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PerturbationConfig { jitter_sigma: 0.5, scale_sigma: 0.5, ..PerturbationConfig::default() };
        for _ in 0..500 {
            for d in oracle_detect(&gt, &expr, 1, dims, &p, &mut rng) {
                assert!(d.bbox.has_positive_area());
                assert!(d.bbox.x1() >= 0.0 && d.bbox.x2() <= 320.0 && d.bbox.y1() >= 0.0 && d.bbox.y2() <= 240.0);
            }
        }
    }

    #[test]
    fn invalid_perturbation() {
        let p = PerturbationConfig { p_miss: 1.5, ..PerturbationConfig::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn parser_cases() {
        let canonical = "<think>two people</think><answer>[1,2,30,40],[50,60,70,80]</answer>";
        assert_eq!(parser_detect(canonical, DetectionSource::Parser).len(), 2);
        assert!(parser_detect("garbage", DetectionSource::Parser).is_empty());
        let inverted = "<think>x</think><answer>[1,2,30,40],[70,60,50,80]</answer>";
        assert_eq!(parser_detect(inverted, DetectionSource::Parser).len(), 1);
    }

    #[test]
    fn parser_backend_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut backend = ParserBackend::new(dir.path());
        let frame = FrameRef { index: 1, rgb: PathBuf::new(), thermal: PathBuf::new() };
        assert!(matches!(backend.detect(&frame, "q"), Err(PerceptionError::MissingCache(_))));
        write_cache(dir.path(), 1, "<think>a</think><answer>[0,0,5,5]</answer>").unwrap();
        assert_eq!(backend.detect(&frame, "q").unwrap().len(), 1);
    }

    #[test]
    fn prompt_template() {
        let p = build_prompt("people walking").unwrap();
        assert!(p.starts_with(
            "You are a Visual Language Model specifically designed for paired and perfectly aligned RGB + thermal images."
        ));
        assert!(p.contains("detect all targets that match: people walking in the image"));
        assert!(p.ends_with("only the coordinates in the [x1,y1,x2,y2] format."));
        assert_eq!(p, build_prompt("people walking").unwrap());
        let quoted = build_prompt(r#"the "red" car"#).unwrap();
        assert!(quoted.contains(r#"match: the "red" car in"#));
        assert!(matches!(build_prompt("  "), Err(PerceptionError::EmptyQuery)));
    }

    #[test]
    fn detect_url_joins() {
        assert_eq!(RemoteConfig::new("http://h:1/").detect_url(), "http://h:1/detect");
        assert_eq!(RemoteConfig::new("http://h:1").detect_url(), "http://h:1/detect");
    }
}
