//! Rule-based rewards for box-grounding completions.
//!
//! A completion is expected to look like
//! `<think>reasoning</think><answer>[x1,y1,x2,y2],[x1,y1,x2,y2]</answer>`.
//! The total reward combines a structured-output part (format and a
//! sine-windowed length term) with a detection part computed from a
//! gated Hungarian matching against ground truth. The detection part uses
//! the coverage-first output-encouragement reward early in training and the
//! precision detection reward afterwards.

use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::match_iou;
use crate::geometry::{iou_matrix, rescale, BBox, ImageDims};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardConfigError {
    #[error("length window must satisfy L_min < L_low <= L_high < L_max, got {0} / {1} / {2} / {3}")]
    LengthWindow(u32, u32, u32, u32),
    #[error("{0} must be a finite non-negative number")]
    Negative(&'static str),
    #[error("{0} must lie in [0, 1]")]
    OutOfUnit(&'static str),
}

/// What was recovered from a completion.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ParsedAnswer {
    pub has_think: bool,
    pub has_answer: bool,
    /// Think block closes before the answer block opens and nothing but
    /// whitespace surrounds the two.
    pub well_ordered: bool,
    pub answer_text: String,
    pub boxes: Vec<BBox>,
    /// Coordinate sets with `x2 <= x1` or `y2 <= y1`.
    pub dropped: usize,
    pub answer_is_pure: bool,
}

fn quad_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)\s*";
        Regex::new(&format!(r"\[{num},{num},{num},{num}\]")).expect("valid regex")
    })
}

/// Byte range of the content between a single `<tag>` and `</tag>` pair, plus
/// the range of the whole block. `None` unless each tag occurs exactly once
/// and in order.
fn single_block(text: &str, tag: &str) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    if text.matches(&open).count() != 1 || text.matches(&close).count() != 1 {
        return None;
    }
    let start = text.find(&open)?;
    let end = text.find(&close)?;
    let inner_start = start + open.len();
    if end < inner_start {
        return None;
    }
    Some((inner_start..end, start..end + close.len()))
}

/// Parses a completion. Never fails; problems are reported through the flags.
pub fn parse_answer(completion: &str) -> ParsedAnswer {
    let think = single_block(completion, "think");
    let answer = single_block(completion, "answer");
    let mut parsed = ParsedAnswer {
        has_think: think.is_some(),
        has_answer: answer.is_some(),
        ..ParsedAnswer::default()
    };

    if let (Some((_, t)), Some((_, a))) = (&think, &answer) {
        parsed.well_ordered = t.end <= a.start
            && completion[..t.start].trim().is_empty()
            && completion[t.end..a.start].trim().is_empty()
            && completion[a.end..].trim().is_empty();
    }

    let Some((inner, _)) = answer else {
        return parsed;
    };
    let text = &completion[inner];
    parsed.answer_text = text.to_string();

    for caps in quad_regex().captures_iter(text) {
        let v: Vec<f64> = (1..=4).filter_map(|i| caps[i].parse::<f64>().ok()).collect();
        match v.as_slice() {
            [x1, y1, x2, y2] if x2 > x1 && y2 > y1 => match BBox::new(*x1, *y1, *x2, *y2) {
                Ok(b) => parsed.boxes.push(b),
                Err(_) => parsed.dropped += 1,
            },
            _ => parsed.dropped += 1,
        }
    }
    let residue = quad_regex().replace_all(text, "");
    parsed.answer_is_pure = residue.chars().all(|c| c == ',' || c.is_whitespace());
    parsed
}

/// 1 when the completion has both tag blocks in order, at least one valid
/// box, and an answer holding nothing but coordinate sets.
pub fn format_reward(p: &ParsedAnswer) -> f64 {
    let ok = p.has_think && p.has_answer && p.well_ordered && !p.boxes.is_empty() && p.answer_is_pure;
    if ok {
        1.0
    } else {
        0.0
    }
}

/// `sin^2(pi x / 2)` with `x` first clamped into `[0, 1]`.
pub fn sine_window(x: f64) -> f64 {
    if x.is_nan() {
        return 0.0;
    }
    let x = x.clamp(0.0, 1.0);
    (FRAC_PI_2 * x).sin().powi(2).clamp(0.0, 1.0)
}

/// Length reward: rises from 0 at `L_min` to 1 at `L_low`, stays at 1 through
/// `L_high`, and falls back to 0 at `L_max`.
pub fn length_reward(len: u32, cfg: &RewardConfig) -> f64 {
    let l = f64::from(len);
    let rise = (l - f64::from(cfg.l_min)) / f64::from(cfg.l_low - cfg.l_min);
    let fall = (f64::from(cfg.l_max) - l) / f64::from(cfg.l_max - cfg.l_high);
    sine_window(rise) * sine_window(fall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Weight on the matched ground-truth count in the encouragement reward.
    pub alpha: f64,
    /// Weight on the matched IoU sum in the encouragement reward.
    pub beta: f64,
    /// Exponent on the detection count in the precision reward.
    pub gamma: f64,
    /// Coverage weight in the precision reward.
    pub lambda: f64,
    pub l_min: u32,
    pub l_low: u32,
    pub l_high: u32,
    pub l_max: u32,
    pub w_format: f64,
    pub w_length: f64,
    pub w_str: f64,
    pub w_ctr: f64,
    /// Minimum IoU for a matched pair to count.
    pub tau_match: f64,
    /// Training fraction at which the detection term switches from the
    /// encouragement reward to the precision reward.
    pub phase_switch: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.5,
            lambda: 2.0,
            l_min: 80,
            l_low: 140,
            l_high: 200,
            l_max: 600,
            w_format: 0.5,
            w_length: 0.5,
            w_str: 1.0,
            w_ctr: 1.0,
            tau_match: 0.5,
            phase_switch: 0.5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.l_min < self.l_low && self.l_low <= self.l_high && self.l_high < self.l_max) {
            return Err(RewardConfigError::LengthWindow(self.l_min, self.l_low, self.l_high, self.l_max));
        }
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("w_format", self.w_format),
            ("w_length", self.w_length),
            ("w_str", self.w_str),
            ("w_ctr", self.w_ctr),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RewardConfigError::Negative(name));
            }
        }
        for (name, v) in [("tau_match", self.tau_match), ("phase_switch", self.phase_switch)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RewardConfigError::OutOfUnit(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MatchSummary {
    pub matched_gt: usize,
    pub iou_score: f64,
    pub n_det: usize,
    pub n_gt: usize,
}

/// Maps detections into ground-truth space and counts gated one-to-one
/// matches. `iou_score` is the plain sum of matched IoUs.
pub fn match_boxes(dets: &[BBox], gts: &[BBox], det_dims: ImageDims, gt_dims: ImageDims, tau_match: f64) -> MatchSummary {
    let mapped: Vec<BBox> = dets.iter().map(|b| rescale(b, det_dims, gt_dims)).collect();
    let iou = iou_matrix(&mapped, gts);
    let a = match_iou(&iou, tau_match);
    MatchSummary {
        matched_gt: a.pairs.len(),
        iou_score: a.pairs.iter().fold(0.0, |acc, &p| acc + iou[p]),
        n_det: dets.len(),
        n_gt: gts.len(),
    }
}

/// Output encouragement reward: `alpha * matched + beta * iou_score`.
pub fn oer(m: &MatchSummary, cfg: &RewardConfig) -> f64 {
    cfg.alpha * m.matched_gt as f64 + cfg.beta * m.iou_score
}

/// Precision detection reward: `iou_score / n_det^gamma + lambda * matched / n_gt`.
/// A term whose denominator count is zero contributes 0.
pub fn pdr(m: &MatchSummary, cfg: &RewardConfig) -> f64 {
    let precision = if m.n_det == 0 {
        0.0
    } else {
        m.iou_score / (m.n_det as f64).powf(cfg.gamma)
    };
    let coverage = if m.n_gt == 0 {
        0.0
    } else {
        cfg.lambda * m.matched_gt as f64 / m.n_gt as f64
    };
    precision + coverage
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionRewardKind {
    Oer,
    Pdr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_len: f64,
    pub r_str: f64,
    pub detection_kind: DetectionRewardKind,
    pub r_ctr: f64,
    pub r_total: f64,
    pub matches: MatchSummary,
    pub length: u32,
}

/// Everything the composite reward needs besides the configuration.
#[derive(Debug, Clone, Copy)]
pub struct RewardInput<'a> {
    pub completion: &'a str,
    /// Completion length in tokens, as counted by the caller.
    pub length: u32,
    pub gts: &'a [BBox],
    pub det_dims: ImageDims,
    pub gt_dims: ImageDims,
    /// Training progress in `[0, 1]`.
    pub phase: f64,
}

pub fn composite_reward(input: &RewardInput<'_>, cfg: &RewardConfig) -> RewardBreakdown {
    let parsed = parse_answer(input.completion);
    let r_format = format_reward(&parsed);
    let r_len = length_reward(input.length, cfg);
    let r_str = cfg.w_format * r_format + cfg.w_length * r_len;

    let matches = match_boxes(&parsed.boxes, input.gts, input.det_dims, input.gt_dims, cfg.tau_match);
    let (detection_kind, r_ctr) = if input.phase < cfg.phase_switch {
        (DetectionRewardKind::Oer, oer(&matches, cfg))
    } else {
        (DetectionRewardKind::Pdr, pdr(&matches, cfg))
    };
    RewardBreakdown {
        r_format,
        r_len,
        r_str,
        detection_kind,
        r_ctr,
        r_total: cfg.w_str * r_str + cfg.w_ctr * r_ctr,
        matches,
        length: input.length,
    }
}

/// Whitespace token count, used when no tokenizer length is available.
pub fn approximate_length(completion: &str) -> u32 {
    u32::try_from(completion.split_whitespace().count()).unwrap_or(u32::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn dims(w: u32, h: u32) -> ImageDims {
        ImageDims::new(w, h).unwrap()
    }

    #[test]
    fn parse_canonical() {
        let p = parse_answer("<think>x</think><answer>[0,0,10,10]</answer>");
        assert!(p.has_think && p.has_answer && p.well_ordered && p.answer_is_pure);
        assert_eq!(p.boxes, vec![bb(0., 0., 10., 10.)]);
        assert_eq!(format_reward(&p), 1.0);
    }

    #[test]
    fn parse_missing_think() {
        let p = parse_answer("<answer>[0,0,10,10]</answer>");
        assert!(!p.has_think);
        assert!(p.has_answer);
        assert_eq!(p.boxes.len(), 1);
        assert_eq!(format_reward(&p), 0.0);
    }

    #[test]
    fn parse_inverted_and_prose() {
        let p = parse_answer("<think>t</think><answer>boxes: [10,10,5,5]</answer>");
        assert!(p.boxes.is_empty());
        assert_eq!(p.dropped, 1);
        assert!(!p.answer_is_pure);
        assert_eq!(format_reward(&p), 0.0);
    }

    #[test]
    fn prose_around_coordinates_fails_format() {
        let p = parse_answer("<think>t</think><answer>The person is at [1,2,30,40].</answer>");
        assert_eq!(p.boxes.len(), 1);
        assert!(!p.answer_is_pure);
        assert_eq!(format_reward(&p), 0.0);
    }

    #[test]
    fn parse_multiple_boxes_and_decimals() {
        let p = parse_answer("<think>two people</think>\n<answer>[1.5, 2, 30.25, 40], [ 50,60,70,80 ]</answer>\n");
        assert_eq!(p.boxes, vec![bb(1.5, 2., 30.25, 40.), bb(50., 60., 70., 80.)]);
        assert!(p.answer_is_pure && p.well_ordered);
        assert_eq!(format_reward(&p), 1.0);
    }

    #[test]
    fn out_of_order_or_duplicated_tags() {
        let p = parse_answer("<answer>[0,0,1,1]</answer><think>x</think>");
        assert!(p.has_think && p.has_answer && !p.well_ordered);
        assert_eq!(format_reward(&p), 0.0);
        let p = parse_answer("<think>a</think><think>b</think><answer>[0,0,1,1]</answer>");
        assert!(!p.has_think);
        let p = parse_answer("<think>a</think><answer>[0,0,1,1]</answer> trailing");
        assert!(!p.well_ordered);
        let p = parse_answer("<think>a</think><answer></answer>");
        assert!(p.has_answer && p.boxes.is_empty() && p.answer_is_pure);
        assert_eq!(format_reward(&p), 0.0);
        let p = parse_answer("");
        assert_eq!(p, ParsedAnswer::default());
    }

    #[test]
    fn sine_window_examples() {
        assert_eq!(sine_window(0.0), 0.0);
        assert_eq!(sine_window(1.0), 1.0);
        assert!((sine_window(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(sine_window(2.0), 1.0);
        assert_eq!(sine_window(-3.0), 0.0);
        assert_eq!(sine_window(f64::NAN), 0.0);
    }

    #[test]
    fn length_reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(length_reward(170, &cfg), 1.0);
        assert_eq!(length_reward(80, &cfg), 0.0);
        assert!((length_reward(110, &cfg) - 0.5).abs() < 1e-12);
        assert_eq!(length_reward(600, &cfg), 0.0);
        assert_eq!(length_reward(0, &cfg), 0.0);
        assert_eq!(length_reward(5000, &cfg), 0.0);
        // falling edge: (600 - 400) / 400 = 0.5
        assert!((length_reward(400, &cfg) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn length_reward_shape() {
        let cfg = RewardConfig::default();
        for l in 0..=700u32 {
            let r = length_reward(l, &cfg);
            if (140..=200).contains(&l) {
                assert_eq!(r, 1.0, "L = {l}");
            } else if l <= 80 || l >= 600 {
                assert_eq!(r, 0.0, "L = {l}");
            } else {
                assert!(r > 0.0 && r < 1.0, "L = {l}: {r}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig { l_low: 80, ..RewardConfig::default() };
        assert!(matches!(bad.validate(), Err(RewardConfigError::LengthWindow(..))));
        let bad = RewardConfig { gamma: -1.0, ..RewardConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RewardConfig { tau_match: 1.5, ..RewardConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn match_boxes_examples() {
        let d = dims(100, 100);
        let g = bb(10., 10., 30., 30.);
        let m = match_boxes(&[g], &[g], d, d, 0.5);
        assert_eq!((m.matched_gt, m.iou_score), (1, 1.0));
        let m = match_boxes(&[], &[g], d, d, 0.5);
        assert_eq!((m.matched_gt, m.iou_score, m.n_gt), (0, 0.0, 1));

        // det0 on gt0 at IoU 0.8 (width 10 vs 8 overlap), det1 on gt1 at 0.2
        let gt0 = bb(0., 0., 10., 10.);
        let det0 = bb(0., 0., 8., 10.);
        let gt1 = bb(50., 50., 60., 60.);
        let det1 = bb(50., 50., 52., 60.);
        let m = match_boxes(&[det0, det1], &[gt0, gt1], d, d, 0.5);
        assert_eq!(m.matched_gt, 1);
        assert!((m.iou_score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn match_boxes_rescales_detections() {
        let gt = bb(50., 50., 100., 100.);
        let det = bb(100., 100., 200., 200.);
        let m = match_boxes(&[det], &[gt], dims(1000, 1000), dims(500, 500), 0.5);
        assert_eq!(m.matched_gt, 1);
        assert!((m.iou_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oer_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(oer(&MatchSummary::default(), &cfg), 0.0);
        let m = MatchSummary { matched_gt: 1, iou_score: 1.0, n_det: 1, n_gt: 1 };
        assert!((oer(&m, &cfg) - 1.5).abs() < 1e-12);
        let m = MatchSummary { matched_gt: 3, iou_score: 2.4, n_det: 3, n_gt: 3 };
        assert!((oer(&m, &cfg) - 3.9).abs() < 1e-12);
    }

    #[test]
    fn pdr_examples() {
        let cfg = RewardConfig::default();
        let one = MatchSummary { matched_gt: 1, iou_score: 1.0, n_det: 1, n_gt: 1 };
        assert!((pdr(&one, &cfg) - 3.0).abs() < 1e-12);
        let four = MatchSummary { n_det: 4, ..one };
        assert!((pdr(&four, &cfg) - 2.5).abs() < 1e-12);
        assert!(pdr(&four, &cfg) < pdr(&one, &cfg));
        let none = MatchSummary { matched_gt: 0, iou_score: 0.0, n_det: 0, n_gt: 2 };
        assert_eq!(pdr(&none, &cfg), 0.0);
        let no_gt = MatchSummary { matched_gt: 0, iou_score: 0.0, n_det: 3, n_gt: 0 };
        assert_eq!(pdr(&no_gt, &cfg), 0.0);
    }

    fn plateau_completion() -> String {
        // 170 whitespace tokens, inside [140, 200]
        let filler = vec!["w"; 168].join(" ");
        format!("<think>{filler}</think> <answer>[10,10,30,30]</answer>")
    }

    #[test]
    fn composite_examples() {
        let cfg = RewardConfig::default();
        let d = dims(100, 100);
        let gts = [bb(10., 10., 30., 30.)];
        let empty = composite_reward(
            &RewardInput { completion: "", length: 0, gts: &gts, det_dims: d, gt_dims: d, phase: 0.0 },
            &cfg,
        );
        assert_eq!(empty.r_total, 0.0);

        let text = plateau_completion();
        let len = approximate_length(&text);
        assert!((140..=200).contains(&len));
        let input = RewardInput { completion: &text, length: len, gts: &gts, det_dims: d, gt_dims: d, phase: 0.0 };
        let early = composite_reward(&input, &cfg);
        assert_eq!(early.r_format, 1.0);
        assert_eq!(early.r_len, 1.0);
        assert_eq!(early.detection_kind, DetectionRewardKind::Oer);
        // 1.0 * (0.5 + 0.5) + 1.0 * 1.5
        assert!((early.r_total - 2.5).abs() < 1e-12);

        let late = composite_reward(&RewardInput { phase: 1.0, ..input }, &cfg);
        assert_eq!(late.detection_kind, DetectionRewardKind::Pdr);
        assert!((late.r_ctr - 3.0).abs() < 1e-12);
        assert!((late.r_total - 4.0).abs() < 1e-12);
        assert_eq!(composite_reward(&input, &cfg), early);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..80.0f64, 0.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn parse_never_panics(s in ".{0,200}") {
            let p = parse_answer(&s);
            let f = format_reward(&p);
            prop_assert!(f == 0.0 || f == 1.0);
            prop_assert!(p.boxes.is_empty() || p.has_answer);
        }

        #[test]
        fn parse_recovers_written_boxes(boxes in proptest::collection::vec(arb_box(), 1..5)) {
            let body: Vec<String> = boxes
                .iter()
                .map(|b| format!("[{},{},{},{}]", b.x1(), b.y1(), b.x2(), b.y2()))
                .collect();
            let text = format!("<think>r</think><answer>{}</answer>", body.join(","));
            let p = parse_answer(&text);
            prop_assert_eq!(&p.boxes, &boxes);
            prop_assert_eq!(format_reward(&p), 1.0);
        }

        #[test]
        fn oer_monotone_in_matches(m in 0usize..10, s in 0.0..1.0f64, iou in 0.5..1.0f64) {
            let cfg = RewardConfig::default();
            let base = MatchSummary { matched_gt: m, iou_score: s * m as f64, n_det: m, n_gt: m + 1 };
            let more = MatchSummary {
                matched_gt: m + 1,
                iou_score: base.iou_score + iou,
                n_det: m + 1,
                n_gt: m + 1,
            };
            prop_assert!(oer(&more, &cfg) >= oer(&base, &cfg));
        }
    }
}
