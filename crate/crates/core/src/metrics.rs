//! HOTA-family tracking metrics: HOTA, DetA, AssA, DetRe, DetPr, AssRe,
//! AssPr and LocA, averaged over the IoU thresholds 0.05, 0.10, ..., 0.95.
//!
//! Matching follows the usual reference procedure: a global alignment score
//! between every gt/prediction id pair is accumulated over the whole
//! sequence from soft IoU overlaps, each frame is then matched once by
//! Hungarian on `alignment * IoU`, and each threshold keeps the pairs whose
//! IoU reaches it.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::assignment::solve;
use crate::geometry::iou_matrix;
use crate::tracker::{TrackerError, TrackingResult};

pub const NUM_ALPHAS: usize = 19;

/// Threshold tolerance for float noise in IoU.
const ALPHA_EPS: f64 = f64::EPSILON;

pub fn alphas() -> [f64; NUM_ALPHAS] {
    std::array::from_fn(|i| (i + 1) as f64 / 20.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground truth cover different extents ({pred} vs {gt})")]
    SequenceMismatch { pred: String, gt: String },
    #[error("nothing to evaluate")]
    NoData,
    #[error("alpha {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error(transparent)]
    InvalidResult(#[from] TrackerError),
}

/// Summed statistics at one threshold. Additive across sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AlphaCounts {
    pub tp: f64,
    pub fn_: f64,
    pub fp: f64,
    /// Sum over TPs of the per-pair association accuracy.
    pub ass_a: f64,
    pub ass_re: f64,
    pub ass_pr: f64,
    /// Sum of IoU over TPs.
    pub loc: f64,
}

impl AlphaCounts {
    fn add(&mut self, o: &AlphaCounts) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.ass_a += o.ass_a;
        self.ass_re += o.ass_re;
        self.ass_pr += o.ass_pr;
        self.loc += o.loc;
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaMetrics {
    pub alpha: f64,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub detre: f64,
    pub detpr: f64,
    pub assre: f64,
    pub asspr: f64,
    pub loca: f64,
}

impl AlphaMetrics {
    pub fn from_counts(alpha: f64, c: &AlphaCounts) -> Self {
        let deta = ratio(c.tp, c.tp + c.fn_ + c.fp);
        let assa = ratio(c.ass_a, c.tp);
        Self {
            alpha,
            hota: (deta * assa).sqrt(),
            deta,
            assa,
            detre: ratio(c.tp, c.tp + c.fn_),
            detpr: ratio(c.tp, c.tp + c.fp),
            assre: ratio(c.ass_re, c.tp),
            asspr: ratio(c.ass_pr, c.tp),
            loca: ratio(c.loc, c.tp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub detre: f64,
    pub detpr: f64,
    pub assre: f64,
    pub asspr: f64,
    pub loca: f64,
    pub per_alpha: Vec<AlphaMetrics>,
}

impl MetricReport {
    fn from_alpha_metrics(per_alpha: Vec<AlphaMetrics>) -> Self {
        let n = per_alpha.len() as f64;
        let mean = |f: fn(&AlphaMetrics) -> f64| per_alpha.iter().map(f).sum::<f64>() / n;
        Self {
            hota: mean(|m| m.hota),
            deta: mean(|m| m.deta),
            assa: mean(|m| m.assa),
            detre: mean(|m| m.detre),
            detpr: mean(|m| m.detpr),
            assre: mean(|m| m.assre),
            asspr: mean(|m| m.asspr),
            loca: mean(|m| m.loca),
            per_alpha,
        }
    }

    pub fn from_counts(counts: &SequenceCounts) -> Self {
        let per_alpha = alphas().iter().zip(&counts.per_alpha).map(|(&a, c)| AlphaMetrics::from_counts(a, c)).collect();
        Self::from_alpha_metrics(per_alpha)
    }

    /// Headline values in table order: HOTA, DetA, AssA, DetRe, DetPr,
    /// AssRe, AssPr, LocA.
    pub fn headline(&self) -> [f64; 8] {
        [self.hota, self.deta, self.assa, self.detre, self.detpr, self.assre, self.asspr, self.loca]
    }
}

pub const HEADLINE_NAMES: [&str; 8] = ["HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA"];

/// Statistics of one (prediction, ground truth) pair at every threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceCounts {
    pub per_alpha: [AlphaCounts; NUM_ALPHAS],
}

impl Default for SequenceCounts {
    fn default() -> Self {
        Self { per_alpha: [AlphaCounts::default(); NUM_ALPHAS] }
    }
}

impl SequenceCounts {
    pub fn add(&mut self, other: &SequenceCounts) {
        for (a, b) in self.per_alpha.iter_mut().zip(&other.per_alpha) {
            a.add(b);
        }
    }
}

fn check_extent(pred: &TrackingResult, gt: &TrackingResult) -> Result<(), MetricsError> {
    pred.validate()?;
    gt.validate()?;
    if pred.frame_count != gt.frame_count || pred.dims != gt.dims {
        let describe = |r: &TrackingResult| format!("{} frames at {}x{}", r.frame_count, r.dims.width(), r.dims.height());
        return Err(MetricsError::SequenceMismatch { pred: describe(pred), gt: describe(gt) });
    }
    Ok(())
}

fn index_ids(r: &TrackingResult) -> BTreeMap<u64, usize> {
    r.ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Counts at arbitrary thresholds; shared by [`sequence_counts`] and
/// [`evaluate_at_alpha`].
fn counts_at(pred: &TrackingResult, gt: &TrackingResult, thresholds: &[f64]) -> Vec<AlphaCounts> {
    let gt_index = index_ids(gt);
    let pr_index = index_ids(pred);
    let (ng, np) = (gt_index.len(), pr_index.len());
    let frames: BTreeSet<u32> = gt.frames.keys().chain(pred.frames.keys()).copied().collect();

    let mut gt_count = vec![0.0; ng];
    let mut pr_count = vec![0.0; np];
    let mut potential = DMatrix::<f64>::zeros(ng, np);
    let mut per_frame = Vec::with_capacity(frames.len());
    for &f in &frames {
        let g = gt.boxes(f);
        let p = pred.boxes(f);
        let gi: Vec<usize> = g.iter().map(|b| gt_index[&b.id]).collect();
        let pi: Vec<usize> = p.iter().map(|b| pr_index[&b.id]).collect();
        let sim = iou_matrix(&g.iter().map(|b| b.bbox).collect::<Vec<_>>(), &p.iter().map(|b| b.bbox).collect::<Vec<_>>());
        let row_sums: Vec<f64> = sim.row_iter().map(|r| r.sum()).collect();
        let col_sums: Vec<f64> = sim.column_iter().map(|c| c.sum()).collect();
        for r in 0..g.len() {
            for c in 0..p.len() {
                let den = row_sums[r] + col_sums[c] - sim[(r, c)];
                if den > f64::EPSILON {
                    potential[(gi[r], pi[c])] += sim[(r, c)] / den;
                }
            }
        }
        for &i in &gi {
            gt_count[i] += 1.0;
        }
        for &j in &pi {
            pr_count[j] += 1.0;
        }
        per_frame.push((gi, pi, sim));
    }

    let alignment = DMatrix::from_fn(ng, np, |i, j| ratio(potential[(i, j)], gt_count[i] + pr_count[j] - potential[(i, j)]));

    let mut out = vec![AlphaCounts::default(); thresholds.len()];
    let mut matches: Vec<DMatrix<f64>> = vec![DMatrix::zeros(ng, np); thresholds.len()];
    for (gi, pi, sim) in &per_frame {
        let (n_g, n_p) = (gi.len() as f64, pi.len() as f64);
        let mut pairs = Vec::new();
        if !gi.is_empty() && !pi.is_empty() {
            let cost = DMatrix::from_fn(gi.len(), pi.len(), |r, c| -(alignment[(gi[r], pi[c])] * sim[(r, c)]));
            pairs = solve(&cost).expect("alignment-weighted IoU is finite").pairs;
        }
        for (k, &alpha) in thresholds.iter().enumerate() {
            let mut tp = 0.0;
            for &(r, c) in &pairs {
                let s = sim[(r, c)];
                if s >= alpha - ALPHA_EPS && s > 0.0 {
                    tp += 1.0;
                    out[k].loc += s;
                    matches[k][(gi[r], pi[c])] += 1.0;
                }
            }
            out[k].tp += tp;
            out[k].fn_ += n_g - tp;
            out[k].fp += n_p - tp;
        }
    }

    for (k, m) in matches.iter().enumerate() {
        for i in 0..ng {
            for j in 0..np {
                let c = m[(i, j)];
                if c == 0.0 {
                    continue;
                }
                out[k].ass_a += c * c / (gt_count[i] + pr_count[j] - c);
                out[k].ass_re += c * c / gt_count[i];
                out[k].ass_pr += c * c / pr_count[j];
            }
        }
    }
    out
}

pub fn sequence_counts(pred: &TrackingResult, gt: &TrackingResult) -> Result<SequenceCounts, MetricsError> {
    check_extent(pred, gt)?;
    let v = counts_at(pred, gt, &alphas());
    Ok(SequenceCounts { per_alpha: std::array::from_fn(|k| v[k]) })
}

pub fn evaluate_at_alpha(pred: &TrackingResult, gt: &TrackingResult, alpha: f64) -> Result<AlphaMetrics, MetricsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::InvalidAlpha(alpha));
    }
    check_extent(pred, gt)?;
    Ok(AlphaMetrics::from_counts(alpha, &counts_at(pred, gt, &[alpha])[0]))
}

pub fn evaluate(pred: &TrackingResult, gt: &TrackingResult) -> Result<MetricReport, MetricsError> {
    Ok(MetricReport::from_counts(&sequence_counts(pred, gt)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Pool counts over all pairs, then form ratios.
    #[default]
    Micro,
    /// Average each per-pair metric.
    Macro,
}

/// Metrics over a set of `(label, prediction, ground truth)` triples.
pub fn evaluate_expression_set(
    items: &[(String, TrackingResult, TrackingResult)],
    mode: Aggregation,
) -> Result<MetricReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::NoData);
    }
    let counts = items
        .iter()
        .map(|(_, p, g)| sequence_counts(p, g))
        .collect::<Result<Vec<_>, _>>()?;
    match mode {
        Aggregation::Micro => {
            let mut total = SequenceCounts::default();
            for c in &counts {
                total.add(c);
            }
            Ok(MetricReport::from_counts(&total))
        }
        Aggregation::Macro => {
            let reports: Vec<MetricReport> = counts.iter().map(MetricReport::from_counts).collect();
            let n = reports.len() as f64;
            let per_alpha = (0..NUM_ALPHAS)
                .map(|k| {
                    let mean = |f: fn(&AlphaMetrics) -> f64| reports.iter().map(|r| f(&r.per_alpha[k])).sum::<f64>() / n;
                    AlphaMetrics {
                        alpha: alphas()[k],
                        hota: mean(|m| m.hota),
                        deta: mean(|m| m.deta),
                        assa: mean(|m| m.assa),
                        detre: mean(|m| m.detre),
                        detpr: mean(|m| m.detpr),
                        assre: mean(|m| m.assre),
                        asspr: mean(|m| m.asspr),
                        loca: mean(|m| m.loca),
                    }
                })
                .collect();
            Ok(MetricReport::from_alpha_metrics(per_alpha))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, ImageDims};

    fn dims() -> ImageDims {
        ImageDims::new(100, 100).unwrap()
    }

    fn bb(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn single_track(frames: u32) -> TrackingResult {
        let mut r = TrackingResult::new("s", frames, dims());
        for f in 1..=frames {
            r.push(f, 1, bb(f as f64));
        }
        r
    }

    fn assert_all(r: &MetricReport, v: f64) {
        for (name, x) in HEADLINE_NAMES.iter().zip(r.headline()) {
            assert!((x - v).abs() < 1e-12, "{name} = {x}");
        }
    }

    #[test]
    fn perfect() {
        let gt = single_track(10);
        assert_all(&evaluate(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn empty_predictions() {
        let gt = single_track(10);
        let pred = TrackingResult::new("s", 10, dims());
        let r = evaluate(&pred, &gt).unwrap();
        assert_all(&r, 0.0);
    }

    #[test]
    fn id_switch() {
        let gt = single_track(10);
        let mut pred = TrackingResult::new("s", 10, dims());
        for f in 1..=10 {
            pred.push(f, if f <= 5 { 7 } else { 8 }, bb(f as f64));
        }
        let r = evaluate(&pred, &gt).unwrap();
        assert!((r.deta - 1.0).abs() < 1e-12);
        assert!((r.assa - 0.5).abs() < 1e-12);
        assert!((r.hota - 0.5f64.sqrt()).abs() < 1e-12);
        for m in &r.per_alpha {
            assert!((m.hota - 0.5f64.sqrt()).abs() < 1e-12);
        }
        let at = evaluate_at_alpha(&pred, &gt, 0.5).unwrap();
        assert!((at.assa - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatch_and_bad_alpha() {
        let gt = single_track(10);
        let pred = single_track(9);
        assert!(matches!(evaluate(&pred, &gt), Err(MetricsError::SequenceMismatch { .. })));
        assert!(matches!(evaluate_at_alpha(&gt, &gt, 1.0), Err(MetricsError::InvalidAlpha(_))));
    }

    #[test]
    fn expression_pooling() {
        let gt = single_track(10);
        let empty = TrackingResult::new("s", 10, dims());
        assert!(matches!(evaluate_expression_set(&[], Aggregation::Micro), Err(MetricsError::NoData)));
        let one = evaluate_expression_set(&[("a".into(), gt.clone(), gt.clone())], Aggregation::Micro).unwrap();
        assert_eq!(one, evaluate(&gt, &gt).unwrap());
        let two = vec![("a".into(), gt.clone(), gt.clone()), ("b".into(), gt.clone(), gt.clone())];
        assert_all(&evaluate_expression_set(&two, Aggregation::Micro).unwrap(), 1.0);
        let mixed = vec![("a".into(), gt.clone(), gt.clone()), ("b".into(), empty, gt.clone())];
        let micro = evaluate_expression_set(&mixed, Aggregation::Micro).unwrap();
        assert!((micro.detre - 0.5).abs() < 1e-12);
        assert!((micro.detpr - 1.0).abs() < 1e-12);
        let macro_ = evaluate_expression_set(&mixed, Aggregation::Macro).unwrap();
        assert!((macro_.detpr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn removing_false_positive_never_lowers_detpr() {
        let gt = single_track(5);
        let mut pred = gt.clone();
        pred.push(3, 99, BBox::new(60., 60., 70., 70.).unwrap());
        let with_fp = evaluate(&pred, &gt).unwrap();
        let without = evaluate(&gt, &gt).unwrap();
        assert!(without.detpr >= with_fp.detpr);
        for m in &with_fp.per_alpha {
            assert!(m.detre >= m.deta - 1e-15 && m.detpr >= m.deta - 1e-15);
            assert!((m.hota - (m.deta * m.assa).sqrt()).abs() < 1e-15);
        }
    }
}
