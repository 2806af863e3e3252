//! Detection-to-ground-truth matching, precision/recall curves and average
//! precision over named image subsets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::postprocess::{score_order, Detection};
use crate::targets::GroundTruth;

pub const DEFAULT_EVAL_IOU: f64 = 0.5;
/// Number of score thresholds used by [`ApMode::Sampled1000`].
pub const SAMPLED_THRESHOLDS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    /// Exact area under the all-point interpolated curve.
    #[default]
    Exact,
    /// Precision/recall sampled at 1000 evenly spaced thresholds over
    /// min-max normalized scores, as in the official WIDER FACE toolkit.
    Sampled1000,
}

/// Matching outcome for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    /// Scored detections, descending by score. Detections absorbed by an
    /// invalid face are not listed here.
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
    /// Aligned with `detections`.
    pub tp_flags: Vec<bool>,
    /// Detections discarded because they landed on an invalid face.
    pub ignored: usize,
}

impl ImageEval {
    pub fn num_valid_gts(&self) -> usize {
        self.gts.iter().filter(|g| !g.invalid).count()
    }

    pub fn num_tp(&self) -> usize {
        self.tp_flags.iter().filter(|f| **f).count()
    }
}

/// Greedy matching in descending score order.
///
/// Each detection takes the unmatched valid face with the highest IoU if that
/// IoU reaches `iou_thresh`. Otherwise, when its best overlap over all faces is
/// an invalid one at IoU >= `iou_thresh`, it is dropped from scoring; any
/// remaining detection is a false positive.
pub fn match_image(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> ImageEval {
    let mut matched = vec![false; gts.len()];
    let mut detections = Vec::with_capacity(dets.len());
    let mut tp_flags = Vec::with_capacity(dets.len());
    let mut ignored = 0;

    for i in score_order(dets) {
        let d = &dets[i];
        let mut best_free: Option<(usize, f64)> = None;
        let mut best_any: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = d.bbox.iou(&gt.bbox);
            if best_any.is_none_or(|(_, m)| v > m) {
                best_any = Some((g, v));
            }
            if !gt.invalid && !matched[g] && best_free.is_none_or(|(_, m)| v > m) {
                best_free = Some((g, v));
            }
        }
        match (best_free, best_any) {
            (Some((g, v)), _) if v >= iou_thresh => {
                matched[g] = true;
                detections.push(*d);
                tp_flags.push(true);
            }
            (_, Some((g, v))) if gts[g].invalid && v >= iou_thresh => ignored += 1,
            _ => {
                detections.push(*d);
                tp_flags.push(false);
            }
        }
    }

    ImageEval {
        detections,
        gts: gts.to_vec(),
        tp_flags,
        ignored,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    /// `(recall, precision)` pairs with non-decreasing recall.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Pools all images and computes the exact all-point interpolated curve.
pub fn pr_curve(evals: &[ImageEval]) -> Result<PRCurve> {
    pr_curve_with(evals, ApMode::Exact)
}

pub fn pr_curve_with(evals: &[ImageEval], mode: ApMode) -> Result<PRCurve> {
    let total_gt: usize = evals.iter().map(ImageEval::num_valid_gts).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut pool: Vec<(f64, bool)> = evals
        .iter()
        .flat_map(|e| e.detections.iter().map(|d| d.score()).zip(e.tp_flags.iter().copied()))
        .collect();
    // Descending score; at equal scores false positives rank first so the
    // curve does not depend on pooling order.
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let points = match mode {
        ApMode::Exact => exact_points(&pool, total_gt),
        ApMode::Sampled1000 => sampled_points(&pool, total_gt),
    };
    let ap = interpolated_area(&points);
    Ok(PRCurve { points, ap })
}

fn exact_points(pool: &[(f64, bool)], total_gt: usize) -> Vec<(f64, f64)> {
    let (mut tp, mut fp) = (0usize, 0usize);
    pool.iter()
        .map(|&(_, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

fn sampled_points(pool: &[(f64, bool)], total_gt: usize) -> Vec<(f64, f64)> {
    let Some(&(max, _)) = pool.first() else {
        return Vec::new();
    };
    let min = pool[pool.len() - 1].0;
    let range = max - min;
    let norm = |s: f64| if range > 0.0 { (s - min) / range } else { 1.0 };

    let mut points = Vec::with_capacity(SAMPLED_THRESHOLDS);
    let (mut tp, mut fp, mut next) = (0usize, 0usize, 0usize);
    for t in 1..=SAMPLED_THRESHOLDS {
        let thresh = 1.0 - t as f64 / SAMPLED_THRESHOLDS as f64;
        while next < pool.len() && norm(pool[next].0) >= thresh {
            if pool[next].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            next += 1;
        }
        if tp + fp > 0 {
            points.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    points
}

/// Area under the curve after replacing each precision by the maximum
/// precision at any equal or higher recall.
fn interpolated_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope = 0.0f64;
    let mut interp = vec![0.0; points.len()];
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        envelope = envelope.max(p);
        interp[i] = envelope;
    }
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (&(r, _), p) in points.iter().zip(interp) {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub name: String,
    pub curve: PRCurve,
    pub num_gts: usize,
    pub num_dets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub subsets: Vec<SubsetReport>,
}

impl EvalReport {
    pub fn subset(&self, name: &str) -> Option<&SubsetReport> {
        self.subsets.iter().find(|s| s.name == name)
    }
}

/// Evaluates every named subset independently.
///
/// Images listed in a subset must have a ground-truth entry; images with
/// ground truth but no detections count as misses. Every image that has
/// detections must also have ground truth.
pub fn evaluate(
    dets_by_image: &BTreeMap<String, Vec<Detection>>,
    gts_by_image: &BTreeMap<String, Vec<GroundTruth>>,
    subsets: &[(String, Vec<String>)],
    iou_thresh: f64,
    mode: ApMode,
) -> Result<EvalReport> {
    if let Some(name) = dets_by_image.keys().find(|k| !gts_by_image.contains_key(*k)) {
        return Err(Error::UnknownImage(name.clone()));
    }
    for (_, images) in subsets {
        if let Some(name) = images.iter().find(|k| !gts_by_image.contains_key(*k)) {
            return Err(Error::UnknownImage(name.clone()));
        }
    }

    let mut cache: BTreeMap<&str, ImageEval> = BTreeMap::new();
    let mut reports = Vec::with_capacity(subsets.len());
    for (name, images) in subsets {
        let mut evals = Vec::with_capacity(images.len());
        let mut num_dets = 0;
        for image in images {
            let e = cache.entry(image.as_str()).or_insert_with(|| {
                let dets = dets_by_image.get(image).map_or(&[][..], Vec::as_slice);
                match_image(dets, &gts_by_image[image], iou_thresh)
            });
            num_dets += e.detections.len();
            evals.push(e.clone());
        }
        let num_gts = evals.iter().map(ImageEval::num_valid_gts).sum();
        let curve = pr_curve_with(&evals, mode)?;
        reports.push(SubsetReport {
            name: name.clone(),
            curve,
            num_gts,
            num_dets,
        });
    }
    Ok(EvalReport { subsets: reports })
}
