//! Training-side label assignment, minibatch sampling and box regression coding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};

pub const RPN_POS_IOU: f64 = 0.7;
pub const RPN_NEG_IOU: f64 = 0.3;
pub const RCNN_POS_IOU: f64 = 0.5;
pub const RCNN_NEG_IOU: f64 = 0.3;
pub const RPN_BATCH: usize = 256;
pub const RCNN_BATCH: usize = 128;
pub const RPN_POS_FRACTION: f64 = 0.5;
pub const RCNN_POS_FRACTION: f64 = 0.25;

/// Largest |log size ratio| accepted by [`decode`]; beyond 2^53 the anchor-relative
/// offsets no longer survive in f64.
pub const MAX_LOG_SIZE_RATIO: f64 = 36.7;

/// An annotated face. Faces flagged `invalid` never take part in matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub invalid: bool,
}

impl GroundTruth {
    pub fn new(bbox: BBox) -> Self {
        Self { bbox, invalid: false }
    }

    pub fn invalid(bbox: BBox) -> Self {
        Self { bbox, invalid: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Ignore => "ignore",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<Label>,
    /// Index of the best-overlapping ground truth, present only for positives.
    pub matched_gt: Vec<Option<usize>>,
    /// Best IoU against any valid ground truth.
    pub max_iou: Vec<f64>,
}

impl AssignmentResult {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Thresholds for one assignment stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignParams {
    /// Overlap at or above which a box is positive.
    pub pos_iou: f64,
    /// Overlap strictly below which a box is negative.
    pub neg_iou: f64,
    /// When set, boxes not fully inside this image are ignored.
    pub border: Option<ImageSize>,
}

impl AssignParams {
    pub fn rpn() -> Self {
        Self {
            pos_iou: RPN_POS_IOU,
            neg_iou: RPN_NEG_IOU,
            border: None,
        }
    }

    pub fn rcnn() -> Self {
        Self {
            pos_iou: RCNN_POS_IOU,
            neg_iou: RCNN_NEG_IOU,
            border: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.neg_iou)
            && (0.0..=1.0).contains(&self.pos_iou)
            && self.neg_iou <= self.pos_iou;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "thresholds must satisfy 0 <= neg ({}) <= pos ({}) <= 1",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }
}

/// Per-box overlap statistics against the valid ground truths.
struct Overlaps {
    /// Row-major `boxes x valid_gts`.
    ious: Vec<f64>,
    valid: Vec<usize>,
    max_iou: Vec<f64>,
    argmax: Vec<Option<usize>>,
}

fn overlaps(boxes: &[BBox], gts: &[GroundTruth]) -> Overlaps {
    let valid: Vec<usize> = (0..gts.len()).filter(|&g| !gts[g].invalid).collect();
    let mut ious = Vec::with_capacity(boxes.len() * valid.len());
    let mut max_iou = Vec::with_capacity(boxes.len());
    let mut argmax = Vec::with_capacity(boxes.len());
    for b in boxes {
        let mut best: Option<(usize, f64)> = None;
        for &g in &valid {
            let v = b.iou(&gts[g].bbox);
            ious.push(v);
            if best.is_none_or(|(_, m)| v > m) {
                best = Some((g, v));
            }
        }
        max_iou.push(best.map_or(0.0, |(_, v)| v));
        argmax.push(best.map(|(g, _)| g));
    }
    Overlaps {
        ious,
        valid,
        max_iou,
        argmax,
    }
}

fn outside(boxes: &[BBox], border: Option<ImageSize>) -> Vec<bool> {
    match border {
        Some(size) => boxes.iter().map(|b| !b.is_inside(size)).collect(),
        None => vec![false; boxes.len()],
    }
}

/// First-stage assignment.
///
/// A box is positive when its best IoU reaches `pos_iou`, or when it is the
/// (lowest-index) best box for some valid ground truth with nonzero overlap.
/// It is negative when its best IoU is below `neg_iou`, ignored otherwise.
pub fn assign_rpn(anchors: &[BBox], gts: &[GroundTruth], params: &AssignParams) -> Result<AssignmentResult> {
    if anchors.is_empty() {
        return Err(Error::EmptyInput("anchor list"));
    }
    params.validate()?;
    let ov = overlaps(anchors, gts);
    let skip = outside(anchors, params.border);
    let mut labels = label_by_threshold(&ov.max_iou, &skip, params);

    let nv = ov.valid.len();
    for col in 0..nv {
        let mut best: Option<(usize, f64)> = None;
        for (a, &skipped) in skip.iter().enumerate() {
            if skipped {
                continue;
            }
            let v = ov.ious[a * nv + col];
            if v > 0.0 && best.is_none_or(|(_, m)| v > m) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            labels[a] = Label::Positive;
        }
    }

    Ok(finish(labels, ov))
}

/// Second-stage assignment: pure thresholding, no argmax rule.
pub fn assign_rcnn(proposals: &[BBox], gts: &[GroundTruth], params: &AssignParams) -> Result<AssignmentResult> {
    if proposals.is_empty() {
        return Err(Error::EmptyInput("proposal list"));
    }
    params.validate()?;
    let ov = overlaps(proposals, gts);
    let skip = outside(proposals, params.border);
    let labels = label_by_threshold(&ov.max_iou, &skip, params);
    Ok(finish(labels, ov))
}

fn label_by_threshold(max_iou: &[f64], skip: &[bool], params: &AssignParams) -> Vec<Label> {
    max_iou
        .iter()
        .zip(skip)
        .map(|(&m, &skipped)| {
            if skipped {
                Label::Ignore
            } else if m >= params.pos_iou {
                Label::Positive
            } else if m < params.neg_iou {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect()
}

fn finish(labels: Vec<Label>, ov: Overlaps) -> AssignmentResult {
    let matched_gt = labels
        .iter()
        .zip(&ov.argmax)
        .map(|(l, g)| if *l == Label::Positive { *g } else { None })
        .collect();
    AssignmentResult {
        labels,
        matched_gt,
        max_iou: ov.max_iou,
    }
}

/// Draws a training minibatch of box indices.
///
/// Up to `round(batch * pos_fraction)` positives are drawn uniformly without
/// replacement; the rest of the batch is filled from negatives. Ignored boxes
/// are never drawn. The result lists sampled positives then sampled
/// negatives, each in ascending index order.
pub fn sample_minibatch(result: &AssignmentResult, batch: usize, pos_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if !(pos_fraction > 0.0 && pos_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "positive fraction must lie in (0, 1], got {pos_fraction}"
        )));
    }
    let positives = result.indices_of(Label::Positive);
    let negatives = result.indices_of(Label::Negative);
    let pos_quota = ((batch as f64) * pos_fraction).round() as usize;
    let n_pos = pos_quota.min(positives.len()).min(batch);
    let n_neg = (batch - n_pos).min(negatives.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = draw(&positives, n_pos, &mut rng);
    out.extend(draw(&negatives, n_neg, &mut rng));
    Ok(out)
}

fn draw(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Box regression target relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

pub fn encode(bbox: &BBox, anchor: &BBox) -> Result<RegressionTarget> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 || bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    let (cx, cy) = bbox.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(RegressionTarget {
        tx: (cx - ax) / aw,
        ty: (cy - ay) / ah,
        tw: (bbox.width() / aw).ln(),
        th: (bbox.height() / ah).ln(),
    })
}

pub fn decode(t: &RegressionTarget, anchor: &BBox) -> Result<BBox> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    for v in [t.tw, t.th] {
        if !v.is_finite() || v.abs() > MAX_LOG_SIZE_RATIO {
            return Err(Error::DecodeOverflow(v));
        }
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + t.tx * aw;
    let cy = ay + t.ty * ah;
    let w = aw * t.tw.exp();
    let h = ah * t.th.exp();
    BBox::from_center(cx, cy, w, h).map_err(|_| Error::DecodeOverflow(t.tw.max(t.th)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn rpn_identical_and_disjoint() {
        let gt = [GroundTruth::new(b(0.0, 0.0, 10.0, 10.0))];
        let anchors = [b(0.0, 0.0, 10.0, 10.0), b(50.0, 50.0, 60.0, 60.0)];
        let r = assign_rpn(&anchors, &gt, &AssignParams::rpn()).unwrap();
        assert_eq!(r.labels, vec![Label::Positive, Label::Negative]);
        assert_eq!(r.matched_gt, vec![Some(0), None]);
        assert_eq!(r.max_iou, vec![1.0, 0.0]);
    }

    #[test]
    fn rpn_argmax_below_threshold() {
        let gt = [GroundTruth::new(b(0.0, 0.0, 30.0, 30.0))];
        let anchors = [b(0.0, 0.0, 30.0, 15.0), b(0.0, 0.0, 30.0, 20.0)];
        let r = assign_rpn(&anchors, &gt, &AssignParams::rpn()).unwrap();
        assert!((r.max_iou[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.max_iou[0], 0.5);
        assert_eq!(r.labels, vec![Label::Ignore, Label::Positive]);
        assert_eq!(r.matched_gt[1], Some(0));
    }

    #[test]
    fn rpn_argmax_tie_takes_lowest_index() {
        let gt = [GroundTruth::new(b(0.0, 0.0, 30.0, 30.0))];
        let anchors = [b(0.0, 0.0, 30.0, 15.0), b(0.0, 15.0, 30.0, 30.0)];
        let r = assign_rpn(&anchors, &gt, &AssignParams::rpn()).unwrap();
        assert_eq!(r.labels, vec![Label::Positive, Label::Ignore]);
    }

    #[test]
    fn rpn_disjoint_scene_has_no_positive() {
        let gt = [GroundTruth::new(b(100.0, 100.0, 110.0, 110.0))];
        let anchors = [b(0.0, 0.0, 10.0, 10.0), b(20.0, 0.0, 30.0, 10.0)];
        let r = assign_rpn(&anchors, &gt, &AssignParams::rpn()).unwrap();
        assert_eq!(r.count(Label::Positive), 0);
    }

    #[test]
    fn invalid_gt_excluded() {
        let gt = [GroundTruth::invalid(b(0.0, 0.0, 10.0, 10.0))];
        let anchors = [b(0.0, 0.0, 10.0, 10.0)];
        let r = assign_rpn(&anchors, &gt, &AssignParams::rpn()).unwrap();
        assert_eq!(r.labels, vec![Label::Negative]);
        assert_eq!(r.max_iou, vec![0.0]);
    }

    #[test]
    fn border_filter_ignores_outside() {
        let gt = [GroundTruth::new(b(0.0, 0.0, 10.0, 10.0))];
        let anchors = [b(-2.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 9.0, 10.0)];
        let mut params = AssignParams::rpn();
        params.border = Some(ImageSize::new(100, 100).unwrap());
        let r = assign_rpn(&anchors, &gt, &params).unwrap();
        assert_eq!(r.labels, vec![Label::Ignore, Label::Positive]);
    }

    #[test]
    fn rcnn_thresholds() {
        let gt = [GroundTruth::new(b(0.0, 0.0, 10.0, 10.0))];
        let proposals = [
            b(0.0, 0.0, 10.0, 10.0),
            b(0.0, 0.0, 10.0, 4.0),
            b(0.0, 0.0, 10.0, 2.9),
        ];
        let r = assign_rcnn(&proposals, &gt, &AssignParams::rcnn()).unwrap();
        assert!((r.max_iou[1] - 0.4).abs() < 1e-12);
        assert!((r.max_iou[2] - 0.29).abs() < 1e-12);
        assert_eq!(r.labels, vec![Label::Positive, Label::Ignore, Label::Negative]);
    }

    #[test]
    fn rcnn_has_no_argmax_rule() {
        let gt = [GroundTruth::new(b(0.0, 0.0, 30.0, 30.0))];
        let proposals = [b(0.0, 0.0, 30.0, 12.0)];
        let r = assign_rcnn(&proposals, &gt, &AssignParams::rcnn()).unwrap();
        assert_eq!(r.labels, vec![Label::Ignore]);
    }

    #[test]
    fn assignment_errors() {
        let gt = [GroundTruth::new(b(0.0, 0.0, 10.0, 10.0))];
        assert!(assign_rpn(&[], &gt, &AssignParams::rpn()).is_err());
        assert!(assign_rcnn(&[], &gt, &AssignParams::rcnn()).is_err());
        let bad = AssignParams {
            pos_iou: 0.2,
            neg_iou: 0.3,
            border: None,
        };
        assert!(assign_rpn(&[b(0.0, 0.0, 1.0, 1.0)], &gt, &bad).is_err());
    }

    fn synthetic(pos: usize, neg: usize, ign: usize) -> AssignmentResult {
        let mut labels = vec![Label::Positive; pos];
        labels.extend(std::iter::repeat_n(Label::Negative, neg));
        labels.extend(std::iter::repeat_n(Label::Ignore, ign));
        let n = labels.len();
        AssignmentResult {
            matched_gt: labels.iter().map(|l| (*l == Label::Positive).then_some(0)).collect(),
            labels,
            max_iou: vec![0.0; n],
        }
    }

    #[test]
    fn minibatch_counts() {
        let r = synthetic(300, 10_000, 50);
        let s = sample_minibatch(&r, 256, 0.5, 0).unwrap();
        let pos = s.iter().filter(|&&i| r.labels[i] == Label::Positive).count();
        assert_eq!((pos, s.len() - pos), (128, 128));

        let r = synthetic(10, 10_000, 0);
        let s = sample_minibatch(&r, 256, 0.5, 0).unwrap();
        let pos = s.iter().filter(|&&i| r.labels[i] == Label::Positive).count();
        assert_eq!((pos, s.len() - pos), (10, 246));

        assert!(sample_minibatch(&synthetic(0, 0, 0), 256, 0.5, 0).unwrap().is_empty());
        assert!(sample_minibatch(&synthetic(0, 0, 40), 256, 0.5, 0).unwrap().is_empty());
    }

    #[test]
    fn minibatch_never_samples_ignore_or_repeats() {
        let r = synthetic(50, 60, 500);
        let s = sample_minibatch(&r, 128, 0.25, 9).unwrap();
        assert_eq!(s.len(), 32 + 60);
        assert!(s.iter().all(|&i| r.labels[i] != Label::Ignore));
        let mut dedup = s.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), s.len());
    }

    #[test]
    fn minibatch_seeded() {
        let r = synthetic(300, 1000, 10);
        let a = sample_minibatch(&r, 256, 0.5, 7).unwrap();
        assert_eq!(a, sample_minibatch(&r, 256, 0.5, 7).unwrap());
        let c = sample_minibatch(&r, 256, 0.5, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), c.len());
    }

    #[test]
    fn minibatch_rejects_bad_args() {
        let r = synthetic(1, 1, 0);
        assert!(sample_minibatch(&r, 0, 0.5, 0).is_err());
        assert!(sample_minibatch(&r, 8, 0.0, 0).is_err());
        assert!(sample_minibatch(&r, 8, 1.5, 0).is_err());
    }

    #[test]
    fn codec_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let t = encode(&a, &a).unwrap();
        assert_eq!(t, RegressionTarget { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 });
        assert_eq!(decode(&t, &a).unwrap(), a);

        let t = encode(&b(0.0, 0.0, 20.0, 20.0), &a).unwrap();
        assert_eq!((t.tx, t.ty), (0.5, 0.5));
        assert!((t.tw - 2f64.ln()).abs() < 1e-15 && (t.th - 2f64.ln()).abs() < 1e-15);

        let back = decode(
            &RegressionTarget { tx: 0.5, ty: 0.5, tw: 2f64.ln(), th: 2f64.ln() },
            &a,
        )
        .unwrap();
        for (p, q) in [(back.x1(), 0.0), (back.y1(), 0.0), (back.x2(), 20.0), (back.y2(), 20.0)] {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn codec_errors() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let flat = b(0.0, 0.0, 10.0, 0.0);
        assert_eq!(encode(&a, &flat), Err(Error::DegenerateBox));
        assert_eq!(encode(&flat, &a), Err(Error::DegenerateBox));
        let t = RegressionTarget { tx: 0.0, ty: 0.0, tw: 100.0, th: 0.0 };
        assert!(matches!(decode(&t, &a), Err(Error::DecodeOverflow(_))));
        let t = RegressionTarget { tx: 0.0, ty: 0.0, tw: 0.0, th: f64::NAN };
        assert!(matches!(decode(&t, &a), Err(Error::DecodeOverflow(_))));
    }
}
