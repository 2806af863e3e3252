//! Brute-force reference implementations and random instance generators
//! shared by the integration suites. Nothing here calls into the code paths
//! it is used to check.

#![allow(dead_code)]

use fdpost::targets::Label;
use fdpost::{BBox, Detection, GroundTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain corner-form IoU, written independently of `BBox::iou`.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let ua = (a.x2() - a.x1()) * (a.y2() - a.y1()) + (b.x2() - b.x1()) * (b.y2() - b.y1()) - inter;
    if inter <= 0.0 || ua <= 0.0 {
        0.0
    } else {
        (inter / ua).min(1.0)
    }
}

/// Textbook O(n^2) NMS: repeatedly take the best remaining detection (lowest
/// input index on ties) and delete everything overlapping it above `thresh`.
/// Returns input indices in keep order.
pub fn brute_nms(dets: &[Detection], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for k in 1..alive.len() {
            if dets[alive[k]].score() > dets[alive[best]].score() {
                best = k;
            }
        }
        let top = alive.remove(best);
        keep.push(top);
        alive.retain(|&j| ref_iou(&dets[top].bbox, &dets[j].bbox) <= thresh);
    }
    keep
}

/// Companion count of every detection, by direct enumeration.
pub fn brute_companions(dets: &[Detection], iou: f64) -> Vec<usize> {
    (0..dets.len())
        .map(|i| {
            (0..dets.len())
                .filter(|&j| j != i && ref_iou(&dets[i].bbox, &dets[j].bbox) >= iou)
                .count()
        })
        .collect()
}

pub struct RefAssignment {
    pub labels: Vec<Label>,
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

/// O(A*G) reference assigner. `argmax_rule` enables the first-stage rule that
/// promotes the lowest-index best anchor of each valid ground truth.
pub fn brute_assign(boxes: &[BBox], gts: &[GroundTruth], pos: f64, neg: f64, argmax_rule: bool) -> RefAssignment {
    let n = boxes.len();
    let mut labels = vec![Label::Ignore; n];
    let mut matched = vec![None; n];
    let mut max_iou = vec![0.0; n];
    let mut best_gt = vec![None; n];
    for a in 0..n {
        for (g, gt) in gts.iter().enumerate() {
            if gt.invalid {
                continue;
            }
            let v = ref_iou(&boxes[a], &gt.bbox);
            if best_gt[a].is_none() || v > max_iou[a] {
                max_iou[a] = v;
                best_gt[a] = Some(g);
            }
        }
        labels[a] = if max_iou[a] >= pos {
            Label::Positive
        } else if max_iou[a] < neg {
            Label::Negative
        } else {
            Label::Ignore
        };
    }
    if argmax_rule {
        for gt in gts.iter().filter(|g| !g.invalid) {
            let ious: Vec<f64> = boxes.iter().map(|b| ref_iou(b, &gt.bbox)).collect();
            let top = ious.iter().cloned().fold(0.0, f64::max);
            if top > 0.0 {
                let first = ious.iter().position(|&v| v == top).unwrap();
                labels[first] = Label::Positive;
            }
        }
    }
    for a in 0..n {
        if labels[a] == Label::Positive {
            matched[a] = best_gt[a];
        }
    }
    RefAssignment {
        labels,
        matched,
        max_iou,
    }
}

/// Exact all-point interpolated AP from pooled `(score, is_tp)` pairs, by
/// direct definition: for every distinct recall level, the best precision
/// reachable at or beyond it, times the recall increment. Equal scores are
/// ordered false positive first.
pub fn brute_ap(pool: &[(f64, bool)], total_gt: usize) -> f64 {
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut pts = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (_, is_tp) in &sorted {
        if *is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        pts.push((tp / total_gt as f64, tp / (tp + fp)));
    }
    let mut levels: Vec<f64> = pts.iter().map(|p| p.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let best = pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

pub fn random_box(rng: &mut impl Rng, extent: f64, max_side: f64) -> BBox {
    let w = rng.random_range(0.0..max_side);
    let h = rng.random_range(0.0..max_side);
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Integer-grid box; produces exact IoU ties and duplicates.
pub fn random_grid_box(rng: &mut impl Rng, extent: i32, max_side: i32) -> BBox {
    let x = rng.random_range(0..extent) as f64;
    let y = rng.random_range(0..extent) as f64;
    let w = rng.random_range(0..=max_side) as f64;
    let h = rng.random_range(0..=max_side) as f64;
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Random detections clustered around a few centers so overlaps are common.
/// Scores are quantized to produce ties.
pub fn random_detections(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
    let clusters = rng.random_range(1..=8);
    let centers: Vec<(f64, f64)> = (0..clusters)
        .map(|_| (rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)))
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.random_range(0..clusters)];
            let x = cx + rng.random_range(-20.0..20.0);
            let y = cy + rng.random_range(-20.0..20.0);
            let w = rng.random_range(0.0..60.0);
            let h = rng.random_range(0.0..60.0);
            let score = f64::from(rng.random_range(0..=50u32)) / 50.0;
            Detection::new(BBox::new(x, y, x + w, y + h).unwrap(), score).unwrap()
        })
        .collect()
}
