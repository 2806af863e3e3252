//! Inference-side selection: top-K proposals, greedy NMS, the companion
//! filter and the multi-scale voted ensemble.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};

pub const DEFAULT_TOP_K: usize = 6000;
pub const DEFAULT_COMPANION_IOU: f64 = 0.3;
pub const DEFAULT_MIN_COMPANIONS: usize = 1;
pub const DEFAULT_NMS_IOU: f64 = 0.3;
/// Shorter-side test scales.
pub const DEFAULT_TEST_SCALES: [u32; 5] = [600, 800, 1000, 1200, 1400];

/// A scored box, optionally tagged with the shorter-side scale it was detected at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    score: f64,
    pub source_scale: Option<u32>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            score,
            source_scale: None,
        })
    }

    pub fn with_scale(mut self, scale: u32) -> Self {
        self.source_scale = Some(scale);
        self
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Indices of `dets` sorted by descending score; equal scores keep input order.
pub(crate) fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(dets[a].score, dets[b].score));
    order
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// The `k` highest-scoring detections, best first. No suppression is applied
/// and small boxes are kept.
pub fn top_k(dets: &[Detection], k: usize) -> Vec<Detection> {
    let mut out = dets.to_vec();
    out.sort_by(|a, b| by_score_desc(a.score, b.score));
    out.truncate(k);
    out
}

/// Classic greedy NMS. Walks detections in descending score order and keeps
/// each one unless a previously kept detection overlaps it with IoU strictly
/// above `iou_thresh`. Output is in keep order.
pub fn greedy_nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    greedy_nms_indices(dets, iou_thresh)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Same as [`greedy_nms`] but returns indices into `dets`.
pub fn greedy_nms_indices(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    if dets.is_empty() {
        return Vec::new();
    }
    let order = score_order(dets);
    if iou_thresh < 0.0 {
        // every IoU exceeds a negative threshold
        return vec![order[0]];
    }
    let mut grid = KeptGrid::new(dets);
    let mut keep = Vec::new();
    for &i in &order {
        let b = &dets[i].bbox;
        let suppressed = grid.any_overlapping(b, |j| dets[j].bbox.iou(b) > iou_thresh);
        if !suppressed {
            grid.insert(b, i);
            keep.push(i);
        }
    }
    keep
}

/// Uniform bucket grid over the kept set. Only boxes with positive-area
/// overlap can have IoU above any threshold >= 0, so a candidate only needs
/// to be checked against kept boxes sharing a cell with it.
struct KeptGrid {
    min_x: f64,
    min_y: f64,
    cell_w: f64,
    cell_h: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl KeptGrid {
    fn new(dets: &[Detection]) -> Self {
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut side_sum = 0.0;
        for d in dets {
            let b = &d.bbox;
            min_x = min_x.min(b.x1());
            min_y = min_y.min(b.y1());
            max_x = max_x.max(b.x2());
            max_y = max_y.max(b.y2());
            side_sum += b.width().max(b.height());
        }
        let n = dets.len();
        let (span_x, span_y) = ((max_x - min_x).max(1e-9), (max_y - min_y).max(1e-9));
        // Cells about the size of a typical box, capped at a few cells per box.
        let coverage = (span_x * span_y / n as f64).sqrt();
        let cell = (side_sum / n as f64).max(coverage).max(1e-9);
        let budget = 4 * n + 1;
        let cols = ((span_x / cell) as usize + 1).min(budget);
        let rows = ((span_y / cell) as usize + 1).min((budget / cols).max(1));
        Self {
            min_x,
            min_y,
            cell_w: (span_x / cols as f64).max(cell),
            cell_h: (span_y / rows as f64).max(cell),
            cols,
            rows,
            cells: vec![Vec::new(); cols * rows],
        }
    }

    fn span(&self, b: &BBox) -> (usize, usize, usize, usize) {
        let c = |v: f64, lo: f64, size: f64, n: usize| (((v - lo) / size).max(0.0) as usize).min(n - 1);
        (
            c(b.x1(), self.min_x, self.cell_w, self.cols),
            c(b.y1(), self.min_y, self.cell_h, self.rows),
            c(b.x2(), self.min_x, self.cell_w, self.cols),
            c(b.y2(), self.min_y, self.cell_h, self.rows),
        )
    }

    fn any_overlapping(&self, b: &BBox, mut hit: impl FnMut(usize) -> bool) -> bool {
        if b.area() <= 0.0 {
            return false;
        }
        let (c0, r0, c1, r1) = self.span(b);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if self.cells[r * self.cols + c].iter().any(|&j| hit(j as usize)) {
                    return true;
                }
            }
        }
        false
    }

    fn insert(&mut self, b: &BBox, idx: usize) {
        // zero-area boxes have IoU 0 with everything
        if b.area() <= 0.0 {
            return;
        }
        let (c0, r0, c1, r1) = self.span(b);
        for r in r0..=r1 {
            for c in c0..=c1 {
                self.cells[r * self.cols + c].push(idx as u32);
            }
        }
    }
}

/// Number of OTHER detections overlapping each detection with IoU >= `iou`.
pub fn companion_counts(dets: &[Detection], iou: f64) -> Vec<usize> {
    let mut counts = vec![0usize; dets.len()];
    for i in 0..dets.len() {
        for j in (i + 1)..dets.len() {
            if dets[i].bbox.iou(&dets[j].bbox) >= iou {
                counts[i] += 1;
                counts[j] += 1;
            }
        }
    }
    counts
}

/// Deletes every detection that has fewer than `min_companions` other
/// detections overlapping it with IoU >= `iou`. Counts are taken on the input
/// as given; order is preserved.
pub fn companion_filter(dets: &[Detection], iou: f64, min_companions: usize) -> Vec<Detection> {
    if min_companions == 0 {
        return dets.to_vec();
    }
    companion_counts(dets, iou)
        .into_iter()
        .zip(dets)
        .filter(|(c, _)| *c >= min_companions)
        .map(|(_, d)| *d)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub companion_iou: f64,
    pub min_companions: usize,
    pub nms_iou: f64,
    pub scales: Vec<u32>,
    /// Replace each kept box by the score-weighted mean of the filtered boxes
    /// overlapping it at IoU >= `nms_iou`. Off by default.
    pub box_voting: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            companion_iou: DEFAULT_COMPANION_IOU,
            min_companions: DEFAULT_MIN_COMPANIONS,
            nms_iou: DEFAULT_NMS_IOU,
            scales: DEFAULT_TEST_SCALES.to_vec(),
            box_voting: false,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("companion IoU", self.companion_iou), ("NMS IoU", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.scales.is_empty() {
            return Err(Error::EmptyInput("test scale list"));
        }
        if self.scales.contains(&0) {
            return Err(Error::InvalidConfig("test scales must be positive".into()));
        }
        Ok(())
    }
}

/// Merges per-scale detections of one image into a single detection set.
///
/// Each scale's boxes are mapped back to the original frame by
/// `shorter_side / scale`, concatenated in ascending scale order, passed
/// through the companion filter and greedy NMS, then clipped to the image.
/// Each entry of `per_scale` pairs a test scale with the detections found at
/// it; the order of entries does not affect the result.
pub fn voted_ensemble(per_scale: &[(u32, Vec<Detection>)], original: ImageSize, cfg: &EnsembleConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut groups: Vec<&(u32, Vec<Detection>)> = per_scale.iter().collect();
    groups.sort_by_key(|(s, _)| *s);
    if let Some(w) = groups.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidConfig(format!("scale {} given more than once", w[0].0)));
    }

    let shorter = f64::from(original.shorter_side());
    let mut merged = Vec::new();
    for (scale, dets) in groups {
        if !cfg.scales.contains(scale) {
            return Err(Error::UnknownScale(*scale));
        }
        let factor = shorter / f64::from(*scale);
        for d in dets {
            match d.source_scale {
                Some(tag) if tag != *scale => return Err(Error::UnknownScale(tag)),
                _ => {}
            }
            let mut r = *d;
            r.bbox = d.bbox.rescale(factor)?;
            r.source_scale = Some(*scale);
            merged.push(r);
        }
    }

    let filtered = companion_filter(&merged, cfg.companion_iou, cfg.min_companions);
    let keep = greedy_nms_indices(&filtered, cfg.nms_iou);
    let out = keep
        .into_iter()
        .map(|i| {
            let mut d = filtered[i];
            if cfg.box_voting {
                d.bbox = vote(&filtered, &d.bbox, cfg.nms_iou);
            }
            d.bbox = d.bbox.clip(original);
            d
        })
        .collect();
    Ok(out)
}

/// Score-weighted average of all boxes overlapping `anchor` at IoU >= `iou`.
fn vote(dets: &[Detection], anchor: &BBox, iou: f64) -> BBox {
    let (mut w, mut acc) = (0.0, [0.0f64; 4]);
    for d in dets {
        if d.bbox == *anchor || d.bbox.iou(anchor) >= iou {
            let s = d.score;
            w += s;
            acc[0] += s * d.bbox.x1();
            acc[1] += s * d.bbox.y1();
            acc[2] += s * d.bbox.x2();
            acc[3] += s * d.bbox.y2();
        }
    }
    if w <= 0.0 {
        return *anchor;
    }
    BBox::new(acc[0] / w, acc[1] / w, acc[2] / w, acc[3] / w).unwrap_or(*anchor)
}
