//! The `fdpost` command-line front end.
//!
//! Each subcommand reads its inputs, runs one stage of the pipeline and
//! writes plain-text output. The `*_output` functions do the work on
//! in-memory text so they can be exercised without touching the file system.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::anchors::{grid_anchors, AnchorConfig};
use crate::evaluation::{evaluate, ApMode, EvalReport};
use crate::geometry::{BBox, ImageSize};
use crate::postprocess::{greedy_nms, top_k, voted_ensemble, Detection, EnsembleConfig};
use crate::targets::{assign_rcnn, assign_rpn, sample_minibatch, AssignParams, GroundTruth};
use crate::widerio::{
    image_key, read_annotations, read_detections, read_subset_list, write_detections, DetectionRecord,
};

#[derive(Debug, Parser)]
#[command(name = "fdpost", version, about = "Face detection post-processing and WIDER-style evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump the anchor grid of a feature map as CSV (x1,y1,x2,y2).
    Anchors(AnchorsArgs),
    /// Keep the top-k detections per image, optionally followed by greedy NMS.
    Nms(NmsArgs),
    /// Merge per-scale detections with the companion filter and NMS.
    Ensemble(EnsembleArgs),
    /// Compute precision/recall curves and average precision per subset.
    Eval(EvalArgs),
    /// Label anchors or proposals against ground truth and draw a minibatch.
    Assign(AssignArgs),
}

#[derive(Debug, Args)]
pub struct AnchorsArgs {
    /// Feature stride in pixels.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    pub stride: u32,
    /// Anchor side lengths (anchor area is the square of each).
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512", value_parser = positive_real)]
    pub scales: Vec<f64>,
    /// Height/width aspect ratios.
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2", value_parser = positive_real)]
    pub ratios: Vec<f64>,
    /// Feature map width in cells.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub feat_width: u32,
    /// Feature map height in cells.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub feat_height: u32,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    /// Detection file.
    pub input: PathBuf,
    /// Greedy NMS IoU threshold. Without it only top-k selection is applied.
    #[arg(long, value_parser = unit_interval)]
    pub iou: Option<f64>,
    /// Detections kept per image before suppression.
    #[arg(long, default_value_t = 6000, value_parser = clap::value_parser!(u64).range(1..))]
    pub top_k: u64,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// One detection file per test scale, in the same order as --scales.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Shorter-side test scale of each input file.
    #[arg(long, value_delimiter = ',', default_value = "600,800,1000,1200,1400", value_parser = clap::value_parser!(u32).range(1..))]
    pub scales: Vec<u32>,
    /// File of `image width height` lines giving original image sizes.
    #[arg(long)]
    pub orig_sizes: PathBuf,
    /// IoU a box must share with another box to count as a companion.
    #[arg(long, default_value_t = 0.3, value_parser = unit_interval)]
    pub companion_iou: f64,
    /// Companions required to survive; 0 disables the filter.
    #[arg(long, default_value_t = 1)]
    pub min_companions: usize,
    /// IoU threshold of the final greedy NMS.
    #[arg(long, default_value_t = 0.3, value_parser = unit_interval)]
    pub nms_iou: f64,
    /// Average kept boxes with their overlapping boxes, weighted by score.
    #[arg(long)]
    pub box_voting: bool,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ApModeArg {
    Exact,
    Sampled1000,
}

impl From<ApModeArg> for ApMode {
    fn from(m: ApModeArg) -> Self {
        match m {
            ApModeArg::Exact => ApMode::Exact,
            ApModeArg::Sampled1000 => ApMode::Sampled1000,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detection file.
    #[arg(long)]
    pub dets: PathBuf,
    /// Ground-truth annotation file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Named subset as NAME=LISTFILE; repeatable. Defaults to a single
    /// subset "all" covering every annotated image.
    #[arg(long, value_parser = subset_spec)]
    pub subset: Vec<(String, PathBuf)>,
    /// IoU needed for a detection to match a face.
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub iou: f64,
    #[arg(long, value_enum, default_value_t = ApModeArg::Exact)]
    pub ap_mode: ApModeArg,
    /// Report CSV (subset,ap,num_gts,num_dets); stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// PR points CSV (subset,recall,precision).
    #[arg(long)]
    pub pr: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Rpn,
    Rcnn,
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    /// CSV of boxes with header x1,y1,x2,y2.
    #[arg(long)]
    pub anchors: PathBuf,
    /// Ground-truth annotation file; every image in it is labelled.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::Rpn)]
    pub stage: Stage,
    /// Positive IoU threshold [default: 0.7 for rpn, 0.5 for rcnn].
    #[arg(long, value_parser = unit_interval)]
    pub pos_thresh: Option<f64>,
    /// Negative IoU threshold.
    #[arg(long, default_value_t = 0.3, value_parser = unit_interval)]
    pub neg_thresh: f64,
    /// Minibatch size [default: 256 for rpn, 128 for rcnn].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: Option<u64>,
    /// Positive share of the minibatch [default: 0.5 for rpn, 0.25 for rcnn].
    #[arg(long, value_parser = positive_fraction)]
    pub pos_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ignore boxes not fully inside a WIDTHxHEIGHT image.
    #[arg(long, value_parser = image_size_spec)]
    pub border: Option<ImageSize>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn positive_real(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("'{s}' is not a positive number")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("'{s}' is not a number in [0, 1]")),
    }
}

fn positive_fraction(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        _ => Err(format!("'{s}' is not a number in (0, 1]")),
    }
}

fn subset_spec(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("'{s}' is not of the form NAME=LISTFILE")),
    }
}

fn image_size_spec(s: &str) -> Result<ImageSize, String> {
    let err = || format!("'{s}' is not of the form WIDTHxHEIGHT");
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(err)?;
    let w = w.trim().parse::<u32>().map_err(|_| err())?;
    let h = h.trim().parse::<u32>().map_err(|_| err())?;
    ImageSize::new(w, h).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Anchors(a) => {
            let cfg = AnchorConfig {
                stride: a.stride,
                scales: a.scales,
                ratios: a.ratios,
            };
            let text = anchors_output(&cfg, a.feat_width, a.feat_height)?;
            emit(a.output.as_deref(), &text)
        }
        Command::Nms(a) => {
            let input = read_text(&a.input)?;
            let k = usize::try_from(a.top_k).unwrap_or(usize::MAX);
            let text = nms_output(&input, k, a.iou).with_context(|| a.input.display().to_string())?;
            emit(a.output.as_deref(), &text)
        }
        Command::Ensemble(a) => {
            if a.inputs.len() != a.scales.len() {
                bail!(
                    "{} detection files given for {} scales; pass one file per --scales entry",
                    a.inputs.len(),
                    a.scales.len()
                );
            }
            let cfg = EnsembleConfig {
                companion_iou: a.companion_iou,
                min_companions: a.min_companions,
                nms_iou: a.nms_iou,
                scales: a.scales.clone(),
                box_voting: a.box_voting,
            };
            cfg.validate()?;
            let sizes_text = read_text(&a.orig_sizes)?;
            let mut inputs = Vec::with_capacity(a.inputs.len());
            for (path, &scale) in a.inputs.iter().zip(&a.scales) {
                inputs.push((path.display().to_string(), scale, read_text(path)?));
            }
            let text = ensemble_output(&inputs, &a.orig_sizes.display().to_string(), &sizes_text, &cfg)?;
            emit(a.output.as_deref(), &text)
        }
        Command::Eval(a) => {
            let dets = read_text(&a.dets)?;
            let gt = read_text(&a.gt)?;
            let mut subsets = Vec::with_capacity(a.subset.len());
            for (name, path) in &a.subset {
                subsets.push((name.clone(), read_text(path)?));
            }
            let report = eval_report(&dets, &gt, &subsets, a.iou, a.ap_mode.into())?;
            if let Some(pr) = &a.pr {
                write_file(pr, &pr_csv(&report))?;
            }
            emit(a.report.as_deref(), &report_csv(&report))
        }
        Command::Assign(a) => {
            let anchors = read_text(&a.anchors)?;
            let gt = read_text(&a.gt)?;
            let text = assign_output(&anchors, &gt, &a)?;
            emit(a.output.as_deref(), &text)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn anchors_output(cfg: &AnchorConfig, feat_width: u32, feat_height: u32) -> Result<String> {
    let grid = grid_anchors(cfg, feat_width, feat_height)?;
    boxes_csv(&grid.anchors)
}

/// Serializes boxes as CSV with an `x1,y1,x2,y2` header.
pub fn boxes_csv(boxes: &[BBox]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x1", "y1", "x2", "y2"])?;
    for b in boxes {
        w.serialize((b.x1(), b.y1(), b.x2(), b.y2()))?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Parses an `x1,y1,x2,y2` CSV with header.
pub fn read_boxes_csv(text: &str) -> Result<Vec<BBox>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<(f64, f64, f64, f64)>().enumerate() {
        let line = i + 2;
        let (x1, y1, x2, y2) = row.map_err(|e| anyhow!("line {line}: {e}"))?;
        out.push(BBox::new(x1, y1, x2, y2).map_err(|e| anyhow!("line {line}: {e}"))?);
    }
    Ok(out)
}

/// Parses a detection file into per-image detection lists, rejecting an image
/// that appears twice.
fn grouped_detections(text: &str) -> Result<Vec<(String, usize, Vec<Detection>)>> {
    let file = read_detections(text.as_bytes())?;
    let dets = file.to_detections()?;
    let mut seen = BTreeMap::new();
    let mut out = Vec::with_capacity(dets.len());
    for ((name, d), &line) in dets.into_iter().zip(&file.record_lines) {
        if let Some(first) = seen.insert(name.clone(), line) {
            bail!("line {line}: image '{name}' already listed at line {first}");
        }
        out.push((name, line, d));
    }
    Ok(out)
}

pub fn nms_output(input: &str, k: usize, iou: Option<f64>) -> Result<String> {
    let mut records: Vec<DetectionRecord> = grouped_detections(input)?
        .into_iter()
        .map(|(name, _, dets)| {
            let mut kept = top_k(&dets, k);
            if let Some(t) = iou {
                kept = greedy_nms(&kept, t);
            }
            DetectionRecord::from_detections(name, &kept)
        })
        .collect();
    records.sort_by(|a, b| a.image_name.cmp(&b.image_name));
    Ok(write_detections(&records))
}

/// Parses `image width height` lines keyed by [`image_key`].
pub fn read_image_sizes(text: &str) -> Result<BTreeMap<String, ImageSize>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 3 {
            bail!("line {line}: expected 'image width height', found {} fields", f.len());
        }
        let w = f[1].parse::<u32>().map_err(|_| anyhow!("line {line}: bad width '{}'", f[1]))?;
        let h = f[2].parse::<u32>().map_err(|_| anyhow!("line {line}: bad height '{}'", f[2]))?;
        let size = ImageSize::new(w, h).map_err(|e| anyhow!("line {line}: {e}"))?;
        if out.insert(image_key(f[0]), size).is_some() {
            bail!("line {line}: duplicate size entry for '{}'", f[0]);
        }
    }
    Ok(out)
}

/// Each input is `(label, scale, text)`; `label` is used in error messages.
pub fn ensemble_output(inputs: &[(String, u32, String)], sizes_label: &str, sizes_text: &str, cfg: &EnsembleConfig) -> Result<String> {
    cfg.validate()?;
    let sizes = read_image_sizes(sizes_text).with_context(|| sizes_label.to_string())?;
    let mut per_image: BTreeMap<String, Vec<(u32, Vec<Detection>)>> = BTreeMap::new();
    for (label, scale, text) in inputs {
        for (name, line, dets) in grouped_detections(text).with_context(|| label.clone())? {
            if !sizes.contains_key(&image_key(&name)) {
                bail!("{label}: line {line}: image '{name}' has no entry in {sizes_label}");
            }
            let dets = dets.into_iter().map(|d| d.with_scale(*scale)).collect();
            per_image.entry(name).or_default().push((*scale, dets));
        }
    }
    let mut records = Vec::with_capacity(per_image.len());
    for (name, groups) in &per_image {
        let size = sizes[&image_key(name)];
        let merged = voted_ensemble(groups, size, cfg).with_context(|| format!("image '{name}'"))?;
        records.push(DetectionRecord::from_detections(name.clone(), &merged));
    }
    Ok(write_detections(&records))
}

/// Subsets are `(name, list-file text)`; with none, every annotated image
/// forms the subset `all`.
pub fn eval_report(dets_text: &str, gt_text: &str, subsets: &[(String, String)], iou: f64, mode: ApMode) -> Result<EvalReport> {
    let annotations = read_annotations(gt_text.as_bytes()).context("ground truth")?;
    let mut gts: BTreeMap<String, Vec<GroundTruth>> = BTreeMap::new();
    for rec in &annotations {
        let key = image_key(&rec.image_path);
        if gts.insert(key, rec.ground_truths()).is_some() {
            bail!("ground truth: image '{}' listed twice", rec.image_path);
        }
    }
    let mut dets: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (name, line, d) in grouped_detections(dets_text).context("detections")? {
        let key = image_key(&name);
        if !gts.contains_key(&key) {
            bail!("detections: line {line}: image '{name}' has no ground truth");
        }
        if dets.insert(key, d).is_some() {
            bail!("detections: line {line}: image '{name}' listed twice");
        }
    }
    let mut lists = Vec::with_capacity(subsets.len().max(1));
    if subsets.is_empty() {
        lists.push(("all".to_string(), gts.keys().cloned().collect()));
    }
    for (name, text) in subsets {
        let names = read_subset_list(text.as_bytes()).with_context(|| format!("subset '{name}'"))?;
        let mut keys = Vec::with_capacity(names.len());
        for n in names {
            let k = image_key(&n);
            if !gts.contains_key(&k) {
                bail!("subset '{name}': unknown image '{n}'");
            }
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        lists.push((name.clone(), keys));
    }
    Ok(evaluate(&dets, &gts, &lists, iou, mode)?)
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("subset,ap,num_gts,num_dets\n");
    for s in &report.subsets {
        let _ = writeln!(out, "{},{:.6},{},{}", s.name, s.curve.ap, s.num_gts, s.num_dets);
    }
    out
}

pub fn pr_csv(report: &EvalReport) -> String {
    let mut out = String::from("subset,recall,precision\n");
    for s in &report.subsets {
        for (r, p) in &s.curve.points {
            let _ = writeln!(out, "{},{:.6},{:.6}", s.name, r, p);
        }
    }
    out
}

pub fn assign_output(anchors_text: &str, gt_text: &str, a: &AssignArgs) -> Result<String> {
    let (mut params, default_batch, default_fraction) = match a.stage {
        Stage::Rpn => (AssignParams::rpn(), crate::targets::RPN_BATCH, crate::targets::RPN_POS_FRACTION),
        Stage::Rcnn => (AssignParams::rcnn(), crate::targets::RCNN_BATCH, crate::targets::RCNN_POS_FRACTION),
    };
    if let Some(p) = a.pos_thresh {
        params.pos_iou = p;
    }
    params.neg_iou = a.neg_thresh;
    params.border = a.border;
    params.validate()?;
    let batch = a.batch.map_or(default_batch, |b| usize::try_from(b).unwrap_or(usize::MAX));
    let fraction = a.pos_fraction.unwrap_or(default_fraction);

    let boxes = read_boxes_csv(anchors_text).context("anchors")?;
    let annotations = read_annotations(gt_text.as_bytes()).context("ground truth")?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image", "index", "label", "matched_gt", "max_iou", "sampled"])?;
    for rec in &annotations {
        let gts = rec.ground_truths();
        let result = match a.stage {
            Stage::Rpn => assign_rpn(&boxes, &gts, &params)?,
            Stage::Rcnn => assign_rcnn(&boxes, &gts, &params)?,
        };
        let sample = sample_minibatch(&result, batch, fraction, a.seed)?;
        let mut sampled = vec![false; result.len()];
        for i in sample {
            sampled[i] = true;
        }
        for i in 0..result.len() {
            let matched = result.matched_gt[i].map_or(String::new(), |g| g.to_string());
            w.write_record([
                rec.image_path.as_str(),
                &i.to_string(),
                result.labels[i].as_str(),
                &matched,
                &format!("{:.6}", result.max_iou[i]),
                if sampled[i] { "1" } else { "0" },
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
