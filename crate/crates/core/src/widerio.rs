//! Readers and writers for the WIDER FACE text formats.
//!
//! Ground truth:
//!
//! ```text
//! 0--Parade/0_Parade_marchingband_1_849.jpg
//! 1
//! 449 330 122 149 0 0 0 0 0 0
//! ```
//!
//! One image path line, a face-count line, then one line per face holding
//! `x y w h blur expression illumination invalid occlusion pose`. Entries
//! with zero faces may be followed by a single all-zero padding line.
//!
//! Detections use the same layout with `x y w h score` rows. Subset lists
//! hold one image name per line.

use std::fmt::{self, Write as _};
use std::io::BufRead;

use thiserror::Error;

use crate::error::Error as CoreError;
use crate::geometry::BBox;
use crate::postprocess::Detection;
use crate::targets::GroundTruth;

/// A malformed input, positioned at a 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceAnnotation {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub blur: u8,
    pub expression: u8,
    pub illumination: u8,
    pub invalid: u8,
    pub occlusion: u8,
    pub pose: u8,
}

impl FaceAnnotation {
    pub fn to_ground_truth(&self) -> GroundTruth {
        // (x, y, w, h) are integers with w, h >= 0, so the box is always valid
        let bbox = BBox::from_xywh(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
            .expect("non-negative integer extents");
        GroundTruth {
            bbox,
            invalid: self.invalid != 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub faces: Vec<FaceAnnotation>,
}

impl AnnotationRecord {
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.faces.iter().map(FaceAnnotation::to_ground_truth).collect()
    }
}

/// One detection row in `x y w h score` form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawDetection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl RawDetection {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            x: d.bbox.x1(),
            y: d.bbox.y1(),
            w: d.bbox.width(),
            h: d.bbox.height(),
            score: d.score(),
        }
    }

    pub fn to_detection(&self) -> Result<Detection, CoreError> {
        Detection::new(BBox::from_xywh(self.x, self.y, self.w, self.h)?, self.score)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_name: String,
    pub detections: Vec<RawDetection>,
}

impl DetectionRecord {
    pub fn from_detections(image_name: impl Into<String>, dets: &[Detection]) -> Self {
        Self {
            image_name: image_name.into(),
            detections: dets.iter().map(RawDetection::from_detection).collect(),
        }
    }
}

/// Parsed detection file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFile {
    pub records: Vec<DetectionRecord>,
    /// Line number of each record's image name line.
    pub record_lines: Vec<usize>,
    /// Rows skipped because their width or height was not positive.
    pub dropped: usize,
}

impl DetectionFile {
    /// Converts every row to a [`Detection`], reporting the line of the first
    /// row that violates the box or score invariants.
    pub fn to_detections(&self) -> Result<Vec<(String, Vec<Detection>)>, ParseError> {
        self.records
            .iter()
            .zip(&self.record_lines)
            .map(|(rec, &line)| {
                let dets = rec
                    .detections
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        r.to_detection().map_err(|e| {
                            ParseError::new(line, format!("image '{}', detection {}: {e}", rec.image_name, i + 1))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((rec.image_name.clone(), dets))
            })
            .collect()
    }
}

/// Line reader that tracks positions and strips `\r\n` endings.
struct Lines<R> {
    inner: R,
    line: usize,
    peeked: Option<Option<String>>,
}

impl<R: BufRead> Lines<R> {
    fn new(inner: R) -> Self {
        Self {
            inner,
            line: 0,
            peeked: None,
        }
    }

    fn read_raw(&mut self) -> Result<Option<String>, ParseError> {
        let mut buf = Vec::new();
        let n = self
            .inner
            .read_until(b'\n', &mut buf)
            .map_err(|e| ParseError::new(self.line + 1, format!("read failed: {e}")))?;
        if n == 0 {
            return Ok(None);
        }
        let text = String::from_utf8(buf).map_err(|_| ParseError::new(self.line + 1, "invalid UTF-8"))?;
        let trimmed = text.strip_suffix('\n').unwrap_or(&text);
        let trimmed = trimmed.strip_suffix('\r').unwrap_or(trimmed);
        Ok(Some(trimmed.to_string()))
    }

    fn peek(&mut self) -> Result<Option<&str>, ParseError> {
        if self.peeked.is_none() {
            let next = self.read_raw()?;
            self.peeked = Some(next);
        }
        Ok(self.peeked.as_ref().and_then(|o| o.as_deref()))
    }

    fn next_line(&mut self) -> Result<Option<String>, ParseError> {
        let next = match self.peeked.take() {
            Some(p) => p,
            None => self.read_raw()?,
        };
        if next.is_some() {
            self.line += 1;
        }
        Ok(next)
    }

    /// Next line that is not blank, or `None` at end of input.
    fn next_nonblank(&mut self) -> Result<Option<String>, ParseError> {
        while let Some(l) = self.next_line()? {
            if !l.trim().is_empty() {
                return Ok(Some(l));
            }
        }
        Ok(None)
    }

    fn expect(&mut self, what: impl fmt::Display) -> Result<String, ParseError> {
        self.next_line()?
            .ok_or_else(|| ParseError::new(self.line + 1, format!("unexpected end of file, expected {what}")))
    }
}

fn parse_count(text: &str, line: usize, image: &str) -> Result<usize, ParseError> {
    text.trim()
        .parse::<usize>()
        .map_err(|_| ParseError::new(line, format!("image '{image}': malformed count '{}'", text.trim())))
}

fn split_fields<'a>(text: &'a str, expected: usize, line: usize, image: &str) -> Result<Vec<&'a str>, ParseError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != expected {
        return Err(ParseError::new(
            line,
            format!("image '{image}': expected {expected} fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

fn parse_int(field: &str, line: usize, image: &str) -> Result<i64, ParseError> {
    field
        .parse::<i64>()
        .map_err(|_| ParseError::new(line, format!("image '{image}': non-integer field '{field}'")))
}

fn parse_attr(field: &str, line: usize, image: &str) -> Result<u8, ParseError> {
    field
        .parse::<u8>()
        .map_err(|_| ParseError::new(line, format!("image '{image}': attribute '{field}' is not a small non-negative integer")))
}

fn parse_real(field: &str, line: usize, image: &str) -> Result<f64, ParseError> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ParseError::new(line, format!("image '{image}': non-numeric field '{field}'"))),
    }
}

fn is_padding_line(text: &str) -> bool {
    let fields: Vec<&str> = text.split_whitespace().collect();
    fields.len() == 10 && fields.iter().all(|f| f.parse::<i64>() == Ok(0))
}

pub fn read_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>, ParseError> {
    let mut lines = Lines::new(reader);
    let mut records = Vec::new();
    while let Some(path) = lines.next_nonblank()? {
        let image_path = path.trim().to_string();
        let count_text = lines.expect(format_args!("face count for '{image_path}'"))?;
        let count = parse_count(&count_text, lines.line, &image_path)?;
        let mut faces = Vec::with_capacity(count.min(1 << 16));
        for k in 0..count {
            let text = lines
                .next_line()?
                .ok_or_else(|| truncated(lines.line + 1, &image_path, count, k))?;
            let f = split_fields(&text, 10, lines.line, &image_path)?;
            let line = lines.line;
            let face = FaceAnnotation {
                x: parse_int(f[0], line, &image_path)?,
                y: parse_int(f[1], line, &image_path)?,
                w: parse_int(f[2], line, &image_path)?,
                h: parse_int(f[3], line, &image_path)?,
                blur: parse_attr(f[4], line, &image_path)?,
                expression: parse_attr(f[5], line, &image_path)?,
                illumination: parse_attr(f[6], line, &image_path)?,
                invalid: parse_attr(f[7], line, &image_path)?,
                occlusion: parse_attr(f[8], line, &image_path)?,
                pose: parse_attr(f[9], line, &image_path)?,
            };
            if face.w < 0 || face.h < 0 {
                return Err(ParseError::new(line, format!("image '{image_path}': negative face size")));
            }
            faces.push(face);
        }
        if count == 0 && lines.peek()?.is_some_and(is_padding_line) {
            lines.next_line()?;
        }
        records.push(AnnotationRecord { image_path, faces });
    }
    Ok(records)
}

fn truncated(line: usize, image: &str, count: usize, found: usize) -> ParseError {
    ParseError::new(
        line,
        format!("image '{image}': file truncated, expected {count} entries but found {found}"),
    )
}

/// Writes ground truth in the official layout, including the padding line
/// after zero-face entries.
pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.image_path);
        let _ = writeln!(out, "{}", r.faces.len());
        for f in &r.faces {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {} {}",
                f.x, f.y, f.w, f.h, f.blur, f.expression, f.illumination, f.invalid, f.occlusion, f.pose
            );
        }
        if r.faces.is_empty() {
            out.push_str("0 0 0 0 0 0 0 0 0 0\n");
        }
    }
    out
}

pub fn read_detections<R: BufRead>(reader: R) -> Result<DetectionFile, ParseError> {
    let mut lines = Lines::new(reader);
    let mut file = DetectionFile::default();
    while let Some(name) = lines.next_nonblank()? {
        let image_name = name.trim().to_string();
        let name_line = lines.line;
        let count_text = lines.expect(format_args!("detection count for '{image_name}'"))?;
        let count = parse_count(&count_text, lines.line, &image_name)?;
        let mut detections = Vec::with_capacity(count.min(1 << 16));
        for k in 0..count {
            let text = lines
                .next_line()?
                .ok_or_else(|| truncated(lines.line + 1, &image_name, count, k))?;
            let f = split_fields(&text, 5, lines.line, &image_name)?;
            let line = lines.line;
            let d = RawDetection {
                x: parse_real(f[0], line, &image_name)?,
                y: parse_real(f[1], line, &image_name)?,
                w: parse_real(f[2], line, &image_name)?,
                h: parse_real(f[3], line, &image_name)?,
                score: parse_real(f[4], line, &image_name)?,
            };
            if d.w <= 0.0 || d.h <= 0.0 {
                log::warn!("line {line}: dropping detection with non-positive size in '{image_name}'");
                file.dropped += 1;
                continue;
            }
            detections.push(d);
        }
        file.records.push(DetectionRecord {
            image_name,
            detections,
        });
        file.record_lines.push(name_line);
    }
    Ok(file)
}

/// Writes detections in submission layout; scores carry six decimals and
/// coordinates use the shortest exact representation.
pub fn write_detections(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.image_name);
        let _ = writeln!(out, "{}", r.detections.len());
        for d in &r.detections {
            let _ = writeln!(out, "{} {} {} {} {:.6}", d.x, d.y, d.w, d.h, d.score);
        }
    }
    out
}

/// Image names in first-seen order with duplicates removed.
pub fn read_subset_list<R: BufRead>(reader: R) -> Result<Vec<String>, ParseError> {
    let mut lines = Lines::new(reader);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    while let Some(l) = lines.next_nonblank()? {
        let name = l.trim().to_string();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    Ok(out)
}

/// Key used to join annotation paths, detection names and subset entries:
/// the file name without directories or extension.
pub fn image_key(name: &str) -> String {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    match base.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() && !ext.contains(' ') => stem.to_string(),
        _ => base.to_string(),
    }
}
