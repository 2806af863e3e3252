//! Region-proposal anchors on a single stride-16 feature map.

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DEFAULT_STRIDE: u32 = 16;
/// Anchor side lengths; the anchor areas are the squares of these.
pub const DEFAULT_SCALES: [f64; 6] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
/// Height / width aspect ratios.
pub const DEFAULT_RATIOS: [f64; 3] = [1.0, 1.5, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub stride: u32,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            scales: DEFAULT_SCALES.to_vec(),
            ratios: DEFAULT_RATIOS.to_vec(),
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidConfig("anchor stride must be at least 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::EmptyInput("anchor scale list"));
        }
        if self.ratios.is_empty() {
            return Err(Error::EmptyInput("anchor ratio list"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("anchor scales must be positive".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "anchor scales must be strictly increasing".into(),
            ));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidConfig("anchor ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors of the cell at the origin, centered on `(stride/2, stride/2)`.
///
/// Scales vary in the outer loop and ratios in the inner one. For side `s`
/// and ratio `r` the anchor is `s / sqrt(r)` wide and `s * sqrt(r)` tall,
/// so its area is `s^2` and its height/width ratio is `r`.
pub fn base_anchors(config: &AnchorConfig) -> Result<Vec<BBox>> {
    config.validate()?;
    let c = f64::from(config.stride) / 2.0;
    let mut out = Vec::with_capacity(config.anchors_per_cell());
    for &s in &config.scales {
        for &r in &config.ratios {
            let root = r.sqrt();
            out.push(BBox::from_center(c, c, s / root, s * root)?);
        }
    }
    Ok(out)
}

/// Dense anchor lattice over a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub config: AnchorConfig,
    pub feat_width: u32,
    pub feat_height: u32,
    /// Row-major by cell, then base-anchor order within a cell.
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index of the anchor for `(row, col, base)`.
    pub fn index(&self, row: u32, col: u32, base: usize) -> usize {
        let per_cell = self.config.anchors_per_cell();
        (row as usize * self.feat_width as usize + col as usize) * per_cell + base
    }
}

/// Translates the base anchors to every cell of a `feat_width x feat_height` map.
/// Anchors are not clipped to any image.
pub fn grid_anchors(config: &AnchorConfig, feat_width: u32, feat_height: u32) -> Result<AnchorGrid> {
    if feat_width == 0 || feat_height == 0 {
        return Err(Error::InvalidConfig(format!(
            "feature map must be at least 1x1, got {feat_width}x{feat_height}"
        )));
    }
    let base = base_anchors(config)?;
    let stride = f64::from(config.stride);
    let mut anchors =
        Vec::with_capacity(feat_width as usize * feat_height as usize * base.len());
    for row in 0..feat_height {
        let dy = f64::from(row) * stride;
        for col in 0..feat_width {
            let dx = f64::from(col) * stride;
            anchors.extend(base.iter().map(|a| a.translate(dx, dy)));
        }
    }
    Ok(AnchorGrid {
        config: config.clone(),
        feat_width,
        feat_height,
        anchors,
    })
}
