//! Box-to-map target encoding and peak-based decoding.
//!
//! Ground truth becomes three stride-R maps: per-class center heatmaps with
//! Gaussian splats (1.0 at the exact center cell), sub-cell center offsets,
//! and box sizes in pixels. Decoding recovers boxes from local heatmap maxima
//! without any NMS; candidate count is bounded by `top_k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Annotation, BBox, Detection};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("class {class} out of range (num_classes={classes})")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("map shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Encode/decode parameters. `stride` is the pixels-per-cell ratio of the
/// output maps; `min_iou` drives the Gaussian splat radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub stride: usize,
    pub num_classes: usize,
    pub min_iou: f64,
    pub top_k: usize,
    pub peak_threshold: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            num_classes: 5,
            min_iou: 0.7,
            top_k: 100,
            peak_threshold: 0.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self, image_size: usize) -> Result<(), CodecError> {
        let err = |m: String| Err(CodecError::InvalidConfig(m));
        if self.stride == 0 || image_size == 0 || image_size % self.stride != 0 {
            return err(format!(
                "stride {} must be positive and divide image size {image_size}",
                self.stride
            ));
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        if !(self.min_iou > 0.0 && self.min_iou < 1.0) {
            return err(format!("min_iou {} must lie in (0,1)", self.min_iou));
        }
        if self.top_k == 0 {
            return err("top_k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.peak_threshold) {
            return err(format!("peak_threshold {} must lie in [0,1]", self.peak_threshold));
        }
        Ok(())
    }
}

/// Dense stride-R ground-truth maps for one image.
///
/// Layouts are channel-major: `heatmap[c][y][x]`, `offset[0]=x, offset[1]=y`,
/// `size[0]=w, size[1]=h`. Offsets and sizes are defined only where
/// `center_mask` is set. Two boxes landing in the same cell keep both heatmap
/// peaks (max-combined) but only the later box's offset/size: the encoding is
/// lossy there by design.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTarget {
    pub classes: usize,
    pub side: usize,
    pub heatmap: Vec<f32>,
    pub offset: Vec<f32>,
    pub size: Vec<f32>,
    pub center_mask: Vec<bool>,
}

impl EncodedTarget {
    pub fn num_centers(&self) -> usize {
        self.center_mask.iter().filter(|m| **m).count()
    }

    /// View as decodable maps (e.g. for encode/decode roundtrips).
    pub fn as_head_maps(&self) -> HeadMaps {
        HeadMaps {
            classes: self.classes,
            side: self.side,
            heatmap: self.heatmap.clone(),
            offset: self.offset.clone(),
            size: self.size.clone(),
        }
    }
}

/// Predicted (or ground-truth) maps in decode layout; same channel order as
/// [`EncodedTarget`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub classes: usize,
    pub side: usize,
    pub heatmap: Vec<f32>,
    pub offset: Vec<f32>,
    pub size: Vec<f32>,
}

impl HeadMaps {
    pub fn new(
        classes: usize,
        side: usize,
        heatmap: Vec<f32>,
        offset: Vec<f32>,
        size: Vec<f32>,
    ) -> Result<Self, CodecError> {
        let cells = side * side;
        if heatmap.len() != classes * cells {
            return Err(CodecError::ShapeMismatch(format!(
                "heatmap len {} != {classes}x{side}x{side}",
                heatmap.len()
            )));
        }
        if offset.len() != 2 * cells || size.len() != 2 * cells {
            return Err(CodecError::ShapeMismatch(format!(
                "offset/size lens {}/{} != 2x{side}x{side}",
                offset.len(),
                size.len()
            )));
        }
        Ok(Self {
            classes,
            side,
            heatmap,
            offset,
            size,
        })
    }
}

/// Largest cell radius such that shifting a box of `box_w x box_h` pixels by
/// up to that many cells in any direction keeps IoU with the unshifted box at
/// or above `min_iou`. Degenerate boxes give 0.
pub fn gaussian_radius(box_w: f32, box_h: f32, stride: usize, min_iou: f64) -> usize {
    let wc = box_w as f64 / stride as f64;
    let hc = box_h as f64 / stride as f64;
    if !(wc > 0.0 && hc > 0.0) || !wc.is_finite() || !hc.is_finite() {
        return 0;
    }
    let mut r = 0usize;
    loop {
        // Worst case inside Chebyshev radius r+1 is the corner displacement.
        let d = (r + 1) as f64;
        let iw = wc - d;
        let ih = hc - d;
        if iw <= 0.0 || ih <= 0.0 {
            return r;
        }
        let inter = iw * ih;
        let union = 2.0 * wc * hc - inter;
        if inter / union >= min_iou {
            r += 1;
        } else {
            return r;
        }
    }
}

/// Rasterize annotations into training targets for an `image_size`-pixel
/// square image.
pub fn encode_targets(
    annotations: &[Annotation],
    image_size: usize,
    cfg: &CodecConfig,
) -> Result<EncodedTarget, CodecError> {
    cfg.validate(image_size)?;
    let side = image_size / cfg.stride;
    let cells = side * side;
    let mut target = EncodedTarget {
        classes: cfg.num_classes,
        side,
        heatmap: vec![0.0; cfg.num_classes * cells],
        offset: vec![0.0; 2 * cells],
        size: vec![0.0; 2 * cells],
        center_mask: vec![false; cells],
    };
    let r_px = cfg.stride as f32;
    for ann in annotations {
        if ann.class_id >= cfg.num_classes {
            return Err(CodecError::ClassOutOfRange {
                class: ann.class_id,
                classes: cfg.num_classes,
            });
        }
        let (cx, cy) = ann.bbox.center();
        let fx = cx / r_px;
        let fy = cy / r_px;
        let cell_x = (fx.floor() as isize).clamp(0, side as isize - 1) as usize;
        let cell_y = (fy.floor() as isize).clamp(0, side as isize - 1) as usize;
        let radius = gaussian_radius(ann.bbox.w, ann.bbox.h, cfg.stride, cfg.min_iou);
        let sigma = ((2 * radius + 1) as f64 / 6.0).max(1.0 / 3.0);
        let window = radius.max(1) as isize;
        let chan = &mut target.heatmap[ann.class_id * cells..(ann.class_id + 1) * cells];
        for dy in -window..=window {
            for dx in -window..=window {
                let gx = cell_x as isize + dx;
                let gy = cell_y as isize + dy;
                if gx < 0 || gy < 0 || gx >= side as isize || gy >= side as isize {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                let slot = &mut chan[gy as usize * side + gx as usize];
                *slot = slot.max(v);
            }
        }
        let cell = cell_y * side + cell_x;
        target.offset[cell] = fx - cell_x as f32;
        target.offset[cells + cell] = fy - cell_y as f32;
        target.size[cell] = ann.bbox.w;
        target.size[cells + cell] = ann.bbox.h;
        target.center_mask[cell] = true;
    }
    Ok(target)
}

/// Candidate accounting from one decode pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeStats {
    /// Cells that are 8-neighborhood local maxima, before top-k.
    pub peaks_found: usize,
    /// Candidates surviving top-k truncation and the score threshold.
    pub kept: usize,
}

/// Decode boxes from head maps: 8-neighbor local maxima per class channel,
/// globally sorted by score (ties broken by channel, row, column), truncated
/// to `top_k`, thresholded, then mapped back to pixel space and clipped.
pub fn decode_detections(maps: &HeadMaps, cfg: &CodecConfig) -> Vec<Detection> {
    decode_with_stats(maps, cfg).0
}

pub fn decode_with_stats(maps: &HeadMaps, cfg: &CodecConfig) -> (Vec<Detection>, DecodeStats) {
    let side = maps.side;
    let cells = side * side;
    let mut peaks: Vec<(f32, usize, usize, usize)> = Vec::new();
    for c in 0..maps.classes {
        let chan = &maps.heatmap[c * cells..(c + 1) * cells];
        for y in 0..side {
            for x in 0..side {
                let v = chan[y * side + x];
                let mut is_peak = true;
                'nb: for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i32 + dx;
                        let ny = y as i32 + dy;
                        if nx < 0 || ny < 0 || nx >= side as i32 || ny >= side as i32 {
                            continue;
                        }
                        if chan[ny as usize * side + nx as usize] > v {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if is_peak {
                    peaks.push((v, c, y, x));
                }
            }
        }
    }
    let peaks_found = peaks.len();
    peaks.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
            .then_with(|| a.3.cmp(&b.3))
    });
    peaks.truncate(cfg.top_k);
    peaks.retain(|p| p.0 >= cfg.peak_threshold);
    let n_px = (side * cfg.stride) as f32;
    let dets: Vec<Detection> = peaks
        .iter()
        .map(|&(v, c, y, x)| {
            let cell = y * side + x;
            let cx = (x as f32 + maps.offset[cell]) * cfg.stride as f32;
            let cy = (y as f32 + maps.offset[cells + cell]) * cfg.stride as f32;
            let w = maps.size[cell];
            let h = maps.size[cells + cell];
            Detection {
                class_id: c,
                bbox: BBox::from_center(cx, cy, w, h).clip(n_px, n_px),
                score: v,
            }
        })
        .collect();
    let kept = dets.len();
    (dets, DecodeStats { peaks_found, kept })
}

/// Worst-case reconstruction errors over a set of annotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundtripReport {
    /// Max over annotations of the center coordinate error, px.
    pub max_center_err: f32,
    /// Max over annotations of the width/height error, px.
    pub max_size_err: f32,
    pub matched: usize,
    pub total: usize,
}

/// Encode then decode the annotations and report worst-case recovery error.
/// Uses threshold 0 and a top-k of at least the annotation count so nothing
/// is dropped; an unrecovered annotation reports infinite error.
pub fn roundtrip_check(
    annotations: &[Annotation],
    image_size: usize,
    cfg: &CodecConfig,
) -> Result<RoundtripReport, CodecError> {
    let target = encode_targets(annotations, image_size, cfg)?;
    let mut rt_cfg = cfg.clone();
    rt_cfg.top_k = rt_cfg.top_k.max(annotations.len()).max(1);
    rt_cfg.peak_threshold = 0.0;
    let dets = decode_detections(&target.as_head_maps(), &rt_cfg);
    let mut report = RoundtripReport {
        max_center_err: 0.0,
        max_size_err: 0.0,
        matched: 0,
        total: annotations.len(),
    };
    for ann in annotations {
        let (acx, acy) = ann.bbox.center();
        let best = dets
            .iter()
            .filter(|d| d.class_id == ann.class_id)
            .map(|d| {
                let (dcx, dcy) = d.bbox.center();
                let cerr = (dcx - acx).abs().max((dcy - acy).abs());
                let serr = (d.bbox.w - ann.bbox.w)
                    .abs()
                    .max((d.bbox.h - ann.bbox.h).abs());
                (cerr, serr)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.total_cmp(&b.1)));
        match best {
            Some((cerr, serr)) => {
                report.matched += 1;
                report.max_center_err = report.max_center_err.max(cerr);
                report.max_size_err = report.max_size_err.max(serr);
            }
            None => {
                report.max_center_err = f32::INFINITY;
                report.max_size_err = f32::INFINITY;
            }
        }
    }
    Ok(report)
}
