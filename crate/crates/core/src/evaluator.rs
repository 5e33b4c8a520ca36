//! Detection quality metrics: IoU, greedy score-ordered matching, 101-point
//! interpolated average precision, and dataset-level reports over an IoU
//! threshold grid. All metric math runs in f64.

use serde::{Deserialize, Serialize};

use crate::geometry::{Annotation, BBox, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// IoU thresholds, typically 0.50 to 0.95 in 0.05 steps.
    pub iou_thresholds: Vec<f64>,
    /// Detections below this score are discarded before matching.
    pub confidence_threshold: f32,
    pub num_classes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: iou_grid(),
            confidence_threshold: 0.33,
            num_classes: 5,
        }
    }
}

/// The standard 0.50:0.05:0.95 grid.
pub fn iou_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Intersection over union of two boxes, 0 for degenerate inputs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return 0.0;
    }
    let (ax0, ay0, ax1, ay1) = (a.x as f64, a.y as f64, a.x_max() as f64, a.y_max() as f64);
    let (bx0, by0, bx1, by1) = (b.x as f64, b.y as f64, b.x_max() as f64, b.y_max() as f64);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    inter / (area_a + area_b - inter)
}

/// Greedy one-image matching. `assignments[i]` is the ground-truth index the
/// i-th detection claimed, in the detections' original order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub assignments: Vec<Option<usize>>,
    pub matched_gts: Vec<bool>,
}

/// Match detections to ground truth of the same class: detections are taken
/// in score order (ties by input index), each claiming the unmatched box with
/// the highest IoU at or above `iou_threshold` (IoU ties: lower index wins).
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[Annotation],
    iou_threshold: f64,
) -> Matching {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then_with(|| a.cmp(&b))
    });
    let mut assignments = vec![None; detections.len()];
    let mut matched_gts = vec![false; ground_truth.len()];
    for det_idx in order {
        let det = &detections[det_idx];
        let mut best: Option<(f64, usize)> = None;
        for (gt_idx, gt) in ground_truth.iter().enumerate() {
            if matched_gts[gt_idx] || gt.class_id != det.class_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v < iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((bv, _)) => v > bv,
            };
            if better {
                best = Some((v, gt_idx));
            }
        }
        if let Some((_, gt_idx)) = best {
            assignments[det_idx] = Some(gt_idx);
            matched_gts[gt_idx] = true;
        }
    }
    Matching {
        assignments,
        matched_gts,
    }
}

/// 101-point interpolated AP over an already-ranked hit list.
pub fn average_precision(ranked_hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let n = ranked_hits.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, hit) in ranked_hits.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Max precision over suffixes, so each recall level reads the best
    // precision achievable at or beyond it.
    let mut max_from = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        max_from[i] = max_from[i].max(max_from[i + 1]);
    }
    let mut acc = 0.0;
    let mut idx = 0usize;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while idx < n && recall[idx] + 1e-12 < level {
            idx += 1;
        }
        if idx < n {
            acc += max_from[idx];
        }
    }
    acc / 101.0
}

/// Per-class detection/ground-truth tallies at one IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub confidence_threshold: f32,
    /// `per_class_ap[t][c]` = AP of class c at thresholds[t]; 0 for classes
    /// without ground truth (see `class_has_gt`).
    pub per_class_ap: Vec<Vec<f64>>,
    /// False entries mark classes with no ground truth anywhere: their AP is
    /// reported as 0 and excluded from every mean.
    pub class_has_gt: Vec<bool>,
    /// Mean AP over classes with ground truth, one entry per threshold.
    pub map_per_threshold: Vec<f64>,
    pub map_50: f64,
    pub map_50_95: f64,
    /// Counts at the first threshold, per class.
    pub counts: Vec<ClassCounts>,
}

impl EvalReport {
    /// Render per-class AP percentages as CSV: one row per class, one column
    /// per threshold, plus mean and count columns.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,has_gt");
        for t in &self.iou_thresholds {
            out.push_str(&format!(",ap@{t:.2}"));
        }
        out.push_str(",ap@0.50:0.95,tp,fp,fn\n");
        let n_thr = self.iou_thresholds.len();
        for (c, name) in class_names.iter().enumerate() {
            out.push_str(name);
            out.push_str(if self.class_has_gt[c] { ",yes" } else { ",no" });
            let mut mean = 0.0;
            for t in 0..n_thr {
                out.push_str(&format!(",{:.4}", self.per_class_ap[t][c]));
                mean += self.per_class_ap[t][c];
            }
            out.push_str(&format!(
                ",{:.4},{},{},{}\n",
                mean / n_thr as f64,
                self.counts[c].tp,
                self.counts[c].fp,
                self.counts[c].fn_
            ));
        }
        out.push_str(&format!(
            "mean,,{},{:.4},,,\n",
            self.map_per_threshold
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(","),
            self.map_50_95
        ));
        out
    }
}

/// Evaluate per-image detections against ground truth. Detections beneath
/// the confidence threshold are dropped first; ranking ties are broken by
/// image index then detection index so results are order-deterministic.
pub fn evaluate(per_image: &[(Vec<Detection>, Vec<Annotation>)], cfg: &EvalConfig) -> EvalReport {
    let classes = cfg.num_classes;
    let kept: Vec<Vec<&Detection>> = per_image
        .iter()
        .map(|(dets, _)| {
            dets.iter()
                .filter(|d| d.score >= cfg.confidence_threshold)
                .collect()
        })
        .collect();
    let gt_count: Vec<usize> = (0..classes)
        .map(|c| {
            per_image
                .iter()
                .map(|(_, gts)| gts.iter().filter(|g| g.class_id == c).count())
                .sum()
        })
        .collect();
    let class_has_gt: Vec<bool> = gt_count.iter().map(|n| *n > 0).collect();

    let mut per_class_ap = Vec::with_capacity(cfg.iou_thresholds.len());
    let mut counts = vec![
        ClassCounts {
            tp: 0,
            fp: 0,
            fn_: 0
        };
        classes
    ];
    for (t_idx, &thr) in cfg.iou_thresholds.iter().enumerate() {
        let mut ap_row = Vec::with_capacity(classes);
        for c in 0..classes {
            // Rank class-c detections globally: score desc, image, index.
            let mut ranked: Vec<(f32, usize, usize, bool)> = Vec::new();
            for (img_idx, (_, gts)) in per_image.iter().enumerate() {
                let dets: Vec<Detection> = kept[img_idx]
                    .iter()
                    .filter(|d| d.class_id == c)
                    .map(|d| **d)
                    .collect();
                let gts_c: Vec<Annotation> = gts.iter().filter(|g| g.class_id == c).copied().collect();
                let matching = match_detections(&dets, &gts_c, thr);
                for (d_idx, (det, assn)) in dets.iter().zip(&matching.assignments).enumerate() {
                    ranked.push((det.score, img_idx, d_idx, assn.is_some()));
                }
            }
            ranked.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| a.1.cmp(&b.1))
                    .then_with(|| a.2.cmp(&b.2))
            });
            let hits: Vec<bool> = ranked.iter().map(|r| r.3).collect();
            ap_row.push(if class_has_gt[c] {
                average_precision(&hits, gt_count[c])
            } else {
                0.0
            });
            if t_idx == 0 {
                let tp = hits.iter().filter(|h| **h).count();
                counts[c] = ClassCounts {
                    tp,
                    fp: hits.len() - tp,
                    fn_: gt_count[c] - tp,
                };
            }
        }
        per_class_ap.push(ap_row);
    }
    let map_per_threshold: Vec<f64> = per_class_ap
        .iter()
        .map(|row| {
            let included: Vec<f64> = row
                .iter()
                .zip(&class_has_gt)
                .filter(|(_, has)| **has)
                .map(|(v, _)| *v)
                .collect();
            if included.is_empty() {
                0.0
            } else {
                included.iter().sum::<f64>() / included.len() as f64
            }
        })
        .collect();
    let map_50 = map_per_threshold.first().copied().unwrap_or(0.0);
    let map_50_95 = if map_per_threshold.is_empty() {
        0.0
    } else {
        map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64
    };
    EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        confidence_threshold: cfg.confidence_threshold,
        per_class_ap,
        class_has_gt,
        map_per_threshold,
        map_50,
        map_50_95,
        counts,
    }
}
