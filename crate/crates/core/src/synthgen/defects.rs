//! Defect renderers. Each defect is drawn as ordered phases of horizontal
//! pixel runs; the annotation box is the exact hull of the pixels whose value
//! changed, so boxes are tight by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Family, PatternLayout, SynthError};
use crate::geometry::{Annotation, BBox};
use crate::image::GrayImage;

const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy)]
struct Run {
    y: usize,
    x: usize,
    w: usize,
}

#[derive(Debug, Clone, Copy)]
enum Fill {
    Level(u8),
    /// v' = v + alpha * (toward - v), rounded.
    Blend { alpha: f32, toward: u8 },
}

impl Fill {
    fn apply(&self, old: u8) -> u8 {
        match *self {
            Fill::Level(v) => v,
            Fill::Blend { alpha, toward } => {
                let v = old as f32 + alpha * (toward as f32 - old as f32);
                v.round().clamp(0.0, 255.0) as u8
            }
        }
    }
}

/// One defect drawing: phases applied in order, later phases overdraw.
struct Plan {
    phases: Vec<(Vec<Run>, Fill)>,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Line segment removed down to space level.
    Gap,
    /// Line segment faded partway toward space level.
    PartialGap,
    /// 1-2 px filament across one space.
    ThinBridge,
    /// Chunky connector across one space, overhanging both lines.
    ChunkyBridge,
    /// Slanted band crossing two or more spaces.
    MultiSlanted,
    /// Horizontal band crossing two or more spaces.
    MultiHorizontal,
    /// Line segment toppled sideways toward its neighbor.
    Collapse,
}

fn kind_of(family: Family, class: usize) -> Option<Kind> {
    match (family, class) {
        (Family::Adi, 0) => Some(Kind::Gap),
        (Family::Adi, 1) => Some(Kind::PartialGap),
        (Family::Adi, 2) => Some(Kind::ThinBridge),
        (Family::Adi, 3) => Some(Kind::ChunkyBridge),
        (Family::Adi, 4) => Some(Kind::Collapse),
        (Family::Aei, 0) => Some(Kind::ThinBridge),
        (Family::Aei, 1) => Some(Kind::ChunkyBridge),
        (Family::Aei, 2) => Some(Kind::MultiSlanted),
        (Family::Aei, 3) => Some(Kind::MultiHorizontal),
        (Family::Aei, 4) => Some(Kind::Collapse),
        _ => None,
    }
}

/// Deposited material reads slightly off the line level so defect pixels stay
/// distinguishable from the pattern they touch.
fn material_level(layout: &PatternLayout, delta: u8) -> u8 {
    if layout.line_level >= layout.space_level {
        layout.line_level.saturating_add(delta)
    } else {
        layout.line_level.saturating_sub(delta)
    }
}

fn ceil_f(v: f32) -> usize {
    v.ceil() as usize
}

/// Inject one defect of `class`, keeping `min_separation` px of clearance to
/// every box in `occupied`. Placement is retried with fresh geometry until a
/// clear site is found; a too-dense image yields `PlacementFailure`.
pub fn inject_defect(
    img: &mut GrayImage,
    layout: &PatternLayout,
    family: Family,
    class: usize,
    occupied: &[BBox],
    min_separation: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Annotation, SynthError> {
    let kind = kind_of(family, class).ok_or_else(|| {
        SynthError::InvalidConfig(format!(
            "class {class} out of range for family {}",
            family.as_str()
        ))
    })?;
    for _ in 0..MAX_ATTEMPTS {
        let Some(plan) = sample_plan(kind, layout, rng) else {
            continue;
        };
        let Some(hull) = plan_hull(&plan, layout) else {
            continue;
        };
        let clear = occupied
            .iter()
            .all(|b| !b.inflate(min_separation).intersects(&hull));
        if !clear {
            continue;
        }
        if let Some(bbox) = draw_plan(img, &plan) {
            return Ok(Annotation {
                class_id: class,
                bbox,
            });
        }
    }
    Err(SynthError::PlacementFailure {
        class,
        attempts: MAX_ATTEMPTS,
    })
}

/// Hull of every intended run, or None if any run leaves the image.
fn plan_hull(plan: &Plan, layout: &PatternLayout) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for (runs, _) in &plan.phases {
        for r in runs {
            if r.w == 0 || r.x + r.w > layout.width || r.y >= layout.height {
                return None;
            }
            x0 = x0.min(r.x);
            y0 = y0.min(r.y);
            x1 = x1.max(r.x + r.w);
            y1 = y1.max(r.y + 1);
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    Some(BBox::new(
        x0 as f32,
        y0 as f32,
        (x1 - x0) as f32,
        (y1 - y0) as f32,
    ))
}

/// Apply the plan, returning the exact hull of pixels that changed relative
/// to the image before the first phase.
fn draw_plan(img: &mut GrayImage, plan: &Plan) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let before = img.clone();
    for (runs, fill) in &plan.phases {
        for r in runs {
            for x in r.x..r.x + r.w {
                img.set(x, r.y, fill.apply(img.get(x, r.y)));
            }
        }
    }
    for (runs, _) in &plan.phases {
        for r in runs {
            for x in r.x..r.x + r.w {
                if img.get(x, r.y) != before.get(x, r.y) {
                    x0 = x0.min(x);
                    y0 = y0.min(r.y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(r.y + 1);
                }
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    Some(BBox::new(
        x0 as f32,
        y0 as f32,
        (x1 - x0) as f32,
        (y1 - y0) as f32,
    ))
}

fn rect(x: usize, y: usize, w: usize, h: usize) -> Vec<Run> {
    (y..y + h).map(|yy| Run { y: yy, x, w }).collect()
}

fn single(runs: Vec<Run>, fill: Fill) -> Option<Plan> {
    Some(Plan {
        phases: vec![(runs, fill)],
    })
}

fn sample_plan(kind: Kind, layout: &PatternLayout, rng: &mut ChaCha8Rng) -> Option<Plan> {
    let p = layout.pitch;
    let lw = layout.line_width;
    let ht = layout.height;
    let lines = layout.num_full_lines();
    if lines == 0 {
        return None;
    }
    match kind {
        Kind::Gap | Kind::PartialGap => {
            let k = rng.gen_range(0..lines);
            let (lo, hi) = if matches!(kind, Kind::Gap) {
                (ceil_f(0.75 * p as f32).max(3), 2 * p)
            } else {
                (ceil_f(0.5 * p as f32).max(3), ceil_f(1.25 * p as f32))
            };
            let hi = hi.max(lo).min(ht);
            if lo > hi {
                return None;
            }
            let len = rng.gen_range(lo..=hi);
            let y0 = rng.gen_range(0..=ht - len);
            let fill = if matches!(kind, Kind::Gap) {
                Fill::Level(layout.space_level)
            } else {
                Fill::Blend {
                    alpha: rng.gen_range(0.45..0.7),
                    toward: layout.space_level,
                }
            };
            single(rect(layout.line_x(k), y0, lw, len), fill)
        }
        Kind::ThinBridge => {
            if lines < 2 {
                return None;
            }
            let k = rng.gen_range(0..lines - 1);
            let t = rng.gen_range(1..=2usize).min(ht);
            let y0 = rng.gen_range(0..=ht - t);
            let x = layout.line_x(k) + lw;
            single(
                rect(x, y0, p - lw, t),
                Fill::Level(material_level(layout, 22)),
            )
        }
        Kind::ChunkyBridge => {
            if lines < 2 {
                return None;
            }
            let k = rng.gen_range(0..lines - 1);
            let lo = ceil_f(0.8 * lw as f32).max(2);
            let hi = ceil_f(1.5 * lw as f32).max(lo).min(ht);
            if lo > hi {
                return None;
            }
            let t = rng.gen_range(lo..=hi);
            let y0 = rng.gen_range(0..=ht - t);
            let x = layout.line_x(k) + lw - 1;
            single(
                rect(x, y0, p - lw + 2, t),
                Fill::Level(material_level(layout, 22)),
            )
        }
        Kind::MultiHorizontal => {
            if lines < 3 {
                return None;
            }
            let max_span = 3.min(lines - 1);
            let span = rng.gen_range(2..=max_span);
            let k = rng.gen_range(0..lines - span);
            let lo = ceil_f(0.8 * lw as f32).max(2);
            let hi = ceil_f(1.4 * lw as f32).max(lo).min(ht);
            if lo > hi {
                return None;
            }
            let t = rng.gen_range(lo..=hi);
            let y0 = rng.gen_range(0..=ht - t);
            single(
                rect(layout.line_x(k), y0, span * p + lw, t),
                Fill::Level(material_level(layout, 22)),
            )
        }
        Kind::MultiSlanted => {
            if lines < 3 {
                return None;
            }
            let max_span = 3.min(lines - 1);
            let span = rng.gen_range(2..=max_span);
            let k = rng.gen_range(0..lines - span);
            let lo = ceil_f(1.2 * p as f32);
            let hi = ceil_f(2.2 * p as f32).max(lo).min(ht);
            if lo > hi {
                return None;
            }
            let hgt = rng.gen_range(lo..=hi);
            let y0 = rng.gen_range(0..=ht - hgt);
            let downhill_right: bool = rng.gen();
            let cx_a = (layout.line_x(k) + lw / 2) as f32;
            let cx_b = (layout.line_x(k + span) + lw / 2) as f32;
            let (cx_top, cx_bot) = if downhill_right { (cx_a, cx_b) } else { (cx_b, cx_a) };
            let mut runs = Vec::with_capacity(hgt);
            for i in 0..hgt {
                let frac = i as f32 / (hgt - 1).max(1) as f32;
                let cx = cx_top + frac * (cx_bot - cx_top);
                let x = (cx - lw as f32 / 2.0).round();
                if x < 0.0 {
                    return None;
                }
                runs.push(Run {
                    y: y0 + i,
                    x: x as usize,
                    w: lw,
                });
            }
            single(runs, Fill::Level(material_level(layout, 22)))
        }
        Kind::Collapse => {
            if lines < 2 {
                return None;
            }
            let k = rng.gen_range(0..lines);
            let to_right = if k == 0 {
                true
            } else if k == lines - 1 {
                false
            } else {
                rng.gen()
            };
            let lo = ceil_f(1.5 * p as f32);
            let hi = (3 * p).max(lo).min(ht);
            if lo > hi {
                return None;
            }
            let len = rng.gen_range(lo..=hi);
            let y0 = rng.gen_range(0..=ht - len);
            let max_shift = rng.gen_range(ceil_f(0.6 * p as f32)..=p);
            let x_line = layout.line_x(k);
            if !to_right && x_line < max_shift {
                return None;
            }
            let erase = rect(x_line, y0, lw, len);
            let mut toppled = rect(x_line, y0, lw, len);
            for (i, run) in toppled.iter_mut().enumerate() {
                let shift = ((i + 1) as f32 / len as f32 * max_shift as f32).round() as usize;
                run.x = if to_right { x_line + shift } else { x_line - shift };
            }
            Some(Plan {
                phases: vec![
                    (erase, Fill::Level(layout.space_level)),
                    (toppled, Fill::Level(material_level(layout, 12))),
                ],
            })
        }
    }
}
