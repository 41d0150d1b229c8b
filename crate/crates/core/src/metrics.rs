//! Oriented-box IoU and one-pass-evaluation Success / Precision.

use crate::error::DataError;
use crate::scene::Box3D;

/// IoU thresholds `0, 0.05, …, 1`.
pub const SUCCESS_STEPS: usize = 20;
/// Center-distance thresholds `0, 0.1, …, 2` meters.
pub const PRECISION_STEPS: usize = 20;
pub const PRECISION_MAX_DISTANCE: f64 = 2.0;

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s.abs()
}

/// Sutherland–Hodgman clip of `subject` by a counter-clockwise convex `clip` polygon.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()))
}

fn canonical_key(b: &Box3D) -> [u64; 7] {
    [b.x, b.y, b.z, b.w, b.h, b.l, b.theta].map(f64::to_bits)
}

/// Volume IoU of two oriented boxes (yaw-only rotation).
///
/// The pair is put in a canonical order first, so `iou3d(a, b)` and
/// `iou3d(b, a)` run the identical computation.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a, b) = if canonical_key(a) <= canonical_key(b) { (a, b) } else { (b, a) };
    let dz = ((a.z + a.h / 2.0).min(b.z + b.h / 2.0) - (a.z - a.h / 2.0).max(b.z - b.h / 2.0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Per-frame overlap and center error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub iou: f64,
    pub center_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeReport {
    /// Area under the success curve, in `[0, 1]`.
    pub success: f64,
    /// Area under the precision curve, in `[0, 1]`.
    pub precision: f64,
    pub frames: Vec<FrameRecord>,
}

impl OpeReport {
    /// Pools per-frame records of several sequences into one report.
    pub fn pooled(reports: &[OpeReport]) -> OpeReport {
        let frames: Vec<FrameRecord> = reports.iter().flat_map(|r| r.frames.iter().copied()).collect();
        report_from_frames(frames)
    }
}

/// A frame counts at IoU threshold `t` iff `IoU ≥ t` and `IoU > 0`.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    (0..=SUCCESS_STEPS)
        .map(|i| {
            let t = i as f64 / SUCCESS_STEPS as f64;
            fraction(ious, |v| v > 0.0 && v >= t)
        })
        .collect()
}

/// A frame counts at distance threshold `d` iff `error ≤ d` and `error < 2 m`.
pub fn precision_curve(errors: &[f64]) -> Vec<f64> {
    (0..=PRECISION_STEPS)
        .map(|i| {
            let d = PRECISION_MAX_DISTANCE * i as f64 / PRECISION_STEPS as f64;
            fraction(errors, |e| e < PRECISION_MAX_DISTANCE && e <= d)
        })
        .collect()
}

fn fraction(values: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| keep(v)).count() as f64 / values.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn report_from_frames(frames: Vec<FrameRecord>) -> OpeReport {
    let ious: Vec<f64> = frames.iter().map(|f| f.iou).collect();
    let errs: Vec<f64> = frames.iter().map(|f| f.center_error).collect();
    OpeReport {
        success: mean(&success_curve(&ious)),
        precision: mean(&precision_curve(&errs)),
        frames,
    }
}

pub fn evaluate_ope(pred: &[Box3D], gt: &[Box3D]) -> Result<OpeReport, DataError> {
    if pred.len() != gt.len() {
        return Err(DataError::Invalid(format!(
            "{} predicted boxes for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let frames = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| FrameRecord {
            iou: iou3d(p, g),
            center_error: ((p.x - g.x).powi(2) + (p.y - g.y).powi(2) + (p.z - g.z).powi(2)).sqrt(),
        })
        .collect();
    Ok(report_from_frames(frames))
}
