//! Precision/recall, all-point average precision and mAP sweeps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

pub const TABLE_THRESHOLDS: [f64; 5] = [0.30, 0.35, 0.40, 0.45, 0.50];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub frame_id: u32,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame_id: u32,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
}

impl PrCurve {
    pub fn missed(&self) -> usize {
        self.num_gt - self.tp
    }

    /// 0 when there is no ground truth to recall.
    pub fn average_precision(&self) -> f64 {
        if self.num_gt == 0 {
            0.0
        } else {
            average_precision(&self.points)
        }
    }
}

/// Descending score; ties by frame id, then input position.
fn ranked<'a>(dets: impl Iterator<Item = &'a EvalDetection>) -> Vec<&'a EvalDetection> {
    let mut v: Vec<_> = dets.collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.frame_id.cmp(&b.frame_id)));
    v
}

/// Greedy matching of one class. A detection is a true positive when some
/// still-unmatched ground truth of its frame and class has IoU >= threshold;
/// it claims the highest-IoU such ground truth (lowest index on ties).
pub fn pr_curve(dets: &[EvalDetection], gts: &[GroundTruth], iou_threshold: f64) -> PrCurve {
    let mut by_frame: HashMap<(u32, usize), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry((g.frame_id, g.class_id)).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut curve = PrCurve { num_gt: gts.len(), ..PrCurve::default() };
    for d in ranked(dets.iter()) {
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_frame.get(&(d.frame_id, d.class_id)) {
            for &g in cands {
                if taken[g] {
                    continue;
                }
                let o = iou(&d.bbox, &gts[g].bbox);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                curve.tp += 1;
            }
            None => curve.fp += 1,
        }
        let recall = if gts.is_empty() { 0.0 } else { curve.tp as f64 / gts.len() as f64 };
        let precision = curve.tp as f64 / (curve.tp + curve.fp) as f64;
        curve.points.push(PrPoint { recall, precision });
    }
    curve
}

/// Area under the precision envelope, `sum (r_i - r_{i-1}) * max_{j>=i} p_j`.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (i, p) in points.iter().enumerate().rev() {
        best = best.max(p.precision);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    pub num_gt: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub map: f64,
    pub classes: Vec<ClassResult>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ThresholdResult>,
}

/// Classes present in either the detections or the ground truth.
fn class_set(dets: &[EvalDetection], gts: &[GroundTruth]) -> BTreeSet<usize> {
    dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).collect()
}

/// Per-class AP at every threshold. mAP is the mean over classes that occur
/// in the detections or the ground truth (0 when there are none).
pub fn map_sweep(
    dets: &[EvalDetection],
    gts: &[GroundTruth],
    thresholds: &[f64],
    class_name: impl Fn(usize) -> String,
) -> EvalReport {
    let classes = class_set(dets, gts);
    let mut report = EvalReport::default();
    for &t in thresholds {
        let mut results = Vec::new();
        for &c in &classes {
            let cd: Vec<EvalDetection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            let curve = pr_curve(&cd, &cg, t);
            results.push(ClassResult {
                class_id: c,
                name: class_name(c),
                ap: curve.average_precision(),
                tp: curve.tp,
                fp: curve.fp,
                missed: curve.missed(),
                num_gt: curve.num_gt,
                curve: curve.points,
            });
        }
        let map = if results.is_empty() {
            0.0
        } else {
            results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64
        };
        report.rows.push(ThresholdResult { iou_threshold: t, map, classes: results });
    }
    report
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.iou_threshold - threshold).abs() < 1e-9)
            .map(|r| r.map)
    }

    /// Aligned text table: one row per threshold, highest threshold first.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<&ThresholdResult> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.iou_threshold.total_cmp(&a.iou_threshold));
        let names: Vec<String> = rows
            .first()
            .map(|r| r.classes.iter().map(|c| c.name.clone()).collect())
            .unwrap_or_default();
        let mut out = String::new();
        let _ = write!(out, "{:<10} {:>8}", "metric", "mAP");
        for n in &names {
            let _ = write!(out, " {:>12}", n);
        }
        out.push('\n');
        for r in rows {
            let _ = write!(out, "{:<10} {:>7.2}%", format!("mAP@{:.2}", r.iou_threshold), 100.0 * r.map);
            for c in &r.classes {
                let _ = write!(out, " {:>11.2}%", 100.0 * c.ap);
            }
            out.push('\n');
        }
        out
    }

    /// One line per PR point: `iou_threshold,class,recall,precision`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iou_threshold,class,recall,precision\n");
        for r in &self.rows {
            for c in &r.classes {
                for p in &c.curve {
                    let _ = writeln!(out, "{},{},{},{}", r.iou_threshold, c.name, p.recall, p.precision);
                }
            }
        }
        out
    }
}

/// A ground-truth pedestrian with its action set (vocabulary indices).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionGroundTruth {
    pub frame_id: u32,
    pub bbox: BBox,
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionAp {
    pub action: String,
    pub ap: f64,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionReport {
    pub iou_threshold: f64,
    pub actions: Vec<ActionAp>,
    /// Actions without any ground truth; left out of the mean.
    pub excluded: Vec<String>,
    pub map: f64,
}

/// Per-action AP where `dets[i].class_id` is the vocabulary index of the
/// action being scored and a ground truth counts for every action it carries.
pub fn action_map(dets: &[EvalDetection], gts: &[ActionGroundTruth], vocab: &[String], iou_threshold: f64) -> ActionReport {
    let mut per_action: BTreeMap<usize, Vec<GroundTruth>> = BTreeMap::new();
    for g in gts {
        for &a in &g.actions {
            per_action.entry(a).or_default().push(GroundTruth { frame_id: g.frame_id, class_id: a, bbox: g.bbox });
        }
    }
    let mut actions = Vec::new();
    let mut excluded = Vec::new();
    for (a, word) in vocab.iter().enumerate() {
        let Some(ag) = per_action.get(&a) else {
            log::warn!("action {word:?} has no ground truth; excluded from the mean");
            excluded.push(word.clone());
            continue;
        };
        let ad: Vec<EvalDetection> = dets.iter().filter(|d| d.class_id == a).copied().collect();
        actions.push(ActionAp { action: word.clone(), ap: pr_curve(&ad, ag, iou_threshold).average_precision(), num_gt: ag.len() });
    }
    let map = if actions.is_empty() { 0.0 } else { actions.iter().map(|a| a.ap).sum::<f64>() / actions.len() as f64 };
    ActionReport { iou_threshold, actions, excluded, map }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: u32, b: [f64; 4], score: f64) -> EvalDetection {
        EvalDetection { frame_id: frame, class_id: 1, bbox: b.into(), score }
    }

    fn gt(frame: u32, b: [f64; 4]) -> GroundTruth {
        GroundTruth { frame_id: frame, class_id: 1, bbox: b.into() }
    }

    const G: [f64; 4] = [0.1, 0.1, 0.3, 0.3];
    const NEAR: [f64; 4] = [0.1, 0.1, 0.3, 0.28];
    const FAR: [f64; 4] = [0.6, 0.6, 0.8, 0.8];

    #[test]
    fn single_hit() {
        let c = pr_curve(&[det(0, NEAR, 0.5)], &[gt(0, G)], 0.5);
        assert_eq!(c.points, vec![PrPoint { recall: 1.0, precision: 1.0 }]);
        assert_eq!(c.average_precision(), 1.0);
    }

    #[test]
    fn order_of_hit_and_miss() {
        let c = pr_curve(&[det(0, NEAR, 0.9), det(0, FAR, 0.8)], &[gt(0, G)], 0.5);
        assert_eq!(c.average_precision(), 1.0);
        let c = pr_curve(&[det(0, FAR, 0.9), det(0, NEAR, 0.8)], &[gt(0, G)], 0.5);
        assert_eq!(c.average_precision(), 0.5);
    }

    #[test]
    fn envelope_area() {
        let pts = [PrPoint { recall: 0.5, precision: 1.0 }, PrPoint { recall: 1.0, precision: 0.5 }];
        assert_eq!(average_precision(&pts), 0.75);
        assert_eq!(average_precision(&[PrPoint { recall: 1.0, precision: 1.0 }]), 1.0);
        assert_eq!(average_precision(&[]), 0.0);
        let dup = [pts[0], pts[0], pts[1], pts[1]];
        assert_eq!(average_precision(&dup), 0.75);
    }

    #[test]
    fn no_ground_truth_means_zero() {
        let c = pr_curve(&[det(0, G, 0.9)], &[], 0.5);
        assert_eq!((c.fp, c.average_precision()), (1, 0.0));
        let r = map_sweep(&[], &[], &TABLE_THRESHOLDS, |c| c.to_string());
        assert!(r.rows.iter().all(|row| row.map == 0.0));
        let r = map_sweep(&[], &[gt(0, G)], &TABLE_THRESHOLDS, |c| c.to_string());
        assert!(r.rows.iter().all(|row| row.map == 0.0));
    }

    #[test]
    fn duplicates_after_first_are_false_positives() {
        let c = pr_curve(&[det(0, G, 0.9), det(0, G, 0.8)], &[gt(0, G)], 0.5);
        assert_eq!((c.tp, c.fp), (1, 1));
    }

    #[test]
    fn frames_do_not_mix() {
        let c = pr_curve(&[det(1, G, 0.9)], &[gt(0, G)], 0.5);
        assert_eq!(c.tp, 0);
    }

    #[test]
    fn table_and_csv_render() {
        let r = map_sweep(&[det(0, NEAR, 0.9)], &[gt(0, G)], &TABLE_THRESHOLDS, |_| "pedestrian".into());
        let t = r.to_table();
        assert!(t.lines().nth(1).unwrap().starts_with("mAP@0.50"));
        assert_eq!(t.lines().count(), 6);
        assert!(r.to_csv().lines().count() == 6);
        assert_eq!(r.map_at(0.3), Some(1.0));
    }

    #[test]
    fn oracle_action_scores_are_perfect() {
        let vocab: Vec<String> = ["walking", "carrying", "flying"].iter().map(|s| s.to_string()).collect();
        let gts = vec![
            ActionGroundTruth { frame_id: 0, bbox: G.into(), actions: vec![0, 1] },
            ActionGroundTruth { frame_id: 0, bbox: FAR.into(), actions: vec![0] },
        ];
        let mut dets = Vec::new();
        for g in &gts {
            for a in 0..3 {
                let score = if g.actions.contains(&a) { 1.0 } else { 0.0 };
                dets.push(EvalDetection { frame_id: 0, class_id: a, bbox: g.bbox, score });
            }
        }
        dets.retain(|d| d.score > 0.0);
        let r = action_map(&dets, &gts, &vocab, 0.5);
        assert_eq!(r.excluded, vec!["flying".to_string()]);
        assert!(r.actions.iter().all(|a| a.ap == 1.0));
        assert_eq!(r.map, 1.0);
    }
}
