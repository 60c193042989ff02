//! Brute-force reference implementations for NMS and the mAP sweep, plus a
//! random instance generator.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skysearch_core::eval::{EvalDetection, GroundTruth};
use skysearch_core::{BBox, Detection};

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let area = |x: &BBox| (x.x_max - x.x_min).max(0.0) * (x.y_max - x.y_min).max(0.0);
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (area(a) + area(b) - inter)
}

fn key(d: &Detection) -> (f64, f64, f64, f64, f64, usize) {
    (-d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.class_id)
}

/// Take the best remaining box, delete everything of its class that it
/// overlaps too much, repeat; then truncate.
pub fn oracle_nms(dets: &[Detection], t: f64, max_keep: usize) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets.to_vec();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut bi = 0;
        for i in 1..pool.len() {
            if key(&pool[i]).partial_cmp(&key(&pool[bi])) == Some(std::cmp::Ordering::Less) {
                bi = i;
            }
        }
        let best = pool.remove(bi);
        pool.retain(|d| !(d.class_id == best.class_id && oracle_iou(&d.bbox, &best.bbox) > t));
        kept.push(best);
    }
    kept.truncate(max_keep);
    kept
}

/// VOC-style all-point AP for one class.
pub fn oracle_ap(dets: &[EvalDetection], gts: &[GroundTruth], class: usize, t: f64) -> f64 {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
    idx.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap().then(dets[a].frame_id.cmp(&dets[b].frame_id)).then(a.cmp(&b))
    });
    if gts.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut rec = Vec::new();
    let mut prec = Vec::new();
    for i in idx {
        let d = &dets[i];
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.frame_id != d.frame_id {
                continue;
            }
            let o = oracle_iou(&d.bbox, &g.bbox);
            if o >= t && o > best_iou {
                best_iou = o;
                best = Some(j);
            }
        }
        match best {
            Some(j) => {
                used[j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        rec.push(tp as f64 / gts.len() as f64);
        prec.push(tp as f64 / (tp + fp) as f64);
    }
    let mut mrec = vec![0.0];
    mrec.extend(&rec);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend(&prec);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (0..mrec.len() - 1).filter(|&i| mrec[i + 1] != mrec[i]).map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1]).sum()
}

/// mAP over classes present in detections or ground truth, per threshold.
pub fn oracle_sweep(dets: &[EvalDetection], gts: &[GroundTruth], thresholds: &[f64]) -> Vec<(f64, Vec<(usize, f64)>)> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    thresholds
        .iter()
        .map(|&t| {
            let aps: Vec<(usize, f64)> = classes.iter().map(|&c| (c, oracle_ap(dets, gts, c, t))).collect();
            let map = if aps.is_empty() { 0.0 } else { aps.iter().map(|a| a.1).sum::<f64>() / aps.len() as f64 };
            (map, aps)
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.05..0.4);
    let h = rng.gen_range(0.05..0.4);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h)
}

/// Near `b`, so that overlaps straddle the thresholds.
fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let s = 0.3 * b.width().min(b.height());
    let mut d = || rng.gen_range(-s..s);
    BBox::new(b.x_min + d(), b.y_min + d(), b.x_max + d(), b.y_max + d())
}

/// Scores on a coarse grid so ties occur.
fn score(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0..20) as f64 / 20.0
}

pub fn random_detections(seed: u64, max: usize) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(0..=max);
    let mut out: Vec<Detection> = Vec::with_capacity(n);
    while out.len() < n {
        let bbox = match out.last() {
            Some(p) if rng.gen_bool(0.5) => jitter(&mut rng, &p.bbox),
            _ => random_box(&mut rng),
        };
        out.push(Detection { bbox, score: score(&mut rng), class_id: rng.gen_range(1..=2) });
    }
    out
}

/// At most `max` detections and `max` ground truths over a few frames.
pub fn random_eval_instance(seed: u64, max: usize) -> (Vec<EvalDetection>, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ng = rng.gen_range(0..=max);
    let gts: Vec<GroundTruth> = (0..ng)
        .map(|_| GroundTruth { frame_id: rng.gen_range(0..3), class_id: rng.gen_range(1..=2), bbox: random_box(&mut rng) })
        .collect();
    let nd = rng.gen_range(0..=max);
    let dets = (0..nd)
        .map(|_| {
            let (frame_id, class_id, bbox) = match gts.len() {
                0 => (rng.gen_range(0..3), rng.gen_range(1..=2), random_box(&mut rng)),
                n if rng.gen_bool(0.7) => {
                    let g = &gts[rng.gen_range(0..n)];
                    (g.frame_id, if rng.gen_bool(0.9) { g.class_id } else { 3 - g.class_id }, jitter(&mut rng, &g.bbox))
                }
                _ => (rng.gen_range(0..3), rng.gen_range(1..=2), random_box(&mut rng)),
            };
            EvalDetection { frame_id, class_id, bbox, score: score(&mut rng) }
        })
        .collect();
    (dets, gts)
}
