//! Default boxes, ground-truth matching, hard-negative mining and the
//! multibox objective `(L_conf + w * L_loc) / N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, iou, BBox};
use crate::nn::{smooth_l1, smooth_l1_grad, softmax_cross_entropy, log_softmax, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorLayer {
    pub grid_h: usize,
    pub grid_w: usize,
    pub scale: f64,
    pub aspect_ratios: Vec<f64>,
    /// Adds one square box at `sqrt(scale * next_scale)`.
    #[serde(default)]
    pub extra_scale: bool,
}

impl AnchorLayer {
    pub fn boxes_per_cell(&self) -> usize {
        self.aspect_ratios.len() + usize::from(self.extra_scale)
    }

    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w * self.boxes_per_cell()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultBoxSpec {
    pub layers: Vec<AnchorLayer>,
    /// Scale that follows the last layer, used for its extra box.
    pub final_scale: f64,
}

impl DefaultBoxSpec {
    /// Two heads over a 128x128 input: 16x16 and 8x8 grids.
    pub fn desk() -> Self {
        let layer = |g, scale| AnchorLayer {
            grid_h: g,
            grid_w: g,
            scale,
            aspect_ratios: vec![1.0, 2.0, 0.5],
            extra_scale: true,
        };
        DefaultBoxSpec {
            layers: vec![layer(16, 0.08), layer(8, 0.2)],
            final_scale: 0.35,
        }
    }

    /// The six-layer 300x300 configuration of the original single-shot detector.
    pub fn ssd300() -> Self {
        let four = vec![1.0, 2.0, 0.5];
        let six = vec![1.0, 2.0, 0.5, 3.0, 1.0 / 3.0];
        let grids = [38, 19, 10, 5, 3, 1];
        let scales = [0.1, 0.2, 0.37, 0.54, 0.71, 0.88];
        let ratios = [&four, &six, &six, &six, &four, &four];
        DefaultBoxSpec {
            layers: (0..6)
                .map(|i| AnchorLayer {
                    grid_h: grids[i],
                    grid_w: grids[i],
                    scale: scales[i],
                    aspect_ratios: ratios[i].clone(),
                    extra_scale: true,
                })
                .collect(),
            final_scale: 1.05,
        }
    }

    pub fn num_boxes(&self) -> usize {
        self.layers.iter().map(AnchorLayer::count).sum()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers.is_empty() {
            v.push("anchor spec has no layers".to_string());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.grid_h == 0 || l.grid_w == 0 {
                v.push(format!("anchor layer {i}: empty grid"));
            }
            if !(l.scale > 0.0 && l.scale <= 1.0) {
                v.push(format!("anchor layer {i}: scale {} outside (0, 1]", l.scale));
            }
            if l.aspect_ratios.is_empty() || l.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
                v.push(format!("anchor layer {i}: aspect ratios must be non-empty and positive"));
            }
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[1].grid_h * w[1].grid_w >= w[0].grid_h * w[0].grid_w {
                v.push(format!("anchor layer {}: grid must be smaller than layer {i}", i + 1));
            }
            if w[1].scale <= w[0].scale {
                v.push(format!("anchor layer {}: scale must exceed layer {i}", i + 1));
            }
        }
        if let Some(last) = self.layers.last() {
            if self.final_scale <= last.scale {
                v.push("anchor final_scale must exceed the last layer scale".to_string());
            }
        }
        v
    }
}

/// One box per (layer, row, col, ratio), in that order, clipped to the image.
pub fn generate_default_boxes(spec: &DefaultBoxSpec) -> Result<Vec<BBox>> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut out = Vec::with_capacity(spec.num_boxes());
    for (i, layer) in spec.layers.iter().enumerate() {
        let next = spec.layers.get(i + 1).map_or(spec.final_scale, |l| l.scale);
        let s = layer.scale;
        for r in 0..layer.grid_h {
            let cy = (r as f64 + 0.5) / layer.grid_h as f64;
            for c in 0..layer.grid_w {
                let cx = (c as f64 + 0.5) / layer.grid_w as f64;
                for &ratio in &layer.aspect_ratios {
                    let sr = ratio.sqrt();
                    out.push(BBox::from_center(cx, cy, s * sr, s / sr).clip());
                }
                if layer.extra_scale {
                    let s2 = (s * next).sqrt();
                    out.push(BBox::from_center(cx, cy, s2, s2).clip());
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// Matched ground-truth index per anchor.
    pub matched: Vec<Option<usize>>,
    /// True where the match came from the best-anchor-per-ground-truth rule.
    pub forced: Vec<bool>,
    pub num_positive: usize,
}

impl MatchAssignment {
    pub fn is_positive(&self, anchor: usize) -> bool {
        self.matched[anchor].is_some()
    }
}

/// Anchors whose best overlap exceeds `threshold` take their argmax ground
/// truth; then, greedily by descending IoU, every ground truth claims its
/// best still-unclaimed anchor regardless of overlap. Ties go to the lower
/// ground-truth index, then the lower anchor index.
pub fn match_anchors(gts: &[BBox], anchors: &[BBox], threshold: f64) -> MatchAssignment {
    let n = anchors.len();
    let mut matched = vec![None; n];
    let mut forced = vec![false; n];
    if gts.is_empty() || n == 0 {
        return MatchAssignment {
            matched,
            forced,
            num_positive: 0,
        };
    }
    let table: Vec<Vec<f64>> = gts.iter().map(|g| anchors.iter().map(|a| iou(g, a)).collect()).collect();
    for a in 0..n {
        let mut best = 0;
        for g in 1..gts.len() {
            if table[g][a] > table[best][a] {
                best = g;
            }
        }
        if table[best][a] > threshold {
            matched[a] = Some(best);
        }
    }
    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(n) {
        let mut pick: Option<(usize, usize, f64)> = None;
        for (g, row) in table.iter().enumerate() {
            if gt_done[g] {
                continue;
            }
            for (a, &v) in row.iter().enumerate() {
                if forced[a] {
                    continue;
                }
                if pick.is_none_or(|(_, _, best)| v > best) {
                    pick = Some((g, a, v));
                }
            }
        }
        let Some((g, a, _)) = pick else { break };
        gt_done[g] = true;
        forced[a] = true;
        matched[a] = Some(g);
    }
    let num_positive = matched.iter().filter(|m| m.is_some()).count();
    MatchAssignment {
        matched,
        forced,
        num_positive,
    }
}

/// Picks the highest-loss unmatched anchors: `floor(ratio * N)` of them, or
/// `empty_budget` when the image has no positives.
pub fn hard_negative_mining(
    conf_losses: &[f64],
    assignment: &MatchAssignment,
    ratio: f64,
    empty_budget: usize,
) -> Vec<bool> {
    let n = assignment.num_positive;
    let budget = if n > 0 {
        (ratio * n as f64).floor() as usize
    } else {
        empty_budget
    };
    let mut candidates: Vec<usize> = (0..conf_losses.len()).filter(|&a| !assignment.is_positive(a)).collect();
    candidates.sort_by(|&a, &b| conf_losses[b].total_cmp(&conf_losses[a]).then(a.cmp(&b)));
    let mut mask = vec![false; conf_losses.len()];
    for &a in candidates.iter().take(budget) {
        mask[a] = true;
    }
    mask
}

/// How a batch without any positive anchor is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyBatch {
    /// Loss 0 with zero gradients.
    #[default]
    Zero,
    /// Average over the mined background anchors.
    MeanOverNegatives,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiboxConfig {
    #[serde(default = "default_match")]
    pub match_threshold: f64,
    #[serde(default = "default_neg_ratio")]
    pub negative_ratio: f64,
    #[serde(default = "default_empty_negatives")]
    pub empty_negatives: usize,
    #[serde(default = "default_loc_weight")]
    pub loc_weight: f64,
    #[serde(default)]
    pub empty_batch: EmptyBatch,
}

fn default_match() -> f64 {
    0.5
}
fn default_neg_ratio() -> f64 {
    3.0
}
fn default_empty_negatives() -> usize {
    16
}
fn default_loc_weight() -> f64 {
    1.0
}

impl Default for MultiboxConfig {
    fn default() -> Self {
        MultiboxConfig {
            match_threshold: default_match(),
            negative_ratio: default_neg_ratio(),
            empty_negatives: default_empty_negatives(),
            loc_weight: default_loc_weight(),
            empty_batch: EmptyBatch::Zero,
        }
    }
}

/// Ground truth for one image: boxes plus the class labels each box
/// carries. A box with several labels is trained against the uniform
/// distribution over them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTargets {
    pub boxes: Vec<BBox>,
    pub labels: Vec<Vec<usize>>,
}

impl ImageTargets {
    pub fn single_class(boxes: Vec<BBox>, class: usize) -> Self {
        let labels = vec![vec![class]; boxes.len()];
        ImageTargets { boxes, labels }
    }
}

/// Unnormalized per-image loss sums and their gradients.
#[derive(Clone, Debug)]
pub struct MultiboxTerms<T> {
    pub conf: f64,
    pub loc: f64,
    pub num_positive: usize,
    pub num_negative: usize,
    pub grad_logits: Vec<T>,
    pub grad_offsets: Vec<T>,
    pub negatives: Vec<bool>,
}

impl<T: Scalar> MultiboxTerms<T> {
    pub fn total(&self, loc_weight: f64) -> f64 {
        self.conf + loc_weight * self.loc
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::of(factor);
        self.grad_logits.iter_mut().for_each(|g| *g = *g * f);
        self.grad_offsets.iter_mut().for_each(|g| *g = *g * f);
    }
}

/// Confidence and localization sums for one image, with gradients of
/// `conf + loc_weight * loc` with respect to logits `(A, C)` and offsets `(A, 4)`.
#[allow(clippy::too_many_arguments)]
pub fn multibox_terms<T: Scalar>(
    anchors: &[BBox],
    assignment: &MatchAssignment,
    logits: &[T],
    offsets: &[T],
    num_classes: usize,
    targets: &ImageTargets,
    config: &MultiboxConfig,
) -> Result<MultiboxTerms<T>> {
    let a = anchors.len();
    if num_classes < 2 || logits.len() != a * num_classes || offsets.len() != a * 4 || assignment.matched.len() != a {
        return Err(Error::shape(
            "multibox_loss",
            format!("{a} anchors x {num_classes} logits and x 4 offsets"),
            &[logits.len(), offsets.len(), assignment.matched.len()],
        ));
    }
    let mut background_loss = vec![0.0; a];
    for (i, bl) in background_loss.iter_mut().enumerate() {
        if !assignment.is_positive(i) {
            *bl = -log_softmax(&logits[i * num_classes..(i + 1) * num_classes])[0];
        }
    }
    let negatives = hard_negative_mining(&background_loss, assignment, config.negative_ratio, config.empty_negatives);

    let mut grad_logits = vec![T::zero(); logits.len()];
    let mut grad_offsets = vec![T::zero(); offsets.len()];
    let (mut conf, mut loc) = (0.0, 0.0);
    let mut target = vec![0.0; num_classes];
    for i in 0..a {
        let row = i * num_classes..(i + 1) * num_classes;
        target.iter_mut().for_each(|t| *t = 0.0);
        match assignment.matched[i] {
            Some(g) => {
                let labels = &targets.labels[g];
                for &l in labels {
                    target[l] += 1.0 / labels.len() as f64;
                }
            }
            None if negatives[i] => target[0] = 1.0,
            None => continue,
        }
        let (l, g) = softmax_cross_entropy(&logits[row.clone()], &target);
        conf += l;
        grad_logits[row].copy_from_slice(&g);

        if let Some(gi) = assignment.matched[i] {
            let enc = encode_offsets(&targets.boxes[gi], &anchors[i])?;
            for k in 0..4 {
                let d = offsets[i * 4 + k].f64() - enc[k];
                loc += smooth_l1(d);
                grad_offsets[i * 4 + k] = T::of(config.loc_weight * smooth_l1_grad(d));
            }
        }
    }
    Ok(MultiboxTerms {
        conf,
        loc,
        num_positive: assignment.num_positive,
        num_negative: negatives.iter().filter(|&&n| n).count(),
        grad_logits,
        grad_offsets,
        negatives,
    })
}

/// Batch normalizer: total positives, or the configured fallback when the
/// batch has none. `None` means the loss is defined as zero.
pub fn batch_normalizer<T>(terms: &[MultiboxTerms<T>], config: &MultiboxConfig) -> Option<f64> {
    let n: usize = terms.iter().map(|t| t.num_positive).sum();
    if n > 0 {
        return Some(n as f64);
    }
    match config.empty_batch {
        EmptyBatch::Zero => None,
        EmptyBatch::MeanOverNegatives => {
            let neg: usize = terms.iter().map(|t| t.num_negative).sum();
            (neg > 0).then_some(neg as f64)
        }
    }
}

/// Single-image multibox loss normalized by its positive count. Gradients
/// in the returned terms are scaled to match.
#[allow(clippy::too_many_arguments)]
pub fn multibox_loss<T: Scalar>(
    anchors: &[BBox],
    assignment: &MatchAssignment,
    logits: &[T],
    offsets: &[T],
    num_classes: usize,
    targets: &ImageTargets,
    config: &MultiboxConfig,
) -> Result<(f64, MultiboxTerms<T>)> {
    let mut terms = multibox_terms(anchors, assignment, logits, offsets, num_classes, targets, config)?;
    match batch_normalizer(std::slice::from_ref(&terms), config) {
        Some(norm) => {
            terms.scale_grads(1.0 / norm);
            Ok((terms.total(config.loc_weight) / norm, terms))
        }
        None => {
            terms.scale_grads(0.0);
            Ok((0.0, terms))
        }
    }
}
