use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{PixelRect, Raster};
use crate::geometry::BBox;

pub const CROP_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentOps {
    pub random_crop: bool,
    pub mirror: bool,
}

impl AugmentOps {
    pub fn all() -> Self {
        AugmentOps { random_crop: true, mirror: true }
    }
}

/// Transformed frame. `kept[i]` is the input index of `boxes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub raster: Raster,
    pub boxes: Vec<BBox>,
    pub kept: Vec<usize>,
}

pub fn mirror_annotations(boxes: &[BBox]) -> Vec<BBox> {
    boxes.iter().map(BBox::mirror).collect()
}

/// Crops to `rect`, resamples back to the input size, keeps boxes whose
/// center lies inside the crop, re-normalized and clipped.
pub fn crop_frame(raster: &Raster, boxes: &[BBox], rect: PixelRect) -> Augmented {
    let (w, h) = (raster.width() as f64, raster.height() as f64);
    let (x0, y0) = (rect.x0 as f64 / w, rect.y0 as f64 / h);
    let (cw, ch) = (rect.width() as f64 / w, rect.height() as f64 / h);
    let mut out_boxes = Vec::new();
    let mut kept = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let (cx, cy) = b.center();
        if cx <= x0 || cx >= x0 + cw || cy <= y0 || cy >= y0 + ch {
            continue;
        }
        let moved = BBox::new(
            (b.x_min - x0) / cw,
            (b.y_min - y0) / ch,
            (b.x_max - x0) / cw,
            (b.y_max - y0) / ch,
        )
        .clip();
        out_boxes.push(moved);
        kept.push(i);
    }
    let full = rect.x0 == 0 && rect.y0 == 0 && rect.x1 == raster.width() && rect.y1 == raster.height();
    let out = if full {
        raster.clone()
    } else {
        raster.crop(rect).resize_bilinear(raster.width(), raster.height())
    };
    Augmented { raster: out, boxes: out_boxes, kept }
}

fn sample_crop(rng: &mut ChaCha8Rng, width: usize, height: usize) -> PixelRect {
    loop {
        let sw: f64 = rng.gen_range(0.5..=1.0);
        let sh: f64 = rng.gen_range(0.5..=1.0);
        if (sw / sh).ln().abs() > std::f64::consts::LN_2 {
            continue;
        }
        let cw = ((sw * width as f64).round() as usize).clamp(1, width);
        let ch = ((sh * height as f64).round() as usize).clamp(1, height);
        let x0 = rng.gen_range(0..=width - cw);
        let y0 = rng.gen_range(0..=height - ch);
        return PixelRect { x0, y0, x1: x0 + cw, y1: y0 + ch };
    }
}

/// Random crop (probability 1/2) then random mirror (probability 1/2),
/// each only when enabled. Deterministic in `seed`.
pub fn augment(raster: &Raster, boxes: &[BBox], ops: AugmentOps, seed: u64) -> Augmented {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Augmented { raster: raster.clone(), boxes: boxes.to_vec(), kept: (0..boxes.len()).collect() };
    if ops.random_crop && rng.gen_bool(0.5) {
        for attempt in 0..CROP_RETRIES {
            let rect = sample_crop(&mut rng, raster.width(), raster.height());
            let cropped = crop_frame(raster, boxes, rect);
            if !cropped.boxes.is_empty() || boxes.is_empty() || attempt + 1 == CROP_RETRIES {
                out = cropped;
                break;
            }
        }
    }
    if ops.mirror && rng.gen_bool(0.5) {
        out.raster = out.raster.mirror();
        out.boxes = mirror_annotations(&out.boxes);
    }
    out
}
