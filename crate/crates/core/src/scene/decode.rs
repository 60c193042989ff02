//! Rule-based attribute decoder for rendered glyph crops.

use super::raster::Raster;
use super::render::{Palette, Pattern, Region, SceneConfig};

const RADIUS: isize = 3;
const OFFSETS: [(isize, isize, Pattern); 4] = [
    (1, 0, Pattern::Horizontal),
    (0, 1, Pattern::Vertical),
    (1, -1, Pattern::Diagonal),
    (1, 1, Pattern::AntiDiagonal),
];

/// Texture read from a window: dominant palette and pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowCode {
    pub palette: Palette,
    pub pattern: Pattern,
}

/// Reads the texture in a (2r+1)^2 window centred on `(cx, cy)`. Returns
/// `None` unless most window pixels are exact palette tones.
pub fn read_window(crop: &Raster, cx: f64, cy: f64) -> Option<WindowCode> {
    let (cx, cy) = (cx.floor() as isize, cy.floor() as isize);
    let inside = |x: isize, y: isize| {
        (x - cx).abs() <= RADIUS
            && (y - cy).abs() <= RADIUS
            && x >= 0
            && y >= 0
            && (x as usize) < crop.width()
            && (y as usize) < crop.height()
    };
    let mut votes = [0usize; 3];
    let mut total = 0usize;
    for y in cy - RADIUS..=cy + RADIUS {
        for x in cx - RADIUS..=cx + RADIUS {
            if !inside(x, y) {
                continue;
            }
            total += 1;
            if let Some(p) = Palette::of_color(crop.pixel(x as usize, y as usize)) {
                votes[Palette::ALL.iter().position(|&q| q == p).unwrap()] += 1;
            }
        }
    }
    let (best, &n) = votes.iter().enumerate().max_by_key(|&(i, n)| (*n, usize::MAX - i))?;
    if total == 0 || n * 4 < total * 3 {
        return None;
    }
    let palette = Palette::ALL[best];
    let tones = palette.tones();
    let member = |x: isize, y: isize| inside(x, y) && tones.contains(&crop.pixel(x as usize, y as usize));

    let mut pattern = Pattern::Checker;
    let mut best_fraction = 0.0;
    for (dx, dy, pat) in OFFSETS {
        let (mut same, mut pairs) = (0usize, 0usize);
        for y in cy - RADIUS..=cy + RADIUS {
            for x in cx - RADIUS..=cx + RADIUS {
                if member(x, y) && member(x + dx, y + dy) {
                    pairs += 1;
                    if crop.pixel(x as usize, y as usize) == crop.pixel((x + dx) as usize, (y + dy) as usize) {
                        same += 1;
                    }
                }
            }
        }
        if pairs > 0 {
            let f = same as f64 / pairs as f64;
            if f >= 0.95 && f > best_fraction {
                best_fraction = f;
                pattern = pat;
            }
        }
    }
    Some(WindowCode { palette, pattern })
}

/// Decodes the action set (sorted vocabulary indices) from a crop spanning
/// the glyph's box. `None` when the body texture is unreadable.
pub fn decode_actions(crop: &Raster, config: &SceneConfig) -> Option<Vec<usize>> {
    let (w, h) = (crop.width() as f64, crop.height() as f64);
    let lookup = |region: Region, code: WindowCode| {
        config
            .attributes
            .iter()
            .position(|a| a.region == region && a.palette == code.palette && a.pattern == code.pattern)
    };
    let accessory = read_window(crop, 0.78 * w, 0.22 * h).and_then(|c| lookup(Region::Accessory, c));
    let (bx, by) = if accessory.is_some() { (0.36 * w, 0.64 * h) } else { (0.5 * w, 0.5 * h) };
    let body = lookup(Region::Body, read_window(crop, bx, by)?)?;
    let mut actions: Vec<usize> = accessory.into_iter().chain([body]).collect();
    actions.sort_unstable();
    Some(actions)
}
