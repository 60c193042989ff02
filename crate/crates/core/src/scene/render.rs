use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{FramePair, Raster};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::mix;

/// Two-tone period-4 textures, aligned to absolute pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Horizontal,
    Vertical,
    Checker,
    Diagonal,
    AntiDiagonal,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Horizontal,
        Pattern::Vertical,
        Pattern::Checker,
        Pattern::Diagonal,
        Pattern::AntiDiagonal,
    ];

    /// 0 or 1: which palette tone covers absolute pixel (x, y).
    pub fn phase(self, x: usize, y: usize) -> usize {
        match self {
            Pattern::Horizontal => (y / 2) % 2,
            Pattern::Vertical => (x / 2) % 2,
            Pattern::Checker => (x / 2 + y / 2) % 2,
            Pattern::Diagonal => ((x + y) / 2) % 2,
            Pattern::AntiDiagonal => ((x + 4 * (y / 4 + 1) - y) % 4) / 2,
        }
    }
}

/// Color pair whose tones share one mean, so any 4x4 block average of a
/// two-tone texture is the same regardless of pattern or palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    A,
    B,
    C,
}

pub const TEXTURE_MEAN: [u8; 3] = [175, 115, 170];

impl Palette {
    pub const ALL: [Palette; 3] = [Palette::A, Palette::B, Palette::C];

    pub fn tones(self) -> [[u8; 3]; 2] {
        match self {
            Palette::A => [[235, 60, 120], [115, 170, 220]],
            Palette::B => [[250, 170, 230], [100, 60, 110]],
            Palette::C => [[120, 200, 150], [230, 30, 190]],
        }
    }

    pub fn color(self, pattern: Pattern, x: usize, y: usize) -> [u8; 3] {
        self.tones()[pattern.phase(x, y)]
    }

    /// Palette owning this exact color, if any.
    pub fn of_color(rgb: [u8; 3]) -> Option<Palette> {
        Palette::ALL.into_iter().find(|p| p.tones().contains(&rgb))
    }
}

/// Where on the glyph an action is drawn. Body actions are the
/// none-interaction category; every glyph carries exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Body,
    Accessory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionAttribute {
    pub action: String,
    pub region: Region,
    pub pattern: Pattern,
    pub palette: Palette,
}

impl ActionAttribute {
    fn new(action: &str, region: Region, pattern: Pattern, palette: Palette) -> Self {
        ActionAttribute { action: action.into(), region, pattern, palette }
    }
}

/// Default rendering table; its order is the vocabulary order.
pub fn default_attributes() -> Vec<ActionAttribute> {
    use Palette::*;
    use Pattern::*;
    use Region::*;
    vec![
        ActionAttribute::new("handshaking", Accessory, Horizontal, B),
        ActionAttribute::new("hugging", Accessory, Vertical, B),
        ActionAttribute::new("reading", Accessory, Checker, B),
        ActionAttribute::new("drinking", Accessory, Diagonal, B),
        ActionAttribute::new("pushing", Accessory, AntiDiagonal, B),
        ActionAttribute::new("pulling", Accessory, Horizontal, C),
        ActionAttribute::new("carrying", Accessory, Vertical, C),
        ActionAttribute::new("calling", Accessory, Checker, C),
        ActionAttribute::new("running", Body, Horizontal, A),
        ActionAttribute::new("walking", Body, Vertical, A),
        ActionAttribute::new("lying", Body, Checker, A),
        ActionAttribute::new("sitting", Body, Diagonal, A),
        ActionAttribute::new("standing", Body, AntiDiagonal, A),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundConfig {
    pub base: [u8; 3],
    /// Peak amplitude of the low-frequency undulation, in intensity levels.
    pub amplitude: f64,
    /// Uniform per-pixel grain, +/- levels.
    pub grain: u8,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig { base: [60, 120, 60], amplitude: 18.0, grain: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Side of the square detector-resolution downscale.
    pub lowres: usize,
    pub min_pedestrians: usize,
    pub max_pedestrians: usize,
    pub min_glyph: usize,
    pub max_glyph: usize,
    pub interaction_probability: f64,
    /// Minimum free pixels between glyphs.
    pub spacing: usize,
    pub placement_retries: usize,
    pub background: BackgroundConfig,
    pub attributes: Vec<ActionAttribute>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 512,
            height: 512,
            lowres: 128,
            min_pedestrians: 3,
            max_pedestrians: 8,
            min_glyph: 28,
            max_glyph: 40,
            interaction_probability: 0.6,
            spacing: 2,
            placement_retries: 200,
            background: BackgroundConfig::default(),
            attributes: default_attributes(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn vocabulary(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.action.clone()).collect()
    }

    pub fn attribute(&self, action: &str) -> Option<&ActionAttribute> {
        self.attributes.iter().find(|a| a.action == action)
    }

    fn region_actions(&self, region: Region) -> Vec<usize> {
        (0..self.attributes.len())
            .filter(|&i| self.attributes[i].region == region)
            .collect()
    }

    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut bad = |m: String| v.push(format!("{section}.{m}"));
        if self.width < 16 || self.height < 16 {
            bad(format!("width/height must be >= 16, got {}x{}", self.width, self.height));
        }
        if self.lowres == 0 || self.lowres > self.width.min(self.height) {
            bad(format!("lowres must be in [1, {}], got {}", self.width.min(self.height), self.lowres));
        }
        if self.min_pedestrians > self.max_pedestrians {
            bad(format!(
                "min_pedestrians ({}) exceeds max_pedestrians ({})",
                self.min_pedestrians, self.max_pedestrians
            ));
        }
        if self.min_glyph < 12 || self.min_glyph > self.max_glyph {
            bad(format!(
                "glyph size range must satisfy 12 <= min <= max, got {}..{}",
                self.min_glyph, self.max_glyph
            ));
        }
        if self.max_glyph as f64 > 0.08 * self.width as f64 {
            bad(format!(
                "max_glyph ({}) exceeds 8% of the frame width ({})",
                self.max_glyph, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.interaction_probability) {
            bad(format!(
                "interaction_probability must be in [0, 1], got {}",
                self.interaction_probability
            ));
        }
        if self.region_actions(Region::Body).is_empty() {
            bad("attributes must contain at least one body action".into());
        }
        let mut seen = std::collections::HashSet::new();
        let mut codes = std::collections::HashSet::new();
        for a in &self.attributes {
            if !seen.insert(a.action.as_str()) {
                bad(format!("attributes lists '{}' twice", a.action));
            }
            if !codes.insert((a.pattern, a.palette)) {
                bad(format!("attributes.{}: visual code collides with another action", a.action));
            }
        }
        for a in self.attributes.iter().filter(|a| a.region == Region::Body) {
            if self
                .attributes
                .iter()
                .any(|b| b.region == Region::Accessory && b.palette == a.palette)
            {
                bad(format!("attributes.{}: body and accessory palettes must differ", a.action));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("scene");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame_id: u32,
    pub pedestrian_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub actions: Vec<String>,
}

/// Pixel-space glyph layout, shared by the renderer and the decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphLayout {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub accessory: bool,
}

impl GlyphLayout {
    /// Ellipse bounds `(x0, y0, x1, y1)` in continuous pixel coordinates.
    pub fn body_bounds(&self) -> (f64, f64, f64, f64) {
        let (x, y, w, h) = (self.x as f64, self.y as f64, self.w as f64, self.h as f64);
        if self.accessory {
            (x, y + 0.28 * h, x + 0.72 * w, y + h)
        } else {
            (x, y, x + w, y + h)
        }
    }

    /// Accessory square as a half-open pixel range.
    pub fn accessory_rect(&self) -> (usize, usize, usize, usize) {
        let x0 = self.x + (0.56 * self.w as f64).round() as usize;
        let y1 = self.y + (0.44 * self.h as f64).round() as usize;
        (x0, self.y, self.x + self.w, y1)
    }

    pub fn in_body(&self, px: usize, py: usize) -> bool {
        let (x0, y0, x1, y1) = self.body_bounds();
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let (rx, ry) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
        let dx = (px as f64 + 0.5 - cx) / rx;
        let dy = (py as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    }

    pub fn in_accessory(&self, px: usize, py: usize) -> bool {
        let (x0, y0, x1, y1) = self.accessory_rect();
        self.accessory && px >= x0 && px < x1 && py >= y0 && py < y1
    }
}

/// One rendered pedestrian: its mask bounding box in pixels and the actions.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedGlyph {
    pub layout: GlyphLayout,
    pub mask_bounds: (usize, usize, usize, usize),
    pub mask_pixels: usize,
    pub actions: Vec<usize>,
}

pub fn frame_seed(seed: u64, frame_id: u32) -> u64 {
    mix(seed ^ mix(u64::from(frame_id).wrapping_add(0x5ce4e)))
}

fn paint_background(cfg: &BackgroundConfig, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut waves = Vec::new();
    for _ in 0..3 {
        let fx: f64 = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / w as f64;
        let fy: f64 = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / h as f64;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let weights: [f64; 3] = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
        waves.push((fx, fy, phase, weights));
    }
    let norm = waves.len() as f64;
    // sin(a + b) = sin a cos b + cos a sin b, tabulated per column and row.
    let cols: Vec<Vec<(f64, f64)>> = waves
        .iter()
        .map(|(fx, _, ph, _)| (0..w).map(|x| (fx * x as f64 + ph).sin_cos()).collect())
        .collect();
    let rows: Vec<Vec<(f64, f64)>> = waves
        .iter()
        .map(|(_, fy, _, _)| (0..h).map(|y| (fy * y as f64).sin_cos()).collect())
        .collect();
    let mut r = Raster::filled(w, h, cfg.base);
    let grain = i32::from(cfg.grain);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            let waves_at: Vec<f64> = (0..waves.len())
                .map(|k| {
                    let (sa, ca) = cols[k][x];
                    let (sb, cb) = rows[k][y];
                    sa * cb + ca * sb
                })
                .collect();
            for (c, out) in px.iter_mut().enumerate() {
                let undulation: f64 =
                    waves.iter().zip(&waves_at).map(|(wv, s)| wv.3[c] * s).sum::<f64>() / norm;
                let noise = if grain > 0 { rng.gen_range(-grain..=grain) } else { 0 };
                let v = f64::from(cfg.base[c]) + cfg.amplitude * undulation + f64::from(noise);
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
            r.set_pixel(x, y, px);
        }
    }
    r
}

fn overlaps(a: &GlyphLayout, b: &GlyphLayout, gap: usize) -> bool {
    a.x < b.x + b.w + gap && b.x < a.x + a.w + gap && a.y < b.y + b.h + gap && b.y < a.y + a.h + gap
}

/// Draws the glyph into the raster and returns its mask bounding box.
pub fn draw_glyph(
    raster: &mut Raster,
    layout: &GlyphLayout,
    body: &ActionAttribute,
    accessory: Option<&ActionAttribute>,
) -> ((usize, usize, usize, usize), usize) {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut count = 0;
    for py in layout.y..layout.y + layout.h {
        for px in layout.x..layout.x + layout.w {
            let color = if let (true, Some(acc)) = (layout.in_accessory(px, py), accessory) {
                acc.palette.color(acc.pattern, px, py)
            } else if layout.in_body(px, py) {
                body.palette.color(body.pattern, px, py)
            } else {
                continue;
            };
            raster.set_pixel(px, py, color);
            count += 1;
            x0 = x0.min(px);
            y0 = y0.min(py);
            x1 = x1.max(px + 1);
            y1 = y1.max(py + 1);
        }
    }
    ((x0, y0, x1, y1), count)
}

/// Renders one frame. Deterministic in `(config.seed, frame_id)`.
pub fn generate_scene(config: &SceneConfig, frame_id: u32) -> Result<(FramePair, Vec<Annotation>)> {
    let (raster, glyphs) = render_frame(config, frame_id)?;
    let vocab = config.vocabulary();
    let (w, h) = (config.width as f64, config.height as f64);
    let annotations = glyphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (x0, y0, x1, y1) = g.mask_bounds;
            Annotation {
                frame_id,
                pedestrian_id: i as u32,
                bbox: BBox::new(x0 as f64 / w, y0 as f64 / h, x1 as f64 / w, y1 as f64 / h),
                actions: g.actions.iter().map(|&a| vocab[a].clone()).collect(),
            }
        })
        .collect();
    Ok((FramePair::new(raster, config.lowres), annotations))
}

/// Highres raster plus per-glyph rendering records.
pub fn render_frame(config: &SceneConfig, frame_id: u32) -> Result<(Raster, Vec<RenderedGlyph>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(config.seed, frame_id));
    let mut raster = paint_background(&config.background, config.width, config.height, &mut rng);
    let count = rng.gen_range(config.min_pedestrians..=config.max_pedestrians);
    let body_actions = config.region_actions(Region::Body);
    let accessory_actions = config.region_actions(Region::Accessory);

    let mut layouts: Vec<GlyphLayout> = Vec::with_capacity(count);
    let mut glyphs = Vec::with_capacity(count);
    for _ in 0..count {
        let w = rng.gen_range(config.min_glyph..=config.max_glyph);
        let h = rng.gen_range(config.min_glyph..=config.max_glyph);
        let mut placed = None;
        for _ in 0..config.placement_retries.max(1) {
            let x = rng.gen_range(0..=config.width - w);
            let y = rng.gen_range(0..=config.height - h);
            let cand = GlyphLayout { x, y, w, h, accessory: false };
            if layouts.iter().all(|o| !overlaps(&cand, o, config.spacing)) {
                placed = Some(cand);
                break;
            }
        }
        let Some(mut layout) = placed else {
            return Err(Error::Infeasible(format!(
                "frame {frame_id}: could not place {count} glyphs without overlap after {} retries",
                config.placement_retries
            )));
        };
        let body = body_actions[rng.gen_range(0..body_actions.len())];
        let accessory = if !accessory_actions.is_empty() && rng.gen_bool(config.interaction_probability) {
            Some(accessory_actions[rng.gen_range(0..accessory_actions.len())])
        } else {
            None
        };
        layout.accessory = accessory.is_some();
        let (mask_bounds, mask_pixels) = draw_glyph(
            &mut raster,
            &layout,
            &config.attributes[body],
            accessory.map(|a| &config.attributes[a]),
        );
        let mut actions: Vec<usize> = accessory.into_iter().chain([body]).collect();
        actions.sort_unstable();
        layouts.push(layout);
        glyphs.push(RenderedGlyph { layout, mask_bounds, mask_pixels, actions });
    }
    Ok((raster, glyphs))
}
