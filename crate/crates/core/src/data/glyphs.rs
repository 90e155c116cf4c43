//! Procedural pseudo-scripts.
//!
//! Every class owns a [`GlyphGrammar`]: a small alphabet of letter templates
//! built from line, arc, hook and dot strokes drawn with class-specific
//! frequencies, preferred stroke angles and line geometry. An image is one
//! "word" of 3 to 6 jittered letters from that alphabet on a noisy gray
//! background.

use std::f64::consts::PI;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

use super::{LabeledImageSet, Split};

/// Letters per class alphabet.
pub const ALPHABET_SIZE: usize = 8;
/// Letters per rendered word, inclusive.
pub const GLYPHS_PER_IMAGE: (usize, usize) = (3, 6);
/// Background gray level range.
pub const BACKGROUND_RANGE: (f64, f64) = (0.2, 0.8);
/// Standard deviation of the additive pixel noise.
pub const PIXEL_NOISE: f64 = 0.05;
/// Standard deviation of per-instance control point jitter, in letter units.
pub const POINT_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Line,
    Arc,
    Hook,
    Dot,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Line, Primitive::Arc, Primitive::Hook, Primitive::Dot];
}

/// One stroke in letter coordinates: `x` in `[0, 1]` left to right, `y` in
/// `[0, 1]` top to bottom, baseline at `y = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    pub kind: Primitive,
    /// Polyline vertices; a single vertex for dots.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphTemplate {
    pub strokes: Vec<Stroke>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphGrammar {
    pub class_id: usize,
    pub stroke_seed: u64,
    /// Strokes per letter, inclusive.
    pub stroke_count: (usize, usize),
    /// Relative frequencies of line, arc, hook and dot strokes.
    pub primitive_weights: [f64; 4],
    /// Stroke directions (radians) lines snap towards.
    pub preferred_angles: Vec<f64>,
    /// Fraction of the line height taken by the letter body.
    pub x_height: f64,
    /// Extra height above the body that strokes may reach.
    pub ascender: f64,
    /// Horizontal shear applied to every letter.
    pub slant: f64,
    /// Stroke width as a fraction of the line height.
    pub stroke_width: f64,
    /// Letter width over line height.
    pub aspect: f64,
    /// Whether letters hang from a continuous bar along the top of the body.
    pub headline: bool,
    pub alphabet: Vec<GlyphTemplate>,
}

impl GlyphGrammar {
    pub fn new(class_id: usize, master_seed: u64) -> Self {
        let mut r = rng::stream(master_seed, Domain::Grammar, class_id as u64);
        let mut primitive_weights = [0.0; 4];
        for w in &mut primitive_weights {
            *w = r.random_range(0.05..1.0f64).powi(2);
        }
        let lo = r.random_range(1..=3usize);
        let stroke_count = (lo, lo + r.random_range(0..=2usize));
        let n_angles = r.random_range(1..=3usize);
        let preferred_angles = (0..n_angles).map(|_| r.random_range(0.0..PI)).collect();
        let x_height = r.random_range(0.45..0.8);
        let ascender = r.random_range(0.0..(1.0 - x_height));
        let slant = r.random_range(-0.35..0.35);
        let stroke_width = r.random_range(0.06..0.12);
        let aspect = r.random_range(0.45..0.9);
        let headline = r.random_bool(0.3);
        let stroke_seed = r.random::<u64>();
        let mut grammar = GlyphGrammar {
            class_id,
            stroke_seed,
            stroke_count,
            primitive_weights,
            preferred_angles,
            x_height,
            ascender,
            slant,
            stroke_width,
            aspect,
            headline,
            alphabet: Vec::new(),
        };
        let mut sr = rng::stream(stroke_seed, Domain::Grammar, class_id as u64);
        grammar.alphabet = (0..ALPHABET_SIZE).map(|_| grammar.sample_template(&mut sr)).collect();
        grammar
    }

    fn body_top(&self) -> f64 {
        1.0 - self.x_height
    }

    fn pick_primitive(&self, r: &mut ChaCha8Rng) -> Primitive {
        let total: f64 = self.primitive_weights.iter().sum();
        let mut u = r.random_range(0.0..total);
        for (kind, w) in Primitive::ALL.iter().zip(self.primitive_weights) {
            if u < w {
                return *kind;
            }
            u -= w;
        }
        Primitive::Dot
    }

    fn point_in_body(&self, r: &mut ChaCha8Rng, allow_ascender: bool) -> (f64, f64) {
        let top = if allow_ascender {
            self.body_top() - self.ascender
        } else {
            self.body_top()
        };
        (r.random_range(0.1..0.9), r.random_range(top..1.0))
    }

    fn angle(&self, r: &mut ChaCha8Rng) -> f64 {
        let base = self.preferred_angles[r.random_range(0..self.preferred_angles.len())];
        base + r.random_range(-0.15..0.15)
    }

    fn sample_template(&self, r: &mut ChaCha8Rng) -> GlyphTemplate {
        let n = r.random_range(self.stroke_count.0..=self.stroke_count.1);
        let body = self.x_height;
        let strokes = (0..n)
            .map(|_| match self.pick_primitive(r) {
                Primitive::Line => {
                    let (cx, cy) = self.point_in_body(r, true);
                    let a = self.angle(r);
                    let len = body * r.random_range(0.4..0.9);
                    let (dx, dy) = (0.5 * len * a.cos(), 0.5 * len * a.sin());
                    Stroke {
                        kind: Primitive::Line,
                        points: vec![(cx - dx, cy - dy), (cx + dx, cy + dy)],
                    }
                }
                Primitive::Arc => {
                    let radius = body * r.random_range(0.18..0.4);
                    let center = (
                        r.random_range(0.3..0.7),
                        1.0 - body / 2.0 + r.random_range(-0.1..0.1) * body,
                    );
                    let start = r.random_range(0.0..2.0 * PI);
                    let sweep = r.random_range(0.6..1.7) * PI;
                    Stroke {
                        kind: Primitive::Arc,
                        points: arc_points(center, radius, start, sweep, 10),
                    }
                }
                Primitive::Hook => {
                    let (x0, y0) = self.point_in_body(r, true);
                    let a = self.angle(r);
                    let len = body * r.random_range(0.35..0.7);
                    let end = (x0 + len * a.cos(), y0 + len * a.sin().abs());
                    let radius = body * r.random_range(0.1..0.2);
                    let turn = if r.random_bool(0.5) { 1.0 } else { -1.0 };
                    let heading = (end.1 - y0).atan2(end.0 - x0);
                    let normal = heading + turn * PI / 2.0;
                    let center = (end.0 + radius * normal.cos(), end.1 + radius * normal.sin());
                    let mut points = vec![(x0, y0)];
                    points.extend(arc_points(center, radius, normal + PI, turn * 1.3 * PI, 6));
                    Stroke {
                        kind: Primitive::Hook,
                        points,
                    }
                }
                Primitive::Dot => Stroke {
                    kind: Primitive::Dot,
                    points: vec![self.point_in_body(r, true)],
                },
            })
            .collect();
        GlyphTemplate { strokes }
    }
}

fn arc_points(center: (f64, f64), radius: f64, start: f64, sweep: f64, segments: usize) -> Vec<(f64, f64)> {
    (0..=segments)
        .map(|i| {
            let t = start + sweep * i as f64 / segments as f64;
            (center.0 + radius * t.cos(), center.1 + radius * t.sin())
        })
        .collect()
}

/// Antialiased coverage buffer for thick polylines and discs.
struct Canvas {
    size: usize,
    coverage: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            coverage: vec![0.0; size * size],
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), width: f64) {
        let half = width / 2.0;
        let pad = half + 1.0;
        let lo_x = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
        let lo_y = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
        let hi_x = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(self.size);
        let hi_y = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(self.size);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for py in lo_y..hi_y {
            for px in lo_x..hi_x {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (x - a.0 - t * dx, y - a.1 - t * dy);
                let d = (ex * ex + ey * ey).sqrt();
                let c = (half + 0.5 - d).clamp(0.0, 1.0);
                let slot = &mut self.coverage[py * self.size + px];
                *slot = slot.max(c);
            }
        }
    }

    fn polyline(&mut self, points: &[(f64, f64)], width: f64) {
        if let [p] = points {
            self.segment(*p, *p, width * 1.6);
        }
        for w in points.windows(2) {
            self.segment(w[0], w[1], width);
        }
    }
}

/// Render one word image of `size x size` pixels with values in `[0, 1]`.
pub fn render_word(grammar: &GlyphGrammar, size: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let background = r.random_range(BACKGROUND_RANGE.0..BACKGROUND_RANGE.1);
    let contrast = r.random_range(0.3..0.5);
    let ink = if background >= 0.5 {
        background - contrast
    } else {
        background + contrast
    };

    let count = r.random_range(GLYPHS_PER_IMAGE.0..=GLYPHS_PER_IMAGE.1);
    let mut height = s * r.random_range(0.3..0.45);
    let widths: Vec<f64> = (0..count)
        .map(|_| grammar.aspect * r.random_range(0.85..1.15))
        .collect();
    let gap = 0.12;
    let units: f64 = widths.iter().sum::<f64>() + gap * (count - 1) as f64;
    let max_width = 0.92 * s;
    if units * height > max_width {
        height = max_width / units;
    }
    let total_w = units * height;
    let x_start = (s - total_w) / 2.0 + r.random_range(-0.5..0.5) * (s - total_w) * 0.5;
    let y_top = (s - height) / 2.0 + r.random_range(-0.5..0.5) * (s - height) * 0.5;
    let width_px = (grammar.stroke_width * height * r.random_range(0.85..1.15)).max(1.0);
    let jitter = Normal::new(0.0, POINT_JITTER).expect("valid jitter");

    let mut canvas = Canvas::new(size);
    let mut x = x_start;
    for w in &widths {
        let glyph = &grammar.alphabet[r.random_range(0..grammar.alphabet.len())];
        let cell_w = w * height;
        for stroke in &glyph.strokes {
            let pts: Vec<(f64, f64)> = stroke
                .points
                .iter()
                .map(|&(u, v)| {
                    let u = u + jitter.sample(r) + grammar.slant * (1.0 - v);
                    let v = v + jitter.sample(r);
                    (x + u * cell_w, y_top + v * height)
                })
                .collect();
            canvas.polyline(&pts, width_px);
        }
        x += cell_w + gap * height;
    }
    if grammar.headline {
        let y = y_top + grammar.body_top() * height;
        canvas.segment((x_start, y), (x_start + total_w, y), width_px);
    }

    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid noise");
    canvas
        .coverage
        .iter()
        .map(|&c| (background + (ink - background) * c + noise.sample(r)).clamp(0.0, 1.0))
        .collect()
}

fn render_split(
    grammars: &[GlyphGrammar],
    per_class: usize,
    size: usize,
    seed: u64,
    split: Split,
) -> Result<LabeledImageSet> {
    let k = grammars.len();
    let m = k * per_class;
    let domain = match split {
        Split::Train => Domain::TrainImage,
        Split::Test => Domain::TestImage,
    };
    let mut data = Vec::with_capacity(m * size * size);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let label = i % k;
        let mut r = rng::stream(seed, domain, i as u64);
        data.extend(render_word(&grammars[label], size, &mut r));
        labels.push(label);
    }
    let images = Tensor::new(vec![m, 1, size, size], data)?;
    LabeledImageSet::new(images, labels, split, seed, default_class_names(k))
}

pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("script{i:02}")).collect()
}

/// Balanced synthetic train and test sets. Sample `i` has label `i % K`.
pub fn generate_dataset(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    image_size: usize,
    master_seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if num_classes < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {num_classes}")));
    }
    if num_classes > u16::MAX as usize {
        return Err(Error::contract(format!("too many classes: {num_classes}")));
    }
    if image_size == 0 || !image_size.is_multiple_of(16) {
        return Err(Error::contract(format!(
            "image size {image_size} is not a positive multiple of 16"
        )));
    }
    if per_class_train == 0 || per_class_test == 0 {
        return Err(Error::contract("per-class sample counts must be positive"));
    }
    let grammars: Vec<GlyphGrammar> = (0..num_classes).map(|c| GlyphGrammar::new(c, master_seed)).collect();
    let train = render_split(&grammars, per_class_train, image_size, master_seed, Split::Train)?;
    let test = render_split(&grammars, per_class_test, image_size, master_seed, Split::Test)?;
    Ok((train, test))
}
