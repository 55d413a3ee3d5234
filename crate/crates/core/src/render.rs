//! Rasterization of the geometric composition archetypes used by the
//! synthetic generators. Coordinates are normalized to `[0, 1]` on both axes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::composition_data::CompositionClass;
use crate::error::Result;
use crate::preprocessing::GrayscaleImage;

#[derive(Debug, Clone)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    /// Normalized translation applied to every shape.
    pub offset: (f64, f64),
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
            offset: (0.0, 0.0),
        }
    }

    /// Uniform noise of amplitude `amp` around `base`.
    pub fn noise_background(&mut self, base: f32, amp: f32, rng: &mut ChaCha8Rng) {
        for v in &mut self.data {
            *v = base + rng.gen_range(-amp..=amp);
        }
    }

    /// Horizontal-to-vertical intensity ramp added to the current contents.
    pub fn add_gradient(&mut self, dx: f32, dy: f32) {
        for y in 0..self.height {
            for x in 0..self.width {
                let u = (x as f32 + 0.5) / self.width as f32 - 0.5;
                let v = (y as f32 + 0.5) / self.height as f32 - 0.5;
                self.data[y * self.width + x] += dx * u + dy * v;
            }
        }
    }

    pub fn add_noise(&mut self, amp: f32, rng: &mut ChaCha8Rng) {
        for v in &mut self.data {
            *v += rng.gen_range(-amp..=amp);
        }
    }

    /// Paints `value` wherever `inside(x, y)` holds, testing pixel centers
    /// within the normalized bounding box `[x0, x1] x [y0, y1]`.
    fn fill_where(&mut self, bbox: (f64, f64, f64, f64), value: f32, inside: impl Fn(f64, f64) -> bool) {
        let (ox, oy) = self.offset;
        let (x0, y0, x1, y1) = (bbox.0 + ox, bbox.1 + oy, bbox.2 + ox, bbox.3 + oy);
        let (w, h) = (self.width as f64, self.height as f64);
        let px0 = ((x0 * w).floor().max(0.0)) as usize;
        let py0 = ((y0 * h).floor().max(0.0)) as usize;
        let px1 = ((x1 * w).ceil().min(w)).max(0.0) as usize;
        let py1 = ((y1 * h).ceil().min(h)).max(0.0) as usize;
        for py in py0..py1 {
            let y = (py as f64 + 0.5) / h - oy;
            for px in px0..px1 {
                let x = (px as f64 + 0.5) / w - ox;
                if inside(x, y) {
                    self.data[py * self.width + px] = value;
                }
            }
        }
    }

    pub fn disc(&mut self, cx: f64, cy: f64, r: f64, value: f32) {
        self.fill_where((cx - r, cy - r, cx + r, cy + r), value, |x, y| {
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        });
    }

    pub fn annulus(&mut self, cx: f64, cy: f64, r: f64, thickness: f64, value: f32) {
        let (ri, ro) = (r - thickness / 2.0, r + thickness / 2.0);
        self.fill_where((cx - ro, cy - ro, cx + ro, cy + ro), value, |x, y| {
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            d2 <= ro * ro && d2 >= ri * ri
        });
    }

    pub fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: f32) {
        self.fill_where((x0, y0, x1, y1), value, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1);
    }

    /// Thick straight segment (distance to the segment at most `thickness / 2`).
    pub fn segment(&mut self, a: (f64, f64), b: (f64, f64), thickness: f64, value: f32) {
        let t = thickness / 2.0;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let bbox = (a.0.min(b.0) - t, a.1.min(b.1) - t, a.0.max(b.0) + t, a.1.max(b.1) + t);
        self.fill_where(bbox, value, |x, y| {
            let s = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + s * dx, a.1 + s * dy);
            (x - qx).powi(2) + (y - qy).powi(2) <= t * t
        });
    }

    pub fn triangle(&mut self, p: [(f64, f64); 3], value: f32) {
        let xs = [p[0].0, p[1].0, p[2].0];
        let ys = [p[0].1, p[1].1, p[2].1];
        let bbox = (
            xs.iter().copied().fold(f64::INFINITY, f64::min),
            ys.iter().copied().fold(f64::INFINITY, f64::min),
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let edge = |a: (f64, f64), b: (f64, f64), x: f64, y: f64| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
        self.fill_where(bbox, value, |x, y| {
            let e0 = edge(p[0], p[1], x, y);
            let e1 = edge(p[1], p[2], x, y);
            let e2 = edge(p[2], p[0], x, y);
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        });
    }

    pub fn into_image(self, source_id: impl Into<String>) -> Result<GrayscaleImage> {
        let data = self.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        GrayscaleImage::new(self.width, self.height, data, source_id)
    }
}

/// One randomly parameterized instance of a composition class.
#[derive(Debug, Clone, PartialEq)]
pub enum Archetype {
    RuleOfThirds { cx: f64, cy: f64, r: f64 },
    Center { cx: f64, cy: f64, r: f64 },
    Horizontal { y: f64, thickness: f64 },
    Symmetric { dx: f64, cy: f64, r: f64 },
    Diagonal { rising: bool, thickness: f64 },
    Curved { cx: f64, cy: f64, r: f64, thickness: f64 },
    Vertical { x: f64, thickness: f64 },
    Triangle { apex: (f64, f64), left: (f64, f64), right: (f64, f64) },
    RepeatedPattern { phase: (f64, f64), spacing: f64, r: f64 },
}

impl Archetype {
    pub fn sample(class: CompositionClass, rng: &mut ChaCha8Rng) -> Self {
        let j = |rng: &mut ChaCha8Rng, a: f64| rng.gen_range(-a..=a);
        match class {
            CompositionClass::RuleOfThirds => {
                let cx = if rng.gen_bool(0.5) { 1.0 / 3.0 } else { 2.0 / 3.0 };
                let cy = if rng.gen_bool(0.5) { 1.0 / 3.0 } else { 2.0 / 3.0 };
                Archetype::RuleOfThirds { cx: cx + j(rng, 0.02), cy: cy + j(rng, 0.02), r: rng.gen_range(0.06..0.08) }
            }
            CompositionClass::Center => Archetype::Center {
                cx: 0.5 + j(rng, 0.02),
                cy: 0.5 + j(rng, 0.02),
                r: rng.gen_range(0.17..0.21),
            },
            CompositionClass::Horizontal => Archetype::Horizontal {
                y: rng.gen_range(0.4..0.6),
                thickness: rng.gen_range(0.05..0.07),
            },
            CompositionClass::Symmetric => Archetype::Symmetric {
                dx: rng.gen_range(0.2..0.26),
                cy: rng.gen_range(0.42..0.58),
                r: rng.gen_range(0.09..0.11),
            },
            CompositionClass::Diagonal => Archetype::Diagonal {
                rising: rng.gen_bool(0.5),
                thickness: rng.gen_range(0.05..0.07),
            },
            CompositionClass::Curved => Archetype::Curved {
                cx: 0.5 + j(rng, 0.03),
                cy: 0.5 + j(rng, 0.03),
                r: rng.gen_range(0.28..0.34),
                thickness: rng.gen_range(0.04..0.05),
            },
            CompositionClass::Vertical => Archetype::Vertical {
                x: rng.gen_range(0.4..0.6),
                thickness: rng.gen_range(0.05..0.07),
            },
            CompositionClass::Triangle => Archetype::Triangle {
                apex: (0.5 + j(rng, 0.05), rng.gen_range(0.15..0.25)),
                left: (rng.gen_range(0.12..0.22), rng.gen_range(0.78..0.85)),
                right: (rng.gen_range(0.78..0.88), rng.gen_range(0.78..0.85)),
            },
            CompositionClass::RepeatedPattern => Archetype::RepeatedPattern {
                phase: (rng.gen_range(0.0..0.06), rng.gen_range(0.0..0.06)),
                spacing: rng.gen_range(0.11..0.13),
                r: rng.gen_range(0.022..0.028),
            },
        }
    }

    pub fn class(&self) -> CompositionClass {
        match self {
            Archetype::RuleOfThirds { .. } => CompositionClass::RuleOfThirds,
            Archetype::Center { .. } => CompositionClass::Center,
            Archetype::Horizontal { .. } => CompositionClass::Horizontal,
            Archetype::Symmetric { .. } => CompositionClass::Symmetric,
            Archetype::Diagonal { .. } => CompositionClass::Diagonal,
            Archetype::Curved { .. } => CompositionClass::Curved,
            Archetype::Vertical { .. } => CompositionClass::Vertical,
            Archetype::Triangle { .. } => CompositionClass::Triangle,
            Archetype::RepeatedPattern { .. } => CompositionClass::RepeatedPattern,
        }
    }

    pub fn draw(&self, canvas: &mut Canvas, value: f32) {
        match *self {
            Archetype::RuleOfThirds { cx, cy, r } | Archetype::Center { cx, cy, r } => {
                canvas.disc(cx, cy, r, value)
            }
            Archetype::Horizontal { y, thickness } => {
                canvas.rect(-0.1, y - thickness / 2.0, 1.1, y + thickness / 2.0, value)
            }
            Archetype::Vertical { x, thickness } => {
                canvas.rect(x - thickness / 2.0, -0.1, x + thickness / 2.0, 1.1, value)
            }
            Archetype::Symmetric { dx, cy, r } => {
                canvas.disc(0.5 - dx, cy, r, value);
                canvas.disc(0.5 + dx, cy, r, value);
            }
            Archetype::Diagonal { rising, thickness } => {
                let (a, b) = if rising { ((0.0, 1.0), (1.0, 0.0)) } else { ((0.0, 0.0), (1.0, 1.0)) };
                canvas.segment(a, b, thickness, value);
            }
            Archetype::Curved { cx, cy, r, thickness } => canvas.annulus(cx, cy, r, thickness, value),
            Archetype::Triangle { apex, left, right } => canvas.triangle([apex, left, right], value),
            Archetype::RepeatedPattern { phase, spacing, r } => {
                let mut y = spacing / 2.0 + phase.1;
                while y < 1.0 {
                    let mut x = spacing / 2.0 + phase.0;
                    while x < 1.0 {
                        canvas.disc(x, y, r, value);
                        x += spacing;
                    }
                    y += spacing;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_area_close_to_analytic() {
        let mut c = Canvas::new(256, 256, 0.0);
        c.disc(0.5, 0.5, 0.25, 1.0);
        let area = c.data.iter().filter(|v| **v == 1.0).count() as f64 / (256.0 * 256.0);
        assert!((area - std::f64::consts::PI * 0.0625).abs() < 0.005);
    }

    #[test]
    fn offset_translates_shapes() {
        let mut a = Canvas::new(64, 64, 0.0);
        a.rect(0.25, 0.25, 0.5, 0.5, 1.0);
        let mut b = Canvas::new(64, 64, 0.0);
        b.offset = (4.0 / 64.0, 0.0);
        b.rect(0.25, 0.25, 0.5, 0.5, 1.0);
        for y in 0..64 {
            for x in 0..60 {
                assert_eq!(a.data[y * 64 + x], b.data[y * 64 + x + 4]);
            }
        }
    }

    #[test]
    fn diagonal_touches_both_corners() {
        let mut c = Canvas::new(32, 32, 0.0);
        Archetype::Diagonal { rising: false, thickness: 0.06 }.draw(&mut c, 1.0);
        assert_eq!(c.data[0], 1.0);
        assert_eq!(c.data[32 * 32 - 1], 1.0);
        assert_eq!(c.data[31], 0.0);
    }
}
