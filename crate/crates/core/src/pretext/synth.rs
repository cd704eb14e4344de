use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DetectionSample, ImageRaster, LabeledBox};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCxCyWh};

pub const NUM_SHAPE_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle = 0,
    Square = 1,
    Triangle = 2,
}

impl ShapeKind {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ShapeKind::Circle),
            1 => Some(ShapeKind::Square),
            2 => Some(ShapeKind::Triangle),
            _ => None,
        }
    }

    fn covers(self, u: f64, v: f64) -> bool {
        // (u, v) in [0,1]² relative to the shape's bounding square
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Triangle => (u - 0.5).abs() * 2.0 <= v,
        }
    }
}

/// Scene generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape side as a fraction of the shorter canvas side.
    pub min_size: f64,
    pub max_size: f64,
    /// Uniform per-pixel noise amplitude, in 8-bit levels.
    pub noise: f64,
    /// Largest IoU allowed between two shapes of one scene.
    pub max_overlap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            min_shapes: 1,
            max_shapes: 6,
            min_size: 0.15,
            max_size: 0.45,
            noise: 6.0,
            max_overlap: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("scene canvas must be at least 16×16".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("need 1 <= min_shapes <= max_shapes".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::Config("need 0 < min_size <= max_size <= 1".into()));
        }
        Ok(())
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

/// Renders a scene of coloured circles, squares and triangles over a
/// gradient background. Deterministic in `seed`.
pub fn synth_image(seed: u64, spec: &SceneSpec) -> Result<DetectionSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);

    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let proj = |x: f64, y: f64| x * dx + y * dy;
    let corners = [proj(0.0, 0.0), proj(w as f64, 0.0), proj(0.0, h as f64), proj(w as f64, h as f64)];
    let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut canvas = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let t = (proj(x as f64 + 0.5, y as f64 + 0.5) - lo) / (hi - lo);
            canvas[y * w + x] = lerp(c0, c1, t);
        }
    }

    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let short = w.min(h) as f64;
    let mut objects: Vec<LabeledBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::from_index(rng.gen_range(0..NUM_SHAPE_CLASSES)).expect("in range");
        let mut placed = None;
        for _ in 0..50 {
            let side = ((rng.gen_range(spec.min_size..=spec.max_size) * short).round() as usize).clamp(3, w.min(h));
            let x = rng.gen_range(0..=w - side);
            let y = rng.gen_range(0..=h - side);
            let b = BoxCxCyWh::new(
                (x as f64 + side as f64 / 2.0) / w as f64,
                (y as f64 + side as f64 / 2.0) / h as f64,
                side as f64 / w as f64,
                side as f64 / h as f64,
            );
            let clear = objects.iter().all(|o| iou(&o.bbox.to_xyxy(), &b.to_xyxy()) <= spec.max_overlap);
            if clear {
                placed = Some((x, y, side, b));
                break;
            }
        }
        let Some((x, y, side, bbox)) = placed else { continue };

        let bg = canvas[(y + side / 2) * w + x + side / 2];
        let mut color = random_color(&mut rng);
        for _ in 0..20 {
            let dist: f64 = color.iter().zip(bg).map(|(a, b)| (a - b).abs()).sum();
            if dist > 150.0 {
                break;
            }
            color = random_color(&mut rng);
        }
        for py in y..y + side {
            for px in x..x + side {
                let u = (px - x) as f64 / side as f64 + 0.5 / side as f64;
                let v = (py - y) as f64 / side as f64 + 0.5 / side as f64;
                if kind.covers(u, v) {
                    canvas[py * w + px] = color;
                }
            }
        }
        objects.push(LabeledBox { class: kind as usize, bbox });
    }

    let mut data = Vec::with_capacity(w * h * 3);
    for px in &canvas {
        for &c in px {
            let n = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
            data.push((c + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(DetectionSample { image: ImageRaster::new(w, h, data)?, objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::default();
        assert_eq!(synth_image(42, &spec).unwrap(), synth_image(42, &spec).unwrap());
        assert_ne!(synth_image(42, &spec).unwrap().image, synth_image(43, &spec).unwrap().image);
    }

    #[test]
    fn full_canvas_square() {
        let spec = SceneSpec { min_shapes: 1, max_shapes: 1, min_size: 1.0, max_size: 1.0, ..SceneSpec::default() };
        for seed in 0..20 {
            let s = synth_image(seed, &spec).unwrap();
            assert_eq!(s.objects.len(), 1);
            let b = s.objects[0].bbox;
            assert_eq!((b.cx, b.cy, b.w, b.h), (0.5, 0.5, 1.0, 1.0));
        }
    }

    #[test]
    fn boxes_valid_over_many_scenes() {
        let spec = SceneSpec::default();
        for seed in 0..1000 {
            let s = synth_image(seed, &spec).unwrap();
            assert!(!s.objects.is_empty());
            for o in &s.objects {
                assert!(o.class < NUM_SHAPE_CLASSES);
                assert!(o.bbox.is_valid_target(), "{:?}", o.bbox);
                let xy = o.bbox.to_xyxy();
                assert!(xy.x0 >= 0.0 && xy.y0 >= 0.0 && xy.x1 <= 1.0 && xy.y1 <= 1.0);
                assert!(xy.area() > 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let tiny = SceneSpec { width: 8, ..SceneSpec::default() };
        assert!(synth_image(0, &tiny).is_err());
        let none = SceneSpec { min_shapes: 0, ..SceneSpec::default() };
        assert!(synth_image(0, &none).is_err());
    }
}
