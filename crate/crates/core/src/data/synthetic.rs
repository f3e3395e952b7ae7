//! Procedural one-shot tracking videos: textured shapes on cluttered backgrounds.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Fraction of the target mask that must stay uncovered for a frame to count as visible.
pub const MIN_VISIBLE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Plus,
    Ring,
    Diamond,
    Hexagon,
    Star,
    Cross,
}

impl ShapeClass {
    pub const TRAIN: [ShapeClass; 5] = [Self::Disk, Self::Square, Self::Triangle, Self::Plus, Self::Ring];
    pub const TEST: [ShapeClass; 4] = [Self::Diamond, Self::Hexagon, Self::Star, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Disk => "disk",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Plus => "plus",
            Self::Ring => "ring",
            Self::Diamond => "diamond",
            Self::Hexagon => "hexagon",
            Self::Star => "star",
            Self::Cross => "cross",
        }
    }

    /// Membership in unit object coordinates `u, v ∈ [-1, 1]`.
    pub fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        let r2 = u * u + v * v;
        match self {
            Self::Disk => r2 <= 1.0,
            Self::Square => true,
            Self::Triangle => u.abs() <= (v + 1.0) / 2.0,
            Self::Plus => u.abs() <= 0.35 || v.abs() <= 0.35,
            Self::Ring => (0.25..=1.0).contains(&r2),
            Self::Diamond => u.abs() + v.abs() <= 1.0,
            Self::Hexagon => 3f64.sqrt() * u.abs() + v.abs() <= 3f64.sqrt(),
            Self::Star => r2.sqrt() <= 0.55 + 0.45 * (5.0 * v.atan2(u)).cos(),
            Self::Cross => (u - v).abs() <= 0.45 || (u + v).abs() <= 0.45,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub num_seqs: usize,
    pub frames_per_seq: usize,
    /// Per-sequence probability of an occlusion event that hides the target for some frames.
    pub absence_prob: f64,
    pub classes: Vec<ShapeClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: SplitSpec,
    pub test: SplitSpec,
    /// Canvas side in pixels.
    pub canvas: usize,
    /// Expected number of small static foreground occluders per sequence.
    pub occluder_density: f64,
    /// Maximum number of moving distractor shapes per sequence.
    pub max_distractors: usize,
    pub clutter: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum target speed in pixels per frame.
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: SplitSpec {
                num_seqs: 120,
                frames_per_seq: 40,
                absence_prob: 0.3,
                classes: ShapeClass::TRAIN.to_vec(),
            },
            test: SplitSpec {
                num_seqs: 30,
                frames_per_seq: 50,
                absence_prob: 0.0,
                classes: ShapeClass::TEST.to_vec(),
            },
            canvas: 128,
            occluder_density: 0.5,
            max_distractors: 2,
            clutter: 24,
            min_size: 14.0,
            max_size: 26.0,
            max_speed: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train.classes.is_empty() || self.test.classes.is_empty() {
            return bad("both splits need at least one shape class".into());
        }
        if let Some(c) = self.train.classes.iter().find(|c| self.test.classes.contains(c)) {
            return bad(format!("shape class {} appears in both splits", c.name()));
        }
        if !(self.min_size > 2.0 && self.min_size <= self.max_size) || self.max_size * 2.0 > self.canvas as f64 {
            return bad(format!("target size range [{}, {}] does not fit the canvas", self.min_size, self.max_size));
        }
        for s in [&self.train, &self.test] {
            if !(0.0..=1.0).contains(&s.absence_prob) || s.frames_per_seq < 2 {
                return bad(format!("invalid split settings {s:?}"));
            }
        }
        if !(self.occluder_density >= 0.0) || !(self.max_speed >= 0.0) {
            return bad("occluder density and speed must be nonnegative".into());
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &SplitSpec {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Stripes { angle: f64, freq: f64 },
    Checker { freq: f64 },
    Spot,
}

#[derive(Clone, Debug)]
struct Sprite {
    class: ShapeClass,
    base: (f64, f64),
    colors: [[f64; 3]; 2],
    texture: Texture,
    /// Per frame: centre and scale.
    track: Vec<(f64, f64, f64)>,
}

impl Sprite {
    fn size(&self, t: usize) -> (f64, f64) {
        let s = self.track[t].2;
        (self.base.0 * s, self.base.1 * s)
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let second = match self.texture {
            Texture::Stripes { angle, freq } => ((u * angle.cos() + v * angle.sin()) * freq).rem_euclid(1.0) < 0.5,
            Texture::Checker { freq } => ((u * freq).floor() + (v * freq).floor()).rem_euclid(2.0) < 1.0,
            Texture::Spot => u * u + v * v < 0.3,
        };
        self.colors[usize::from(second)]
    }

    /// Calls `f(x, y, colour)` for every pixel whose centre lies in the shape at frame `t`.
    fn for_each_pixel(&self, t: usize, canvas: usize, mut f: impl FnMut(usize, usize, [f64; 3])) {
        let (cx, cy, _) = self.track[t];
        let (w, h) = self.size(t);
        let x0 = ((cx - w / 2.0).floor().max(0.0)) as usize;
        let y0 = ((cy - h / 2.0).floor().max(0.0)) as usize;
        let x1 = ((cx + w / 2.0).ceil() as usize).min(canvas);
        let y1 = ((cy + h / 2.0).ceil() as usize).min(canvas);
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f64 + 0.5 - cx) / (w / 2.0);
                let v = (y as f64 + 0.5 - cy) / (h / 2.0);
                if self.class.contains(u, v) {
                    f(x, y, self.color(u, v));
                }
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(20.0..235.0))
}

fn contrasting_pair(rng: &mut ChaCha8Rng) -> [[f64; 3]; 2] {
    loop {
        let a = random_color(rng);
        let b = random_color(rng);
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        if d > 150.0 {
            return [a, b];
        }
    }
}

fn random_sprite(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, classes: &[ShapeClass], frames: usize) -> Sprite {
    let class = classes[rng.random_range(0..classes.len())];
    let w = rng.random_range(spec.min_size..=spec.max_size);
    let aspect: f64 = rng.random_range(0.75..1.33);
    let h = (w * aspect).clamp(spec.min_size, spec.max_size);
    let texture = match rng.random_range(0..3) {
        0 => Texture::Stripes {
            angle: rng.random_range(0.0..std::f64::consts::PI),
            freq: rng.random_range(1.2..2.5),
        },
        1 => Texture::Checker {
            freq: rng.random_range(1.0..2.0),
        },
        _ => Texture::Spot,
    };
    let colors = contrasting_pair(rng);
    let c = spec.canvas as f64;
    let margin = spec.max_size * 1.3 / 2.0 + 1.0;
    let mut pos = (rng.random_range(margin..c - margin), rng.random_range(margin..c - margin));
    let angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let speed = rng.random_range(0.3 * spec.max_speed..=spec.max_speed);
    let mut vel = (speed * angle.cos(), speed * angle.sin());
    let mut scale = 1.0f64;
    let accel = Normal::new(0.0, 0.35 * spec.max_speed.max(1e-9)).expect("finite std");
    let grow = Normal::new(0.0, 0.015).expect("finite std");
    let mut track = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            vel.0 = 0.9 * vel.0 + accel.sample(rng);
            vel.1 = 0.9 * vel.1 + accel.sample(rng);
            let s = vel.0.hypot(vel.1);
            if s > spec.max_speed {
                vel = (vel.0 * spec.max_speed / s, vel.1 * spec.max_speed / s);
            }
            scale = (scale * Distribution::<f64>::sample(&grow, rng).exp()).clamp(0.8, 1.25);
            pos = (pos.0 + vel.0, pos.1 + vel.1);
            let (hw, hh) = (w * scale / 2.0 + 1.0, h * scale / 2.0 + 1.0);
            if pos.0 < hw {
                pos.0 = hw;
                vel.0 = vel.0.abs();
            } else if pos.0 > c - hw {
                pos.0 = c - hw;
                vel.0 = -vel.0.abs();
            }
            if pos.1 < hh {
                pos.1 = hh;
                vel.1 = vel.1.abs();
            } else if pos.1 > c - hh {
                pos.1 = c - hh;
                vel.1 = -vel.1.abs();
            }
        }
        track.push((pos.0, pos.1, scale));
    }
    Sprite {
        class,
        base: (w, h),
        colors,
        texture,
        track,
    }
}

fn background(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<f64> {
    let n = spec.canvas;
    let (a, b) = (random_color(rng), random_color(rng));
    let angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let t = ((x as f64 / n as f64 - 0.5) * ca + (y as f64 / n as f64 - 0.5) * sa + 0.75) / 1.5;
            for c in 0..3 {
                img[(y * n + x) * 3 + c] = a[c] * (1.0 - t) + b[c] * t;
            }
        }
    }
    for _ in 0..spec.clutter {
        let color = random_color(rng);
        let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let (rx, ry) = (rng.random_range(2.0..12.0), rng.random_range(2.0..12.0));
        let ellipse = rng.random_bool(0.5);
        let alpha = rng.random_range(0.3..0.7);
        for y in 0..n {
            for x in 0..n {
                let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        let p = &mut img[(y * n + x) * 3 + c];
                        *p = *p * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }
    img
}

/// Axis-aligned square occluder, drawn on top of everything.
#[derive(Clone, Copy, Debug)]
struct Occluder {
    x0: f64,
    y0: f64,
    side: f64,
    color: [f64; 3],
}

impl Occluder {
    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px >= self.x0 && px < self.x0 + self.side && py >= self.y0 && py < self.y0 + self.side
    }
}

struct Frame {
    image: RgbImage,
    gt: BBox,
    visible_fraction: f64,
}

fn render(
    t: usize,
    spec: &SyntheticSpec,
    bg: &[f64],
    target: &Sprite,
    distractors: &[Sprite],
    occluders: &[Occluder],
    rng: &mut ChaCha8Rng,
) -> Frame {
    let n = spec.canvas;
    let mut img = bg.to_vec();
    let paint = |x: usize, y: usize, c: [f64; 3], img: &mut Vec<f64>| {
        img[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&c);
    };
    for d in distractors {
        d.for_each_pixel(t, n, |x, y, c| paint(x, y, c, &mut img));
    }
    let mut mask = Vec::new();
    target.for_each_pixel(t, n, |x, y, c| {
        paint(x, y, c, &mut img);
        mask.push((x, y));
    });
    let mut covered = 0usize;
    for &(x, y) in &mask {
        if occluders.iter().any(|o| o.covers(x, y)) {
            covered += 1;
        }
    }
    for o in occluders {
        for y in 0..n {
            for x in 0..n {
                if o.covers(x, y) {
                    paint(x, y, o.color, &mut img);
                }
            }
        }
    }
    let noise: Vec<f64> = (0..n * n * 3).map(|_| rng.random_range(-4.0..4.0)).collect();
    let raw: Vec<u8> = img
        .iter()
        .zip(&noise)
        .map(|(v, e)| (v + e).round().clamp(0.0, 255.0) as u8)
        .collect();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in &mask {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    let gt = BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
    Frame {
        image: RgbImage::from_raw(n as u32, n as u32, raw).expect("canvas buffer"),
        gt,
        visible_fraction: if mask.is_empty() { 0.0 } else { 1.0 - covered as f64 / mask.len() as f64 },
    }
}

fn sequence_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

pub fn generate_sequence(spec: &SyntheticSpec, split: Split, index: usize) -> Sequence {
    let split_spec = spec.split(split);
    let mut rng = sequence_rng(spec.seed, split, index);
    let frames = split_spec.frames_per_seq;
    let bg = background(&mut rng, spec);
    let target = random_sprite(&mut rng, spec, &split_spec.classes, frames);
    let nd = rng.random_range(0..=spec.max_distractors);
    let distractors: Vec<Sprite> = (0..nd)
        .map(|_| random_sprite(&mut rng, spec, &split_spec.classes, frames))
        .collect();

    // small static occluders never hide more than about half of the target
    let min_side = (0..frames)
        .map(|t| {
            let (w, h) = target.size(t);
            w.min(h)
        })
        .fold(f64::INFINITY, f64::min);
    let mut occluders = Vec::new();
    let whole = spec.occluder_density.floor() as usize;
    let extra = rng.random_bool(spec.occluder_density.fract());
    for _ in 0..whole + usize::from(extra) {
        let side = rng.random_range(0.15..0.3) * min_side;
        let c = spec.canvas as f64;
        occluders.push(Occluder {
            x0: rng.random_range(0.0..c - side),
            y0: rng.random_range(0.0..c - side),
            side,
            color: random_color(&mut rng),
        });
    }
    // an occlusion event: a large occluder on the target path
    if rng.random_bool(split_spec.absence_prob) {
        let t = rng.random_range(frames / 4..=(3 * frames / 4).max(frames / 4));
        let (cx, cy, _) = target.track[t];
        let (w, h) = target.size(t);
        let side = 1.6 * w.max(h);
        let big = Occluder {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            color: random_color(&mut rng),
        };
        let (fx, fy, _) = target.track[0];
        let (fw, fh) = target.size(0);
        let first = BBox::from_center(fx, fy, fw, fh);
        let clear = BBox::new(big.x0, big.y0, big.side, big.side).intersection(&first) == 0.0;
        if clear {
            occluders.push(big);
        }
    }

    let mut images = Vec::with_capacity(frames);
    let mut boxes = Vec::with_capacity(frames);
    let mut absent = Vec::with_capacity(frames);
    for t in 0..frames {
        let f = render(t, spec, &bg, &target, &distractors, &occluders, &mut rng);
        images.push(Arc::new(f.image));
        boxes.push(f.gt);
        absent.push(f.visible_fraction < MIN_VISIBLE);
    }
    Sequence {
        name: format!("{}_{index:04}", split.name()),
        class_id: target.class.name().to_string(),
        frames: images,
        boxes,
        absent,
    }
}

/// All sequences of one split, in memory.
pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        sequences: (0..spec.split(split).num_seqs)
            .map(|i| generate_sequence(spec, split, i))
            .collect(),
    })
}

/// Writes `root/train` and `root/test` in the directory dataset format.
pub fn gen_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.name());
        for i in 0..spec.split(split).num_seqs {
            let s = generate_sequence(spec, split, i);
            s.save(&dir.join(&s.name))?;
        }
    }
    Ok(())
}
