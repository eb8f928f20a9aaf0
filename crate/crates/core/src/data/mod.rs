//! Seeded synthetic frame pairs with exact segmentation, depth and motion
//! labels.
//!
//! Each scene is a vertical-gradient background plus a handful of flat
//! shapes at constant depth. Shape colour is fixed per class and scaled by
//! a brightness that falls with depth, so both class and depth are
//! recoverable from appearance. Moving objects are shifted by an integer
//! displacement between the previous and current frame. Objects are
//! painted far-to-near, so the nearest object wins every pixel.

mod io;

pub use io::{load_dataset, write_dataset, WriteOptions, INDEX_FILE};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassMap, DepthMap};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Background plus shape classes.
    pub num_classes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub moving_fraction: f64,
    pub max_displacement: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 96,
            min_objects: 4,
            max_objects: 7,
            num_classes: 4,
            min_size: 7,
            max_size: 16,
            depth_min: 1.0,
            depth_max: 100.0,
            moving_fraction: 0.5,
            max_displacement: 4,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(8)
            || !self.width.is_multiple_of(8)
        {
            return bad(format!(
                "resolution {}x{} must be positive multiples of 8",
                self.height, self.width
            ));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..={MAX_CLASSES}"));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad("object sizes must satisfy 1 <= min_size <= max_size".into());
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min && self.depth_max.is_finite())
        {
            return bad("depth range must satisfy 0 < depth_min < depth_max".into());
        }
        if !(0.0..=1.0).contains(&self.moving_fraction) {
            return bad("moving_fraction must be in [0, 1]".into());
        }
        if self.moving_fraction > 0.0 && self.max_displacement == 0 {
            return bad("max_displacement must be >= 1 when objects move".into());
        }
        Ok(())
    }

    /// Objects are placed in the nearer half of the depth range; the
    /// background occupies the farther half.
    fn object_depth_max(&self) -> f64 {
        0.5 * (self.depth_min + self.depth_max)
    }

    fn brightness(&self, depth: f64) -> f64 {
        1.0 - 0.6 * (depth - self.depth_min) / (self.depth_max - self.depth_min)
    }

    fn background_depth(&self, row: usize) -> f64 {
        let t = row as f64 / (self.height.max(2) - 1) as f64;
        self.depth_max - t * (self.depth_max - self.object_depth_max())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Disk,
    Diamond,
}

impl Shape {
    /// Shape used for segmentation class `class` (>= 1).
    pub fn for_class(class: u8) -> Shape {
        match (class - 1) % 3 {
            0 => Shape::Rectangle,
            1 => Shape::Disk,
            _ => Shape::Diamond,
        }
    }
}

/// One object in the current frame; its previous-frame position is
/// `(cy - dy, cx - dx)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u8,
    pub cy: i64,
    pub cx: i64,
    pub half_h: i64,
    pub half_w: i64,
    pub depth: f64,
    pub dy: i64,
    pub dx: i64,
}

impl SceneObject {
    pub fn is_moving(&self) -> bool {
        self.dy != 0 || self.dx != 0
    }

    /// Whether pixel `(y, x)` is covered when the object sits at
    /// `(cy, cx)`.
    pub fn covers_at(&self, cy: i64, cx: i64, y: i64, x: i64) -> bool {
        let (ry, rx) = (y - cy, x - cx);
        match Shape::for_class(self.class) {
            Shape::Rectangle => ry.abs() <= self.half_h && rx.abs() <= self.half_w,
            Shape::Disk => {
                let r = self.half_h.min(self.half_w);
                ry * ry + rx * rx <= r * r
            }
            Shape::Diamond => {
                let r = self.half_h.min(self.half_w);
                ry.abs() + rx.abs() <= r
            }
        }
    }

    pub fn covers_curr(&self, y: i64, x: i64) -> bool {
        self.covers_at(self.cy, self.cx, y, x)
    }

    pub fn covers_prev(&self, y: i64, x: i64) -> bool {
        self.covers_at(self.cy - self.dy, self.cx - self.dx, y, x)
    }

    fn bbox_at(&self, cy: i64, cx: i64) -> [i64; 4] {
        [
            cy - self.half_h,
            cx - self.half_w,
            cy + self.half_h,
            cx + self.half_w,
        ]
    }
}

/// Object layout for one frame pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// Two consecutive frames with labels aligned to the current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePairSample {
    /// `[3,H,W]`
    pub frame_prev: Tensor,
    /// `[3,H,W]`
    pub frame_curr: Tensor,
    /// `[1,H,W]`, background is class 0
    pub seg: ClassMap,
    /// `[1,H,W]`
    pub depth: DepthMap,
    /// `[1,H,W]`, 1 on visible pixels of displaced objects
    pub motion: ClassMap,
}

/// A set of samples sharing resolution and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<FramePairSample>,
}

/// RGB base colour for a class; class 0 is neutral grey.
pub fn class_color(class: u8, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    match class {
        1 => [1.0, 0.15, 0.15],
        2 => [0.15, 1.0, 0.15],
        3 => [0.15, 0.15, 1.0],
        _ => {
            // evenly spaced hues for the remaining classes
            let hue = (class - 1) as f64 / (num_classes - 1) as f64;
            let h6 = hue * 6.0;
            let f = h6 - h6.floor();
            let (r, g, b) = match h6.floor() as u32 % 6 {
                0 => (1.0, f, 0.0),
                1 => (1.0 - f, 1.0, 0.0),
                2 => (0.0, 1.0, f),
                3 => (0.0, 1.0 - f, 1.0),
                4 => (f, 0.0, 1.0),
                _ => (1.0, 0.0, 1.0 - f),
            };
            [0.15 + 0.85 * r, 0.15 + 0.85 * g, 0.15 + 0.85 * b]
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn bbox_overlap(a: [i64; 4], b: [i64; 4]) -> i64 {
    let h = (a[2].min(b[2]) - a[0].max(b[0]) + 1).max(0);
    let w = (a[3].min(b[3]) - a[1].max(b[1]) + 1).max(0);
    h * w
}

fn bbox_area(b: [i64; 4]) -> i64 {
    (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
}

/// Samples an object layout. Each object is retried until it fits inside
/// the frame at both positions and covers at most half of any earlier
/// object's bounding box.
pub fn sample_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<Scene> {
    let (h, w) = (spec.height as i64, spec.width as i64);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..spec.max_retries {
            let class = rng.gen_range(1..spec.num_classes) as u8;
            let size = rng.gen_range(spec.min_size..=spec.max_size) as i64;
            let (half_h, half_w) = match Shape::for_class(class) {
                Shape::Rectangle => (size, rng.gen_range(spec.min_size..=spec.max_size) as i64),
                _ => (size, size),
            };
            let depth = rng.gen_range(spec.depth_min..spec.object_depth_max());
            let moving = rng.gen_bool(spec.moving_fraction);
            let (dy, dx) = if moving {
                let m = spec.max_displacement as i64;
                loop {
                    let dy = rng.gen_range(-m..=m);
                    let dx = rng.gen_range(-m..=m);
                    if dy != 0 || dx != 0 {
                        break (dy, dx);
                    }
                }
            } else {
                (0, 0)
            };
            let cy = rng.gen_range(0..h);
            let cx = rng.gen_range(0..w);
            let obj = SceneObject {
                class,
                cy,
                cx,
                half_h,
                half_w,
                depth,
                dy,
                dx,
            };
            let inside = |b: [i64; 4]| b[0] >= 0 && b[1] >= 0 && b[2] < h && b[3] < w;
            let curr = obj.bbox_at(cy, cx);
            if !inside(curr) || !inside(obj.bbox_at(cy - dy, cx - dx)) {
                continue;
            }
            let crowded = objects.iter().any(|o| {
                let other = o.bbox_at(o.cy, o.cx);
                2 * bbox_overlap(curr, other) > bbox_area(curr).min(bbox_area(other))
            });
            if crowded {
                continue;
            }
            placed = Some(obj);
            break;
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::Config(format!(
                    "could not place object {} of {count} after {} retries; scene is overcrowded",
                    objects.len() + 1,
                    spec.max_retries
                )))
            }
        }
    }
    Ok(Scene { objects })
}

/// Renders both frames and all labels for a scene.
pub fn render_scene(spec: &SceneSpec, scene: &Scene) -> Result<FramePairSample> {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    // far to near, so nearer objects overwrite
    let mut order: Vec<&SceneObject> = scene.objects.iter().collect();
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut prev = vec![0.0; 3 * plane];
    let mut curr = vec![0.0; 3 * plane];
    let mut seg = vec![0u8; plane];
    let mut depth = vec![0.0; plane];
    let mut motion = vec![0u8; plane];
    let bg = class_color(0, spec.num_classes);
    for y in 0..h {
        let d = spec.background_depth(y);
        let b = spec.brightness(d);
        for x in 0..w {
            let p = y * w + x;
            depth[p] = d;
            for ch in 0..3 {
                prev[ch * plane + p] = bg[ch] * b;
                curr[ch * plane + p] = bg[ch] * b;
            }
        }
    }
    for obj in order {
        let color = class_color(obj.class, spec.num_classes);
        let b = spec.brightness(obj.depth);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (yi, xi) = (y as i64, x as i64);
                if obj.covers_prev(yi, xi) {
                    for ch in 0..3 {
                        prev[ch * plane + p] = color[ch] * b;
                    }
                }
                if obj.covers_curr(yi, xi) {
                    for ch in 0..3 {
                        curr[ch * plane + p] = color[ch] * b;
                    }
                    seg[p] = obj.class;
                    depth[p] = obj.depth;
                    motion[p] = obj.is_moving() as u8;
                }
            }
        }
    }
    Ok(FramePairSample {
        frame_prev: Tensor::new(vec![3, h, w], prev)?,
        frame_curr: Tensor::new(vec![3, h, w], curr)?,
        seg: ClassMap::classes([1, h, w], seg, spec.num_classes)?,
        depth: DepthMap::depth([1, h, w], depth)?,
        motion: ClassMap::classes([1, h, w], motion, 2)?,
    })
}

/// Object layout of sample `index`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    sample_scene(spec, &mut sample_rng(spec.seed, index))
}

/// Generates sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &SceneSpec, index: usize) -> Result<FramePairSample> {
    render_scene(spec, &generate_scene(spec, index)?)
}

/// Generates `count` samples. Sample `i` depends only on `(spec, i)`.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let samples = (0..count)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: spec.height,
        width: spec.width,
        num_classes: spec.num_classes,
        samples,
    })
}

/// Deterministic shuffled split into `(train, val)`.
///
/// The train side receives `round(train_fraction * n)` items.
pub fn split<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = items.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split of {n} items at fraction {train_fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}
