//! Seeded synthetic scenes: humans and objects on a gray canvas, labeled
//! with interactions that follow from geometry alone.
//!
//! | id | interaction | rule |
//! |----|-------------|------|
//! | 0  | hold        | `IoU(h, o) > 0.05` |
//! | 1  | ride        | hold, and the human center is above the object center |
//! | 2  | next_to     | center distance `< 0.25` and `IoU ≤ 0.05` |
//! | 3  | look_at     | object center inside the 90° cone along the human's facing |
//! | 4  | (none)      | never labeled |

mod io;
mod render;

pub use io::{load_dataset, pixels_path, save_dataset};
pub use render::{render, class_color, BACKGROUND, BODY, HEAD};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matchloss::{iou, BoxCxCyWh, HoiInstance};
use crate::rng::stream;
use crate::{Error, Result, Tensor};

pub const NUM_OBJ: usize = 4;
pub const NUM_INT: usize = 5;
pub const INTERACTIONS: [&str; NUM_INT] = ["hold", "ride", "next_to", "look_at", "none"];
pub const OBJECTS: [&str; NUM_OBJ] = ["block", "frame", "ball", "cone"];

pub const TOUCH_IOU: f64 = 0.05;
pub const NEAR_DIST: f64 = 0.25;
/// At most this many interactions per scene, so a scene always fits in
/// the query budget.
pub const MAX_GTS: usize = 6;
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facing {
    Left,
    Right,
    Up,
    Down,
}

impl Facing {
    pub const ALL: [Facing; 4] = [Facing::Left, Facing::Right, Facing::Up, Facing::Down];

    /// Unit step in image coordinates (y grows downward).
    pub fn step(self) -> (i64, i64) {
        match self {
            Facing::Left => (-1, 0),
            Facing::Right => (1, 0),
            Facing::Up => (0, -1),
            Facing::Down => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Human {
    pub bbox: BoxCxCyWh,
    pub facing: Facing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BoxCxCyWh,
    pub cls: usize,
}

/// Ground truth by reference into the entity lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtRef {
    pub h_idx: usize,
    pub o_idx: usize,
    pub obj_class: usize,
    pub int_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// `(height, width)` in pixels.
    pub canvas: [usize; 2],
    pub humans: Vec<Human>,
    pub objects: Vec<Object>,
    pub gts: Vec<GtRef>,
}

impl SceneSpec {
    pub fn instances(&self) -> Vec<HoiInstance> {
        self.gts
            .iter()
            .map(|g| HoiInstance {
                human_box: self.humans[g.h_idx].bbox,
                object_box: self.objects[g.o_idx].bbox,
                obj_class: g.obj_class,
                int_class: g.int_class,
            })
            .collect()
    }
}

/// A scene and its rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub image: Tensor,
}

/// Active interaction ids for a human/object pair.
pub fn interactions(h: &Human, o: &Object) -> Vec<usize> {
    let overlap = iou(&h.bbox, &o.bbox).unwrap_or(0.0);
    let (dx, dy) = (o.bbox[0] - h.bbox[0], o.bbox[1] - h.bbox[1]);
    let mut out = Vec::new();
    if overlap > TOUCH_IOU {
        out.push(0);
        if h.bbox[1] < o.bbox[1] {
            out.push(1);
        }
    } else if (dx * dx + dy * dy).sqrt() < NEAR_DIST {
        out.push(2);
    }
    let looking = match h.facing {
        Facing::Right => dx > 0.0 && dy.abs() <= dx,
        Facing::Left => dx < 0.0 && dy.abs() <= -dx,
        Facing::Down => dy > 0.0 && dx.abs() <= dy,
        Facing::Up => dy < 0.0 && dx.abs() <= -dy,
    };
    if looking {
        out.push(3);
    }
    out
}

fn label(humans: &[Human], objects: &[Object]) -> Vec<GtRef> {
    let mut gts = Vec::new();
    for (hi, h) in humans.iter().enumerate() {
        for (oi, o) in objects.iter().enumerate() {
            for t in interactions(h, o) {
                gts.push(GtRef {
                    h_idx: hi,
                    o_idx: oi,
                    obj_class: o.cls,
                    int_class: t,
                });
            }
        }
    }
    gts
}

/// Pixel rectangle `(x0, y0, w, h)` to a normalized box.
fn normalized(canvas: [usize; 2], x0: i64, y0: i64, w: i64, h: i64) -> BoxCxCyWh {
    let (ch, cw) = (canvas[0] as f64, canvas[1] as f64);
    [
        (x0 as f64 + w as f64 / 2.0) / cw,
        (y0 as f64 + h as f64 / 2.0) / ch,
        w as f64 / cw,
        h as f64 / ch,
    ]
}

/// Pixel rectangle of a normalized box (exact for boxes produced here).
pub fn pixel_rect(canvas: [usize; 2], b: &BoxCxCyWh) -> (i64, i64, i64, i64) {
    let (ch, cw) = (canvas[0] as f64, canvas[1] as f64);
    let w = (b[2] * cw).round() as i64;
    let h = (b[3] * ch).round() as i64;
    let x0 = ((b[0] - b[2] / 2.0) * cw).round() as i64;
    let y0 = ((b[1] - b[3] / 2.0) * ch).round() as i64;
    (x0, y0, w, h)
}

fn contains(outer: &BoxCxCyWh, inner: &BoxCxCyWh) -> bool {
    let eps = 1e-12;
    inner[0] - inner[2] / 2.0 >= outer[0] - outer[2] / 2.0 - eps
        && inner[0] + inner[2] / 2.0 <= outer[0] + outer[2] / 2.0 + eps
        && inner[1] - inner[3] / 2.0 >= outer[1] - outer[3] / 2.0 - eps
        && inner[1] + inner[3] / 2.0 <= outer[1] + outer[3] / 2.0 + eps
}

fn sample_rect(rng: &mut impl Rng, canvas: [usize; 2], w: i64, h: i64, center: Option<(f64, f64)>) -> (i64, i64) {
    let (ch, cw) = (canvas[0] as i64, canvas[1] as i64);
    match center {
        Some((cx, cy)) => {
            let x0 = (cx - w as f64 / 2.0).round() as i64;
            let y0 = (cy - h as f64 / 2.0).round() as i64;
            (x0.clamp(0, cw - w), y0.clamp(0, ch - h))
        }
        None => (rng.gen_range(0..=cw - w), rng.gen_range(0..=ch - h)),
    }
}

fn attempt(rng: &mut impl Rng, canvas: [usize; 2]) -> (Vec<Human>, Vec<Object>) {
    let (ch, cw) = (canvas[0] as f64, canvas[1] as f64);
    let px = |r: &mut dyn rand::RngCore, lo: f64, hi: f64, side: f64| {
        ((r.gen_range(lo..hi) * side).round() as i64).max(2)
    };
    let nh = rng.gen_range(1..=2);
    let no = rng.gen_range(1..=3);
    let mut humans = Vec::with_capacity(nh);
    let mut hrects = Vec::with_capacity(nh);
    for _ in 0..nh {
        let w = px(rng, 0.14, 0.24, cw);
        let h = px(rng, 0.3, 0.45, ch);
        let (x0, y0) = sample_rect(rng, canvas, w, h, None);
        hrects.push((x0, y0, w, h));
        humans.push(Human {
            bbox: normalized(canvas, x0, y0, w, h),
            facing: Facing::ALL[rng.gen_range(0..4)],
        });
    }
    let mut objects = Vec::with_capacity(no);
    for _ in 0..no {
        let cls = rng.gen_range(0..NUM_OBJ);
        let w = px(rng, 0.12, 0.22, cw);
        let h = px(rng, 0.12, 0.22, ch);
        let center = if rng.gen_bool(0.5) {
            let (x0, y0, hw, hh) = hrects[rng.gen_range(0..nh)];
            let cx = x0 as f64 + hw as f64 / 2.0 + rng.gen_range(-0.2..0.2) * cw;
            let cy = y0 as f64 + hh as f64 / 2.0 + rng.gen_range(-0.2..0.2) * ch;
            Some((cx, cy))
        } else {
            None
        };
        let (x0, y0) = sample_rect(rng, canvas, w, h, center);
        objects.push(Object {
            bbox: normalized(canvas, x0, y0, w, h),
            cls,
        });
    }
    (humans, objects)
}

/// Samples a scene on an `H × W` canvas, retrying until no human and
/// object contain one another and there are between 1 and [`MAX_GTS`]
/// interactions.
pub fn generate_scene(seed: u64, canvas: [usize; 2]) -> Result<SceneSpec> {
    if canvas[0] < 16 || canvas[1] < 16 {
        return Err(Error::Config(format!("canvas {canvas:?} is smaller than 16×16")));
    }
    let mut rng = stream(seed, 0);
    for _ in 0..MAX_ATTEMPTS {
        let (humans, objects) = attempt(&mut rng, canvas);
        let nested = humans
            .iter()
            .any(|h| objects.iter().any(|o| contains(&h.bbox, &o.bbox) || contains(&o.bbox, &h.bbox)));
        if nested {
            continue;
        }
        let gts = label(&humans, &objects);
        if gts.is_empty() || gts.len() > MAX_GTS {
            continue;
        }
        return Ok(SceneSpec {
            seed,
            canvas,
            humans,
            objects,
            gts,
        });
    }
    Err(Error::SamplingExhausted(MAX_ATTEMPTS))
}

/// Seed of scene `index` in the dataset drawn from `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    stream(seed, 1u64 << 32 | index).gen()
}

pub fn generate_dataset(seed: u64, count: usize, canvas: [usize; 2]) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|k| {
            let spec = generate_scene(scene_seed(seed, k), canvas)?;
            let image = render(&spec);
            Ok(Scene { spec, image })
        })
        .collect()
}

/// Number of scenes in which each interaction id occurs.
pub fn interaction_census(specs: &[&SceneSpec]) -> [usize; NUM_INT] {
    let mut out = [0; NUM_INT];
    for s in specs {
        let mut seen = [false; NUM_INT];
        for g in &s.gts {
            seen[g.int_class] = true;
        }
        for (o, s) in out.iter_mut().zip(seen) {
            *o += s as usize;
        }
    }
    out
}
