use super::{pixel_rect, Facing, SceneSpec};
use crate::Tensor;

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
pub const HEAD: [f64; 3] = [1.0, 0.85, 0.7];
pub const BODY: [f64; 3] = [0.15, 0.25, 0.85];
const TICK: [f64; 3] = [0.0, 0.0, 0.0];

pub fn class_color(cls: usize) -> [f64; 3] {
    match cls {
        0 => [0.9, 0.1, 0.1],
        1 => [0.1, 0.8, 0.1],
        2 => [0.95, 0.9, 0.1],
        _ => [0.6, 0.2, 0.8],
    }
}

struct Canvas {
    h: i64,
    w: i64,
    data: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && x < self.w && y < self.h {
            let k = ((y * self.w + x) * 3) as usize;
            self.data[k..k + 3].copy_from_slice(&c);
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: [f64; 3], keep: impl Fn(i64, i64) -> bool) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if keep(x - x0, y - y0) {
                    self.put(x, y, c);
                }
            }
        }
    }
}

/// Paints a scene into an `H × W × 3` image in `[0, 1]`: humans first,
/// then objects, each over-painting what came before.
///
/// A human is a head block over a body block with a black tick from its
/// center toward the facing side. Objects are drawn by class: filled
/// rectangle, hollow rectangle, disk or triangle.
pub fn render(spec: &SceneSpec) -> Tensor {
    let [h, w] = spec.canvas;
    let mut cv = Canvas {
        h: h as i64,
        w: w as i64,
        data: BACKGROUND.iter().copied().cycle().take(h * w * 3).collect(),
    };
    for hu in &spec.humans {
        let (x0, y0, bw, bh) = pixel_rect(spec.canvas, &hu.bbox);
        let head = (bh * 3 / 10).max(1);
        cv.fill(x0, y0, bw, head, HEAD, |_, _| true);
        cv.fill(x0, y0 + head, bw, bh - head, BODY, |_, _| true);
        let (cx, cy) = (x0 + bw / 2, y0 + bh / 2);
        let (sx, sy) = hu.facing.step();
        let reach = match hu.facing {
            Facing::Left | Facing::Right => bw / 2,
            Facing::Up | Facing::Down => bh / 2,
        };
        for k in 0..reach {
            cv.put(cx + sx * k, cy + sy * k, TICK);
        }
    }
    for ob in &spec.objects {
        let (x0, y0, bw, bh) = pixel_rect(spec.canvas, &ob.bbox);
        let c = class_color(ob.cls);
        match ob.cls {
            0 => cv.fill(x0, y0, bw, bh, c, |_, _| true),
            1 => {
                let t = 2.min(bw / 2).min(bh / 2).max(1);
                cv.fill(x0, y0, bw, bh, c, |x, y| x < t || y < t || x >= bw - t || y >= bh - t)
            }
            2 => {
                let (rx, ry) = (bw as f64 / 2.0, bh as f64 / 2.0);
                cv.fill(x0, y0, bw, bh, c, |x, y| {
                    let dx = (x as f64 + 0.5 - rx) / rx;
                    let dy = (y as f64 + 0.5 - ry) / ry;
                    dx * dx + dy * dy <= 1.0
                })
            }
            _ => cv.fill(x0, y0, bw, bh, c, |x, y| {
                // apex at top center, base along the bottom row
                let half = (y as f64 + 1.0) / bh as f64 * bw as f64 / 2.0;
                ((x as f64 + 0.5) - bw as f64 / 2.0).abs() <= half
            }),
        }
    }
    Tensor::new(&[h, w, 3], cv.data).expect("canvas size")
}
