//! JSON Lines dataset files, one scene per line. Images are re-rendered
//! from the stored spec unless the line carries a `pixel_offset` into the
//! `<stem>.pixels.bin` sidecar (row-major little-endian `f64`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{render, Facing, GtRef, Human, Object, Scene, SceneSpec, NUM_INT, NUM_OBJ};
use crate::matchloss::BoxCxCyWh;
use crate::{Error, Result, Tensor};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    #[serde(rename = "box")]
    bbox: BoxCxCyWh,
    cls: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    seed: u64,
    canvas: [usize; 2],
    humans: Vec<BoxCxCyWh>,
    facing: Vec<Facing>,
    objects: Vec<ObjectRecord>,
    gts: Vec<GtRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixel_offset: Option<u64>,
}

pub fn pixels_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.pixels.bin"))
}

/// Writes `scenes` to `path`; with `pixels`, also writes the rendered
/// images to the sidecar.
pub fn save_dataset(scenes: &[Scene], path: &Path, pixels: bool) -> Result<()> {
    let mut out = Vec::new();
    let mut blob = Vec::new();
    for sc in scenes {
        let s = &sc.spec;
        let rec = Record {
            seed: s.seed,
            canvas: s.canvas,
            humans: s.humans.iter().map(|h| h.bbox).collect(),
            facing: s.humans.iter().map(|h| h.facing).collect(),
            objects: s.objects.iter().map(|o| ObjectRecord { bbox: o.bbox, cls: o.cls }).collect(),
            gts: s.gts.clone(),
            pixel_offset: pixels.then_some(blob.len() as u64),
        };
        if pixels {
            for v in sc.image.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    if pixels {
        fs::write(pixels_path(path), blob)?;
    }
    Ok(())
}

fn check_box(b: &BoxCxCyWh) -> std::result::Result<(), String> {
    let inside = b[2] > 0.0
        && b[3] > 0.0
        && b[0] - b[2] / 2.0 >= -1e-9
        && b[0] + b[2] / 2.0 <= 1.0 + 1e-9
        && b[1] - b[3] / 2.0 >= -1e-9
        && b[1] + b[3] / 2.0 <= 1.0 + 1e-9;
    if inside && b.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(format!("box {b:?} is empty or leaves the canvas"))
    }
}

fn to_spec(r: Record) -> std::result::Result<SceneSpec, String> {
    if r.canvas.contains(&0) {
        return Err(format!("canvas {:?} is empty", r.canvas));
    }
    if r.humans.len() != r.facing.len() {
        return Err(format!("{} humans but {} facing entries", r.humans.len(), r.facing.len()));
    }
    for b in r.humans.iter().chain(r.objects.iter().map(|o| &o.bbox)) {
        check_box(b)?;
    }
    if let Some(o) = r.objects.iter().find(|o| o.cls >= NUM_OBJ) {
        return Err(format!("unknown object class {}", o.cls));
    }
    for g in &r.gts {
        if g.int_class >= NUM_INT {
            return Err(format!("unknown interaction id {}", g.int_class));
        }
        if g.h_idx >= r.humans.len() || g.o_idx >= r.objects.len() {
            return Err(format!("gt refers to human {} / object {} out of range", g.h_idx, g.o_idx));
        }
        if g.obj_class != r.objects[g.o_idx].cls {
            return Err(format!("gt object class {} disagrees with object {}", g.obj_class, g.o_idx));
        }
    }
    Ok(SceneSpec {
        seed: r.seed,
        canvas: r.canvas,
        humans: r.humans.iter().zip(&r.facing).map(|(&bbox, &facing)| Human { bbox, facing }).collect(),
        objects: r.objects.iter().map(|o| Object { bbox: o.bbox, cls: o.cls }).collect(),
        gts: r.gts,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path)?;
    let mut blob: Option<Vec<u8>> = None;
    let mut scenes = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Dataset { line: k + 1, msg };
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let offset = rec.pixel_offset;
        let spec = to_spec(rec).map_err(err)?;
        let image = match offset {
            None => render(&spec),
            Some(off) => {
                if blob.is_none() {
                    blob = Some(fs::read(pixels_path(path))?);
                }
                let bytes = blob.as_deref().expect("sidecar loaded");
                let [h, w] = spec.canvas;
                let n = h * w * 3;
                let start = off as usize;
                let end = start + 8 * n;
                if end > bytes.len() {
                    return Err(err(format!("pixel range {start}..{end} exceeds sidecar of {} bytes", bytes.len())));
                }
                let data = bytes[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::new(&[h, w, 3], data)?
            }
        };
        scenes.push(Scene { spec, image });
    }
    Ok(scenes)
}
