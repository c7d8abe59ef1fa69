//! Attention maps as 8-bit PGM images on the patch grid, plus the scene
//! with its decoded detections as PPM.

use std::fs;
use std::path::{Path, PathBuf};

use relhoi::eval::{decode_topk, ScoredInstance};
use relhoi::model::{forward, Branch, ModelConfig};
use relhoi::nn::{ParamStore, Session};
use relhoi::synth::{pixel_rect, Scene};
use relhoi::{Graph, Tensor};

use crate::commands::eval::load_model;
use crate::{load_scenes, CliError, RunConfig};

const HUMAN_EDGE: [u8; 3] = [255, 255, 255];
const OBJECT_EDGE: [u8; 3] = [255, 0, 255];
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpSummary {
    pub maps: Vec<PathBuf>,
    pub scene: PathBuf,
    pub detections: Vec<ScoredInstance>,
}

/// Min-max normalization to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> std::io::Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out)
}

fn outline(rgb: &mut [u8], canvas: [usize; 2], b: &[f64; 4], color: [u8; 3]) {
    let [h, w] = canvas;
    let (x0, y0, bw, bh) = pixel_rect(canvas, b);
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            let k = (y as usize * w + x as usize) * 3;
            rgb[k..k + 3].copy_from_slice(&color);
        }
    };
    for x in x0..x0 + bw.max(1) {
        put(x, y0);
        put(x, y0 + bh.max(1) - 1);
    }
    for y in y0..y0 + bh.max(1) {
        put(x0, y);
        put(x0 + bw.max(1) - 1, y);
    }
}

/// Writes one map per query and attention: `{h,o,i}_q{n}.pgm` for the
/// last layer's decoder cross-attention of each branch and `mure_q{n}.pgm`
/// for the relation module's image attention (when it runs), then
/// `scene.ppm` with the top-`k` detections outlined.
pub fn dump_attn(store: &ParamStore, model: &ModelConfig, scene: &Scene, k: usize, out: &Path) -> Result<DumpSummary, CliError> {
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, store, false);
    let fwd = forward(&mut s, model, &scene.image)?;
    let last = fwd.traces.last().expect("at least one layer");
    let mut named: Vec<(String, &Tensor)> = Branch::ALL
        .iter()
        .map(|b| (b.tag().to_string(), &last.branch_cross[b.index()]))
        .collect();
    if let Some(w) = last.mure.as_ref().and_then(|m| m.weights("image")) {
        named.push(("mure".into(), w));
    }

    let (rows, cols) = model.grid();
    fs::create_dir_all(out)?;
    let mut maps = Vec::new();
    for (name, w) in named {
        assert_eq!(w.shape(), [model.queries, rows * cols], "{name} attention shape");
        for q in 0..w.rows() {
            let row = w.row(q);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < ROW_SUM_TOL, "{name} query {q}: weights sum to {sum}");
            let path = out.join(format!("{name}_q{q}.pgm"));
            write_pgm(&path, cols, rows, &to_gray(row))?;
            maps.push(path);
        }
    }

    let preds = fwd.last().predictions(s.g);
    let detections = decode_topk(&preds, k);
    let canvas = scene.spec.canvas;
    let mut rgb: Vec<u8> = scene
        .image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    for d in detections.iter().rev() {
        outline(&mut rgb, canvas, &d.instance.object_box, OBJECT_EDGE);
        outline(&mut rgb, canvas, &d.instance.human_box, HUMAN_EDGE);
    }
    let scene_path = out.join("scene.ppm");
    write_ppm(&scene_path, canvas[1], canvas[0], &rgb)?;
    Ok(DumpSummary {
        maps,
        scene: scene_path,
        detections,
    })
}

/// Loads the checkpoint and scene `index` of `data`, then dumps.
pub fn cmd_dump_attn(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    index: usize,
    out: &Path,
) -> Result<DumpSummary, CliError> {
    cfg.validate()?;
    let store = load_model(cfg, checkpoint)?;
    let scenes = load_scenes(data, &cfg.model)?;
    let scene = scenes
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("image index {index} out of range ({} scenes)", scenes.len())))?;
    dump_attn(&store, &cfg.model, scene, cfg.k, out)
}
