use crate::{Error, Result};

/// Normalized `(cx, cy, w, h)` box.
pub type BoxCxCyWh = [f64; 4];

pub fn to_corners(b: &BoxCxCyWh) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

fn check(b: &BoxCxCyWh) -> Result<()> {
    if b[2] > 0.0 && b[3] > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidBox(*b))
    }
}

fn inter_union(a: &BoxCxCyWh, b: &BoxCxCyWh) -> ([f64; 4], [f64; 4], f64, f64) {
    let (ca, cb) = (to_corners(a), to_corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    (ca, cb, inter, union)
}

pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> Result<f64> {
    check(a)?;
    check(b)?;
    let (_, _, inter, union) = inter_union(a, b);
    Ok(inter / union)
}

/// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the tightest
/// enclosing box. Lies in `(−1, 1]`.
pub fn giou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> Result<f64> {
    check(a)?;
    check(b)?;
    let (ca, cb, inter, union) = inter_union(a, b);
    let cw = ca[2].max(cb[2]) - ca[0].min(cb[0]);
    let ch = ca[3].max(cb[3]) - ca[1].min(cb[1]);
    let c = cw * ch;
    Ok(inter / union - (c - union) / c)
}
