use super::Session;
use crate::{Error, Result, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x · W + b` with `W: [din × dout]`.
pub fn linear(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    let y = s.g.matmul(x, w)?;
    Ok(s.g.add_row(y, b)?)
}

/// Linear → ReLU → Linear.
pub fn mlp(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{prefix}.fc1"), x)?;
    let h = s.g.relu(h);
    linear(s, &format!("{prefix}.fc2"), h)
}

pub fn layer_norm(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let gain = s.param(&format!("{prefix}.gain"))?;
    let bias = s.param(&format!("{prefix}.bias"))?;
    Ok(s.g.layer_norm(x, gain, bias, LN_EPS)?)
}

#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub out: Var,
    /// Attention weights averaged over heads, `[queries × keys]`.
    pub weights: Tensor,
}

/// Multi-head scaled dot-product attention of `q: [m × D]` over
/// `kv: [n × D]`.
///
/// Heads are contiguous `D/h` column blocks of the projections. `mask`, when
/// given, is an `[m × n]` constant added to the logits before the softmax;
/// `-inf` entries remove a key from a query's support.
pub fn attention(
    s: &mut Session,
    prefix: &str,
    q: Var,
    kv: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<AttnOutput> {
    let d = s.g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
    }
    if s.g.value(kv).cols() != d {
        return Err(crate::TensorError::Shape {
            op: "attention",
            lhs: s.g.shape(q).to_vec(),
            rhs: s.g.shape(kv).to_vec(),
        }
        .into());
    }
    let wq = s.param(&format!("{prefix}.q_proj.weight"))?;
    let wk = s.param(&format!("{prefix}.k_proj.weight"))?;
    let wv = s.param(&format!("{prefix}.v_proj.weight"))?;
    let wo = s.param(&format!("{prefix}.o_proj.weight"))?;
    let qp = s.g.matmul(q, wq)?;
    let kp = s.g.matmul(kv, wk)?;
    let vp = s.g.matmul(kv, wv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (m, n) = (s.g.value(q).rows(), s.g.value(kv).rows());
    let mut avg = vec![0.0; m * n];
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                s.g.slice(qp, h * dh, (h + 1) * dh)?,
                s.g.slice(kp, h * dh, (h + 1) * dh)?,
                s.g.slice(vp, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = s.g.transpose(kh)?;
        let logits = s.g.matmul(qh, kt)?;
        let mut logits = s.g.scale(logits, scale);
        if let Some(mk) = mask {
            logits = s.g.add(logits, mk)?;
        }
        let a = s.g.softmax(logits);
        for (acc, w) in avg.iter_mut().zip(s.g.value(a).data()) {
            *acc += w / heads as f64;
        }
        outs.push(s.g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { s.g.concat(&outs)? };
    let out = s.g.matmul(cat, wo)?;
    Ok(AttnOutput {
        out,
        weights: Tensor::new(&[m, n], avg)?,
    })
}

/// Pre-norm encoder layer: `X + SelfAttn(LN(X))`, then `+ MLP(LN(·))`.
pub fn encoder_layer(s: &mut Session, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(s, &format!("{prefix}.ln1"), x)?;
    let a = attention(s, &format!("{prefix}.self_attn"), h, h, heads, None)?;
    let x = s.g.add(x, a.out)?;
    let h = layer_norm(s, &format!("{prefix}.ln2"), x)?;
    let f = mlp(s, &format!("{prefix}.mlp"), h)?;
    Ok(s.g.add(x, f)?)
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub out: Var,
    pub self_weights: Tensor,
    pub cross_weights: Tensor,
}

/// Pre-norm decoder layer over queries `q: [N × D]` and memory
/// `x: [T × D]`: self-attention, cross-attention into `x`, then MLP, each
/// as a residual sublayer.
pub fn decoder_layer(s: &mut Session, prefix: &str, q: Var, x: Var, heads: usize) -> Result<DecoderOutput> {
    let h = layer_norm(s, &format!("{prefix}.ln1"), q)?;
    let sa = attention(s, &format!("{prefix}.self_attn"), h, h, heads, None)?;
    let q = s.g.add(q, sa.out)?;
    let h = layer_norm(s, &format!("{prefix}.ln2"), q)?;
    let ca = attention(s, &format!("{prefix}.cross_attn"), h, x, heads, None)?;
    let q = s.g.add(q, ca.out)?;
    let h = layer_norm(s, &format!("{prefix}.ln3"), q)?;
    let f = mlp(s, &format!("{prefix}.mlp"), h)?;
    Ok(DecoderOutput {
        out: s.g.add(q, f)?,
        self_weights: sa.weights,
        cross_weights: ca.weights,
    })
}

/// 2-D sinusoidal encoding for an `rows × cols` grid, row-major.
///
/// The first `D/2` channels encode the row index and the last `D/2` the
/// column index; within each half channels alternate sin/cos over
/// frequencies `10000^(-2i/(D/2))`.
pub fn positional_encoding(rows: usize, cols: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("positional encoding width {d} must be a positive multiple of 4")));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for (pos, _) in [(r, 0), (c, 1)] {
                for k in 0..half {
                    let i = (k / 2) as f64;
                    let div = 10000f64.powf(2.0 * i / half as f64);
                    let a = pos as f64 / div;
                    data.push(if k % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    Tensor::new(&[rows * cols, d], data).map_err(Into::into)
}
