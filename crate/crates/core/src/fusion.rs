//! Transformer fusion of the two stage-4 maps, the shared decoder and the
//! breast-level ensemble.

use rand::Rng;

use crate::nn::{self, Bound, Linear, ParamError, ParamId, ParamSet};
use crate::tensor::{shape_err, Element, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("{heads} heads do not divide width {channels}")]
    Heads { heads: usize, channels: usize },
    #[error("pooled resolution {pooled} does not divide map size {size}")]
    Pooling { pooled: usize, size: usize },
    #[error("loss term {0} is not finite")]
    NonFinite(&'static str),
    #[error("ensemble weights must be non-negative and not all zero, got {0:?}")]
    Weights([f64; 3]),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Pre-LN transformer block over `2·P·P` tokens of width `C`. The
/// attention output projection and the second feed-forward layer start at
/// zero, so a fresh encoder leaves the feature maps untouched.
#[derive(Debug, Clone)]
pub struct GlobalEncoderParams {
    pub positional_embedding: ParamId,
    pub ln1: (ParamId, ParamId),
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub ln2: (ParamId, ParamId),
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub heads: usize,
    pub channels: usize,
    pub pooled: usize,
}

/// `min(H, 16)`.
pub fn default_pooled_resolution(stage4_size: usize) -> usize {
    stage4_size.min(16)
}

impl GlobalEncoderParams {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        map_size: usize,
        pooled: usize,
        rng: &mut R,
    ) -> Result<Self, FusionError> {
        if heads == 0 || channels % heads != 0 {
            return Err(FusionError::Heads { heads, channels });
        }
        if pooled == 0 || map_size % pooled != 0 {
            return Err(FusionError::Pooling { pooled, size: map_size });
        }
        let tokens = 2 * pooled * pooled;
        let positional_embedding =
            params.add(format!("{prefix}.pos_embed"), nn::normal(&[tokens, channels], 0.02, rng))?;
        let mut norm = |name: &str| -> Result<(ParamId, ParamId), ParamError> {
            Ok((
                params.add(format!("{prefix}.{name}.gain"), Tensor::full(&[channels], T::one()))?,
                params.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[channels]))?,
            ))
        };
        let ln1 = norm("ln1")?;
        let ln2 = norm("ln2")?;
        let mut lin = |name: &str, i: usize, o: usize, zero: bool| {
            Linear::new(params, &format!("{prefix}.{name}"), i, o, zero, rng)
        };
        Ok(GlobalEncoderParams {
            positional_embedding,
            ln1,
            w_q: lin("attn.w_q", channels, channels, false)?,
            w_k: lin("attn.w_k", channels, channels, false)?,
            w_v: lin("attn.w_v", channels, channels, false)?,
            w_o: lin("attn.w_o", channels, channels, true)?,
            ln2,
            ffn1: lin("ffn.fc1", channels, 2 * channels, false)?,
            ffn2: lin("ffn.fc2", 2 * channels, channels, true)?,
            heads,
            channels,
            pooled,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalEncoding {
    pub cc: Var,
    pub mlo: Var,
    /// `[N, C]`
    pub g: Var,
    /// Attention weights, `[N·heads, T, T]`.
    pub attention: Var,
}

fn affine_norm<T: Element>(tape: &Tape<T>, bound: &Bound, x: Var, (g, b): (ParamId, ParamId), c: usize) -> Result<Var, TensorError> {
    let n = tape.layer_norm(x, T::c(LN_EPS))?;
    let g = tape.reshape(bound.var(g), vec![1, 1, c])?;
    let b = tape.reshape(bound.var(b), vec![1, 1, c])?;
    let scaled = tape.mul(n, g)?;
    tape.add(scaled, b)
}

/// Multi-head self-attention on `[N, T, C]`; returns the projected output and
/// the attention weights.
fn self_attention<T: Element>(tape: &Tape<T>, bound: &Bound, p: &GlobalEncoderParams, x: Var) -> Result<(Var, Var), TensorError> {
    let d = tape.dims(x);
    let (n, t, c, h) = (d[0], d[1], d[2], p.heads);
    let dh = c / h;
    let split = |v: Var| -> Result<Var, TensorError> {
        let v = tape.reshape(v, vec![n, t, h, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        tape.reshape(v, vec![n * h, t, dh])
    };
    let q = split(p.w_q.forward(tape, bound, x)?)?;
    let k = split(p.w_k.forward(tape, bound, x)?)?;
    let v = split(p.w_v.forward(tape, bound, x)?)?;
    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.scale(tape.matmul(q, kt)?, T::c(1.0 / (dh as f64).sqrt()))?;
    let attn = tape.softmax(scores)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.reshape(out, vec![n, h, t, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, vec![n, t, c])?;
    Ok((p.w_o.forward(tape, bound, out)?, attn))
}

/// Residual-branch output of the block (attention plus feed-forward
/// contributions) for `[N, T, C]` tokens.
fn encoder_delta<T: Element>(tape: &Tape<T>, bound: &Bound, p: &GlobalEncoderParams, z: Var) -> Result<(Var, Var), TensorError> {
    let h = affine_norm(tape, bound, z, p.ln1, p.channels)?;
    let (a, attn) = self_attention(tape, bound, p, h)?;
    let z1 = tape.add(z, a)?;
    let h2 = affine_norm(tape, bound, z1, p.ln2, p.channels)?;
    let f = tape.relu(p.ffn1.forward(tape, bound, h2)?)?;
    let f = p.ffn2.forward(tape, bound, f)?;
    Ok((tape.add(a, f)?, attn))
}

fn to_tokens<T: Element>(tape: &Tape<T>, f: Var, pooled: usize) -> Result<Var, TensorError> {
    let d = tape.dims(f);
    let x = if d[2] == pooled { f } else { tape.avg_pool2d(f, d[2] / pooled)? };
    let x = tape.reshape(x, vec![d[0], d[1], pooled * pooled])?;
    tape.permute(x, &[0, 2, 1])
}

fn from_tokens<T: Element>(tape: &Tape<T>, x: Var, pooled: usize, size: usize) -> Result<Var, TensorError> {
    let d = tape.dims(x);
    let x = tape.permute(x, &[0, 2, 1])?;
    let x = tape.reshape(x, vec![d[0], d[2], pooled, pooled])?;
    if size == pooled {
        Ok(x)
    } else {
        tape.upsample_bilinear(x, size, size)
    }
}

/// Pools both maps to `P×P`, stacks them as one token sequence with the
/// positional embedding, runs the block, and adds the upsampled block output
/// back onto each map. `g` is the sum of the two updated maps' GAP vectors.
pub fn global_encode<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &GlobalEncoderParams,
    f_cc: Var,
    f_mlo: Var,
) -> Result<GlobalEncoding, TensorError> {
    let (dc, dm) = (tape.dims(f_cc), tape.dims(f_mlo));
    if dc != dm || dc.len() != 4 || dc[2] != dc[3] {
        return Err(shape_err("global_encode", format!("view maps {dc:?} and {dm:?} must be equal and square")));
    }
    if dc[1] != params.channels || dc[2] % params.pooled != 0 {
        return Err(shape_err(
            "global_encode",
            format!("map {dc:?} does not fit width {} pooled to {}", params.channels, params.pooled),
        ));
    }
    let (n, c, size, p) = (dc[0], dc[1], dc[2], params.pooled);
    let pp = p * p;
    let tokens = tape.concat(&[to_tokens(tape, f_cc, p)?, to_tokens(tape, f_mlo, p)?], 1)?;
    let pos = tape.reshape(bound.var(params.positional_embedding), vec![1, 2 * pp, c])?;
    let z = tape.add(tokens, pos)?;
    let (delta, attention) = encoder_delta(tape, bound, params, z)?;
    let d_cc = from_tokens(tape, tape.narrow(delta, 1, 0, pp)?, p, size)?;
    let d_mlo = from_tokens(tape, tape.narrow(delta, 1, pp, pp)?, p, size)?;
    let cc = tape.add(f_cc, d_cc)?;
    let mlo = tape.add(f_mlo, d_mlo)?;
    let g = tape.add(tape.gap(cc)?, tape.gap(mlo)?)?;
    debug_assert_eq!(tape.dims(g), vec![n, c]);
    Ok(GlobalEncoding { cc, mlo, g, attention })
}

/// θ4: `C → C/2 → 1`.
#[derive(Debug, Clone, Copy)]
pub struct SharedDecoderParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SharedDecoderParams {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        let hidden = (channels / 2).max(1);
        Ok(SharedDecoderParams {
            fc1: Linear::new(params, &format!("{prefix}.fc1"), channels, hidden, false, rng)?,
            fc2: Linear::new(params, &format!("{prefix}.fc2"), hidden, 1, false, rng)?,
        })
    }
}

/// Pre-sigmoid output `FC2(ReLU(FC1(g)))`, `[N, 1]`.
pub fn shared_logit<T: Element>(tape: &Tape<T>, bound: &Bound, p: &SharedDecoderParams, g: Var) -> Result<Var, TensorError> {
    let h = tape.relu(p.fc1.forward(tape, bound, g)?)?;
    p.fc2.forward(tape, bound, h)
}

pub fn shared_decode<T: Element>(tape: &Tape<T>, bound: &Bound, p: &SharedDecoderParams, g: Var) -> Result<Var, TensorError> {
    tape.sigmoid(shared_logit(tape, bound, p, g)?)
}

/// `L_sh + L_cc + L_mlo`.
pub fn total_loss<T: Element>(tape: &Tape<T>, l_sh: Var, l_cc: Var, l_mlo: Var) -> Result<Var, FusionError> {
    for (name, v) in [("L_sh", l_sh), ("L_cc", l_cc), ("L_mlo", l_mlo)] {
        if !tape.value_ref(v).all_finite() {
            return Err(FusionError::NonFinite(name));
        }
    }
    let s = tape.add(l_sh, l_cc)?;
    Ok(tape.add(s, l_mlo)?)
}

/// Weighted mean of the CC, MLO and shared scores.
pub fn breast_prediction(s_cc: f64, s_mlo: f64, s_shared: f64, weights: [f64; 3]) -> Result<f64, FusionError> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || total <= 0.0 {
        return Err(FusionError::Weights(weights));
    }
    Ok((weights[0] * s_cc + weights[1] * s_mlo + weights[2] * s_shared) / total)
}
