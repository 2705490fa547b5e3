//! Cross-channel enhancement after instance normalisation, then column-wise
//! attention exchange between the CC and MLO maps of one level.

use rand::Rng;

use crate::nn::{Bound, Conv2d, Linear, ParamError, ParamSet};
use crate::tensor::{shape_err, Element, Tape, TensorError, Var};

pub const IN_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum CveError {
    #[error("reduction ratio must be positive")]
    Reduction,
    #[error("CVE needs at least one channel")]
    Channels,
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Bottleneck width `C / r`, never below one.
pub fn bottleneck(channels: usize, r: usize) -> usize {
    (channels / r).max(1)
}

/// Parameters of one attachment level: θ1 `C → C/r`, θ2 `C/r → C` (1×1
/// convolutions on the pooled residual, i.e. linear maps) and θ3, the 3×3
/// `C → 1` convolution shared by both views.
#[derive(Debug, Clone, Copy)]
pub struct CveParams {
    pub theta1: Linear,
    pub theta2: Linear,
    pub theta3: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl CveParams {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self, CveError> {
        if reduction == 0 {
            return Err(CveError::Reduction);
        }
        if channels == 0 {
            return Err(CveError::Channels);
        }
        let hidden = bottleneck(channels, reduction);
        let theta1 = Linear::new(params, &format!("{prefix}.theta1"), channels, hidden, false, rng)?;
        let theta2 = Linear::new(params, &format!("{prefix}.theta2"), hidden, channels, false, rng)?;
        let theta3 = Conv2d::new(params, &format!("{prefix}.theta3"), channels, 1, 3, 1, 1, rng)?;
        Ok(CveParams { theta1, theta2, theta3, channels, reduction })
    }

    pub fn hidden(&self) -> usize {
        self.theta1.out
    }
}

/// Tape handles of every quantity computed for one view at one level.
#[derive(Debug, Clone, Copy)]
pub struct CveIntermediates {
    pub f: Var,
    pub f_tilde: Var,
    pub r: Var,
    /// `[N, C]`
    pub t: Var,
    pub r_plus: Var,
    pub f_tilde_plus: Var,
    /// `[N, 1, H, W]`
    pub w: Var,
    /// `[N, 1, 1, W]`
    pub v: Var,
    pub w_hat: Var,
    pub f_hat: Var,
}

/// The channel half of an intermediates record.
#[derive(Debug, Clone, Copy)]
pub struct ChannelStage {
    pub f: Var,
    pub f_tilde: Var,
    pub r: Var,
    pub t: Var,
    pub r_plus: Var,
    pub f_tilde_plus: Var,
}

/// `F̃⁺ = IN(F) + t ⊙ (F − IN(F))` with `t = σ(θ2 δ(θ1 GAP(R)))`.
pub fn cross_channel_enhance<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &CveParams,
    f: Var,
) -> Result<ChannelStage, TensorError> {
    let d = tape.dims(f);
    if d.len() != 4 || d[1] != params.channels {
        return Err(shape_err("cve", format!("expected [N,{},H,W], got {d:?}", params.channels)));
    }
    let f_tilde = tape.instance_norm(f, T::c(IN_EPS))?;
    let r = tape.sub(f, f_tilde)?;
    let pooled = tape.gap(r)?;
    let h = tape.relu(params.theta1.forward(tape, bound, pooled)?)?;
    let t = tape.sigmoid(params.theta2.forward(tape, bound, h)?)?;
    let t4 = tape.reshape(t, vec![d[0], d[1], 1, 1])?;
    let r_plus = tape.mul(r, t4)?;
    let f_tilde_plus = tape.add(f_tilde, r_plus)?;
    Ok(ChannelStage { f, f_tilde, r, t, r_plus, f_tilde_plus })
}

/// Column-wise maximum of a `[N, 1, H, W]` map, as `[N, 1, 1, W]`.
pub fn geometric_vector<T: Element>(tape: &Tape<T>, w: Var) -> Result<Var, TensorError> {
    let d = tape.dims(w);
    if d.len() != 4 || d[1] != 1 {
        return Err(shape_err("geometric_vector", format!("expected [N,1,H,W], got {d:?}")));
    }
    Ok(tape.max_axis(w, 2)?.0)
}

/// Spatial attention `σ(θ3(F̃⁺))`.
pub fn spatial_attention<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &CveParams,
    fp: Var,
) -> Result<Var, TensorError> {
    tape.sigmoid(params.theta3.forward(tape, bound, fp)?)
}

/// `ŵ = w ⊙ v_other` (rows broadcast) and `F̂ = F̃⁺ + ŵ ⊙ F̃⁺`.
pub fn attend<T: Element>(tape: &Tape<T>, fp: Var, w: Var, v_other: Var) -> Result<(Var, Var), TensorError> {
    let w_hat = tape.mul(w, v_other)?;
    let att = tape.mul(fp, w_hat)?;
    Ok((w_hat, tape.add(fp, att)?))
}

/// Both views' attention maps are computed from their own pre-exchange
/// `F̃⁺`, then swapped column vectors gate each other.
pub fn cross_view_enhance<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &CveParams,
    fp_cc: Var,
    fp_mlo: Var,
) -> Result<[(Var, Var, Var, Var); 2], TensorError> {
    let (dc, dm) = (tape.dims(fp_cc), tape.dims(fp_mlo));
    if dc != dm {
        return Err(shape_err("cross_view_enhance", format!("view dims differ: {dc:?} vs {dm:?}")));
    }
    let w_cc = spatial_attention(tape, bound, params, fp_cc)?;
    let w_mlo = spatial_attention(tape, bound, params, fp_mlo)?;
    let v_cc = geometric_vector(tape, w_cc)?;
    let v_mlo = geometric_vector(tape, w_mlo)?;
    let (wh_cc, out_cc) = attend(tape, fp_cc, w_cc, v_mlo)?;
    let (wh_mlo, out_mlo) = attend(tape, fp_mlo, w_mlo, v_cc)?;
    Ok([(w_cc, v_cc, wh_cc, out_cc), (w_mlo, v_mlo, wh_mlo, out_mlo)])
}

/// Full CVE for one level, returning `(F̂_cc, F̂_mlo)` intermediates.
pub fn enhance<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &CveParams,
    f_cc: Var,
    f_mlo: Var,
) -> Result<[CveIntermediates; 2], TensorError> {
    let cc = cross_channel_enhance(tape, bound, params, f_cc)?;
    let mlo = cross_channel_enhance(tape, bound, params, f_mlo)?;
    let [a, b] = cross_view_enhance(tape, bound, params, cc.f_tilde_plus, mlo.f_tilde_plus)?;
    let pack = |c: ChannelStage, (w, v, w_hat, f_hat): (Var, Var, Var, Var)| CveIntermediates {
        f: c.f,
        f_tilde: c.f_tilde,
        r: c.r,
        t: c.t,
        r_plus: c.r_plus,
        f_tilde_plus: c.f_tilde_plus,
        w,
        v,
        w_hat,
        f_hat,
    };
    Ok([pack(cc, a), pack(mlo, b)])
}
