//! Per-view multi-instance head: tiling into instance bags, dual-stream
//! scoring, feature-statistics augmentation and the contrastive objective.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{Bound, Linear, ParamError, ParamSet};
use crate::tensor::{shape_err, Element, Tape, Tensor, TensorError, Var};
use crate::{Mode, View};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum MiclError {
    #[error("feature augmentation is only available in training mode")]
    EvalMode,
    #[error("mixstyle needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid shuffle permutation {0:?}")]
    Permutation(Vec<usize>),
    #[error("mixing coefficient {0} is outside [0, 1]")]
    MixCoefficient(f64),
    #[error("contrastive inputs must be unit-norm; row {row} of {set} has norm {norm}")]
    NotNormalized { set: &'static str, row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("{0} labels for a batch of {1}")]
    Labels(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixstyleConfig {
    pub apply_probability: f64,
    pub noise_sigma: f64,
    pub epsilon: f64,
}

impl Default for MixstyleConfig {
    fn default() -> Self {
        MixstyleConfig { apply_probability: 1.0, noise_sigma: 0.01, epsilon: 1e-6 }
    }
}

/// The four linear maps of the dual-stream aggregator.
#[derive(Debug, Clone, Copy)]
pub struct DsmilParams {
    pub f_m: Linear,
    pub w_q: Linear,
    pub w_v: Linear,
    pub f_b: Linear,
}

impl DsmilParams {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        Ok(DsmilParams {
            f_m: Linear::new(params, &format!("{prefix}.f_m"), channels, 1, false, rng)?,
            w_q: Linear::new(params, &format!("{prefix}.w_q"), channels, channels, false, rng)?,
            w_v: Linear::new(params, &format!("{prefix}.w_v"), channels, channels, false, rng)?,
            f_b: Linear::new(params, &format!("{prefix}.f_b"), channels, 1, false, rng)?,
        })
    }
}

/// The `n²` tile embeddings of one view for every sample of a batch.
#[derive(Debug, Clone)]
pub struct InstanceBag {
    /// `[N, n², C]`
    pub instances: Var,
    /// Raw instance-classifier outputs, `[N, n²]`.
    pub scores: Var,
    /// Critical-instance index per sample.
    pub critical: Vec<usize>,
    pub view: View,
}

#[derive(Debug, Clone, Copy)]
pub struct DsmilScores {
    /// `[N, 1]` each.
    pub s_m: Var,
    pub s_b: Var,
    pub s: Var,
    /// Attention over instances, `[N, n²]`.
    pub d: Var,
}

/// Splits `[N,C,H,W]` into `n×n` tiles (row-major tile order) and average
/// pools each one, giving `[N, n², C]`.
pub fn tile_instances<T: Element>(tape: &Tape<T>, f: Var, n: usize) -> Result<Var, TensorError> {
    let d = tape.dims(f);
    if d.len() != 4 || n == 0 || d[2] % n != 0 || d[3] % n != 0 || d[2] / n != d[3] / n {
        return Err(shape_err("tile_to_bag", format!("{d:?} cannot be cut into {n}x{n} square tiles")));
    }
    let pooled = tape.avg_pool2d(f, d[2] / n)?;
    let flat = tape.reshape(pooled, vec![d[0], d[1], n * n])?;
    tape.permute(flat, &[0, 2, 1])
}

/// Index of the largest entry of each row; the lowest index wins ties.
pub fn argmax_rows(values: &[f64], len: usize) -> Vec<usize> {
    values
        .chunks_exact(len)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn tile_to_bag<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &DsmilParams,
    f_hat: Var,
    n: usize,
    view: View,
) -> Result<InstanceBag, TensorError> {
    let instances = tape.dims(f_hat)[0];
    let inst = tile_instances(tape, f_hat, n)?;
    let raw = params.f_m.forward(tape, bound, inst)?;
    let scores = tape.reshape(raw, vec![instances, n * n])?;
    let critical = argmax_rows(&tape.value_ref(scores).to_f64(), n * n);
    Ok(InstanceBag { instances: inst, scores, critical, view })
}

/// `softmax_i ⟨q_i, q_m⟩` for `q` of dims `[N, L, d]`.
pub fn bag_attention<T: Element>(tape: &Tape<T>, q: Var, critical: &[usize]) -> Result<Var, TensorError> {
    let d = tape.dims(q);
    let qm = tape.take_rows(q, critical)?;
    let qm = tape.reshape(qm, vec![d[0], d[2], 1])?;
    let dots = tape.matmul(q, qm)?;
    let dots = tape.reshape(dots, vec![d[0], d[1]])?;
    tape.softmax(dots)
}

pub fn dsmil_score<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &DsmilParams,
    bag: &InstanceBag,
) -> Result<DsmilScores, TensorError> {
    let dims = tape.dims(bag.instances);
    let (n, l) = (dims[0], dims[1]);
    let q = params.w_q.forward(tape, bound, bag.instances)?;
    let v = params.w_v.forward(tape, bound, bag.instances)?;
    let d = bag_attention(tape, q, &bag.critical)?;
    let d3 = tape.reshape(d, vec![n, 1, l])?;
    let emb = tape.matmul(d3, v)?;
    let emb = tape.reshape(emb, vec![n, params.w_v.out])?;
    let s_b = tape.sigmoid(params.f_b.forward(tape, bound, emb)?)?;
    let top = tape.take_rows(bag.scores, &bag.critical)?;
    let s_m = tape.sigmoid(top)?;
    let sum = tape.add(s_m, s_b)?;
    let s = tape.scale(sum, T::c(0.5))?;
    Ok(DsmilScores { s_m, s_b, s, d })
}

/// Picks `x[perm[i]]` along the batch axis.
fn gather_batch<T: Element>(tape: &Tape<T>, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
    let rows: Vec<Var> = perm.iter().map(|&p| tape.narrow(x, 0, p, 1)).collect::<Result<_, _>>()?;
    tape.concat(&rows, 0)
}

/// Per-channel spatial mean and ε-stabilised standard deviation, `[N,C,1,1]`.
fn channel_stats<T: Element>(tape: &Tape<T>, f: Var, eps: f64) -> Result<(Var, Var, Var), TensorError> {
    let mean = tape.mean_axes(f, &[2, 3])?;
    let centred = tape.sub(f, mean)?;
    let sq = tape.mul(centred, centred)?;
    let var = tape.mean_axes(sq, &[2, 3])?;
    let std = tape.sqrt(tape.add_scalar(var, T::c(eps))?)?;
    Ok((mean, std, centred))
}

/// Re-styles every sample with statistics interpolated towards its partner
/// `perm[i]`: `β_mix (F − γ)/β + γ_mix`.
pub fn mixstyle<T: Element>(
    tape: &Tape<T>,
    f: Var,
    perm: &[usize],
    m: f64,
    config: &MixstyleConfig,
) -> Result<Var, MiclError> {
    let d = tape.dims(f);
    if d.len() != 4 {
        return Err(shape_err("mixstyle", format!("expected [N,C,H,W], got {d:?}")).into());
    }
    if d[0] < 2 {
        return Err(MiclError::BatchTooSmall(d[0]));
    }
    let mut seen = vec![false; d[0]];
    if perm.len() != d[0] || perm.iter().any(|&p| p >= d[0] || std::mem::replace(&mut seen[p], true)) {
        return Err(MiclError::Permutation(perm.to_vec()));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(MiclError::MixCoefficient(m));
    }
    let (mean, std, centred) = channel_stats(tape, f, config.epsilon)?;
    let normed = tape.div(centred, std)?;
    let mean_p = gather_batch(tape, mean, perm)?;
    let std_p = gather_batch(tape, std, perm)?;
    let mix = |a: Var, b: Var| -> Result<Var, TensorError> {
        let x = tape.scale(a, T::c(m))?;
        let y = tape.scale(b, T::c(1.0 - m))?;
        tape.add(x, y)
    };
    let mean_mix = mix(mean, mean_p)?;
    let std_mix = mix(std, std_p)?;
    let scaled = tape.mul(normed, std_mix)?;
    Ok(tape.add(scaled, mean_mix)?)
}

/// Mixstyle with a fresh permutation and `m ~ U(0,1)`, applied with
/// probability `apply_probability`, plus Gaussian feature noise.
pub fn augment_ood<T: Element, R: Rng + ?Sized>(
    tape: &Tape<T>,
    f_hat: Var,
    config: &MixstyleConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, MiclError> {
    if mode != Mode::Train {
        return Err(MiclError::EvalMode);
    }
    let dims = tape.dims(f_hat);
    let mut perm: Vec<usize> = (0..dims[0]).collect();
    perm.shuffle(rng);
    let m: f64 = rng.random();
    let apply = rng.random::<f64>() < config.apply_probability;
    let mixed = if apply { mixstyle(tape, f_hat, &perm, m, config)? } else { f_hat };
    if config.noise_sigma == 0.0 {
        return Ok(mixed);
    }
    let normal = Normal::new(0.0, config.noise_sigma).map_err(|_| MiclError::MixCoefficient(config.noise_sigma))?;
    let noise: Vec<f64> = (0..dims.iter().product()).map(|_| normal.sample(rng)).collect();
    let noise = tape.constant(Tensor::from_f64(dims, &noise)?);
    Ok(tape.add(mixed, noise)?)
}

/// Anchors and their augmented positives (malignant critical instances) and
/// negatives (benign critical instances), all unit rows of width `C`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatchSets {
    pub anchors: Option<Var>,
    pub positives: Option<Var>,
    pub negatives: Option<Var>,
    pub tau: f64,
    pub lambda: f64,
}

/// Rows of `[N, C]` `x` whose flag is set, via a constant selection matrix.
fn select_rows<T: Element>(tape: &Tape<T>, x: Var, keep: &[bool]) -> Result<Option<Var>, TensorError> {
    let n = keep.len();
    let rows: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mut sel = vec![0.0; rows.len() * n];
    for (r, &i) in rows.iter().enumerate() {
        sel[r * n + i] = 1.0;
    }
    let sel = tape.constant(Tensor::from_f64(vec![rows.len(), n], &sel)?);
    Ok(Some(tape.matmul(sel, x)?))
}

/// Partitions the batch's critical instances by label. `critical` and
/// `critical_aug` are `[N, C]` and already L2-normalised.
pub fn contrastive_sets<T: Element>(
    tape: &Tape<T>,
    critical: Var,
    critical_aug: Var,
    labels: &[f64],
    tau: f64,
    lambda: f64,
) -> Result<ContrastiveBatchSets, MiclError> {
    let n = tape.dims(critical)[0];
    if labels.len() != n {
        return Err(MiclError::Labels(labels.len(), n));
    }
    let pos: Vec<bool> = labels.iter().map(|&y| y > 0.5).collect();
    let neg: Vec<bool> = pos.iter().map(|p| !p).collect();
    Ok(ContrastiveBatchSets {
        anchors: select_rows(tape, critical, &pos)?,
        positives: select_rows(tape, critical_aug, &pos)?,
        negatives: select_rows(tape, critical, &neg)?,
        tau,
        lambda,
    })
}

/// Rows must be unit-norm. An all-zero row (a tile whose post-ReLU features
/// all died) has no direction to normalise and is let through; its
/// similarities are simply zero.
fn check_unit<T: Element>(tape: &Tape<T>, x: Var, set: &'static str) -> Result<(), MiclError> {
    let t = tape.value_ref(x);
    let c = *t.dims().last().unwrap();
    for (row, r) in t.to_f64().chunks_exact(c).enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 && norm != 0.0 {
            return Err(MiclError::NotNormalized { set, row, norm });
        }
    }
    Ok(())
}

/// `−(1/|P|) Σ log[e^{⟨x⁺,x̄⁺⟩/τ} / (e^{⟨x⁺,x̄⁺⟩/τ} + Σ_Q e^{⟨x⁺,x⁻⟩/τ})]`,
/// zero when `P` is empty.
pub fn contrastive_loss<T: Element>(tape: &Tape<T>, sets: &ContrastiveBatchSets) -> Result<Var, MiclError> {
    if !(sets.tau > 0.0) {
        return Err(MiclError::Temperature(sets.tau));
    }
    let (a, p) = match (sets.anchors, sets.positives) {
        (Some(a), Some(p)) => (a, p),
        _ => return Ok(tape.constant(Tensor::scalar(T::zero()))),
    };
    check_unit(tape, a, "anchors")?;
    check_unit(tape, p, "positives")?;
    let inv_tau = T::c(1.0 / sets.tau);
    let ap = tape.mul(a, p)?;
    let pos = tape.scale(tape.sum_axes(ap, &[1])?, inv_tau)?;
    let logits = match sets.negatives {
        Some(q) => {
            check_unit(tape, q, "negatives")?;
            let qt = tape.transpose(q, 0, 1)?;
            let neg = tape.scale(tape.matmul(a, qt)?, inv_tau)?;
            tape.concat(&[pos, neg], 1)?
        }
        None => pos,
    };
    let ls = tape.log_softmax(logits)?;
    let first = tape.narrow(ls, 1, 0, 1)?;
    let m = tape.mean(first)?;
    Ok(tape.scale(m, T::c(-1.0))?)
}

/// Mean BCE of the bag scores (clamped to `[1e-7, 1−1e-7]`) plus `λ·L_cl`.
pub fn micl_view_loss<T: Element>(
    tape: &Tape<T>,
    scores: Var,
    labels: &[f64],
    l_cl: Var,
    lambda: f64,
) -> Result<Var, TensorError> {
    let y: Vec<T> = labels.iter().map(|&v| T::c(v)).collect();
    let bce = tape.bce(scores, &y, T::c(BCE_EPS))?;
    let reg = tape.scale(l_cl, T::c(lambda))?;
    tape.add(bce, reg)
}

/// Critical instances gathered from a bag and L2-normalised, `[N, C]`.
pub fn critical_embeddings<T: Element>(tape: &Tape<T>, instances: Var, critical: &[usize]) -> Result<Var, TensorError> {
    let x = tape.take_rows(instances, critical)?;
    tape.l2_normalize(x, T::c(1e-12))
}
