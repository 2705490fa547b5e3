//! The assembled two-view classifier with its ablation switches.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{make_two_stream, Backbone, BackboneConfig, BackboneError, TwoStream, NUM_STAGES};
use crate::cve::{self, CveError, CveIntermediates, CveParams};
use crate::fusion::{self, FusionError, GlobalEncoderParams, SharedDecoderParams};
use crate::micl::{self, DsmilParams, InstanceBag, MiclError, MixstyleConfig};
use crate::nn::{Bound, Linear, ParamError, ParamSet};
use crate::tensor::{Element, Tape, Tensor, TensorError, Var};
use crate::{Mode, View};

/// Which components are active. Each flag adds real parameters or
/// computation, so every arm is a different network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_cve: bool,
    pub use_mixstyle_stages: bool,
    pub use_global_encoder: bool,
    pub use_micl: bool,
}

impl AblationFlags {
    pub const FULL: AblationFlags =
        AblationFlags { use_cve: true, use_mixstyle_stages: true, use_global_encoder: true, use_micl: true };

    /// Parses `baseline`, `full` or a `+`-joined subset of `cve`, `ms`, `ge`,
    /// `micl` (for example `cve+ms+ge`).
    pub fn parse_arm(name: &str) -> Option<Self> {
        match name {
            "baseline" => return Some(AblationFlags::default()),
            "full" => return Some(AblationFlags::FULL),
            _ => {}
        }
        let mut f = AblationFlags::default();
        for part in name.split('+') {
            let slot = match part {
                "cve" => &mut f.use_cve,
                "ms" => &mut f.use_mixstyle_stages,
                "ge" => &mut f.use_global_encoder,
                "micl" => &mut f.use_micl,
                _ => return None,
            };
            if *slot {
                return None;
            }
            *slot = true;
        }
        Some(f)
    }

    pub fn arm_name(&self) -> String {
        if *self == AblationFlags::FULL {
            return "full".into();
        }
        let parts: Vec<&str> = [
            (self.use_cve, "cve"),
            (self.use_mixstyle_stages, "ms"),
            (self.use_global_encoder, "ge"),
            (self.use_micl, "micl"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub reduction_ratio: usize,
    pub tiles: usize,
    pub heads: usize,
    /// Token grid side; `None` means `min(stage-4 size, 16)`.
    pub pooled_resolution: Option<usize>,
    pub tau: f64,
    pub lambda: f64,
    pub noise_sigma: f64,
    pub stage_mixstyle_p: f64,
    pub ensemble_weights: [f64; 3],
    pub flags: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            reduction_ratio: 16,
            tiles: 4,
            heads: 4,
            pooled_resolution: None,
            tau: 0.5,
            lambda: 0.5,
            noise_sigma: 0.01,
            stage_mixstyle_p: 0.5,
            ensemble_weights: [1.0, 1.0, 1.0],
            flags: AblationFlags::FULL,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Cve(#[from] CveError),
    #[error(transparent)]
    Micl(#[from] MiclError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_sh: Var,
    pub l_cc: Var,
    pub l_mlo: Var,
    pub total: Var,
}

pub struct ForwardOutput {
    /// `[N, 1]` per-view and shared scores.
    pub s_cc: Var,
    pub s_mlo: Var,
    pub s_shared: Var,
    pub loss: Option<LossTerms>,
    /// `[cc, mlo]` per CVE level (empty when CVE is off).
    pub cve: Vec<[CveIntermediates; 2]>,
    pub bags: Option<[InstanceBag; 2]>,
    /// Stage-4 maps after CVE and before fusion, `[cc, mlo]`.
    pub stage4: [Var; 2],
}

/// Per-sample scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub s_cc: f64,
    pub s_mlo: f64,
    pub s_shared: f64,
    pub breast: f64,
}

#[derive(Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    streams: TwoStream,
    cve: Vec<CveParams>,
    micl: Option<[DsmilParams; 2]>,
    heads: Option<[Linear; 2]>,
    encoder: Option<GlobalEncoderParams>,
    decoder: SharedDecoderParams,
}

impl<T: Element> Model<T> {
    /// Builds and initialises every parameter from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let c = config;
        c.backbone.validate()?;
        let sizes = c.backbone.stage_sizes();
        let s4 = sizes[NUM_STAGES - 1];
        let ch = &c.backbone.stage_channels;
        let c4 = ch[NUM_STAGES - 1];
        if c.flags.use_micl && (c.tiles == 0 || s4 % c.tiles != 0) {
            return Err(ModelError::Config(format!("{} tiles per side do not divide the {s4}x{s4} stage-4 map", c.tiles)));
        }
        if !(c.tau > 0.0) || !(c.lambda >= 0.0) || !(0.0..=1.0).contains(&c.stage_mixstyle_p) || !(c.noise_sigma >= 0.0) {
            return Err(ModelError::Config("tau must be positive; lambda, noise_sigma non-negative; stage_mixstyle_p in [0,1]".into()));
        }
        fusion::breast_prediction(0.5, 0.5, 0.5, c.ensemble_weights)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cc = Backbone::new(&mut params, "backbone.cc", &c.backbone, &mut rng)?;
        let mlo = Backbone::new(&mut params, "backbone.mlo", &c.backbone, &mut rng)?;
        let streams = make_two_stream(cc, mlo)?;
        let mut cve = Vec::new();
        if c.flags.use_cve {
            for (level, &channels) in ch.iter().take(3).enumerate() {
                cve.push(CveParams::new(&mut params, &format!("cve.level{}", level + 1), channels, c.reduction_ratio, &mut rng)?);
            }
        }
        let (micl, heads) = if c.flags.use_micl {
            let a = DsmilParams::new(&mut params, "micl.cc", c4, &mut rng)?;
            let b = DsmilParams::new(&mut params, "micl.mlo", c4, &mut rng)?;
            (Some([a, b]), None)
        } else {
            let a = Linear::new(&mut params, "head.cc", c4, 1, false, &mut rng)?;
            let b = Linear::new(&mut params, "head.mlo", c4, 1, false, &mut rng)?;
            (None, Some([a, b]))
        };
        let encoder = if c.flags.use_global_encoder {
            let pooled = c.pooled_resolution.unwrap_or_else(|| fusion::default_pooled_resolution(s4));
            Some(GlobalEncoderParams::new(&mut params, "encoder", c4, c.heads, s4, pooled, &mut rng)?)
        } else {
            None
        };
        let decoder = SharedDecoderParams::new(&mut params, "decoder", c4, &mut rng)?;
        Ok(Model { config: config.clone(), params, streams, cve, micl, heads, encoder, decoder })
    }

    pub fn streams(&self) -> &TwoStream {
        &self.streams
    }

    pub fn cve_params(&self) -> &[CveParams] {
        &self.cve
    }

    pub fn micl_params(&self) -> Option<&[DsmilParams; 2]> {
        self.micl.as_ref()
    }

    pub fn encoder_params(&self) -> Option<&GlobalEncoderParams> {
        self.encoder.as_ref()
    }

    pub fn decoder_params(&self) -> &SharedDecoderParams {
        &self.decoder
    }

    fn mixstyle_config(&self) -> MixstyleConfig {
        MixstyleConfig { noise_sigma: self.config.noise_sigma, ..MixstyleConfig::default() }
    }

    /// Stage-level Mixstyle, applied with probability `stage_mixstyle_p`.
    fn stage_mixstyle<R: Rng + ?Sized>(&self, tape: &Tape<T>, x: Var, rng: &mut R) -> Result<Var, ModelError> {
        let n = tape.dims(x)[0];
        let apply = rng.random::<f64>() < self.config.stage_mixstyle_p;
        if !apply || n < 2 {
            return Ok(x);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let m: f64 = rng.random();
        Ok(micl::mixstyle(tape, x, &perm, m, &self.mixstyle_config())?)
    }

    /// Full forward pass on `[N,1,S,S]` CC and MLO batches. Losses are built
    /// when `labels` are given; training mode draws every random choice from
    /// `rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        cc: Var,
        mlo: Var,
        labels: Option<&[f64]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput, ModelError> {
        let flags = self.config.flags;
        self.streams.cc.check_input(tape, cc)?;
        self.streams.mlo.check_input(tape, mlo)?;
        let (dc, dm) = (tape.dims(cc), tape.dims(mlo));
        if dc[0] != dm[0] {
            return Err(ModelError::Config(format!("view batches differ: {} vs {}", dc[0], dm[0])));
        }
        let n = dc[0];
        if let Some(y) = labels {
            if y.len() != n {
                return Err(MiclError::Labels(y.len(), n).into());
            }
        }

        let (mut x_cc, mut x_mlo) = (cc, mlo);
        let mut cve_out = Vec::new();
        for s in 0..NUM_STAGES {
            x_cc = self.streams.cc.stage(tape, bound, s, x_cc)?;
            x_mlo = self.streams.mlo.stage(tape, bound, s, x_mlo)?;
            if s < 3 {
                if flags.use_mixstyle_stages && mode == Mode::Train {
                    x_cc = self.stage_mixstyle(tape, x_cc, rng)?;
                    x_mlo = self.stage_mixstyle(tape, x_mlo, rng)?;
                }
                if flags.use_cve {
                    let out = cve::enhance(tape, bound, &self.cve[s], x_cc, x_mlo)?;
                    x_cc = out[0].f_hat;
                    x_mlo = out[1].f_hat;
                    cve_out.push(out);
                }
            }
        }
        let stage4 = [x_cc, x_mlo];

        let want_loss = labels.is_some();
        let mut view_scores = [x_cc; 2];
        let mut view_losses = [x_cc; 2];
        let mut bags = None;
        if let Some(micl_params) = &self.micl {
            let mut bag_pair = Vec::with_capacity(2);
            for (k, (&f, view)) in stage4.iter().zip([View::Cc, View::Mlo]).enumerate() {
                let p = &micl_params[k];
                let bag = micl::tile_to_bag(tape, bound, p, f, self.config.tiles, view)?;
                let scores = micl::dsmil_score(tape, bound, p, &bag)?;
                view_scores[k] = scores.s;
                if let (Some(y), Mode::Train) = (labels, mode) {
                    let aug = micl::augment_ood(tape, f, &self.mixstyle_config(), mode, rng)?;
                    let aug_inst = micl::tile_instances(tape, aug, self.config.tiles)?;
                    let anchor = micl::critical_embeddings(tape, bag.instances, &bag.critical)?;
                    let positive = micl::critical_embeddings(tape, aug_inst, &bag.critical)?;
                    let sets = micl::contrastive_sets(tape, anchor, positive, y, self.config.tau, self.config.lambda)?;
                    let l_cl = micl::contrastive_loss(tape, &sets)?;
                    view_losses[k] = micl::micl_view_loss(tape, scores.s, y, l_cl, self.config.lambda)?;
                } else if let Some(y) = labels {
                    let zero = tape.constant(Tensor::scalar(T::zero()));
                    view_losses[k] = micl::micl_view_loss(tape, scores.s, y, zero, 0.0)?;
                }
                bag_pair.push(bag);
            }
            let mlo_bag = bag_pair.pop().unwrap();
            let cc_bag = bag_pair.pop().unwrap();
            bags = Some([cc_bag, mlo_bag]);
        } else if let Some(heads) = &self.heads {
            for (k, &f) in stage4.iter().enumerate() {
                let pooled = tape.gap(f)?;
                view_scores[k] = tape.sigmoid(heads[k].forward(tape, bound, pooled)?)?;
                if let Some(y) = labels {
                    let yt: Vec<T> = y.iter().map(|&v| T::c(v)).collect();
                    view_losses[k] = tape.bce(view_scores[k], &yt, T::c(micl::BCE_EPS))?;
                }
            }
        }

        let g = match &self.encoder {
            Some(enc) => fusion::global_encode(tape, bound, enc, x_cc, x_mlo)?.g,
            None => {
                let a = tape.gap(x_cc)?;
                let b = tape.gap(x_mlo)?;
                tape.add(a, b)?
            }
        };
        let s_shared = fusion::shared_decode(tape, bound, &self.decoder, g)?;

        let loss = match labels {
            Some(y) if want_loss => {
                let yt: Vec<T> = y.iter().map(|&v| T::c(v)).collect();
                let l_sh = tape.bce(s_shared, &yt, T::c(micl::BCE_EPS))?;
                let total = fusion::total_loss(tape, l_sh, view_losses[0], view_losses[1])?;
                Some(LossTerms { l_sh, l_cc: view_losses[0], l_mlo: view_losses[1], total })
            }
            _ => None,
        };
        Ok(ForwardOutput { s_cc: view_scores[0], s_mlo: view_scores[1], s_shared, loss, cve: cve_out, bags, stage4 })
    }

    /// Evaluation-mode scores for a batch of `[N,1,S,S]` images.
    pub fn predict(&self, cc: &Tensor<T>, mlo: &Tensor<T>) -> Result<Vec<Prediction>, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let (a, b) = (tape.constant(cc.clone()), tape.constant(mlo.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&tape, &bound, a, b, None, Mode::Eval, &mut rng)?;
        let (sc, sm, ss) = (tape.value(out.s_cc).to_f64(), tape.value(out.s_mlo).to_f64(), tape.value(out.s_shared).to_f64());
        sc.iter()
            .zip(&sm)
            .zip(&ss)
            .map(|((&c, &m), &s)| {
                let breast = fusion::breast_prediction(c, m, s, self.config.ensemble_weights)?;
                Ok(Prediction { s_cc: c, s_mlo: m, s_shared: s, breast })
            })
            .collect()
    }

    /// Evaluation-mode `(ŵ, v)` per CVE level and view, `[cc, mlo]`; empty
    /// when CVE is off.
    pub fn cve_maps(&self, cc: &Tensor<T>, mlo: &Tensor<T>) -> Result<Vec<[(Tensor<T>, Tensor<T>); 2]>, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let (a, b) = (tape.constant(cc.clone()), tape.constant(mlo.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&tape, &bound, a, b, None, Mode::Eval, &mut rng)?;
        Ok(out.cve.iter().map(|[c, m]| [(tape.value(c.w_hat), tape.value(c.v)), (tape.value(m.w_hat), tape.value(m.v))]).collect())
    }
}
