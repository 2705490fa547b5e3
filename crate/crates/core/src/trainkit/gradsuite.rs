//! Finite-difference checks of every differentiable module, run in f64 on
//! small shapes with randomly initialised (never zero) parameters.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::cve::{self, CveParams};
use crate::fusion::{self, GlobalEncoderParams, SharedDecoderParams};
use crate::micl::{self, DsmilParams, MixstyleConfig};
use crate::model::{AblationFlags, Model, ModelConfig};
use crate::nn::{self, Bound, ParamSet};
use crate::tensor::gradcheck::{check_inputs, GradCheckConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::{Mode, View};

#[derive(Debug, Clone)]
pub struct GradSuiteConfig {
    /// Elements sampled per input tensor.
    pub elements_per_input: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig { elements_per_input: 6, tolerance: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements sitting on a kink (ReLU, max, argmax switch).
    pub excluded: usize,
    pub passed: bool,
    pub seconds: f64,
}

type Loss = Result<Var, String>;

fn check<F>(module: &'static str, cfg: &GradSuiteConfig, data: Vec<Tensor<f64>>, params: &ParamSet<f64>, f: F) -> Result<ModuleCheck, TensorError>
where
    F: Fn(&Tape<f64>, &Bound, &[Var]) -> Loss,
{
    let t0 = Instant::now();
    let k = data.len();
    let mut inputs = data;
    inputs.extend(params.tensors().iter().cloned());
    let gc = GradCheckConfig {
        tolerance: cfg.tolerance,
        max_elements_per_input: Some(cfg.elements_per_input),
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let report = check_inputs(
        |tape, vars| {
            let bound = Bound::from_vars(vars[k..].to_vec());
            f(tape, &bound, &vars[..k])
        },
        &inputs,
        &gc,
    )?;
    Ok(ModuleCheck {
        module,
        max_rel_err: report.max_rel_err,
        checked: report.elements.len(),
        excluded: report.excluded,
        passed: report.passed,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// `Σ w ⊙ x` with a fixed random `w`, so every output element matters.
fn probe(tape: &Tape<f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
    let w = tape.constant(nn::normal(&tape.dims(x), 1.0, rng));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn sum_all(tape: &Tape<f64>, xs: &[Var]) -> Result<Var, TensorError> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

/// Overwrites every parameter with N(0, std²) so zero initialisations do not
/// hide any path.
fn randomize(params: &mut ParamSet<f64>, std: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().to_vec();
    for n in names {
        let dims = params.by_name(&n).unwrap().dims().to_vec();
        params.set(&n, nn::normal(&dims, std, rng)).unwrap();
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn backbone(cfg: &GradSuiteConfig) -> Result<ModuleCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bc = BackboneConfig { stage_channels: vec![3, 4, 4, 5], blocks_per_stage: 2, input_channels: 1, input_size: 16 };
    let mut params = ParamSet::new();
    let net = Backbone::new(&mut params, "backbone", &bc, &mut rng).unwrap();
    let x = nn::normal(&[2, 1, 16, 16], 1.0, &mut rng);
    let seed = cfg.seed;
    check("backbone", cfg, vec![x], &params, |tape, b, d| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let outs = net.forward(tape, b, d[0]).map_err(err)?;
        let probes: Vec<Var> = outs.iter().map(|&o| probe(tape, o, &mut r)).collect::<Result<_, _>>().map_err(err)?;
        sum_all(tape, &probes).map_err(err)
    })
}

fn cve_check(cfg: &GradSuiteConfig) -> Result<ModuleCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let p = CveParams::new(&mut params, "cve", 4, 2, &mut rng).unwrap();
    randomize(&mut params, 0.5, &mut rng);
    let a = nn::normal(&[2, 4, 4, 5], 1.0, &mut rng);
    let b = nn::normal(&[2, 4, 4, 5], 1.0, &mut rng);
    let seed = cfg.seed;
    check("cve", cfg, vec![a, b], &params, |tape, bd, d| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let out = cve::enhance(tape, bd, &p, d[0], d[1]).map_err(err)?;
        let pc = probe(tape, out[0].f_hat, &mut r).map_err(err)?;
        let pm = probe(tape, out[1].f_hat, &mut r).map_err(err)?;
        tape.add(pc, pm).map_err(err)
    })
}

/// DSMIL scoring, the feature augmentation and the contrastive term together.
fn micl_check(cfg: &GradSuiteConfig) -> Result<ModuleCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let p = DsmilParams::new(&mut params, "micl", 4, &mut rng).unwrap();
    randomize(&mut params, 0.5, &mut rng);
    let f = nn::normal(&[4, 4, 4, 4], 1.0, &mut rng);
    let labels = [1.0, 0.0, 1.0, 0.0];
    let seed = cfg.seed;
    check("micl", cfg, vec![f], &params, |tape, bd, d| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let bag = micl::tile_to_bag(tape, bd, &p, d[0], 2, View::Cc).map_err(err)?;
        let scores = micl::dsmil_score(tape, bd, &p, &bag).map_err(err)?;
        let ms = MixstyleConfig::default();
        let aug = micl::augment_ood(tape, d[0], &ms, Mode::Train, &mut r).map_err(err)?;
        let aug_inst = micl::tile_instances(tape, aug, 2).map_err(err)?;
        let anchor = micl::critical_embeddings(tape, bag.instances, &bag.critical).map_err(err)?;
        let positive = micl::critical_embeddings(tape, aug_inst, &bag.critical).map_err(err)?;
        let sets = micl::contrastive_sets(tape, anchor, positive, &labels, 0.5, 0.5).map_err(err)?;
        let l_cl = micl::contrastive_loss(tape, &sets).map_err(err)?;
        micl::micl_view_loss(tape, scores.s, &labels, l_cl, 0.5).map_err(err)
    })
}

fn encoder_check(cfg: &GradSuiteConfig) -> Result<ModuleCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let p = GlobalEncoderParams::new(&mut params, "encoder", 8, 2, 4, 2, &mut rng).unwrap();
    randomize(&mut params, 0.4, &mut rng);
    let a = nn::normal(&[2, 8, 4, 4], 1.0, &mut rng);
    let b = nn::normal(&[2, 8, 4, 4], 1.0, &mut rng);
    let seed = cfg.seed;
    check("global_encoder", cfg, vec![a, b], &params, |tape, bd, d| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let enc = fusion::global_encode(tape, bd, &p, d[0], d[1]).map_err(err)?;
        let probes = [probe(tape, enc.cc, &mut r), probe(tape, enc.mlo, &mut r), probe(tape, enc.g, &mut r)];
        let probes: Vec<Var> = probes.into_iter().collect::<Result<_, _>>().map_err(err)?;
        sum_all(tape, &probes).map_err(err)
    })
}

fn decoder_check(cfg: &GradSuiteConfig) -> Result<ModuleCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let p = SharedDecoderParams::new(&mut params, "decoder", 8, &mut rng).unwrap();
    let g = nn::normal(&[3, 8], 1.0, &mut rng);
    let y = [1.0, 0.0, 1.0];
    check("shared_decoder", cfg, vec![g], &params, |tape, bd, d| {
        let s = fusion::shared_decode(tape, bd, &p, d[0]).map_err(err)?;
        tape.bce(s, &y, micl::BCE_EPS).map_err(err)
    })
}

/// Tiny configuration of the whole network, every component enabled.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { stage_channels: vec![3, 4, 4, 8], blocks_per_stage: 1, input_channels: 1, input_size: 32 },
        reduction_ratio: 2,
        tiles: 2,
        heads: 2,
        pooled_resolution: None,
        flags: AblationFlags::FULL,
        ..ModelConfig::default()
    }
}

fn full_model(cfg: &GradSuiteConfig) -> Result<ModuleCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model: Model<f64> = Model::new(&tiny_model_config(), cfg.seed).unwrap();
    randomize(&mut model.params, 0.3, &mut rng);
    let cc = nn::normal(&[4, 1, 32, 32], 1.0, &mut rng);
    let mlo = nn::normal(&[4, 1, 32, 32], 1.0, &mut rng);
    let labels = [1.0, 0.0, 0.0, 1.0];
    let seed = cfg.seed;
    let params = model.params.clone();
    check("full_model", cfg, vec![cc, mlo], &params, |tape, bd, d| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let out = model.forward(tape, bd, d[0], d[1], Some(&labels), Mode::Train, &mut r).map_err(err)?;
        Ok(out.loss.expect("labels given").total)
    })
}

/// Runs every module check in a fixed order.
pub fn run_suite(cfg: &GradSuiteConfig) -> Result<Vec<ModuleCheck>, TensorError> {
    Ok(vec![
        backbone(cfg)?,
        cve_check(cfg)?,
        micl_check(cfg)?,
        encoder_check(cfg)?,
        decoder_check(cfg)?,
        full_model(cfg)?,
    ])
}
