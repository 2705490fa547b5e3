mod common;

use mammodg::backbone::{make_two_stream, Backbone, BackboneConfig, BackboneError, NUM_STAGES};
use mammodg::nn::ParamSet;
use mammodg::tensor::gradcheck::{check_inputs, GradCheckConfig};
use mammodg::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{bits, uniform};

fn build(cfg: &BackboneConfig, seed: u64) -> (ParamSet<f64>, Backbone) {
    let mut p = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Backbone::new(&mut p, "bb", cfg, &mut rng).unwrap();
    (p, b)
}

fn run(p: &ParamSet<f64>, b: &Backbone, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let v = tape.constant(x.clone());
    b.forward(&tape, &bound, v).unwrap().into_iter().map(|s| tape.value(s)).collect()
}

#[test]
fn default_config_stage_dims() {
    let cfg = BackboneConfig::default();
    assert_eq!((cfg.stage_channels.clone(), cfg.blocks_per_stage, cfg.input_channels, cfg.input_size), (vec![16, 32, 64, 128], 1, 1, 128));
    let (p, b) = build(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let outs = run(&p, &b, &uniform(&mut rng, &[2, 1, 128, 128], 0.0, 1.0));
    let dims: Vec<Vec<usize>> = outs.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(dims, [vec![2, 16, 64, 64], vec![2, 32, 32, 32], vec![2, 64, 16, 16], vec![2, 128, 8, 8]]);
}

#[test]
fn odd_sizes_floor_halve() {
    let cfg = BackboneConfig { stage_channels: vec![2, 2, 2, 2], input_size: 40, ..Default::default() };
    assert_eq!(cfg.stage_sizes(), [20, 10, 5, 3]);
    let (p, b) = build(&cfg, 0);
    let outs = run(&p, &b, &Tensor::full(&[1, 1, 40, 40], 0.5));
    assert_eq!(outs[3].dims(), &[1, 2, 3, 3]);
}

#[test]
fn zero_weights_give_zero_maps() {
    let cfg = BackboneConfig { stage_channels: vec![4, 4, 8, 8], blocks_per_stage: 2, input_size: 32, ..Default::default() };
    let (mut p, b) = build(&cfg, 0);
    let names: Vec<String> = p.names().to_vec();
    for n in names {
        let d = p.by_name(&n).unwrap().dims().to_vec();
        p.set(&n, Tensor::zeros(&d)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in run(&p, &b, &uniform(&mut rng, &[2, 1, 32, 32], -1.0, 1.0)) {
        assert!(s.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let cfg = BackboneConfig { input_size: 32, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, &[2, 1, 32, 32], 0.0, 1.0);
    let (p1, b1) = build(&cfg, 7);
    let (p2, b2) = build(&cfg, 7);
    assert_eq!(p1, p2);
    for (a, b) in run(&p1, &b1, &x).iter().zip(run(&p2, &b2, &x).iter()) {
        assert_eq!(bits(a), bits(b));
    }
    let (p3, _) = build(&cfg, 8);
    assert_ne!(p1, p3);
}

#[test]
fn input_shape_errors() {
    let cfg = BackboneConfig { input_size: 32, ..Default::default() };
    let (p, b) = build(&cfg, 0);
    for dims in [vec![1, 2, 32, 32], vec![1, 1, 32, 16], vec![1, 1, 16, 16], vec![1, 32, 32]] {
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&dims));
        let err = b.forward(&tape, &bound, x).unwrap_err().to_string();
        assert!(err.contains("backbone"), "{err}");
    }
}

#[test]
fn config_validation() {
    assert!(matches!(BackboneConfig { stage_channels: vec![1; 5], ..Default::default() }.validate(), Err(BackboneError::Stages(5))));
    assert!(matches!(BackboneConfig { blocks_per_stage: 0, ..Default::default() }.validate(), Err(BackboneError::Config(_))));
    assert!(matches!(BackboneConfig { input_size: 8, ..Default::default() }.validate(), Err(BackboneError::Config(_))));
}

#[test]
fn parameter_count_matches_closed_form() {
    // 3x3 kernels plus biases per stage: 16·1·9+16, 32·16·9+32, 64·32·9+64, 128·64·9+128
    let expected = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128);
    let cfg = BackboneConfig::default();
    assert_eq!(cfg.param_count(), expected);
    let (p, _) = build(&cfg, 0);
    assert_eq!(p.num_scalars(), expected);

    let cfg2 = BackboneConfig { blocks_per_stage: 2, ..Default::default() };
    let extra: usize = [16, 32, 64, 128].iter().map(|&c| c * c * 9 + c).sum();
    assert_eq!(build(&cfg2, 0).0.num_scalars(), expected + extra);
}

fn two_stream(cfg: &BackboneConfig) -> (ParamSet<f64>, mammodg::backbone::TwoStream) {
    let mut p = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cc = Backbone::new(&mut p, "backbone.cc", cfg, &mut rng).unwrap();
    let mlo = Backbone::new(&mut p, "backbone.mlo", cfg, &mut rng).unwrap();
    (p, make_two_stream(cc, mlo).unwrap())
}

#[test]
fn streams_are_disjoint() {
    let cfg = BackboneConfig { stage_channels: vec![4, 4, 8, 8], input_size: 32, ..Default::default() };
    let (mut p, ts) = two_stream(&cfg);
    assert_eq!(p.count_prefix("backbone.cc"), p.count_prefix("backbone.mlo"));
    assert_eq!(p.count_prefix("backbone.cc"), cfg.param_count());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&mut rng, &[1, 1, 32, 32], 0.0, 1.0);
    let before = run(&p, &ts.mlo, &x);
    let name = "backbone.cc.stage1.block0.weight";
    let mut w = p.by_name(name).unwrap().clone();
    let perturbed: Vec<f64> = w.data().iter().map(|v| v + 0.5).collect();
    w = Tensor::new(w.dims().to_vec(), perturbed).unwrap();
    p.set(name, w).unwrap();
    let after = run(&p, &ts.mlo, &x);
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(bits(a), bits(b));
    }

    // d(CC output)/d(MLO params) is identically zero
    let tape = Tape::new();
    let bound = p.bind(&tape, true);
    let xv = tape.constant(x.clone());
    let out = ts.cc.forward(&tape, &bound, xv).unwrap();
    let loss = tape.sum(out[NUM_STAGES - 1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, n) in p.names().iter().enumerate() {
        let g = grads.get(bound.vars()[i]);
        if n.starts_with("backbone.mlo") {
            assert!(g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "{n}");
        }
    }
}

#[test]
fn mismatched_streams_rejected() {
    let mut p = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Backbone::new(&mut p, "a", &BackboneConfig { input_size: 32, ..Default::default() }, &mut rng).unwrap();
    let b = Backbone::new(&mut p, "b", &BackboneConfig { input_size: 64, ..Default::default() }, &mut rng).unwrap();
    assert!(matches!(make_two_stream(a, b), Err(BackboneError::StreamMismatch)));
}

#[test]
fn gradient_check_through_backbone() {
    let cfg = BackboneConfig { stage_channels: vec![2, 3, 3, 4], input_size: 32, ..Default::default() };
    let (p, b) = build(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut inputs = vec![uniform(&mut rng, &[1, 1, 32, 32], 0.0, 1.0)];
    inputs.extend(p.tensors().iter().cloned());
    let cfg_gc = GradCheckConfig { max_elements_per_input: Some(8), ..GradCheckConfig::default() };
    let report = check_inputs(
        |t, v| {
            let bound = mammodg::nn::Bound::from_vars(v[1..].to_vec());
            let out = b.forward(t, &bound, v[0])?;
            t.sum(out[NUM_STAGES - 1])
        },
        &inputs,
        &cfg_gc,
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}
