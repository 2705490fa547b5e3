mod common;

use mammodg::cve::{
    attend, bottleneck, cross_channel_enhance, cross_view_enhance, enhance, geometric_vector, CveError, CveParams,
};
use mammodg::nn::{Bound, ParamSet};
use mammodg::tensor::gradcheck::{check_inputs, GradCheckConfig};
use mammodg::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{bits, uniform};

fn params(c: usize, r: usize, seed: u64) -> (ParamSet<f64>, CveParams) {
    let mut p = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cp = CveParams::new(&mut p, "cve", c, r, &mut rng).unwrap();
    (p, cp)
}

fn zero_all(p: &mut ParamSet<f64>, prefix: &str) {
    let names: Vec<String> = p.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let d = p.by_name(&n).unwrap().dims().to_vec();
        p.set(&n, Tensor::zeros(&d)).unwrap();
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn bottleneck_widths() {
    assert_eq!(bottleneck(32, 16), 2);
    assert_eq!(bottleneck(16, 16), 1);
    assert_eq!(bottleneck(8, 16), 1);
    let mut p = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(CveParams::new(&mut p, "x", 8, 0, &mut rng), Err(CveError::Reduction)));
    assert!(matches!(CveParams::new(&mut p, "y", 0, 4, &mut rng), Err(CveError::Channels)));
}

#[test]
fn normalised_input_passes_through() {
    let (p, cp) = params(3, 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let raw = tape.constant(uniform(&mut rng, &[2, 3, 5, 5], -2.0, 2.0));
    let f = tape.instance_norm(raw, 1e-12).unwrap();
    let out = cross_channel_enhance(&tape, &bound, &cp, f).unwrap();
    let fv = tape.value(f).to_f64();
    assert!(tape.value(out.r).to_f64().iter().all(|v| v.abs() <= 1e-5));
    assert!(max_abs_diff(&tape.value(out.f_tilde_plus).to_f64(), &fv) <= 1e-5);
}

#[test]
fn zero_bottleneck_gives_half_residual() {
    let (mut p, cp) = params(4, 2, 0);
    zero_all(&mut p, "cve.theta1");
    zero_all(&mut p, "cve.theta2");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let f = tape.constant(uniform(&mut rng, &[2, 4, 6, 6], -1.0, 3.0));
    let out = cross_channel_enhance(&tape, &bound, &cp, f).unwrap();
    assert!(tape.value(out.t).data().iter().all(|&v| v == 0.5));
    let (fv, ft) = (tape.value(f).to_f64(), tape.value(out.f_tilde).to_f64());
    let expected: Vec<f64> = fv.iter().zip(&ft).map(|(a, b)| b + 0.5 * (a - b)).collect();
    assert!(max_abs_diff(&tape.value(out.f_tilde_plus).to_f64(), &expected) <= 1e-12);
    // R = F − F̃ exactly
    let r = tape.value(out.r).to_f64();
    for i in 0..fv.len() {
        assert_eq!(r[i], fv[i] - ft[i]);
    }
}

#[test]
fn channel_shapes_follow_config() {
    let (p, cp) = params(32, 16, 0);
    assert_eq!(cp.hidden(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let f = tape.constant(uniform(&mut rng, &[1, 32, 8, 8], -1.0, 1.0));
    let out = cross_channel_enhance(&tape, &bound, &cp, f).unwrap();
    assert_eq!(tape.dims(out.t), vec![1, 32]);
    assert_eq!(tape.dims(out.f_tilde_plus), vec![1, 32, 8, 8]);
    assert_eq!(p.by_name("cve.theta1.weight").unwrap().dims(), &[2, 32]);
    assert_eq!(p.by_name("cve.theta2.weight").unwrap().dims(), &[32, 2]);
    assert_eq!(p.by_name("cve.theta3.weight").unwrap().dims(), &[1, 32, 3, 3]);
    let bad = tape.constant(Tensor::zeros(&[1, 16, 8, 8]));
    assert!(cross_channel_enhance(&tape, &bound, &cp, bad).is_err());
}

#[test]
fn geometric_vector_examples() {
    let tape = Tape::<f64>::new();
    let w = tape.constant(Tensor::new(vec![1, 1, 2, 3], vec![0.1, 0.9, 0.3, 0.5, 0.2, 0.7]).unwrap());
    let v = geometric_vector(&tape, w).unwrap();
    assert_eq!(tape.value(v).data(), &[0.5, 0.9, 0.7]);
    let c = tape.constant(Tensor::full(&[2, 1, 4, 5], 0.5));
    assert!(tape.value(geometric_vector(&tape, c).unwrap()).data().iter().all(|&x| x == 0.5));
    let multi = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.5));
    assert!(geometric_vector(&tape, multi).is_err());
}

#[test]
fn geometric_vector_matches_scan_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = uniform(&mut rng, &[10, 1, 6, 6], 0.0, 1.0);
    let tape = Tape::new();
    let v = tape.value(geometric_vector(&tape, tape.constant(t.clone())).unwrap());
    let d = t.data();
    for n in 0..10 {
        for x in 0..6 {
            let mut best = f64::NEG_INFINITY;
            for y in 0..6 {
                best = best.max(d[n * 36 + y * 6 + x]);
            }
            assert_eq!(v.data()[n * 6 + x], best);
        }
    }
}

proptest! {
    #[test]
    fn geometric_vector_ignores_row_order(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = uniform(&mut rng, &[1, 1, h, w], 0.0, 1.0);
        let mut rows: Vec<usize> = (0..h).collect();
        rows.shuffle(&mut rng);
        let permuted: Vec<f64> = rows.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].to_vec()).collect();
        let tape = Tape::new();
        let a = tape.value(geometric_vector(&tape, tape.constant(t.clone())).unwrap());
        let b = tape.value(geometric_vector(&tape, tape.constant(Tensor::new(vec![1, 1, h, w], permuted).unwrap())).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn outputs_keep_dims_and_bounds(seed in any::<u64>(), c in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let (p, cp) = params(c, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let a = tape.constant(uniform(&mut rng, &[2, c, h, w], -2.0, 2.0));
        let b = tape.constant(uniform(&mut rng, &[2, c, h, w], -2.0, 2.0));
        let out = enhance(&tape, &bound, &cp, a, b).unwrap();
        for o in &out {
            prop_assert_eq!(tape.dims(o.f_hat), vec![2, c, h, w]);
            for var in [o.t, o.w, o.v, o.w_hat] {
                prop_assert!(tape.value(var).data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
            let (fp, fh) = (tape.value(o.f_tilde_plus), tape.value(o.f_hat));
            for (x, y) in fp.data().iter().zip(fh.data()) {
                prop_assert!(y.abs() <= 2.0 * x.abs() + 1e-12);
            }
        }
    }
}

#[test]
fn zero_theta3_scales_by_five_quarters() {
    let (mut p, cp) = params(4, 2, 0);
    zero_all(&mut p, "cve.theta3");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let a = tape.constant(uniform(&mut rng, &[2, 4, 5, 5], -1.0, 1.0));
    let b = tape.constant(uniform(&mut rng, &[2, 4, 5, 5], -1.0, 1.0));
    let [cc, mlo] = cross_view_enhance(&tape, &bound, &cp, a, b).unwrap();
    for ((w, v, w_hat, out), input) in [(cc, a), (mlo, b)] {
        assert!(tape.value(w).data().iter().all(|&x| x == 0.5));
        assert!(tape.value(v).data().iter().all(|&x| x == 0.5));
        assert!(tape.value(w_hat).data().iter().all(|&x| x == 0.25));
        let expected: Vec<f64> = tape.value(input).data().iter().map(|x| 1.25 * x).collect();
        assert!(max_abs_diff(&tape.value(out).to_f64(), &expected) <= 1e-9);
    }
}

#[test]
fn all_ones_partner_is_self_attention() {
    let (p, cp) = params(3, 1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let fp = tape.constant(uniform(&mut rng, &[1, 3, 4, 4], -1.0, 1.0));
    let w = mammodg::cve::spatial_attention(&tape, &bound, &cp, fp).unwrap();
    let ones = tape.constant(Tensor::full(&[1, 1, 1, 4], 1.0));
    let (w_hat, out) = attend(&tape, fp, w, ones).unwrap();
    assert_eq!(tape.value(w_hat).data(), tape.value(w).data());
    let (f, wv) = (tape.value(fp), tape.value(w));
    for c in 0..3 {
        for i in 0..16 {
            let x = f.data()[c * 16 + i];
            assert_eq!(tape.value(out).data()[c * 16 + i], x + x * wv.data()[i]);
        }
    }
}

#[test]
fn swapping_views_swaps_outputs() {
    let (p, cp) = params(4, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, y) = (uniform(&mut rng, &[2, 4, 6, 6], -1.0, 1.0), uniform(&mut rng, &[2, 4, 6, 6], -1.0, 1.0));
    let go = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let out = enhance(&tape, &bound, &cp, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        (tape.value(out[0].f_hat), tape.value(out[1].f_hat))
    };
    let (a1, b1) = go(&x, &y);
    let (a2, b2) = go(&y, &x);
    assert_eq!(bits(&a1), bits(&b2));
    assert_eq!(bits(&b1), bits(&a2));
}

#[test]
fn view_dim_mismatch_is_rejected() {
    let (p, cp) = params(4, 2, 0);
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let a = tape.constant(Tensor::zeros(&[1, 4, 6, 6]));
    let b = tape.constant(Tensor::zeros(&[1, 4, 6, 5]));
    assert!(cross_view_enhance(&tape, &bound, &cp, a, b).is_err());
}

#[test]
fn gradient_check_through_full_cve() {
    for (dims, c) in [(vec![1, 8, 6, 6], 8), (vec![2, 4, 6, 6], 4)] {
        let (p, cp) = params(c, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inputs = vec![uniform(&mut rng, &dims, -1.0, 1.0), uniform(&mut rng, &dims, -1.0, 1.0)];
        inputs.extend(p.tensors().iter().cloned());
        let cfg = GradCheckConfig { max_elements_per_input: Some(12), ..GradCheckConfig::default() };
        let report = check_inputs(
            |t, v| {
                let bound = Bound::from_vars(v[2..].to_vec());
                let out = enhance(t, &bound, &cp, v[0], v[1])?;
                t.add(t.sum(out[0].f_hat)?, t.sum(out[1].f_hat)?)
            },
            &inputs,
            &cfg,
        )
        .unwrap();
        assert!(report.passed, "{dims:?}: max rel err {}", report.max_rel_err);
    }
}
