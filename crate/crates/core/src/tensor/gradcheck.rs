//! Central finite-difference checks of tape gradients (64-bit only).

use std::fmt::Display;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// Rounding noise of `f`, in ulps of `|f(x)|`. Differences below the
    /// resulting finite-difference noise never count as errors, which matters
    /// for structurally zero gradients.
    pub roundoff_ulps: f64,
    /// A failing element whose one-sided slopes disagree by more than this
    /// (relative) sits on a kink and is excluded rather than failed.
    pub kink_tolerance: f64,
    /// Checks a random subset of this many elements per input, when set.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-5,
            roundoff_ulps: 64.0,
            kink_tolerance: 1e-3,
            max_elements_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub elements: Vec<ElementCheck>,
    pub max_rel_err: f64,
    pub excluded: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ElementCheck> {
        self.elements
            .iter()
            .filter(|e| !e.excluded)
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, E>,
    E: Display,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars).map_err(|e| TensorError::GradCheck(e.to_string()))?;
    if tape.value_ref(out).numel() != 1 {
        return Err(TensorError::GradCheck("function must be scalar-valued".into()));
    }
    Ok(tape.item(out))
}

/// Compares the tape gradient of scalar `f` with central differences
/// `(f(x+h) - f(x-h)) / 2h` for every (or a sampled subset of every) input
/// element.
pub fn check_inputs<F, E>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, E>,
    E: Display,
{
    if cfg.step <= 0.0 {
        return Err(TensorError::GradCheck("step must be positive".into()));
    }
    let base = eval(&f, inputs)?;
    if eval(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(TensorError::GradCheck("function is not deterministic".into()));
    }

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars).map_err(|e| TensorError::GradCheck(e.to_string()))?;
    let grads = tape.backward(out)?;

    // |a - n| at the noise level maps to a relative error of `tolerance`
    let noise = cfg.roundoff_ulps * f64::EPSILON * base.abs().max(1.0) / cfg.step;
    let floor = cfg.abs_floor.max(noise / cfg.tolerance);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut elements = Vec::new();
    let h = cfg.step;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut idx: Vec<usize> = match cfg.max_elements_per_input {
            Some(m) if m < input.numel() => sample(&mut rng, input.numel(), m).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        idx.sort_unstable();
        for j in idx {
            let x0 = input.data()[j];
            work[k].data_mut()[j] = x0 + h;
            let fp = eval(&f, &work)?;
            work[k].data_mut()[j] = x0 - h;
            let fm = eval(&f, &work)?;
            work[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let rel_err = rel(analytic[j], numeric, floor);
            let mut excluded = false;
            if rel_err > cfg.tolerance {
                let fwd = (fp - base) / h;
                let bwd = (base - fm) / h;
                excluded = rel(fwd, bwd, floor) > cfg.kink_tolerance;
            }
            elements.push(ElementCheck { input: k, index: j, analytic: analytic[j], numeric, rel_err, excluded });
        }
    }
    let max_rel_err = elements.iter().filter(|e| !e.excluded).map(|e| e.rel_err).fold(0.0, f64::max);
    let excluded = elements.iter().filter(|e| e.excluded).count();
    Ok(GradCheckReport { elements, max_rel_err, excluded, tolerance: cfg.tolerance, passed: max_rel_err <= cfg.tolerance })
}

/// Single-input form of [`check_inputs`].
pub fn finite_difference_check<F, E>(f: F, x: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var, E>,
    E: Display,
{
    let cfg = GradCheckConfig { step, tolerance, ..GradCheckConfig::default() };
    check_inputs(|t: &Tape<f64>, v: &[Var]| f(t, v[0]), std::slice::from_ref(x), &cfg)
}
