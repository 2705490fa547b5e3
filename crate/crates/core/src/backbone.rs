//! Four-stage convolutional encoder, one independent copy per view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Bound, Conv2d, ParamError, ParamSet};
use crate::tensor::{shape_err, Element, Tape, TensorError, Var};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { stage_channels: vec![16, 32, 64, 128], blocks_per_stage: 1, input_channels: 1, input_size: 128 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("backbone needs exactly {NUM_STAGES} stages, got {0}")]
    Stages(usize),
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("the two streams were built from different configs")]
    StreamMismatch,
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.stage_channels.len() != NUM_STAGES {
            return Err(BackboneError::Stages(self.stage_channels.len()));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 || self.input_channels == 0 {
            return Err(BackboneError::Config("channel and block counts must be positive".into()));
        }
        if self.input_size < 1 << NUM_STAGES {
            return Err(BackboneError::Config(format!("input size {} is below {}", self.input_size, 1 << NUM_STAGES)));
        }
        Ok(())
    }

    /// Spatial side of each stage output.
    pub fn stage_sizes(&self) -> [usize; NUM_STAGES] {
        let mut s = self.input_size;
        let mut out = [0; NUM_STAGES];
        for o in &mut out {
            s = (s - 1) / 2 + 1;
            *o = s;
        }
        out
    }

    /// Closed-form count of weights and biases in one stream.
    pub fn param_count(&self) -> usize {
        let mut cin = self.input_channels;
        let mut n = 0;
        for &c in &self.stage_channels {
            n += c * cin * 9 + c;
            n += (self.blocks_per_stage - 1) * (c * c * 9 + c);
            cin = c;
        }
        n
    }
}

/// Per-stage outputs of one view.
pub type StageOutputs = Vec<Var>;

/// One view's encoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Vec<Conv2d>>,
}

impl Backbone {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut cin = config.input_channels;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (s, &c) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let (ci, stride) = if b == 0 { (cin, 2) } else { (c, 1) };
                blocks.push(Conv2d::new(params, &format!("{prefix}.stage{}.block{b}", s + 1), ci, c, 3, stride, 1, rng)?);
            }
            stages.push(blocks);
            cin = c;
        }
        Ok(Backbone { config: config.clone(), stages })
    }

    /// Runs stage `s` (0-based) on `x`.
    pub fn stage<T: Element>(&self, tape: &Tape<T>, bound: &Bound, s: usize, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (b, conv) in self.stages[s].iter().enumerate() {
            let y = tape.relu(conv.forward(tape, bound, h)?)?;
            h = if b == 0 { y } else { tape.add(y, h)? };
        }
        Ok(h)
    }

    pub fn check_input<T: Element>(&self, tape: &Tape<T>, image: Var) -> Result<(), TensorError> {
        let d = tape.dims(image);
        let c = &self.config;
        if d.len() != 4 || d[1] != c.input_channels || d[2] != d[3] || d[2] != c.input_size {
            return Err(shape_err(
                "backbone",
                format!("expected [N,{},{},{}], got {d:?}", c.input_channels, c.input_size, c.input_size),
            ));
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &Tape<T>, bound: &Bound, image: Var) -> Result<StageOutputs, TensorError> {
        self.check_input(tape, image)?;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        let mut h = image;
        for s in 0..NUM_STAGES {
            h = self.stage(tape, bound, s, h)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// CC and MLO encoders with disjoint parameters.
#[derive(Debug, Clone)]
pub struct TwoStream {
    pub cc: Backbone,
    pub mlo: Backbone,
}

pub fn make_two_stream(cc: Backbone, mlo: Backbone) -> Result<TwoStream, BackboneError> {
    if cc.config != mlo.config {
        return Err(BackboneError::StreamMismatch);
    }
    Ok(TwoStream { cc, mlo })
}
