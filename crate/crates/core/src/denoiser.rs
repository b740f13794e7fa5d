//! MLP noise predictor ε_θ(x_t, t).
//!
//! Block layout (the boundary the control branch copies):
//!
//! * encoder block: input projection fused with the time embedding, then
//!   hidden layer 1;
//! * mid block: hidden layer 2, whose output is `h_left`;
//! * decoder: hidden layer 3 and the output projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[1 × out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    /// He-normal weights, zero bias.
    pub fn he(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        let std = (2.0 / fan_in as f64).sqrt();
        rng.fill_normal(l.weight.data_mut());
        for w in l.weight.data_mut() {
            *w *= std;
        }
        l
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LinearVars {
            w: leaf(tape, &self.weight),
            b: leaf(tape, &self.bias),
        }
    }

    fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row(y, self.b)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedConfig {
    pub dim: usize,
    pub max_period: f64,
}

impl TimeEmbedConfig {
    pub fn new(dim: usize) -> Result<Self> {
        let c = Self {
            dim,
            max_period: 10_000.0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "time embedding dimension must be positive and even, got {}",
                self.dim
            )));
        }
        if !(self.max_period > 1.0) {
            return Err(Error::InvalidArgument("max_period must exceed 1".into()));
        }
        Ok(())
    }

    fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        if half == 1 {
            return vec![1.0];
        }
        (0..half)
            .map(|k| self.max_period.powf(-(k as f64) / (half - 1) as f64))
            .collect()
    }
}

/// `[sin(t·ω_k) …, cos(t·ω_k) …]` with ω_k geometric from 1 to 1/max_period.
pub fn sin_time_embed(t: f64, cfg: &TimeEmbedConfig) -> Result<Tensor> {
    sin_time_embed_batch(&[t], cfg)
}

pub fn sin_time_embed_batch(ts: &[f64], cfg: &TimeEmbedConfig) -> Result<Tensor> {
    cfg.validate()?;
    if let Some(t) = ts.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::InvalidArgument(format!("timestep must be non-negative, got {t}")));
    }
    let freqs = cfg.frequencies();
    let half = freqs.len();
    let mut out = Tensor::zeros(&[ts.len(), cfg.dim]);
    for (i, &t) in ts.iter().enumerate() {
        let row = out.row_mut(i);
        for (k, w) in freqs.iter().enumerate() {
            row[k] = (t * w).sin();
            row[half + k] = (t * w).cos();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub time_cfg: TimeEmbedConfig,
    pub time1: Linear,
    pub time2: Linear,
    pub input: Linear,
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub hidden3: Linear,
    pub output: Linear,
}

pub const DENOISER_TENSORS: [&str; 14] = [
    "time1.weight",
    "time1.bias",
    "time2.weight",
    "time2.bias",
    "input.weight",
    "input.bias",
    "hidden1.weight",
    "hidden1.bias",
    "hidden2.weight",
    "hidden2.bias",
    "hidden3.weight",
    "hidden3.bias",
    "output.weight",
    "output.bias",
];

impl DenoiserParams {
    /// He-initialized network for `dim`-wide rows and `hidden` units. The
    /// sinusoidal embedding width equals `hidden`.
    pub fn init(rng: &mut Rng, dim: usize, hidden: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("dim and hidden must be positive".into()));
        }
        let emb = hidden + hidden % 2;
        let time_cfg = TimeEmbedConfig::new(emb)?;
        Ok(Self {
            time_cfg,
            time1: Linear::he(rng, emb, hidden),
            time2: Linear::he(rng, hidden, hidden),
            input: Linear::he(rng, dim, hidden),
            hidden1: Linear::he(rng, hidden, hidden),
            hidden2: Linear::he(rng, hidden, hidden),
            hidden3: Linear::he(rng, hidden, hidden),
            output: Linear::he(rng, hidden, dim),
        })
    }

    pub fn zeros(dim: usize, hidden: usize) -> Result<Self> {
        let emb = hidden + hidden % 2;
        Ok(Self {
            time_cfg: TimeEmbedConfig::new(emb)?,
            time1: Linear::zeros(emb, hidden),
            time2: Linear::zeros(hidden, hidden),
            input: Linear::zeros(dim, hidden),
            hidden1: Linear::zeros(hidden, hidden),
            hidden2: Linear::zeros(hidden, hidden),
            hidden3: Linear::zeros(hidden, hidden),
            output: Linear::zeros(hidden, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.input.fan_in()
    }

    pub fn hidden(&self) -> usize {
        self.input.fan_out()
    }

    fn layers(&self) -> [&Linear; 7] {
        [
            &self.time1,
            &self.time2,
            &self.input,
            &self.hidden1,
            &self.hidden2,
            &self.hidden3,
            &self.output,
        ]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(Linear::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [
            &mut self.time1,
            &mut self.time2,
            &mut self.input,
            &mut self.hidden1,
            &mut self.hidden2,
            &mut self.hidden3,
            &mut self.output,
        ]
        .into_iter()
        .flat_map(Linear::tensors_mut)
        .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenoiserVars {
        DenoiserVars {
            time_cfg: self.time_cfg,
            time1: self.time1.bind(tape, trainable),
            time2: self.time2.bind(tape, trainable),
            input: self.input.bind(tape, trainable),
            hidden1: self.hidden1.bind(tape, trainable),
            hidden2: self.hidden2.bind(tape, trainable),
            hidden3: self.hidden3.bind(tape, trainable),
            output: self.output.bind(tape, trainable),
        }
    }
}

/// Inverted dropout on hidden activations, active only while training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, h: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(h);
        }
        let keep = 1.0 - self.rate;
        let mut mask = Tensor::zeros(tape.shape(h));
        for m in mask.data_mut() {
            *m = if self.rng.uniform_open() < keep { 1.0 / keep } else { 0.0 };
        }
        let m = tape.constant(mask);
        tape.mul(h, m)
    }
}

fn maybe_dropout(tape: &mut Tape, h: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, h),
        None => Ok(h),
    }
}

/// Activations exposed for control fusion.
#[derive(Debug, Clone, Copy)]
pub struct HiddenTrace {
    pub t_emb: Var,
    pub x_left: Var,
    /// Mid-block output, the fusion point for the control branch.
    pub h_left: Var,
    /// Decoder hidden activation feeding the output projection.
    pub pre_output: Var,
}

#[derive(Debug, Clone)]
pub struct DenoiserVars {
    pub time_cfg: TimeEmbedConfig,
    pub time1: LinearVars,
    pub time2: LinearVars,
    pub input: LinearVars,
    pub hidden1: LinearVars,
    pub hidden2: LinearVars,
    pub hidden3: LinearVars,
    pub output: LinearVars,
}

impl DenoiserVars {
    pub fn vars(&self) -> Vec<Var> {
        [
            self.time1,
            self.time2,
            self.input,
            self.hidden1,
            self.hidden2,
            self.hidden3,
            self.output,
        ]
        .iter()
        .flat_map(LinearVars::vars)
        .collect()
    }

    /// t_emb = Linear(SiLU(Linear(SinTimeEmb(t)))).
    pub fn time_mlp(&self, tape: &mut Tape, ts: &[f64]) -> Result<Var> {
        let emb = tape.constant(sin_time_embed_batch(ts, &self.time_cfg)?);
        let h = self.time1.forward(tape, emb)?;
        let h = tape.silu(h);
        self.time2.forward(tape, h)
    }

    /// Encoder and mid blocks: returns `(x_left, h_left)`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x_t: Var,
        t_emb: Var,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, Var)> {
        let x = self.input.forward(tape, x_t)?;
        let x_left = tape.add(x, t_emb)?;
        let h1 = self.hidden1.forward(tape, x_left)?;
        let h1 = tape.silu(h1);
        let h1 = maybe_dropout(tape, h1, dropout)?;
        let h2 = self.hidden2.forward(tape, h1)?;
        let h2 = tape.silu(h2);
        let h_left = maybe_dropout(tape, h2, dropout)?;
        Ok((x_left, h_left))
    }

    /// Decoder: returns `(pre_output, ε̂)`.
    pub fn decode(&self, tape: &mut Tape, h: Var, dropout: &mut Option<Dropout<'_>>) -> Result<(Var, Var)> {
        let h3 = self.hidden3.forward(tape, h)?;
        let h3 = tape.silu(h3);
        let h3 = maybe_dropout(tape, h3, dropout)?;
        let eps = self.output.forward(tape, h3)?;
        Ok((h3, eps))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x_t: Var,
        ts: &[f64],
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, HiddenTrace)> {
        let dim = self.input_dim(tape);
        let shape = tape.shape(x_t);
        if shape.len() != 2 || shape[1] != dim || shape[0] != ts.len() {
            return Err(Error::shape("denoise_forward", shape, &[ts.len(), dim]));
        }
        let t_emb = self.time_mlp(tape, ts)?;
        let (x_left, h_left) = self.encode(tape, x_t, t_emb, dropout)?;
        let (pre_output, eps) = self.decode(tape, h_left, dropout)?;
        Ok((
            eps,
            HiddenTrace {
                t_emb,
                x_left,
                h_left,
                pre_output,
            },
        ))
    }

    fn input_dim(&self, tape: &Tape) -> usize {
        tape.shape(self.input.w)[0]
    }
}

/// Value-level trace of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceValues {
    pub t_emb: Tensor,
    pub x_left: Tensor,
    pub h_left: Tensor,
    pub pre_output: Tensor,
}

/// Evaluates ε̂ = ε_θ(x_t, t) without recording gradients.
pub fn denoise_forward(x_t: &Tensor, ts: &[f64], params: &DenoiserParams) -> Result<(Tensor, TraceValues)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(x_t.clone());
    let (eps, tr) = vars.forward(&mut tape, x, ts, &mut None)?;
    Ok((
        tape.value(eps).clone(),
        TraceValues {
            t_emb: tape.value(tr.t_emb).clone(),
            x_left: tape.value(tr.x_left).clone(),
            h_left: tape.value(tr.h_left).clone(),
            pre_output: tape.value(tr.pre_output).clone(),
        },
    ))
}
