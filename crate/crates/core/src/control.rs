//! Control branch: perturbed-condition construction, zero-initialized
//! adapters, copies of the denoiser's encoder and mid blocks, and the
//! fusion into the frozen decoder.

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, DenoiserVars, Dropout, Linear, LinearVars};
use crate::diffusion::{DdpmSchedule, SigmaChoice, VeSchedule};
use crate::encode::EncoderState;
use crate::error::{Error, Result};
use crate::rng::{sample_laplace, sample_normal, sample_uniform_sym, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    #[default]
    Laplace,
    Gaussian,
    Uniform,
}

impl std::str::FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(Self::Laplace),
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown noise type `{other}`"))),
        }
    }
}

/// C_f = x0 + noise with per-coordinate variance 2b².
pub fn make_condition(x0: &Tensor, b: f64, noise: NoiseType, rng: &mut Rng) -> Result<Tensor> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("noise scale must be finite and >= 0, got {b}")));
    }
    if b == 0.0 {
        return Ok(x0.clone());
    }
    let shape = x0.shape().to_vec();
    let n = match noise {
        NoiseType::Laplace => sample_laplace(rng, b, &shape)?,
        NoiseType::Gaussian => sample_normal(rng, &shape).scale(b * 2f64.sqrt()),
        NoiseType::Uniform => sample_uniform_sym(rng, b * 6f64.sqrt(), &shape),
    };
    x0.add(&n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroConvKind {
    #[default]
    Dense,
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ZeroConv {
    Dense(Linear),
    /// y = x ⊙ scale + bias.
    Elementwise { scale: Tensor, bias: Tensor },
}

impl ZeroConv {
    pub fn zeros(kind: ZeroConvKind, width: usize) -> Self {
        match kind {
            ZeroConvKind::Dense => Self::Dense(Linear::zeros(width, width)),
            ZeroConvKind::Elementwise => Self::Elementwise {
                scale: Tensor::zeros(&[1, width]),
                bias: Tensor::zeros(&[1, width]),
            },
        }
    }

    pub fn kind(&self) -> ZeroConvKind {
        match self {
            Self::Dense(_) => ZeroConvKind::Dense,
            Self::Elementwise { .. } => ZeroConvKind::Elementwise,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Self::Dense(l) => vec![&l.weight, &l.bias],
            Self::Elementwise { scale, bias } => vec![scale, bias],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Self::Elementwise { scale, bias } => vec![scale, bias],
        }
    }

    pub fn tensor_names(&self) -> [&'static str; 2] {
        match self {
            Self::Dense(_) => ["weight", "bias"],
            Self::Elementwise { .. } => ["scale", "bias"],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ZeroConvVars {
        match self {
            Self::Dense(l) => ZeroConvVars::Dense(l.bind(tape, trainable)),
            Self::Elementwise { scale, bias } => {
                let mut leaf = |t: &Tensor| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                };
                let scale = leaf(scale);
                let bias = leaf(bias);
                ZeroConvVars::Elementwise { scale, bias }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ZeroConvVars {
    Dense(LinearVars),
    Elementwise { scale: Var, bias: Var },
}

impl ZeroConvVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::Dense(l) => l.forward(tape, x),
            Self::Elementwise { scale, bias } => {
                let y = tape.mul_row(x, *scale)?;
                tape.add_row(y, *bias)
            }
        }
    }

    pub fn vars(&self) -> [Var; 2] {
        match self {
            Self::Dense(l) => l.vars(),
            Self::Elementwise { scale, bias } => [*scale, *bias],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub zc_in: ZeroConv,
    pub input: Linear,
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub zc_mid: ZeroConv,
    pub zc_last: ZeroConv,
    /// Scale of the condition noise used in training.
    pub b: f64,
}

impl ControlParams {
    /// Zero adapters plus exact copies of the denoiser's encoder and mid blocks.
    pub fn attach(denoiser: &DenoiserParams, kind: ZeroConvKind, b: f64) -> Result<Self> {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("noise scale must be finite and >= 0, got {b}")));
        }
        let (d, h) = (denoiser.dim(), denoiser.hidden());
        Ok(Self {
            zc_in: ZeroConv::zeros(kind, d),
            input: denoiser.input.clone(),
            hidden1: denoiser.hidden1.clone(),
            hidden2: denoiser.hidden2.clone(),
            zc_mid: ZeroConv::zeros(kind, h),
            zc_last: ZeroConv::zeros(kind, d),
            b,
        })
    }

    pub fn kind(&self) -> ZeroConvKind {
        self.zc_in.kind()
    }

    pub fn is_zero_initialized(&self) -> bool {
        self.zc_in.is_zero() && self.zc_mid.is_zero() && self.zc_last.is_zero()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.zc_in.tensor_names().iter().zip(self.zc_in.tensors()) {
            out.push((format!("zc_in.{n}"), t));
        }
        for (name, l) in [("input", &self.input), ("hidden1", &self.hidden1), ("hidden2", &self.hidden2)] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        for (prefix, z) in [("zc_mid", &self.zc_mid), ("zc_last", &self.zc_last)] {
            for (n, t) in z.tensor_names().iter().zip(z.tensors()) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.zc_in.tensors_mut();
        for l in [&mut self.input, &mut self.hidden1, &mut self.hidden2] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend(self.zc_mid.tensors_mut());
        out.extend(self.zc_last.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ControlVars {
        ControlVars {
            zc_in: self.zc_in.bind(tape, trainable),
            input: self.input.bind(tape, trainable),
            hidden1: self.hidden1.bind(tape, trainable),
            hidden2: self.hidden2.bind(tape, trainable),
            zc_mid: self.zc_mid.bind(tape, trainable),
            zc_last: self.zc_last.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ControlVars {
    pub zc_in: ZeroConvVars,
    pub input: LinearVars,
    pub hidden1: LinearVars,
    pub hidden2: LinearVars,
    pub zc_mid: ZeroConvVars,
    pub zc_last: ZeroConvVars,
}

impl ControlVars {
    /// Tensors in the same order as [`ControlParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.zc_in.vars().to_vec();
        for l in [self.input, self.hidden1, self.hidden2] {
            out.extend(l.vars());
        }
        out.extend(self.zc_mid.vars());
        out.extend(self.zc_last.vars());
        out
    }

    /// x_right = Linear(zc_in(C_f) + x_t) + t_emb, then the copied blocks.
    /// Returns `(h_right, c_last)`.
    pub fn forward(&self, tape: &mut Tape, x_t: Var, t_emb: Var, c_f: Var) -> Result<(Var, Var)> {
        let c = self.zc_in.forward(tape, c_f)?;
        let x = tape.add(c, x_t)?;
        let x = self.input.forward(tape, x)?;
        let x_right = tape.add(x, t_emb)?;
        let h = self.hidden1.forward(tape, x_right)?;
        let h = tape.silu(h);
        let h = self.hidden2.forward(tape, h)?;
        let h_right = tape.silu(h);
        let c_last = self.zc_last.forward(tape, c_f)?;
        Ok((h_right, c_last))
    }
}

/// ε̂_ctrl on a tape. The denoiser's vars decide whether it is frozen.
#[allow(clippy::too_many_arguments)]
pub fn fused_forward_vars(
    tape: &mut Tape,
    den: &DenoiserVars,
    ctrl: &ControlVars,
    x_t: Var,
    ts: &[f64],
    c_f: Var,
    use_last_fusion: bool,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let t_emb = den.time_mlp(tape, ts)?;
    let (_, h_left) = den.encode(tape, x_t, t_emb, dropout)?;
    let (h_right, c_last) = ctrl.forward(tape, x_t, t_emb, c_f)?;
    let injected = ctrl.zc_mid.forward(tape, h_right)?;
    let h_fusion = tape.add(h_left, injected)?;
    let (_, eps) = den.decode(tape, h_fusion, dropout)?;
    if use_last_fusion {
        tape.add(eps, c_last)
    } else {
        Ok(eps)
    }
}

/// Evaluates the control branch without recording gradients.
pub fn control_forward(
    x_t: &Tensor,
    t_emb: &Tensor,
    c_f: &Tensor,
    control: &ControlParams,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let v = control.bind(&mut tape, false);
    let x = tape.constant(x_t.clone());
    let e = tape.constant(t_emb.clone());
    let c = tape.constant(c_f.clone());
    let (h, last) = v.forward(&mut tape, x, e, c)?;
    Ok((tape.value(h).clone(), tape.value(last).clone()))
}

/// Evaluates ε̂_ctrl without recording gradients.
pub fn fused_forward(
    x_t: &Tensor,
    ts: &[f64],
    c_f: &Tensor,
    denoiser: &DenoiserParams,
    control: &ControlParams,
    use_last_fusion: bool,
) -> Result<Tensor> {
    if c_f.shape() != x_t.shape() {
        return Err(Error::shape("fused_forward", c_f.shape(), x_t.shape()));
    }
    let mut tape = Tape::new();
    let den = denoiser.bind(&mut tape, false);
    let ctrl = control.bind(&mut tape, false);
    let x = tape.constant(x_t.clone());
    let c = tape.constant(c_f.clone());
    let eps = fused_forward_vars(&mut tape, &den, &ctrl, x, ts, c, use_last_fusion, &mut None)?;
    Ok(tape.value(eps).clone())
}

/// Diffusion process driving training and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Process {
    Ddpm {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        #[serde(default)]
        sigma: SigmaChoice,
    },
    Ve {
        sigma_min: f64,
        sigma_max: f64,
        steps: usize,
    },
}

impl Process {
    pub fn ddpm(steps: usize) -> Result<Self> {
        let s = DdpmSchedule::scaled_default(steps)?;
        Ok(Self::Ddpm {
            steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            sigma: SigmaChoice::default(),
        })
    }

    pub fn ve() -> Self {
        let v = VeSchedule::default();
        Self::Ve {
            sigma_min: v.sigma_min,
            sigma_max: v.sigma_max,
            steps: v.steps,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Self::Ddpm { steps, .. } | Self::Ve { steps, .. } => *steps,
        }
    }

    pub fn ddpm_schedule(&self) -> Result<Option<DdpmSchedule>> {
        match self {
            Self::Ddpm {
                steps,
                beta_start,
                beta_end,
                ..
            } => Ok(Some(DdpmSchedule::linear(*steps, *beta_start, *beta_end)?)),
            Self::Ve { .. } => Ok(None),
        }
    }

    pub fn ve_schedule(&self) -> Result<Option<VeSchedule>> {
        match self {
            Self::Ve {
                sigma_min,
                sigma_max,
                steps,
            } => Ok(Some(VeSchedule::new(*sigma_min, *sigma_max, *steps)?)),
            Self::Ddpm { .. } => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ddpm_schedule()?;
        self.ve_schedule()?;
        Ok(())
    }
}

/// Value the network sees as its timestep for continuous VE time.
pub fn ve_time_input(t: f64, steps: usize) -> f64 {
    t * steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleFlags {
    pub use_last_fusion: bool,
    pub noise_type: NoiseType,
}

impl Default for BundleFlags {
    fn default() -> Self {
        Self {
            use_last_fusion: true,
            noise_type: NoiseType::Laplace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub denoiser: DenoiserParams,
    pub control: Option<ControlParams>,
    pub process: Process,
    pub encoder: EncoderState,
    pub flags: BundleFlags,
}

impl ModelBundle {
    pub fn dim(&self) -> usize {
        self.denoiser.dim()
    }

    /// ε̂ from the fused model when a control branch and condition are
    /// present, otherwise from the bare denoiser.
    pub fn predict(&self, x_t: &Tensor, ts: &[f64], c_f: Option<&Tensor>) -> Result<Tensor> {
        match (&self.control, c_f) {
            (Some(ctrl), Some(c)) => fused_forward(x_t, ts, c, &self.denoiser, ctrl, self.flags.use_last_fusion),
            _ => Ok(crate::denoiser::denoise_forward(x_t, ts, &self.denoiser)?.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::denoise_forward;
    use crate::rng::Stream;

    fn setup(d: usize, h: usize, seed: u64, kind: ZeroConvKind) -> (DenoiserParams, ControlParams) {
        let den = DenoiserParams::init(&mut Rng::new(seed, Stream::Init), d, h).unwrap();
        let ctrl = ControlParams::attach(&den, kind, 0.005).unwrap();
        (den, ctrl)
    }

    #[test]
    fn zero_scale_condition_is_exact() {
        let x = sample_normal(&mut Rng::new(0, Stream::Data), &[4, 3]);
        let c = make_condition(&x, 0.0, NoiseType::Laplace, &mut Rng::new(1, Stream::Noise)).unwrap();
        assert_eq!(c, x);
        assert!(make_condition(&x, -1.0, NoiseType::Laplace, &mut Rng::new(1, Stream::Noise)).is_err());
        assert!("cauchy".parse::<NoiseType>().is_err());
    }

    #[test]
    fn condition_second_moment() {
        let b = 0.005;
        let x = Tensor::zeros(&[100_000, 1]);
        let mut rng = Rng::new(3, Stream::Noise);
        let mut moments = Vec::new();
        for nt in [NoiseType::Laplace, NoiseType::Gaussian, NoiseType::Uniform] {
            let c = make_condition(&x, b, nt, &mut rng).unwrap();
            moments.push(c.sq_norm() / c.len() as f64);
        }
        let want = 2.0 * b * b;
        assert!((moments[0] / want - 1.0).abs() < 0.05, "{}", moments[0]);
        for m in &moments[1..] {
            assert!((m / moments[0] - 1.0).abs() < 0.02, "{m} vs {}", moments[0]);
        }
    }

    #[test]
    fn attach_copies_blocks_and_zeroes_adapters() {
        for kind in [ZeroConvKind::Dense, ZeroConvKind::Elementwise] {
            let (den, ctrl) = setup(5, 8, 1, kind);
            assert_eq!(ctrl.input, den.input);
            assert_eq!(ctrl.hidden1, den.hidden1);
            assert_eq!(ctrl.hidden2, den.hidden2);
            assert!(ctrl.is_zero_initialized());
            assert_eq!(ctrl.named_tensors().len(), ctrl.clone().tensors_mut().len());
        }
    }

    #[test]
    fn zero_init_matches_bare_denoiser_bitwise() {
        for kind in [ZeroConvKind::Dense, ZeroConvKind::Elementwise] {
            for seed in 0..10 {
                let (den, ctrl) = setup(6, 8, seed, kind);
                let mut rng = Rng::new(seed, Stream::Noise);
                let x = sample_normal(&mut rng, &[7, 6]);
                let c = sample_normal(&mut rng, &[7, 6]).scale(3.0);
                let ts: Vec<f64> = (0..7).map(|i| (1 + i * 13) as f64).collect();
                let bare = denoise_forward(&x, &ts, &den).unwrap().0;
                for last in [true, false] {
                    let fused = fused_forward(&x, &ts, &c, &den, &ctrl, last).unwrap();
                    assert!(fused.data().iter().zip(bare.data()).all(|(a, b)| a == b));
                }
            }
        }
    }

    #[test]
    fn c_last_zero_at_init() {
        let (den, ctrl) = setup(4, 8, 2, ZeroConvKind::Dense);
        let mut rng = Rng::new(5, Stream::Noise);
        let x = sample_normal(&mut rng, &[3, 4]);
        let c = sample_normal(&mut rng, &[3, 4]);
        let emb = Tensor::zeros(&[3, den.hidden()]);
        let (_, last) = control_forward(&x, &emb, &c, &ctrl).unwrap();
        assert!(last.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn last_fusion_flag_changes_output_once_perturbed() {
        let (den, mut ctrl) = setup(4, 8, 3, ZeroConvKind::Dense);
        if let ZeroConv::Dense(l) = &mut ctrl.zc_last {
            l.weight.data_mut()[0] = 0.5;
        }
        let mut rng = Rng::new(6, Stream::Noise);
        let x = sample_normal(&mut rng, &[2, 4]);
        let c = sample_normal(&mut rng, &[2, 4]);
        let with = fused_forward(&x, &[3.0, 9.0], &c, &den, &ctrl, true).unwrap();
        let without = fused_forward(&x, &[3.0, 9.0], &c, &den, &ctrl, false).unwrap();
        assert_ne!(with, without);
        assert_eq!(without, denoise_forward(&x, &[3.0, 9.0], &den).unwrap().0);
    }

    #[test]
    fn condition_width_mismatch_rejected() {
        let (den, ctrl) = setup(4, 8, 4, ZeroConvKind::Dense);
        let x = Tensor::zeros(&[2, 4]);
        assert!(fused_forward(&x, &[1.0, 2.0], &Tensor::zeros(&[2, 3]), &den, &ctrl, true).is_err());
    }

    #[test]
    fn process_serde_round_trip() {
        for p in [Process::ddpm(200).unwrap(), Process::ve()] {
            let s = serde_json::to_string(&p).unwrap();
            let q: Process = serde_json::from_str(&s).unwrap();
            assert_eq!(p, q);
            q.validate().unwrap();
        }
    }
}
