//! Stage-1 denoiser training, stage-2 control training and the joint
//! single-stage variant.

use serde::{Deserialize, Serialize};

use crate::control::{
    fused_forward_vars, make_condition, ve_time_input, BundleFlags, ControlParams, NoiseType, Process, ZeroConvKind,
};
use crate::denoiser::{DenoiserParams, Dropout};
use crate::diffusion::SigmaChoice;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{sample_normal, Rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Denoiser,
    Control,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    #[default]
    Ddpm,
    Ve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Condition noise scale b.
    pub b: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Number of diffusion steps T.
    pub diffusion_steps: usize,
    pub process: ProcessKind,
    pub sigma: SigmaChoice,
    pub optimizer: AdamWConfig,
    pub zero_conv: ZeroConvKind,
    pub use_last_fusion: bool,
    pub noise_type: NoiseType,
    /// Dropout rate on denoiser hidden layers while the denoiser trains.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (steps, hidden, diffusion_steps) = match profile {
            Profile::Paper => (30_000, 256, 1000),
            Profile::Desk => (3_000, 128, 200),
        };
        Self {
            steps,
            batch_size: 256,
            b: 0.005,
            seed: 0,
            hidden,
            diffusion_steps,
            process: ProcessKind::Ddpm,
            sigma: SigmaChoice::PosteriorVariance,
            optimizer: AdamWConfig::default(),
            zero_conv: ZeroConvKind::Dense,
            use_last_fusion: true,
            noise_type: NoiseType::Laplace,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.diffusion_steps == 0 {
            return Err(Error::Config("batch_size, hidden and diffusion_steps must be positive".into()));
        }
        if !(self.b >= 0.0) || !self.b.is_finite() {
            return Err(Error::Config(format!("noise scale b must be finite and >= 0, got {}", self.b)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.build_process()?;
        Ok(())
    }

    pub fn build_process(&self) -> Result<Process> {
        match self.process {
            ProcessKind::Ddpm => {
                let mut p = Process::ddpm(self.diffusion_steps)?;
                if let Process::Ddpm { sigma, .. } = &mut p {
                    *sigma = self.sigma;
                }
                Ok(p)
            }
            ProcessKind::Ve => {
                let Process::Ve {
                    sigma_min, sigma_max, ..
                } = Process::ve()
                else {
                    unreachable!()
                };
                Ok(Process::Ve {
                    sigma_min,
                    sigma_max,
                    steps: self.diffusion_steps,
                })
            }
        }
    }

    pub fn flags(&self) -> BundleFlags {
        BundleFlags {
            use_last_fusion: self.use_last_fusion,
            noise_type: self.noise_type,
        }
    }

    fn check_data(&self, data: &Tensor) -> Result<()> {
        let (n, d) = data.dims2("train")?;
        if n == 0 || d == 0 {
            return Err(Error::Data("training data is empty".into()));
        }
        if self.batch_size > n {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        if !data.all_finite() {
            return Err(Error::Data("training data contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub eps: Tensor,
    /// Network time inputs.
    pub ts: Vec<f64>,
}

/// Draws rows, timesteps and noise and forms x_t. Timesteps are uniform
/// over 1..=T for DDPM and over (0, 1] for VE.
pub fn draw_batch(data: &Tensor, batch: usize, process: &Process, rng: &mut Rng) -> Result<TrainBatch> {
    let n = data.rows();
    let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
    let x0 = data.select_rows(&idx);
    let steps = process.steps();
    let eps = sample_normal(rng, x0.shape());
    if let Some(s) = process.ddpm_schedule()? {
        let t_idx: Vec<usize> = (0..batch).map(|_| 1 + rng.below(steps)).collect();
        let x_t = s.forward_sample_rows(&x0, &t_idx, &eps)?;
        let ts = t_idx.iter().map(|&t| t as f64).collect();
        return Ok(TrainBatch { x0, x_t, eps, ts });
    }
    let ve = process.ve_schedule()?.expect("process is ve");
    let d = x0.cols();
    let mut x_t = x0.clone();
    let mut ts = Vec::with_capacity(batch);
    for i in 0..batch {
        let t = 1.0 - rng.uniform_open() * (1.0 - 1e-3);
        let s = ve.sigma(t);
        let e = &eps.data()[i * d..(i + 1) * d];
        for (x, ev) in x_t.row_mut(i).iter_mut().zip(e) {
            *x += s * ev;
        }
        ts.push(ve_time_input(t, steps));
    }
    Ok(TrainBatch { x0, x_t, eps, ts })
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: format!("training loss {loss}"),
        })
    }
}

/// mse(ε_θ(x_t, t), ε) with gradients for every denoiser tensor.
pub fn denoiser_loss_and_grads(
    params: &DenoiserParams,
    batch: &TrainBatch,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let x = tape.constant(batch.x_t.clone());
    let target = tape.constant(batch.eps.clone());
    let mut dropout = dropout;
    let (eps_hat, _) = vars.forward(&mut tape, x, &batch.ts, &mut dropout)?;
    let loss = tape.mse(eps_hat, target)?;
    let grads = tape.backward(loss)?;
    let g = vars.vars().into_iter().map(|v| grads.wrt(v)).collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss).data()[0], g))
}

/// Loss of the fused model. Gradients cover the control tensors and, when
/// `joint`, the denoiser tensors after them.
pub fn control_loss_and_grads(
    denoiser: &DenoiserParams,
    control: &ControlParams,
    batch: &TrainBatch,
    c_f: &Tensor,
    use_last_fusion: bool,
    joint: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let den = denoiser.bind(&mut tape, joint);
    let ctrl = control.bind(&mut tape, true);
    let x = tape.constant(batch.x_t.clone());
    let c = tape.constant(c_f.clone());
    let target = tape.constant(batch.eps.clone());
    let mut dropout = dropout;
    let eps_hat = fused_forward_vars(&mut tape, &den, &ctrl, x, &batch.ts, c, use_last_fusion, &mut dropout)?;
    let loss = tape.mse(eps_hat, target)?;
    let grads = tape.backward(loss)?;
    let mut vars = ctrl.vars();
    if joint {
        vars.extend(den.vars());
    } else if den.vars().iter().any(|v| grads.of(*v).is_some()) {
        return Err(Error::FrozenViolation);
    }
    let g = vars.into_iter().map(|v| grads.wrt(v)).collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss).data()[0], g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained<P> {
    pub params: P,
    pub losses: Vec<f64>,
}

/// Stage 1.
pub fn train_denoiser(data: &Tensor, cfg: &TrainConfig) -> Result<Trained<DenoiserParams>> {
    cfg.validate()?;
    cfg.check_data(data)?;
    let process = cfg.build_process()?;
    let mut params = DenoiserParams::init(&mut Rng::new(cfg.seed, Stream::Init), data.cols(), cfg.hidden)?;
    let mut opt = AdamW::new(cfg.optimizer, &params.tensors())?;
    let mut rng = Rng::derived(cfg.seed, Stream::Noise, 1);
    let mut drop_rng = Rng::derived(cfg.seed, Stream::Noise, 4);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = draw_batch(data, cfg.batch_size, &process, &mut rng)?;
        let dropout = (cfg.dropout > 0.0).then(|| Dropout {
            rate: cfg.dropout,
            rng: &mut drop_rng,
        });
        let (loss, grads) = denoiser_loss_and_grads(&params, &batch, dropout)?;
        check_loss(loss, step)?;
        opt.step(&mut params.tensors_mut(), &grads)?;
        losses.push(loss);
        if step % 500 == 0 {
            log::debug!("denoiser step {step}: loss {loss:.5}");
        }
    }
    Ok(Trained { params, losses })
}

fn param_bytes(p: &DenoiserParams) -> Vec<u8> {
    p.tensors()
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

/// Stage 2: the denoiser is bound as constants and never updated.
pub fn train_control(data: &Tensor, denoiser: &DenoiserParams, cfg: &TrainConfig) -> Result<Trained<ControlParams>> {
    cfg.validate()?;
    cfg.check_data(data)?;
    if denoiser.dim() != data.cols() {
        return Err(Error::shape("train_control", &[denoiser.dim()], &[data.cols()]));
    }
    let process = cfg.build_process()?;
    let before = param_bytes(denoiser);
    let mut control = ControlParams::attach(denoiser, cfg.zero_conv, cfg.b)?;
    let mut opt = AdamW::new(cfg.optimizer, &control.named_tensors().iter().map(|(_, t)| *t).collect::<Vec<_>>())?;
    let mut rng = Rng::derived(cfg.seed, Stream::Noise, 2);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = draw_batch(data, cfg.batch_size, &process, &mut rng)?;
        let c_f = make_condition(&batch.x0, cfg.b, cfg.noise_type, &mut rng)?;
        let (loss, grads) =
            control_loss_and_grads(denoiser, &control, &batch, &c_f, cfg.use_last_fusion, false, None)?;
        check_loss(loss, step)?;
        opt.step(&mut control.tensors_mut(), &grads)?;
        losses.push(loss);
        if step % 500 == 0 {
            log::debug!("control step {step}: loss {loss:.5}");
        }
    }
    if param_bytes(denoiser) != before {
        return Err(Error::FrozenViolation);
    }
    Ok(Trained {
        params: control,
        losses,
    })
}

/// Single-stage ablation: control attached to a freshly initialized
/// denoiser and both updated together.
pub fn train_joint(data: &Tensor, cfg: &TrainConfig) -> Result<Trained<(DenoiserParams, ControlParams)>> {
    cfg.validate()?;
    cfg.check_data(data)?;
    let process = cfg.build_process()?;
    let mut denoiser = DenoiserParams::init(&mut Rng::new(cfg.seed, Stream::Init), data.cols(), cfg.hidden)?;
    let mut control = ControlParams::attach(&denoiser, cfg.zero_conv, cfg.b)?;
    let mut all: Vec<&Tensor> = control.named_tensors().iter().map(|(_, t)| *t).collect();
    all.extend(denoiser.tensors());
    let mut opt = AdamW::new(cfg.optimizer, &all)?;
    let mut rng = Rng::derived(cfg.seed, Stream::Noise, 3);
    let mut drop_rng = Rng::derived(cfg.seed, Stream::Noise, 5);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = draw_batch(data, cfg.batch_size, &process, &mut rng)?;
        let c_f = make_condition(&batch.x0, cfg.b, cfg.noise_type, &mut rng)?;
        let dropout = (cfg.dropout > 0.0).then(|| Dropout {
            rate: cfg.dropout,
            rng: &mut drop_rng,
        });
        let (loss, grads) =
            control_loss_and_grads(&denoiser, &control, &batch, &c_f, cfg.use_last_fusion, true, dropout)?;
        check_loss(loss, step)?;
        let mut params = control.tensors_mut();
        params.extend(denoiser.tensors_mut());
        opt.step(&mut params, &grads)?;
        losses.push(loss);
    }
    Ok(Trained {
        params: (denoiser, control),
        losses,
    })
}

/// Mean denoiser loss over `n_batches` fresh batches.
pub fn eval_denoiser_loss(
    data: &Tensor,
    params: &DenoiserParams,
    process: &Process,
    batch: usize,
    n_batches: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..n_batches {
        let b = draw_batch(data, batch, process, rng)?;
        let eps = crate::denoiser::denoise_forward(&b.x_t, &b.ts, params)?.0;
        total += eps.sub(&b.eps)?.sq_norm() / eps.len() as f64;
    }
    Ok(total / n_batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::fused_forward;

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            hidden: 8,
            diffusion_steps: 20,
            ..TrainConfig::default()
        }
    }

    fn two_modes(n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed, Stream::Data);
        let mut x = sample_normal(&mut rng, &[n, 2]).scale(0.2);
        for i in 0..n {
            let s = if i % 2 == 0 { 2.0 } else { -2.0 };
            x.row_mut(i)[0] += s;
        }
        x
    }

    #[test]
    fn loss_curve_length_and_determinism() {
        let data = two_modes(64, 0);
        let a = train_denoiser(&data, &tiny(25)).unwrap();
        let b = train_denoiser(&data, &tiny(25)).unwrap();
        assert_eq!(a.losses.len(), 25);
        assert_eq!(a, b);
    }

    #[test]
    fn single_point_dataset_learns() {
        let data = Tensor::zeros(&[32, 3]);
        let cfg = TrainConfig {
            steps: 500,
            ..tiny(500)
        };
        let out = train_denoiser(&data, &cfg).unwrap();
        let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = out.losses[480..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.9 * head, "head {head} tail {tail}");
    }

    #[test]
    fn batch_larger_than_data_rejected() {
        let data = Tensor::zeros(&[4, 2]);
        assert!(matches!(train_denoiser(&data, &tiny(1)), Err(Error::Config(_))));
    }

    #[test]
    fn stage_two_step_zero_loss_matches_frozen_denoiser() {
        let data = two_modes(64, 1);
        let cfg = tiny(30);
        let den = train_denoiser(&data, &cfg).unwrap().params;
        let process = cfg.build_process().unwrap();
        let ctrl = ControlParams::attach(&den, cfg.zero_conv, cfg.b).unwrap();
        let mut rng = Rng::new(7, Stream::Noise);
        let batch = draw_batch(&data, 16, &process, &mut rng).unwrap();
        let c_f = make_condition(&batch.x0, cfg.b, NoiseType::Laplace, &mut rng).unwrap();
        let (l_ctrl, _) = control_loss_and_grads(&den, &ctrl, &batch, &c_f, true, false, None).unwrap();
        let (l_den, _) = denoiser_loss_and_grads(&den, &batch, None).unwrap();
        assert_eq!(l_ctrl, l_den);
    }

    #[test]
    fn stage_two_keeps_denoiser_and_moves_adapters() {
        let data = two_modes(64, 2);
        let cfg = tiny(10);
        let den = train_denoiser(&data, &cfg).unwrap().params;
        let snapshot = den.clone();
        let ctrl = train_control(&data, &den, &cfg).unwrap();
        assert_eq!(den, snapshot);
        assert!(!ctrl.params.is_zero_initialized());
        // Step 1 reaches only the output-side adapters; zc_in needs zc_mid != 0.
        let mut short = cfg.clone();
        short.steps = 1;
        let ctrl1 = train_control(&data, &den, &short).unwrap().params;
        assert!(!ctrl1.zc_mid.is_zero() && !ctrl1.zc_last.is_zero());
        assert!(ctrl1.zc_in.is_zero());
        short.steps = 2;
        let ctrl2 = train_control(&data, &den, &short).unwrap().params;
        assert!(!ctrl2.zc_in.is_zero());
    }

    #[test]
    fn joint_moves_both_parameter_sets() {
        let data = two_modes(64, 3);
        let mut cfg = tiny(1);
        let init = DenoiserParams::init(&mut Rng::new(cfg.seed, Stream::Init), 2, cfg.hidden).unwrap();
        let out = train_joint(&data, &cfg).unwrap();
        assert_ne!(out.params.0, init);
        assert!(!out.params.1.is_zero_initialized());
        cfg.steps = 3;
        let staged = train_control(&data, &init, &cfg).unwrap().params;
        let joint = train_joint(&data, &cfg).unwrap().params.1;
        let shapes = |c: &ControlParams| c.named_tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
        assert_eq!(shapes(&staged), shapes(&joint));
    }

    #[test]
    fn trained_control_reacts_to_condition() {
        let data = two_modes(64, 4);
        let cfg = tiny(40);
        let den = train_denoiser(&data, &cfg).unwrap().params;
        let ctrl = train_control(&data, &den, &cfg).unwrap().params;
        let x = Tensor::new(&[1, 2], vec![0.3, -0.1]).unwrap();
        let c0 = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        let c1 = Tensor::new(&[1, 2], vec![2.0 + 1e-3, 0.0]).unwrap();
        let a = fused_forward(&x, &[5.0], &c0, &den, &ctrl, true).unwrap();
        let b = fused_forward(&x, &[5.0], &c1, &den, &ctrl, true).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn ve_process_trains() {
        let data = two_modes(64, 5);
        let cfg = TrainConfig {
            process: ProcessKind::Ve,
            ..tiny(5)
        };
        let out = train_denoiser(&data, &cfg).unwrap();
        assert!(out.losses.iter().all(|l| l.is_finite()));
    }
}
