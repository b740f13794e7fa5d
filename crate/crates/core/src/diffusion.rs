//! Noise schedules and the per-step kernels of the forward and reverse
//! processes, for discrete DDPM and for the variance-exploding SDE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the reverse-step noise scale σ_t is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    /// σ_t = √β̃_t, the true posterior standard deviation.
    #[default]
    PosteriorVariance,
    /// σ_t = √β_t.
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Index 0 is unused padding so that `beta[t]` matches the 1-based step.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl DdpmSchedule {
    /// Linear β ramp over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            };
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut beta_tilde = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta_tilde[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        Ok(Self {
            steps,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    /// Default ramp 1e-4 → 0.02 rescaled by 1000/steps so that short chains
    /// still end near pure noise.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        let s = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, (1e-4 * s).min(0.5), (0.02 * s).min(0.999))
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }
    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    pub fn sigma(&self, t: usize, choice: SigmaChoice) -> f64 {
        match choice {
            SigmaChoice::PosteriorVariance => self.beta_tilde[t].sqrt(),
            SigmaChoice::Beta => self.beta[t].sqrt(),
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_bar[t].sqrt();
        let s = (1.0 - self.alpha_bar[t]).sqrt();
        x0.zip_map(eps, "forward_sample", |x, e| a * x + s * e)
    }

    /// Per-row timesteps: row `i` of `x0` is noised at `ts[i]`.
    pub fn forward_sample_rows(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        x0.check_same(eps, "forward_sample_rows")?;
        if ts.len() != x0.rows() {
            return Err(Error::shape("forward_sample_rows", x0.shape(), &[ts.len()]));
        }
        let mut out = x0.clone();
        for (i, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let a = self.alpha_bar[t].sqrt();
            let s = (1.0 - self.alpha_bar[t]).sqrt();
            for (o, e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
                *o = a * *o + s * e;
            }
        }
        Ok(out)
    }

    /// Coefficients `(c0, ct)` of μ̃_t = c0·x0 + ct·x_t.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let denom = 1.0 - self.alpha_bar[t];
        let c0 = self.alpha_bar[t - 1].sqrt() * self.beta[t] / denom;
        let ct = self.alpha[t].sqrt() * (1.0 - self.alpha_bar[t - 1]) / denom;
        Ok((c0, ct))
    }

    /// Mean and variance of q(x_{t−1} | x_t, x0).
    pub fn posterior_params(&self, x0: &Tensor, x_t: &Tensor, t: usize) -> Result<(Tensor, f64)> {
        let (c0, ct) = self.posterior_coefficients(t)?;
        let mu = x0.zip_map(x_t, "posterior_params", |a, b| c0 * a + ct * b)?;
        Ok((mu, self.beta_tilde[t]))
    }

    /// One ancestral step x_t → x_{t−1}. `z` is ignored at t = 1.
    pub fn reverse_step(
        &self,
        x_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        z: &Tensor,
        sigma: SigmaChoice,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        x_t.check_same(eps_hat, "ddpm_reverse_step")?;
        x_t.check_same(z, "ddpm_reverse_step")?;
        let inv_sqrt_alpha = 1.0 / self.alpha[t].sqrt();
        let k = (1.0 - self.alpha[t]) / (1.0 - self.alpha_bar[t]).sqrt();
        let s = if t == 1 { 0.0 } else { self.sigma(t, sigma) };
        let mut out = x_t.clone();
        for ((o, e), zv) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
            *o = inv_sqrt_alpha * (*o - k * e) + s * zv;
        }
        Ok(out)
    }
}

/// σ(t) = σ_min·(σ_max/σ_min)^t on t ∈ [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub steps: usize,
}

impl Default for VeSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 20.0,
            steps: 100,
        }
    }
}

impl VeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("VE schedule needs at least one step".into()));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            steps,
        })
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("VE time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        if t == 0.0 {
            return self.sigma_min;
        }
        if t == 1.0 {
            return self.sigma_max;
        }
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// g(t)² = dσ²/dt.
    pub fn g_squared(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        2.0 * s * s * (self.sigma_max / self.sigma_min).ln()
    }

    /// x_t = x0 + σ(t)·ε.
    pub fn perturb(&self, x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        Self::check_t(t)?;
        let s = self.sigma(t);
        x0.zip_map(eps, "ve_perturb", |x, e| x + s * e)
    }

    /// Euler–Maruyama step of the reverse-time SDE with score −ε̂/σ(t).
    pub fn reverse_step(&self, x_t: &Tensor, t: f64, dt: f64, eps_hat: &Tensor, z: &Tensor) -> Result<Tensor> {
        Self::check_t(t)?;
        if !(dt > 0.0) || dt > t + 1e-12 {
            return Err(Error::InvalidArgument(format!("step {dt} invalid at time {t}")));
        }
        x_t.check_same(eps_hat, "ve_reverse_step")?;
        x_t.check_same(z, "ve_reverse_step")?;
        let sigma = self.sigma(t);
        let g2 = self.g_squared(t);
        let drift = g2 * dt / sigma;
        let diffusion = (g2 * dt).sqrt();
        let mut out = x_t.clone();
        for ((o, e), zv) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
            *o += -drift * e + diffusion * zv;
        }
        Ok(out)
    }
}
