//! Numerical check that perturbing the condition input with small noise of
//! variance η² raises the squared-error objective by η²·(L₁ + L₂), where
//! L₁ = E Σ_i ‖∂y/∂C_i‖² and L₂ = E Σ_i (y − ε)·∂²y/∂C_i².
//!
//! Monte Carlo estimates share their (C, ε, ũ) draws across noise levels,
//! and each draw is evaluated at C + ηũ and C − ηũ, which cancels the
//! first-order term sample by sample.

use serde::{Deserialize, Serialize};

use crate::control::{fused_forward_vars, ControlParams, Process};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::par;
use crate::rng::{sample_laplace, sample_normal, Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::draw_batch;

pub const FD_STEP: f64 = 1e-4;

/// y = silu(C·W₁ + b₁)·W₂ + b₂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiluNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SiluNet {
    pub fn init(rng: &mut Rng, d: usize, h: usize) -> Self {
        let mut w1 = sample_normal(rng, &[d, h]).scale((1.0 / d as f64).sqrt());
        let mut w2 = sample_normal(rng, &[h, d]).scale((1.0 / h as f64).sqrt());
        let b1 = sample_normal(rng, &[1, h]).scale(0.5);
        let b2 = sample_normal(rng, &[1, d]).scale(0.1);
        // keep the weights O(1) so curvature is visible
        w1 = w1.scale(1.5);
        w2 = w2.scale(1.0);
        Self { w1, b1, w2, b2 }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> [Var; 4] {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        [leaf(&self.w1), leaf(&self.b1), leaf(&self.w2), leaf(&self.b2)]
    }

    fn apply(tape: &mut Tape, v: [Var; 4], c: Var) -> Result<Var> {
        let h = tape.matmul(c, v[0])?;
        let h = tape.add_row(h, v[1])?;
        let h = tape.silu(h);
        let y = tape.matmul(h, v[2])?;
        tape.add_row(y, v[3])
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn forward(&self, c: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let x = tape.constant(c.clone());
        let y = Self::apply(&mut tape, v, x)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedProbe {
    pub denoiser: DenoiserParams,
    pub control: ControlParams,
    pub use_last_fusion: bool,
}

/// Network under test, viewed as a map from the condition C to y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Probe {
    /// y = C·W.
    Linear { w: Tensor },
    Silu { net: SiluNet },
    /// y = value for every C.
    Constant { value: Tensor },
    /// The conditioned noise predictor with x_t and t held at the probe point.
    Fused { model: Box<FusedProbe> },
}

impl Probe {
    pub fn dim(&self) -> usize {
        match self {
            Probe::Linear { w } => w.rows(),
            Probe::Silu { net } => net.w1.rows(),
            Probe::Constant { value } => value.cols(),
            Probe::Fused { model } => model.denoiser.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Probe::Linear { .. } => "linear",
            Probe::Silu { .. } => "silu",
            Probe::Constant { .. } => "constant",
            Probe::Fused { .. } => "fused",
        }
    }

    fn build(&self, tape: &mut Tape, c: Var, pts: &Points) -> Result<Var> {
        match self {
            Probe::Linear { w } => {
                let w = tape.constant(w.clone());
                tape.matmul(c, w)
            }
            Probe::Silu { net } => {
                let v = net.bind(tape, false);
                SiluNet::apply(tape, v, c)
            }
            Probe::Constant { value } => {
                let d = value.cols();
                let z = tape.constant(Tensor::zeros(&[d, d]));
                let v = tape.constant(value.clone());
                let y = tape.matmul(c, z)?;
                tape.add_row(y, v)
            }
            Probe::Fused { model } => {
                let x_t = pts
                    .x_t
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("fused probe needs x_t at the probe points".into()))?;
                let den = model.denoiser.bind(tape, false);
                let ctrl = model.control.bind(tape, false);
                let x = tape.constant(x_t.clone());
                fused_forward_vars(tape, &den, &ctrl, x, &pts.ts, c, model.use_last_fusion, &mut None)
            }
        }
    }

    fn eval(&self, pts: &Points, c: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let y = self.build(&mut tape, cv, pts)?;
        Ok(tape.value(y).clone())
    }

    /// ∇_C Σ (y(C) ⊙ weight), one row per probe point.
    fn weighted_grad(&self, pts: &Points, c: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let cv = tape.param(c.clone());
        let y = self.build(&mut tape, cv, pts)?;
        let w = tape.constant(weight.clone());
        let yw = tape.mul(y, w)?;
        let s = tape.sum(yw);
        tape.backward(s)?.wrt(cv)
    }

    /// Per-row squared Jacobian Frobenius norms.
    pub fn jacobian_sq_norms(&self, pts: &Points) -> Result<Vec<f64>> {
        let (n, d) = pts.c.dims2("jacobian")?;
        let mut out = vec![0.0; n];
        for k in 0..d {
            let mut mask = Tensor::zeros(&[n, d]);
            for i in 0..n {
                mask.row_mut(i)[k] = 1.0;
            }
            let g = self.weighted_grad(pts, &pts.c, &mask)?;
            for (i, o) in out.iter_mut().enumerate() {
                *o += g.row(i).iter().map(|v| v * v).sum::<f64>();
            }
        }
        Ok(out)
    }

    /// Per-row Σ_i (y − ε)·∂²y/∂C_i², second derivatives by central
    /// differences of gradients.
    pub fn curvature_terms(&self, pts: &Points, h: f64) -> Result<Vec<f64>> {
        let (n, d) = pts.c.dims2("curvature")?;
        let r = self.eval(pts, &pts.c)?.sub(&pts.eps)?;
        let mut out = vec![0.0; n];
        for i in 0..d {
            let shifted = |s: f64| {
                let mut c = pts.c.clone();
                for row in 0..n {
                    c.row_mut(row)[i] += s;
                }
                c
            };
            let gp = self.weighted_grad(pts, &shifted(h), &r)?;
            let gm = self.weighted_grad(pts, &shifted(-h), &r)?;
            for (row, o) in out.iter_mut().enumerate() {
                *o += (gp.get(row, i) - gm.get(row, i)) / (2.0 * h);
            }
        }
        Ok(out)
    }
}

/// Probe points: conditions, targets and optional diffusion context.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    pub c: Tensor,
    pub eps: Tensor,
    pub x_t: Option<Tensor>,
    pub ts: Vec<f64>,
}

/// Distribution of probe points.
#[derive(Debug, Clone, PartialEq)]
pub enum PointLaw {
    /// C ~ N(0, I), ε ~ N(0, I) independent.
    Gaussian,
    /// C ~ N(0, I), ε = teacher(C).
    Teacher(SiluNet),
    /// The training sampler: C = x0, ε and x_t as in denoiser training.
    Diffusion { data: Tensor, process: Process },
}

impl PointLaw {
    pub fn draw(&self, d: usize, n: usize, rng: &mut Rng) -> Result<Points> {
        match self {
            PointLaw::Gaussian => {
                let c = sample_normal(rng, &[n, d]);
                let eps = sample_normal(rng, &[n, d]);
                Ok(Points {
                    c,
                    eps,
                    x_t: None,
                    ts: Vec::new(),
                })
            }
            PointLaw::Teacher(t) => {
                let c = sample_normal(rng, &[n, d]);
                let eps = t.forward(&c)?;
                Ok(Points {
                    c,
                    eps,
                    x_t: None,
                    ts: Vec::new(),
                })
            }
            PointLaw::Diffusion { data, process } => {
                let b = draw_batch(data, n, process, rng)?;
                Ok(Points {
                    c: b.x0,
                    eps: b.eps,
                    x_t: Some(b.x_t),
                    ts: b.ts,
                })
            }
        }
    }
}

/// Unit-variance perturbation law; the harness scales it by η.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    #[default]
    Laplace,
    LaplaceFlipped,
    Gaussian,
}

fn unit_noise(law: NoiseLaw, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    // Laplace(b) has variance 2b².
    let b = std::f64::consts::FRAC_1_SQRT_2;
    Ok(match law {
        NoiseLaw::Laplace => sample_laplace(rng, b, shape)?,
        NoiseLaw::LaplaceFlipped => sample_laplace(rng, b, shape)?.scale(-1.0),
        NoiseLaw::Gaussian => sample_normal(rng, shape),
    })
}

#[derive(Debug, Clone)]
pub struct RegProbe {
    pub probe: Probe,
    pub law: PointLaw,
    pub n_mc: usize,
    pub seed: u64,
    pub shard_size: usize,
}

impl RegProbe {
    pub fn new(probe: Probe, law: PointLaw, n_mc: usize, seed: u64) -> Self {
        Self {
            probe,
            law,
            n_mc,
            seed,
            shard_size: 5_000,
        }
    }

    fn shards(&self) -> Vec<(usize, usize)> {
        let size = self.shard_size.max(1);
        (0..self.n_mc.div_ceil(size))
            .map(|s| (s, size.min(self.n_mc - s * size)))
            .collect()
    }

    fn points(&self, shard: usize, n: usize) -> Result<Points> {
        let mut rng = Rng::derived(self.seed, Stream::Data, shard as u64);
        self.law.draw(self.probe.dim(), n, &mut rng)
    }

    /// Runs `f` on every shard and concatenates the per-sample values.
    fn per_sample<F>(&self, f: F) -> Result<Vec<f64>>
    where
        F: Fn(usize, &Points) -> Result<Vec<f64>> + Sync + Send,
    {
        if self.n_mc == 0 {
            return Err(Error::InvalidArgument("n_mc must be positive".into()));
        }
        let shards = self.shards();
        let parts = par::map_slice(&shards, |&(s, n)| {
            let pts = self.points(s, n)?;
            f(s, &pts)
        });
        let mut out = Vec::with_capacity(self.n_mc);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegTerms {
    pub l1: Estimate,
    pub l2: Estimate,
}

impl RegTerms {
    pub fn total(&self) -> f64 {
        self.l1.mean + self.l2.mean
    }
}

pub fn reg_term(rp: &RegProbe) -> Result<RegTerms> {
    let check = |v: Vec<f64>, what: &str| {
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                step: 0,
                what: format!("{what} derivative"),
            })
        }
    };
    let l1 = check(rp.per_sample(|_, p| rp.probe.jacobian_sq_norms(p))?, "first")?;
    let l2 = check(rp.per_sample(|_, p| rp.probe.curvature_terms(p, FD_STEP))?, "second")?;
    Ok(RegTerms {
        l1: Estimate::of(&l1),
        l2: Estimate::of(&l2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub eta: f64,
    pub noise: NoiseLaw,
    pub clean_loss: Estimate,
    pub noised_loss: Estimate,
    pub gap: Estimate,
    /// η²·(L₁ + L₂) when the regularization terms were supplied.
    pub predicted: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    /// SE(gap) > 0.2·|gap|.
    pub insufficient_samples: bool,
}

fn row_sq_err(y: &Tensor, eps: &Tensor) -> Vec<f64> {
    (0..y.rows())
        .map(|i| y.row(i).iter().zip(eps.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect()
}

pub fn noised_gap(rp: &RegProbe, eta: f64, noise: NoiseLaw, reg: Option<&RegTerms>) -> Result<GapEstimate> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {eta}")));
    }
    if eta > 0.1 {
        log::warn!("eta {eta} exceeds the small-noise range");
    }
    let triples = rp.per_sample(|s, p| {
        let mut rng = Rng::derived(rp.seed, Stream::Noise, s as u64);
        let u = unit_noise(noise, p.c.shape(), &mut rng)?.scale(eta);
        let clean = row_sq_err(&rp.probe.eval(p, &p.c)?, &p.eps);
        let plus = row_sq_err(&rp.probe.eval(p, &p.c.add(&u)?)?, &p.eps);
        let minus = row_sq_err(&rp.probe.eval(p, &p.c.sub(&u)?)?, &p.eps);
        Ok(clean
            .iter()
            .zip(plus.iter().zip(&minus))
            .flat_map(|(c, (a, b))| [*c, 0.5 * (a + b)])
            .collect())
    })?;
    let clean: Vec<f64> = triples.iter().step_by(2).copied().collect();
    let noised: Vec<f64> = triples.iter().skip(1).step_by(2).copied().collect();
    let diffs: Vec<f64> = noised.iter().zip(&clean).map(|(a, b)| a - b).collect();
    let gap = Estimate::of(&diffs);
    Ok(GapEstimate {
        eta,
        noise,
        clean_loss: Estimate::of(&clean),
        noised_loss: Estimate::of(&noised),
        gap,
        predicted: reg.map(|r| eta * eta * r.total()),
        l1: reg.map(|r| r.l1.mean),
        l2: reg.map(|r| r.l2.mean),
        insufficient_samples: gap.se > 0.2 * gap.mean.abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ScalingOutcome {
    Fitted {
        slope: f64,
        intercept: f64,
        residuals: Vec<f64>,
    },
    Refused {
        reason: String,
    },
}

impl ScalingOutcome {
    pub fn slope(&self) -> Option<f64> {
        match self {
            ScalingOutcome::Fitted { slope, .. } => Some(*slope),
            ScalingOutcome::Refused { .. } => None,
        }
    }
}

/// Least-squares line through (log η, log gap).
pub fn scaling_check(points: &[(f64, f64)]) -> ScalingOutcome {
    if points.len() < 4 {
        return ScalingOutcome::Refused {
            reason: format!("need at least 4 grid points, got {}", points.len()),
        };
    }
    if let Some((eta, g)) = points.iter().find(|(e, g)| !(*e > 0.0) || !(*g > 0.0)) {
        return ScalingOutcome::Refused {
            reason: format!("non-positive gap {g} at eta {eta}"),
        };
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if hi / lo < 10.0 - 1e-9 {
        return ScalingOutcome::Refused {
            reason: "grid spans less than one decade".into(),
        };
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = xs.iter().zip(&ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    ScalingOutcome::Fitted {
        slope,
        intercept,
        residuals,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TikhonovReport {
    pub l1: f64,
    pub l2: f64,
    /// |L₂| / L₁; `None` when L₁ = 0.
    pub ratio: Option<f64>,
    pub fit_loss: Option<f64>,
}

pub fn tikhonov_at_optimum_check(rp: &RegProbe, fit_loss: Option<f64>) -> Result<TikhonovReport> {
    let r = reg_term(rp)?;
    Ok(TikhonovReport {
        l1: r.l1.mean,
        l2: r.l2.mean,
        ratio: (r.l1.mean > 0.0).then(|| r.l2.mean.abs() / r.l1.mean),
        fit_loss,
    })
}

/// Fits a SiLU probe to a teacher by full-batch AdamW on fixed points;
/// returns the fitted net and its final loss (mean per-row squared error).
pub fn fit_silu_to_teacher(
    init: SiluNet,
    teacher: &SiluNet,
    n_points: usize,
    steps: usize,
    seed: u64,
) -> Result<(SiluNet, f64)> {
    let d = init.w1.rows();
    let mut rng = Rng::new(seed, Stream::Data);
    let pts = PointLaw::Teacher(teacher.clone()).draw(d, n_points, &mut rng)?;
    let mut net = init;
    let cfg = AdamWConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &[&net.w1, &net.b1, &net.w2, &net.b2])?;
    let mut last = f64::INFINITY;
    for step in 0..steps {
        let mut tape = Tape::new();
        let v = net.bind(&mut tape, true);
        let c = tape.constant(pts.c.clone());
        let y = SiluNet::apply(&mut tape, v, c)?;
        let t = tape.constant(pts.eps.clone());
        let loss = tape.mse(y, t)?;
        last = tape.value(loss).data()[0] * d as f64;
        if !last.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "probe fit loss".into(),
            });
        }
        let g = tape.backward(loss)?;
        let grads = v.iter().map(|x| g.wrt(*x)).collect::<Result<Vec<_>>>()?;
        opt.step(&mut net.tensors_mut(), &grads)?;
    }
    Ok((net, last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub probe: String,
    pub dim: usize,
    pub n_mc: usize,
    pub seed: u64,
    pub reg: RegTerms,
    /// ‖W‖²_F for a linear probe.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frobenius_sq: Option<f64>,
    pub gaps: Vec<GapEstimate>,
    pub scaling: ScalingOutcome,
    pub slope: Option<f64>,
    pub tikhonov: TikhonovReport,
}

/// Runs the full sweep for one probe.
pub fn verify(rp: &RegProbe, etas: &[f64], noise: NoiseLaw) -> Result<VerifyReport> {
    let reg = reg_term(rp)?;
    let gaps = etas
        .iter()
        .map(|&e| noised_gap(rp, e, noise, Some(&reg)))
        .collect::<Result<Vec<_>>>()?;
    let scaling = scaling_check(&gaps.iter().map(|g| (g.eta, g.gap.mean)).collect::<Vec<_>>());
    let frobenius_sq = match &rp.probe {
        Probe::Linear { w } => Some(w.sq_norm()),
        _ => None,
    };
    Ok(VerifyReport {
        probe: rp.probe.name().to_string(),
        dim: rp.probe.dim(),
        n_mc: rp.n_mc,
        seed: rp.seed,
        tikhonov: TikhonovReport {
            l1: reg.l1.mean,
            l2: reg.l2.mean,
            ratio: (reg.l1.mean > 0.0).then(|| reg.l2.mean.abs() / reg.l1.mean),
            fit_loss: None,
        },
        reg,
        frobenius_sq,
        slope: scaling.slope(),
        gaps,
        scaling,
    })
}
