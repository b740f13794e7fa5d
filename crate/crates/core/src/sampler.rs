//! Reverse-diffusion sampling with a per-sample condition held fixed over
//! the whole chain.

use serde::{Deserialize, Serialize};

use crate::control::{make_condition, ve_time_input, ModelBundle, Process};
use crate::diffusion::SigmaChoice;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{sample_normal, Rng, Stream};
use crate::schema::RawTable;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    /// Uniformly drawn pool row plus fresh noise of scale `b_inference`.
    #[default]
    TrainRowsPlusNoise,
    /// Pool row `i mod n` for sample `i`, plus noise of scale `b_inference`.
    FixedRows,
    /// Bare denoiser; no condition.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Defaults to the training row count when absent.
    pub n_samples: Option<usize>,
    pub condition_source: ConditionSource,
    /// Defaults to the training noise scale when absent.
    pub b_inference: Option<f64>,
    pub seed: u64,
    /// Rows per independently seeded chunk.
    pub chunk_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_samples: None,
            condition_source: ConditionSource::TrainRowsPlusNoise,
            b_inference: None,
            seed: 0,
            chunk_size: 256,
        }
    }
}

/// Observer called with `(chunk, network time, C_f)` at every reverse step.
pub type ConditionHook<'a> = &'a (dyn Fn(usize, f64, &Tensor) + Sync);

/// Draws `n` rows from the model. `pool` supplies condition rows in the
/// encoded space and is required unless the source is `None` or the
/// bundle has no control branch.
pub fn sample_batch(bundle: &ModelBundle, pool: Option<&Tensor>, n: usize, cfg: &SampleConfig) -> Result<Tensor> {
    sample_batch_with_hook(bundle, pool, n, cfg, None)
}

pub fn sample_batch_with_hook(
    bundle: &ModelBundle,
    pool: Option<&Tensor>,
    n: usize,
    cfg: &SampleConfig,
    hook: Option<ConditionHook<'_>>,
) -> Result<Tensor> {
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be positive".into()));
    }
    let d = bundle.dim();
    let conditioned = bundle.control.is_some() && cfg.condition_source != ConditionSource::None;
    let b = match (cfg.b_inference, &bundle.control) {
        (Some(b), _) => b,
        (None, Some(c)) => c.b,
        (None, None) => 0.0,
    };
    let pool = if conditioned {
        let p = pool.ok_or_else(|| Error::MissingPrerequisite("condition pool is required".into()))?;
        if p.rows() == 0 {
            return Err(Error::Data("condition pool is empty".into()));
        }
        if p.cols() != d {
            return Err(Error::shape("sample_batch", p.shape(), &[p.rows(), d]));
        }
        Some(p)
    } else {
        None
    };
    if n == 0 {
        return Ok(Tensor::zeros(&[0, d]));
    }
    let n_chunks = n.div_ceil(cfg.chunk_size);
    let chunks = par::map_indexed(n_chunks, |c| {
        let start = c * cfg.chunk_size;
        let m = cfg.chunk_size.min(n - start);
        let c_f = match pool {
            Some(p) => Some(draw_conditions(bundle, p, start, m, b, cfg, c)?),
            None => None,
        };
        run_chain(bundle, m, c_f.as_ref(), cfg.seed, c, hook)
    });
    let mut data = Vec::with_capacity(n * d);
    for chunk in chunks {
        data.extend(chunk?.into_data());
    }
    Tensor::new(&[n, d], data)
}

fn draw_conditions(
    bundle: &ModelBundle,
    pool: &Tensor,
    start: usize,
    m: usize,
    b: f64,
    cfg: &SampleConfig,
    chunk: usize,
) -> Result<Tensor> {
    let mut rng = Rng::derived(cfg.seed, Stream::Data, chunk as u64);
    let idx: Vec<usize> = match cfg.condition_source {
        ConditionSource::FixedRows => (start..start + m).map(|i| i % pool.rows()).collect(),
        _ => (0..m).map(|_| rng.below(pool.rows())).collect(),
    };
    make_condition(&pool.select_rows(&idx), b, bundle.flags.noise_type, &mut rng)
}

fn run_chain(
    bundle: &ModelBundle,
    m: usize,
    c_f: Option<&Tensor>,
    seed: u64,
    chunk: usize,
    hook: Option<ConditionHook<'_>>,
) -> Result<Tensor> {
    let d = bundle.dim();
    let mut rng = Rng::derived(seed, Stream::Noise, chunk as u64);
    let observe = |t: f64| {
        if let (Some(h), Some(c)) = (hook, c_f) {
            h(chunk, t, c);
        }
    };
    match &bundle.process {
        Process::Ddpm { sigma, .. } => {
            let sched = bundle.process.ddpm_schedule()?.expect("ddpm");
            let mut x = sample_normal(&mut rng, &[m, d]);
            for t in (1..=sched.steps).rev() {
                let tf = t as f64;
                observe(tf);
                let eps = bundle.predict(&x, &vec![tf; m], c_f)?;
                let z = if t > 1 {
                    sample_normal(&mut rng, &[m, d])
                } else {
                    Tensor::zeros(&[m, d])
                };
                x = sched.reverse_step(&x, t, &eps, &z, *sigma)?;
                check_state(&x, t)?;
            }
            Ok(x)
        }
        Process::Ve { steps, .. } => {
            let sched = bundle.process.ve_schedule()?.expect("ve");
            let dt = 1.0 / *steps as f64;
            let mut x = sample_normal(&mut rng, &[m, d]).scale(sched.sigma_max);
            for k in 0..*steps {
                let t = 1.0 - k as f64 * dt;
                let tin = ve_time_input(t, *steps);
                observe(tin);
                let eps = bundle.predict(&x, &vec![tin; m], c_f)?;
                let z = if k + 1 < *steps {
                    sample_normal(&mut rng, &[m, d])
                } else {
                    Tensor::zeros(&[m, d])
                };
                x = sched.reverse_step(&x, t, dt.min(t), &eps, &z)?;
                check_state(&x, steps - k)?;
            }
            Ok(x)
        }
    }
}

fn check_state(x: &Tensor, t: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: t,
            what: "sampler state".into(),
        })
    }
}

/// Samples and decodes a table; the condition pool is the encoded
/// training table.
pub fn synthesize_table(bundle: &ModelBundle, train: &RawTable, cfg: &SampleConfig) -> Result<RawTable> {
    let n = cfg.n_samples.unwrap_or(train.n_rows());
    let pool = bundle.encoder.encode(train)?.matrix;
    let x = sample_batch(bundle, Some(&pool), n, cfg)?;
    bundle.encoder.decode(&x)
}

/// The reverse-step noise choice of the bundle, if it uses DDPM.
pub fn sigma_choice(bundle: &ModelBundle) -> Option<SigmaChoice> {
    match bundle.process {
        Process::Ddpm { sigma, .. } => Some(sigma),
        Process::Ve { .. } => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{BundleFlags, ControlParams, ZeroConvKind};
    use crate::denoiser::DenoiserParams;
    use crate::encode::EncoderState;
    use crate::synthgen::{generate, SynthSpec};
    use std::sync::Mutex;

    fn bundle(control: bool, process: Process) -> (ModelBundle, RawTable) {
        let table = generate(&SynthSpec::binary(40, 3, 2, 1.0, 0)).unwrap();
        let encoder = EncoderState::fit(&table).unwrap();
        let d = encoder.dim();
        let den = DenoiserParams::init(&mut Rng::new(1, Stream::Init), d, 8).unwrap();
        let ctrl = control.then(|| ControlParams::attach(&den, ZeroConvKind::Dense, 0.005).unwrap());
        (
            ModelBundle {
                denoiser: den,
                control: ctrl,
                process,
                encoder,
                flags: BundleFlags::default(),
            },
            table,
        )
    }

    fn cfg() -> SampleConfig {
        SampleConfig {
            chunk_size: 7,
            seed: 3,
            ..SampleConfig::default()
        }
    }

    #[test]
    fn zero_control_matches_bare_chain_bitwise() {
        for p in [Process::ddpm(12).unwrap(), Process::ve()] {
            let (with, table) = bundle(true, p.clone());
            let (bare, _) = bundle(false, p);
            let pool = with.encoder.encode(&table).unwrap().matrix;
            let a = sample_batch(&with, Some(&pool), 20, &cfg()).unwrap();
            let b = sample_batch(&bare, None, 20, &cfg()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_samples_give_empty_table() {
        let (b, table) = bundle(true, Process::ddpm(5).unwrap());
        let c = SampleConfig {
            n_samples: Some(0),
            ..cfg()
        };
        let out = synthesize_table(&b, &table, &c).unwrap();
        assert_eq!(out.n_rows(), 0);
    }

    #[test]
    fn default_size_and_known_categories() {
        let (b, table) = bundle(true, Process::ddpm(5).unwrap());
        let out = synthesize_table(&b, &table, &cfg()).unwrap();
        assert_eq!(out.n_rows(), table.n_rows());
        let vocab = b.encoder.target_vocabulary().unwrap();
        for v in out.target().as_categorical().unwrap() {
            assert!(vocab.categories.contains(v));
        }
    }

    #[test]
    fn empty_pool_is_an_error() {
        let (b, _) = bundle(true, Process::ddpm(5).unwrap());
        let empty = Tensor::zeros(&[0, b.dim()]);
        assert!(sample_batch(&b, Some(&empty), 3, &cfg()).is_err());
        assert!(sample_batch(&b, None, 3, &cfg()).is_err());
    }

    #[test]
    fn condition_is_constant_along_chain() {
        let (b, table) = bundle(true, Process::ddpm(6).unwrap());
        let pool = b.encoder.encode(&table).unwrap().matrix;
        let seen: Mutex<Vec<(usize, f64, Tensor)>> = Mutex::new(Vec::new());
        let hook = |c: usize, t: f64, cf: &Tensor| seen.lock().unwrap().push((c, t, cf.clone()));
        sample_batch_with_hook(&b, Some(&pool), 15, &cfg(), Some(&hook)).unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen.len(), 3 * 6);
        for chunk in 0..3 {
            let cs: Vec<_> = seen.iter().filter(|s| s.0 == chunk).collect();
            assert_eq!(cs.len(), 6);
            assert!(cs.iter().all(|s| s.2 == cs[0].2));
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let (b, table) = bundle(true, Process::ddpm(8).unwrap());
        let x = synthesize_table(&b, &table, &cfg()).unwrap();
        let y = synthesize_table(&b, &table, &cfg()).unwrap();
        assert_eq!(x.to_csv_bytes().unwrap(), y.to_csv_bytes().unwrap());
    }
}
