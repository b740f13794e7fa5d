//! Command implementations behind the CLI. Every command reads and writes
//! fixed file names under one output directory and records a manifest
//! entry with input hashes, seed, version and the resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ProbeKind, RunConfig};
use crate::control::{make_condition, ControlParams, ModelBundle, NoiseType};
use crate::denoiser::DenoiserParams;
use crate::encode::{split, EncoderState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, TaskScores};
use crate::rng::{sample_normal, Rng, Stream};
use crate::sampler::{synthesize_table, ConditionSource};
use crate::schema::{RawTable, TableSchema};
use crate::synthgen::generate;
use crate::tensor::Tensor;
use crate::theorem::{verify, PointLaw, Probe, RegProbe, SiluNet};
use crate::train::{train_control, train_denoiser, train_joint, Stage, TrainConfig};

pub const DATA_CSV: &str = "data.csv";
pub const SCHEMA_JSON: &str = "schema.json";
pub const DENOISER_CKPT: &str = "denoiser.ckpt";
pub const CTRTAB_CKPT: &str = "ctrtab.ckpt";
pub const SYNTHETIC_CSV: &str = "synthetic.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const VERIFY_JSON: &str = "verify.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of every input file, keyed by file name.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every artifact written.
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

/// `manifest.json`: one entry per command run in the directory.
pub type Manifest = BTreeMap<String, ManifestEntry>;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn record(out: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    let hash_all = |paths: Vec<PathBuf>| -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, sha256_file(p)?))
            })
            .collect()
    };
    let entry = ManifestEntry {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        inputs: hash_all(inputs.iter().map(|p| p.to_path_buf()).collect())?,
        outputs: hash_all(outputs.iter().map(|n| out.join(n)).collect())?,
        config: cfg.clone(),
    };
    let path = out.join(MANIFEST_JSON);
    let mut manifest: Manifest = std::fs::read(&path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    manifest.insert(command.to_string(), entry);
    write_json(&path, &manifest)
}

/// Input table and its seeded train/test split.
pub struct Dataset {
    pub csv_path: PathBuf,
    pub schema_path: PathBuf,
    pub schema: TableSchema,
    pub train: RawTable,
    pub test: RawTable,
}

pub fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let csv_path = cfg.data.csv.clone().unwrap_or_else(|| out.join(DATA_CSV));
    let schema_path = cfg.data.schema.clone().unwrap_or_else(|| out.join(SCHEMA_JSON));
    let schema = TableSchema::load(&schema_path)?;
    let table = RawTable::load_csv(&csv_path, &schema)?;
    let (train, test) = split(&table, cfg.data.test_fraction, &mut Rng::new(cfg.seed, Stream::Data))?;
    Ok(Dataset {
        csv_path,
        schema_path,
        schema,
        train,
        test,
    })
}

/// Writes `data.csv` and `schema.json` from the `gen` section.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg
        .gen
        .as_ref()
        .ok_or_else(|| Error::Config("gen section is required for `gen`".into()))?;
    ensure_dir(out)?;
    let table = generate(spec)?;
    table.write_csv(&out.join(DATA_CSV))?;
    table.schema.save(&out.join(SCHEMA_JSON))?;
    record(out, "gen", cfg, &[], &[DATA_CSV, SCHEMA_JSON])
}

fn bundle_of(encoder: EncoderState, tc: &TrainConfig, denoiser: DenoiserParams, control: Option<ControlParams>) -> Result<ModelBundle> {
    Ok(ModelBundle {
        denoiser,
        control,
        process: tc.build_process()?,
        encoder,
        flags: tc.flags(),
    })
}

/// Trains one stage. `denoiser` writes `denoiser.ckpt`; `control` needs
/// it and writes `ctrtab.ckpt`; `joint` writes `ctrtab.ckpt` directly.
pub fn cmd_train(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg, out)?;
    let tc = &cfg.train;
    let echo = serde_json::to_value(tc)?;
    match stage {
        Stage::Denoiser => {
            let encoder = EncoderState::fit(&ds.train)?;
            let data = encoder.encode(&ds.train)?.matrix;
            let den = train_denoiser(&data, tc)?;
            ensure_dir(out)?;
            save_checkpoint(&bundle_of(encoder, tc, den.params, None)?, echo, &out.join(DENOISER_CKPT))?;
            record(out, "train.denoiser", cfg, &[&ds.csv_path, &ds.schema_path], &[DENOISER_CKPT])
        }
        Stage::Control => {
            let ckpt = out.join(DENOISER_CKPT);
            if !ckpt.exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "control stage needs a trained denoiser at {}",
                    ckpt.display()
                )));
            }
            let (base, _) = load_checkpoint(&ckpt, Some(&ds.schema.fingerprint()))?;
            if base.process != tc.build_process()? || base.denoiser.hidden() != tc.hidden {
                return Err(Error::Config(
                    "train settings (process, diffusion_steps, hidden) differ from the denoiser checkpoint".into(),
                ));
            }
            let data = base.encoder.encode(&ds.train)?.matrix;
            let ctrl = train_control(&data, &base.denoiser, tc)?;
            let bundle = bundle_of(base.encoder, tc, base.denoiser, Some(ctrl.params))?;
            save_checkpoint(&bundle, echo, &out.join(CTRTAB_CKPT))?;
            record(
                out,
                "train.control",
                cfg,
                &[&ds.csv_path, &ds.schema_path, &ckpt],
                &[CTRTAB_CKPT],
            )
        }
        Stage::Joint => {
            let encoder = EncoderState::fit(&ds.train)?;
            let data = encoder.encode(&ds.train)?.matrix;
            let (den, ctrl) = train_joint(&data, tc)?.params;
            ensure_dir(out)?;
            save_checkpoint(&bundle_of(encoder, tc, den, Some(ctrl))?, echo, &out.join(CTRTAB_CKPT))?;
            record(out, "train.joint", cfg, &[&ds.csv_path, &ds.schema_path], &[CTRTAB_CKPT])
        }
    }
}

/// Samples `synthetic.csv`. Uses `ctrtab.ckpt`, or `denoiser.ckpt` when
/// the condition source is `none` and no control checkpoint exists.
pub fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg, out)?;
    let full = out.join(CTRTAB_CKPT);
    let bare = out.join(DENOISER_CKPT);
    let ckpt = if full.exists() {
        full
    } else if cfg.sample.condition_source == ConditionSource::None && bare.exists() {
        bare
    } else {
        return Err(Error::MissingPrerequisite(format!(
            "sampling needs a checkpoint at {}",
            full.display()
        )));
    };
    let (bundle, _) = load_checkpoint(&ckpt, Some(&ds.schema.fingerprint()))?;
    let syn = synthesize_table(&bundle, &ds.train, &cfg.sample)?;
    syn.write_csv(&out.join(SYNTHETIC_CSV))?;
    let schema_out = out.join(SCHEMA_JSON);
    let same = std::fs::read(&schema_out).ok() == std::fs::read(&ds.schema_path).ok();
    if !same {
        ds.schema.save(&schema_out)?;
    }
    record(
        out,
        "sample",
        cfg,
        &[&ds.csv_path, &ds.schema_path, &ckpt],
        &[SYNTHETIC_CSV, SCHEMA_JSON],
    )
}

fn fill_provenance(report: &mut MetricsReport, cfg: &RunConfig) -> Result<()> {
    report.seeds.insert("split".into(), cfg.seed);
    report.seeds.insert("train".into(), cfg.train.seed);
    report.seeds.insert("sample".into(), cfg.sample.seed);
    report.config_hash = cfg.hash()?;
    let s = &mut report.settings;
    s.insert("profile".into(), format!("{:?}", cfg.profile).to_lowercase());
    s.insert("b".into(), cfg.train.b.to_string());
    s.insert("noise_type".into(), format!("{:?}", cfg.train.noise_type).to_lowercase());
    s.insert("use_last_fusion".into(), cfg.train.use_last_fusion.to_string());
    s.insert("condition_source".into(), format!("{:?}", cfg.sample.condition_source).to_lowercase());
    Ok(())
}

/// Scores `synthetic.csv` against the real split into `metrics.json`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg, out)?;
    let syn_path = out.join(SYNTHETIC_CSV);
    if !syn_path.exists() {
        return Err(Error::MissingPrerequisite(format!("no synthetic table at {}", syn_path.display())));
    }
    let syn = RawTable::load_csv(&syn_path, &ds.schema)?;
    let mut report = evaluate(&ds.train, &ds.test, &syn, &cfg.eval)?;
    fill_provenance(&mut report, cfg)?;
    write_json(&out.join(METRICS_JSON), &report)?;
    record(
        out,
        "eval",
        cfg,
        &[&ds.csv_path, &ds.schema_path, &syn_path],
        &[METRICS_JSON],
    )
}

/// Runs the noise-regularization check into `verify.json`.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<()> {
    let v = &cfg.verify;
    let mut rng = Rng::new(cfg.seed, Stream::Init);
    let probe = match v.probe {
        ProbeKind::Linear => Probe::Linear {
            w: sample_normal(&mut rng, &[v.dim, v.dim]),
        },
        ProbeKind::Silu => Probe::Silu {
            net: SiluNet::init(&mut rng, v.dim, v.hidden),
        },
    };
    let rp = RegProbe::new(probe, PointLaw::Gaussian, v.n_mc, cfg.seed);
    let report = verify(&rp, &v.etas, v.noise)?;
    ensure_dir(out)?;
    write_json(&out.join(VERIFY_JSON), &report)?;
    record(out, "verify", cfg, &[], &[VERIFY_JSON])
}

/// One ablation row: a named config transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub train: TrainConfig,
    /// Staged control training on top of the base denoiser.
    pub control: bool,
    pub joint: bool,
    /// Append a copy of the training rows perturbed by Laplace noise.
    pub duplicate_noise: Option<f64>,
}

/// The base config plus every ablation transform.
pub fn ablation_variants(cfg: &RunConfig) -> Vec<Variant> {
    let base = cfg.train.clone();
    let v = |name: &str, train: TrainConfig, control: bool| Variant {
        name: name.to_string(),
        train,
        control,
        joint: false,
        duplicate_noise: None,
    };
    let mut out = vec![
        v("denoiser", base.clone(), false),
        v(
            "train_x2",
            TrainConfig {
                steps: base.steps * 2,
                ..base.clone()
            },
            false,
        ),
        Variant {
            duplicate_noise: Some(cfg.ablate.duplicate_noise),
            ..v("noisy_duplicate", base.clone(), false)
        },
        v(
            "wide",
            TrainConfig {
                hidden: base.hidden * 2,
                ..base.clone()
            },
            false,
        ),
        v(
            "dropout",
            TrainConfig {
                dropout: cfg.ablate.dropout,
                ..base.clone()
            },
            false,
        ),
        v("ctrtab", base.clone(), true),
        Variant {
            joint: true,
            ..v("joint", base.clone(), true)
        },
        v(
            "no_last_fusion",
            TrainConfig {
                use_last_fusion: false,
                ..base.clone()
            },
            true,
        ),
    ];
    for nt in [NoiseType::Gaussian, NoiseType::Uniform] {
        out.push(v(
            &format!("noise_{}", format!("{nt:?}").to_lowercase()),
            TrainConfig {
                noise_type: nt,
                ..base.clone()
            },
            true,
        ));
    }
    for &b in &cfg.ablate.b_values {
        out.push(v(&format!("b={b}"), TrainConfig { b, ..base.clone() }, true));
    }
    if !cfg.ablate.variants.is_empty() {
        out.retain(|x| cfg.ablate.variants.contains(&x.name));
    }
    out
}

fn with_noisy_copy(data: &Tensor, scale: f64, seed: u64) -> Result<Tensor> {
    let mut rng = Rng::derived(seed, Stream::Data, 7);
    let noisy = make_condition(data, scale, NoiseType::Laplace, &mut rng)?;
    let mut all = data.data().to_vec();
    all.extend_from_slice(noisy.data());
    Tensor::new(&[2 * data.rows(), data.cols()], all)
}

/// Trains and samples one variant; `base` caches the stage-1 denoiser
/// shared by staged variants with the base width.
pub fn run_variant(
    variant: &Variant,
    encoder: &EncoderState,
    data: &Tensor,
    base: &mut Option<DenoiserParams>,
    train_rows: &RawTable,
    cfg: &RunConfig,
) -> Result<RawTable> {
    let tc = &variant.train;
    let bundle = if variant.joint {
        let (den, ctrl) = train_joint(data, tc)?.params;
        bundle_of(encoder.clone(), tc, den, Some(ctrl))?
    } else if variant.control {
        let den = match base {
            Some(d) if d.hidden() == tc.hidden => d.clone(),
            _ => {
                let d = train_denoiser(data, tc)?.params;
                *base = Some(d.clone());
                d
            }
        };
        let ctrl = train_control(data, &den, tc)?.params;
        bundle_of(encoder.clone(), tc, den, Some(ctrl))?
    } else {
        let d = match variant.duplicate_noise {
            Some(s) => train_denoiser(&with_noisy_copy(data, s, tc.seed)?, tc)?.params,
            None => train_denoiser(data, tc)?.params,
        };
        bundle_of(encoder.clone(), tc, d, None)?
    };
    let sc = crate::sampler::SampleConfig {
        seed: tc.seed,
        ..cfg.sample.clone()
    };
    synthesize_table(&bundle, train_rows, &sc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub synthetic: Vec<TaskScores>,
    /// Per-metric mean over seeds.
    pub mean: BTreeMap<String, f64>,
    pub ndcr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub real: TaskScores,
    pub variants: Vec<VariantResult>,
}

/// Runs every ablation variant over the configured seeds into
/// `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg, out)?;
    let encoder = EncoderState::fit(&ds.train)?;
    let data = encoder.encode(&ds.train)?.matrix;
    let seeds = if cfg.ablate.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablate.seeds.clone()
    };
    let variants = ablation_variants(cfg);
    let mut results: Vec<VariantResult> = variants
        .iter()
        .map(|v| VariantResult {
            name: v.name.clone(),
            seeds: seeds.clone(),
            synthetic: Vec::new(),
            mean: BTreeMap::new(),
            ndcr: Vec::new(),
        })
        .collect();
    let mut real = None;
    for &seed in &seeds {
        let mut base = None;
        for (v, r) in variants.iter().zip(results.iter_mut()) {
            let mut v = v.clone();
            v.train.seed = seed;
            log::info!("ablation {} seed {seed}", v.name);
            let syn = run_variant(&v, &encoder, &data, &mut base, &ds.train, cfg)?;
            let m = evaluate(&ds.train, &ds.test, &syn, &cfg.eval)?;
            real.get_or_insert(m.efficacy.real.clone());
            r.synthetic.push(m.efficacy.synthetic);
            r.ndcr.push(m.ndcr.ndcr);
        }
    }
    for r in &mut results {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in &r.synthetic {
            for (k, v) in s.named() {
                let e = sums.entry(k.to_string()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        r.mean = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    }
    let report = AblationReport {
        real: real.unwrap_or_default(),
        variants: results,
    };
    write_json(&out.join(ABLATION_JSON), &report)?;
    record(out, "ablate", cfg, &[&ds.csv_path, &ds.schema_path], &[ABLATION_JSON])
}
