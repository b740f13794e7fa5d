//! Run configuration: one JSON file per run. The `profile` field selects
//! the defaults that the `train` section overrides key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::gbt::GbtConfig;
use crate::sampler::SampleConfig;
use crate::synthgen::SynthSpec;
use crate::theorem::NoiseLaw;
use crate::train::{Profile, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Full table; defaults to `<out>/data.csv`.
    pub csv: Option<PathBuf>,
    /// Defaults to `<out>/schema.json`.
    pub schema: Option<PathBuf>,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            schema: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Linear,
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub probe: ProbeKind,
    pub dim: usize,
    /// Hidden width of the SiLU probe.
    pub hidden: usize,
    pub n_mc: usize,
    pub etas: Vec<f64>,
    pub noise: NoiseLaw,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            probe: ProbeKind::Linear,
            dim: 4,
            hidden: 8,
            n_mc: 100_000,
            etas: vec![1e-3, 3e-3, 1e-2, 3e-2],
            noise: NoiseLaw::Laplace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Variant names to run; empty runs all of them.
    pub variants: Vec<String>,
    /// Extra control-noise scales for the b sweep.
    pub b_values: Vec<f64>,
    /// Seeds per variant; empty uses the global seed.
    pub seeds: Vec<u64>,
    pub duplicate_noise: f64,
    pub dropout: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Vec::new(),
            b_values: Vec::new(),
            seeds: Vec::new(),
            duplicate_noise: 0.01,
            dropout: 0.1,
        }
    }
}

/// Resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub gen: Option<SynthSpec>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: GbtConfig,
    pub verify: VerifyConfig,
    pub ablate: AblateConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    profile: Profile,
    seed: Option<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    gen: Option<SynthSpec>,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    train: Option<serde_json::Map<String, serde_json::Value>>,
    #[serde(default)]
    sample: Option<serde_json::Map<String, serde_json::Value>>,
    #[serde(default)]
    eval: GbtConfig,
    #[serde(default)]
    verify: VerifyConfig,
    #[serde(default)]
    ablate: AblateConfig,
}

fn overlay<T>(base: &T, patch: Option<serde_json::Map<String, serde_json::Value>>, what: &str) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(base)?;
    if let (Some(patch), serde_json::Value::Object(obj)) = (patch, &mut v) {
        for (k, val) in patch {
            if !obj.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{what}.{k}`")));
            }
            obj.insert(k, val);
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_json("{}").expect("empty config resolves")
    }
}

impl RunConfig {
    /// Parses and resolves a config. The global seed fills the train,
    /// sample and gen seeds unless a section sets its own.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawRunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = raw.seed.unwrap_or(0);
        let mut base_train = TrainConfig::profile(raw.profile);
        base_train.seed = seed;
        let train = overlay(&base_train, raw.train, "train")?;
        let base_sample = SampleConfig {
            seed,
            ..SampleConfig::default()
        };
        let sample = overlay(&base_sample, raw.sample, "sample")?;
        let cfg = Self {
            profile: raw.profile,
            seed,
            out: raw.out,
            gen: raw.gen,
            data: raw.data,
            train,
            sample,
            eval: raw.eval,
            verify: raw.verify,
            ablate: raw.ablate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config("data.test_fraction must lie in (0, 1)".into()));
        }
        if let Some(g) = &self.gen {
            g.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.verify.n_mc == 0 || self.verify.dim == 0 || self.verify.hidden == 0 {
            return Err(Error::Config("verify.n_mc, dim and hidden must be positive".into()));
        }
        if self.sample.chunk_size == 0 {
            return Err(Error::Config("sample.chunk_size must be positive".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved config.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical resolved config.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
