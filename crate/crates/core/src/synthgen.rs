//! Seeded high-dimensional classification/regression tables.
//!
//! Classification draws two Gaussian clusters centred at `±class_sep·u`,
//! `u` a random unit vector in the informative subspace; the remaining
//! columns are standard-normal noise. Regression uses
//! `y = w·x_informative + noise_std·N(0, 1)` with a seeded unit vector `w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::schema::{Column, ColumnKind, ColumnRole, ColumnSpec, RawTable, TableSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Binary,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_rows: usize,
    pub n_features: usize,
    pub n_informative: usize,
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    #[serde(default = "default_balance")]
    pub balance: f64,
    pub task: SynthTask,
    #[serde(default)]
    pub seed: u64,
    /// Linear combinations of informative columns placed after them.
    #[serde(default)]
    pub n_redundant: usize,
    /// Regression target noise standard deviation.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_class_sep() -> f64 {
    1.0
}
fn default_balance() -> f64 {
    0.5
}
fn default_noise_std() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn binary(n_rows: usize, n_features: usize, n_informative: usize, class_sep: f64, seed: u64) -> Self {
        Self {
            n_rows,
            n_features,
            n_informative,
            class_sep,
            balance: 0.5,
            task: SynthTask::Binary,
            seed,
            n_redundant: 0,
            noise_std: 0.1,
        }
    }

    pub fn regression(n_rows: usize, n_features: usize, n_informative: usize, seed: u64) -> Self {
        Self {
            task: SynthTask::Regression,
            ..Self::binary(n_rows, n_features, n_informative, 1.0, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_informative == 0 {
            return Err(Error::InvalidArgument("n_informative must be at least 1".into()));
        }
        if self.n_informative + self.n_redundant > self.n_features {
            return Err(Error::InvalidArgument(format!(
                "n_informative ({}) + n_redundant ({}) exceeds n_features ({})",
                self.n_informative, self.n_redundant, self.n_features
            )));
        }
        if self.n_rows == 0 {
            return Err(Error::InvalidArgument("n_rows must be positive".into()));
        }
        if !(self.class_sep >= 0.0) {
            return Err(Error::InvalidArgument("class_sep must be non-negative".into()));
        }
        if !(self.balance > 0.0 && self.balance < 1.0) {
            return Err(Error::InvalidArgument("balance must lie in (0, 1)".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> TableSchema {
        let mut cols: Vec<ColumnSpec> = (0..self.n_features)
            .map(|j| ColumnSpec::new(format!("x{j}"), ColumnKind::Numerical, ColumnRole::Feature))
            .collect();
        let kind = match self.task {
            SynthTask::Binary => ColumnKind::Categorical,
            SynthTask::Regression => ColumnKind::Numerical,
        };
        cols.push(ColumnSpec::new("y", kind, ColumnRole::Target));
        TableSchema::new(cols).expect("generated schema is valid")
    }
}

fn unit_vector(rng: &mut Rng, k: usize) -> Vec<f64> {
    loop {
        let mut u = vec![0.0; k];
        rng.fill_normal(&mut u);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return u.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Feature matrix (row-major) for the non-label columns.
fn features(spec: &SynthSpec, rng: &mut Rng, centers: Option<(&[f64], &[i8])>) -> Vec<Vec<f64>> {
    let k = spec.n_informative;
    let mix = unit_mix(spec, rng);
    (0..spec.n_rows)
        .map(|i| {
            let mut row = vec![0.0; spec.n_features];
            rng.fill_normal(&mut row);
            if let Some((u, sign)) = centers {
                for j in 0..k {
                    row[j] += spec.class_sep * f64::from(sign[i]) * u[j];
                }
            }
            for r in 0..spec.n_redundant {
                row[k + r] = (0..k).map(|j| mix[r][j] * row[j]).sum();
            }
            row
        })
        .collect()
}

fn unit_mix(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..spec.n_redundant)
        .map(|_| unit_vector(rng, spec.n_informative))
        .collect()
}

fn table(spec: &SynthSpec, rows: Vec<Vec<f64>>, target: Column) -> Result<RawTable> {
    let mut columns: Vec<Column> = (0..spec.n_features)
        .map(|j| Column::Numerical(rows.iter().map(|r| Some(r[j])).collect()))
        .collect();
    columns.push(target);
    RawTable::new(spec.schema(), columns)
}

pub fn generate_classification(spec: &SynthSpec) -> Result<RawTable> {
    spec.validate()?;
    if spec.task != SynthTask::Binary {
        return Err(Error::InvalidArgument("spec task is not binary".into()));
    }
    let mut rng = Rng::new(spec.seed, Stream::Data);
    let u = unit_vector(&mut rng, spec.n_informative);
    let n_pos = (spec.balance * spec.n_rows as f64).round() as usize;
    let mut sign: Vec<i8> = (0..spec.n_rows).map(|i| if i < n_pos { 1 } else { -1 }).collect();
    rng.shuffle(&mut sign);
    let rows = features(spec, &mut rng, Some((&u, &sign)));
    let labels = sign
        .iter()
        .map(|&s| Some(if s > 0 { "1" } else { "0" }.to_string()))
        .collect();
    table(spec, rows, Column::Categorical(labels))
}

pub fn generate_regression(spec: &SynthSpec) -> Result<RawTable> {
    spec.validate()?;
    if spec.task != SynthTask::Regression {
        return Err(Error::InvalidArgument("spec task is not regression".into()));
    }
    let mut rng = Rng::new(spec.seed, Stream::Data);
    let w = unit_vector(&mut rng, spec.n_informative);
    let rows = features(spec, &mut rng, None);
    let y = rows
        .iter()
        .map(|r| {
            let signal: f64 = w.iter().zip(r).map(|(a, b)| a * b).sum();
            Some(signal + spec.noise_std * rng.normal())
        })
        .collect();
    table(spec, rows, Column::Numerical(y))
}

pub fn generate(spec: &SynthSpec) -> Result<RawTable> {
    match spec.task {
        SynthTask::Binary => generate_classification(spec),
        SynthTask::Regression => generate_regression(spec),
    }
}
