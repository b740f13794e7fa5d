//! Downstream-learner efficacy, privacy proxy and fidelity measurements.

pub mod fidelity;
pub mod gbt;
pub mod metrics;
pub mod ndcr;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encode::{EncoderState, Labels};
use crate::error::{Error, Result};
use crate::schema::RawTable;
use crate::tensor::Tensor;

pub use fidelity::{fidelity_scores, FidelityReport};
pub use gbt::{fit_gbt, GbtConfig, GbtModel, Loss};
pub use metrics::{auc, f1, macro_f1, rmse_r2, RegressionScores};
pub use ndcr::{ndcr, NdcrScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Regression,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    /// The training labels held a single class, so a constant predictor
    /// was used.
    pub collapsed: bool,
}

impl TaskScores {
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        [("auc", self.auc), ("f1", self.f1), ("rmse", self.rmse), ("r2", self.r2)]
            .into_iter()
            .filter_map(|(n, v)| Some((n, v?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficacyReport {
    pub task: TaskKind,
    pub real: TaskScores,
    pub synthetic: TaskScores,
    /// real − synthetic per metric.
    pub gap: BTreeMap<String, f64>,
    /// (real − synthetic) / |real| per metric, when real ≠ 0.
    pub relative_gap: BTreeMap<String, f64>,
}

struct Design {
    x: Tensor,
    labels: Labels,
}

fn design(enc: &EncoderState, table: &RawTable) -> Result<Design> {
    let e = enc.encode(table)?;
    Ok(Design {
        x: enc.feature_matrix(&e.matrix)?,
        labels: e.labels,
    })
}

/// Probability-like score of `class` for each test row, from a one-vs-rest
/// logistic model or a constant when the training labels are one-sided.
fn ovr_scores(train: &Design, classes: &[usize], class: usize, test: &Tensor, cfg: &GbtConfig) -> Result<(Vec<f64>, bool)> {
    let y: Vec<f64> = classes.iter().map(|&c| f64::from(c == class)).collect();
    let pos = y.iter().filter(|&&v| v == 1.0).count();
    if pos == 0 || pos == y.len() {
        let v = if pos == 0 { 0.0 } else { 1.0 };
        return Ok((vec![v; test.rows()], true));
    }
    let m = fit_gbt(&train.x, &y, Loss::Logistic, cfg)?;
    Ok((m.predict(test)?, false))
}

fn classify(
    train: &Design,
    test: &Design,
    k: usize,
    binary_positive: Option<usize>,
    cfg: &GbtConfig,
) -> Result<TaskScores> {
    let (Labels::Classes(tr), Labels::Classes(te)) = (&train.labels, &test.labels) else {
        return Err(Error::Eval("expected class labels".into()));
    };
    if let Some(pos) = binary_positive {
        let (scores, collapsed) = ovr_scores(train, tr, pos, &test.x, cfg)?;
        let truth: Vec<bool> = te.iter().map(|&c| c == pos).collect();
        let pred: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        let both = truth.iter().any(|&t| t) && truth.iter().any(|&t| !t);
        return Ok(TaskScores {
            auc: if both { Some(auc(&scores, &truth)?) } else { None },
            f1: Some(f1(&pred, &truth)?),
            collapsed,
            ..Default::default()
        });
    }
    let mut all = Vec::with_capacity(k);
    let mut collapsed = false;
    for c in 0..k {
        let (s, col) = ovr_scores(train, tr, c, &test.x, cfg)?;
        collapsed |= col;
        all.push(s);
    }
    let pred: Vec<usize> = (0..test.x.rows())
        .map(|i| crate::encode::argmax_first(&all.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect();
    let mut aucs = Vec::new();
    for (c, s) in all.iter().enumerate() {
        let truth: Vec<bool> = te.iter().map(|&v| v == c).collect();
        if truth.iter().any(|&t| t) && truth.iter().any(|&t| !t) {
            aucs.push(auc(s, &truth)?);
        }
    }
    Ok(TaskScores {
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        f1: Some(macro_f1(&pred, te, k)?),
        collapsed,
        ..Default::default()
    })
}

fn regress(train: &Design, test: &Design, cfg: &GbtConfig) -> Result<TaskScores> {
    let (Labels::Values(tr), Labels::Values(te)) = (&train.labels, &test.labels) else {
        return Err(Error::Eval("expected numerical labels".into()));
    };
    let m = fit_gbt(&train.x, tr, Loss::Squared, cfg)?;
    let s = rmse_r2(&m.predict(&test.x)?, te)?;
    Ok(TaskScores {
        rmse: Some(s.rmse),
        r2: s.r2,
        ..Default::default()
    })
}

/// Fits one learner on the real training split and one on the synthetic
/// table, and scores both on the real test split.
pub fn ml_efficacy(real_train: &RawTable, real_test: &RawTable, synthetic: &RawTable, cfg: &GbtConfig) -> Result<EfficacyReport> {
    if synthetic.n_rows() == 0 {
        return Err(Error::Eval("synthetic table is empty".into()));
    }
    let enc = EncoderState::fit(real_train)?;
    let tr = design(&enc, real_train)?;
    let te = design(&enc, real_test)?;
    let sy = design(&enc, synthetic)?;
    let (task, real, syn) = match enc.target_vocabulary() {
        Some(vocab) => {
            let k = vocab.len();
            let binary = (k == 2 && !vocab.has_missing()).then_some(1);
            let task = if binary.is_some() { TaskKind::Binary } else { TaskKind::Multiclass };
            (task, classify(&tr, &te, k, binary, cfg)?, classify(&sy, &te, k, binary, cfg)?)
        }
        None => (TaskKind::Regression, regress(&tr, &te, cfg)?, regress(&sy, &te, cfg)?),
    };
    let mut gap = BTreeMap::new();
    let mut relative_gap = BTreeMap::new();
    let syn_named: BTreeMap<_, _> = syn.named().into_iter().collect();
    for (name, r) in real.named() {
        if let Some(s) = syn_named.get(name) {
            gap.insert(name.to_string(), r - s);
            if r != 0.0 {
                relative_gap.insert(name.to_string(), (r - s) / r.abs());
            }
        }
    }
    Ok(EfficacyReport {
        task,
        real,
        synthetic: syn,
        gap,
        relative_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub efficacy: EfficacyReport,
    pub ndcr: NdcrScore,
    pub column_density: f64,
    pub pair_correlation: f64,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
    /// Training choices recorded with every report.
    pub settings: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn check_ranges(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut bad = Vec::new();
        for s in [&self.efficacy.real, &self.efficacy.synthetic] {
            if s.auc.is_some_and(|v| !unit(v)) || s.f1.is_some_and(|v| !unit(v)) {
                bad.push("auc/f1");
            }
            if s.r2.is_some_and(|v| v > 1.0) || s.rmse.is_some_and(|v| v < 0.0) {
                bad.push("rmse/r2");
            }
        }
        if !(0.0..=0.5).contains(&self.ndcr.ndcr) {
            bad.push("ndcr");
        }
        if !unit(self.column_density) || !unit(self.pair_correlation) {
            bad.push("fidelity");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Eval(format!("metrics out of range: {}", bad.join(", "))))
        }
    }
}

/// Efficacy, NDCR and fidelity of `synthetic` against the real splits.
/// Provenance fields are left empty for the caller to fill.
pub fn evaluate(real_train: &RawTable, real_test: &RawTable, synthetic: &RawTable, cfg: &GbtConfig) -> Result<MetricsReport> {
    let efficacy = ml_efficacy(real_train, real_test, synthetic, cfg)?;
    let enc = EncoderState::fit(real_train)?;
    let nd = ndcr(
        &enc.encode(synthetic)?.matrix,
        &enc.encode(real_train)?.matrix,
        &enc.encode(real_test)?.matrix,
    )?;
    let fid = fidelity_scores(real_train, synthetic)?;
    let report = MetricsReport {
        task: efficacy.task,
        efficacy,
        ndcr: nd,
        column_density: fid.column_density,
        pair_correlation: fid.pair_correlation,
        seeds: BTreeMap::new(),
        config_hash: String::new(),
        settings: BTreeMap::new(),
    };
    report.check_ranges()?;
    Ok(report)
}
