//! Column-wise density agreement and pairwise correlation agreement
//! between a real and a synthetic table.
//!
//! Numerical columns score 1 − KS, categorical columns 1 − TVD. Numerical
//! pairs score 1 − |ρ_real − ρ_syn|/2; categorical pairs score one minus
//! the total variation of the joint contingency tables. Mixed pairs bin the
//! numerical column into quantile bins of the real column first. Missing
//! numerical cells are dropped from KS and Pearson; in contingency tables
//! they form their own bin.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::schema::{Column, RawTable};

pub const MIXED_PAIR_BINS: usize = 10;

/// Two-sample Kolmogorov–Smirnov statistic by sorted merge.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Eval("ks needs two nonempty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let v = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Total variation distance between two empirical distributions.
pub fn tvd<K: Ord + Clone>(a: &[K], b: &[K]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Eval("tvd needs two nonempty samples".into()));
    }
    let mut freq: BTreeMap<K, (usize, usize)> = BTreeMap::new();
    for k in a {
        freq.entry(k.clone()).or_default().0 += 1;
    }
    for k in b {
        freq.entry(k.clone()).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    Ok(0.5 * freq.values().map(|&(p, q)| (p as f64 / na - q as f64 / nb).abs()).sum::<f64>())
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    }
}

/// One minus the TVD of the joint distribution of two discrete columns.
pub fn contingency_similarity<K: Ord + Clone>(real: (&[K], &[K]), syn: (&[K], &[K])) -> Result<f64> {
    let a: Vec<(K, K)> = real.0.iter().cloned().zip(real.1.iter().cloned()).collect();
    let b: Vec<(K, K)> = syn.0.iter().cloned().zip(syn.1.iter().cloned()).collect();
    Ok(1.0 - tvd(&a, &b)?)
}

fn numeric_present(v: &[Option<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// Discrete code per cell: categories by value, numerical cells by the
/// quantile bin of the real column (missing as its own code).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Code {
    Missing,
    Bin(usize),
    Cat(String),
}

fn quantile_edges(real: &[Option<f64>], bins: usize) -> Vec<f64> {
    let mut v = numeric_present(real);
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return Vec::new();
    }
    let mut e: Vec<f64> = (1..bins).map(|k| v[(k * v.len() / bins).min(v.len() - 1)]).collect();
    e.dedup();
    e
}

fn codes(col: &Column, edges: &[f64]) -> Vec<Code> {
    match col {
        Column::Numerical(v) => v
            .iter()
            .map(|x| match x {
                Some(x) => Code::Bin(edges.partition_point(|e| e < x)),
                None => Code::Missing,
            })
            .collect(),
        Column::Categorical(v) => v
            .iter()
            .map(|x| match x {
                Some(s) => Code::Cat(s.clone()),
                None => Code::Missing,
            })
            .collect(),
    }
}

fn column_score(real: &Column, syn: &Column) -> Result<f64> {
    match (real, syn) {
        (Column::Numerical(r), Column::Numerical(s)) => {
            let (r, s) = (numeric_present(r), numeric_present(s));
            if r.is_empty() && s.is_empty() {
                return Ok(1.0);
            }
            if r.is_empty() || s.is_empty() {
                return Ok(0.0);
            }
            Ok(1.0 - ks_statistic(&r, &s)?)
        }
        (Column::Categorical(r), Column::Categorical(s)) => Ok(1.0 - tvd(r, s)?),
        _ => Err(Error::Schema("column kinds differ".into())),
    }
}

fn pair_score(r: (&Column, &Column), s: (&Column, &Column)) -> Result<f64> {
    if let (Column::Numerical(ra), Column::Numerical(rb), Column::Numerical(sa), Column::Numerical(sb)) =
        (r.0, r.1, s.0, s.1)
    {
        let both = |a: &[Option<f64>], b: &[Option<f64>]| -> (Vec<f64>, Vec<f64>) {
            a.iter().zip(b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip()
        };
        let (x, y) = both(ra, rb);
        let (u, v) = both(sa, sb);
        return Ok(1.0 - (pearson(&x, &y) - pearson(&u, &v)).abs() / 2.0);
    }
    let edges = |c: &Column| match c {
        Column::Numerical(v) => quantile_edges(v, MIXED_PAIR_BINS),
        Column::Categorical(_) => Vec::new(),
    };
    let (ea, eb) = (edges(r.0), edges(r.1));
    let (ra, rb) = (codes(r.0, &ea), codes(r.1, &eb));
    let (sa, sb) = (codes(s.0, &ea), codes(s.1, &eb));
    contingency_similarity((&ra, &rb), (&sa, &sb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub column_density: f64,
    pub pair_correlation: f64,
    pub columns: Vec<String>,
    pub column_scores: Vec<f64>,
    /// Symmetric per-pair scores; the diagonal holds 1.
    pub pair_matrix: Vec<Vec<f64>>,
}

impl FidelityReport {
    pub fn pair_matrix_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let _ = writeln!(out, "column,{}", self.columns.join(","));
        for (name, row) in self.columns.iter().zip(&self.pair_matrix) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }

    pub fn write_pair_matrix(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.pair_matrix_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn fidelity_scores(real: &RawTable, synthetic: &RawTable) -> Result<FidelityReport> {
    if real.schema != synthetic.schema {
        return Err(Error::Schema("real and synthetic schemas differ".into()));
    }
    if real.n_rows() == 0 || synthetic.n_rows() == 0 {
        return Err(Error::Eval("fidelity needs nonempty tables".into()));
    }
    let p = real.columns.len();
    let column_scores = par::map_indexed(p, |j| column_score(&real.columns[j], &synthetic.columns[j]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
    let pair_scores = par::map_slice(&pairs, |&(i, j)| {
        pair_score(
            (&real.columns[i], &real.columns[j]),
            (&synthetic.columns[i], &synthetic.columns[j]),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut pair_matrix = vec![vec![1.0; p]; p];
    for (&(i, j), &s) in pairs.iter().zip(&pair_scores) {
        pair_matrix[i][j] = s;
        pair_matrix[j][i] = s;
    }
    let mean = |v: &[f64]| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(FidelityReport {
        column_density: mean(&column_scores),
        pair_correlation: mean(&pair_scores),
        columns: real.schema.columns.iter().map(|c| c.name.clone()).collect(),
        column_scores,
        pair_matrix,
    })
}
