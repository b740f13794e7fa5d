//! Newton-boosted regression trees on histogram-binned features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Logistic,
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub max_bins: usize,
    pub min_child_hessian: f64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 3,
            shrinkage: 0.1,
            lambda: 1.0,
            max_bins: 64,
            min_child_hessian: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub loss: Loss,
    pub base_score: f64,
    pub shrinkage: f64,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    /// Additive raw score (log-odds for logistic loss).
    pub fn predict_raw(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (n, p) = x.dims2("gbt_predict")?;
        if p != self.n_features {
            return Err(Error::shape("gbt_predict", x.shape(), &[n, self.n_features]));
        }
        Ok((0..n)
            .map(|i| {
                let row = x.row(i);
                self.base_score + self.trees.iter().map(|t| self.shrinkage * t.predict_row(row)).sum::<f64>()
            })
            .collect())
    }

    /// Probabilities for logistic loss, raw values for squared loss.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let raw = self.predict_raw(x)?;
        Ok(match self.loss {
            Loss::Logistic => raw.into_iter().map(sigmoid).collect(),
            Loss::Squared => raw,
        })
    }
}

/// Split candidates per feature: midpoints between distinct values when
/// few, otherwise quantile values.
fn thresholds(col: &[f64], max_bins: usize) -> Vec<f64> {
    let mut v: Vec<f64> = col.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.len() <= max_bins {
        return v.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    }
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut t: Vec<f64> = (1..max_bins).map(|j| sorted[(j * n / max_bins).min(n - 1)]).collect();
    t.dedup();
    if t.last() == sorted.last() {
        t.pop();
    }
    t
}

struct Binned {
    thresholds: Vec<Vec<f64>>,
    /// Row-major `[n × p]` bin indices.
    bins: Vec<u16>,
    p: usize,
}

fn bin(x: &Tensor, max_bins: usize) -> Result<Binned> {
    let (n, p) = x.dims2("gbt_fit")?;
    let thresholds: Vec<Vec<f64>> = par::map_indexed(p, |j| {
        let col: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
        thresholds(&col, max_bins)
    });
    let mut bins = vec![0u16; n * p];
    for i in 0..n {
        for j in 0..p {
            bins[i * p + j] = thresholds[j].partition_point(|t| *t < x.get(i, j)) as u16;
        }
    }
    Ok(Binned { thresholds, bins, p })
}

struct Best {
    gain: f64,
    feature: usize,
    bin: usize,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

fn grow(
    data: &Binned,
    rows: &[usize],
    g: &[f64],
    h: &[f64],
    depth: usize,
    cfg: &GbtConfig,
    nodes: &mut Vec<Node>,
) -> usize {
    let gs: f64 = rows.iter().map(|&i| g[i]).sum();
    let hs: f64 = rows.iter().map(|&i| h[i]).sum();
    let id = nodes.len();
    nodes.push(Node::Leaf(-gs / (hs + cfg.lambda)));
    if depth == cfg.max_depth || rows.len() < 2 {
        return id;
    }
    let parent = score(gs, hs, cfg.lambda);
    let per_feature: Vec<Option<Best>> = par::map_indexed(data.p, |j| {
        let nb = data.thresholds[j].len() + 1;
        if nb < 2 {
            return None;
        }
        let mut hg = vec![0.0; nb];
        let mut hh = vec![0.0; nb];
        for &i in rows {
            let b = data.bins[i * data.p + j] as usize;
            hg[b] += g[i];
            hh[b] += h[i];
        }
        let (mut gl, mut hl) = (0.0, 0.0);
        let mut best: Option<Best> = None;
        for b in 0..nb - 1 {
            gl += hg[b];
            hl += hh[b];
            let (gr, hr) = (gs - gl, hs - hl);
            if hl < cfg.min_child_hessian || hr < cfg.min_child_hessian {
                continue;
            }
            let gain = score(gl, hl, cfg.lambda) + score(gr, hr, cfg.lambda) - parent;
            if gain > 1e-12 && best.as_ref().is_none_or(|bb| gain > bb.gain) {
                best = Some(Best { gain, feature: j, bin: b });
            }
        }
        best
    });
    let Some(best) = per_feature
        .into_iter()
        .flatten()
        .fold(None::<Best>, |acc, b| match acc {
            Some(a) if a.gain >= b.gain => Some(a),
            _ => Some(b),
        })
    else {
        return id;
    };
    let (l_rows, r_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| (data.bins[i * data.p + best.feature] as usize) <= best.bin);
    let left = grow(data, &l_rows, g, h, depth + 1, cfg, nodes);
    let right = grow(data, &r_rows, g, h, depth + 1, cfg, nodes);
    nodes[id] = Node::Split {
        feature: best.feature,
        threshold: data.thresholds[best.feature][best.bin],
        left,
        right,
    };
    id
}

pub fn fit_gbt(x: &Tensor, y: &[f64], loss: Loss, cfg: &GbtConfig) -> Result<GbtModel> {
    let (n, p) = x.dims2("gbt_fit")?;
    if n < 2 {
        return Err(Error::Eval("gradient boosting needs at least 2 rows".into()));
    }
    if y.len() != n {
        return Err(Error::shape("gbt_fit", &[n], &[y.len()]));
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eval("non-finite training input".into()));
    }
    if cfg.max_bins < 2 || cfg.max_bins > u16::MAX as usize || cfg.shrinkage <= 0.0 || cfg.lambda < 0.0 {
        return Err(Error::Config(format!("invalid boosting settings {cfg:?}")));
    }
    let base_score = match loss {
        Loss::Logistic => {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Eval("logistic loss needs 0/1 labels".into()));
            }
            let pos = y.iter().filter(|&&v| v == 1.0).count();
            if pos == 0 || pos == n {
                return Err(Error::Eval("training labels contain a single class".into()));
            }
            (pos as f64 / (n - pos) as f64).ln()
        }
        Loss::Squared => {
            if y.iter().all(|&v| v == y[0]) {
                y[0]
            } else {
                y.iter().sum::<f64>() / n as f64
            }
        }
    };
    let data = bin(x, cfg.max_bins)?;
    let rows: Vec<usize> = (0..n).collect();
    let mut raw = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        for i in 0..n {
            match loss {
                Loss::Logistic => {
                    let pr = sigmoid(raw[i]);
                    g[i] = pr - y[i];
                    h[i] = (pr * (1.0 - pr)).max(1e-16);
                }
                Loss::Squared => {
                    g[i] = raw[i] - y[i];
                    h[i] = 1.0;
                }
            }
        }
        let mut nodes = Vec::new();
        grow(&data, &rows, &g, &h, 0, cfg, &mut nodes);
        let tree = Tree { nodes };
        for (i, r) in raw.iter_mut().enumerate() {
            *r += cfg.shrinkage * tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        loss,
        base_score,
        shrinkage: cfg.shrinkage,
        n_features: p,
        trees,
    })
}
