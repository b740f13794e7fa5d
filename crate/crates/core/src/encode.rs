//! Preprocessing and the invertible row encoding.
//!
//! Numerical columns are mean-imputed and z-scored; categorical columns are
//! one-hot encoded over a sorted vocabulary, with an extra value-missing
//! category appended when the fitting data contained blanks. Encoded rows lay
//! out every numerical column first (schema order), then every categorical
//! block (schema order).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schema::{Column, ColumnKind, RawTable, TableSchema};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

/// Categories in one-hot order. `None` is the value-missing category and,
/// when present, is always last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categories: Vec<Option<String>>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn has_missing(&self) -> bool {
        self.categories.last().is_some_and(Option::is_none)
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.categories
            .iter()
            .position(|c| c.as_deref() == Some(value))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnEncoding {
    Numerical(NumericStats),
    Categorical(Vocabulary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub schema: TableSchema,
    /// Per schema column.
    pub columns: Vec<ColumnEncoding>,
    pub d_num: usize,
    pub d_cat_encoded: usize,
}

/// Where each schema column lives inside an encoded row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTable {
    pub matrix: Tensor,
    /// Target column: class index into the target vocabulary, or the raw value.
    pub labels: Labels,
    /// Unseen categories remapped to the value-missing category.
    pub unseen_remapped: usize,
}

impl EncodedTable {
    pub fn n_rows(&self) -> usize {
        self.matrix.rows()
    }
}

fn mean_impute(v: &[Option<f64>]) -> (Vec<f64>, f64) {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (v.iter().map(|x| x.unwrap_or(mean)).collect(), mean)
}

impl EncoderState {
    pub fn fit(table: &RawTable) -> Result<Self> {
        if table.n_rows() == 0 {
            return Err(Error::Data("cannot fit an encoder on an empty table".into()));
        }
        let mut columns = Vec::with_capacity(table.columns.len());
        let mut d_num = 0;
        let mut d_cat = 0;
        for col in &table.columns {
            match col {
                Column::Numerical(v) => {
                    let (imputed, mean) = mean_impute(v);
                    let n = imputed.len() as f64;
                    let var = imputed.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let std = var.sqrt();
                    let constant = !(std > 1e-12 * mean.abs().max(1.0));
                    columns.push(ColumnEncoding::Numerical(NumericStats {
                        mean,
                        std: if constant { 1.0 } else { std },
                        constant,
                    }));
                    d_num += 1;
                }
                Column::Categorical(v) => {
                    let mut cats: Vec<String> = v.iter().flatten().cloned().collect();
                    cats.sort();
                    cats.dedup();
                    let mut categories: Vec<Option<String>> = cats.into_iter().map(Some).collect();
                    if v.iter().any(Option::is_none) {
                        categories.push(None);
                    }
                    d_cat += categories.len();
                    columns.push(ColumnEncoding::Categorical(Vocabulary { categories }));
                }
            }
        }
        Ok(Self {
            schema: table.schema.clone(),
            columns,
            d_num,
            d_cat_encoded: d_cat,
        })
    }

    /// Encoded row width `D = D_num + E(D_cat)`.
    pub fn dim(&self) -> usize {
        self.d_num + self.d_cat_encoded
    }

    /// Spans per schema column, in schema order.
    pub fn spans(&self) -> Vec<Span> {
        let mut num_off = 0;
        let mut cat_off = self.d_num;
        self.columns
            .iter()
            .map(|c| match c {
                ColumnEncoding::Numerical(_) => {
                    let s = Span {
                        start: num_off,
                        width: 1,
                    };
                    num_off += 1;
                    s
                }
                ColumnEncoding::Categorical(v) => {
                    let s = Span {
                        start: cat_off,
                        width: v.len(),
                    };
                    cat_off += v.len();
                    s
                }
            })
            .collect()
    }

    fn check_schema(&self, schema: &TableSchema) -> Result<()> {
        if schema != &self.schema {
            return Err(Error::Schema("table schema differs from the fitted schema".into()));
        }
        Ok(())
    }

    pub fn encode(&self, table: &RawTable) -> Result<EncodedTable> {
        self.check_schema(&table.schema)?;
        let n = table.n_rows();
        let d = self.dim();
        let spans = self.spans();
        let mut m = Tensor::zeros(&[n, d]);
        let mut unseen = 0;
        for ((col, enc), span) in table.columns.iter().zip(&self.columns).zip(&spans) {
            match (col, enc) {
                (Column::Numerical(v), ColumnEncoding::Numerical(st)) => {
                    for (i, x) in v.iter().enumerate() {
                        let x = x.unwrap_or(st.mean);
                        m.row_mut(i)[span.start] = if st.constant {
                            0.0
                        } else {
                            (x - st.mean) / st.std
                        };
                    }
                }
                (Column::Categorical(v), ColumnEncoding::Categorical(vocab)) => {
                    for (i, x) in v.iter().enumerate() {
                        let k = match x {
                            Some(s) => match vocab.index_of(s) {
                                Some(k) => k,
                                None if vocab.has_missing() => {
                                    unseen += 1;
                                    vocab.len() - 1
                                }
                                None => {
                                    return Err(Error::Data(format!(
                                        "row {i}: unseen category '{s}' and no value-missing category"
                                    )))
                                }
                            },
                            None if vocab.has_missing() => vocab.len() - 1,
                            None => {
                                return Err(Error::Data(format!(
                                    "row {i}: missing category without a value-missing category"
                                )))
                            }
                        };
                        m.row_mut(i)[span.start + k] = 1.0;
                    }
                }
                _ => return Err(Error::Schema("column kind mismatch".into())),
            }
        }
        if unseen > 0 {
            log::warn!("{unseen} unseen categories mapped to the value-missing category");
        }
        let labels = self.labels(table)?;
        Ok(EncodedTable {
            matrix: m,
            labels,
            unseen_remapped: unseen,
        })
    }

    fn labels(&self, table: &RawTable) -> Result<Labels> {
        let ti = self.schema.target_index();
        match (&table.columns[ti], &self.columns[ti]) {
            (Column::Numerical(v), ColumnEncoding::Numerical(st)) => {
                Ok(Labels::Values(v.iter().map(|x| x.unwrap_or(st.mean)).collect()))
            }
            (Column::Categorical(v), ColumnEncoding::Categorical(vocab)) => Ok(Labels::Classes(
                v.iter()
                    .map(|x| match x {
                        Some(s) => vocab.index_of(s).unwrap_or(vocab.len() - 1),
                        None => vocab.len() - 1,
                    })
                    .collect(),
            )),
            _ => Err(Error::Schema("target kind mismatch".into())),
        }
    }

    /// Inverse map. Numerical values are de-standardized; each categorical
    /// block decodes to its argmax, ties going to the lowest index.
    pub fn decode(&self, matrix: &Tensor) -> Result<RawTable> {
        let (n, d) = matrix.dims2("decode")?;
        if d != self.dim() {
            return Err(Error::shape("decode", matrix.shape(), &[n, self.dim()]));
        }
        let spans = self.spans();
        let columns = self
            .columns
            .iter()
            .zip(&spans)
            .map(|(enc, span)| match enc {
                ColumnEncoding::Numerical(st) => Column::Numerical(
                    (0..n)
                        .map(|i| {
                            let z = matrix.row(i)[span.start];
                            Some(if st.constant {
                                st.mean
                            } else {
                                z * st.std + st.mean
                            })
                        })
                        .collect(),
                ),
                ColumnEncoding::Categorical(vocab) => Column::Categorical(
                    (0..n)
                        .map(|i| {
                            let block = &matrix.row(i)[span.start..span.start + span.width];
                            vocab.categories[argmax_first(block)].clone()
                        })
                        .collect(),
                ),
            })
            .collect();
        RawTable::new(self.schema.clone(), columns)
    }

    /// Downstream-learner design matrix: encoded row without the target span.
    pub fn feature_matrix(&self, encoded: &Tensor) -> Result<Tensor> {
        let (n, d) = encoded.dims2("feature_matrix")?;
        if d != self.dim() {
            return Err(Error::shape("feature_matrix", encoded.shape(), &[n, self.dim()]));
        }
        let t = self.spans()[self.schema.target_index()];
        let keep: Vec<usize> = (0..d).filter(|&j| j < t.start || j >= t.start + t.width).collect();
        let mut out = Tensor::zeros(&[n, keep.len()]);
        for i in 0..n {
            let src = encoded.row(i);
            for (o, &j) in out.row_mut(i).iter_mut().zip(&keep) {
                *o = src[j];
            }
        }
        Ok(out)
    }

    pub fn target_vocabulary(&self) -> Option<&Vocabulary> {
        match &self.columns[self.schema.target_index()] {
            ColumnEncoding::Categorical(v) => Some(v),
            ColumnEncoding::Numerical(_) => None,
        }
    }
}

/// Index of the maximum; the first maximal entry wins ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Seeded train/test split. Tables with a categorical target are stratified
/// by class; each part keeps the original row order.
pub fn split(table: &RawTable, test_fraction: f64, rng: &mut Rng) -> Result<(RawTable, RawTable)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = table.n_rows();
    if n < 2 {
        return Err(Error::Data("need at least 2 rows to split".into()));
    }
    let groups: Vec<Vec<usize>> = match (table.schema.target().kind, table.target()) {
        (ColumnKind::Categorical, Column::Categorical(v)) => {
            let mut keys: Vec<Option<&String>> = v.iter().map(Option::as_ref).collect();
            keys.sort();
            keys.dedup();
            keys.iter()
                .map(|k| (0..n).filter(|&i| v[i].as_ref() == *k).collect())
                .collect()
        }
        _ => vec![(0..n).collect()],
    };
    let stratified = groups.len() > 1 || table.schema.target().kind == ColumnKind::Categorical;
    let mut test = Vec::new();
    let mut train = Vec::new();
    for mut g in groups {
        if stratified && g.len() < 2 {
            return Err(Error::Data(format!(
                "class with {} row(s) cannot be stratified",
                g.len()
            )));
        }
        rng.shuffle(&mut g);
        let k = ((g.len() as f64) * test_fraction).round() as usize;
        let k = k.clamp(1, g.len() - 1);
        test.extend_from_slice(&g[..k]);
        train.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((table.select_rows(&train), table.select_rows(&test)))
}
