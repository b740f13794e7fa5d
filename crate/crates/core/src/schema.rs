//! Table schemas, raw typed tables and CSV I/O.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Feature,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: ColumnRole) -> Self {
        Self {
            name: name.into(),
            kind,
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    pub columns: Vec<ColumnSpec>,
}

impl TableSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let s = Self { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("schema has no columns".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name '{}'", c.name)));
            }
        }
        let targets = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::Target)
            .count();
        if targets != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one target column, found {targets}"
            )));
        }
        Ok(())
    }

    pub fn target_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.role == ColumnRole::Target)
            .expect("validated schema has a target")
    }

    pub fn target(&self) -> &ColumnSpec {
        &self.columns[self.target_index()]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let s: TableSchema = serde_json::from_reader(BufReader::new(f))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numerical(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numerical(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn missing_count(&self) -> usize {
        match self {
            Column::Numerical(v) => v.iter().filter(|x| x.is_none()).count(),
            Column::Categorical(v) => v.iter().filter(|x| x.is_none()).count(),
        }
    }

    fn select(&self, idx: &[usize]) -> Column {
        match self {
            Column::Numerical(v) => Column::Numerical(idx.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => {
                Column::Categorical(idx.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }

    pub fn as_numerical(&self) -> Option<&[Option<f64>]> {
        match self {
            Column::Numerical(v) => Some(v),
            Column::Categorical(_) => None,
        }
    }

    pub fn as_categorical(&self) -> Option<&[Option<String>]> {
        match self {
            Column::Categorical(v) => Some(v),
            Column::Numerical(_) => None,
        }
    }
}

/// Typed columns in schema order; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub schema: TableSchema,
    pub columns: Vec<Column>,
}

impl RawTable {
    pub fn new(schema: TableSchema, columns: Vec<Column>) -> Result<Self> {
        schema.validate()?;
        if columns.len() != schema.columns.len() {
            return Err(Error::Schema(format!(
                "{} columns supplied for a {}-column schema",
                columns.len(),
                schema.columns.len()
            )));
        }
        let n = columns.first().map_or(0, Column::len);
        for (spec, col) in schema.columns.iter().zip(&columns) {
            let kind_ok = matches!(
                (spec.kind, col),
                (ColumnKind::Numerical, Column::Numerical(_))
                    | (ColumnKind::Categorical, Column::Categorical(_))
            );
            if !kind_ok {
                return Err(Error::Schema(format!("column '{}' has the wrong kind", spec.name)));
            }
            if col.len() != n {
                return Err(Error::Schema(format!("column '{}' is ragged", spec.name)));
            }
        }
        Ok(Self { schema, columns })
    }

    pub fn empty(schema: TableSchema) -> Self {
        let columns = schema
            .columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Numerical => Column::Numerical(Vec::new()),
                ColumnKind::Categorical => Column::Categorical(Vec::new()),
            })
            .collect();
        Self { schema, columns }
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn missing_count(&self) -> usize {
        self.columns.iter().map(Column::missing_count).sum()
    }

    pub fn select_rows(&self, idx: &[usize]) -> RawTable {
        RawTable {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(idx)).collect(),
        }
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.schema.position(name).map(|i| &self.columns[i])
    }

    pub fn target(&self) -> &Column {
        &self.columns[self.schema.target_index()]
    }

    /// Reads a CSV whose header names exactly the schema's columns (any order).
    pub fn load_csv(path: &Path, schema: &TableSchema) -> Result<RawTable> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(BufReader::new(f), schema)
    }

    pub fn read_csv<R: std::io::Read>(reader: R, schema: &TableSchema) -> Result<RawTable> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut mapping = vec![usize::MAX; schema.columns.len()];
        for (pos, h) in headers.iter().enumerate() {
            let idx = schema
                .position(h)
                .ok_or_else(|| Error::Schema(format!("unknown column '{h}' in CSV header")))?;
            if mapping[idx] != usize::MAX {
                return Err(Error::Schema(format!("column '{h}' repeated in CSV header")));
            }
            mapping[idx] = pos;
        }
        if let Some(i) = mapping.iter().position(|&m| m == usize::MAX) {
            return Err(Error::Schema(format!(
                "column '{}' missing from CSV header",
                schema.columns[i].name
            )));
        }

        let mut columns = RawTable::empty(schema.clone()).columns;
        for (row_idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(Error::Data(format!(
                    "row {row_idx}: expected {} fields, found {}",
                    headers.len(),
                    rec.len()
                )));
            }
            for (ci, col) in columns.iter_mut().enumerate() {
                let cell = rec.get(mapping[ci]).unwrap_or("");
                match col {
                    Column::Numerical(v) => {
                        let trimmed = cell.trim();
                        if trimmed.is_empty() {
                            v.push(None);
                        } else {
                            let x: f64 = trimmed.parse().map_err(|_| {
                                Error::Data(format!(
                                    "row {row_idx}, column '{}': cannot parse '{cell}' as a number",
                                    schema.columns[ci].name
                                ))
                            })?;
                            if !x.is_finite() {
                                return Err(Error::Data(format!(
                                    "row {row_idx}, column '{}': non-finite value",
                                    schema.columns[ci].name
                                )));
                            }
                            v.push(Some(x));
                        }
                    }
                    Column::Categorical(v) => {
                        if cell.is_empty() {
                            v.push(None);
                        } else {
                            v.push(Some(cell.to_string()));
                        }
                    }
                }
            }
        }
        RawTable::new(schema.clone(), columns)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_csv_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        let mut record: Vec<String> = Vec::with_capacity(self.columns.len());
        for i in 0..self.n_rows() {
            record.clear();
            for col in &self.columns {
                record.push(match col {
                    Column::Numerical(v) => v[i].map(|x| format!("{x:?}")).unwrap_or_default(),
                    Column::Categorical(v) => v[i].clone().unwrap_or_default(),
                });
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        Ok(buf)
    }
}
