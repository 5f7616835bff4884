//! CSV ingestion against a public schema, one-hot encoding, splitting and
//! clipping.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{clip_scalar, clip_vector_l2};
use crate::regression::EncodedDataset;

/// Default share of rows held out for testing.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Name of the optional constant column.
pub const INTERCEPT_NAME: &str = "intercept";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl ColumnSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }
}

/// Public table layout. `columns` lists every CSV column in file order,
/// the label included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    pub label: String,
    pub task: Task,
    /// Category mapped to `+1` for classification tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_class: Option<String>,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Config(format!("duplicate column {:?}", col.name)));
            }
            match col.kind {
                ColumnKind::Numeric if !col.categories.is_empty() => {
                    return Err(Error::Config(format!(
                        "numeric column {:?} lists categories",
                        col.name
                    )));
                }
                ColumnKind::Categorical => {
                    if col.categories.is_empty() {
                        return Err(Error::Config(format!(
                            "categorical column {:?} has no categories",
                            col.name
                        )));
                    }
                    let distinct: HashSet<_> = col.categories.iter().collect();
                    if distinct.len() != col.categories.len() {
                        return Err(Error::Config(format!(
                            "categorical column {:?} repeats a category",
                            col.name
                        )));
                    }
                }
                _ => {}
            }
        }
        let label = self
            .column(&self.label)
            .ok_or_else(|| Error::Config(format!("label column {:?} not in schema", self.label)))?;
        match self.task {
            Task::Regression if label.kind != ColumnKind::Numeric => {
                Err(Error::Config("regression label must be numeric".into()))
            }
            Task::Classification => {
                if label.kind != ColumnKind::Categorical || label.categories.len() != 2 {
                    return Err(Error::Config(
                        "classification label must be categorical with two classes".into(),
                    ));
                }
                match &self.positive_class {
                    Some(p) if label.categories.contains(p) => Ok(()),
                    Some(p) => Err(Error::Config(format!(
                        "positive class {p:?} is not a label category"
                    ))),
                    None => Err(Error::Config(
                        "classification schema needs positive_class".into(),
                    )),
                }
            }
            _ => Ok(()),
        }
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Typed column values. Categorical entries are indices into the schema's
/// category list.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Numeric(Vec<f64>),
    Categorical(Vec<usize>),
}

impl ColumnValues {
    fn len(&self) -> usize {
        match self {
            ColumnValues::Numeric(v) => v.len(),
            ColumnValues::Categorical(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub values: ColumnValues,
}

/// A loaded table, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    columns: Vec<RawColumn>,
    row_count: usize,
}

impl RawTable {
    /// Checks equal lengths and category indices against `schema`.
    pub fn new(columns: Vec<RawColumn>, schema: &Schema) -> Result<Self> {
        schema.validate()?;
        if columns.len() != schema.columns.len() {
            return Err(Error::Dimension(format!(
                "{} columns for a schema of {}",
                columns.len(),
                schema.columns.len()
            )));
        }
        let row_count = columns.first().map_or(0, |c| c.values.len());
        for (col, spec) in columns.iter().zip(&schema.columns) {
            if col.name != spec.name {
                return Err(Error::Config(format!(
                    "column {:?} where schema has {:?}",
                    col.name, spec.name
                )));
            }
            if col.values.len() != row_count {
                return Err(Error::Dimension(format!(
                    "column {:?} has {} rows, expected {row_count}",
                    col.name,
                    col.values.len()
                )));
            }
            match (&col.values, spec.kind) {
                (ColumnValues::Numeric(v), ColumnKind::Numeric) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::invalid(
                            "table",
                            format!("column {:?} has a non-finite value", col.name),
                        ));
                    }
                }
                (ColumnValues::Categorical(v), ColumnKind::Categorical) => {
                    if v.iter().any(|&k| k >= spec.categories.len()) {
                        return Err(Error::invalid(
                            "table",
                            format!("column {:?} has an out-of-range category", col.name),
                        ));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "column {:?} has the wrong kind",
                        col.name
                    )))
                }
            }
        }
        Ok(Self { columns, row_count })
    }

    pub fn columns(&self) -> &[RawColumn] {
        &self.columns
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }
}

/// Reads a headed, comma-separated file. The header must list the schema's
/// columns in order. Empty fields are rejected.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<RawTable> {
    let path = path.as_ref();
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let data_err = |message: String| Error::Data {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);

    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    let expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    if header != expected {
        return Err(data_err(format!(
            "header {header:?} does not match schema columns {expected:?}"
        )));
    }

    let mut values: Vec<ColumnValues> = schema
        .columns
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Numeric => ColumnValues::Numeric(Vec::new()),
            ColumnKind::Categorical => ColumnValues::Categorical(Vec::new()),
        })
        .collect();

    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != schema.columns.len() {
            return Err(data_err(format!(
                "row {row}: {} fields, expected {}",
                record.len(),
                schema.columns.len()
            )));
        }
        for ((field, spec), out) in record.iter().zip(&schema.columns).zip(values.iter_mut()) {
            let field = field.trim();
            if field.is_empty() {
                return Err(data_err(format!(
                    "row {row}, column {:?}: missing value",
                    spec.name
                )));
            }
            match out {
                ColumnValues::Numeric(v) => {
                    let x: f64 = field.parse().map_err(|_| {
                        data_err(format!(
                            "row {row}, column {:?}: cannot parse {field:?} as a number",
                            spec.name
                        ))
                    })?;
                    if !x.is_finite() {
                        return Err(data_err(format!(
                            "row {row}, column {:?}: non-finite value {field:?}",
                            spec.name
                        )));
                    }
                    v.push(x);
                }
                ColumnValues::Categorical(v) => {
                    let k = spec
                        .categories
                        .iter()
                        .position(|c| c == field)
                        .ok_or_else(|| {
                            data_err(format!(
                                "row {row}, column {:?}: unknown category {field:?}",
                                spec.name
                            ))
                        })?;
                    v.push(k);
                }
            }
        }
    }
    if values.first().is_some_and(|v| v.len() == 0) {
        return Err(data_err("no rows".into()));
    }
    let columns = schema
        .columns
        .iter()
        .zip(values)
        .map(|(spec, values)| RawColumn {
            name: spec.name.clone(),
            values,
        })
        .collect();
    RawTable::new(columns, schema)
}

/// Expands categorical features into indicator blocks in schema order and
/// extracts the label. Classification labels become `+1` for the positive
/// class and `-1` otherwise. With `intercept`, a constant-1 column is
/// appended last.
///
/// Bounds on the result are the observed maxima; run [`preprocess`] before
/// any private fit.
pub fn one_hot_encode(
    table: &RawTable,
    schema: &Schema,
    intercept: bool,
) -> Result<EncodedDataset> {
    schema.validate()?;
    let n = table.row_count();
    let mut names = Vec::new();
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    let mut y = None;
    for (col, spec) in table.columns().iter().zip(&schema.columns) {
        if spec.name == schema.label {
            y = Some(match &col.values {
                ColumnValues::Numeric(v) => v.clone(),
                ColumnValues::Categorical(v) => {
                    let positive = schema.positive_class.as_deref().unwrap_or_default();
                    v.iter()
                        .map(|&k| {
                            if spec.categories[k] == positive {
                                1.0
                            } else {
                                -1.0
                            }
                        })
                        .collect()
                }
            });
            continue;
        }
        match &col.values {
            ColumnValues::Numeric(v) => {
                names.push(spec.name.clone());
                blocks.push(v.clone());
            }
            ColumnValues::Categorical(v) => {
                for (k, cat) in spec.categories.iter().enumerate() {
                    names.push(format!("{}={cat}", spec.name));
                    blocks.push(v.iter().map(|&i| if i == k { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    if intercept {
        names.push(INTERCEPT_NAME.into());
        blocks.push(vec![1.0; n]);
    }
    let y = y.ok_or_else(|| {
        Error::Config(format!(
            "label column {:?} missing from table",
            schema.label
        ))
    })?;
    if blocks.is_empty() {
        return Err(Error::Config("schema has no feature columns".into()));
    }
    let x = DMatrix::from_fn(n, blocks.len(), |i, j| blocks[j][i]);
    EncodedDataset::from_observed(x, DVector::from_vec(y), names)
}

/// Recovers the category of each row from the indicator block of `column`.
pub fn decode_categorical(
    data: &EncodedDataset,
    schema: &Schema,
    column: &str,
) -> Result<Vec<String>> {
    let spec = schema
        .column(column)
        .filter(|c| c.kind == ColumnKind::Categorical)
        .ok_or_else(|| {
            Error::invalid("column", format!("{column:?} is not a categorical column"))
        })?;
    let positions: Vec<usize> = spec
        .categories
        .iter()
        .map(|cat| {
            let name = format!("{column}={cat}");
            data.feature_names()
                .iter()
                .position(|f| *f == name)
                .ok_or_else(|| {
                    Error::invalid("column", format!("indicator {name:?} not in dataset"))
                })
        })
        .collect::<Result<_>>()?;
    (0..data.n())
        .map(|i| {
            let hot: Vec<usize> = (0..positions.len())
                .filter(|&k| data.x()[(i, positions[k])] != 0.0)
                .collect();
            match hot.as_slice() {
                [k] => Ok(spec.categories[*k].clone()),
                _ => Err(Error::invalid(
                    "data",
                    format!("row {i} is not one-hot in {column:?}"),
                )),
            }
        })
        .collect()
}

/// Seeded shuffle into `(train, test)` index sets, each sorted ascending.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(
            "test_fraction",
            format!("must lie in (0, 1), got {test_fraction}"),
        ));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::invalid(
            "n",
            format!("{n} rows leave an empty side at fraction {test_fraction}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub fn train_test_split(
    data: &EncodedDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(EncodedDataset, EncodedDataset)> {
    let (train, test) = split_indices(data.n(), test_fraction, seed)?;
    Ok((data.select_rows(&train)?, data.select_rows(&test)?))
}

/// How [`preprocess`] treats labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelHandling {
    /// Clip labels at `tau_label` (single-shot AdaSSP).
    Clip,
    /// Leave labels as they are; the boosted learner clips residuals itself.
    Keep,
}

/// Clips every row to norm `x_clip` and, for [`LabelHandling::Clip`], every
/// label to `[-tau_label, tau_label]`.
///
/// The output records `x_bound = x_clip`. Its `y_bound` is `tau_label` when
/// labels are clipped, and otherwise the larger of `tau_label` and the
/// observed label magnitude, since unclipped labels may exceed it.
pub fn preprocess(
    data: &EncodedDataset,
    x_clip: f64,
    tau_label: f64,
    labels: LabelHandling,
) -> Result<EncodedDataset> {
    for (name, v) in [("x_clip", x_clip), ("tau_label", tau_label)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(
                name,
                format!("must be positive and finite, got {v}"),
            ));
        }
    }
    let mut x = data.x().clone();
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        for (j, v) in clip_vector_l2(&row, x_clip)?.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let (y, y_bound) = match labels {
        LabelHandling::Clip => {
            let y = data
                .y()
                .iter()
                .map(|&v| clip_scalar(v, tau_label))
                .collect::<Result<Vec<_>>>()?;
            (DVector::from_vec(y), tau_label)
        }
        LabelHandling::Keep => (data.y().clone(), data.y().amax().max(tau_label)),
    };
    EncodedDataset::with_names(x, y, x_clip, y_bound, data.feature_names().to_vec())
}
