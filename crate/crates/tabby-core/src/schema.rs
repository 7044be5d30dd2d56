//! Typed table schemas: column declarations, values, rows, and tables.
//!
//! A [`Schema`] is an ordered list of [`ColumnSpec`]s with exactly one target
//! column and a downstream task kind. Nested documents are described by giving
//! each leaf column a `path` (its chain of ancestor group names); flat tables
//! use an empty path. Columns must be listed in depth-first order so that a
//! schema corresponds to exactly one document tree.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Storage type of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Categorical,
    Integer,
    Float,
    Boolean,
}

impl Dtype {
    /// Numeric columns contribute L1 terms to record distances; the rest
    /// contribute 0/1 mismatch terms.
    pub fn is_numeric(self) -> bool {
        matches!(self, Dtype::Integer | Dtype::Float)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Feature,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Declaration of one (leaf) column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub dtype: Dtype,
    pub role: Role,
    /// Ancestor group names for nested documents; empty for flat tables.
    #[serde(default)]
    pub path: Vec<String>,
    /// Decimal places used when rendering float values. Ignored for other
    /// dtypes.
    #[serde(default)]
    pub float_precision: u8,
}

impl ColumnSpec {
    pub fn feature(name: &str, dtype: Dtype) -> Self {
        ColumnSpec {
            name: name.to_string(),
            dtype,
            role: Role::Feature,
            path: Vec::new(),
            float_precision: 0,
        }
    }

    pub fn target(name: &str, dtype: Dtype) -> Self {
        ColumnSpec {
            role: Role::Target,
            ..Self::feature(name, dtype)
        }
    }

    pub fn with_path(mut self, path: &[&str]) -> Self {
        self.path = path.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_precision(mut self, precision: u8) -> Self {
        self.float_precision = precision;
        self
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema has no columns")]
    Empty,
    #[error("column name {0:?} is invalid: {1}")]
    BadName(String, &'static str),
    #[error("duplicate column name {0:?}")]
    DuplicateName(String),
    #[error("schema must have exactly one target column, found {0}")]
    TargetCount(usize),
    #[error("regression target {0:?} must be an integer or float column")]
    NonNumericRegressionTarget(String),
    #[error("column {0:?}: nesting path revisits group {1:?}; columns must be in depth-first order")]
    NonContiguousGroup(String, String),
    #[error("column {0:?}: empty nesting path segment")]
    EmptyPathSegment(String),
}

/// Ordered column declarations plus the downstream task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaDef", into = "SchemaDef")]
pub struct Schema {
    columns: Vec<ColumnSpec>,
    task: Task,
    target_index: usize,
}

/// Serialization mirror without the derived `target_index`.
#[derive(Serialize, Deserialize, Clone)]
struct SchemaDef {
    columns: Vec<ColumnSpec>,
    task: Task,
}

impl TryFrom<SchemaDef> for Schema {
    type Error = SchemaError;
    fn try_from(def: SchemaDef) -> Result<Self, SchemaError> {
        Schema::new(def.columns, def.task)
    }
}

impl From<Schema> for SchemaDef {
    fn from(s: Schema) -> SchemaDef {
        SchemaDef {
            columns: s.columns,
            task: s.task,
        }
    }
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>, task: Task) -> Result<Self, SchemaError> {
        if columns.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = HashSet::new();
        for col in &columns {
            validate_name(&col.name)?;
            if !seen.insert(col.name.clone()) {
                return Err(SchemaError::DuplicateName(col.name.clone()));
            }
            for seg in &col.path {
                if seg.trim().is_empty() {
                    return Err(SchemaError::EmptyPathSegment(col.name.clone()));
                }
            }
        }
        validate_depth_first(&columns)?;

        let targets: Vec<usize> = columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == Role::Target)
            .map(|(i, _)| i)
            .collect();
        if targets.len() != 1 {
            return Err(SchemaError::TargetCount(targets.len()));
        }
        let target_index = targets[0];
        if task == Task::Regression && !columns[target_index].dtype.is_numeric() {
            return Err(SchemaError::NonNumericRegressionTarget(
                columns[target_index].name.clone(),
            ));
        }
        Ok(Schema {
            columns,
            task,
            target_index,
        })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    /// Number of columns, i.e. the expert count of a model built for this
    /// schema.
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target(&self) -> &ColumnSpec {
        &self.columns[self.target_index]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Whether any column has a nonempty nesting path.
    pub fn is_nested(&self) -> bool {
        self.columns.iter().any(|c| !c.path.is_empty())
    }

    /// Hex SHA-256 over the canonical JSON form, used to pair checkpoints
    /// with the dataset they were trained on.
    pub fn fingerprint(&self) -> String {
        let def = SchemaDef::from(self.clone());
        let json = serde_json::to_string(&def).expect("schema serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn validate_name(name: &str) -> Result<(), SchemaError> {
    if name.is_empty() {
        return Err(SchemaError::BadName(name.to_string(), "empty"));
    }
    if name.contains('\n') || name.contains('\r') {
        return Err(SchemaError::BadName(name.to_string(), "contains newline"));
    }
    // "is" delimits name from value in the text encoding, so names may not
    // contain it as a standalone word.
    if name.split_whitespace().any(|w| w == "is") {
        return Err(SchemaError::BadName(
            name.to_string(),
            "contains the reserved word \"is\"",
        ));
    }
    Ok(())
}

/// Columns must be listed so that every nesting group is contiguous: once a
/// group closes, no later column may reopen it.
fn validate_depth_first(columns: &[ColumnSpec]) -> Result<(), SchemaError> {
    let mut stack: Vec<String> = Vec::new();
    let mut opened: HashSet<Vec<String>> = HashSet::new();
    for col in columns {
        let common = stack
            .iter()
            .zip(col.path.iter())
            .take_while(|(a, b)| a == b)
            .count();
        stack.truncate(common);
        for seg in &col.path[common..] {
            stack.push(seg.clone());
            if !opened.insert(stack.clone()) {
                return Err(SchemaError::NonContiguousGroup(
                    col.name.clone(),
                    seg.clone(),
                ));
            }
        }
    }
    Ok(())
}

/// One typed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Cat(String),
}

impl Value {
    pub fn conforms(&self, dtype: Dtype) -> bool {
        matches!(
            (self, dtype),
            (Value::Cat(_), Dtype::Categorical)
                | (Value::Int(_), Dtype::Integer)
                | (Value::Float(_), Dtype::Float)
                | (Value::Bool(_), Dtype::Boolean)
        )
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Cat(s) => write!(f, "{s}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// Renders a value the way it appears in encoded text and CSV output.
/// Returns `None` for non-finite floats, which have no text form.
pub fn render_value(value: &Value, float_precision: u8) -> Option<String> {
    match value {
        Value::Cat(s) => Some(normalize_ws(s)),
        Value::Int(i) => Some(i.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Float(x) => {
            if x.is_finite() {
                Some(format!("{:.*}", float_precision as usize, x))
            } else {
                None
            }
        }
    }
}

/// Parses a rendered value back; `None` on failure.
pub fn parse_value(dtype: Dtype, text: &str) -> Option<Value> {
    match dtype {
        Dtype::Categorical => Some(Value::Cat(normalize_ws(text))),
        Dtype::Integer => text.parse::<i64>().ok().map(Value::Int),
        Dtype::Float => {
            let x = text.parse::<f64>().ok()?;
            x.is_finite().then_some(Value::Float(x))
        }
        Dtype::Boolean => match text {
            "true" => Some(Value::Bool(true)),
            "false" => Some(Value::Bool(false)),
            _ => None,
        },
    }
}

/// Collapses all whitespace runs to single spaces and trims the ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One record, values aligned with the schema's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row(pub Vec<Value>);

impl Row {
    pub fn values(&self) -> &[Value] {
        &self.0
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TableError {
    #[error("row {row} has {got} values, schema has {want} columns")]
    WrongLength { row: usize, got: usize, want: usize },
    #[error("row {row}, column {column:?}: value {value} does not conform to {dtype:?}")]
    Dtype {
        row: usize,
        column: String,
        value: String,
        dtype: Dtype,
    },
    #[error("row {row}, column {column:?}: non-finite float")]
    NonFinite { row: usize, column: String },
}

/// A schema-conformant list of rows. Values are stored canonically: float
/// cells are rounded to their column's precision and categorical cells are
/// whitespace-normalized, so encoding and decoding a stored row is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    rows: Vec<Row>,
}

impl Table {
    pub fn from_rows(schema: &Schema, rows: Vec<Row>) -> Result<Self, TableError> {
        let mut canon = Vec::with_capacity(rows.len());
        for (r, row) in rows.into_iter().enumerate() {
            canon.push(canonicalize_row(schema, row, r)?);
        }
        Ok(Table { rows: canon })
    }

    pub fn empty() -> Self {
        Table { rows: Vec::new() }
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of one column across all rows.
    pub fn column(&self, index: usize) -> impl Iterator<Item = &Value> {
        self.rows.iter().map(move |r| &r.0[index])
    }
}

fn canonicalize_row(schema: &Schema, row: Row, r: usize) -> Result<Row, TableError> {
    let cols = schema.columns();
    if row.0.len() != cols.len() {
        return Err(TableError::WrongLength {
            row: r,
            got: row.0.len(),
            want: cols.len(),
        });
    }
    let mut out = Vec::with_capacity(row.0.len());
    for (value, spec) in row.0.into_iter().zip(cols) {
        if !value.conforms(spec.dtype) {
            return Err(TableError::Dtype {
                row: r,
                column: spec.name.clone(),
                value: value.to_string(),
                dtype: spec.dtype,
            });
        }
        let canon = match value {
            Value::Cat(s) => Value::Cat(normalize_ws(&s)),
            Value::Float(x) => {
                let rendered = render_value(&Value::Float(x), spec.float_precision)
                    .ok_or_else(|| TableError::NonFinite {
                        row: r,
                        column: spec.name.clone(),
                    })?;
                Value::Float(rendered.parse().expect("rendered float parses"))
            }
            other => other,
        };
        out.push(canon);
    }
    Ok(Row(out))
}
