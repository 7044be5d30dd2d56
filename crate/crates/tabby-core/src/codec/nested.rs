//! Flattening nested JSON documents to rows and back.
//!
//! Schema paths place each leaf column inside its group chain; documents are
//! flattened in the schema's depth-first column order. Only leaf names appear
//! in the text encoding, so the row codec is unchanged for nested data.

use serde_json::{Map, Value as Json};

use crate::schema::{normalize_ws, Dtype, Row, Schema, Value};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NestedError {
    #[error("missing leaf {0:?}")]
    MissingLeaf(String),
    #[error("unexpected node {0:?}")]
    ExtraLeaf(String),
    #[error("node {0:?} should be an object")]
    NotAnObject(String),
    #[error("leaf {leaf:?}: expected {dtype:?}")]
    WrongType { leaf: String, dtype: Dtype },
}

fn dotted(path: &[String], name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", path.join("."), name)
    }
}

/// Extracts the schema's leaves from a document, in depth-first column order.
pub fn flatten_nested(doc: &Json, schema: &Schema) -> Result<Row, NestedError> {
    let mut values = Vec::with_capacity(schema.n_columns());
    for col in schema.columns() {
        let mut node = doc;
        for (depth, seg) in col.path.iter().enumerate() {
            let obj = node
                .as_object()
                .ok_or_else(|| NestedError::NotAnObject(col.path[..depth].join(".")))?;
            node = obj
                .get(seg)
                .ok_or_else(|| NestedError::MissingLeaf(dotted(&col.path, &col.name)))?;
        }
        let obj = node
            .as_object()
            .ok_or_else(|| NestedError::NotAnObject(col.path.join(".")))?;
        let leaf = obj
            .get(&col.name)
            .ok_or_else(|| NestedError::MissingLeaf(dotted(&col.path, &col.name)))?;
        values.push(convert_leaf(leaf, col.dtype, &dotted(&col.path, &col.name))?);
    }
    check_no_extras(doc, schema, &[])?;
    Ok(Row(values))
}

fn convert_leaf(leaf: &Json, dtype: Dtype, name: &str) -> Result<Value, NestedError> {
    let wrong = || NestedError::WrongType {
        leaf: name.to_string(),
        dtype,
    };
    match dtype {
        Dtype::Categorical => leaf
            .as_str()
            .map(|s| Value::Cat(normalize_ws(s)))
            .ok_or_else(wrong),
        Dtype::Boolean => leaf.as_bool().map(Value::Bool).ok_or_else(wrong),
        Dtype::Integer => leaf
            .as_i64()
            .or_else(|| {
                leaf.as_f64()
                    .filter(|x| x.fract() == 0.0 && x.abs() < i64::MAX as f64)
                    .map(|x| x as i64)
            })
            .map(Value::Int)
            .ok_or_else(wrong),
        Dtype::Float => leaf
            .as_f64()
            .filter(|x| x.is_finite())
            .map(Value::Float)
            .ok_or_else(wrong),
    }
}

/// Walks the document and rejects any node the schema does not expect.
fn check_no_extras(node: &Json, schema: &Schema, path: &[String]) -> Result<(), NestedError> {
    let obj = node
        .as_object()
        .ok_or_else(|| NestedError::NotAnObject(path.join(".")))?;
    for (key, child) in obj {
        let is_leaf_here = schema
            .columns()
            .iter()
            .any(|c| c.path == path && c.name == *key);
        let mut child_path = path.to_vec();
        child_path.push(key.clone());
        let is_group = schema
            .columns()
            .iter()
            .any(|c| c.path.len() >= child_path.len() && c.path[..child_path.len()] == child_path[..]);
        match (is_leaf_here, is_group) {
            (true, _) => {
                if child.is_object() || child.is_array() {
                    return Err(NestedError::WrongType {
                        leaf: child_path.join("."),
                        dtype: schema.columns()[schema
                            .column_index(key)
                            .expect("leaf exists")]
                        .dtype,
                    });
                }
            }
            (false, true) => check_no_extras(child, schema, &child_path)?,
            (false, false) => return Err(NestedError::ExtraLeaf(child_path.join("."))),
        }
    }
    Ok(())
}

/// Rebuilds the nested document for a row; inverse of [`flatten_nested`].
pub fn unflatten_nested(row: &Row, schema: &Schema) -> Json {
    let mut root = Map::new();
    for (col, value) in schema.columns().iter().zip(row.values()) {
        let mut node = &mut root;
        for seg in &col.path {
            node = node
                .entry(seg.clone())
                .or_insert_with(|| Json::Object(Map::new()))
                .as_object_mut()
                .expect("groups are objects");
        }
        node.insert(col.name.clone(), leaf_to_json(value));
    }
    Json::Object(root)
}

fn leaf_to_json(value: &Value) -> Json {
    match value {
        Value::Cat(s) => Json::String(s.clone()),
        Value::Int(i) => Json::from(*i),
        Value::Bool(b) => Json::Bool(*b),
        Value::Float(x) => serde_json::Number::from_f64(*x)
            .map(Json::Number)
            .expect("canonical floats are finite"),
    }
}
