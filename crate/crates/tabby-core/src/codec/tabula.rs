//! Ordinal preprocessing: categorical values become consecutive integers in
//! order of first occurrence, shortening encoded rows to digit tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::schema::{ColumnSpec, Dtype, Row, Schema, Table, Value};

/// Per-column bijections between categorical values and their ordinals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBook {
    /// `values[i]` lists column `i`'s categories in code order; empty for
    /// non-categorical columns.
    values: Vec<Vec<String>>,
}

impl CodeBook {
    pub fn code(&self, column: usize, value: &str) -> Option<i64> {
        self.values[column]
            .iter()
            .position(|v| v == value)
            .map(|c| c as i64)
    }

    pub fn value(&self, column: usize, code: i64) -> Option<&str> {
        usize::try_from(code)
            .ok()
            .and_then(|c| self.values[column].get(c))
            .map(|s| s.as_str())
    }

    pub fn categories(&self, column: usize) -> &[String] {
        &self.values[column]
    }
}

/// The schema a tabula-encoded table conforms to: categorical columns become
/// integer columns, everything else is unchanged.
pub fn encoded_schema(schema: &Schema) -> Schema {
    let columns = schema
        .columns()
        .iter()
        .map(|c| ColumnSpec {
            dtype: match c.dtype {
                Dtype::Categorical => Dtype::Integer,
                other => other,
            },
            ..c.clone()
        })
        .collect();
    Schema::new(columns, schema.task()).expect("ordinal schema stays valid")
}

/// Replaces each categorical value with its ordinal, assigned by first
/// occurrence in the table. Numerical and boolean columns are unchanged.
pub fn tabula_encode(table: &Table, schema: &Schema) -> (Table, CodeBook) {
    let n_cols = schema.n_columns();
    let mut values: Vec<Vec<String>> = vec![Vec::new(); n_cols];
    let mut lookup: Vec<HashMap<String, i64>> = vec![HashMap::new(); n_cols];

    let mut rows = Vec::with_capacity(table.len());
    for row in table.rows() {
        let mut out = Vec::with_capacity(n_cols);
        for (i, (value, col)) in row.values().iter().zip(schema.columns()).enumerate() {
            match (value, col.dtype) {
                (Value::Cat(s), Dtype::Categorical) => {
                    let code = *lookup[i].entry(s.clone()).or_insert_with(|| {
                        values[i].push(s.clone());
                        values[i].len() as i64 - 1
                    });
                    out.push(Value::Int(code));
                }
                _ => out.push(value.clone()),
            }
        }
        rows.push(Row(out));
    }
    let encoded = Table::from_rows(&encoded_schema(schema), rows).expect("encoded rows conform");
    (encoded, CodeBook { values })
}

/// Inverts [`tabula_encode`] on a table conforming to the encoded schema.
pub fn tabula_decode(
    table: &Table,
    schema: &Schema,
    book: &CodeBook,
) -> Result<Table, CodecError> {
    let mut rows = Vec::with_capacity(table.len());
    for row in table.rows() {
        let mut out = Vec::with_capacity(row.values().len());
        for (i, (value, col)) in row.values().iter().zip(schema.columns()).enumerate() {
            match (col.dtype, value) {
                (Dtype::Categorical, Value::Int(code)) => {
                    let cat = book.value(i, *code).ok_or(CodecError::UnknownOrdinal {
                        column: col.name.clone(),
                        code: *code,
                    })?;
                    out.push(Value::Cat(cat.to_string()));
                }
                _ => out.push(value.clone()),
            }
        }
        rows.push(Row(out));
    }
    Ok(Table::from_rows(schema, rows).expect("decoded rows conform"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnSpec, Task};

    fn color_schema() -> Schema {
        Schema::new(
            vec![
                ColumnSpec::feature("color", Dtype::Categorical),
                ColumnSpec::target("n", Dtype::Integer),
            ],
            Task::Classification,
        )
        .unwrap()
    }

    fn color_table(schema: &Schema, colors: &[&str]) -> Table {
        let rows = colors
            .iter()
            .enumerate()
            .map(|(i, c)| Row(vec![Value::Cat(c.to_string()), Value::Int(i as i64)]))
            .collect();
        Table::from_rows(schema, rows).unwrap()
    }

    #[test]
    fn codes_follow_first_occurrence() {
        let schema = color_schema();
        let table = color_table(&schema, &["red", "green", "red", "blue"]);
        let (encoded, book) = tabula_encode(&table, &schema);
        let codes: Vec<&Value> = encoded.column(0).collect();
        assert_eq!(
            codes,
            vec![&Value::Int(0), &Value::Int(1), &Value::Int(0), &Value::Int(2)]
        );
        assert_eq!(book.categories(0), ["red", "green", "blue"]);
        assert_eq!(book.code(0, "blue"), Some(2));
    }

    #[test]
    fn single_category_maps_to_zero() {
        let schema = color_schema();
        let table = color_table(&schema, &["red", "red", "red"]);
        let (encoded, _) = tabula_encode(&table, &schema);
        assert!(encoded.column(0).all(|v| v == &Value::Int(0)));
    }

    #[test]
    fn decode_inverts_encode() {
        let schema = color_schema();
        let table = color_table(&schema, &["red", "green", "red", "blue", "green"]);
        let (encoded, book) = tabula_encode(&table, &schema);
        assert_eq!(tabula_decode(&encoded, &schema, &book).unwrap(), table);
    }

    #[test]
    fn mapping_is_stable_across_calls() {
        let schema = color_schema();
        let table = color_table(&schema, &["b", "a", "b", "c"]);
        let (e1, b1) = tabula_encode(&table, &schema);
        let (e2, b2) = tabula_encode(&table, &schema);
        assert_eq!(e1, e2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn out_of_range_ordinal_is_an_error() {
        let schema = color_schema();
        let table = color_table(&schema, &["red"]);
        let (_, book) = tabula_encode(&table, &schema);
        let bad = Table::from_rows(
            &encoded_schema(&schema),
            vec![Row(vec![Value::Int(7), Value::Int(0)])],
        )
        .unwrap();
        assert_eq!(
            tabula_decode(&bad, &schema, &book).unwrap_err(),
            CodecError::UnknownOrdinal {
                column: "color".into(),
                code: 7
            }
        );
    }

    #[test]
    fn numeric_columns_pass_through() {
        let schema = Schema::new(
            vec![
                ColumnSpec::feature("z", Dtype::Float).with_precision(1),
                ColumnSpec::target("y", Dtype::Boolean),
            ],
            Task::Classification,
        )
        .unwrap();
        let table = Table::from_rows(
            &schema,
            vec![Row(vec![Value::Float(1.5), Value::Bool(true)])],
        )
        .unwrap();
        let (encoded, _) = tabula_encode(&table, &schema);
        assert_eq!(encoded, table);
    }
}
