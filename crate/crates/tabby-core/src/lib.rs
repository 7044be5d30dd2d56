//! Column-routed mixture-of-experts language models for tabular and
//! nested-JSON data synthesis, with the training schemes, samplers, and
//! evaluation metrics needed to compare synthesis methods end to end.
//!
//! The pipeline: a [`schema::Schema`] types a [`schema::Table`]; the
//! [`codec`] renders rows as `NAME is VALUE` token sequences; a
//! [`model::TabbyModel`] (optionally with per-column expert blocks) is fit by
//! [`train`], sampled by [`sample`], and the synthetic output is scored by
//! [`eval`] (downstream-model efficacy, discrimination, distance to closest
//! record, performance profiles).

pub mod codec;
pub mod data;
pub mod eval;
pub mod model;
pub mod sample;
pub mod schema;
pub mod toy;
pub mod train;

pub use codec::{
    build_vocabulary, decode_row, encode_plain_segments, encode_plain_string, flatten_nested,
    permute_segments, tabula_decode, tabula_encode, unflatten_nested, CodeBook, ColumnSegments,
    Vocabulary,
};
pub use schema::{ColumnSpec, Dtype, Role, Row, Schema, Table, Task, Value};
