//! Converts typed tables to and from token sequences.
//!
//! Rows are rendered as `NAME is VALUE` segments joined by the end-of-column
//! marker, with the final segment closed by end-of-sequence. The tokenizer is
//! word-level with numbers split into single sign/digit/point tokens, built
//! from the training corpus itself so that encoding round-trips exactly.

mod nested;
mod plain;
mod tabula;
mod vocab;

pub use nested::{flatten_nested, unflatten_nested, NestedError};
pub use plain::{
    decode_row, draw_permutation, encode_plain_segments, encode_plain_string, permute_segments,
    ColumnSegments, DecodeError, Segment,
};
pub use tabula::{encoded_schema, tabula_decode, tabula_encode, CodeBook};
pub use vocab::{build_vocabulary, Special, Vocabulary, N_SPECIALS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodecError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("column {0:?}: unencodable value")]
    Unencodable(String),
    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),
    #[error("segment does not end with a terminal marker")]
    MissingTerminal,
    #[error("column {column:?}: ordinal {code} outside code book")]
    UnknownOrdinal { column: String, code: i64 },
}

/// Human-readable rendering of a token sequence, e.g.
/// `<BOS> age is 30 <EOC> city is Paris <EOS>`. For debugging and reports.
pub fn format_tokens(vocab: &Vocabulary, tokens: &[usize]) -> String {
    let mut out = String::new();
    let mut after_special = true; // suppress the very first separator
    for &id in tokens {
        match vocab.special_of(id) {
            Some(sp) => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(sp.text());
                after_special = true;
            }
            None => {
                let tok = vocab.token(id).unwrap_or("<?>");
                if after_special && !out.is_empty() && !tok.starts_with(' ') {
                    out.push(' ');
                }
                out.push_str(tok);
                after_special = false;
            }
        }
    }
    out
}
