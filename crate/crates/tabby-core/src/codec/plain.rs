//! Row ⇄ token-sequence encoding: `NAME is VALUE` segments with terminal
//! markers, plus segment permutation for column-order-shuffled training.

use rand::Rng;

use super::vocab::Vocabulary;
use super::CodecError;
use crate::schema::{parse_value, render_value, ColumnSpec, Dtype, Row, Schema, Value};

/// Token ids of one encoded column, tagged with the column it came from so
/// expert routing follows column identity under any presentation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub column: usize,
    pub tokens: Vec<usize>,
}

/// An encoded row as an ordered list of column segments. Every segment ends
/// with `<EOC>` except the last, which ends with `<EOS>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSegments {
    pub segments: Vec<Segment>,
}

impl ColumnSegments {
    /// Total token count including terminals (the `<BOS>` prefix excluded).
    pub fn token_len(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Text form of one segment, without its terminal marker.
pub(crate) fn segment_text(col: &ColumnSpec, value: &Value) -> Option<String> {
    let rendered = render_value(value, col.float_precision)?;
    if rendered.is_empty() {
        Some(format!("{} is", col.name))
    } else {
        Some(format!("{} is {}", col.name, rendered))
    }
}

/// Encodes a row as one segment per column, in schema order.
pub fn encode_plain_segments(
    schema: &Schema,
    vocab: &Vocabulary,
    row: &Row,
) -> Result<ColumnSegments, CodecError> {
    let cols = schema.columns();
    assert_eq!(row.values().len(), cols.len(), "row does not match schema");
    let last = cols.len() - 1;
    let mut segments = Vec::with_capacity(cols.len());
    for (i, (col, value)) in cols.iter().zip(row.values()).enumerate() {
        let text =
            segment_text(col, value).ok_or_else(|| CodecError::Unencodable(col.name.clone()))?;
        let mut tokens = vocab.tokenize_text(&text);
        tokens.push(if i == last { vocab.eos() } else { vocab.eoc() });
        segments.push(Segment { column: i, tokens });
    }
    Ok(ColumnSegments { segments })
}

/// `<BOS>` followed by the concatenated segments.
pub fn encode_plain_string(
    schema: &Schema,
    vocab: &Vocabulary,
    row: &Row,
) -> Result<Vec<usize>, CodecError> {
    let segs = encode_plain_segments(schema, vocab, row)?;
    let mut out = Vec::with_capacity(1 + segs.token_len());
    out.push(vocab.bos());
    for seg in &segs.segments {
        out.extend_from_slice(&seg.tokens);
    }
    Ok(out)
}

/// Why a token sequence failed to parse back into a row. The variants are
/// kept distinct so samplers can report rejection causes separately.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed segment: {0}")]
    Malformed(&'static str),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("column {column:?}: cannot parse {text:?} as {dtype:?}")]
    TypeParse {
        column: String,
        text: String,
        dtype: Dtype,
    },
    #[error("expected {want} distinct columns, found {got}")]
    WrongColumnCount { want: usize, got: usize },
}

/// Parses a token sequence back into a row. Segments may arrive in any
/// column order; the name/value split is the first standalone "is" token.
pub fn decode_row(tokens: &[usize], schema: &Schema, vocab: &Vocabulary) -> Result<Row, DecodeError> {
    let tokens = match tokens.first() {
        Some(&t) if t == vocab.bos() => &tokens[1..],
        _ => tokens,
    };

    // Structural pass: split on terminals, reject stray specials.
    let mut segments: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    let mut closed = false;
    for (i, &t) in tokens.iter().enumerate() {
        if closed {
            return Err(DecodeError::Malformed("content after <EOS>"));
        }
        if t == vocab.eoc() {
            segments.push(&tokens[start..i]);
            start = i + 1;
        } else if t == vocab.eos() {
            segments.push(&tokens[start..i]);
            start = i + 1;
            closed = true;
        } else if vocab.special_of(t).is_some() {
            return Err(DecodeError::Malformed("unexpected special token"));
        }
    }
    if !closed {
        return Err(DecodeError::Malformed("missing <EOS>"));
    }

    // Per-segment pass: locate "is", resolve the column name.
    let mut parsed: Vec<(usize, String)> = Vec::new();
    for seg in &segments {
        let is_at = seg
            .iter()
            .position(|&t| matches!(vocab.token(t), Some("is") | Some(" is")))
            .ok_or(DecodeError::Malformed("no \"is\" delimiter"))?;
        let name = vocab.detokenize(&seg[..is_at]);
        let column = schema
            .column_index(&name)
            .ok_or_else(|| DecodeError::UnknownColumn(name.clone()))?;
        let mut value_text = vocab.detokenize(&seg[is_at + 1..]);
        if value_text.starts_with(' ') {
            value_text.remove(0);
        }
        parsed.push((column, value_text));
    }

    // Coverage: every column exactly once.
    let want = schema.n_columns();
    let mut seen = vec![false; want];
    let mut distinct = 0;
    for &(column, _) in &parsed {
        if !seen[column] {
            seen[column] = true;
            distinct += 1;
        }
    }
    if parsed.len() != want || distinct != want {
        return Err(DecodeError::WrongColumnCount {
            want,
            got: distinct.min(parsed.len()),
        });
    }

    let mut values: Vec<Option<Value>> = vec![None; want];
    for (column, text) in parsed {
        let spec = &schema.columns()[column];
        let value = parse_value(spec.dtype, &text).ok_or_else(|| DecodeError::TypeParse {
            column: spec.name.clone(),
            text,
            dtype: spec.dtype,
        })?;
        values[column] = Some(value);
    }
    Ok(Row(values.into_iter().map(|v| v.unwrap()).collect()))
}

/// Reorders segments and fixes up terminal markers so the new last segment
/// ends with `<EOS>` and all others with `<EOC>`. `perm[j]` names the old
/// index placed at position `j`. Column tags are preserved.
pub fn permute_segments(
    segs: &ColumnSegments,
    perm: &[usize],
    vocab: &Vocabulary,
) -> Result<ColumnSegments, CodecError> {
    let n = segs.segments.len();
    let mut seen = vec![false; n];
    if perm.len() != n || !perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true)) {
        return Err(CodecError::InvalidPermutation(perm.to_vec()));
    }
    let mut segments = Vec::with_capacity(n);
    for (j, &p) in perm.iter().enumerate() {
        let mut seg = segs.segments[p].clone();
        let last = seg
            .tokens
            .last_mut()
            .filter(|t| **t == vocab.eoc() || **t == vocab.eos())
            .ok_or(CodecError::MissingTerminal)?;
        *last = if j == n - 1 { vocab.eos() } else { vocab.eoc() };
        segments.push(seg);
    }
    Ok(ColumnSegments { segments })
}

/// Uniformly random permutation of `0..n`.
pub fn draw_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
