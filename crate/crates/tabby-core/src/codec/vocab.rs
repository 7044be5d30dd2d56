//! Corpus-built word-level vocabulary with digit-level number tokenization.
//!
//! Token strings carry their own spacing: a leading space in the token text
//! means the token starts a new word. This keeps detokenization a plain
//! concatenation and makes the encoding bijective even when a categorical
//! value consists of adjacent digit-like words ("3 0" vs "30").

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::plain::segment_text;
use super::CodecError;
use crate::schema::{Schema, Table};

/// Number of reserved special tokens at the start of every vocabulary.
pub const N_SPECIALS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Bos,
    Eos,
    Eoc,
    Pad,
    Unk,
}

impl Special {
    pub fn id(self) -> usize {
        match self {
            Special::Bos => 0,
            Special::Eos => 1,
            Special::Eoc => 2,
            Special::Pad => 3,
            Special::Unk => 4,
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Special::Bos => "<BOS>",
            Special::Eos => "<EOS>",
            Special::Eoc => "<EOC>",
            Special::Pad => "<PAD>",
            Special::Unk => "<UNK>",
        }
    }

    fn all() -> [Special; N_SPECIALS] {
        [
            Special::Bos,
            Special::Eos,
            Special::Eoc,
            Special::Pad,
            Special::Unk,
        ]
    }
}

/// Bijection between token strings and ids. Ids `0..N_SPECIALS` are the
/// special markers; content lookups never resolve to a special id, so special
/// tokens can only be produced structurally by the encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let tokens = Special::all().iter().map(|s| s.text().to_string()).collect();
        Vocabulary {
            tokens,
            lookup: HashMap::new(),
        }
    }

    fn insert(&mut self, token: String) {
        if !self.lookup.contains_key(&token) {
            self.lookup.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn bos(&self) -> usize {
        Special::Bos.id()
    }

    pub fn eos(&self) -> usize {
        Special::Eos.id()
    }

    pub fn eoc(&self) -> usize {
        Special::Eoc.id()
    }

    pub fn pad(&self) -> usize {
        Special::Pad.id()
    }

    pub fn unk(&self) -> usize {
        Special::Unk.id()
    }

    pub fn special_of(&self, id: usize) -> Option<Special> {
        Special::all().into_iter().find(|s| s.id() == id)
    }

    /// Id of a content token string, if present.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    /// Token string for an id (special literals included).
    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Whether a word is representable, in either its word-initial or
    /// space-prefixed form.
    pub fn has_word(&self, word: &str) -> bool {
        self.lookup.contains_key(word) || self.lookup.contains_key(&format!(" {word}"))
    }

    /// Tokenizes rendered text. Out-of-vocabulary words map to `<UNK>`.
    pub fn tokenize_text(&self, text: &str) -> Vec<usize> {
        split_text(text)
            .into_iter()
            .map(|t| self.id(&t).unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Concatenates token strings back into text. Special ids render as their
    /// literal markers.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match self.tokens.get(id) {
                Some(t) => out.push_str(t),
                None => out.push_str(Special::Unk.text()),
            }
        }
        out
    }

    pub fn token_strings(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;
    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < N_SPECIALS {
            return Err("vocabulary shorter than the special-token prefix".into());
        }
        for sp in Special::all() {
            if tokens[sp.id()] != sp.text() {
                return Err(format!("token {} is not {}", sp.id(), sp.text()));
            }
        }
        let lookup = tokens
            .iter()
            .enumerate()
            .skip(N_SPECIALS)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, lookup })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

/// Builds the vocabulary for a corpus: the five specials, sign/digit/point
/// tokens in both spacing forms, the scaffold word "is", all column names,
/// and every token of every rendered segment. Deterministic in input order.
pub fn build_vocabulary(tables: &[&Table], schema: &Schema) -> Result<Vocabulary, CodecError> {
    if tables.iter().all(|t| t.is_empty()) {
        return Err(CodecError::EmptyCorpus);
    }
    let mut vocab = Vocabulary::with_specials();
    for ch in "0123456789.-".chars() {
        vocab.insert(ch.to_string());
        vocab.insert(format!(" {ch}"));
    }
    vocab.insert("is".to_string());
    vocab.insert(" is".to_string());
    for col in schema.columns() {
        for t in split_text(&col.name) {
            vocab.insert(t);
        }
    }
    for table in tables {
        for row in table.rows() {
            for (i, col) in schema.columns().iter().enumerate() {
                let text = segment_text(col, &row.values()[i])
                    .ok_or_else(|| CodecError::Unencodable(col.name.clone()))?;
                for t in split_text(&text) {
                    vocab.insert(t);
                }
            }
        }
    }
    Ok(vocab)
}

/// A word made of digits, '.', and '-' (with at least one digit) splits into
/// single-character tokens so numbers share digit tokens instead of growing
/// the vocabulary per distinct value.
fn is_numeric_word(word: &str) -> bool {
    word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == '-')
        && word.chars().any(|c| c.is_ascii_digit())
}

/// Splits rendered text into token strings. Words after the first carry a
/// leading space on their first token.
pub(crate) fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (wi, word) in text.split_whitespace().enumerate() {
        if is_numeric_word(word) {
            for (ci, ch) in word.chars().enumerate() {
                let mut t = String::with_capacity(2);
                if wi > 0 && ci == 0 {
                    t.push(' ');
                }
                t.push(ch);
                out.push(t);
            }
        } else {
            let mut t = String::with_capacity(word.len() + 1);
            if wi > 0 {
                t.push(' ');
            }
            t.push_str(word);
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnSpec, Dtype, Row, Task, Value};

    fn one_int_column() -> (Schema, Table) {
        let schema = Schema::new(
            vec![ColumnSpec::target("x", Dtype::Integer)],
            Task::Classification,
        )
        .unwrap();
        let table = Table::from_rows(&schema, vec![Row(vec![Value::Int(5)])]).unwrap();
        (schema, table)
    }

    #[test]
    fn minimal_corpus_has_required_tokens() {
        let (schema, table) = one_int_column();
        let v = build_vocabulary(&[&table], &schema).unwrap();
        for w in ["x", "is", "5"] {
            assert!(v.has_word(w), "missing {w:?}");
        }
        for sp in Special::all() {
            assert_eq!(v.token(sp.id()), Some(sp.text()));
        }
    }

    #[test]
    fn numbers_tokenize_digit_by_digit() {
        let schema = Schema::new(
            vec![ColumnSpec::target("x", Dtype::Integer)],
            Task::Classification,
        )
        .unwrap();
        let table = Table::from_rows(
            &schema,
            vec![Row(vec![Value::Int(12)]), Row(vec![Value::Int(21)])],
        )
        .unwrap();
        let v = build_vocabulary(&[&table], &schema).unwrap();
        assert!(v.has_word("1") && v.has_word("2"));
        assert!(v.id("12").is_none() && v.id(" 12").is_none());
    }

    #[test]
    fn identical_tables_build_identical_vocabularies() {
        let (schema, table) = one_int_column();
        let a = build_vocabulary(&[&table], &schema).unwrap();
        let b = build_vocabulary(&[&table], &schema).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_rejected() {
        let (schema, _) = one_int_column();
        let empty = Table::empty();
        assert_eq!(
            build_vocabulary(&[&empty], &schema).unwrap_err(),
            CodecError::EmptyCorpus
        );
        assert_eq!(
            build_vocabulary(&[], &schema).unwrap_err(),
            CodecError::EmptyCorpus
        );
    }

    #[test]
    fn tokenize_distinguishes_adjacent_digit_words_from_numbers() {
        let glued = split_text("x is 30");
        let spaced = split_text("x is 3 0");
        assert_eq!(glued, vec!["x", " is", " 3", "0"]);
        assert_eq!(spaced, vec!["x", " is", " 3", " 0"]);
    }

    #[test]
    fn detokenize_inverts_tokenize_on_in_vocab_text() {
        let (schema, table) = one_int_column();
        let v = build_vocabulary(&[&table], &schema).unwrap();
        for text in ["x is 5", "x is 55", "5 is 5", "x"] {
            let ids = v.tokenize_text(text);
            assert!(!ids.contains(&v.unk()), "{text:?} hit <UNK>");
            assert_eq!(v.detokenize(&ids), text);
        }
    }

    #[test]
    fn content_text_never_maps_to_special_ids() {
        let schema = Schema::new(
            vec![ColumnSpec::target("c", Dtype::Categorical)],
            Task::Classification,
        )
        .unwrap();
        let table =
            Table::from_rows(&schema, vec![Row(vec![Value::Cat("<EOS>".into())])]).unwrap();
        let v = build_vocabulary(&[&table], &schema).unwrap();
        let ids = v.tokenize_text("c is <EOS>");
        assert!(ids.iter().all(|&id| id >= N_SPECIALS));
    }

    #[test]
    fn out_of_vocabulary_word_maps_to_unk() {
        let (schema, table) = one_int_column();
        let v = build_vocabulary(&[&table], &schema).unwrap();
        let ids = v.tokenize_text("x is unseen");
        assert_eq!(*ids.last().unwrap(), v.unk());
    }

    #[test]
    fn vocabulary_round_trips_through_token_strings() {
        let (schema, table) = one_int_column();
        let v = build_vocabulary(&[&table], &schema).unwrap();
        let strings: Vec<String> = v.clone().into();
        let back = Vocabulary::try_from(strings).unwrap();
        assert_eq!(v, back);
    }
}
