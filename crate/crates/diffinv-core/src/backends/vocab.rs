//! Token vocabulary: id/string/embedding lookups and whitespace tokenizing.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Index of the conventional unknown-word slot used when tokenizing text
/// containing words outside the vocabulary.
pub const UNKNOWN_TOKEN_ID: TokenId = 0;

/// The embedding table and string form of every token a backend knows.
/// Row `i` of `embeddings` belongs to `tokens[i]`.
#[derive(Debug, Clone)]
pub struct VocabTable {
    embeddings: Array2<f64>,
    tokens: Vec<String>,
}

impl VocabTable {
    pub fn new(embeddings: Array2<f64>, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput { what: "vocabulary" });
        }
        if embeddings.nrows() != tokens.len() {
            return Err(Error::InvalidConfig(format!(
                "vocab has {} embedding rows for {} token strings",
                embeddings.nrows(),
                tokens.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("vocab embeddings must be finite".into()));
        }
        Ok(VocabTable { embeddings, tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn embedding(&self, id: TokenId) -> Result<ArrayView1<'_, f64>> {
        if id >= self.size() {
            return Err(Error::InvalidConfig(format!(
                "token id {id} outside vocabulary of size {}",
                self.size()
            )));
        }
        Ok(self.embeddings.index_axis(Axis(0), id))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidConfig(format!(
                "token id {id} outside vocabulary of size {}",
                self.size()
            )))
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Stack the embedding rows for a sequence of token ids.
    pub fn rows_for(&self, ids: &[TokenId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.token_dim()));
        for (i, id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&self.embedding(*id)?);
        }
        Ok(out)
    }

    /// Whitespace tokenizer: lowercases, strips surrounding punctuation, and
    /// maps words outside the vocabulary to [`UNKNOWN_TOKEN_ID`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .map(|w| self.id_of(&w).unwrap_or(UNKNOWN_TOKEN_ID))
            .collect()
    }

    /// Space-joined string form of a token-id sequence.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|id| self.token(*id)).collect();
        Ok(words?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn small_vocab() -> VocabTable {
        VocabTable::new(
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            vec!["red".into(), "blue".into(), "green".into()],
        )
        .unwrap()
    }

    #[test]
    fn row_and_string_counts_must_agree() {
        let r = VocabTable::new(array![[1.0, 0.0]], vec!["a".into(), "b".into()]);
        assert!(r.is_err());
    }

    #[test]
    fn tokenize_maps_unknown_words_to_unknown_slot() {
        let v = small_vocab();
        assert_eq!(v.tokenize("Blue, RED! mystery"), vec![1, 0, UNKNOWN_TOKEN_ID]);
    }

    #[test]
    fn decode_round_trips_known_ids() {
        let v = small_vocab();
        let ids = v.tokenize("green red");
        assert_eq!(v.decode(&ids).unwrap(), "green red");
        assert_eq!(v.tokenize(&v.decode(&ids).unwrap()), ids);
    }

    #[test]
    fn rows_for_stacks_embeddings_in_order() {
        let v = small_vocab();
        let rows = v.rows_for(&[2, 0]).unwrap();
        assert_eq!(rows, array![[1.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn out_of_range_ids_error() {
        let v = small_vocab();
        assert!(v.embedding(3).is_err());
        assert!(v.token(3).is_err());
        assert!(v.rows_for(&[0, 3]).is_err());
    }
}
