//! Token vocabulary for scene captions.
//!
//! A closed set of words: shapes, colors, textures, background kinds, the
//! connective "on", and a null token used for unconditional prediction and
//! padding.

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Id of the null/placeholder token. Also used for padding.
pub const NULL_TOKEN: TokenId = 0;

/// Maximum caption length fed to the denoiser; shorter prompts are padded
/// with the null token.
pub const MAX_TOKENS: usize = 6;

const WORDS: &[&str] = &[
    "<null>", "on", "circle", "square", "triangle", "plain", "striped", "dotted", "red",
    "orange", "yellow", "green", "cyan", "blue", "purple", "magenta", "white", "gray",
    "checker", "gradient",
];

/// The closed token set shared by the scene generator and the denoiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn len(&self) -> usize {
        WORDS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, word: &str) -> Result<TokenId> {
        WORDS
            .iter()
            .position(|w| *w == word)
            .ok_or_else(|| Error::invalid(format!("unknown token {word:?}")))
    }

    pub fn decode(&self, id: TokenId) -> Result<&'static str> {
        WORDS
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("token id {id} out of range")))
    }

    /// Encodes a whitespace-separated phrase, e.g. "red circle on white".
    pub fn encode_phrase(&self, phrase: &str) -> Result<Vec<TokenId>> {
        let toks: Vec<TokenId> = phrase
            .split_whitespace()
            .map(|w| self.encode(&w.to_lowercase()))
            .collect::<Result<_>>()?;
        if toks.is_empty() {
            return Err(Error::invalid("empty phrase"));
        }
        if toks.len() > MAX_TOKENS {
            return Err(Error::invalid(format!(
                "phrase longer than {MAX_TOKENS} tokens: {phrase:?}"
            )));
        }
        Ok(toks)
    }

    pub fn decode_phrase(&self, tokens: &[TokenId]) -> Result<String> {
        let words: Vec<&str> = tokens.iter().map(|t| self.decode(*t)).collect::<Result<_>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrase_round_trip() {
        let v = Vocab;
        let toks = v.encode_phrase("striped red circle on white").unwrap();
        assert_eq!(v.decode_phrase(&toks).unwrap(), "striped red circle on white");
    }

    #[test]
    fn unknown_word_rejected() {
        assert!(Vocab.encode("zebra").is_err());
    }

    #[test]
    fn null_token_is_zero() {
        assert_eq!(Vocab.encode("<null>").unwrap(), NULL_TOKEN);
    }
}
