//! Caption conditioning as the denoiser sees it.
//!
//! Token sequences are padded to [`TEXT_LEN`] positions and one-hot encoded
//! over the caption vocabulary plus two reserved symbols. The unconditional
//! input is `NULL` followed by padding; `NULL` never occurs in a caption, so
//! the null condition cannot collide with any text.

use crate::error::{Error, Result};
use crate::scenegen::{tokenize, Caption, Token, MAX_CAPTION_TOKENS};

pub const TEXT_LEN: usize = MAX_CAPTION_TOKENS + 1;
pub const PAD_ID: usize = Token::ALL.len();
pub const NULL_ID: usize = PAD_ID + 1;
pub const TEXT_VOCAB: usize = NULL_ID + 1;
pub const TEXT_INPUT_DIM: usize = TEXT_LEN * TEXT_VOCAB;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Conditioning {
    Text(Vec<Token>),
    Null,
}

impl Conditioning {
    pub fn text(text: &str) -> Result<Conditioning> {
        Conditioning::from_tokens(tokenize(text)?)
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Result<Conditioning> {
        if tokens.is_empty() || tokens.len() > MAX_CAPTION_TOKENS {
            return Err(Error::invalid(format!(
                "caption must have 1..={MAX_CAPTION_TOKENS} tokens, got {}",
                tokens.len()
            )));
        }
        Ok(Conditioning::Text(tokens))
    }

    pub fn caption(c: &Caption) -> Result<Conditioning> {
        Conditioning::from_tokens(c.tokens.clone())
    }

    pub fn ids(&self) -> [usize; TEXT_LEN] {
        let mut ids = [PAD_ID; TEXT_LEN];
        match self {
            Conditioning::Null => ids[0] = NULL_ID,
            Conditioning::Text(tokens) => {
                for (slot, t) in ids.iter_mut().zip(tokens) {
                    *slot = t.id();
                }
            }
        }
        ids
    }

    /// Write the one-hot encoding into `out` (length [`TEXT_INPUT_DIM`]).
    pub fn encode_into(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (pos, id) in self.ids().into_iter().enumerate() {
            out[pos * TEXT_VOCAB + id] = 1.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_is_reserved() {
        let null = Conditioning::Null.ids();
        assert_eq!(null[0], NULL_ID);
        for s in ["a small red square", "a red square left of a blue circle"] {
            let ids = Conditioning::text(s).unwrap().ids();
            assert!(!ids.contains(&NULL_ID));
            assert_ne!(ids, null);
        }
    }

    #[test]
    fn one_hot_rows() {
        let mut buf = vec![0.0; TEXT_INPUT_DIM];
        Conditioning::text("a large blue circle").unwrap().encode_into(&mut buf);
        for row in buf.chunks(TEXT_VOCAB) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }
}
