use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BLANK: &str = "<blank>";
pub const MASK: &str = "<mask>";
pub const PAD: &str = "<pad>";

/// Ordinary tokens occupy ids `0..n`; the blank, mask and pad symbols follow
/// at `n`, `n + 1` and `n + 2`. With this layout a CTC output column index is
/// the token id itself, blank included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    blank_id: TokenId,
    mask_id: TokenId,
    pad_id: TokenId,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(regular: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = regular.into_iter().map(Into::into).collect();
        let n = tokens.len();
        tokens.extend([BLANK, MASK, PAD].map(String::from));
        let vocab = Vocabulary {
            tokens,
            blank_id: n,
            mask_id: n + 1,
            pad_id: n + 2,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    /// `n` tokens named `t0 .. t{n-1}`.
    pub fn synthetic(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("t{i}")))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len().saturating_sub(3);
        if n == 0 {
            return Err(Error::Config("vocabulary needs at least one ordinary token".into()));
        }
        if (self.blank_id, self.mask_id, self.pad_id) != (n, n + 1, n + 2) {
            return Err(Error::Config(format!(
                "special ids must be blank={n}, mask={}, pad={}",
                n + 1,
                n + 2
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("token {i} ({t:?}) is empty or has whitespace")));
            }
            if i < n && [BLANK, MASK, PAD].contains(&t.as_str()) {
                return Err(Error::Config(format!("ordinary token {i} uses reserved name {t}")));
            }
            if !seen.insert(t) {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(())
    }

    /// Number of ordinary tokens, `|V|`.
    pub fn len(&self) -> usize {
        self.tokens.len() - 3
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blank_id(&self) -> TokenId {
        self.blank_id
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    /// Width of the CTC output layer, `|V| + 1`.
    pub fn ctc_classes(&self) -> usize {
        self.len() + 1
    }

    /// Rows of the decoder input embedding (all ids including specials).
    pub fn embedding_rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_regular(&self, id: TokenId) -> bool {
        id < self.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[..self.len()]
    }

    /// Space-joined rendering of a token sequence.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses ordinary tokens; specials and unknown strings are rejected.
    pub fn parse(&self, line: &str) -> Result<Vec<TokenId>> {
        line.split_whitespace()
            .map(|t| {
                self.id(t)
                    .filter(|&i| self.is_regular(i))
                    .ok_or_else(|| Error::Data(format!("unknown token {t:?}")))
            })
            .collect()
    }
}
