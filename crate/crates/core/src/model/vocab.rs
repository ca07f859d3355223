//! Vocabulary file and greedy longest-match tokenizer with byte fallback.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_FALLBACK: usize = 256;

pub type TokenId = usize;

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    /// Longest non-fallback token, in bytes.
    max_len: usize,
}

/// Output of [`Vocab::tokenize`]: ids plus the byte range each token covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<TokenId>,
    pub spans: Vec<(usize, usize)>,
}

impl Vocab {
    /// Builds a vocabulary from the non-fallback tokens; the 256 byte-fallback
    /// entries are prepended automatically.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = (0..=255u8).map(byte_token).collect();
        all.extend(tokens.into_iter().map(|s| s.as_ref().to_string()));
        Self::from_entries(all)
    }

    fn from_entries(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < BYTE_FALLBACK {
            return Err(Error::Data(format!(
                "vocab has {} entries, fewer than the 256 byte slots",
                tokens.len()
            )));
        }
        for b in 0..=255u8 {
            if tokens[b as usize] != byte_token(b) {
                return Err(Error::Data(format!("vocab line {} must be {}", b, byte_token(b))));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') || t.contains('\r') {
                return Err(Error::Data(format!(
                    "vocab entry {i} is empty or contains a line break"
                )));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocab entry {t:?}")));
            }
        }
        for required in ["he", "she"] {
            if !ids.contains_key(required) {
                return Err(Error::Data(format!("vocab must contain {required:?}")));
            }
        }
        let max_len = tokens[BYTE_FALLBACK..].iter().map(String::len).max().unwrap_or(0);
        Ok(Self { tokens, ids, max_len })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = text.split('\n').map(str::to_string).collect();
        // tolerate one trailing newline
        let lines = match lines.split_last() {
            Some((last, rest)) if last.is_empty() => rest.to_vec(),
            _ => lines,
        };
        Self::from_entries(lines)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn require(&self, token: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| Error::Data(format!("token {token:?} not in vocab")))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest match, left to right; bytes with no match become
    /// byte-fallback tokens.
    pub fn tokenize(&self, text: &str) -> Encoding {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let longest = (1..=self.max_len.min(bytes.len() - i)).rev().find_map(|len| {
                let piece = std::str::from_utf8(&bytes[i..i + len]).ok()?;
                self.ids
                    .get(piece)
                    .filter(|&&id| id >= BYTE_FALLBACK)
                    .map(|&id| (id, len))
            });
            let (id, len) = longest.unwrap_or((bytes[i] as usize, 1));
            ids.push(id);
            spans.push((i, i + len));
            i += len;
        }
        Encoding { ids, spans }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.tokenize(text).ids
    }

    pub fn detokenize_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if id < BYTE_FALLBACK {
                out.push(id as u8);
            } else if let Some(t) = self.tokens.get(id) {
                out.extend_from_slice(t.as_bytes());
            }
        }
        out
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.detokenize_bytes(ids)).into_owned()
    }
}

/// Half-open range of token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize, seq_len: usize) -> Result<Self> {
        if start >= end || end > seq_len {
            return Err(Error::Data(format!(
                "invalid token span {start}..{end} for {seq_len} tokens"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn last(&self) -> usize {
        self.end - 1
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Tokens overlapping the byte range `[byte_start, byte_end)`.
    pub fn covering(enc: &Encoding, byte_start: usize, byte_end: usize) -> Result<Self> {
        let start = enc
            .spans
            .iter()
            .position(|&(_, e)| e > byte_start)
            .ok_or_else(|| Error::Data(format!("no token covers byte {byte_start}")))?;
        let end = enc
            .spans
            .iter()
            .rposition(|&(s, _)| s < byte_end)
            .map(|p| p + 1)
            .ok_or_else(|| Error::Data(format!("no token covers byte {byte_end}")))?;
        Self::new(start, end, enc.ids.len())
    }
}
