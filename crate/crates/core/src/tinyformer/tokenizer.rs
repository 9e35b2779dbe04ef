//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

use crate::error::{CrdError, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB_SIZE: usize = 259;

/// A token id sequence fed to the model.
///
/// There is deliberately no conversion from a released record into this
/// type: training consumes `TokenSeq`, and a record carries no token ids.
///
/// ```compile_fail
/// use crd_core::{CrdRecord, TokenSeq};
/// fn smuggle(r: CrdRecord) -> TokenSeq { TokenSeq::from(r) }
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    /// `BOS` followed by the UTF-8 bytes of `text`.
    pub fn prompt(text: &str) -> Self {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        ids.extend(text.bytes().map(u32::from));
        Self(ids)
    }

    /// `BOS`, prompt bytes, answer bytes, `EOS`: one supervised training example.
    pub fn example(prompt: &str, answer: &str) -> Self {
        let mut seq = Self::prompt(prompt);
        seq.0.extend(answer.bytes().map(u32::from));
        seq.0.push(EOS);
        seq
    }

    /// Treats arbitrary bytes as text, e.g. a blob scraped from the web.
    pub fn from_raw_bytes(bytes: &[u8]) -> Self {
        let mut ids = Vec::with_capacity(bytes.len() + 1);
        ids.push(BOS);
        ids.extend(bytes.iter().map(|&b| u32::from(b)));
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, id: u32) {
        self.0.push(id);
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(CrdError::Vocab { id, vocab }),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Renders generated ids as text, stopping at the first `EOS`. Specials are dropped.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_starts_with_bos() {
        let p = TokenSeq::prompt("hi");
        assert_eq!(p.ids(), &[BOS, b'h' as u32, b'i' as u32]);
    }

    #[test]
    fn detokenize_stops_at_eos() {
        let ids = [b'4' as u32, b'2' as u32, EOS, b'x' as u32];
        assert_eq!(detokenize(&ids), "42");
    }

    #[test]
    fn vocab_check() {
        assert!(TokenSeq::new(vec![BOS, 300]).check_vocab(259).is_err());
        assert!(TokenSeq::new(vec![BOS, 3]).check_vocab(259).is_ok());
    }
}
