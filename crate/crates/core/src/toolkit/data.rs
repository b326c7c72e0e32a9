use std::path::Path;

use crate::error::{Error, Result};

/// Byte-level vocabulary: ids `0..256` are raw bytes, then two specials.
pub const BYTE_VOCAB: usize = 258;
pub const BOS: usize = 256;
pub const EOS: usize = 257;

/// Where a token stream came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Bytes,
    Pretokenized { width: u8 },
}

/// Token ids, all below `vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<usize>,
    vocab_size: usize,
    source: Source,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>, vocab_size: usize, source: Source) -> Result<Self> {
        if let Some((offset, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab_size) {
            return Err(Error::data(format!(
                "token {id} at offset {offset} is outside the vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size, source })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn source(&self) -> Source {
        self.source
    }
}

/// Maps each byte to its own id.
pub fn tokenize(raw: &[u8]) -> TokenStream {
    TokenStream {
        ids: raw.iter().map(|&b| usize::from(b)).collect(),
        vocab_size: BYTE_VOCAB,
        source: Source::Bytes,
    }
}

/// Inverse of [`tokenize`]; special tokens are dropped.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .enumerate()
        .filter(|(_, &id)| id != BOS && id != EOS)
        .map(|(offset, &id)| {
            u8::try_from(id)
                .map_err(|_| Error::data(format!("token {id} at offset {offset} is not a byte")))
        })
        .collect()
}

pub fn tokenize_file(path: impl AsRef<Path>) -> Result<TokenStream> {
    Ok(tokenize(&std::fs::read(path)?))
}

/// Decodes little-endian ids of `width` bits (16 or 32).
pub fn decode_pretokenized(bytes: &[u8], width: u8, vocab_size: usize) -> Result<TokenStream> {
    let step = match width {
        16 => 2,
        32 => 4,
        w => return Err(Error::config(format!("token width must be 16 or 32 bits, got {w}"))),
    };
    if !bytes.len().is_multiple_of(step) {
        return Err(Error::format(format!(
            "{} bytes is not a whole number of {width}-bit tokens",
            bytes.len()
        )));
    }
    let mut ids = Vec::with_capacity(bytes.len() / step);
    for (i, c) in bytes.chunks_exact(step).enumerate() {
        let id = match step {
            2 => usize::from(u16::from_le_bytes([c[0], c[1]])),
            _ => u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize,
        };
        if id >= vocab_size {
            return Err(Error::data(format!(
                "token {id} at byte offset {} is outside the vocabulary of {vocab_size}",
                i * step
            )));
        }
        ids.push(id);
    }
    Ok(TokenStream {
        ids,
        vocab_size,
        source: Source::Pretokenized { width },
    })
}

pub fn load_pretokenized(path: impl AsRef<Path>, width: u8, vocab_size: usize) -> Result<TokenStream> {
    decode_pretokenized(&std::fs::read(path)?, width, vocab_size)
}

/// Inverse of [`decode_pretokenized`].
pub fn encode_pretokenized(ids: &[usize], width: u8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for &id in ids {
        match width {
            16 => out.extend_from_slice(
                &u16::try_from(id)
                    .map_err(|_| Error::data(format!("token {id} does not fit 16 bits")))?
                    .to_le_bytes(),
            ),
            32 => out.extend_from_slice(
                &u32::try_from(id)
                    .map_err(|_| Error::data(format!("token {id} does not fit 32 bits")))?
                    .to_le_bytes(),
            ),
            w => return Err(Error::config(format!("token width must be 16 or 32 bits, got {w}"))),
        }
    }
    Ok(out)
}
