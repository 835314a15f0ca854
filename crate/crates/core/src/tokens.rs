//! Byte-level token ids and the reserved placeholder block.
//!
//! Ids `0..256` are raw bytes. Placeholders live in
//! `[PLACEHOLDER_BASE, PLACEHOLDER_BASE + 2 * MAX_BLOCKS)`: block `m`
//! (0-based) owns `<B-PST>` at `BASE + 2m` and `<PST>` at `BASE + 2m + 1`.
//! `BOS` sits just past the reserved block.

pub type TokenId = u32;

pub const BYTE_VOCAB: u32 = 256;
pub const PLACEHOLDER_BASE: u32 = BYTE_VOCAB;
pub const MAX_BLOCKS: usize = 1 << 15;
pub const BOS: TokenId = PLACEHOLDER_BASE + 2 * MAX_BLOCKS as u32;

/// Number of rows in the learned embedding table (bytes plus `BOS`).
pub const EMBEDDING_ROWS: usize = BYTE_VOCAB as usize + 1;

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// `BOS` followed by the bytes of `text`.
pub fn encode_with_bos(text: &str) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.bytes().map(TokenId::from));
    ids
}

pub fn bpst_id(block: usize) -> TokenId {
    PLACEHOLDER_BASE + 2 * block as u32
}

pub fn pst_id(block: usize) -> TokenId {
    PLACEHOLDER_BASE + 2 * block as u32 + 1
}

pub fn is_placeholder(id: TokenId) -> bool {
    (PLACEHOLDER_BASE..BOS).contains(&id)
}

/// Row of the learned embedding table for a non-placeholder id.
pub fn embedding_row(id: TokenId) -> Option<usize> {
    if id < BYTE_VOCAB {
        Some(id as usize)
    } else if id == BOS {
        Some(BYTE_VOCAB as usize)
    } else {
        None
    }
}
