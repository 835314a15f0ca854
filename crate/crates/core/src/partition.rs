//! Sentence segmentation, block grouping and the augmented placeholder layout.
//!
//! The augmented sequence is laid out as
//!
//! ```text
//! [prefix.., <B-PST>_1 .. <B-PST>_M, <PST>_1, S_1, .., <PST>_M, S_M]
//! ```
//!
//! where each block `S_m` groups `K` consecutive sentences. Tokens are bytes,
//! so character offsets and token indices coincide.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tokens::{self, TokenId, MAX_BLOCKS};

/// One sentence. Offsets are half-open byte ranges; since tokens are bytes
/// the token range equals the character range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub token_start: usize,
    pub token_end: usize,
}

/// Splits after `.`, `!` or `?` when followed by whitespace or end of text.
///
/// Spans tile the text: whitespace following a terminator opens the next
/// sentence, trailing whitespace after the final terminator stays with the
/// last sentence. Abbreviations such as `e.g.` are split like any other
/// terminator.
pub fn segment_sentences(text: &str) -> Result<Vec<SentenceSpan>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        let terminator = matches!(b, b'.' | b'!' | b'?');
        let followed_by_space = bytes.get(i + 1).is_none_or(|c| c.is_ascii_whitespace());
        if terminator && followed_by_space {
            let end = i + 1;
            spans.push(SentenceSpan {
                start,
                end,
                token_start: start,
                token_end: end,
            });
            start = end;
        }
    }
    if start < bytes.len() {
        if bytes[start..].iter().all(u8::is_ascii_whitespace) {
            if let Some(last) = spans.last_mut() {
                last.end = bytes.len();
                last.token_end = bytes.len();
                return Ok(spans);
            }
        }
        spans.push(SentenceSpan {
            start,
            end: bytes.len(),
            token_start: start,
            token_end: bytes.len(),
        });
    }
    Ok(spans)
}

/// How blocks were formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BlockGrouping {
    /// Every `k` sentences form a block.
    Sentences { k: usize },
    /// Fixed runs of `n` tokens.
    Tokens { n: usize },
}

/// Block boundaries `0 = i_0 < i_1 < .. < i_M = n` over the original tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionPlan {
    pub boundaries: Vec<usize>,
    pub grouping: BlockGrouping,
}

impl PartitionPlan {
    pub fn num_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn num_tokens(&self) -> usize {
        *self.boundaries.last().expect("boundaries start at 0")
    }

    /// 0-based index of the last token of block `m` (0-based).
    pub fn block_end(&self, m: usize) -> usize {
        self.boundaries[m + 1] - 1
    }

    /// Token range of block `m`.
    pub fn block(&self, m: usize) -> std::ops::Range<usize> {
        self.boundaries[m]..self.boundaries[m + 1]
    }

    fn from_ends(ends: impl IntoIterator<Item = usize>, grouping: BlockGrouping) -> Self {
        let mut boundaries = vec![0];
        boundaries.extend(ends);
        Self {
            boundaries,
            grouping,
        }
    }
}

/// Groups every `k` sentences into one block; the last block may be short.
pub fn build_partition(spans: &[SentenceSpan], k: usize) -> Result<PartitionPlan> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if spans.is_empty() {
        return Err(Error::NoSentences);
    }
    if spans[0].token_start != 0 || spans.windows(2).any(|w| w[0].token_end != w[1].token_start) {
        return Err(Error::InvalidConfig(
            "sentence spans must tile the token sequence".into(),
        ));
    }
    let ends = spans
        .chunks(k)
        .map(|group| group.last().expect("non-empty chunk").token_end);
    Ok(PartitionPlan::from_ends(
        ends,
        BlockGrouping::Sentences { k },
    ))
}

/// Blocks of exactly `n` tokens, the last possibly shorter.
pub fn build_partition_every_n(token_count: usize, n: usize) -> Result<PartitionPlan> {
    if n == 0 {
        return Err(Error::InvalidConfig("N must be at least 1".into()));
    }
    if token_count == 0 {
        return Err(Error::NoSentences);
    }
    let mut ends: Vec<usize> = (1..=token_count / n).map(|b| b * n).collect();
    if !token_count.is_multiple_of(n) {
        ends.push(token_count);
    }
    Ok(PartitionPlan::from_ends(ends, BlockGrouping::Tokens { n }))
}

/// Token interval that yields as many blocks as there are sentences:
/// `floor(num_tokens / n_sentences)`, at least 1.
pub fn matched_interval(num_tokens: usize, n_sentences: usize) -> usize {
    (num_tokens / n_sentences.max(1)).max(1)
}

/// Token sequence with placeholder slots and their position bookkeeping.
/// All positions are 0-based indices into `ids`; the `m`-th entry of
/// `pst_positions`/`bpst_positions`/`block_end_positions` belongs to block `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AugmentedSequence {
    pub ids: Vec<TokenId>,
    pub prefix_len: usize,
    pub bpst_positions: Vec<usize>,
    pub pst_positions: Vec<usize>,
    /// Position of the final token of each block.
    pub block_end_positions: Vec<usize>,
    /// Position of each original token.
    pub text_positions: Vec<usize>,
}

impl AugmentedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        self.pst_positions.len()
    }

    /// Block index of a `<PST>` position.
    pub fn pst_block(&self, position: usize) -> Option<usize> {
        self.pst_positions.binary_search(&position).ok()
    }

    /// Block index of a `<B-PST>` position.
    pub fn bpst_block(&self, position: usize) -> Option<usize> {
        self.bpst_positions.binary_search(&position).ok()
    }

    /// Original token index held at `position`, if it is a text token.
    pub fn token_index(&self, position: usize) -> Option<usize> {
        self.text_positions.binary_search(&position).ok()
    }

    /// Every position that does not hold a placeholder.
    pub fn non_placeholder_positions(&self) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&p| !tokens::is_placeholder(self.ids[p]))
            .collect()
    }

    /// The original tokens, with prefix and placeholders removed.
    pub fn strip(&self) -> Vec<TokenId> {
        self.text_positions.iter().map(|&p| self.ids[p]).collect()
    }

    /// Single summary-slot layout `[prefix.., <PST>, tokens..]` with no
    /// `<B-PST>` block.
    pub fn single_summary(
        token_ids: &[TokenId],
        prefix: &[TokenId],
        max_len: usize,
    ) -> Result<Self> {
        let required = prefix.len() + token_ids.len() + 1;
        if required > max_len {
            return Err(Error::AugmentedTooLong {
                required,
                max: max_len,
            });
        }
        if token_ids.is_empty() {
            return Err(Error::NoSentences);
        }
        let mut ids = Vec::with_capacity(required);
        ids.extend_from_slice(prefix);
        ids.push(tokens::pst_id(0));
        ids.extend_from_slice(token_ids);
        let text_start = prefix.len() + 1;
        Ok(Self {
            ids,
            prefix_len: prefix.len(),
            bpst_positions: Vec::new(),
            pst_positions: vec![prefix.len()],
            block_end_positions: vec![required - 1],
            text_positions: (text_start..required).collect(),
        })
    }
}

/// Lays out `prefix`, `M` `<B-PST>` slots, then `<PST>_m S_m` for every block.
pub fn augment(
    plan: &PartitionPlan,
    token_ids: &[TokenId],
    prefix: &[TokenId],
    max_len: usize,
) -> Result<AugmentedSequence> {
    if plan.num_tokens() != token_ids.len() {
        return Err(Error::PlanMismatch {
            expected: plan.num_tokens(),
            found: token_ids.len(),
        });
    }
    let blocks = plan.num_blocks();
    if blocks > MAX_BLOCKS {
        return Err(Error::TooManyBlocks {
            blocks,
            max: MAX_BLOCKS,
        });
    }
    let required = prefix.len() + token_ids.len() + 2 * blocks;
    if required > max_len {
        return Err(Error::AugmentedTooLong {
            required,
            max: max_len,
        });
    }

    let mut ids = Vec::with_capacity(required);
    ids.extend_from_slice(prefix);
    let bpst_positions = (0..blocks).map(|m| ids.len() + m).collect();
    ids.extend((0..blocks).map(tokens::bpst_id));

    let mut pst_positions = Vec::with_capacity(blocks);
    let mut block_end_positions = Vec::with_capacity(blocks);
    let mut text_positions = Vec::with_capacity(token_ids.len());
    for m in 0..blocks {
        pst_positions.push(ids.len());
        ids.push(tokens::pst_id(m));
        for &t in &token_ids[plan.block(m)] {
            text_positions.push(ids.len());
            ids.push(t);
        }
        block_end_positions.push(ids.len() - 1);
    }
    Ok(AugmentedSequence {
        ids,
        prefix_len: prefix.len(),
        bpst_positions,
        pst_positions,
        block_end_positions,
        text_positions,
    })
}

/// JSON layout summary emitted by `partition-inspect`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayoutSummary {
    pub prefix_len: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub every_n: Option<usize>,
    pub pst_positions: Vec<usize>,
    pub bpst_positions: Vec<usize>,
    pub boundaries: Vec<usize>,
}

impl LayoutSummary {
    pub fn new(plan: &PartitionPlan, seq: &AugmentedSequence) -> Self {
        let (k, every_n) = match plan.grouping {
            BlockGrouping::Sentences { k } => (Some(k), None),
            BlockGrouping::Tokens { n } => (None, Some(n)),
        };
        Self {
            prefix_len: seq.prefix_len,
            m: seq.num_blocks(),
            k,
            every_n,
            pst_positions: seq.pst_positions.clone(),
            bpst_positions: seq.bpst_positions.clone(),
            boundaries: plan.boundaries.clone(),
        }
    }
}
