//! Inter-layer rewiring of summary placeholders.
//!
//! Before attention at every scheduled layer, `f_local` copies the hidden
//! state of each block's final token into that block's `<PST>` slot, then
//! `f_global` copies each `<PST>` state into the matching `<B-PST>` slot at
//! the front of the sequence. Tokens anywhere in the document can then attend
//! to summaries of every later block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{self, ForwardOptions, LayerRange, ModelWeights};
use crate::partition::{self, AugmentedSequence, PartitionPlan};
use crate::tokens::{self, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No placeholders, no rewiring.
    Vanilla,
    /// One `<PST>` slot at the front, fed from the last token.
    TpSingle,
    /// Per-block `<PST>` slots plus the `<B-PST>` block.
    Htp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Mean,
    Last,
}

/// Which positions get rewired, and when.
#[derive(Debug, Clone, Copy)]
pub struct RewirePlan<'a> {
    pub sequence: Option<&'a AugmentedSequence>,
    pub method: Method,
    pub layers: LayerRange,
    /// Seed for the random first-layer placeholder embeddings.
    pub placeholder_seed: u64,
}

impl<'a> RewirePlan<'a> {
    pub fn new(
        sequence: Option<&'a AugmentedSequence>,
        method: Method,
        layers: LayerRange,
        placeholder_seed: u64,
    ) -> Result<Self> {
        match (method, sequence) {
            (Method::Vanilla, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "vanilla plans take no augmented sequence".into(),
                ))
            }
            (Method::TpSingle | Method::Htp, None) => {
                return Err(Error::InvalidConfig(format!(
                    "{method:?} needs an augmented sequence"
                )))
            }
            (Method::TpSingle, Some(seq)) if seq.num_blocks() != 1 => {
                return Err(Error::InvalidConfig(format!(
                    "single-summary plans need exactly one block, got {}",
                    seq.num_blocks()
                )))
            }
            _ => {}
        }
        if layers.start < 1 || layers.start > layers.end {
            return Err(Error::InvalidConfig(format!(
                "invalid rewiring layers {layers}"
            )));
        }
        Ok(Self {
            sequence,
            method,
            layers,
            placeholder_seed,
        })
    }

    /// Whether rewiring fires on the states entering layer `layer`.
    pub fn is_active(&self, layer: usize) -> bool {
        self.method != Method::Vanilla && layer >= 1 && self.layers.contains(layer)
    }

    /// `(target, source)` pairs copied by `f_local`: `<PST>_m <- end(S_m)`.
    pub fn local_copies(&self) -> Vec<(usize, usize)> {
        match self.sequence {
            Some(seq) if self.method != Method::Vanilla => seq
                .pst_positions
                .iter()
                .copied()
                .zip(seq.block_end_positions.iter().copied())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// `(target, source)` pairs copied by `f_global`: `<B-PST>_m <- <PST>_m`.
    pub fn global_copies(&self) -> Vec<(usize, usize)> {
        match self.sequence {
            Some(seq) if self.method == Method::Htp => seq
                .bpst_positions
                .iter()
                .copied()
                .zip(seq.pst_positions.iter().copied())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn check_len(&self, rows: usize) -> Result<()> {
        match self.sequence {
            Some(seq) if seq.len() != rows => Err(Error::PlanMismatch {
                expected: seq.len(),
                found: rows,
            }),
            _ => Ok(()),
        }
    }
}

fn copy_rows(states: &DMatrix<f64>, copies: &[(usize, usize)]) -> DMatrix<f64> {
    let mut out = states.clone();
    for &(target, source) in copies {
        out.row_mut(target).copy_from(&states.row(source));
    }
    out
}

/// Copies each block's final-token state into its `<PST>` row.
pub fn f_local(states: &DMatrix<f64>, plan: &RewirePlan<'_>) -> Result<DMatrix<f64>> {
    plan.check_len(states.nrows())?;
    Ok(copy_rows(states, &plan.local_copies()))
}

/// Copies each `<PST>` row into the matching `<B-PST>` row.
pub fn f_global(states: &DMatrix<f64>, plan: &RewirePlan<'_>) -> Result<DMatrix<f64>> {
    plan.check_len(states.nrows())?;
    Ok(copy_rows(states, &plan.global_copies()))
}

/// `f_global(f_local(states))` when `layer` is scheduled, identity otherwise.
/// Single-summary plans have no `<B-PST>` rows, so only `f_local` acts.
pub fn apply_rewiring(
    states: &DMatrix<f64>,
    plan: &RewirePlan<'_>,
    layer: usize,
) -> Result<DMatrix<f64>> {
    rewire_layer(states, plan, layer).map(|(_, rewired)| rewired)
}

/// Returns `(v', v'')` for one layer.
pub(crate) fn rewire_layer(
    states: &DMatrix<f64>,
    plan: &RewirePlan<'_>,
    layer: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    plan.check_len(states.nrows())?;
    if !plan.is_active(layer) {
        return Ok((states.clone(), states.clone()));
    }
    let local = copy_rows(states, &plan.local_copies());
    let global = copy_rows(&local, &plan.global_copies());
    Ok((local, global))
}

/// How sentences are grouped into blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Every `K` sentences.
    Sentences(usize),
    /// Fixed token runs sized so the block count matches the sentence count.
    MatchedTokens,
    /// Fixed token runs of the given length.
    Tokens(usize),
}

/// Everything needed to turn one document into one vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentConfig {
    pub method: Method,
    pub grouping: Grouping,
    pub readout: Readout,
    pub exit_layer: usize,
    /// Rewiring schedule; `None` uses the model config's range.
    pub layers: Option<LayerRange>,
    /// Raw text placed after `BOS` and before the placeholders.
    pub instruction: Option<String>,
    pub placeholder_seed: u64,
    pub mean_exclude_placeholders: bool,
    pub apply_final_norm_at_exit: bool,
}

impl DocumentConfig {
    pub fn new(method: Method, readout: Readout, weights: &ModelWeights) -> Self {
        Self {
            method,
            grouping: Grouping::Sentences(1),
            readout,
            exit_layer: weights.config().exit_layer,
            layers: None,
            instruction: None,
            placeholder_seed: weights.default_placeholder_seed(),
            mean_exclude_placeholders: false,
            apply_final_norm_at_exit: false,
        }
    }

    pub fn prefix(&self) -> Vec<TokenId> {
        let mut prefix = vec![tokens::BOS];
        if let Some(instr) = &self.instruction {
            prefix.extend(tokens::encode(instr));
        }
        prefix
    }
}

/// Token layout of a document before the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDocument {
    pub ids: Vec<TokenId>,
    pub partition: Option<PartitionPlan>,
    pub sequence: Option<AugmentedSequence>,
}

/// Segments, partitions and augments `text` according to `cfg`.
pub fn prepare_document(
    text: &str,
    cfg: &DocumentConfig,
    max_len: usize,
) -> Result<PreparedDocument> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let body = tokens::encode(text);
    let prefix = cfg.prefix();
    match cfg.method {
        Method::Vanilla => {
            let mut ids = prefix;
            ids.extend(body);
            if ids.len() > max_len {
                return Err(Error::SequenceTooLong {
                    len: ids.len(),
                    max: max_len,
                });
            }
            Ok(PreparedDocument {
                ids,
                partition: None,
                sequence: None,
            })
        }
        Method::TpSingle => {
            let seq = AugmentedSequence::single_summary(&body, &prefix, max_len)?;
            Ok(PreparedDocument {
                ids: seq.ids.clone(),
                partition: None,
                sequence: Some(seq),
            })
        }
        Method::Htp => {
            let spans = partition::segment_sentences(text)?;
            let plan = match cfg.grouping {
                Grouping::Sentences(k) => partition::build_partition(&spans, k)?,
                Grouping::MatchedTokens => partition::build_partition_every_n(
                    body.len(),
                    partition::matched_interval(body.len(), spans.len()),
                )?,
                Grouping::Tokens(n) => partition::build_partition_every_n(body.len(), n)?,
            };
            let seq = partition::augment(&plan, &body, &prefix, max_len)?;
            Ok(PreparedDocument {
                ids: seq.ids.clone(),
                partition: Some(plan),
                sequence: Some(seq),
            })
        }
    }
}

impl PreparedDocument {
    pub fn plan<'a>(
        &'a self,
        cfg: &DocumentConfig,
        weights: &ModelWeights,
    ) -> Result<Option<RewirePlan<'a>>> {
        if cfg.method == Method::Vanilla {
            return Ok(None);
        }
        let layers = cfg
            .layers
            .or(weights.config().tp_layer_range)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("{:?} needs a rewiring layer range", cfg.method))
            })?;
        if layers.end > weights.config().num_layers {
            return Err(Error::InvalidConfig(format!(
                "rewiring layers {layers} exceed model depth {}",
                weights.config().num_layers
            )));
        }
        RewirePlan::new(
            self.sequence.as_ref(),
            cfg.method,
            layers,
            cfg.placeholder_seed,
        )
        .map(Some)
    }

    /// Positions averaged by the mean readout.
    pub fn mean_positions(&self, cfg: &DocumentConfig) -> Vec<usize> {
        match (&self.sequence, cfg.mean_exclude_placeholders) {
            (Some(seq), true) => seq.non_placeholder_positions(),
            _ => (0..self.ids.len()).collect(),
        }
    }
}

/// Segment, partition, augment, run the rewired forward pass and read out
/// at the exit layer.
pub fn embed_document(
    weights: &ModelWeights,
    text: &str,
    cfg: &DocumentConfig,
) -> Result<DVector<f64>> {
    let doc = prepare_document(text, cfg, weights.config().max_seq_len)?;
    let plan = doc.plan(cfg, weights)?;
    let out = model::forward(
        weights,
        &doc.ids,
        ForwardOptions {
            rewire: plan.as_ref(),
            placeholder_seed: Some(cfg.placeholder_seed),
            ..Default::default()
        },
    )?;
    match cfg.readout {
        Readout::Mean => model::embed_mean(
            &out.hidden,
            cfg.exit_layer,
            &doc.mean_positions(cfg),
            cfg.apply_final_norm_at_exit,
        ),
        Readout::Last => {
            model::embed_last(&out.hidden, cfg.exit_layer, cfg.apply_final_norm_at_exit)
        }
    }
}

/// Embeds every text independently.
pub fn embed_documents(
    weights: &ModelWeights,
    texts: &[String],
    cfg: &DocumentConfig,
    exec: Execution,
) -> Result<Vec<DVector<f64>>> {
    exec::try_map_slice(texts, exec, |t| embed_document(weights, t, cfg))
}
