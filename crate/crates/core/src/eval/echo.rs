use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_mean, forward, ForwardOptions, ModelWeights, RegionMask};
use crate::tokens::{self, TokenId};

/// `[T, T]` with both copy spans (0-based, half-open).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoSequence {
    pub ids: Vec<TokenId>,
    pub first: Range<usize>,
    pub second: Range<usize>,
}

impl EchoSequence {
    pub fn copy_len(&self) -> usize {
        self.first.len()
    }
}

pub fn echo_duplicate(ids: &[TokenId], max_len: usize) -> Result<EchoSequence> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::EmptySelection);
    }
    if 2 * n > max_len {
        return Err(Error::SequenceTooLong {
            len: 2 * n,
            max: max_len,
        });
    }
    let mut doubled = ids.to_vec();
    doubled.extend_from_slice(ids);
    Ok(EchoSequence {
        ids: doubled,
        first: 0..n,
        second: n..2 * n,
    })
}

/// Cross-pass attention regions that can be blocked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EchoArea {
    None,
    /// Second-pass query at copy index `q` to first-pass keys with copy index `< q`.
    A,
    /// Every second-pass query to every first-pass key.
    B,
}

/// Mask over a `2n`-token echo sequence.
pub fn area_mask(n: usize, area: EchoArea) -> RegionMask {
    match area {
        EchoArea::None => RegionMask::new(),
        EchoArea::B => RegionMask::new().with_rect(n..2 * n, 0..n),
        EchoArea::A => (1..n).fold(RegionMask::new(), |m, q| {
            m.with_rect(n + q..n + q + 1, 0..q)
        }),
    }
}

/// Echo-mean embedding: average of second-pass states at `exit_layer`.
pub fn echo_embed(
    weights: &ModelWeights,
    text: &str,
    area: EchoArea,
    exit_layer: usize,
    apply_final_norm_at_exit: bool,
) -> Result<DVector<f64>> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let echo = echo_duplicate(&tokens::encode_with_bos(text), weights.config().max_seq_len)?;
    let mask = area_mask(echo.copy_len(), area);
    let out = forward(
        weights,
        &echo.ids,
        ForwardOptions {
            region_mask: Some(&mask),
            ..Default::default()
        },
    )?;
    let second: Vec<usize> = echo.second.clone().collect();
    embed_mean(&out.hidden, exit_layer, &second, apply_final_norm_at_exit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoEmbeddings {
    pub none: DVector<f64>,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
}

pub fn region_mask_experiment(
    weights: &ModelWeights,
    text: &str,
    exit_layer: usize,
    apply_final_norm_at_exit: bool,
) -> Result<EchoEmbeddings> {
    let run = |area| echo_embed(weights, text, area, exit_layer, apply_final_norm_at_exit);
    Ok(EchoEmbeddings {
        none: run(EchoArea::None)?,
        a: run(EchoArea::A)?,
        b: run(EchoArea::B)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};

    #[test]
    fn duplication_layout() {
        let e = echo_duplicate(&[5, 6, 7], 16).unwrap();
        assert_eq!(e.ids, vec![5, 6, 7, 5, 6, 7]);
        assert_eq!(e.second, 3..6);
        assert!(echo_duplicate(&[1, 2, 3], 5).is_err());
        assert!(echo_duplicate(&[], 5).is_err());
    }

    #[test]
    fn area_shapes() {
        let b = area_mask(3, EchoArea::B);
        let a = area_mask(3, EchoArea::A);
        for q in 0..6 {
            for k in 0..6 {
                assert_eq!(b.is_masked(q, k), q >= 3 && k < 3);
                assert_eq!(a.is_masked(q, k), q >= 3 && k < q - 3);
            }
        }
        assert!(area_mask(1, EchoArea::A).rects.is_empty());
    }

    #[test]
    fn area_b_second_pass_equals_single_pass() {
        let w = init_weights(&ModelConfig::small()).unwrap();
        let ids = tokens::encode_with_bos("hello there");
        let n = ids.len();
        let echo = echo_duplicate(&ids, 1024).unwrap();
        let mask = area_mask(n, EchoArea::B);
        let masked = forward(
            &w,
            &echo.ids,
            ForwardOptions {
                region_mask: Some(&mask),
                ..Default::default()
            },
        )
        .unwrap()
        .hidden;
        let single = forward(&w, &ids, ForwardOptions::default()).unwrap().hidden;
        for layer in 0..=2 {
            let diff = masked.pre[layer].rows(n, n) - &single.pre[layer];
            assert!(diff.amax() < 1e-6, "layer {layer}: {}", diff.amax());
        }
        let unmasked = forward(&w, &echo.ids, ForwardOptions::default())
            .unwrap()
            .hidden;
        assert!((unmasked.output.rows(n, n) - &single.output).amax() > 1e-6);
    }

    #[test]
    fn single_token_area_a_is_a_no_op() {
        let w = init_weights(&ModelConfig::small()).unwrap();
        let echo = echo_duplicate(&[tokens::BOS], 16).unwrap();
        let mask = area_mask(1, EchoArea::A);
        let a = forward(
            &w,
            &echo.ids,
            ForwardOptions {
                region_mask: Some(&mask),
                ..Default::default()
            },
        )
        .unwrap();
        let none = forward(&w, &echo.ids, ForwardOptions::default()).unwrap();
        assert_eq!(a.hidden, none.hidden);
    }

    #[test]
    fn experiment_triples() {
        let w = init_weights(&ModelConfig::small()).unwrap();
        let t = region_mask_experiment(&w, "ten tokens", 2, false).unwrap();
        for v in [&t.none, &t.a, &t.b] {
            assert_eq!(v.len(), 8);
            assert!(v.iter().all(|x| x.is_finite()));
        }
        assert!((&t.none - &t.b).norm() > 1e-6);
    }
}
