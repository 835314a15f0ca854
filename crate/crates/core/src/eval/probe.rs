use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::cosine;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{embed_last, embed_mean, forward, ForwardOptions, ModelWeights};
use crate::seed;
use crate::tokens;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Sentences per concatenation.
    pub lengths: Vec<usize>,
    /// Concatenations built from each group.
    pub per_group: usize,
    pub seed: u64,
    pub exit_layer: usize,
}

/// Mean pairwise cosine within and across groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReadoutStats {
    pub within_mean: Option<f64>,
    pub cross_mean: Option<f64>,
    pub within_pairs: usize,
    pub cross_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLength {
    pub length: usize,
    /// Group index of each concatenation.
    pub labels: Vec<usize>,
    pub texts: Vec<String>,
    pub mean_embeddings: Vec<DVector<f64>>,
    pub last_embeddings: Vec<DVector<f64>>,
    pub mean: ReadoutStats,
    pub last: ReadoutStats,
}

pub fn group_cosine_stats(labels: &[usize], embeddings: &[DVector<f64>]) -> Result<ReadoutStats> {
    if labels.len() != embeddings.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.len()
        )));
    }
    let (mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for a in 0..embeddings.len() {
        for b in a + 1..embeddings.len() {
            let c = cosine(&embeddings[a], &embeddings[b]);
            let slot = if labels[a] == labels[b] {
                &mut within
            } else {
                &mut cross
            };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    let mean = |(s, k): (f64, usize)| (k > 0).then(|| s / k as f64);
    Ok(ReadoutStats {
        within_mean: mean(within),
        cross_mean: mean(cross),
        within_pairs: within.1,
        cross_pairs: cross.1,
    })
}

/// Builds concatenations of sentences drawn from each group, embeds them with
/// mean and last readouts, and compares cosine similarity within and across
/// groups for each target length.
pub fn long_concat_probe(
    weights: &ModelWeights,
    groups: &[Vec<String>],
    cfg: &ProbeConfig,
    exec: Execution,
) -> Result<Vec<ProbeLength>> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidConfig(
            "probe needs nonempty sentence groups".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.lengths.len());
    for &length in &cfg.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
            cfg.seed,
            seed::EXPERIMENT,
            length as u64,
        ));
        let mut labels = Vec::new();
        let mut texts = Vec::new();
        for (g, pool) in groups.iter().enumerate() {
            for _ in 0..cfg.per_group {
                let parts: Vec<&str> = (0..length)
                    .map(|_| pool[rng.random_range(0..pool.len())].as_str())
                    .collect();
                labels.push(g);
                texts.push(parts.join(" "));
            }
        }
        let pairs = exec::try_map_slice(&texts, exec, |text| {
            let ids = tokens::encode_with_bos(text.trim());
            let h = forward(weights, &ids, ForwardOptions::default())?.hidden;
            let all: Vec<usize> = (0..ids.len()).collect();
            Ok::<_, Error>((
                embed_mean(&h, cfg.exit_layer, &all, false)?,
                embed_last(&h, cfg.exit_layer, false)?,
            ))
        })?;
        let (mean_embeddings, last_embeddings): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        out.push(ProbeLength {
            length,
            mean: group_cosine_stats(&labels, &mean_embeddings)?,
            last: group_cosine_stats(&labels, &last_embeddings)?,
            labels,
            texts,
            mean_embeddings,
            last_embeddings,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};

    fn pools() -> Vec<Vec<String>> {
        vec![
            vec!["A cat sleeps.".into(), "The dog barks.".into()],
            vec!["Markets fell today.".into(), "Stocks rose sharply.".into()],
        ]
    }

    fn cfg(lengths: Vec<usize>) -> ProbeConfig {
        ProbeConfig {
            lengths,
            per_group: 3,
            seed: 1,
            exit_layer: 2,
        }
    }

    #[test]
    fn single_sentence_length_has_both_readouts() {
        let w = init_weights(&ModelConfig::small()).unwrap();
        let r = long_concat_probe(&w, &pools(), &cfg(vec![1]), Execution::Sequential).unwrap();
        assert_eq!(r[0].mean_embeddings.len(), 6);
        assert!(r[0].mean.within_mean.is_some() && r[0].last.cross_mean.is_some());
        assert_eq!(r[0].mean.within_pairs, 6);
        assert_eq!(r[0].mean.cross_pairs, 9);
    }

    #[test]
    fn identical_concatenations_are_self_similar() {
        let w = init_weights(&ModelConfig::small()).unwrap();
        let groups = vec![
            vec!["Only this.".to_string()],
            vec!["Something else here.".to_string()],
        ];
        let r = long_concat_probe(&w, &groups, &cfg(vec![3]), Execution::Sequential).unwrap();
        assert!((r[0].mean.within_mean.unwrap() - 1.0).abs() < 1e-12);
        assert!((r[0].last.within_mean.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_recompute_from_dump() {
        let w = init_weights(&ModelConfig::small()).unwrap();
        let r = long_concat_probe(&w, &pools(), &cfg(vec![2, 4]), Execution::Parallel).unwrap();
        for p in &r {
            assert_eq!(
                group_cosine_stats(&p.labels, &p.mean_embeddings).unwrap(),
                p.mean
            );
            assert_eq!(
                group_cosine_stats(&p.labels, &p.last_embeddings).unwrap(),
                p.last
            );
        }
        let seq = long_concat_probe(&w, &pools(), &cfg(vec![2, 4]), Execution::Sequential).unwrap();
        assert_eq!(seq, r);
    }

    #[test]
    fn empty_pool_rejected() {
        let w = init_weights(&ModelConfig::small()).unwrap();
        assert!(long_concat_probe(&w, &[], &cfg(vec![1]), Execution::Sequential).is_err());
        assert!(long_concat_probe(&w, &[vec![]], &cfg(vec![1]), Execution::Sequential).is_err());
    }
}
