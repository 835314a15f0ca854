//! Reference oracles for the acceptance suite. Nothing here calls into the
//! crates under test.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random lower-triangular matrix with unit row sums.
pub fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let row: Vec<f64> = (0..=j).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        for (i, v) in row.into_iter().enumerate() {
            m[(j, i)] = v / s;
        }
    }
    m
}

pub fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..256)).collect()
}

/// Short sentences ending in `.`, `!` or `?`, joined by single spaces.
pub fn random_text(rng: &mut ChaCha8Rng, sentences: usize) -> String {
    let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta"];
    let ends = [".", "!", "?"];
    (0..sentences)
        .map(|_| {
            let k = rng.random_range(1..5);
            let body: Vec<&str> = (0..k).map(|_| *words.choose(rng).unwrap()).collect();
            format!("{}{}", body.join(" "), ends.choose(rng).unwrap())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// NDCG@k evaluated term by term with natural-log discounts.
pub fn brute_ndcg(order: &[String], grades: &HashMap<String, u32>, k: usize) -> Option<f64> {
    let gain = |g: u32| 2f64.powf(g as f64) - 1.0;
    let discount = |pos: usize| (pos as f64 + 2.0).ln() / std::f64::consts::LN_2;
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, id)| gain(*grades.get(id).unwrap_or(&0)) / discount(pos))
        .sum();
    let mut ideal: Vec<u32> = grades.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(pos, g)| gain(g) / discount(pos))
        .sum();
    (idcg > 0.0).then(|| dcg / idcg)
}

/// `(pst, block_end)` positions for a layout of `prefix` tokens followed by
/// one `<B-PST>` per block and `<PST>_m S_m` per block.
pub fn expected_copy_positions(prefix: usize, boundaries: &[usize]) -> Vec<(usize, usize)> {
    let m = boundaries.len() - 1;
    (0..m)
        .map(|b| {
            (
                prefix + m + b + boundaries[b],
                prefix + m + b + boundaries[b + 1],
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_hand_values() {
        let order: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        let grades = HashMap::from([("y".to_string(), 1)]);
        let v = brute_ndcg(&order, &grades, 10).unwrap();
        assert!((v - 0.630_929_753_571_457_4).abs() < 1e-15);
    }

    #[test]
    fn copy_positions_by_hand() {
        // prefix 1, blocks of 2 and 3 tokens: [P, B0, B1, S0, t, t, S1, t, t, t]
        assert_eq!(expected_copy_positions(1, &[0, 2, 5]), vec![(3, 5), (6, 9)]);
    }
}
