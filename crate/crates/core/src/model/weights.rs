use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Mlp, Norm};
use super::rope::PositionalEncoding;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::tokens::{self, TokenId, EMBEDDING_ROWS};

/// Standard deviation of every randomly initialised projection and of
/// placeholder embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Norm,
    /// Query projection, `d x d`, applied as `q = W x`.
    pub query: DMatrix<f64>,
    /// Key projection, `d x d`.
    pub key: DMatrix<f64>,
    pub norm2: Norm,
    pub mlp: Mlp,
}

/// All learnable tensors. Immutable once constructed; share it by reference
/// across concurrent forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    embedding: DMatrix<f64>,
    layers: Vec<LayerWeights>,
    final_norm: Norm,
    positional: PositionalEncoding,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Seeded random weights: projections `N(0, 0.02^2)`, norm scales 1, shifts
/// and MLP biases 0.
pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.hidden_dim;
    let h = config.mlp_hidden;
    // Filling order is fixed: embedding, then per layer q, k, w_in, w_out.
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, seed::WEIGHTS));
    let embedding = gaussian_matrix(&mut rng, EMBEDDING_ROWS, d, INIT_STD);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            norm1: Norm::identity(d),
            query: gaussian_matrix(&mut rng, d, d, INIT_STD),
            key: gaussian_matrix(&mut rng, d, d, INIT_STD),
            norm2: Norm::identity(d),
            mlp: Mlp {
                w_in: gaussian_matrix(&mut rng, h, d, INIT_STD),
                b_in: DVector::zeros(h),
                w_out: gaussian_matrix(&mut rng, d, h, INIT_STD),
                b_out: DVector::zeros(d),
            },
        })
        .collect();
    ModelWeights::from_parts(config.clone(), embedding, layers, Norm::identity(d))
}

impl ModelWeights {
    pub fn from_parts(
        config: ModelConfig,
        embedding: DMatrix<f64>,
        layers: Vec<LayerWeights>,
        final_norm: Norm,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let h = config.mlp_hidden;
        let shape_err = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Error::DimensionMismatch(format!("{what}: got {got:?}, expected {want:?}"))
        };
        if embedding.shape() != (EMBEDDING_ROWS, d) {
            return Err(shape_err(
                "embedding",
                embedding.shape(),
                (EMBEDDING_ROWS, d),
            ));
        }
        if layers.len() != config.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "{} layers supplied for a {}-layer config",
                layers.len(),
                config.num_layers
            )));
        }
        let check_norm = |name: &str, n: &Norm| {
            if n.scale.len() != d || n.shift.len() != d {
                Err(shape_err(name, (n.scale.len(), n.shift.len()), (d, d)))
            } else {
                Ok(())
            }
        };
        for (l, layer) in layers.iter().enumerate() {
            check_norm(&format!("layers.{l}.norm1"), &layer.norm1)?;
            check_norm(&format!("layers.{l}.norm2"), &layer.norm2)?;
            for (name, m, want) in [
                ("query", &layer.query, (d, d)),
                ("key", &layer.key, (d, d)),
                ("mlp.w_in", &layer.mlp.w_in, (h, d)),
                ("mlp.w_out", &layer.mlp.w_out, (d, h)),
            ] {
                if m.shape() != want {
                    return Err(shape_err(&format!("layers.{l}.{name}"), m.shape(), want));
                }
            }
            if layer.mlp.b_in.len() != h || layer.mlp.b_out.len() != d {
                return Err(Error::DimensionMismatch(format!("layers.{l}.mlp biases")));
            }
        }
        check_norm("final_norm", &final_norm)?;
        let weights = Self {
            positional: PositionalEncoding::new(config.positional, d, config.rope_base),
            config,
            embedding,
            layers,
            final_norm,
        };
        if !weights
            .named_tensors()
            .iter()
            .all(|(_, _, data)| data.iter().all(|v| v.is_finite()))
        {
            return Err(Error::WeightFormat("non-finite weight".into()));
        }
        Ok(weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &DMatrix<f64> {
        &self.embedding
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &Norm {
        &self.final_norm
    }

    pub fn positional(&self) -> &PositionalEncoding {
        &self.positional
    }

    /// Returns a copy with every layer passed through `f`.
    pub fn map_layers(&self, f: impl Fn(usize, &LayerWeights) -> LayerWeights) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, w)| f(l, w))
            .collect();
        Self::from_parts(
            self.config.clone(),
            self.embedding.clone(),
            layers,
            self.final_norm.clone(),
        )
    }

    /// Input states `v^(0)` for a token sequence. Placeholder ids get
    /// seeded Gaussian vectors that depend only on `(placeholder_seed, id)`.
    pub fn embed(&self, ids: &[TokenId], placeholder_seed: u64) -> Result<DMatrix<f64>> {
        let d = self.config.hidden_dim;
        let mut out = DMatrix::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            if let Some(row) = tokens::embedding_row(id) {
                out.row_mut(i).copy_from(&self.embedding.row(row));
            } else if tokens::is_placeholder(id) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
                    placeholder_seed,
                    seed::PLACEHOLDERS,
                    id as u64,
                ));
                let normal = Normal::new(0.0, INIT_STD).expect("finite std");
                for c in 0..d {
                    out[(i, c)] = normal.sample(&mut rng);
                }
            } else {
                return Err(Error::UnknownToken(id));
            }
        }
        Ok(out)
    }

    /// Default placeholder seed when a caller supplies none.
    pub fn default_placeholder_seed(&self) -> u64 {
        seed::derive(self.config.seed, seed::PLACEHOLDERS)
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        fn mat(m: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
            // row-major
            let data = (0..m.nrows())
                .flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>())
                .collect();
            (vec![m.nrows(), m.ncols()], data)
        }
        fn vec1(v: &DVector<f64>) -> (Vec<usize>, Vec<f64>) {
            (vec![v.len()], v.iter().copied().collect())
        }
        let mut out = Vec::new();
        let mut push =
            |name: String, (shape, data): (Vec<usize>, Vec<f64>)| out.push((name, shape, data));
        push("embedding".into(), mat(&self.embedding));
        for (l, w) in self.layers.iter().enumerate() {
            push(format!("layers.{l}.norm1.scale"), vec1(&w.norm1.scale));
            push(format!("layers.{l}.norm1.shift"), vec1(&w.norm1.shift));
            push(format!("layers.{l}.query"), mat(&w.query));
            push(format!("layers.{l}.key"), mat(&w.key));
            push(format!("layers.{l}.norm2.scale"), vec1(&w.norm2.scale));
            push(format!("layers.{l}.norm2.shift"), vec1(&w.norm2.shift));
            push(format!("layers.{l}.mlp.w_in"), mat(&w.mlp.w_in));
            push(format!("layers.{l}.mlp.b_in"), vec1(&w.mlp.b_in));
            push(format!("layers.{l}.mlp.w_out"), mat(&w.mlp.w_out));
            push(format!("layers.{l}.mlp.b_out"), vec1(&w.mlp.b_out));
        }
        push("final_norm.scale".into(), vec1(&self.final_norm.scale));
        push("final_norm.shift".into(), vec1(&self.final_norm.shift));
        out
    }

    /// Writes `header_len: u32 LE | JSON header | f64 LE tensors in header order`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self.named_tensors();
        let header = WeightHeader {
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::WeightFormat("header larger than 4 GiB".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, data) in &tensors {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: WeightHeader = serde_json::from_slice(&json)?;
        header.config.validate()?;

        let mut tensors = std::collections::HashMap::new();
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(entry.name.clone(), (entry.shape.clone(), data));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::WeightFormat(format!("missing tensor {name}")))
        };
        let mut matrix = |name: &str| -> Result<DMatrix<f64>> {
            let (shape, data) = take(name)?;
            match shape[..] {
                [r, c] => Ok(DMatrix::from_row_slice(r, c, &data)),
                _ => Err(Error::WeightFormat(format!("{name}: expected 2-d shape"))),
            }
        };
        let embedding = matrix("embedding")?;
        let mut layers = Vec::with_capacity(header.config.num_layers);
        for l in 0..header.config.num_layers {
            let query = matrix(&format!("layers.{l}.query"))?;
            let key = matrix(&format!("layers.{l}.key"))?;
            let w_in = matrix(&format!("layers.{l}.mlp.w_in"))?;
            let w_out = matrix(&format!("layers.{l}.mlp.w_out"))?;
            layers.push((query, key, w_in, w_out));
        }
        let mut vector = |name: &str| -> Result<DVector<f64>> {
            let (shape, data) = take(name)?;
            match shape[..] {
                [_] => Ok(DVector::from_vec(data)),
                _ => Err(Error::WeightFormat(format!("{name}: expected 1-d shape"))),
            }
        };
        let mut built = Vec::with_capacity(layers.len());
        for (l, (query, key, w_in, w_out)) in layers.into_iter().enumerate() {
            built.push(LayerWeights {
                norm1: Norm {
                    scale: vector(&format!("layers.{l}.norm1.scale"))?,
                    shift: vector(&format!("layers.{l}.norm1.shift"))?,
                },
                query,
                key,
                norm2: Norm {
                    scale: vector(&format!("layers.{l}.norm2.scale"))?,
                    shift: vector(&format!("layers.{l}.norm2.shift"))?,
                },
                mlp: Mlp {
                    w_in,
                    b_in: vector(&format!("layers.{l}.mlp.b_in"))?,
                    w_out,
                    b_out: vector(&format!("layers.{l}.mlp.b_out"))?,
                },
            });
        }
        let final_norm = Norm {
            scale: vector("final_norm.scale")?,
            shift: vector("final_norm.shift")?,
        };
        Self::from_parts(header.config, embedding, built, final_norm)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}
