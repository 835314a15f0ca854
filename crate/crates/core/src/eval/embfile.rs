use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub ids: Vec<String>,
    pub dim: usize,
    pub dtype: String,
    pub order: String,
}

/// One embedding per id.
///
/// On disk: `u32` little-endian header length, the JSON header, then
/// `ids.len() * dim` little-endian `f64` values row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub dim: usize,
    pub rows: Vec<DVector<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<DVector<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("rows differ in length".into()));
        }
        Ok(Self { ids, dim, rows })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&EmbeddingHeader {
            ids: self.ids.clone(),
            dim: self.dim,
            dtype: "f64".into(),
            order: "row-major".into(),
        })?;
        let len = u32::try_from(header.len())
            .map_err(|_| Error::WeightFormat("embedding header too large".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&header)?;
        for row in &self.rows {
            for v in row.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: EmbeddingHeader = serde_json::from_slice(&header)?;
        if h.dtype != "f64" || h.order != "row-major" {
            return Err(Error::WeightFormat(format!(
                "unsupported layout {} / {}",
                h.dtype, h.order
            )));
        }
        let mut rows = Vec::with_capacity(h.ids.len());
        let mut buf = [0u8; 8];
        for _ in 0..h.ids.len() {
            let mut row = DVector::zeros(h.dim);
            for v in row.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            rows.push(row);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(Self {
            ids: h.ids,
            dim: h.dim,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            vec![
                DVector::from_vec(vec![1.0, -2.5]),
                DVector::from_vec(vec![f64::MIN_POSITIVE, 3.0]),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(EmbeddingMatrix::read_from(buf.as_slice()).unwrap(), m);
        let hlen = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(buf.len(), 4 + hlen + 2 * 2 * 8);
        assert!(EmbeddingMatrix::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            vec![DVector::zeros(2), DVector::zeros(3)]
        )
        .is_err());
    }
}
