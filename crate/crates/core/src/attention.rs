//! Text-to-visual cross-attention maps captured from a host model.
//!
//! Binary layout (little-endian):
//!
//! | field            | type                        |
//! |------------------|-----------------------------|
//! | magic            | `b"APVRAT1"` (7 bytes)      |
//! | n_layers         | u32                         |
//! | n_heads          | u32                         |
//! | q_len            | u32                         |
//! | k_len            | u32                         |
//! | values           | L × h × q_len × k_len f32   |
//! | map length       | u64 byte count (optional)   |
//! | chunk_frame_map  | UTF-8 JSON array (optional) |
//!
//! Values are layer-major, then head, then query row. The trailing map, when
//! present, gives the source frame of every visual token.

use std::path::Path;

use crate::codec::{put_f32s, Cursor};
use crate::error::{Error, Result};

pub const ATTENTION_MAGIC: &[u8; 7] = b"APVRAT1";
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    n_layers: usize,
    n_heads: usize,
    q_len: usize,
    k_len: usize,
    values: Vec<f32>,
    chunk_frame_map: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AttentionSummary {
    pub n_layers: usize,
    pub n_heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub has_frame_map: bool,
    pub frames: usize,
}

/// Result of [`AttentionTensor::restrict_to_frames`].
#[derive(Debug, Clone)]
pub struct Restricted {
    pub tensor: AttentionTensor,
    /// `original[i]` is the token index in the source tensor of kept token `i`.
    pub original: Vec<usize>,
    pub warnings: Vec<String>,
}

impl AttentionTensor {
    /// Validates shape and the softmax-row invariant.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        q_len: usize,
        k_len: usize,
        values: Vec<f32>,
        chunk_frame_map: Option<Vec<usize>>,
    ) -> Result<Self> {
        if n_layers == 0 || n_heads == 0 || q_len == 0 || k_len == 0 {
            return Err(Error::invalid(format!(
                "attention dims must all be >= 1, got L={n_layers} h={n_heads} d_q={q_len} d_v={k_len}"
            )));
        }
        let expected = n_layers
            .checked_mul(n_heads)
            .and_then(|x| x.checked_mul(q_len))
            .and_then(|x| x.checked_mul(k_len))
            .ok_or_else(|| Error::invalid("attention tensor size overflows"))?;
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} attention values, got {}",
                values.len()
            )));
        }
        if let Some(map) = &chunk_frame_map {
            if map.len() != k_len {
                return Err(Error::invalid(format!(
                    "chunk_frame_map has {} entries for {k_len} visual tokens",
                    map.len()
                )));
            }
        }
        let t = AttentionTensor {
            n_layers,
            n_heads,
            q_len,
            k_len,
            values,
            chunk_frame_map,
        };
        if let Some((row, msg)) = t.first_bad_row() {
            let (l, h, q) = t.row_coords(row);
            return Err(Error::invalid(format!(
                "layer {l} head {h} query {q}: {msg}"
            )));
        }
        Ok(t)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn chunk_frame_map(&self) -> Option<&[usize]> {
        self.chunk_frame_map.as_deref()
    }

    /// Attention of one query row over all visual tokens.
    pub fn row(&self, layer: usize, head: usize, q: usize) -> &[f32] {
        let start = ((layer * self.n_heads + head) * self.q_len + q) * self.k_len;
        &self.values[start..start + self.k_len]
    }

    pub fn summary(&self) -> AttentionSummary {
        let frames = self.chunk_frame_map.as_ref().map_or(0, |m| {
            let mut f = m.clone();
            f.sort_unstable();
            f.dedup();
            f.len()
        });
        AttentionSummary {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            q_len: self.q_len,
            k_len: self.k_len,
            has_frame_map: self.chunk_frame_map.is_some(),
            frames,
        }
    }

    fn row_coords(&self, row: usize) -> (usize, usize, usize) {
        let q = row % self.q_len;
        let h = (row / self.q_len) % self.n_heads;
        let l = row / (self.q_len * self.n_heads);
        (l, h, q)
    }

    fn first_bad_row(&self) -> Option<(usize, String)> {
        self.values
            .chunks_exact(self.k_len)
            .enumerate()
            .find_map(|(i, row)| {
                if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Some((i, format!("value {v} is not finite and >= 0")));
                }
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Some((i, format!("row sums to {sum}, expected 1 ± {ROW_SUM_TOLERANCE}")));
                }
                None
            })
    }

    /// Keeps only the visual tokens whose source frame is in `frames`, with
    /// every row renormalized over the kept tokens. A row with no mass on the
    /// kept tokens becomes uniform and is reported in `warnings`.
    pub fn restrict_to_frames(&self, frames: &[usize]) -> Result<Restricted> {
        let map = self
            .chunk_frame_map
            .as_ref()
            .ok_or_else(|| Error::invalid("attention tensor has no chunk_frame_map"))?;
        let keep: std::collections::BTreeSet<usize> = frames.iter().copied().collect();
        let original: Vec<usize> = (0..self.k_len).filter(|&j| keep.contains(&map[j])).collect();
        if original.is_empty() {
            return Err(Error::invalid("no visual tokens belong to the selected frames"));
        }
        let mut values = Vec::with_capacity(self.n_layers * self.n_heads * self.q_len * original.len());
        let mut empty_rows = 0usize;
        for row in self.values.chunks_exact(self.k_len) {
            let kept: Vec<f64> = original.iter().map(|&j| f64::from(row[j])).collect();
            let sum: f64 = kept.iter().sum();
            if sum > 0.0 {
                values.extend(kept.iter().map(|v| (v / sum) as f32));
            } else {
                empty_rows += 1;
                values.extend(std::iter::repeat_n(1.0 / original.len() as f32, original.len()));
            }
        }
        let mut warnings = Vec::new();
        if empty_rows > 0 {
            warnings.push(format!(
                "{empty_rows} attention rows had no mass on the selected frames; set to uniform"
            ));
        }
        let new_map = original.iter().map(|&j| map[j]).collect();
        let tensor = AttentionTensor {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            q_len: self.q_len,
            k_len: original.len(),
            values,
            chunk_frame_map: Some(new_map),
        };
        Ok(Restricted {
            tensor,
            original,
            warnings,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 16 + 4 * self.values.len());
        out.extend_from_slice(ATTENTION_MAGIC);
        for d in [self.n_layers, self.n_heads, self.q_len, self.k_len] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, &self.values);
        if let Some(map) = &self.chunk_frame_map {
            let json = serde_json::to_vec(map).expect("frame map serializes");
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        cur.expect_magic(ATTENTION_MAGIC)?;
        let header_at = cur.offset();
        let n_layers = cur.u32("n_layers")? as usize;
        let n_heads = cur.u32("n_heads")? as usize;
        let q_len = cur.u32("q_len")? as usize;
        let k_len = cur.u32("k_len")? as usize;
        if n_layers == 0 || n_heads == 0 || q_len == 0 || k_len == 0 {
            return Err(Error::format(
                header_at,
                format!("dims must all be >= 1, got L={n_layers} h={n_heads} d_q={q_len} d_v={k_len}"),
            ));
        }
        let count = n_layers
            .checked_mul(n_heads)
            .and_then(|x| x.checked_mul(q_len))
            .and_then(|x| x.checked_mul(k_len))
            .ok_or_else(|| Error::format(header_at, "attention tensor size overflows"))?;
        let values_at = cur.offset();
        let values = cur.f32_vec(count, "attention values")?;

        let chunk_frame_map = if cur.remaining() == 0 {
            None
        } else {
            let len = cur.u64("frame map length")?;
            let json_at = cur.offset();
            let len = usize::try_from(len)
                .map_err(|_| Error::format(json_at, "frame map length exceeds address space"))?;
            let json = cur.take(len, "frame map JSON")?;
            if cur.remaining() != 0 {
                return Err(Error::format(
                    cur.offset(),
                    format!("{} trailing bytes after frame map", cur.remaining()),
                ));
            }
            let map: Vec<usize> = serde_json::from_slice(json)
                .map_err(|e| Error::format(json_at, format!("frame map JSON: {e}")))?;
            if map.len() != k_len {
                return Err(Error::format(
                    json_at,
                    format!("frame map has {} entries for {k_len} visual tokens", map.len()),
                ));
            }
            Some(map)
        };

        let t = AttentionTensor {
            n_layers,
            n_heads,
            q_len,
            k_len,
            values,
            chunk_frame_map,
        };
        if let Some((row, msg)) = t.first_bad_row() {
            let (l, h, q) = t.row_coords(row);
            return Err(Error::format(
                values_at + (row * k_len * 4) as u64,
                format!("layer {l} head {h} query {q}: {msg}"),
            ));
        }
        Ok(t)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}
