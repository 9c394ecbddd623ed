//! Pivot token retrieval.
//!
//! Per layer, attention is summed over query rows to give each visual token a
//! score per head. The token axis is cut into `W` contiguous chunks; each
//! chunk's keep ratio is the product of its mass relative to the heaviest
//! chunk and the square root of its share of significant tokens. Tokens are
//! then ranked inside each chunk, either by the head-summed score or by a
//! soft vote (sum of per-head softmaxes), and the top `round(γ_w·L_w)` kept.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::scoring::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    /// Sum over heads of each head's softmax over the scored tokens.
    #[default]
    HeadSoftVote,
    /// Plain sum over heads.
    HeadSum,
}

/// Where `max(a)` in the significance threshold is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceScope {
    #[default]
    Layer,
    Chunk,
}

/// Which tokens each head's soft-vote softmax runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftVoteScope {
    #[default]
    Chunk,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtrConfig {
    pub n_chunks: usize,
    pub significance_fraction: f64,
    pub voting: Voting,
    pub min_tokens_per_chunk: usize,
    pub significance_scope: SignificanceScope,
    pub soft_vote_scope: SoftVoteScope,
    /// When set, every layer's `γ_w` are scaled by one common factor (capped
    /// at 1) so the layer keeps roughly this fraction of its tokens.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_ratio: Option<f64>,
    /// Layers to process; empty means all.
    pub layers: Vec<usize>,
}

impl Default for PtrConfig {
    fn default() -> Self {
        PtrConfig {
            n_chunks: 8,
            significance_fraction: 0.01,
            voting: Voting::HeadSoftVote,
            min_tokens_per_chunk: 1,
            significance_scope: SignificanceScope::Layer,
            soft_vote_scope: SoftVoteScope::Chunk,
            target_ratio: None,
            layers: Vec::new(),
        }
    }
}

impl PtrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chunks == 0 {
            return Err(Error::invalid("n_chunks must be >= 1"));
        }
        if !(self.significance_fraction.is_finite() && self.significance_fraction >= 0.0) {
            return Err(Error::invalid("significance_fraction must be finite and >= 0"));
        }
        if let Some(r) = self.target_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("target_ratio must be in (0,1], got {r}")));
            }
        }
        Ok(())
    }
}

/// Selection ratios of one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRatio {
    pub start: usize,
    /// `L_w`.
    pub len: usize,
    pub sum: f64,
    /// Tokens above the significance threshold.
    pub significant: usize,
    pub eta: f64,
    pub rho: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRatios {
    pub chunks: Vec<ChunkRatio>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    #[serde(flatten)]
    pub ratio: ChunkRatio,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    /// Strictly increasing visual-token indices, shared by the K and V caches.
    pub retained: Vec<usize>,
    pub retained_count: usize,
    pub total: usize,
    pub ratio: f64,
    pub chunks: Vec<ChunkReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSelection {
    pub layers: Vec<LayerSelection>,
}

impl TokenSelection {
    pub fn warnings(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.warnings.iter().map(move |w| format!("layer {}: {w}", l.layer)))
            .collect()
    }

    /// Rewrites token indices through `original` (as returned by
    /// [`AttentionTensor::restrict_to_frames`]), keeping `total` as the
    /// restricted count.
    pub fn remap(&mut self, original: &[usize]) {
        for layer in &mut self.layers {
            for idx in &mut layer.retained {
                *idx = original[*idx];
            }
            for c in &mut layer.chunks {
                c.ratio.start = original[c.ratio.start];
            }
        }
    }
}

/// `W` contiguous ranges covering `0..k_len`, sizes differing by at most one
/// (the first `k_len % W` chunks are the longer ones).
pub fn chunk_ranges(k_len: usize, n_chunks: usize) -> Vec<Range<usize>> {
    let base = k_len / n_chunks;
    let extra = k_len % n_chunks;
    let mut start = 0;
    (0..n_chunks)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Per-chunk `η`, `ρ`, `γ` for a head-summed score vector.
pub fn chunk_ratios(
    a: &[f64],
    n_chunks: usize,
    significance_fraction: f64,
    scope: SignificanceScope,
) -> Result<ChunkRatios> {
    if n_chunks == 0 || n_chunks > a.len() {
        return Err(Error::invalid(format!(
            "need 1 <= W <= d_v, got W={n_chunks} d_v={}",
            a.len()
        )));
    }
    if let Some(v) = a.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!("token score {v} is not finite and >= 0")));
    }
    let ranges = chunk_ranges(a.len(), n_chunks);
    let global_max = a.iter().copied().fold(0.0, f64::max);
    let sums: Vec<f64> = ranges.iter().map(|r| a[r.clone()].iter().sum()).collect();
    // chunks one token short are compared at full length so uniform mass gives η = 1
    let longest = ranges[0].len() as f64;
    let mass: Vec<f64> = ranges
        .iter()
        .zip(&sums)
        .map(|(r, s)| s * (longest / r.len() as f64))
        .collect();
    let max_mass = mass.iter().copied().fold(0.0, f64::max);
    let warning = (max_mass <= 0.0)
        .then(|| "all attention scores are zero; using uniform chunk ratios".to_string());

    let chunks = ranges
        .iter()
        .zip(sums.iter().zip(&mass))
        .map(|(r, (&sum, &m))| {
            let eta = if max_mass > 0.0 { m / max_mass } else { 1.0 / n_chunks as f64 };
            let peak = match scope {
                SignificanceScope::Layer => global_max,
                SignificanceScope::Chunk => a[r.clone()].iter().copied().fold(0.0, f64::max),
            };
            let threshold = significance_fraction * peak;
            let significant = a[r.clone()].iter().filter(|&&v| v > threshold).count();
            let rho = (significant as f64 / r.len() as f64).sqrt().min(1.0);
            ChunkRatio {
                start: r.start,
                len: r.len(),
                sum,
                significant,
                eta,
                rho,
                gamma: rho * eta,
            }
        })
        .collect();
    Ok(ChunkRatios { chunks, warning })
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Tokens kept from a chunk: `round(γ·L)`, at least `min_tokens`, at most `L`.
pub fn chunk_budget(gamma: f64, len: usize, min_tokens: usize) -> usize {
    round_half_up(gamma * len as f64).max(min_tokens).min(len)
}

/// Positions of the `budget` largest scores, ascending. Ties go to the lower
/// position.
pub fn top_indices(scores: &[f64], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(budget);
    order.sort_unstable();
    order
}

/// Sum over heads, token by token.
pub fn head_sum(a: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; a.first().map_or(0, Vec::len)];
    for head in a {
        for (o, v) in out.iter_mut().zip(head) {
            *o += v;
        }
    }
    out
}

/// Ranking scores used to pick tokens inside each chunk.
pub fn voting_scores(
    a: &[Vec<f64>],
    ranges: &[Range<usize>],
    voting: Voting,
    scope: SoftVoteScope,
) -> Vec<f64> {
    match voting {
        Voting::HeadSum => head_sum(a),
        Voting::HeadSoftVote => {
            let d_v = a.first().map_or(0, Vec::len);
            let mut out = vec![0.0; d_v];
            for head in a {
                match scope {
                    SoftVoteScope::Layer => {
                        for (o, p) in out.iter_mut().zip(softmax(head)) {
                            *o += p;
                        }
                    }
                    SoftVoteScope::Chunk => {
                        for r in ranges {
                            for (o, p) in out[r.clone()].iter_mut().zip(softmax(&head[r.clone()])) {
                                *o += p;
                            }
                        }
                    }
                }
            }
            out
        }
    }
}

/// Keeps the top `budgets[w]` tokens of every chunk by `scores`. Returned
/// indices are global and ascending.
pub fn select_in_chunks(scores: &[f64], ranges: &[Range<usize>], budgets: &[usize]) -> Vec<usize> {
    ranges
        .iter()
        .zip(budgets)
        .flat_map(|(r, &b)| {
            top_indices(&scores[r.clone()], b)
                .into_iter()
                .map(move |i| r.start + i)
        })
        .collect()
}

/// Token selection for one layer given per-head scores `a` (`h × d_v`).
pub fn select_layer_tokens(a: &[Vec<f64>], cfg: &PtrConfig) -> Result<LayerSelection> {
    cfg.validate()?;
    let d_v = a.first().map_or(0, Vec::len);
    if d_v == 0 {
        return Err(Error::invalid("layer has no heads or no visual tokens"));
    }
    if let Some(bad) = a.iter().position(|h| h.len() != d_v) {
        return Err(Error::invalid(format!(
            "head {bad} has {} scores, expected {d_v}",
            a[bad].len()
        )));
    }
    let mut warnings = Vec::new();
    let w = if cfg.n_chunks > d_v {
        warnings.push(format!("n_chunks {} exceeds {d_v} tokens; clamped", cfg.n_chunks));
        d_v
    } else {
        cfg.n_chunks
    };

    let summed = head_sum(a);
    let mut ratios = chunk_ratios(&summed, w, cfg.significance_fraction, cfg.significance_scope)?;
    warnings.extend(ratios.warning.take());
    if let Some(target) = cfg.target_ratio {
        let kept: f64 = ratios.chunks.iter().map(|c| c.gamma * c.len as f64).sum();
        if kept > 0.0 {
            let scale = target * d_v as f64 / kept;
            for c in &mut ratios.chunks {
                c.gamma = (c.gamma * scale).min(1.0);
            }
        }
    }

    let ranges = chunk_ranges(d_v, w);
    let budgets: Vec<usize> = ratios
        .chunks
        .iter()
        .map(|c| chunk_budget(c.gamma, c.len, cfg.min_tokens_per_chunk))
        .collect();
    let scores = voting_scores(a, &ranges, cfg.voting, cfg.soft_vote_scope);
    let retained = select_in_chunks(&scores, &ranges, &budgets);
    let chunks = ratios
        .chunks
        .into_iter()
        .zip(&budgets)
        .map(|(ratio, &retained)| ChunkReport { ratio, retained })
        .collect();
    Ok(LayerSelection {
        layer: 0,
        retained_count: retained.len(),
        total: d_v,
        ratio: retained.len() as f64 / d_v as f64,
        retained,
        chunks,
        warnings,
    })
}

/// Per-head token scores of one layer: attention summed over query rows.
pub fn aggregate_attention(tensor: &AttentionTensor, layer: usize) -> Result<Vec<Vec<f64>>> {
    if layer >= tensor.n_layers() {
        return Err(Error::Index {
            index: layer,
            len: tensor.n_layers(),
        });
    }
    Ok((0..tensor.n_heads())
        .map(|h| {
            let mut acc = vec![0.0; tensor.k_len()];
            for q in 0..tensor.q_len() {
                for (s, &v) in acc.iter_mut().zip(tensor.row(layer, h, q)) {
                    *s += f64::from(v);
                }
            }
            acc
        })
        .collect())
}

/// Single-layer, single-head attention `softmax(q·kᵀ/√d)` from raw query
/// (`d_q × d`) and key (`d_v × d`) states.
pub fn compute_cross_attention(q: &[Vec<f64>], k: &[Vec<f64>]) -> Result<AttentionTensor> {
    let d = q.first().map_or(0, Vec::len);
    if q.is_empty() || k.is_empty() || d == 0 {
        return Err(Error::invalid("query and key states must be non-empty"));
    }
    if q.iter().chain(k).any(|row| row.len() != d) {
        return Err(Error::invalid(format!("all query and key rows must have dimension {d}")));
    }
    let scale = (d as f64).sqrt();
    let mut values = Vec::with_capacity(q.len() * k.len());
    for qr in q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        values.extend(softmax(&logits).into_iter().map(|p| p as f32));
    }
    AttentionTensor::new(1, 1, q.len(), k.len(), values, None)
}

/// Selects pivot tokens in every configured layer. Layers run in parallel on
/// the current rayon pool; results are ordered by layer.
pub fn run_ptr(tensor: &AttentionTensor, cfg: &PtrConfig) -> Result<TokenSelection> {
    cfg.validate()?;
    let layers: Vec<usize> = if cfg.layers.is_empty() {
        (0..tensor.n_layers()).collect()
    } else {
        let mut l = cfg.layers.clone();
        l.sort_unstable();
        l.dedup();
        l
    };
    let layers = layers
        .par_iter()
        .map(|&l| {
            let a = aggregate_attention(tensor, l)?;
            let mut sel = select_layer_tokens(&a, cfg)?;
            sel.layer = l;
            Ok(sel)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSelection { layers })
}
