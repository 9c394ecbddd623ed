//! Frame scoring kernels over a [`FeatureBundle`].
//!
//! * [`clip_scores`]: softmax of temperature-scaled image/text cosine
//!   similarity over the scored index set.
//! * [`detection_scores`]: softmax of each frame's best detection logit plus
//!   weighted bonuses for satisfied relation triplets.
//! * [`fuse_scores`]: `(1 - λ)·clip + λ·gd`.
//! * [`temporal_diffusion`]: spreads a frame score to its neighbors with
//!   `1 / (1 + distance)` decay under max-merge.
//!
//! All softmaxes are taken over the index set passed in, so a caller decides
//! the normalization domain (one iteration's samples, or every visited frame).

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::board::FrameScoreBoard;
use crate::bundle::{DetectionRecord, FeatureBundle};
use crate::error::{Error, Result};
use crate::query::{ExpandedQuery, RelationTriplet, RelationType};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationWeights {
    pub spatial: f64,
    pub time: f64,
    pub attribute: f64,
    pub causal: f64,
}

impl Default for RelationWeights {
    fn default() -> Self {
        RelationWeights {
            spatial: 0.25,
            time: 0.25,
            attribute: 0.25,
            causal: 0.25,
        }
    }
}

impl RelationWeights {
    pub fn get(&self, r: RelationType) -> f64 {
        match r {
            RelationType::Spatial => self.spatial,
            RelationType::Time => self.time,
            RelationType::Attribute => self.attribute,
            RelationType::Causal => self.causal,
        }
    }
}

/// Which frames a PFR iteration normalizes its softmaxes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxScope {
    /// Only the frames sampled in the current iteration.
    #[default]
    Iteration,
    /// Every frame visited so far, including the current samples.
    Visited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Softmax temperature applied to cosine similarity.
    pub tau: f64,
    /// Weight of the detection score in the fused score.
    pub lambda: f64,
    pub relation_weights: RelationWeights,
    /// Temporal diffusion half-width, in frames.
    pub diffusion_window: usize,
    /// Maximum gap, in seconds, for time and causal relations.
    pub time_relation_horizon: f64,
    /// Minimum box IoU for an attribute relation.
    pub attribute_iou: f64,
    /// Logit assigned to frames without any detection.
    pub empty_frame_logit: f64,
    pub softmax_scope: SoftmaxScope,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            tau: 100.0,
            lambda: 0.5,
            relation_weights: RelationWeights::default(),
            diffusion_window: 4,
            time_relation_horizon: 10.0,
            attribute_iou: 0.3,
            empty_frame_logit: -20.0,
            softmax_scope: SoftmaxScope::Iteration,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        let w = self.relation_weights;
        if [w.spatial, w.time, w.attribute, w.causal]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid("relation weights must be finite and >= 0"));
        }
        if !(self.time_relation_horizon.is_finite() && self.time_relation_horizon >= 0.0) {
            return Err(Error::invalid("time_relation_horizon must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.attribute_iou) {
            return Err(Error::invalid("attribute_iou must be in [0,1]"));
        }
        if !self.empty_frame_logit.is_finite() {
            return Err(Error::invalid("empty_frame_logit must be finite"));
        }
        Ok(())
    }
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_indices(bundle: &FeatureBundle, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid("empty frame index set"));
    }
    let n = bundle.n_frames();
    let mut seen = BTreeSet::new();
    for &t in indices {
        if t >= n {
            return Err(Error::Index { index: t, len: n });
        }
        if !seen.insert(t) {
            return Err(Error::invalid(format!("duplicate frame index {t}")));
        }
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Semantic similarity scores for `indices`, a distribution over that set.
pub fn clip_scores(
    bundle: &FeatureBundle,
    indices: &[usize],
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    check_indices(bundle, indices)?;
    let text = bundle.text_embedding();
    let logits: Vec<f64> = indices
        .par_iter()
        .map(|&t| cfg.tau * dot(bundle.frame_embedding(t), text))
        .collect();
    Ok(softmax(&logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScores {
    /// Final `s^GD` per index.
    pub scores: Vec<f64>,
    /// `s^o`, the normalized best-detection score, per index.
    pub object_scores: Vec<f64>,
    /// Sum of relation bonuses credited per index.
    pub bonuses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Best logit among `dets` whose phrase passes `keep`.
fn best_logit(dets: &[DetectionRecord], keep: impl Fn(&str) -> bool) -> Option<f64> {
    dets.iter()
        .filter(|d| keep(&d.phrase))
        .map(|d| d.logit)
        .fold(None, |acc, l| Some(acc.map_or(l, |a: f64| a.max(l))))
}

/// Spatial scores for `indices`, with relation bonuses from `query`.
///
/// When the query names objects, only detections of those phrases count
/// toward the best-detection score. A relation participant's confidence at a
/// frame is the softmax, over the index set, of that phrase's best logit.
pub fn detection_scores(
    bundle: &FeatureBundle,
    indices: &[usize],
    query: &ExpandedQuery,
    cfg: &ScoringConfig,
) -> Result<DetectionScores> {
    check_indices(bundle, indices)?;
    let mut warnings = Vec::new();
    let objects = query.all_objects();
    let floor = cfg.empty_frame_logit;

    let max_logits: Vec<f64> = indices
        .par_iter()
        .map(|&t| {
            let dets = bundle.detections(t);
            let best = if objects.is_empty() {
                best_logit(dets, |_| true)
            } else {
                best_logit(dets, |p| objects.contains(&p))
            };
            best.unwrap_or(floor)
        })
        .collect();
    if !objects.is_empty() && max_logits.iter().all(|&l| l == floor) {
        let any_detections = indices.iter().any(|&t| !bundle.detections(t).is_empty());
        if any_detections {
            warnings.push("no detection phrase matches a query object".to_string());
        }
    }
    let object_scores = softmax(&max_logits);

    let mut bonuses = vec![0.0; indices.len()];
    if !query.relations.is_empty() {
        let mut present: BTreeSet<&str> = BTreeSet::new();
        for t in 0..bundle.n_frames() {
            present.extend(bundle.detections(t).iter().map(|d| d.phrase.as_str()));
        }
        let mut confidence: HashMap<&str, Vec<Option<f64>>> = HashMap::new();
        for rel in &query.relations {
            let missing: Vec<&str> = [rel.subject.as_str(), rel.object.as_str()]
                .into_iter()
                .filter(|p| !present.contains(p))
                .collect();
            if !missing.is_empty() {
                warnings.push(format!(
                    "relation ({}; {}; {}): no detection of {}",
                    rel.subject,
                    rel.relation,
                    rel.object,
                    missing.join(", ")
                ));
                continue;
            }
            for p in [rel.subject.as_str(), rel.object.as_str()] {
                confidence
                    .entry(p)
                    .or_insert_with(|| phrase_confidence(bundle, indices, p, floor));
            }
            let weight = cfg.relation_weights.get(rel.relation);
            let credit = relation_credit(bundle, indices, rel, &confidence, cfg);
            for (b, c) in bonuses.iter_mut().zip(credit) {
                *b += weight * c;
            }
        }
    }

    let scores = object_scores
        .iter()
        .zip(&bonuses)
        .map(|(s, b)| (s + b).max(0.0))
        .collect();
    Ok(DetectionScores {
        scores,
        object_scores,
        bonuses,
        warnings,
    })
}

/// Per-index normalized confidence of `phrase`; `None` where it is not
/// detected.
fn phrase_confidence(
    bundle: &FeatureBundle,
    indices: &[usize],
    phrase: &str,
    floor: f64,
) -> Vec<Option<f64>> {
    let best: Vec<Option<f64>> = indices
        .iter()
        .map(|&t| best_logit(bundle.detections(t), |p| p == phrase))
        .collect();
    let logits: Vec<f64> = best.iter().map(|b| b.unwrap_or(floor)).collect();
    softmax(&logits)
        .into_iter()
        .zip(&best)
        .map(|(c, b)| b.map(|_| c))
        .collect()
}

/// Geometric-mean credit `s_r` per index for one satisfied triplet, zero where
/// the triplet does not complete.
fn relation_credit(
    bundle: &FeatureBundle,
    indices: &[usize],
    rel: &RelationTriplet,
    confidence: &HashMap<&str, Vec<Option<f64>>>,
    cfg: &ScoringConfig,
) -> Vec<f64> {
    let subj = &confidence[rel.subject.as_str()];
    let obj = &confidence[rel.object.as_str()];
    match rel.relation {
        RelationType::Spatial | RelationType::Attribute => (0..indices.len())
            .map(|k| match (subj[k], obj[k]) {
                (Some(cs), Some(co)) => {
                    if rel.relation == RelationType::Attribute
                        && !boxes_overlap(bundle.detections(indices[k]), rel, cfg.attribute_iou)
                    {
                        0.0
                    } else {
                        (cs * co).sqrt()
                    }
                }
                _ => 0.0,
            })
            .collect(),
        RelationType::Time | RelationType::Causal => {
            // Subject strictly earlier than the object frame, within the horizon.
            let horizon = cfg.time_relation_horizon * f64::from(bundle.fps());
            let mut subj_frames: Vec<(usize, f64)> = indices
                .iter()
                .zip(subj)
                .filter_map(|(&t, c)| c.map(|c| (t, c)))
                .collect();
            subj_frames.sort_by_key(|(t, _)| *t);
            (0..indices.len())
                .map(|k| {
                    let Some(co) = obj[k] else { return 0.0 };
                    let t = indices[k];
                    let lo = subj_frames.partition_point(|(u, _)| (*u as f64) < t as f64 - horizon);
                    let hi = subj_frames.partition_point(|(u, _)| *u < t);
                    subj_frames[lo..hi]
                        .iter()
                        .map(|(_, cs)| *cs)
                        .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))))
                        .map_or(0.0, |cs| (cs * co).sqrt())
                })
                .collect()
        }
    }
}

fn boxes_overlap(dets: &[DetectionRecord], rel: &RelationTriplet, threshold: f64) -> bool {
    dets.iter().filter(|d| d.phrase == rel.subject).any(|s| {
        dets.iter()
            .filter(|d| d.phrase == rel.object)
            .any(|o| s.iou(o) >= threshold)
    })
}

/// `(1 - λ)·clip + λ·gd`, element-wise.
pub fn fuse_scores(clip: &[f64], gd: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if clip.len() != gd.len() {
        return Err(Error::invalid(format!(
            "score lists differ in length: {} vs {}",
            clip.len(),
            gd.len()
        )));
    }
    Ok(clip
        .iter()
        .zip(gd)
        .map(|(c, g)| (1.0 - lambda) * c + lambda * g)
        .collect())
}

/// Raises `board[i]` to at least `score / (1 + |i - t|)` for every `i` within
/// `window` frames of `t`.
pub fn temporal_diffusion(
    board: &mut FrameScoreBoard,
    t: usize,
    score: f64,
    window: usize,
) -> Result<()> {
    let n = board.n_frames();
    if t >= n {
        return Err(Error::Index { index: t, len: n });
    }
    if !(score.is_finite() && score >= 0.0) {
        return Err(Error::invalid(format!("diffused score {score} must be finite and >= 0")));
    }
    let lo = t.saturating_sub(window);
    let hi = t.saturating_add(window).min(n - 1);
    for i in lo..=hi {
        board.raise(i, score / (1 + i.abs_diff(t)) as f64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::DetectionRecord;

    fn unit(v: &[f64]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    fn bundle_with(
        rows: Vec<Vec<f32>>,
        text: Vec<f32>,
        dets: Vec<Vec<DetectionRecord>>,
    ) -> FeatureBundle {
        let dim = text.len();
        FeatureBundle::new(2.0, dim, rows.concat(), text, dets).unwrap()
    }

    #[test]
    fn softmax_is_symmetric_for_equal_embeddings() {
        let row = unit(&[1.0, 2.0, 3.0]);
        let b = bundle_with(vec![row.clone(); 5], vec![0.3, 0.1, 0.2], vec![vec![]; 5]);
        let s = clip_scores(&b, &[0, 2, 4], &ScoringConfig::default()).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_frame_clip_scores() {
        // dot products 0.5 and 0.3 against text = e0.
        let r0 = vec![0.5, (0.75f64).sqrt() as f32];
        let r1 = vec![0.3, (0.91f64).sqrt() as f32];
        let b = bundle_with(vec![r0, r1], vec![1.0, 0.0], vec![vec![], vec![]]);
        let s = clip_scores(&b, &[0, 1], &ScoringConfig::default()).unwrap();
        // 1/(1+e^-20) and e^-20/(1+e^-20), with f32 rounding of the inputs
        assert!((s[0] - 0.999_999_997_938_846).abs() < 1e-8);
        assert!((s[1] - 2.061_153_6e-9).abs() < 2e-10);
    }

    #[test]
    fn clip_errors() {
        let b = bundle_with(vec![vec![1.0, 0.0]], vec![1.0, 0.0], vec![vec![]]);
        let cfg = ScoringConfig::default();
        assert!(matches!(clip_scores(&b, &[], &cfg), Err(Error::InvalidInput(_))));
        assert!(matches!(
            clip_scores(&b, &[3], &cfg),
            Err(Error::Index { index: 3, len: 1 })
        ));
    }

    #[test]
    fn no_detections_is_uniform() {
        let b = bundle_with(vec![vec![1.0, 0.0]; 4], vec![1.0, 0.0], vec![vec![]; 4]);
        let d = detection_scores(&b, &[0, 1, 2, 3], &ExpandedQuery::default(), &ScoringConfig::default())
            .unwrap();
        assert!(d.scores.iter().all(|s| (s - 0.25).abs() < 1e-12));
        assert!(d.bonuses.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn single_detection_dominates() {
        let mut dets = vec![vec![]; 4];
        dets[1] = vec![DetectionRecord::new("dog", [0.1, 0.1, 0.4, 0.4], 5.0)];
        let b = bundle_with(vec![vec![1.0, 0.0]; 4], vec![1.0, 0.0], dets);
        let d = detection_scores(&b, &[0, 1, 2, 3], &ExpandedQuery::default(), &ScoringConfig::default())
            .unwrap();
        // softmax([5, -20, -20, -20]) evaluated independently
        let e = (-25.0f64).exp();
        let top = 1.0 / (1.0 + 3.0 * e);
        assert!((d.scores[1] - top).abs() < 1e-15);
        assert!((d.scores[0] - e * top).abs() < 1e-20);
    }

    #[test]
    fn diffusion_window_two() {
        let mut board = FrameScoreBoard::new(5);
        temporal_diffusion(&mut board, 2, 1.0, 2).unwrap();
        let expected = [1.0 / 3.0, 0.5, 1.0, 0.5, 1.0 / 3.0];
        for (a, b) in board.scores().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn diffusion_window_zero_and_max_identity() {
        let mut board = FrameScoreBoard::from_parts(vec![0.0, 0.9, 0.0], vec![false; 3]).unwrap();
        temporal_diffusion(&mut board, 1, 0.5, 0).unwrap();
        assert_eq!(board.scores(), &[0.0, 0.9, 0.0]);
        temporal_diffusion(&mut board, 0, 0.4, 0).unwrap();
        assert_eq!(board.scores(), &[0.4, 0.9, 0.0]);
        assert!(temporal_diffusion(&mut board, 3, 0.4, 0).is_err());
    }

    #[test]
    fn fuse_identities_and_mismatch() {
        let a = [0.1, 0.7, 0.2];
        let b = [0.5, 0.25, 0.25];
        assert_eq!(fuse_scores(&a, &b, 0.0).unwrap(), a);
        assert_eq!(fuse_scores(&a, &b, 1.0).unwrap(), b);
        assert!(fuse_scores(&a, &b[..2], 0.5).is_err());
        assert_eq!(ScoringConfig::default().lambda, 0.5);
    }

    #[test]
    fn config_validation() {
        let mut c = ScoringConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c = ScoringConfig::default();
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        c = ScoringConfig::default();
        c.relation_weights.causal = -1.0;
        assert!(c.validate().is_err());
    }
}
