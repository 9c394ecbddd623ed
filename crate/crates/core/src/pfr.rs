//! Pivot frame retrieval.
//!
//! The first iteration scores a uniform stride over the video. Each later
//! iteration halves the stride schedule (`max(1, ∇ / p)`), builds a candidate
//! pool from the highest-scoring unvisited frames plus the frames whose local
//! score entropy is unusually high, and draws from that pool by score-weighted
//! multinomial sampling mixed with a uniform random share. Every scored frame
//! diffuses its fused score onto its temporal neighbors. After the last
//! iteration the `K` best frames on the board are returned.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::board::FrameScoreBoard;
use crate::bundle::FeatureBundle;
use crate::error::{Error, Result};
use crate::query::ExpandedQuery;
use crate::scoring::{
    clip_scores, detection_scores, fuse_scores, temporal_diffusion, ScoringConfig, SoftmaxScope,
};

/// Frames whose entropies define the mean and deviation of the uncertainty
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyStatsDomain {
    #[default]
    Unvisited,
    AllFrames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfrConfig {
    pub iterations: usize,
    pub initial_stride: usize,
    pub top_k: usize,
    /// Fraction of each draw taken uniformly at random from the pool.
    pub alpha: f64,
    /// Half-width of the entropy window.
    pub entropy_window: usize,
    pub rng_seed: u64,
    /// Share of the pool's score mass given to zero-score candidates.
    pub probability_floor: f64,
    pub entropy_stats_domain: EntropyStatsDomain,
    pub scoring: ScoringConfig,
}

impl Default for PfrConfig {
    fn default() -> Self {
        PfrConfig {
            iterations: 3,
            initial_stride: 4,
            top_k: 1024,
            alpha: 0.2,
            entropy_window: 2,
            rng_seed: 0,
            probability_floor: 1e-6,
            entropy_stats_domain: EntropyStatsDomain::Unvisited,
            scoring: ScoringConfig::default(),
        }
    }
}

impl PfrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if self.initial_stride == 0 {
            return Err(Error::invalid("initial_stride must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if self.entropy_window == 0 {
            return Err(Error::invalid("entropy_window must be >= 1"));
        }
        if !(self.probability_floor > 0.0 && self.probability_floor < 1.0) {
            return Err(Error::invalid("probability_floor must be in (0,1)"));
        }
        self.scoring.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotSelection {
    /// Strictly increasing frame indices.
    pub frame_indices: Vec<usize>,
    pub final_scores: Vec<f64>,
    pub iterations_run: usize,
    pub frames_visited: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub stride: usize,
    pub candidates: usize,
    pub sampled: usize,
}

#[derive(Debug, Clone)]
pub struct PfrRun {
    pub selection: PivotSelection,
    pub board: FrameScoreBoard,
    pub trace: Vec<IterationTrace>,
    pub warnings: Vec<String>,
}

/// Stride for iteration `p` (1-based).
pub fn stride_at(p: usize, initial_stride: usize) -> usize {
    (initial_stride / p.max(1)).max(1)
}

/// `0, ∇, 2∇, …` below `n_frames`.
pub fn uniform_stride_sample(n_frames: usize, stride: usize) -> Vec<usize> {
    (0..n_frames).step_by(stride.max(1)).collect()
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_by_score(scores: &[f64], candidates: impl IntoIterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.into_iter().collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Top `ceil(N / (2∇_p))` unvisited frames by board score.
pub fn high_confidence_set(board: &FrameScoreBoard, stride_p: usize) -> Vec<usize> {
    let n = board.n_frames();
    let k = n.div_ceil(2 * stride_p.max(1));
    top_k_by_score(board.scores(), board.unvisited(), k)
}

/// Shannon entropy (nats) of the normalized scores in `[i-γ, i+γ]`. A window
/// with no mass has entropy 0.
pub fn windowed_entropy(board: &FrameScoreBoard, i: usize, gamma: usize) -> f64 {
    let scores = board.scores();
    let lo = i.saturating_sub(gamma);
    let hi = i.saturating_add(gamma).min(scores.len() - 1);
    let window = &scores[lo..=hi];
    let total: f64 = window.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -window
        .iter()
        .filter(|s| **s > 0.0)
        .map(|s| {
            let e = s / total;
            e * e.ln()
        })
        .sum::<f64>()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Unvisited frames whose windowed entropy exceeds `μ + 0.5σ`.
pub fn uncertainty_set(
    board: &FrameScoreBoard,
    gamma: usize,
    domain: EntropyStatsDomain,
) -> Vec<usize> {
    let unvisited: Vec<usize> = board.unvisited().collect();
    if unvisited.is_empty() {
        return Vec::new();
    }
    let entropy: Vec<f64> = (0..board.n_frames())
        .map(|i| windowed_entropy(board, i, gamma))
        .collect();
    let stats: Vec<f64> = match domain {
        EntropyStatsDomain::Unvisited => unvisited.iter().map(|&i| entropy[i]).collect(),
        EntropyStatsDomain::AllFrames => entropy.clone(),
    };
    let Some(threshold) = entropy_threshold(&stats) else {
        return Vec::new();
    };
    unvisited
        .into_iter()
        .filter(|&i| entropy[i] > threshold)
        .collect()
}

/// `μ + 0.5σ` over `entropies`, or `None` when they have no spread.
pub fn entropy_threshold(entropies: &[f64]) -> Option<f64> {
    if entropies.is_empty() {
        return None;
    }
    let (mu, sigma) = mean_std(entropies);
    // Equal entropies can leave rounding noise in σ.
    if sigma <= 1e-12 * mu.abs().max(1.0) {
        return None;
    }
    Some(mu + 0.5 * sigma)
}

/// One adaptive resampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSample {
    /// High-confidence set ∪ uncertainty set, ascending.
    pub pool: Vec<usize>,
    /// Score-weighted draws with replacement, in draw order.
    pub multinomial_draws: Vec<usize>,
    /// Uniform draws without replacement, in draw order.
    pub random_draws: Vec<usize>,
    /// Deduplicated union of both draws, ascending.
    pub selected: Vec<usize>,
}

/// Draws `count` pool members with replacement, proportional to their board
/// scores. Zero-score members get weight `floor · Σscores` (uniform when the
/// pool has no mass).
pub fn multinomial_draws<R: Rng + ?Sized>(
    board: &FrameScoreBoard,
    pool: &[usize],
    count: usize,
    floor: f64,
    rng: &mut R,
) -> Vec<usize> {
    if pool.is_empty() || count == 0 {
        return Vec::new();
    }
    let total: f64 = pool.iter().map(|&t| board.score(t)).sum();
    let min_weight = if total > 0.0 { floor * total } else { 1.0 };
    let weights: Vec<f64> = pool
        .iter()
        .map(|&t| {
            let s = board.score(t);
            if s > 0.0 {
                s
            } else {
                min_weight
            }
        })
        .collect();
    let dist = WeightedIndex::new(&weights).expect("weights are positive and finite");
    (0..count).map(|_| pool[dist.sample(rng)]).collect()
}

/// Builds the candidate pool and samples `round((1-α)·N_C)` members by score
/// plus `round(α·N_C)` uniformly.
pub fn sample_candidates<R: Rng + ?Sized>(
    board: &FrameScoreBoard,
    stride_p: usize,
    cfg: &PfrConfig,
    rng: &mut R,
) -> CandidateSample {
    let mut pool = high_confidence_set(board, stride_p);
    pool.extend(uncertainty_set(board, cfg.entropy_window, cfg.entropy_stats_domain));
    pool.sort_unstable();
    pool.dedup();

    let n_pool = pool.len() as f64;
    let n_multi = ((1.0 - cfg.alpha) * n_pool).round() as usize;
    let n_rand = ((cfg.alpha * n_pool).round() as usize).min(pool.len());

    let multinomial = multinomial_draws(board, &pool, n_multi, cfg.probability_floor, rng);
    let random: Vec<usize> = rand::seq::index::sample(rng, pool.len(), n_rand)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let mut selected: Vec<usize> = multinomial.iter().chain(&random).copied().collect();
    selected.sort_unstable();
    selected.dedup();
    CandidateSample {
        pool,
        multinomial_draws: multinomial,
        random_draws: random,
        selected,
    }
}

/// Runs retrieval over `bundle` for `query`.
pub fn run_pfr(bundle: &FeatureBundle, query: &ExpandedQuery, cfg: &PfrConfig) -> Result<PfrRun> {
    cfg.validate()?;
    let n = bundle.n_frames();
    if n == 0 {
        return Err(Error::invalid("bundle has no frames"));
    }
    let mut warnings = Vec::new();
    let k = if cfg.top_k > n {
        warnings.push(format!("top_k {} clamped to {n} frames", cfg.top_k));
        n
    } else {
        cfg.top_k
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut board = FrameScoreBoard::new(n);
    let mut trace = Vec::new();
    let scoring = &cfg.scoring;

    for p in 1..=cfg.iterations {
        if board.all_visited() {
            break;
        }
        let stride = stride_at(p, cfg.initial_stride);
        let (candidates, sampled) = if p == 1 {
            let s = uniform_stride_sample(n, stride);
            (s.len(), s)
        } else {
            let c = sample_candidates(&board, stride, cfg, &mut rng);
            (c.pool.len(), c.selected)
        };
        if sampled.is_empty() {
            break;
        }

        let domain: Vec<usize> = match scoring.softmax_scope {
            SoftmaxScope::Iteration => sampled.clone(),
            SoftmaxScope::Visited => {
                let mut d: Vec<usize> = board.visited_indices().chain(sampled.iter().copied()).collect();
                d.sort_unstable();
                d.dedup();
                d
            }
        };
        let clip = clip_scores(bundle, &domain, scoring)?;
        let gd = detection_scores(bundle, &domain, query, scoring)?;
        for w in gd.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        let fused = fuse_scores(&clip, &gd.scores, scoring.lambda)?;

        let mut pos = 0;
        for &t in &sampled {
            // both lists ascending
            while domain[pos] != t {
                pos += 1;
            }
            temporal_diffusion(&mut board, t, fused[pos], scoring.diffusion_window)?;
        }
        for &t in &sampled {
            board.mark_visited(t);
        }
        log::debug!(
            "pfr iteration {p}: stride {stride}, {candidates} candidates, {} sampled, {} visited",
            sampled.len(),
            board.visited_count()
        );
        trace.push(IterationTrace {
            iteration: p,
            stride,
            candidates,
            sampled: sampled.len(),
        });
    }

    let frame_indices = top_k_by_score(board.scores(), 0..n, k);
    let final_scores = frame_indices.iter().map(|&t| board.score(t)).collect();
    let selection = PivotSelection {
        frame_indices,
        final_scores,
        iterations_run: trace.len(),
        frames_visited: board.visited_count(),
    };
    Ok(PfrRun {
        selection,
        board,
        trace,
        warnings,
    })
}
