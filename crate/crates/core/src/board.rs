use crate::error::{Error, Result};

/// Running per-frame confidence plus the visited set.
///
/// Scores only ever grow (max-merge) and visited flags only go from `false`
/// to `true`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScoreBoard {
    scores: Vec<f64>,
    visited: Vec<bool>,
}

impl FrameScoreBoard {
    pub fn new(n_frames: usize) -> Self {
        FrameScoreBoard {
            scores: vec![0.0; n_frames],
            visited: vec![false; n_frames],
        }
    }

    /// Board with preset state, mostly for tests and replays.
    pub fn from_parts(scores: Vec<f64>, visited: Vec<bool>) -> Result<Self> {
        if scores.len() != visited.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} visited flags",
                scores.len(),
                visited.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::invalid(format!("board score {bad} is not finite and >= 0")));
        }
        Ok(FrameScoreBoard { scores, visited })
    }

    pub fn n_frames(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, t: usize) -> f64 {
        self.scores[t]
    }

    pub fn is_visited(&self, t: usize) -> bool {
        self.visited[t]
    }

    pub fn visited_count(&self) -> usize {
        self.visited.iter().filter(|v| **v).count()
    }

    pub fn all_visited(&self) -> bool {
        self.visited.iter().all(|v| *v)
    }

    pub fn unvisited(&self) -> impl Iterator<Item = usize> + '_ {
        self.visited
            .iter()
            .enumerate()
            .filter(|(_, v)| !**v)
            .map(|(i, _)| i)
    }

    pub fn visited_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.visited
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| i)
    }

    pub fn mark_visited(&mut self, t: usize) {
        self.visited[t] = true;
    }

    /// `scores[t] = max(scores[t], value)`.
    pub fn raise(&mut self, t: usize, value: f64) {
        if value > self.scores[t] {
            self.scores[t] = value;
        }
    }

    /// Element-wise max with another board of the same length. Visited sets
    /// are unioned.
    pub fn merge_max(&mut self, other: &FrameScoreBoard) {
        assert_eq!(self.n_frames(), other.n_frames());
        for t in 0..self.n_frames() {
            self.raise(t, other.scores[t]);
            self.visited[t] |= other.visited[t];
        }
    }
}
