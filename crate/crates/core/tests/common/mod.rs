//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pivot_core::query::{ExpandedQuery, RelationTriplet, RelationType};
use pivot_core::{AttentionTensor, DetectionRecord, FeatureBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn to_f32_unit(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Random bundle with unit-norm embeddings and a few random detections.
pub fn random_bundle(seed: u64, n: usize, dim: usize, phrases: &[&str]) -> FeatureBundle {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(n * dim);
    for _ in 0..n {
        rows.extend(to_f32_unit(&unit_vector(&mut r, dim)));
    }
    let text: Vec<f32> = unit_vector(&mut r, dim).iter().map(|x| (x * 2.5) as f32).collect();
    let dets = (0..n)
        .map(|_| {
            let k = if phrases.is_empty() { 0 } else { r.gen_range(0..3) };
            (0..k)
                .map(|_| {
                    let x0 = r.gen_range(0.0..0.5);
                    let y0 = r.gen_range(0.0..0.5);
                    let w = r.gen_range(0.1..0.5);
                    let h = r.gen_range(0.1..0.5);
                    DetectionRecord::new(
                        phrases[r.gen_range(0..phrases.len())],
                        [x0, y0, x0 + w, y0 + h],
                        r.gen_range(-4.0..6.0),
                    )
                })
                .collect()
        })
        .collect();
    FeatureBundle::new(2.0, dim, rows, text, dets).unwrap()
}

pub struct PlantedFixture {
    pub bundle: FeatureBundle,
    /// Frames carrying the full similarity margin.
    pub planted: Vec<usize>,
}

/// Background frames hover around a base cosine similarity to the text
/// embedding with weakly correlated noise. Each planted event raises the similarity by `margin` at its
/// centre frame with a Gaussian temporal profile of width `spread` frames,
/// the way a relevant moment spans several consecutive frames of a video.
/// `noise` is the AR(1) innovation deviation of the background similarity.
pub fn planted_events(
    seed: u64,
    n: usize,
    dim: usize,
    n_planted: usize,
    margin: f64,
    spread: f64,
    noise: f64,
) -> PlantedFixture {
    let half_width = (3.0 * spread).ceil() as usize;
    let mut r = rng(seed);
    let text = {
        let mut t = vec![0.0; dim];
        t[0] = 1.0;
        t
    };
    // planted centres at least 4·half_width apart and away from the edges
    let mut planted: Vec<usize> = Vec::new();
    let mut tries = 0;
    while planted.len() < n_planted {
        tries += 1;
        if tries % 1000 == 0 {
            planted.clear();
        }
        assert!(tries < 1_000_000, "cannot place {n_planted} events in {n} frames");
        let c = r.gen_range(half_width..n - half_width);
        if planted.iter().all(|&p| p.abs_diff(c) > 4 * half_width) {
            planted.push(c);
        }
    }
    planted.sort_unstable();

    // background: weakly correlated AR(1) similarity (stationary sd 1.15·noise)
    // and a
    // slowly rotating orthogonal part
    let mut base = 0.2;
    let mut dir: Vec<f64> = unit_vector(&mut r, dim - 1);
    let mut rows = Vec::with_capacity(n * dim);
    for t in 0..n {
        base = 0.2 + 0.5 * (base - 0.2) + noise * gaussian(&mut r);
        let step: Vec<f64> = (0..dim - 1).map(|_| 0.05 * gaussian(&mut r)).collect();
        dir = {
            let v: Vec<f64> = dir.iter().zip(&step).map(|(a, b)| a + b).collect();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / nv).collect()
        };
        let bump = planted
            .iter()
            .map(|&p| {
                let d = p.abs_diff(t) as f64;
                if d > half_width as f64 {
                    0.0
                } else {
                    margin * (-d * d / (2.0 * spread * spread)).exp()
                }
            })
            .fold(0.0, f64::max);
        let cos = (base + bump).clamp(-0.99, 0.99);
        let ortho = (1.0 - cos * cos).sqrt();
        let mut row = vec![cos];
        row.extend(dir.iter().map(|x| x * ortho));
        rows.extend(to_f32_unit(&row));
    }
    let bundle = FeatureBundle::new(
        2.0,
        dim,
        rows,
        text.iter().map(|&x| x as f32).collect(),
        vec![Vec::new(); n],
    )
    .unwrap();
    PlantedFixture { bundle, planted }
}

pub fn recall(selected: &[usize], planted: &[usize]) -> f64 {
    let hit = planted.iter().filter(|p| selected.contains(p)).count();
    hit as f64 / planted.len() as f64
}

/// Softmax rows of scaled Gaussian logits.
pub fn random_attention(
    seed: u64,
    dims: [usize; 4],
    scale: f64,
    map: Option<Vec<usize>>,
) -> AttentionTensor {
    let [l, h, q, k] = dims;
    let mut r = rng(seed);
    let mut values = Vec::with_capacity(l * h * q * k);
    for _ in 0..l * h * q {
        let logits: Vec<f64> = (0..k).map(|_| scale * gaussian(&mut r)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        values.extend(e.iter().map(|v| (v / s) as f32));
    }
    AttentionTensor::new(l, h, q, k, values, map).unwrap()
}

pub fn uniform_attention(dims: [usize; 4], map: Option<Vec<usize>>) -> AttentionTensor {
    let [l, h, q, k] = dims;
    AttentionTensor::new(l, h, q, k, vec![1.0 / k as f32; l * h * q * k], map).unwrap()
}

const WORDS: &[&str] = &[
    "person", "dog", "red", "clothes", "leash", "fence", "grassy", "area", "mic", "stage",
    "woman", "cat", "door", "white", "skirt", "car", "ball", "tree", "phone", "bold",
];

fn phrase(r: &mut impl Rng, max_words: usize) -> String {
    let n = r.gen_range(1..=max_words);
    (0..n).map(|_| WORDS[r.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn distinct(r: &mut impl Rng, count: usize, taken: &mut Vec<String>) -> Vec<String> {
    let mut out = Vec::new();
    while out.len() < count {
        let p = phrase(r, 3);
        if !taken.contains(&p) {
            taken.push(p.clone());
            out.push(p);
        }
    }
    out
}

/// Expanded query inside the grammar's count bounds, with free-text fields
/// that avoid the grammar's separator characters.
pub fn random_query(seed: u64) -> ExpandedQuery {
    let mut r = rng(seed);
    let mut taken = Vec::new();
    let n_key = r.gen_range(3..=5);
    let key_objects = distinct(&mut r, n_key, &mut taken);
    let n_cue = r.gen_range(2..=4);
    let cue_objects = distinct(&mut r, n_cue, &mut taken);
    let objects: Vec<String> = key_objects.iter().chain(&cue_objects).cloned().collect();
    let mut relations = Vec::new();
    for _ in 0..r.gen_range(0..=4) {
        let s = &objects[r.gen_range(0..objects.len())];
        let o = &objects[r.gen_range(0..objects.len())];
        let rel = RelationType::ALL[r.gen_range(0..4)];
        let t = RelationTriplet::new(s, rel, o).unwrap();
        if !relations.contains(&t) {
            relations.push(t);
        }
    }
    let mut descriptions = BTreeMap::new();
    for obj in &objects {
        if r.gen_bool(0.5) {
            let mut des: Vec<String> = Vec::new();
            for _ in 0..r.gen_range(1..=3) {
                let d = format!("{obj} is a {}", phrase(&mut r, 4));
                if !des.contains(&d) {
                    des.push(d);
                }
            }
            descriptions.insert(obj.clone(), des);
        }
    }
    let mut semantics: Vec<String> = Vec::new();
    for _ in 0..r.gen_range(1..=5) {
        let s = format!("{} often appears with {}", phrase(&mut r, 2), phrase(&mut r, 2));
        if !semantics.contains(&s) {
            semantics.push(s);
        }
    }
    ExpandedQuery {
        question: String::new(),
        key_objects,
        cue_objects,
        relations,
        descriptions,
        semantics,
    }
}
