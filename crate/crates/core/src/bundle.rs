//! Precomputed per-frame features: the engine's only view of a video.
//!
//! Binary layout (little-endian):
//!
//! | field               | type                          |
//! |---------------------|-------------------------------|
//! | magic               | `b"APVRFB1"` (7 bytes)        |
//! | n_frames            | u64                           |
//! | embed_dim           | u32                           |
//! | fps                 | f32                           |
//! | frame embeddings    | n_frames × embed_dim f32      |
//! | text embedding      | embed_dim f32                 |
//! | detections length   | u64 byte count                |
//! | detections          | UTF-8 JSON                    |
//!
//! The detections JSON is an array with one entry per frame, each an array of
//! `{"phrase": str, "box": [x0, y0, x1, y1], "logit": f64}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{put_f32s, Cursor};
use crate::error::{Error, Result};
use crate::query::normalize_phrase;

pub const BUNDLE_MAGIC: &[u8; 7] = b"APVRFB1";
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub phrase: String,
    /// Normalized `[x0, y0, x1, y1]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub logit: f64,
}

impl DetectionRecord {
    pub fn new(phrase: &str, bbox: [f64; 4], logit: f64) -> Self {
        DetectionRecord {
            phrase: phrase.to_string(),
            bbox,
            logit,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        let [x0, y0, x1, y1] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(format!("box {:?} outside [0,1]", self.bbox));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(format!("degenerate box {:?}", self.bbox));
        }
        if !self.logit.is_finite() {
            return Err("non-finite logit".into());
        }
        Ok(())
    }

    fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.bbox;
        (x1 - x0) * (y1 - y0)
    }

    pub fn iou(&self, other: &DetectionRecord) -> f64 {
        let [ax0, ay0, ax1, ay1] = self.bbox;
        let [bx0, by0, bx1, by1] = other.bbox;
        let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    n_frames: usize,
    embed_dim: usize,
    fps: f32,
    /// Row-major `n_frames × embed_dim`, unit-norm rows.
    frame_embeddings: Vec<f32>,
    text_embedding: Vec<f32>,
    detections: Vec<Vec<DetectionRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleSummary {
    pub n_frames: usize,
    pub embed_dim: usize,
    pub fps: f32,
    pub frames_with_detections: usize,
    pub total_detections: usize,
}

impl FeatureBundle {
    /// Builds a bundle, checking every invariant. Detection phrases are
    /// normalized.
    pub fn new(
        fps: f32,
        embed_dim: usize,
        frame_embeddings: Vec<f32>,
        text_embedding: Vec<f32>,
        mut detections: Vec<Vec<DetectionRecord>>,
    ) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be >= 1"));
        }
        if frame_embeddings.is_empty() || !frame_embeddings.len().is_multiple_of(embed_dim) {
            return Err(Error::invalid(format!(
                "frame embedding buffer of {} floats is not a non-empty multiple of embed_dim {}",
                frame_embeddings.len(),
                embed_dim
            )));
        }
        let n_frames = frame_embeddings.len() / embed_dim;
        if text_embedding.len() != embed_dim {
            return Err(Error::invalid(format!(
                "text embedding has {} dims, expected {embed_dim}",
                text_embedding.len()
            )));
        }
        if detections.len() != n_frames {
            return Err(Error::invalid(format!(
                "{} detection lists for {n_frames} frames",
                detections.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if let Some(t) = first_bad_norm(&frame_embeddings, embed_dim) {
            return Err(Error::invalid(format!(
                "frame {t} embedding is not unit norm"
            )));
        }
        if text_embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("text embedding has non-finite values"));
        }
        for (t, dets) in detections.iter_mut().enumerate() {
            for d in dets.iter_mut() {
                d.check()
                    .map_err(|m| Error::invalid(format!("frame {t}: {m}")))?;
                d.phrase = normalize_phrase(&d.phrase);
            }
        }
        Ok(FeatureBundle {
            n_frames,
            embed_dim,
            fps,
            frame_embeddings,
            text_embedding,
            detections,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn frame_embedding(&self, t: usize) -> &[f32] {
        &self.frame_embeddings[t * self.embed_dim..(t + 1) * self.embed_dim]
    }

    pub fn text_embedding(&self) -> &[f32] {
        &self.text_embedding
    }

    pub fn detections(&self, t: usize) -> &[DetectionRecord] {
        &self.detections[t]
    }

    pub fn summary(&self) -> BundleSummary {
        BundleSummary {
            n_frames: self.n_frames,
            embed_dim: self.embed_dim,
            fps: self.fps,
            frames_with_detections: self.detections.iter().filter(|d| !d.is_empty()).count(),
            total_detections: self.detections.iter().map(Vec::len).sum(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.detections).expect("detections serialize");
        let mut out = Vec::with_capacity(
            7 + 16 + 4 * (self.frame_embeddings.len() + self.embed_dim) + 8 + json.len(),
        );
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&(self.n_frames as u64).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        put_f32s(&mut out, &self.frame_embeddings);
        put_f32s(&mut out, &self.text_embedding);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    /// Decodes and validates a bundle. Every failure is a format error
    /// carrying the byte offset of the offending field.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        cur.expect_magic(BUNDLE_MAGIC)?;
        let header_at = cur.offset();
        let n_frames = cur.u64("n_frames")?;
        let embed_dim = cur.u32("embed_dim")? as usize;
        let fps_at = cur.offset();
        let fps = cur.f32("fps")?;
        if n_frames == 0 || embed_dim == 0 {
            return Err(Error::format(
                header_at,
                format!("n_frames={n_frames} and embed_dim={embed_dim} must both be >= 1"),
            ));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::format(fps_at, format!("fps must be positive, got {fps}")));
        }
        let n_frames = usize::try_from(n_frames)
            .map_err(|_| Error::format(header_at, "n_frames exceeds address space"))?;
        let count = n_frames
            .checked_mul(embed_dim)
            .ok_or_else(|| Error::format(header_at, "embedding matrix size overflows"))?;
        let emb_at = cur.offset();
        let frame_embeddings = cur.f32_vec(count, "frame embeddings")?;
        if let Some(t) = first_bad_norm(&frame_embeddings, embed_dim) {
            return Err(Error::format(
                emb_at + (t * embed_dim * 4) as u64,
                format!("frame {t} embedding norm outside 1 ± {NORM_TOLERANCE}"),
            ));
        }
        let text_at = cur.offset();
        let text_embedding = cur.f32_vec(embed_dim, "text embedding")?;
        if text_embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(text_at, "text embedding has non-finite values"));
        }
        let len = cur.u64("detections length")?;
        let json_at = cur.offset();
        let len = usize::try_from(len)
            .map_err(|_| Error::format(json_at, "detections length exceeds address space"))?;
        let json = cur.take(len, "detections JSON")?;
        if cur.remaining() != 0 {
            return Err(Error::format(
                cur.offset(),
                format!("{} trailing bytes after detections", cur.remaining()),
            ));
        }
        let detections: Vec<Vec<DetectionRecord>> = serde_json::from_slice(json)
            .map_err(|e| Error::format(json_at, format!("detections JSON: {e}")))?;
        if detections.len() != n_frames {
            return Err(Error::format(
                json_at,
                format!("{} detection lists for {n_frames} frames", detections.len()),
            ));
        }
        for (t, dets) in detections.iter().enumerate() {
            for d in dets {
                d.check()
                    .map_err(|m| Error::format(json_at, format!("frame {t}: {m}")))?;
            }
        }
        FeatureBundle::new(fps, embed_dim, frame_embeddings, text_embedding, detections)
            .map_err(|e| Error::format(0, e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn first_bad_norm(rows: &[f32], dim: usize) -> Option<usize> {
    rows.chunks_exact(dim).position(|row| {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE
    })
}
