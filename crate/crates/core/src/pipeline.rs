//! End-to-end runs: expansion parse, frame retrieval, token retrieval, and
//! the artifacts each stage leaves behind.
//!
//! All randomness comes from one base seed. Stage `i` gets `seed + i`
//! (PFR is stage 1), so a stage can be replayed alone with its sub-seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::{AttentionSummary, AttentionTensor};
use crate::bundle::{BundleSummary, FeatureBundle};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::pfr::{run_pfr, PfrConfig, PivotSelection};
use crate::ptr::{run_ptr, TokenSelection};
use crate::query::{parse_expansion_response, ExpandedQuery};

pub const PFR_STAGE: u64 = 1;

pub const QUERY_FILE: &str = "query.json";
pub const FRAMES_FILE: &str = "frames.json";
pub const TOKENS_FILE: &str = "tokens.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn validate_bundle(path: impl AsRef<Path>) -> Result<BundleSummary> {
    Ok(FeatureBundle::read(path)?.summary())
}

pub fn validate_attention(path: impl AsRef<Path>) -> Result<AttentionSummary> {
    Ok(AttentionTensor::read(path)?.summary())
}

/// Reads an expansion either as an expanded-query JSON object or as a raw
/// LLM reply in the line grammar (lenient).
pub fn load_expansion(text: &str) -> Result<(ExpandedQuery, Vec<String>)> {
    if text.trim_start().starts_with('{') {
        return Ok((ExpandedQuery::from_json(text)?, Vec::new()));
    }
    let out = parse_expansion_response(text, false)?;
    Ok((out.query, out.warnings.iter().map(|w| w.to_string()).collect()))
}

/// `frames.json`: the pivot selection plus the PFR settings that made it.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport<'a> {
    #[serde(flatten)]
    pub selection: &'a PivotSelection,
    pub config_echo: &'a PfrConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    /// Effective configuration, with stage seeds filled in.
    pub config: EngineConfig,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, InputDigest>,
    pub timings_ms: BTreeMap<String, f64>,
    pub n_frames: usize,
    pub frames_visited: usize,
    pub pivot_frames: usize,
    /// Retained-token fraction per processed layer, in layer order.
    pub token_ratios: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub bundle: PathBuf,
    pub expansion: PathBuf,
    pub attention: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub query: ExpandedQuery,
    pub selection: PivotSelection,
    pub tokens: Option<TokenSelection>,
    pub manifest: RunManifest,
}

fn digest(path: &Path, bytes: &[u8]) -> InputDigest {
    InputDigest {
        path: path.display().to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(bytes)),
    }
}

fn millis(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Writes `contents` to `path` through a temporary sibling and a rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Runs `f` on a rayon pool with `workers` threads (0 = one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Full run. With `out_dir`, each stage's output is written (atomically)
/// as soon as the stage finishes, so a later failure leaves earlier
/// artifacts intact.
pub fn run_pipeline(
    inputs: &PipelineInputs,
    cfg: &EngineConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    with_workers(cfg.workers, || run_stages(inputs, cfg, seed, out_dir))?
}

fn run_stages(
    inputs: &PipelineInputs,
    cfg: &EngineConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    let mut effective = cfg.clone();
    effective.pfr.rng_seed = seed.wrapping_add(PFR_STAGE);
    let mut timings = BTreeMap::new();
    let mut digests = BTreeMap::new();
    let mut warnings = Vec::new();

    let t = Instant::now();
    let (query, bundle) = (|| -> Result<_> {
        let text = std::fs::read(&inputs.expansion)?;
        digests.insert("expansion".to_string(), digest(&inputs.expansion, &text));
        let text = String::from_utf8(text)
            .map_err(|e| Error::invalid(format!("expansion is not UTF-8: {e}")))?;
        let (query, w) = load_expansion(&text)?;
        warnings.extend(w);
        let bytes = std::fs::read(&inputs.bundle)?;
        digests.insert("bundle".to_string(), digest(&inputs.bundle, &bytes));
        Ok((query, FeatureBundle::from_bytes(&bytes)?))
    })()
    .map_err(|e| e.in_stage("load"))?;
    timings.insert("load".to_string(), millis(t));
    if let Some(dir) = out_dir {
        write_atomic(&dir.join(QUERY_FILE), &to_json_bytes(&query)?)?;
    }

    let t = Instant::now();
    let run = run_pfr(&bundle, &query, &effective.pfr).map_err(|e| e.in_stage("pfr"))?;
    timings.insert("pfr".to_string(), millis(t));
    warnings.extend(run.warnings.iter().map(|w| format!("pfr: {w}")));
    if let Some(dir) = out_dir {
        let report = SelectionReport {
            selection: &run.selection,
            config_echo: &effective.pfr,
        };
        write_atomic(&dir.join(FRAMES_FILE), &to_json_bytes(&report)?)?;
    }

    let tokens = match &inputs.attention {
        None => None,
        Some(path) => {
            let t = Instant::now();
            let sel = (|| -> Result<TokenSelection> {
                let bytes = std::fs::read(path)?;
                digests.insert("attention".to_string(), digest(path, &bytes));
                let tensor = AttentionTensor::from_bytes(&bytes)?;
                if tensor.chunk_frame_map().is_some() {
                    let r = tensor.restrict_to_frames(&run.selection.frame_indices)?;
                    warnings.extend(r.warnings.iter().map(|w| format!("ptr: {w}")));
                    let mut sel = run_ptr(&r.tensor, &effective.ptr)?;
                    sel.remap(&r.original);
                    Ok(sel)
                } else {
                    warnings.push(
                        "ptr: attention has no chunk_frame_map; using all visual tokens".into(),
                    );
                    run_ptr(&tensor, &effective.ptr)
                }
            })()
            .map_err(|e| e.in_stage("ptr"))?;
            timings.insert("ptr".to_string(), millis(t));
            warnings.extend(sel.warnings().into_iter().map(|w| format!("ptr: {w}")));
            if let Some(dir) = out_dir {
                write_atomic(&dir.join(TOKENS_FILE), &to_json_bytes(&sel)?)?;
            }
            Some(sel)
        }
    };

    let manifest = RunManifest {
        config: effective,
        seed,
        stage_seeds: BTreeMap::from([("pfr".to_string(), seed.wrapping_add(PFR_STAGE))]),
        inputs: digests,
        timings_ms: timings,
        n_frames: bundle.n_frames(),
        frames_visited: run.selection.frames_visited,
        pivot_frames: run.selection.frame_indices.len(),
        token_ratios: tokens
            .as_ref()
            .map(|s| s.layers.iter().map(|l| l.ratio).collect())
            .unwrap_or_default(),
        warnings,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join(MANIFEST_FILE), &to_json_bytes(&manifest)?)?;
    }
    Ok(PipelineOutput {
        query,
        selection: run.selection,
        tokens,
        manifest,
    })
}
