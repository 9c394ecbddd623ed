use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;
use serde_json::json;

use pivot_core::pipeline::{self, PipelineInputs, SelectionReport};
use pivot_core::query::{parse_expansion_response, render_expansion_prompt};
use pivot_core::scoring::{clip_scores, detection_scores, fuse_scores};
use pivot_core::{run_pfr, run_ptr, AttentionTensor, EngineConfig, FeatureBundle};

#[derive(Parser)]
#[command(name = "pivot", version, about = "Query-guided pivot frame and token retrieval")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for all sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for output artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (overrides `workers` in the config; 0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the query-expansion prompt for a question.
    ExpandRender {
        #[arg(long)]
        question: String,
        /// Answer option, repeatable.
        #[arg(long = "option")]
        options: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse an LLM expansion reply into expanded-query JSON.
    ExpandParse {
        /// Reply text file, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Fail on missing lines and out-of-range counts.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score frames of a bundle against an expanded query.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Comma-separated frame indices; all frames when omitted.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve pivot frames.
    Pfr {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve pivot tokens from an attention tensor.
    Ptr {
        #[arg(long)]
        attn: PathBuf,
        /// Keep only tokens of these frames (needs a chunk_frame_map).
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expansion parse, PFR and optional PTR in one run.
    Pipeline {
        #[arg(long)]
        bundle: PathBuf,
        /// Expansion reply text or expanded-query JSON.
        #[arg(long)]
        expansion: PathBuf,
        #[arg(long)]
        attn: Option<PathBuf>,
    },
    /// Check a bundle or attention file and print its summary.
    Validate {
        #[arg(long, required_unless_present = "attn")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        attn: Option<PathBuf>,
    },
    /// Print configuration.
    Config {
        /// Print every default setting.
        #[arg(long)]
        defaults: bool,
    },
}

fn load_config(common: &Common) -> Result<EngineConfig> {
    let mut cfg = match &common.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    if let Some(t) = common.threads {
        cfg.workers = t;
    }
    Ok(cfg)
}

fn read_text(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes to `out`, else to `out_dir/default_name`, else to stdout.
fn emit(out: Option<&Path>, common: &Common, default_name: &str, bytes: &[u8]) -> Result<()> {
    let target = match (out, &common.out_dir) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(dir)) => {
            std::fs::create_dir_all(dir)?;
            Some(dir.join(default_name))
        }
        (None, None) => None,
    };
    match target {
        Some(p) => pipeline::write_atomic(&p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::ExpandRender {
            question,
            options,
            out,
        } => {
            let mut prompt = render_expansion_prompt(&question, &options)?;
            prompt.push('\n');
            emit(out.as_deref(), common, "prompt.txt", prompt.as_bytes())
        }
        Command::ExpandParse { input, strict, out } => {
            let outcome = parse_expansion_response(&read_text(&input)?, strict)?;
            for w in &outcome.warnings {
                warn!("{w}");
            }
            let bytes = pipeline::to_json_bytes(&outcome.query)?;
            emit(out.as_deref(), common, pipeline::QUERY_FILE, &bytes)
        }
        Command::Score {
            bundle,
            query,
            frames,
            out,
        } => {
            let cfg = load_config(common)?;
            let bundle = FeatureBundle::read(&bundle)?;
            let (query, _) = pipeline::load_expansion(&read_text(&query)?)?;
            let frames = if frames.is_empty() {
                (0..bundle.n_frames()).collect()
            } else {
                frames
            };
            let sc = &cfg.pfr.scoring;
            let report = pipeline::with_workers(cfg.workers, || -> pivot_core::Result<_> {
                let clip = clip_scores(&bundle, &frames, sc)?;
                let gd = detection_scores(&bundle, &frames, &query, sc)?;
                let fused = fuse_scores(&clip, &gd.scores, sc.lambda)?;
                Ok(json!({
                    "frames": frames,
                    "clip": clip,
                    "detection": gd.scores,
                    "fused": fused,
                    "warnings": gd.warnings,
                }))
            })??;
            emit(out.as_deref(), common, "scores.json", &pipeline::to_json_bytes(&report)?)
        }
        Command::Pfr { bundle, query, out } => {
            let mut cfg = load_config(common)?;
            cfg.pfr.rng_seed = common.seed;
            let bundle = FeatureBundle::read(&bundle)?;
            let (query, _) = pipeline::load_expansion(&read_text(&query)?)?;
            let run = pipeline::with_workers(cfg.workers, || run_pfr(&bundle, &query, &cfg.pfr))??;
            for w in &run.warnings {
                warn!("{w}");
            }
            let report = SelectionReport {
                selection: &run.selection,
                config_echo: &cfg.pfr,
            };
            emit(out.as_deref(), common, pipeline::FRAMES_FILE, &pipeline::to_json_bytes(&report)?)
        }
        Command::Ptr { attn, frames, out } => {
            let cfg = load_config(common)?;
            let tensor = AttentionTensor::read(&attn)?;
            let sel = pipeline::with_workers(cfg.workers, || -> pivot_core::Result<_> {
                if frames.is_empty() {
                    return run_ptr(&tensor, &cfg.ptr);
                }
                let r = tensor.restrict_to_frames(&frames)?;
                for w in &r.warnings {
                    warn!("{w}");
                }
                let mut sel = run_ptr(&r.tensor, &cfg.ptr)?;
                sel.remap(&r.original);
                Ok(sel)
            })??;
            for w in sel.warnings() {
                warn!("{w}");
            }
            emit(out.as_deref(), common, pipeline::TOKENS_FILE, &pipeline::to_json_bytes(&sel)?)
        }
        Command::Pipeline {
            bundle,
            expansion,
            attn,
        } => {
            let cfg = load_config(common)?;
            let out_dir = common
                .out_dir
                .clone()
                .context("pipeline needs --out-dir")?;
            let inputs = PipelineInputs {
                bundle,
                expansion,
                attention: attn,
            };
            let out = pipeline::run_pipeline(&inputs, &cfg, common.seed, Some(&out_dir))?;
            for w in &out.manifest.warnings {
                warn!("{w}");
            }
            println!("{}", out_dir.join(pipeline::MANIFEST_FILE).display());
            Ok(())
        }
        Command::Validate { bundle, attn } => {
            let mut report = serde_json::Map::new();
            if let Some(p) = bundle {
                report.insert("bundle".into(), serde_json::to_value(pipeline::validate_bundle(&p)?)?);
            }
            if let Some(p) = attn {
                report.insert("attention".into(), serde_json::to_value(pipeline::validate_attention(&p)?)?);
            }
            print!("{}", String::from_utf8(pipeline::to_json_bytes(&report)?)?);
            Ok(())
        }
        Command::Config { defaults } => {
            let text = if defaults {
                EngineConfig::defaults_toml()
            } else {
                load_config(common)?.to_toml()
            };
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<pivot_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("APVR_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
