//! Subcommand implementations. Each returns the JSON value printed on stdout.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use skysearch_core::detector::DetectorTask;
use skysearch_core::pipeline::{self, Paths, Pipeline, PipelineConfig};
use skysearch_core::scene::Split;
use skysearch_core::{Error, Result};

use crate::service::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "skysearch", version, about = "Two-step aerial pedestrian action search")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Puts dataset, checkpoints and reports under this directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Train the pedestrian detector (or the single-step action baseline).
    TrainDetector(TrainDetectorArgs),
    /// Train the yes/no query network on detector proposals.
    TrainQa,
    /// Write step-one proposals for every frame, or print one frame's.
    Detect(DetectArgs),
    /// Rank one frame's proposals for an action query.
    Answer(AnswerArgs),
    /// Evaluate detection, QA accuracy and action mAP on the test split.
    Eval(EvalArgs),
    /// Serve the /v1 HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    /// Train the single-step low-resolution action detector instead.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub frame: Option<u32>,
}

#[derive(Debug, Args)]
pub struct AnswerArgs {
    #[arg(long)]
    pub frame: u32,
    /// Comma-separated action words, all of which must hold.
    #[arg(long, value_delimiter = ',', required = true)]
    pub actions: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// IoU thresholds for the detection sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    /// Skip the single-step baseline even when its checkpoint exists.
    #[arg(long)]
    pub no_baseline: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

/// Loads, overrides and validates the configuration.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config(vec!["--config PATH is required".into()]))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths = Paths { dataset: out.join("data"), checkpoints: out.join("checkpoints"), reports: out.join("reports") };
    }
    if let Command::Eval(EvalArgs { sweep: Some(t), .. }) = &cli.command {
        cfg.eval.thresholds = t.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(stage: &'static str) -> impl FnMut(usize, f64) {
    move |it, loss| {
        if it % 50 == 0 {
            log::info!("{stage} iteration {it}: loss {loss:.5}");
        }
    }
}

fn final_loss(losses: &[f64]) -> Value {
    losses.last().map_or(Value::Null, |l| json!(l))
}

pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let ds = pipeline::gen_data(&cfg)?;
            let annotations: usize = ds.frames.iter().map(|f| f.annotations.len()).sum();
            Ok(json!({
                "dataset": cfg.paths.dataset,
                "frames": ds.frames.len(),
                "train": ds.splits.train.len(),
                "test": ds.splits.test.len(),
                "annotations": annotations,
            }))
        }
        Command::TrainDetector(a) => {
            let ds = pipeline::load_dataset(&cfg)?;
            let task = if a.baseline { DetectorTask::Actions } else { DetectorTask::Pedestrian };
            let (_, log) = pipeline::train_detector_stage(&cfg, &ds, task, progress("detector"))?;
            let name = if a.baseline { pipeline::BASELINE_CHECKPOINT } else { pipeline::DETECTOR_CHECKPOINT };
            Ok(json!({
                "checkpoint": cfg.checkpoint_path(name),
                "iterations": log.losses.len(),
                "final_loss": final_loss(&log.losses),
            }))
        }
        Command::TrainQa => {
            let ds = pipeline::load_dataset(&cfg)?;
            let det = pipeline::load_detector(&cfg, DetectorTask::Pedestrian)?;
            let (_, log) = pipeline::train_qa_stage(&cfg, &ds, &det, progress("qa"))?;
            Ok(json!({
                "checkpoint": cfg.checkpoint_path(pipeline::QA_CHECKPOINT),
                "iterations": log.losses.len(),
                "final_loss": final_loss(&log.losses),
            }))
        }
        Command::Detect(a) => {
            let ds = pipeline::load_dataset(&cfg)?;
            let det = pipeline::load_detector(&cfg, DetectorTask::Pedestrian)?;
            match a.frame {
                Some(id) => {
                    let f = ds.frame(id).ok_or_else(|| Error::Dataset(format!("no frame with id {id}")))?;
                    let props = det.generate_proposals(&ds.frame_pair(f), &cfg.proposal_params())?;
                    let list: Vec<Value> =
                        props.iter().map(|p| json!({ "box": p.source_box, "score": p.score })).collect();
                    Ok(json!({ "frame_id": id, "proposals": list }))
                }
                None => {
                    let records = pipeline::detect_stage(&cfg, &ds, &det)?;
                    Ok(json!({
                        "proposals": cfg.report_path("proposals.jsonl"),
                        "frames": ds.frames.len(),
                        "count": records.len(),
                    }))
                }
            }
        }
        Command::Answer(a) => {
            let ds = pipeline::load_dataset(&cfg)?;
            let f = ds.frame(a.frame).ok_or_else(|| Error::Dataset(format!("no frame with id {}", a.frame)))?;
            let p = Pipeline::load(&cfg)?;
            Ok(serde_json::to_value(p.answer(&ds.frame_pair(f), a.frame, &a.actions)?)?)
        }
        Command::Eval(a) => {
            let ds = pipeline::load_dataset(&cfg)?;
            if ds.split(Split::Test).is_empty() {
                return Err(Error::Empty("test split".into()));
            }
            let p = Pipeline::load(&cfg)?;
            let baseline = if a.no_baseline {
                None
            } else if cfg.checkpoint_path(pipeline::BASELINE_CHECKPOINT).exists() {
                Some(pipeline::load_detector(&cfg, DetectorTask::Actions)?)
            } else {
                log::warn!("no baseline checkpoint; skipping the single-step comparison");
                None
            };
            let report = pipeline::evaluate(&cfg, &ds, &p, baseline.as_ref())?;
            pipeline::write_report(&cfg, &report)?;
            eprintln!("{}", report.to_text());
            Ok(serde_json::to_value(&report)?)
        }
        Command::Serve(a) => {
            let dataset = pipeline::load_dataset(&cfg)?;
            let pipeline = match Pipeline::load(&cfg) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::warn!("model not loaded ({e}); /v1/query will answer 503");
                    None
                }
            };
            let app = router(Arc::new(AppState { dataset, pipeline }));
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(a.addr).await?;
                log::info!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, app).await
            })?;
            Ok(json!({ "stopped": true }))
        }
    }
}
