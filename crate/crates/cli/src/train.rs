use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use kep_core::corpus_io::{in_dir, load_checkpoint, load_pair_records, read_json, save_checkpoint};
use kep_core::knowledge_tree::TreeFile;
use kep_core::training::{train_kep, train_knowledge_encoder};
use kep_core::{MetricLoss, RunHistory, RunMeta, TextEncoderParams, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{announce, emit, ensure_dir, load_config};

#[derive(Subcommand, Debug)]
pub(crate) enum TrainCommand {
    /// Pretrain the knowledge encoder on the tree's attributes.
    Ke(KeArgs),
    /// Align image and text encoders with knowledge distillation.
    Kep(KepArgs),
}

#[derive(Args, Debug)]
pub(crate) struct KeArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Training config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to write; the history goes beside it.
    #[arg(long)]
    out: PathBuf,
    /// adasp or triplet.
    #[arg(long)]
    metric: Option<MetricLoss>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
pub(crate) struct KepArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Knowledge-encoder checkpoint.
    #[arg(long)]
    ke: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train without the frozen knowledge branch.
    #[arg(long)]
    no_distill: bool,
    /// Drop the image projection head.
    #[arg(long)]
    no_head: bool,
}

#[derive(Serialize)]
struct TrainReport {
    stage: String,
    seed: u64,
    steps: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    artifacts: Vec<PathBuf>,
}

impl TrainReport {
    fn new(history: &RunHistory, artifacts: Vec<PathBuf>) -> Self {
        eprintln!("{}: wall clock {:.2}s", history.stage, history.wall_clock_secs);
        TrainReport {
            stage: history.stage.clone(),
            seed: history.seed,
            steps: history.steps.len(),
            first_loss: history.first_loss(),
            last_loss: history.last_loss(),
            artifacts,
        }
    }
}

pub(crate) fn meta(kind: &str, cfg: &TrainConfig) -> Result<RunMeta> {
    Ok(RunMeta {
        kind: kind.into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
    })
}

pub(crate) fn write_history(history: &RunHistory, path: &Path) -> Result<()> {
    std::fs::write(path, history.to_jsonl()).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn load_text_encoder(path: &Path) -> Result<TextEncoderParams> {
    Ok(TextEncoderParams::from_checkpoint(&load_checkpoint(path)?)?)
}

fn run_ke(args: KeArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.metric {
        cfg.metric = m;
    }
    if let Some(e) = args.epochs {
        cfg.ke_epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    announce("train ke", Some(cfg.seed), &cfg);

    let file: TreeFile = read_json(&args.tree)?;
    let tree = file.into_tree()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (params, history) = train_knowledge_encoder(&tree, &cfg, &mut rng)?;

    let history_path = args.out.with_extension("history.jsonl");
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_checkpoint(&params.to_checkpoint(meta("knowledge", &cfg)?), &args.out)?;
    write_history(&history, &history_path)?;
    emit(&TrainReport::new(&history, vec![args.out, history_path]), None)
}

fn run_kep(args: KepArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(e) = args.epochs {
        cfg.kep_epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if args.no_distill {
        cfg.distillation = false;
    }
    if args.no_head {
        cfg.projection_head = false;
    }
    cfg.validate()?;
    announce("train kep", Some(cfg.seed), &cfg);

    let (_, pairs) = load_pair_records(&args.pairs)?;
    let knowledge = load_text_encoder(&args.ke)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = train_kep(&pairs, &knowledge, &cfg, &mut rng)?;

    ensure_dir(&args.out_dir)?;
    let image_path = in_dir(&args.out_dir, "image.ckpt");
    let text_path = in_dir(&args.out_dir, "text.ckpt");
    let knowledge_path = in_dir(&args.out_dir, "knowledge.ckpt");
    let history_path = in_dir(&args.out_dir, "history.jsonl");
    save_checkpoint(&out.image.to_checkpoint(meta("image", &cfg)?), &image_path)?;
    save_checkpoint(&out.text.to_checkpoint(meta("text", &cfg)?), &text_path)?;
    std::fs::copy(&args.ke, &knowledge_path)
        .with_context(|| format!("copying {} into {}", args.ke.display(), args.out_dir.display()))?;
    write_history(&out.history, &history_path)?;
    emit(
        &TrainReport::new(
            &out.history,
            vec![image_path, text_path, knowledge_path, history_path],
        ),
        None,
    )
}

pub(crate) fn run(cmd: TrainCommand) -> Result<()> {
    match cmd {
        TrainCommand::Ke(a) => run_ke(a),
        TrainCommand::Kep(a) => run_kep(a),
    }
}
