use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Subcommand, ValueEnum};
use kep_core::corpus_io::{in_dir, load_checkpoint, load_pair_records, load_patch_records, load_wsi_records};
use kep_core::evaluation::{
    run_retrieval, run_wsi_eval, run_zeroshot_eval, Pooling, PromptBank, RetrievalTask, DEFAULT_TOPK,
};
use kep_core::{Error, ImageEncoderParams, TextEncoderParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::train::load_text_encoder;
use crate::{announce, emit, OutputArgs};

#[derive(Subcommand, Debug)]
pub(crate) enum EvalCommand {
    /// Cross-modal and disease retrieval, Recall@K.
    Retrieval(RetrievalArgs),
    /// Prompt-ensembled zero-shot patch classification, weighted F1.
    Zeroshot(ZeroshotArgs),
    /// Top-K pooled slide subtyping, balanced accuracy.
    Wsi(WsiArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum TextBranch {
    /// The aligned text encoder.
    Text,
    /// The frozen knowledge encoder.
    Knowledge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum PoolingArg {
    Mean,
    Vote,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Vote => Pooling::MajorityVote,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub(crate) struct ModelArgs {
    /// Directory holding image.ckpt, text.ckpt and knowledge.ckpt.
    #[arg(long)]
    models: PathBuf,
    /// Text branch used to embed captions and prompts.
    #[arg(long, value_enum, default_value = "text")]
    encoder: TextBranch,
}

impl ModelArgs {
    fn load(&self) -> Result<(TextEncoderParams, ImageEncoderParams)> {
        let text_file = match self.encoder {
            TextBranch::Text => "text.ckpt",
            TextBranch::Knowledge => "knowledge.ckpt",
        };
        let text = load_text_encoder(&in_dir(&self.models, text_file))?;
        let image =
            ImageEncoderParams::from_checkpoint(&load_checkpoint(in_dir(&self.models, "image.ckpt"))?)?;
        Ok((text, image))
    }
}

fn check_dim(dim: usize, image: &ImageEncoderParams, path: &Path) -> Result<()> {
    if dim != image.input_dim() {
        return Err(Error::Dimension(format!(
            "{} has feature dimension {dim}, the image encoder expects {}",
            path.display(),
            image.input_dim()
        ))
        .into());
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub(crate) struct RetrievalArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    k: Vec<usize>,
    /// i2t, t2i, l2t or i2l.
    #[arg(long)]
    task: RetrievalTask,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub(crate) struct ZeroshotArgs {
    /// Patch JSONL with a dimension header.
    #[arg(long)]
    dataset: PathBuf,
    /// Prompt bank JSON (classes, optional templates).
    #[arg(long)]
    classes: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub(crate) struct WsiArgs {
    /// Slide JSONL with a dimension header.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TOPK)]
    topk: Vec<usize>,
    #[arg(long, value_enum, default_value = "mean")]
    pooling: PoolingArg,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

#[derive(Serialize)]
struct WsiReport {
    pooling: PoolingArg,
    reports: Vec<kep_core::EvalReport>,
}

pub(crate) fn run(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Retrieval(a) => {
            announce("eval retrieval", None, &a);
            let (text, image) = a.model.load()?;
            let (dim, pairs) = load_pair_records(&a.pairs)?;
            check_dim(dim, &image, &a.pairs)?;
            let report = run_retrieval(&pairs, &text, &image, a.task, &a.k)?;
            emit(&report, a.output.out.as_deref())
        }
        EvalCommand::Zeroshot(a) => {
            announce("eval zeroshot", Some(a.seed), &a);
            let (text, image) = a.model.load()?;
            let (dim, patches) = load_patch_records(&a.dataset)?;
            check_dim(dim, &image, &a.dataset)?;
            let bank = PromptBank::load(&a.classes)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let report = run_zeroshot_eval(&patches, &bank, &text, &image, a.trials, &mut rng)?;
            emit(&report, a.output.out.as_deref())
        }
        EvalCommand::Wsi(a) => {
            announce("eval wsi", Some(a.seed), &a);
            let (text, image) = a.model.load()?;
            let (dim, slides) = load_wsi_records(&a.dataset)?;
            check_dim(dim, &image, &a.dataset)?;
            let bank = PromptBank::load(&a.classes)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let reports = run_wsi_eval(
                &slides,
                &bank,
                &text,
                &image,
                a.trials,
                &a.topk,
                a.pooling.into(),
                &mut rng,
            )?;
            emit(
                &WsiReport {
                    pooling: a.pooling,
                    reports,
                },
                a.output.out.as_deref(),
            )
        }
    }
}
