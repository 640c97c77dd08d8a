use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use kep_core::evaluation::{
    attribute_entity_recall, run_retrieval, run_zeroshot_eval, PromptBank, RetrievalTask,
};
use kep_core::knowledge_tree::build_tree;
use kep_core::synth_data::{
    gen_class_synonyms, gen_eval_sets, gen_heldout_pairs, gen_knowledge_tree, gen_oncotree, gen_pairs,
};
use kep_core::training::{train_kep, train_knowledge_encoder};
use kep_core::{
    ImageEncoderParams, KnowledgeTree, MetricLoss, PairRecord, PatchRecord, SynthSpec, TextEncoderParams,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::synth::load_spec;
use crate::{announce, emit, load_config, OutputArgs};

/// The α grid swept by default.
pub(crate) const ALPHA_GRID: [f64; 7] = [0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Args, Debug)]
pub(crate) struct ExperimentArgs {
    /// Synthetic corpus spec JSON; defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Training config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds both the corpus and the training runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt trials for the zero-shot score.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
pub(crate) struct AblateAlphaArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = ALPHA_GRID)]
    alphas: Vec<f64>,
}

#[derive(Args, Debug)]
pub(crate) struct AblateArchArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

struct Corpus {
    tree: KnowledgeTree,
    pairs: Vec<PairRecord>,
    heldout: Vec<PairRecord>,
    patches: Vec<PatchRecord>,
    bank: PromptBank,
}

impl Corpus {
    fn generate(spec: &SynthSpec) -> Result<Self> {
        let diseases = gen_knowledge_tree(spec);
        let (tree, _) = build_tree(&diseases, &gen_oncotree(spec));
        let (patches, _) = gen_eval_sets(spec, &diseases);
        Ok(Corpus {
            tree,
            pairs: gen_pairs(spec, &diseases),
            heldout: gen_heldout_pairs(spec, &diseases),
            patches,
            bank: PromptBank::with_shipped_templates(gen_class_synonyms(spec, &diseases))?,
        })
    }
}

/// Held-out retrieval and zero-shot scores of one trained model.
#[derive(Debug, Clone, Serialize)]
struct Scores {
    label_to_text_r1: f64,
    image_to_label_r1: f64,
    image_to_text_r10: f64,
    zeroshot_wf1_median: f64,
}

fn score(
    corpus: &Corpus,
    text: &TextEncoderParams,
    image: &ImageEncoderParams,
    trials: usize,
    seed: u64,
) -> Result<Scores> {
    let r =
        |task, k| -> Result<f64> { Ok(run_retrieval(&corpus.heldout, text, image, task, &[k])?.recall[&k]) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Scores {
        label_to_text_r1: r(RetrievalTask::L2t, 1)?,
        image_to_label_r1: r(RetrievalTask::I2l, 1)?,
        image_to_text_r10: r(RetrievalTask::I2t, 10)?,
        zeroshot_wf1_median: run_zeroshot_eval(&corpus.patches, &corpus.bank, text, image, trials, &mut rng)?
            .median,
    })
}

fn setup(args: &ExperimentArgs, command: &str) -> Result<(SynthSpec, TrainConfig, Corpus)> {
    let spec = load_spec(args.spec.as_deref(), args.seed)?;
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    announce(
        command,
        Some(cfg.seed),
        &serde_json::json!({ "spec": spec, "train": cfg }),
    );
    let corpus = Corpus::generate(&spec)?;
    Ok((spec, cfg, corpus))
}

fn knowledge_encoder(corpus: &Corpus, cfg: &TrainConfig) -> Result<(TextEncoderParams, f64)> {
    let (k, _) = train_knowledge_encoder(&corpus.tree, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let r1 = attribute_entity_recall(&corpus.tree, &k, 1)?;
    Ok((k, r1))
}

#[derive(Serialize)]
struct AlphaRow {
    alpha: f64,
    #[serde(flatten)]
    scores: Scores,
}

#[derive(Serialize)]
struct AlphaReport {
    seed: u64,
    knowledge_attribute_r1: f64,
    rows: Vec<AlphaRow>,
}

pub(crate) fn run_alpha(args: AblateAlphaArgs) -> Result<()> {
    let (_, cfg, corpus) = setup(&args.experiment, "ablate-alpha")?;
    let (knowledge, knowledge_r1) = knowledge_encoder(&corpus, &cfg)?;
    let mut rows = Vec::new();
    for &alpha in &args.alphas {
        let run_cfg = TrainConfig {
            alpha,
            distillation: true,
            ..cfg.clone()
        };
        run_cfg.validate()?;
        let out = train_kep(
            &corpus.pairs,
            &knowledge,
            &run_cfg,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        )?;
        let scores = score(&corpus, &out.text, &out.image, args.experiment.trials, cfg.seed)?;
        eprintln!("ablate-alpha: α={alpha} l2t@1={:.4}", scores.label_to_text_r1);
        rows.push(AlphaRow { alpha, scores });
    }
    emit(
        &AlphaReport {
            seed: cfg.seed,
            knowledge_attribute_r1: knowledge_r1,
            rows,
        },
        args.experiment.output.out.as_deref(),
    )
}

#[derive(Serialize)]
struct ArchRow {
    metric: MetricLoss,
    distillation: bool,
    projection_head: bool,
    knowledge_attribute_r1: f64,
    #[serde(flatten)]
    scores: Scores,
}

#[derive(Serialize)]
struct ArchReport {
    seed: u64,
    rows: Vec<ArchRow>,
}

pub(crate) fn run_arch(args: AblateArchArgs) -> Result<()> {
    let (_, cfg, corpus) = setup(&args.experiment, "ablate-arch")?;
    let mut rows = Vec::new();
    for metric in [MetricLoss::Adasp, MetricLoss::Triplet] {
        let ke_cfg = TrainConfig {
            metric,
            ..cfg.clone()
        };
        let (knowledge, knowledge_r1) = knowledge_encoder(&corpus, &ke_cfg)?;
        for distillation in [true, false] {
            for projection_head in [true, false] {
                let run_cfg = TrainConfig {
                    distillation,
                    projection_head,
                    ..ke_cfg.clone()
                };
                let out = train_kep(
                    &corpus.pairs,
                    &knowledge,
                    &run_cfg,
                    &mut ChaCha8Rng::seed_from_u64(cfg.seed),
                )?;
                let scores = score(&corpus, &out.text, &out.image, args.experiment.trials, cfg.seed)?;
                eprintln!(
                    "ablate-arch: {} distill={distillation} head={projection_head} l2t@1={:.4}",
                    metric.label(),
                    scores.label_to_text_r1
                );
                rows.push(ArchRow {
                    metric,
                    distillation,
                    projection_head,
                    knowledge_attribute_r1: knowledge_r1,
                    scores,
                });
            }
        }
    }
    emit(
        &ArchReport { seed: cfg.seed, rows },
        args.experiment.output.out.as_deref(),
    )
}
