use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Subcommand;
use kep_core::corpus_io::{in_dir, read_json, write_json, write_jsonl, DimHeader};
use kep_core::evaluation::PromptBank;
use kep_core::knowledge_tree::{build_tree, tree_stats, TreeFile};
use kep_core::synth_data::{
    gen_class_synonyms, gen_eval_sets, gen_heldout_pairs, gen_knowledge_tree, gen_oncotree, gen_pairs,
};
use kep_core::SynthSpec;
use serde::Serialize;

use crate::{announce, emit, ensure_dir};

#[derive(Subcommand, Debug)]
pub(crate) enum SynthCommand {
    /// Write a synthetic tree, pair, patch and slide corpus.
    Gen {
        /// Spec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

pub(crate) fn load_spec(path: Option<&Path>, seed: Option<u64>) -> Result<SynthSpec> {
    let mut spec = match path {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize)]
pub(crate) struct CorpusSummary {
    pub out_dir: PathBuf,
    pub files: Vec<&'static str>,
    pub entities: usize,
    pub pairs: usize,
    pub heldout_pairs: usize,
    pub patches: usize,
    pub slides: usize,
    pub tree: kep_core::TreeStats,
}

pub(crate) const CORPUS_FILES: [&str; 8] = [
    "diseases.jsonl",
    "oncotree.jsonl",
    "tree.json",
    "pairs.jsonl",
    "pairs_heldout.jsonl",
    "patches.jsonl",
    "wsi.jsonl",
    "classes.json",
];

/// Writes the corpus files for `spec` into `dir`.
pub(crate) fn write_corpus(spec: &SynthSpec, dir: &Path) -> Result<CorpusSummary> {
    ensure_dir(dir)?;
    let diseases = gen_knowledge_tree(spec);
    let oncotree = gen_oncotree(spec);
    let (tree, log) = build_tree(&diseases, &oncotree);
    let stats = tree_stats(&tree);
    let pairs = gen_pairs(spec, &diseases);
    let heldout = gen_heldout_pairs(spec, &diseases);
    let (patches, slides) = gen_eval_sets(spec, &diseases);
    let bank = PromptBank::with_shipped_templates(gen_class_synonyms(spec, &diseases))?;
    let dim = Some(DimHeader { dim: spec.latent_dim });

    write_jsonl(in_dir(dir, "diseases.jsonl"), None, &diseases)?;
    write_jsonl(in_dir(dir, "oncotree.jsonl"), None, &oncotree)?;
    write_json(in_dir(dir, "tree.json"), &TreeFile::new(tree, log))?;
    write_jsonl(in_dir(dir, "pairs.jsonl"), dim, &pairs)?;
    write_jsonl(in_dir(dir, "pairs_heldout.jsonl"), dim, &heldout)?;
    write_jsonl(in_dir(dir, "patches.jsonl"), dim, &patches)?;
    write_jsonl(in_dir(dir, "wsi.jsonl"), dim, &slides)?;
    write_json(in_dir(dir, "classes.json"), &bank)?;
    Ok(CorpusSummary {
        out_dir: dir.to_path_buf(),
        files: CORPUS_FILES.to_vec(),
        entities: diseases.len(),
        pairs: pairs.len(),
        heldout_pairs: heldout.len(),
        patches: patches.len(),
        slides: slides.len(),
        tree: stats,
    })
}

pub(crate) fn run(cmd: SynthCommand) -> Result<()> {
    match cmd {
        SynthCommand::Gen { spec, seed, out_dir } => {
            let spec = load_spec(spec.as_deref(), seed)?;
            announce("synth gen", Some(spec.seed), &spec);
            emit(&write_corpus(&spec, &out_dir)?, None)
        }
    }
}
