use std::path::PathBuf;

use anyhow::Result;
use clap::Subcommand;
use kep_core::corpus_io::{
    load_disease_records, load_oncotree_records, read_json, validate_oncotree, write_json,
};
use kep_core::knowledge_tree::{build_tree, tree_stats, TreeFile};
use serde::Serialize;

use crate::{announce, emit, OutputArgs};

#[derive(Subcommand, Debug)]
pub(crate) enum TreeCommand {
    /// Merge disease records into OncoTree nodes and write the tree.
    Build {
        #[arg(long)]
        diseases: PathBuf,
        #[arg(long)]
        oncotree: PathBuf,
        /// Tree JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print attribute and entity counts of a tree.
    Stats {
        #[arg(long)]
        tree: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Serialize)]
struct BuildReport<'a> {
    build_log: &'a kep_core::BuildLog,
    stats: kep_core::TreeStats,
}

pub(crate) fn run(cmd: TreeCommand) -> Result<()> {
    match cmd {
        TreeCommand::Build {
            diseases,
            oncotree,
            out,
        } => {
            announce(
                "tree build",
                None,
                &serde_json::json!({
                    "diseases": diseases, "oncotree": oncotree, "out": out,
                }),
            );
            let diseases = load_disease_records(&diseases)?;
            let oncotree = load_oncotree_records(&oncotree)?;
            validate_oncotree(&oncotree)?;
            let (tree, log) = build_tree(&diseases, &oncotree);
            let stats = tree_stats(&tree);
            let file = TreeFile::new(tree, log);
            write_json(&out, &file)?;
            emit(
                &BuildReport {
                    build_log: &file.build_log,
                    stats,
                },
                None,
            )
        }
        TreeCommand::Stats { tree, output } => {
            announce("tree stats", None, &serde_json::json!({ "tree": tree }));
            let file: TreeFile = read_json(&tree)?;
            let tree = file.into_tree()?;
            emit(&tree_stats(&tree), output.out.as_deref())
        }
    }
}
