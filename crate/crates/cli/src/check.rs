use anyhow::Result;
use clap::Subcommand;
use kep_core::objectives::{gradient_suite, GradCheckRow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{announce, emit, NumericFailure, OutputArgs};

/// Largest accepted relative error between analytic and numeric gradients.
pub(crate) const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Subcommand, Debug)]
pub(crate) enum CheckCommand {
    /// Compare loss gradients with central finite differences.
    Grad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random batches per loss.
        #[arg(long, default_value_t = 20)]
        batches: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Serialize)]
struct GradReport {
    seed: u64,
    tolerance: f64,
    passed: bool,
    rows: Vec<GradCheckRow>,
}

pub(crate) fn run(cmd: CheckCommand) -> Result<()> {
    match cmd {
        CheckCommand::Grad {
            seed,
            batches,
            output,
        } => {
            announce(
                "check grad",
                Some(seed),
                &serde_json::json!({ "batches": batches }),
            );
            let rows = gradient_suite(&mut ChaCha8Rng::seed_from_u64(seed), batches);
            let passed = rows.iter().all(|r| r.max_error <= GRAD_TOLERANCE);
            emit(
                &GradReport {
                    seed,
                    tolerance: GRAD_TOLERANCE,
                    passed,
                    rows,
                },
                output.out.as_deref(),
            )?;
            if passed {
                Ok(())
            } else {
                Err(NumericFailure(format!("gradient error above {GRAD_TOLERANCE}")).into())
            }
        }
    }
}
