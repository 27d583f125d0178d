use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use suplora::config::RunConfig;
use suplora::pipeline::Pipeline;
use suplora::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_CHECKS: u8 = 3;

#[derive(Parser)]
#[command(
    name = "suplora-lab",
    version,
    about = "Group-wise concept erasure with supertype-preserving adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for checkpoints, logs and reports.
    #[arg(long, global = true, env = "SUPLORA_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Overrides `world.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser on the synthetic world.
    Pretrain {
        /// Overrides `denoiser.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Group erased concepts under supertypes.
    Hierarchy,
    /// Train one key and one value adapter per group.
    Erase,
    /// Merge all adapters into the base weights.
    Fuse,
    /// Score the fused and routed models against the pretrained one.
    Eval,
    /// Run the identity, gradient and projector suites.
    Checks,
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Some(config_path) = cli.config.as_deref() else {
        eprintln!("error: --config <file> is required");
        return ExitCode::from(EXIT_USAGE);
    };
    let mut config = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(seed) = cli.seed {
        config.world.seed = seed;
    }
    if let Command::Pretrain { steps: Some(s) } = cli.command {
        config.denoiser.steps = s;
    }
    let workdir = cli
        .workdir
        .or_else(|| config.paths.workdir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let pipeline = Pipeline::new(config, workdir);

    let outcome = match cli.command {
        Command::Pretrain { .. } => pipeline.pretrain().map(|s| {
            println!("pretrained {} steps, final loss {:.6}", s.steps, s.final_loss);
            println!("mean loss over the last 1000 steps {:.6}", s.trailing_loss);
        }),
        Command::Hierarchy => pipeline.hierarchy().map(|h| {
            for g in &h.groups {
                println!("group {} ({}): {}", g.group_id, g.supertype, g.members.join(", "));
            }
            println!(
                "mean similarity within groups {:.4}, across groups {:.4}",
                h.intra_similarity, h.inter_similarity
            );
        }),
        Command::Erase => pipeline.erase().map(|reports| {
            for r in &reports {
                println!(
                    "group {} ({}): {} steps, masked attention {:.4} -> {:.4}, bound violations {}",
                    r.group_id, r.supertype, r.steps, r.masked_mass_before, r.masked_mass_after, r.bound_violations
                );
            }
        }),
        Command::Fuse => pipeline.fuse().map(|s| {
            for (name, r) in [("key", &s.key), ("value", &s.value)] {
                println!(
                    "{name}: target alignment {:.4}, general consistency {:.4}, normal residual {:.2e}",
                    r.mean_target_alignment(),
                    r.general_consistency,
                    r.normal_residual
                );
            }
        }),
        Command::Eval => pipeline.eval().map(|e| {
            for (name, r) in [("fused", &e.fused), ("routed", &e.routed)] {
                let s = &r.summary;
                println!(
                    "{name}: masked attention {:.4} -> {:.4}, erased error {:.5} -> {:.5}, supertype drift {:.5} -> {:.5}",
                    s.masked_attention_before,
                    s.masked_attention_after,
                    s.erased_error_before,
                    s.erased_error_after,
                    s.supertype_drift_before,
                    s.supertype_drift_after
                );
            }
            println!(
                "parameters: {} group-wise, {} concept-wise (ratio {})",
                e.storage.params_groupwise, e.storage.params_conceptwise, e.storage.ratio
            );
        }),
        Command::Checks => match pipeline.checks() {
            Ok(suites) => {
                let mut failed = 0;
                for s in &suites {
                    println!("{}", s.line());
                    for f in &s.failures {
                        println!("  {f}");
                    }
                    failed += s.total - s.passed;
                }
                if failed > 0 {
                    eprintln!("{failed} checks failed");
                    return ExitCode::from(EXIT_CHECKS);
                }
                Ok(())
            }
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
