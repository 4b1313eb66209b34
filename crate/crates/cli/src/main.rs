use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfgs::commands::*;
use sfgs::{CliError, Result};

/// Submanifold field tools for 3D Gaussian primitives.
#[derive(Debug, Parser)]
#[command(name = "sfgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic primitive dataset.
    Gen(GenArgs),
    /// Sample field clouds from a PLY file or dataset.
    Sample(SampleArgs),
    /// Recover primitive parameters from stored clouds.
    Recover(RecoverArgs),
    /// Manifold distance between two sets of primitives.
    Mdist(MdistArgs),
    /// Check that equivalent parameterizations give identical fields.
    Equiv(EquivArgs),
    /// Train a VAE.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Decode a straight latent path between two records.
    Interp(InterpArgs),
    /// Reconstruction error under latent noise.
    Perturb(PerturbArgs),
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SFGS_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| CliError::Usage(format!("SFGS_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CliError::Usage("SFGS_THREADS must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cmd: Command) -> Result<()> {
    init_threads()?;
    match cmd {
        Command::Gen(a) => {
            let s = run_gen(&a)?;
            println!("wrote {} records to {}", s.config.count, s.out.display());
        }
        Command::Sample(a) => {
            let h = run_sample(&a)?;
            println!("sampled {} clouds of {} points to {}", h.count, h.points, a.out.display());
        }
        Command::Recover(a) => {
            let s = run_recover(&a)?;
            println!("recovered {} primitives to {}", s.count, s.out.display());
        }
        Command::Mdist(a) => {
            let r = run_mdist(&a)?;
            println!("pairs {} mean {:.6e} median {:.6e} max {:.6e}", r.distance.count, r.distance.mean, r.distance.median, r.distance.max);
        }
        Command::Equiv(a) => {
            let r = run_equiv(&a)?;
            println!(
                "records {} fields_equal {} max_field_dev {:.3e} max_mdist {:.3e} min_param_l1 {:.6}",
                r.records.len(),
                r.all_fields_equal,
                r.max_field_deviation,
                r.max_mdist,
                r.min_param_l1
            );
        }
        Command::Train(a) => {
            let r = run_train(&a)?;
            for e in &r.epochs {
                println!("epoch {:>3} loss {} heldout_mdist {:.6}", e.epoch, e.loss.map_or("-".to_string(), |l| format!("{l:.6}")), e.heldout_mdist);
            }
        }
        Command::Eval(a) => {
            let r = run_eval(&a)?;
            let res = &r.result;
            println!(
                "{} records: mdist {:.6} ± {:.6}, recovered {:.6}, param_l1 {:.6}, recovery failures {}",
                res.mdist.count, res.mdist.mean, res.mdist.std_err, res.recover_mdist.mean, res.param_l1.mean, res.recover_failures
            );
        }
        Command::Interp(a) => {
            let r = run_interp(&a)?;
            println!("wrote {} interpolation steps to {}", r.steps.len(), a.out.display());
        }
        Command::Perturb(a) => {
            for r in run_perturb(&a)? {
                println!("sigma {:.3} mdist {:.6} ± {:.6}", r.sigma, r.mean_mdist, r.std_err);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
