use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctn_cli::commands;
use ctn_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "ctn", version, about = "Coronary vessel segmentation with a U-Net / 3D Swin hybrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantoms and a dataset manifest.
    GenData(Common),
    /// Train on the manifest's train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<output_dir>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint or a directory of predictions on a manifest split.
    Evaluate(Common),
    /// Write label masks predicted by a checkpoint.
    Predict(Common),
    /// Train and score the fusion-stage grid and both fusion modes.
    Ablate(Common),
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| RunConfig::load(c.config.as_deref(), &c.overrides);
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let m = commands::gen_data(&cfg)?;
            println!(
                "wrote {} phantoms (train {}, val {}, test {}) to {}",
                m.entries.len(),
                m.count(ctn_core::volio::Split::Train),
                m.count(ctn_core::volio::Split::Val),
                m.count(ctn_core::volio::Split::Test),
                m.root.display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            let state = commands::train(&cfg, resume, &mut |r| {
                println!(
                    "epoch {:>4}  step {:>6}  lr {:.1e}  loss {:.5}  val_dice {}",
                    r.epoch,
                    r.step,
                    r.lr,
                    r.mean_loss,
                    fmt_opt(r.val_dice)
                )
            })?;
            if let Some(b) = state.best {
                println!("best epoch {} (val_dice {})", b.epoch, fmt_opt(b.val_dice));
            }
        }
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            let report = commands::cmd_evaluate(&cfg)?;
            print!("{}", report.to_csv()?);
        }
        Command::Predict(c) => {
            let cfg = load(&c)?;
            for p in commands::cmd_predict(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            let (stages, modes) = commands::cmd_ablate(&cfg, &mut |name, r| {
                println!("[{name}] epoch {} loss {:.5}", r.epoch, r.mean_loss)
            })?;
            for row in stages.iter().chain(&modes) {
                println!(
                    "{:<16} dice {:.4}  dice_a {:.4}  dice_c {:.4}  assd {}  sp {:.4}  sr {:.4}",
                    row.name,
                    row.mean.dice,
                    row.mean.dice_a,
                    row.mean.dice_c,
                    fmt_opt(row.mean.assd_mm),
                    row.mean.sp,
                    row.mean.sr
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
