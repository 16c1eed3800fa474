use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semisup_core::experiment::{gen_data, run_ablate, run_train, ExperimentSpec};
use semisup_core::verify::{run_all, VerifyOptions};
use semisup_core::Error;

#[derive(Parser)]
#[command(name = "semisup", version, about = "Semi-supervised clip classification on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed. For `ablate` this is the first of consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train(Common),
    /// Train baseline, +ACL, +MTL and both for every seed.
    Ablate(Common),
    /// Run gradient, oracle and invariant checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write the synthetic dataset manifest and separability report.
    GenData(Common),
}

fn load(common: &Common, consecutive: bool) -> Result<(ExperimentSpec, PathBuf), Error> {
    let mut spec = match &common.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seeds = if consecutive { (s..s + spec.seeds.len() as u64).collect() } else { vec![s] };
    }
    spec.validate()?;
    let out = common.out.clone().or_else(|| spec.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    Ok((spec, out))
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train(common) => {
            let (spec, out) = load(&common, false)?;
            for s in run_train(&spec, &out)? {
                let last = s.final_pseudo_label_accuracy.map_or("none accepted".to_string(), |a| format!("{a:.4}"));
                println!(
                    "seed {}: top1 {:.4} top5 {:.4} pseudo-label accuracy {:.4} -> {last}",
                    s.seed, s.final_top1, s.final_top5, s.first_fused_label_accuracy
                );
            }
            Ok(true)
        }
        Command::Ablate(common) => {
            let (spec, out) = load(&common, true)?;
            let summary = run_ablate(&spec, &out)?;
            for (name, m) in &summary.medians {
                println!("{name:<9} median top1 {m:.4}");
            }
            println!("ordering holds: {}; margin {:.2} points", summary.ordering_holds, summary.margin_points);
            Ok(true)
        }
        Command::Verify { seed, corrupt_gradient } => {
            let lines = run_all(&VerifyOptions { seed, corrupt_gradient })?;
            for l in &lines {
                println!("{l}");
            }
            Ok(lines.iter().all(|l| l.passed))
        }
        Command::GenData(common) => {
            let (spec, out) = load(&common, false)?;
            let seed = spec.seeds[0];
            for p in gen_data(&spec, seed, &out)? {
                println!(
                    "classes {} and {}: time-averaged accuracy {:.3}",
                    p.class_a, p.class_b, p.time_average_accuracy
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
