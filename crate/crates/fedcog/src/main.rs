use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedcog::config::parse_config;
use fedcog::experiment::{resolve_output_dir, run_experiment, write_results};
use fedcog::generation::{dump_images, generate};
use fedcog::nn::ModelParams;
use fedcog::util::mix_seed;
use fedcog::{data, gradcheck};

#[derive(Parser)]
#[command(name = "fedcog", about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and persist results.
    Run { config: PathBuf },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Number of random model/loss trials.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Generate one synthetic batch from a fresh model and dump PGM images.
    DemoGenerate { config: PathBuf },
}

fn run(cli: Cli) -> fedcog::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = parse_config(&config)?;
            let result = run_experiment(&cfg)?;
            let dir = resolve_output_dir(&cfg);
            let paths = write_results(&result, &dir)?;
            for p in &paths {
                println!("wrote {}", p.display());
            }
            if let Some(s) = result.seed_runs.last() {
                println!(
                    "final global accuracy (seed {}): {:.4}",
                    s.seed, s.final_global_acc
                );
            }
            Ok(())
        }
        Command::Gradcheck { trials, seed } => {
            let report = gradcheck::run_suite(trials, seed)?;
            println!(
                "gradcheck: {} comparisons, max relative error {:.3e}",
                report.checked, report.max_rel_err
            );
            if report.passed() {
                println!("gradcheck: PASS");
                Ok(())
            } else {
                Err(fedcog::Error::Input(
                    "gradient check failed tolerance".into(),
                ))
            }
        }
        Command::DemoGenerate { config } => {
            let cfg = parse_config(&config)?;
            let (train, _test) = fedcog::experiment::build_datasets(&cfg)?;
            let seed = *cfg.seeds.first().unwrap_or(&1);
            let dims = [train.dim(), 120, 84, train.num_classes];
            let model = ModelParams::random_init(&dims, mix_seed(&[seed, 0x10]));
            let hist = data::label_histogram(&train);
            let gen = generate(
                &model,
                &model,
                &hist,
                &cfg.gen_config()?,
                mix_seed(&[seed, 0x6a]),
            )?;
            let dir = resolve_output_dir(&cfg).join("demo_gen");
            let side = (train.dim() as f64).sqrt().round() as usize;
            if side * side == train.dim() {
                let paths = dump_images(&gen, side, &dir)?;
                println!("wrote {} images under {}", paths.len(), dir.display());
            } else {
                println!(
                    "feature dim {} is not square; skipping image dump",
                    train.dim()
                );
            }
            println!("generated {} samples", gen.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
