use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use routed_attention::attention::Aggregator;
use routed_attention::config::{load_task_spec, ExperimentConfig};
use routed_attention::gradcheck::attention_grad_check;
use routed_attention::harness::{self, MetricsRecord};
use routed_attention::tasks::{generate, Split};
use routed_attention::{Error, Result};

/// Attention with linear, simple-routing or EM-routing head aggregation.
#[derive(Parser)]
#[command(name = "routed-attention", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on one split of its dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train several configs on one task and tabulate the results.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        /// Where to write the CSV table.
        #[arg(long, default_value = "comparison.csv")]
        csv: PathBuf,
    },
    /// Finite-difference check of attention plus one aggregator.
    Gradcheck {
        #[arg(long)]
        kind: Aggregator,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fail when the max relative error reaches this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Generate a synthetic dataset as TSV files.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn print_record(prefix: &str, r: &MetricsRecord) {
    eprintln!(
        "{prefix}epoch {:>3} {:<5} loss {:.4} acc {:.4} ({:.1}s)",
        r.epoch, r.split, r.loss, r.accuracy, r.wall_clock_seconds
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = generate(&cfg.task)?;
            let out = harness::train_on(&cfg, &data, &mut |r| print_record("", r))?;
            println!("{}", serde_json::to_string(&out.test).expect("record serialises"));
            eprintln!(
                "best epoch {}, {} parameters, {:.2} steps/s, checkpoint {}",
                out.best_epoch,
                out.param_count,
                out.steps_per_second,
                out.checkpoint.display()
            );
        }
        Command::Evaluate { checkpoint, split } => {
            let rec = harness::evaluate(&checkpoint, split)?;
            println!("{}", serde_json::to_string(&rec).expect("record serialises"));
        }
        Command::Compare { configs, csv } => {
            let cfgs = configs.iter().map(|p| ExperimentConfig::load(p)).collect::<Result<Vec<_>>>()?;
            let cmp = harness::compare(&cfgs, &mut |name, r| print_record(&format!("[{name}] "), r))?;
            std::fs::write(&csv, cmp.to_csv())?;
            print!("{}", cmp.to_table());
        }
        Command::Gradcheck { kind, seed, tolerance } => {
            let r = attention_grad_check(kind, seed)?;
            println!(
                "{{\"kind\":\"{kind}\",\"seed\":{seed},\"coordinates\":{},\"max_rel_error\":{:e}}}",
                r.coordinates, r.max_rel_error
            );
            if r.max_rel_error >= tolerance {
                return Err(Error::Numeric {
                    op: "gradcheck",
                    detail: format!("max relative error {:e} exceeds {tolerance:e}", r.max_rel_error),
                });
            }
        }
        Command::GenData { spec, out } => {
            let spec = load_task_spec(&spec)?;
            let data = generate(&spec)?;
            data.write_dir(&out)?;
            eprintln!(
                "wrote {}/{}/{} examples to {}",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = e.category();
            let msg = serde_json::json!({ "error": c.as_str(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(c.exit_code() as u8)
        }
    }
}
