use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use int8_train::data::{load_cifar10_dir, load_mnist_dir, Split};
use int8_train::train::{evaluate, run_training, Checkpoint, DatasetKind, TrainConfig};
use int8_train::{Network, Result, RoundingConfig};

#[derive(Parser)]
#[command(name = "int8-train", version, about = "Integer-only neural network training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a network.
    Train {
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        arch: Option<String>,
        /// `BITS` or `EPOCH:BITS,...`, e.g. `1:5,101:4,151:3`.
        #[arg(long)]
        mu_schedule: Option<String>,
        /// nearest, stochastic or pseudo-stochastic.
        #[arg(long)]
        rounding_g: Option<String>,
        #[arg(long)]
        rounding_ae: Option<String>,
        #[arg(long)]
        rounding_loss: Option<String>,
        /// uniform or normal.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Report validation accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn train(command: Command) -> Result<()> {
    let Command::Train {
        config,
        epochs,
        seed,
        arch,
        mu_schedule,
        rounding_g,
        rounding_ae,
        rounding_loss,
        init,
        batch_size,
        data,
        metrics,
        checkpoint,
        resume,
        print_config,
    } = command
    else {
        unreachable!()
    };
    let path_str = |p: PathBuf| p.display().to_string();
    let overrides: Vec<(String, String)> = [
        ("arch", arch),
        ("epochs", epochs.map(|v| v.to_string())),
        ("seed", seed.map(|v| v.to_string())),
        ("mu_schedule", mu_schedule),
        ("rounding_g", rounding_g),
        ("rounding_ae", rounding_ae),
        ("rounding_loss", rounding_loss),
        ("init", init),
        ("batch_size", batch_size.map(|v| v.to_string())),
        ("data", data.map(path_str)),
        ("metrics", metrics.map(path_str)),
        ("checkpoint", checkpoint.map(path_str)),
        ("resume", resume.map(path_str)),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
    .collect();
    let cfg = match config {
        Some(path) => TrainConfig::from_file(&path, &overrides)?,
        None => TrainConfig::parse("", &overrides)?,
    };
    if print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let summary = run_training(&cfg, |m| {
        let val = m.val_acc.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "-".into());
        eprintln!(
            "epoch {:>3}  m_u {}  train {:.2}%  val {}  loss {:.4}  {:.1}s",
            m.epoch,
            m.m_u,
            100.0 * m.train_acc,
            val,
            m.train_loss,
            m.wall_seconds
        );
    })?;
    if let Some(acc) = summary.final_val_acc {
        println!("validation accuracy: {:.2}%", 100.0 * acc);
    }
    Ok(())
}

fn eval(checkpoint: PathBuf, data: PathBuf) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint)?;
    let spec = ck.to_spec()?;
    let kind = DatasetKind::for_arch(&ck.arch)?;
    let sub = data.join(kind.subdir());
    let dir = if sub.is_dir() { sub } else { data };
    let val = match kind {
        DatasetKind::Mnist => load_mnist_dir(&dir, Split::Test)?,
        DatasetKind::Cifar10 => load_cifar10_dir(&dir, Split::Test)?,
    };
    let batch = spec.max_batch().min(256);
    let mut net = Network::new(spec, RoundingConfig::default(), batch)?;
    let acc = evaluate(&mut net, &val)?;
    println!(
        "{} after {} epochs: {:.2}% on {} test samples",
        ck.arch,
        ck.epoch,
        100.0 * acc,
        val.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        c @ Command::Train { .. } => train(c),
        Command::Eval { checkpoint, data } => eval(checkpoint, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
