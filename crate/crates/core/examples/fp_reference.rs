//! fp64 SGD-with-momentum curve for a preset, the baseline the integer
//! trainer is compared against.
//!
//! `cargo run --release --example fp_reference -- DATA_DIR [ARCH] [EPOCHS]`

use std::path::PathBuf;

use int8_train::network::NetworkSpec;
use int8_train::oracle::{shadow_train_fp, ShadowConfig};
use int8_train::train::{load_datasets, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let data = PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let arch = args.next().unwrap_or_else(|| "lenet-mnist".into());
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);

    let mut cfg = TrainConfig::for_arch(&arch)?;
    cfg.data = data;
    let (train, val) = load_datasets(&cfg)?;
    let spec = NetworkSpec::preset(&arch)?;
    let shadow = ShadowConfig { epochs, batch_size: cfg.batch_size, seed: cfg.seed, ..Default::default() };
    for e in shadow_train_fp(&spec, &train, Some(&val), &shadow)? {
        println!(
            "epoch {:>3}  train {:.2}%  val {:.2}%  loss {:.4}",
            e.epoch,
            100.0 * e.train_acc,
            100.0 * e.val_acc.unwrap_or(0.0),
            e.train_loss
        );
    }
    Ok(())
}
