//! Train a small two-pipeline network on synthetic phantoms with the library
//! API, save the best model and evaluate the reloaded checkpoint.
//!
//! cargo run --release --example train_phantoms [epochs]

use volnet::arch::Preset;
use volnet::data::{generate_phantoms, split_dataset, Dataset, PhantomConfig, Roi, Task};
use volnet::eval::evaluate;
use volnet::train::{load_checkpoint, save_checkpoint, train_loop, Checkpoint, TrainConfig};

fn main() -> volnet::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path().to_path_buf();
    let manifest = generate_phantoms(
        &PhantomConfig {
            per_class: 36,
            ..Default::default()
        },
        &dir,
    )?;
    let config = TrainConfig {
        task: Task::AdNc,
        preset: Preset::Proposed2RoiSmri,
        width: Some(4),
        eta: 8,
        max_epochs: epochs,
        seed: 1,
        ..Default::default()
    };
    let split = split_dataset(&manifest, config.seed)?;
    let data = Dataset::load(&manifest, &[Roi::SmriL, Roi::SmriR], config.task)?;
    let spec = config.preset.build(2, config.width, config.keep_prob)?;

    let mut log = |_: &volnet::train::TrainState, r: &volnet::train::EpochRecord| {
        println!(
            "epoch {:>2}  train loss {:.4} acc {:.3}  val loss {}  lr {:.1e}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            r.lr
        );
        Ok(())
    };
    let outcome = train_loop(&spec, &data, &split, &config, None, &mut log)?;

    let path = dir.join("best.ckpt");
    save_checkpoint(&Checkpoint::model(&config, outcome.best_params, &outcome.state.history, outcome.best_epoch), &path)?;
    let net = load_checkpoint(&path)?.network()?;
    let test: Vec<usize> = data.members(&split.test)?.into_iter().flatten().collect();
    let report = evaluate(&net, &data, &test, config.preset.name(), "test", config.theta)?;
    println!("best epoch {:?}", outcome.best_epoch);
    println!("{}", report.summary_line());
    Ok(())
}
