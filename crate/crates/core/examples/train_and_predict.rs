//! Trains a serial relation network for a short budget, evaluates it on the
//! test split and writes a colour-coded prediction for one tile.
//!
//! `cargo run --release --example train_and_predict -- [iterations]`

use rafcn::commands::{colorize, eval_network};
use rafcn::config::RunConfig;
use rafcn::data::{generate, netpbm};
use rafcn::train::Trainer;
use rafcn::{IntegrationMode, Result};

fn main() -> Result<()> {
    let iters = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(600);
    let mut config = RunConfig::default();
    config.network.mode = IntegrationMode::Serial;
    config.data.num_train = 600;
    config.train.max_iters = iters;
    config.train.eval_every = 100;
    config.output_dir = std::env::temp_dir().join("rafcn-example-run");

    let dataset = generate(&config.data)?;
    let mut trainer = Trainer::new(config.clone())?;
    let summary = trainer.run(&dataset.train, &dataset.val, Some(&config.output_dir))?;
    for r in &summary.log {
        println!(
            "iter {:5}  train {:.4}  val {:.4}  val mean F1 {:.4}  lr {:.0e}",
            r.iter, r.train_loss, r.val_loss, r.val_mean_f1, r.lr
        );
    }

    let report = eval_network(trainer.best_network(), &dataset.test)?;
    print!("{}", report.to_table());

    let sample = &dataset.test[0];
    let pred = trainer.best_network().predict(&sample.image)?;
    let out = config.output_dir.join("prediction.ppm");
    netpbm::write_ppm(&colorize(&pred)?, &out)?;
    println!("checkpoints and colour prediction in {}", config.output_dir.display());
    Ok(())
}
