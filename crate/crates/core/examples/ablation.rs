//! Trains all five integration modes with the same seeds and budget and
//! prints mean F1 and OA per model.
//!
//! `cargo run --release --example ablation -- [iterations] [seed]`
//! The default 5000-iteration budget takes a few minutes per mode.

use rafcn::commands::{ablate, format_ablation};
use rafcn::config::RunConfig;
use rafcn::data::generate;
use rafcn::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = RunConfig::default();
    if let Some(iters) = args.next().and_then(|a| a.parse().ok()) {
        config.train.max_iters = iters;
    }
    if let Some(seed) = args.next().and_then(|a| a.parse().ok()) {
        config.set_seed(seed);
    }
    let dataset = generate(&config.data)?;
    let rows = ablate(&config, &dataset, false)?;
    print!("{}", format_ablation(&rows));
    Ok(())
}
