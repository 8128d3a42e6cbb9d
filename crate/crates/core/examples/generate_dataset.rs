//! Generates a small synthetic dataset, summarises it and writes it as
//! PPM/PGM tiles under a temporary directory.

use rafcn::data::{class_fractions, generate, read_split, write_dataset, GeneratorConfig, Split};
use rafcn::Result;

fn main() -> Result<()> {
    let config = GeneratorConfig {
        num_train: 40,
        num_val: 8,
        num_test: 8,
        ..GeneratorConfig::default()
    };
    let dataset = generate(&config)?;
    let (a, b) = config.confusable_pair();
    println!("tile {:?}, {} classes, confusable pair ({a}, {b})", config.tile, config.num_classes);

    let fractions = class_fractions(&dataset.train, config.num_classes);
    for (k, f) in fractions.iter().enumerate() {
        println!("  class {k}: {:5.1}% of labelled training pixels", 100.0 * f);
    }
    let ambiguous = dataset.train.iter().filter(|s| !s.ambiguous.is_empty()).count();
    println!("{ambiguous} of {} training tiles carry an ambiguous quadrant", dataset.train.len());
    if let Some(s) = dataset.train.iter().find(|s| !s.ambiguous.is_empty()) {
        for r in &s.ambiguous {
            println!("  region {:?} label {} marker {:?}", r.region, r.label, r.marker);
        }
    }

    let dir = std::env::temp_dir().join("rafcn-example-data");
    write_dataset(&dataset, &dir)?;
    let back = read_split(&dir, Split::Val)?;
    println!("wrote {} and read back {} validation tiles", dir.display(), back.len());
    Ok(())
}
