//! Scores a hand-made prediction with the confusion matrix and prints the
//! per-class table.

use rafcn::metrics::ConfusionMatrix;
use rafcn::{LabelMap, Result, IGNORE_LABEL};

fn main() -> Result<()> {
    let truth = LabelMap::new(3, 4, vec![0, 0, 1, 1, 0, 2, 2, 1, IGNORE_LABEL, 2, 2, 1])?;
    let pred = LabelMap::new(3, 4, vec![0, 1, 1, 1, 0, 2, 0, 1, 3, 2, 2, 2])?;

    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&pred, &truth)?;
    let report = cm.report()?;
    print!("{}", report.to_table());
    println!("{}", report.to_json()?);
    Ok(())
}
