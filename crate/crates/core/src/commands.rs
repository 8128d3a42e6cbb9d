//! The operations behind each command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, netpbm, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::gradsuite::{self, CheckResult};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::network::Network;
use crate::relation::IntegrationMode;
use crate::tensor::{OpKind, Tensor};
use crate::train::{self, evaluate, TrainSummary, Trainer};

/// Legend colours in class order: white, blue, cyan, green, yellow, red,
/// then two extras for larger class counts.
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
    [255, 0, 255],
    [128, 128, 128],
];
/// Colour used for ignored pixels.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

/// Writes the dataset described by `config.data` to `<output_dir>/data`.
/// Nothing is written when the configuration is invalid.
pub fn cmd_generate(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let dataset = data::generate(&config.data)?;
    let dir = config.data_dir();
    data::write_dataset(&dataset, &dir)?;
    Ok(dir)
}

fn load_splits(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let dir = config.data_dir();
    let meta = data::read_meta(&dir)?;
    if meta.tile != config.network.tile || meta.num_classes != config.network.num_classes {
        return Err(Error::Config(format!(
            "dataset in {} has tile {:?} and {} classes; the network expects {:?} and {}",
            dir.display(),
            meta.tile,
            meta.num_classes,
            config.network.tile,
            config.network.num_classes
        )));
    }
    Ok((data::read_split(&dir, Split::Train)?, data::read_split(&dir, Split::Val)?))
}

/// Trains on `<output_dir>/data`, writing `best.ckpt`, `last.ckpt` and
/// `train_log.jsonl` to `output_dir`. With `resume`, continues from that
/// checkpoint and appends to the existing log.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let (train_split, val_split) = load_splits(config)?;
    let out = config.output_dir.as_path();
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path, Some(config.clone()))?,
        None => {
            let log = out.join(train::TRAIN_LOG);
            if log.exists() {
                fs::remove_file(log)?;
            }
            Trainer::new(config.clone())?
        }
    };
    trainer.run(&train_split, &val_split, Some(out))
}

/// Scores a checkpoint on one split of the dataset it was trained on.
/// `data_dir` overrides the dataset location stored in the checkpoint.
pub fn cmd_eval(checkpoint: &Path, split: Split, data_dir: Option<&Path>) -> Result<MetricsReport> {
    let (config, net) = train::load_checkpoint(checkpoint)?;
    let dir = data_dir.map_or_else(|| config.data_dir(), Path::to_path_buf);
    let samples = data::read_split(&dir, split)?;
    let (_, cm) = evaluate(&net, &samples)?;
    cm.report()
}

/// Maps class `k` to `PALETTE[k]` and ignored pixels to [`IGNORE_COLOR`].
pub fn colorize(labels: &LabelMap) -> Result<Tensor> {
    let (h, w) = labels.dims();
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (pix, &l) in labels.data().iter().enumerate() {
        let rgb = if l == IGNORE_LABEL {
            IGNORE_COLOR
        } else {
            *PALETTE.get(l as usize).ok_or(Error::LabelRange {
                label: u32::from(l),
                classes: PALETTE.len(),
            })?
        };
        for c in 0..3 {
            data[c * plane + pix] = f64::from(rgb[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Inverse of [`colorize`]; any colour outside the legend is an error.
pub fn decolorize(image: &Tensor) -> Result<LabelMap> {
    let (_, h, w) = image.chw()?;
    let plane = h * w;
    let data = image.data();
    let labels = (0..plane)
        .map(|pix| {
            let rgb = [0, 1, 2].map(|c| netpbm::quantize(data[c * plane + pix]));
            if rgb == IGNORE_COLOR {
                return Ok(IGNORE_LABEL);
            }
            PALETTE
                .iter()
                .position(|&p| p == rgb)
                .map(|k| k as u8)
                .ok_or_else(|| Error::Degenerate(format!("colour {rgb:?} at pixel {pix} is not in the legend")))
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(h, w, labels)
}

/// Writes the argmax label raster for one image and, optionally, its legend colouring.
pub fn cmd_predict(
    checkpoint: &Path,
    image_path: &Path,
    out_labels: &Path,
    out_color: Option<&Path>,
) -> Result<LabelMap> {
    let (config, net) = train::load_checkpoint(checkpoint)?;
    let image = netpbm::read_ppm(image_path)?;
    let (c, h, w) = image.chw()?;
    let [th, tw] = config.network.tile;
    if (c, h, w) != (config.network.in_channels, th, tw) {
        return Err(Error::Parse {
            path: Some(image_path.to_path_buf()),
            offset: 0,
            message: format!("image is {c}×{h}×{w}; the checkpoint expects {}×{th}×{tw}", config.network.in_channels),
        });
    }
    let labels = net.predict(&image)?;
    netpbm::write_pgm(&labels, out_labels)?;
    if let Some(path) = out_color {
        netpbm::write_ppm(&colorize(&labels)?, path)?;
    }
    Ok(labels)
}

pub fn cmd_gradcheck(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    gradsuite::run_suite(fault)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: IntegrationMode,
    pub mean_f1: f64,
    pub oa: f64,
}

/// Trains one network per integration mode with identical seeds and budget
/// and scores each on the test split. Runs land in `<output_dir>/ablation/<mode>`
/// when `write_runs` is set.
pub fn ablate(config: &RunConfig, dataset: &Dataset, write_runs: bool) -> Result<Vec<AblationRow>> {
    config.validate()?;
    IntegrationMode::ALL
        .into_iter()
        .map(|mode| {
            let mut run = config.clone();
            run.network.mode = mode;
            run.output_dir = config.output_dir.join("ablation").join(mode.as_str());
            let mut trainer = Trainer::new(run.clone())?;
            let out = write_runs.then_some(run.output_dir.as_path());
            if let Some(dir) = out {
                let _ = fs::remove_file(dir.join(train::TRAIN_LOG));
            }
            trainer.run(&dataset.train, &dataset.val, out)?;
            let (_, cm) = evaluate(trainer.best_network(), &dataset.test)?;
            Ok(AblationRow {
                mode,
                mean_f1: cm.mean_f1()?,
                oa: cm.overall_accuracy()?,
            })
        })
        .collect()
}

/// Generates the configured dataset in memory, runs [`ablate`] and writes
/// `ablation.json` to `output_dir`.
pub fn cmd_ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let dataset = data::generate(&config.data)?;
    let rows = ablate(config, &dataset, true)?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("ablation.json"),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    Ok(rows)
}

/// Mean F1 and OA per model, in percent.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<14} {:>8} {:>8}\n", "mode", "mean_f1", "oa");
    for r in rows {
        out += &format!(
            "{:<14} {:>8.2} {:>8.2}\n",
            r.mode.model_name(),
            100.0 * r.mean_f1,
            100.0 * r.oa
        );
    }
    out
}

/// Confusion matrix of `truth` against itself, for sanity checks of the scorer.
pub fn oracle_report(truth: &[LabelMap], classes: usize) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(classes);
    for t in truth {
        cm.accumulate(t, t)?;
    }
    cm.report()
}

/// Evaluates an in-memory network; used by examples and tests.
pub fn eval_network(net: &Network, samples: &[Sample]) -> Result<MetricsReport> {
    evaluate(net, samples)?.1.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_round_trip() {
        let labels = LabelMap::new(2, 4, vec![0, 1, 2, 3, 4, 5, IGNORE_LABEL, 7]).unwrap();
        let color = colorize(&labels).unwrap();
        assert_eq!(decolorize(&color).unwrap(), labels);
        assert_eq!(color.at(&[0, 0, 0]), 1.0);
        assert_eq!(color.at(&[2, 0, 1]), 1.0);
        assert_eq!(color.at(&[0, 0, 1]), 0.0);
    }

    #[test]
    fn palette_is_injective() {
        for (i, a) in PALETTE.iter().enumerate() {
            assert_ne!(*a, IGNORE_COLOR);
            for b in &PALETTE[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn truth_as_prediction_scores_one() {
        let truth = vec![LabelMap::new(2, 2, vec![0, 1, 2, IGNORE_LABEL]).unwrap()];
        let report = oracle_report(&truth, 3).unwrap();
        assert_eq!((report.mean_f1, report.miou, report.oa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn generate_rejects_bad_tile_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.output_dir = dir.path().join("run");
        cfg.network.tile = [24, 24];
        cfg.data.tile = [24, 24];
        assert!(matches!(cmd_generate(&cfg), Err(Error::Config(_))));
        assert!(!cfg.output_dir.exists());
    }

    #[test]
    fn ablation_table_has_five_rows() {
        let rows: Vec<AblationRow> = IntegrationMode::ALL
            .into_iter()
            .map(|mode| AblationRow {
                mode,
                mean_f1: 0.5,
                oa: 0.75,
            })
            .collect();
        let table = format_ablation(&rows);
        assert_eq!(table.lines().count(), 6);
        assert!(table.contains("S-RA-FCN"));
        let json: serde_json::Value = serde_json::to_value(&rows).unwrap();
        for row in json.as_array().unwrap() {
            let mut keys: Vec<&String> = row.as_object().unwrap().keys().collect();
            keys.sort();
            assert_eq!(keys, ["mean_f1", "mode", "oa"]);
        }
    }
}
