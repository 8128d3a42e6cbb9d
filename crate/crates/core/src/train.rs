//! Mini-batch training with Nadam, a plateau schedule and early stopping.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{epoch_batches, Sample};
use crate::error::{Error, Result};
use crate::labels::IGNORE_LABEL;
use crate::metrics::ConfusionMatrix;
use crate::network::{argmax_labels, loss, read_container, write_container, Container, Network};
use crate::optim::{NadamState, PlateauScheduler};
use crate::tensor::{Graph, Tensor, Var};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// One line of the training log, written after every validation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    /// Mean batch loss since the previous validation pass.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_f1: f64,
    /// Learning rate in effect during the interval.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<LogRecord>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub iters: u64,
}

/// Mean per-tile loss and the confusion matrix of argmax predictions.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<(f64, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    let mut total = 0.0;
    let mut scored = 0usize;
    for s in samples {
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let x = g.constant(s.image.clone());
        let logits = net.forward_bound(&mut g, &vars, x)?;
        if s.labels.data().iter().any(|&l| l != IGNORE_LABEL) {
            let l = loss(&mut g, logits, &s.labels, IGNORE_LABEL)?;
            total += g.value(l).item();
            scored += 1;
        }
        cm.accumulate(&argmax_labels(g.value(logits))?, &s.labels)?;
    }
    if scored == 0 {
        return Err(Error::Degenerate("evaluation split has no labelled pixels".into()));
    }
    Ok((total / scored as f64, cm))
}

/// Training state; everything needed to continue bit-for-bit is checkpointed.
pub struct Trainer {
    config: RunConfig,
    net: Network,
    /// Parameters with the lowest validation loss so far.
    best_net: Network,
    opt: NadamState,
    sched: PlateauScheduler,
    iter: u64,
    best_val: f64,
    stale: u32,
    log: Vec<LogRecord>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::init(config.network.clone())?;
        let opt = NadamState::new(
            config.train.optimizer,
            net.params().into_iter().map(|(_, t)| t),
        );
        let sched = PlateauScheduler::new(config.train.scheduler)?;
        Ok(Self {
            config,
            best_net: net.clone(),
            net,
            opt,
            sched,
            iter: 0,
            best_val: f64::INFINITY,
            stale: 0,
            log: Vec::new(),
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    /// `config` may differ from the stored one only in `train.max_iters`
    /// and `output_dir`.
    pub fn resume(path: &Path, config: Option<RunConfig>) -> Result<Self> {
        let container = read_container(BufReader::new(File::open(path)?))?;
        let stored = RunConfig::from_json(&container.config_json)?;
        let config = match config {
            Some(c) => {
                let mut expect = stored.clone();
                expect.train.max_iters = c.train.max_iters;
                expect.output_dir = c.output_dir.clone();
                if expect != c {
                    return Err(Error::Checkpoint(
                        "resume configuration differs from the checkpoint's".into(),
                    ));
                }
                c
            }
            None => stored,
        };
        let mut trainer = Trainer::new(config)?;
        trainer.net.load_params(&container.tensors)?;
        let names = trainer.param_names();
        let lookup = |k: &str| container.get(k).cloned();
        trainer.opt = NadamState::from_named(trainer.config.train.optimizer, &names, lookup)?;
        let scalar = |k: &str| {
            container
                .get(k)
                .map(Tensor::item)
                .ok_or_else(|| Error::Checkpoint(format!("missing training state {k}")))
        };
        trainer.sched.best = scalar("sched.best")?;
        trainer.sched.wait = scalar("sched.wait")? as u32;
        trainer.iter = scalar("train.iter")? as u64;
        trainer.best_val = scalar("train.best_val")?;
        trainer.stale = scalar("train.stale")? as u32;
        trainer.best_net = trainer.net.clone();
        if let Some(best) = path.parent().map(|d| d.join(BEST_CHECKPOINT)) {
            if best.exists() && best != path {
                trainer.best_net = load_checkpoint(&best)?.1;
            }
        }
        Ok(trainer)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// The parameters that scored the lowest validation loss. After a
    /// resume this is read from a sibling `best.ckpt` when one exists.
    pub fn best_network(&self) -> &Network {
        &self.best_net
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    fn param_names(&self) -> Vec<String> {
        self.net.params().into_iter().map(|(n, _)| n).collect()
    }

    /// Writes parameters, optimizer moments and schedule state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let names = self.param_names();
        let mut tensors: Vec<(String, Tensor)> = self
            .net
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        tensors.extend(self.opt.to_named(&names));
        for (name, v) in [
            ("sched.best", self.sched.best),
            ("sched.wait", f64::from(self.sched.wait)),
            ("train.iter", self.iter as f64),
            ("train.best_val", self.best_val),
            ("train.stale", f64::from(self.stale)),
        ] {
            tensors.push((name.into(), Tensor::scalar(v)));
        }
        let container = Container {
            config_json: self.config.to_json()?,
            tensors,
        };
        // write-then-rename keeps the previous file intact on failure
        let tmp = path.with_extension("tmp");
        write_container(BufWriter::new(File::create(&tmp)?), &container)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Runs one mini-batch update and returns its mean loss.
    pub fn step(&mut self, train: &[Sample]) -> Result<f64> {
        let batch = self.config.train.batch_size.min(train.len());
        let per_epoch = train.len().div_ceil(batch) as u64;
        let epoch = self.iter / per_epoch;
        let batches = epoch_batches(train.len(), batch, self.config.seed, epoch);
        let indices = &batches[(self.iter % per_epoch) as usize];

        let mut grads: Vec<Vec<f64>> = self
            .net
            .params()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        let mut batch_loss = 0.0;
        let mut used = 0usize;
        for &i in indices {
            let sample = &train[i];
            if sample.labels.data().iter().all(|&l| l == IGNORE_LABEL) {
                continue;
            }
            let mut g = Graph::new();
            let mut leaves: Vec<Var> = Vec::with_capacity(grads.len());
            let vars = self.net.bind_with(&mut g, &mut |g, _, t| {
                let v = g.param(t.clone());
                leaves.push(v);
                v
            });
            let x = g.constant(sample.image.clone());
            let logits = self.net.forward_bound(&mut g, &vars, x)?;
            let l = loss(&mut g, logits, &sample.labels, IGNORE_LABEL)?;
            g.backward(l)?;
            batch_loss += g.value(l).item();
            used += 1;
            for (acc, &v) in grads.iter_mut().zip(&leaves) {
                if let Some(gr) = g.grad(v) {
                    for (a, b) in acc.iter_mut().zip(gr) {
                        *a += b;
                    }
                }
            }
        }
        if used == 0 {
            return Err(Error::Degenerate("mini-batch has no labelled pixels".into()));
        }
        let inv = 1.0 / used as f64;
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        self.opt.step(&mut self.net.params_mut(), &grads)?;
        self.iter += 1;
        Ok(batch_loss * inv)
    }

    /// Trains until `max_iters` or early stopping. With `out_dir`, appends to
    /// the JSON-lines log and keeps `best.ckpt` and `last.ckpt` up to date;
    /// a non-finite loss aborts with the last good checkpoint left in place.
    pub fn run(&mut self, train: &[Sample], val: &[Sample], out_dir: Option<&Path>) -> Result<TrainSummary> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Degenerate("training needs non-empty train and val splits".into()));
        }
        let mut log_file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join(TRAIN_LOG))?)
            }
            None => None,
        };
        let cfg = self.config.train.clone();
        let mut running = 0.0;
        let mut count = 0u64;
        let mut stopped_early = false;
        while self.iter < cfg.max_iters {
            let batch_loss = self.step(train).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFinite {
                    op: format!(
                        "{op} at iteration {}; last good checkpoint kept",
                        self.iter + 1
                    ),
                },
                other => other,
            })?;
            running += batch_loss;
            count += 1;
            if self.iter % cfg.eval_every != 0 && self.iter != cfg.max_iters {
                continue;
            }
            let (val_loss, cm) = evaluate(&self.net, val)?;
            let record = LogRecord {
                iter: self.iter,
                train_loss: running / count as f64,
                val_loss,
                val_mean_f1: cm.mean_f1()?,
                lr: self.opt.lr,
            };
            running = 0.0;
            count = 0;
            let improved = val_loss < self.best_val;
            if improved {
                self.best_val = val_loss;
                self.stale = 0;
                self.best_net = self.net.clone();
            } else {
                self.stale += 1;
            }
            self.opt.lr = self.sched.observe(val_loss, self.opt.lr);
            if let (Some(dir), Some(f)) = (out_dir, log_file.as_mut()) {
                writeln!(f, "{}", serde_json::to_string(&record)?)?;
                f.flush()?;
                if improved {
                    self.save(&dir.join(BEST_CHECKPOINT))?;
                }
                self.save(&dir.join(LAST_CHECKPOINT))?;
            }
            self.log.push(record);
            if self.stale >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
        Ok(TrainSummary {
            log: self.log.clone(),
            best_val_loss: self.best_val,
            stopped_early,
            iters: self.iter,
        })
    }
}

/// Loads the run configuration and network stored in a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Network)> {
    let container = read_container(BufReader::new(File::open(path)?))?;
    let config = RunConfig::from_json(&container.config_json)?;
    let mut net = Network::init(config.network.clone())?;
    net.load_params(&container.tensors)?;
    Ok((config, net))
}
