//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rafcn::commands::{self, AblationRow};
use rafcn::config::RunConfig;
use rafcn::data::{self, GeneratorConfig, Split};
use rafcn::gradsuite;
use rafcn::metrics::ConfusionMatrix;
use rafcn::network::Network;
use rafcn::relation::{
    apply_integration, channel_relation_map, channel_relation_scores, spatial_relation_feature,
    ChannelRelationParams, SpatialRelationParams,
};
use rafcn::train::{self, Trainer};
use rafcn::{Graph, IntegrationMode, LabelMap, OpKind, Tensor, IGNORE_LABEL};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn maybe_bias(rng: &mut ChaCha8Rng, e: usize, present: bool) -> Option<Tensor> {
    present.then(|| random_tensor(rng, &[e]))
}

fn spatial_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(1..=6);
        let h = rng.gen_range(1..=4);
        let w = rng.gen_range(1..=4);
        let e = rng.gen_range(1..=4);
        let bias = rng.gen_bool(0.5);
        let x = random_tensor(&mut rng, &[c, h, w]);
        let w_u = random_tensor(&mut rng, &[e, c]);
        let b_u = maybe_bias(&mut rng, e, bias);
        let w_v = random_tensor(&mut rng, &[e, c]);
        let b_v = maybe_bias(&mut rng, e, bias);
        let params = SpatialRelationParams::new(w_u.clone(), b_u.clone(), w_v.clone(), b_v.clone(), (h, w))
            .map_err(|err| err.to_string())?;

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = params.bind(&mut g, false);
        let sr = spatial_relation_feature(&mut g, xv, &vars).map_err(|err| err.to_string())?;
        let sr = g.value(sr).clone();
        ensure(sr.shape() == [h * w, h, w], || format!("shape {:?}", sr.shape()))?;

        let embed = |wm: &Tensor, b: &Option<Tensor>, i: usize| -> Vec<f64> {
            (0..e)
                .map(|k| {
                    let dot: f64 = (0..c).map(|ch| wm.at(&[k, ch]) * x.at(&[ch, i / w, i % w])).sum();
                    dot + b.as_ref().map_or(0.0, |b| b.at(&[k]))
                })
                .collect()
        };
        for i in 0..h * w {
            let u = embed(&w_u, &b_u, i);
            for j in 0..h * w {
                let v = embed(&w_v, &b_v, j);
                let expect = u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().max(0.0);
                worst = worst.max((sr.at(&[j, i / w, i % w]) - expect).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("max deviation {worst:.1e} in {:.2?}", start.elapsed()))
}

fn channel_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut worst_raw, mut worst_row): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let c = rng.gen_range(1..=6);
        let h = rng.gen_range(1..=4);
        let w = rng.gen_range(1..=4);
        let e = rng.gen_range(1..=4);
        let bias = rng.gen_bool(0.5);
        let x = random_tensor(&mut rng, &[c, h, w]);
        let w_u = random_tensor(&mut rng, &[e, c]);
        let b_u = maybe_bias(&mut rng, e, bias);
        let w_v = random_tensor(&mut rng, &[e, c]);
        let b_v = maybe_bias(&mut rng, e, bias);
        let params = ChannelRelationParams::new(w_u.clone(), b_u.clone(), w_v.clone(), b_v.clone())
            .map_err(|err| err.to_string())?;

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = params.bind(&mut g, false);
        let raw = channel_relation_scores(&mut g, xv, &vars).map_err(|err| err.to_string())?;
        let cr = channel_relation_map(&mut g, xv, &vars).map_err(|err| err.to_string())?;
        let (raw, cr) = (g.value(raw).clone(), g.value(cr).clone());

        let pooled: Vec<f64> = (0..c)
            .map(|ch| {
                let mut s = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        s += x.at(&[ch, y, xx]);
                    }
                }
                s / (h * w) as f64
            })
            .collect();
        let emb = |wm: &Tensor, b: &Option<Tensor>, k: usize, p: usize| {
            wm.at(&[k, p]) * pooled[p] + b.as_ref().map_or(0.0, |b| b.at(&[k]))
        };
        for p in 0..c {
            for q in 0..c {
                let expect: f64 = (0..e).map(|k| emb(&w_u, &b_u, k, p) * emb(&w_v, &b_v, k, q)).sum();
                worst_raw = worst_raw.max((raw.at(&[p, q]) - expect).abs());
            }
            let row: f64 = (0..c).map(|q| cr.at(&[p, q])).sum();
            worst_row = worst_row.max((row - 1.0).abs());
        }
    }
    ensure(worst_raw <= 1e-9, || format!("raw map deviation {worst_raw:e}"))?;
    ensure(worst_row <= 1e-12, || format!("row sum deviation {worst_row:e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "raw deviation {worst_raw:.1e}, row sums within {worst_row:.1e}, {:.2?}",
        start.elapsed()
    ))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradsuite::run_suite(None).map_err(|e| e.to_string())?;
    for kind in OpKind::ALL {
        let hits = results.iter().filter(|r| r.name == kind.name()).count();
        ensure(hits == 1, || format!("{} reported {hits} times", kind.name()))?;
    }
    ensure(results.iter().any(|r| r.name == "network_serial"), || "network check missing".into())?;
    let cfg = gradsuite::small_network_config();
    ensure(
        cfg.num_classes == 2 && cfg.tile == [8, 8] && cfg.mode == IntegrationMode::Serial,
        || format!("end-to-end network is {cfg:?}"),
    )?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}={:.1e}", r.name, r.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{} checks, worst relative error {worst:.1e}, {:.1?}",
        results.len(),
        start.elapsed()
    ))
}

fn shape_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (c, h, w) = (4, 3, 3);
    let x = random_tensor(&mut rng, &[c, h, w]);
    let spatial = SpatialRelationParams::init(c, 2, (h, w), true, &mut rng);
    let channel = ChannelRelationParams::init(c, 2, true, &mut rng);
    let expected = [
        (IntegrationMode::SrmOnly, 4 + 9),
        (IntegrationMode::CrmOnly, 4),
        (IntegrationMode::Serial, 4 + 9),
        (IntegrationMode::Parallel, 8 + 9),
        (IntegrationMode::None, 4),
    ];
    for (mode, channels) in expected {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sv = spatial.bind(&mut g, false);
        let cv = channel.bind(&mut g, false);
        let y = apply_integration(&mut g, xv, mode, Some(&sv), Some(&cv)).map_err(|e| e.to_string())?;
        ensure(g.shape(y) == [channels, h, w], || format!("{mode}: {:?}", g.shape(y)))?;
    }
    let base = RunConfig::default().network;
    for mode in IntegrationMode::ALL {
        let net = Network::init(rafcn::NetworkConfig { mode, ..base.clone() }).map_err(|e| e.to_string())?;
        let [th, tw] = base.tile;
        let logits = net
            .forward(&random_tensor(&mut rng, &[3, th, tw]))
            .map_err(|e| e.to_string())?;
        ensure(logits.shape() == [base.num_classes, th, tw], || {
            format!("{mode} logits {:?}", logits.shape())
        })?;
    }
    Ok("relation outputs 13/4/13/17 channels; logits K×H₀×W₀ for all modes".into())
}

/// Per-pixel counting, independent of the confusion matrix.
fn brute_force_scores(pred: &[u8], truth: &[u8], k: usize) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    let (mut correct, mut total) = (0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == IGNORE_LABEL || t == IGNORE_LABEL {
            continue;
        }
        total += 1;
        if p == t {
            correct += 1;
            tp[t as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[t as usize] += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| tp[c] + fp[c] + fn_[c] > 0).collect();
    let n = present.len() as f64;
    let f1_ratio = |c: usize| {
        let (tp, fp, fn_) = (tp[c] as f64, fp[c] as f64, fn_[c] as f64);
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    let f1_pr = |c: usize| {
        let (tp, fp, fn_) = (tp[c] as f64, fp[c] as f64, fn_[c] as f64);
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    };
    let iou = |c: usize| tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64;
    (
        present.iter().map(|&c| f1_ratio(c)).sum::<f64>() / n,
        present.iter().map(|&c| f1_pr(c)).sum::<f64>() / n,
        present.iter().map(|&c| iou(c)).sum::<f64>() / n,
        correct as f64 / total as f64,
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..64)
                .map(|_| {
                    if rng.gen_bool(0.05) {
                        IGNORE_LABEL
                    } else {
                        rng.gen_range(0..k as u8)
                    }
                })
                .collect()
        };
        let truth = draw(&mut rng);
        let pred = draw(&mut rng);
        let (t, p) = (
            LabelMap::new(8, 8, truth.clone()).map_err(|e| e.to_string())?,
            LabelMap::new(8, 8, pred.clone()).map_err(|e| e.to_string())?,
        );
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&p, &t).map_err(|e| e.to_string())?;
        let (f1_ratio, f1_pr, miou, oa) = brute_force_scores(&pred, &truth, k);
        let got = [
            cm.mean_f1().map_err(|e| e.to_string())?,
            cm.miou().map_err(|e| e.to_string())?,
            cm.overall_accuracy().map_err(|e| e.to_string())?,
        ];
        for (a, b) in got.iter().zip([f1_ratio, miou, oa]) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((f1_ratio - f1_pr).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 pairs, max deviation {worst:.1e}"))
}

fn ablation_rows(config: &RunConfig) -> Result<Vec<AblationRow>, String> {
    let dataset = data::generate(&config.data).map_err(|e| e.to_string())?;
    commands::ablate(config, &dataset, false).map_err(|e| e.to_string())
}

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let base = RunConfig::default();
    let mut lines = Vec::new();
    let mut seeds_ok = Vec::new();
    for seed in [base.seed, 2, 3, 4] {
        let mut cfg = base.clone();
        cfg.set_seed(seed);
        let rows = ablation_rows(&cfg)?;
        let f1 = |m: IntegrationMode| rows.iter().find(|r| r.mode == m).map(|r| r.mean_f1).unwrap_or(f64::NAN);
        let b = f1(IntegrationMode::None);
        let gains = [
            f1(IntegrationMode::Serial) - b,
            f1(IntegrationMode::Parallel) - b,
            f1(IntegrationMode::SrmOnly) - b,
        ];
        let ok = gains[0] >= 0.05 && gains[1] >= 0.05 && gains[2] >= 0.03;
        lines.push(format!(
            "    seed {seed}: baseline {:.2} crm {:.2} srm {:.2} parallel {:.2} serial {:.2} {}",
            100.0 * b,
            100.0 * f1(IntegrationMode::CrmOnly),
            100.0 * f1(IntegrationMode::SrmOnly),
            100.0 * f1(IntegrationMode::Parallel),
            100.0 * f1(IntegrationMode::Serial),
            if ok { "ok" } else { "short" }
        ));
        seeds_ok.push(ok);
    }
    for l in &lines {
        println!("{l}");
    }
    let alternates = seeds_ok[1..].iter().filter(|&&ok| ok).count();
    ensure(seeds_ok[0], || "default seed misses the margins".into())?;
    ensure(alternates >= 2, || format!("only {alternates} of 3 alternate seeds hold"))?;
    within(start.elapsed(), Duration::from_secs(30 * 60))?;
    Ok(format!(
        "default seed and {alternates}/3 alternates hold, {:.0?}",
        start.elapsed()
    ))
}

fn sanity_ceiling() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.network.mode = IntegrationMode::None;
    cfg.data.ambiguity_rate = 0.0;
    let ds = data::generate(&cfg.data).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let summary = trainer.run(&ds.train, &ds.val, None).map_err(|e| e.to_string())?;
    let val = summary.log.iter().map(|r| r.val_mean_f1).fold(0.0, f64::max);
    let test = commands::eval_network(trainer.best_network(), &ds.test)
        .map_err(|e| e.to_string())?
        .mean_f1;
    ensure(val > 0.95 && test > 0.95, || format!("val {val:.4}, test {test:.4}"))?;
    Ok(format!(
        "baseline on unambiguous data: val mean F1 {val:.4}, test {test:.4} after {} iterations",
        summary.iters
    ))
}

fn small_run_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.data = GeneratorConfig {
        num_train: 20,
        num_val: 4,
        num_test: 4,
        ..cfg.data
    };
    cfg.train.max_iters = 12;
    cfg.train.eval_every = 4;
    cfg.network.mode = IntegrationMode::Serial;
    cfg
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let err = |e: rafcn::Error| e.to_string();
    let mut full_cfg = small_run_config(&dir.path().join("full"));
    full_cfg.train.max_iters = 8;
    let ds = data::generate(&full_cfg.data).map_err(err)?;

    let mut full = Trainer::new(full_cfg.clone()).map_err(err)?;
    full.run(&ds.train, &ds.val, Some(&full_cfg.output_dir)).map_err(err)?;

    let mut half_cfg = full_cfg.clone();
    half_cfg.output_dir = dir.path().join("half");
    half_cfg.train.max_iters = 4;
    let mut half = Trainer::new(half_cfg.clone()).map_err(err)?;
    half.run(&ds.train, &ds.val, Some(&half_cfg.output_dir)).map_err(err)?;

    let ckpt = half_cfg.output_dir.join(train::LAST_CHECKPOINT);
    let copy = dir.path().join("copy.ckpt");
    Trainer::resume(&ckpt, None).map_err(err)?.save(&copy).map_err(err)?;
    let (a, b) = (fs::read(&ckpt).map_err(|e| e.to_string())?, fs::read(&copy).map_err(|e| e.to_string())?);
    ensure(a == b, || "save after load changed the checkpoint bytes".into())?;
    let (_, loaded) = train::load_checkpoint(&ckpt).map_err(err)?;
    let bit_equal = loaded
        .params()
        .iter()
        .zip(half.network().params())
        .all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    ensure(bit_equal, || "loaded parameters differ from the trainer's".into())?;

    let mut resume_cfg = half_cfg.clone();
    resume_cfg.train.max_iters = 8;
    let mut resumed = Trainer::resume(&ckpt, Some(resume_cfg.clone())).map_err(err)?;
    resumed.run(&ds.train, &ds.val, None).map_err(err)?;
    let at = |log: &[train::LogRecord]| log.iter().find(|r| r.iter == 8).map(|r| r.val_loss);
    let (x, y) = (at(full.log()), at(resumed.log()));
    let (Some(x), Some(y)) = (x, y) else {
        return Err("no evaluation at iteration 8".into());
    };
    ensure((x - y).abs() <= 1e-12, || format!("uninterrupted {x} vs resumed {y}"))?;
    Ok(format!("bit-exact round trip; next val loss {x:.6} reproduced to {:.1e}", (x - y).abs()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let err = |e: rafcn::Error| e.to_string();
    let mut traces = Vec::new();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let cfg = small_run_config(&dir.path().join(name));
        commands::cmd_generate(&cfg).map_err(err)?;
        commands::cmd_train(&cfg, None).map_err(err)?;
        traces.push(fs::read_to_string(cfg.output_dir.join(train::TRAIN_LOG)).map_err(|e| e.to_string())?);
        let report = commands::cmd_eval(&cfg.output_dir.join(train::BEST_CHECKPOINT), Split::Val, None)
            .map_err(err)?;
        reports.push(report.to_json().map_err(err)?);
    }
    ensure(!traces[0].is_empty(), || "empty training log".into())?;
    ensure(traces[0] == traces[1], || "loss traces differ".into())?;
    ensure(reports[0] == reports[1], || "metric reports differ".into())?;
    Ok(format!("{} identical log records and reports", traces[0].lines().count()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 spatial relation oracle", spatial_oracle),
        ("2 channel relation oracle", channel_oracle),
        ("3 gradient suite", gradient_suite),
        ("4 shape contracts", shape_contracts),
        ("5 metric oracle", metric_oracle),
        ("6 ablation direction", ablation_direction),
        ("7 sanity ceiling", sanity_ceiling),
        ("8 persistence", persistence),
        ("9 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
