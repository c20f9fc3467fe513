//! One line per acceptance criterion. Runs without the libtest harness so the
//! criteria execute in order and their output is not interleaved.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use amn_core::afs::{select_top_n, Afs};
use amn_core::autodiff::{Graph, Tensor};
use amn_core::data::{ShapeKind, SyntheticSpec, Task};
use amn_core::diagnostics::{gradient_suite, suite_table};
use amn_core::experiment::{median, prepare_synthetic, train_and_test, RunOutcome};
use amn_core::explain;
use amn_core::metrics::{auc, mase, smape, wape};
use amn_core::model::{AmnModel, RnnKind};
use amn_core::modular::UnitKind;
use amn_core::params::ParamStore;
use amn_core::rng::seeded;
use amn_core::train::{cosine_warmup_lr, evaluate_loss, fit, warmup_end, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64, detail: String) -> Outcome {
    if elapsed.as_secs_f64() > limit_s as f64 {
        Err(format!("{detail}; took {:.0}s, limit {limit_s}s", elapsed.as_secs_f64()))
    } else {
        Ok(detail)
    }
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let rows = gradient_suite(0);
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(format!("{failed:?} exceed 1e-4\n{}", suite_table(&rows)));
    }
    within(t.elapsed(), 60, format!("{} checks, worst relative error {worst:.2e}", rows.len()))
}

/// Random AFS layout plus tokens `[B × D × d_model]`.
fn afs_case() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..4, 1usize..13, 1usize..4, 1usize..4, any::<u64>())
        .prop_map(|(b, d, heads, dv, seed)| (b, d, heads, heads * dv, seed))
}

fn afs_weights(afs: &Afs, store: &ParamStore, r: Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let r = g.constant(r);
    let out = afs.forward(&mut g, &p, r).expect("afs forward");
    g.value(out.weights).data().to_vec()
}

fn c2_afs_invariants() -> Outcome {
    let t = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&afs_case(), |(batch, d, heads, dm, seed)| {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let afs = Afs::new(&mut store, &mut rng, d, dm, heads).unwrap();
        let data: Vec<f64> = (0..batch * d * dm).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = afs_weights(&afs, &store, Tensor::new(vec![batch, d, dm], data.clone()).unwrap());
        for row in f.chunks(d) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }

        // Reverse then rotate the feature tokens of every sample.
        let perm: Vec<usize> = (0..d).map(|i| (d - 1 - i + seed as usize % d) % d).collect();
        let mut permuted = vec![0.0; data.len()];
        for b in 0..batch {
            for (i, &src) in perm.iter().enumerate() {
                let to = (b * d + i) * dm;
                let from = (b * d + src) * dm;
                permuted[to..to + dm].copy_from_slice(&data[from..from + dm]);
            }
        }
        let fp = afs_weights(&afs, &store, Tensor::new(vec![batch, d, dm], permuted).unwrap());
        for b in 0..batch {
            let row = &f[b * d..(b + 1) * d];
            let prow = &fp[b * d..(b + 1) * d];
            for (i, &src) in perm.iter().enumerate() {
                prop_assert!((prow[i] - row[src]).abs() <= 1e-12);
            }
            let mut sorted = row.to_vec();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[1] - w[0] > 1e-9) {
                let n = 1 + seed as usize % d;
                let picked: Vec<usize> =
                    select_top_n(prow, n).unwrap().iter().map(|&i| perm[i]).collect();
                prop_assert_eq!(picked, select_top_n(row, n).unwrap());
            }
        }

        // Ties go to the lower index and monotone maps keep the selection.
        let mut tied: Vec<f64> = (0..d).map(|_| (rng.random_range(0..4) as f64) / 4.0).collect();
        tied[d - 1] = tied[0];
        let n = 1 + (seed as usize / 7) % d;
        let sel = select_top_n(&tied, n).unwrap();
        for w in sel.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(tied[a] > tied[b] || (tied[a] == tied[b] && a < b));
        }
        let mapped: Vec<f64> = tied.iter().map(|v| (3.0 * v).exp() - 1.0).collect();
        prop_assert_eq!(select_top_n(&mapped, n).unwrap(), sel);
        Ok(())
    });
    match result {
        Ok(()) => within(t.elapsed(), 60, "256 random configurations".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn c3_additivity() -> Outcome {
    let spec = SyntheticSpec {
        relevant: 3,
        irrelevant: 3,
        length: 400,
        ..SyntheticSpec::default()
    };
    let (data, _) = prepare_synthetic(&spec, 2).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for unit in [UnitKind::Anb, UnitKind::Linear, UnitKind::Exu] {
        let cfg = TrainConfig {
            unit,
            epochs: 3,
            n_features: 5,
            ..TrainConfig::default()
        };
        let run = train_and_test(&data, &cfg).map_err(|e| e.to_string())?;
        let d = run.model.features();
        let mut rng = seeded(3);
        let x: Vec<f64> = (0..1000 * d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let e = run.model.evaluate_all(&x, 128).map_err(|e| e.to_string())?;
        let n = e.active.len();
        for (i, &pred) in e.prediction.iter().enumerate() {
            let row = &e.contributions[i * n..(i + 1) * n];
            let forward = row.iter().fold(0.0, |a, c| a + c);
            let backward = row.iter().rev().fold(0.0, |a, c| a + c);
            let lhs = pred - e.beta;
            if lhs.to_bits() != forward.to_bits() || lhs.to_bits() != backward.to_bits() {
                return Err(format!(
                    "{unit:?} sample {i}: prediction - beta = {lhs:e}, sums {forward:e} / {backward:e}"
                ));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} samples bit-exact (1000 per unit kind)"))
}

struct AblationRuns {
    losses: Vec<Vec<f64>>,
    recall: Vec<f64>,
    elapsed: Duration,
}

const ARMS: [(RnnKind, UnitKind); 4] = [
    (RnnKind::Lstm, UnitKind::Anb),
    (RnnKind::Lstm, UnitKind::Linear),
    (RnnKind::Lstm, UnitKind::Exu),
    (RnnKind::Gru, UnitKind::Linear),
];

fn recall_at_r(run: &RunOutcome, relevant: &[String]) -> f64 {
    let names = &run.model.config.feature_names;
    let top = select_top_n(&run.model.reference_weights, relevant.len()).expect("r <= D");
    top.iter().filter(|&&j| relevant.contains(&names[j])).count() as f64 / relevant.len() as f64
}

fn ablation_runs() -> Result<AblationRuns, String> {
    let t = Instant::now();
    let mut losses = vec![Vec::new(); ARMS.len()];
    let mut recall = Vec::new();
    for seed in SEEDS {
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        let (data, truth) = prepare_synthetic(&spec, 1).map_err(|e| e.to_string())?;
        for (k, &(rnn, unit)) in ARMS.iter().enumerate() {
            let cfg = TrainConfig {
                rnn,
                unit,
                seed,
                ..TrainConfig::default()
            };
            let run = train_and_test(&data, &cfg).map_err(|e| e.to_string())?;
            losses[k].push(run.test_loss.loss_mod);
            if k == 0 {
                recall.push(recall_at_r(&run, &truth.relevant_features(1)));
            }
        }
    }
    Ok(AblationRuns {
        losses,
        recall,
        elapsed: t.elapsed(),
    })
}

fn c4_ordering(runs: &AblationRuns) -> Outcome {
    let m: Vec<f64> = runs.losses.iter().map(|l| median(l)).collect();
    let detail = format!(
        "median test MSE lstm+anb {:.5}, lstm+linear {:.5}, lstm+exu {:.5}, gru+linear {:.5}",
        m[0], m[1], m[2], m[3]
    );
    check(m[0] <= m[1] && m[1] <= m[2] && m[0] <= m[3], detail.clone())?;
    within(runs.elapsed, 600, detail)
}

fn c5_fewer_features() -> Outcome {
    let t = Instant::now();
    let mut acc = [Vec::new(), Vec::new()];
    for seed in SEEDS {
        let spec = SyntheticSpec {
            relevant: 10,
            irrelevant: 11,
            task: Task::Classification,
            seed,
            ..SyntheticSpec::default()
        };
        let (data, _) = prepare_synthetic(&spec, 1).map_err(|e| e.to_string())?;
        for (k, n) in [10, 21].into_iter().enumerate() {
            let cfg = TrainConfig {
                n_features: n,
                task: Task::Classification,
                seed,
                ..TrainConfig::default()
            };
            let run = train_and_test(&data, &cfg).map_err(|e| e.to_string())?;
            acc[k].push(run.test_metrics.metrics["accuracy"]);
        }
    }
    let (a10, a21) = (median(&acc[0]), median(&acc[1]));
    let detail = format!("median test accuracy n=10 {a10:.4}, n=21 {a21:.4}");
    check(a10 - a21 >= 0.02, detail.clone())?;
    within(t.elapsed(), 600, detail)
}

fn c6_recovery(runs: &AblationRuns) -> Outcome {
    let mean = runs.recall.iter().sum::<f64>() / runs.recall.len() as f64;
    check(
        mean >= 0.9,
        format!("mean top-r recall {mean:.2} (per seed {:?})", runs.recall),
    )
}

fn c7_shapes() -> Outcome {
    let spec = SyntheticSpec {
        relevant: 2,
        irrelevant: 2,
        shapes: vec![ShapeKind::Sine, ShapeKind::Quadratic],
        noise_std: 0.0,
        ..SyntheticSpec::default()
    };
    let (data, truth) = prepare_synthetic(&spec, 1).map_err(|e| e.to_string())?;
    let run = train_and_test(&data, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let names = &run.model.config.feature_names;
    let meta = data.train.norm_meta.as_ref().ok_or("training split is not normalised")?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (channel, feature) in truth.relevant.iter().zip(truth.relevant_features(1)) {
        let j = names.iter().position(|n| *n == feature).ok_or("feature missing")?;
        let sf = explain::sweep_shape(&run.model, &data.train, j, 256).map_err(|e| e.to_string())?;
        let shape = truth.shapes[channel];
        let stats = meta.channels.iter().find(|s| s.name == *channel).ok_or("no stats")?;
        let train_x = data.train.feature_column(j);
        let centre = train_x.iter().map(|&v| shape.eval(stats.invert(v))).sum::<f64>()
            / train_x.len() as f64;
        let truth_curve: Vec<f64> =
            sf.grid_original.iter().map(|&x| shape.eval(x) - centre).collect();
        let r = explain::pearson(&sf.contributions, &truth_curve).map_err(|e| e.to_string())?;
        ok &= r >= 0.9;
        parts.push(format!("{shape:?} r={r:.4}"));
    }
    check(ok, parts.join(", "))
}

fn c8_overfit() -> Outcome {
    let spec = SyntheticSpec {
        length: 400,
        ..SyntheticSpec::default()
    };
    let (data, _) = prepare_synthetic(&spec, 1).map_err(|e| e.to_string())?;
    let train = data.train.select(&(0..64).collect::<Vec<_>>());
    // One batch per epoch, so epochs count optimizer steps.
    let cfg = TrainConfig {
        epochs: 2000,
        patience: 2000,
        ..TrainConfig::default()
    };
    let mut model = AmnModel::new(cfg.model_config(&train).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let history = fit(&mut model, &train, &train, &cfg).map_err(|e| e.to_string())?;
    let loss = evaluate_loss(&model, &train).map_err(|e| e.to_string())?.loss_mod;
    check(
        loss < 1e-3 && history.total_steps <= 2000,
        format!("train MSE {loss:.2e} after {} steps", history.total_steps),
    )
}

/// Brute-force pairwise AUC.
fn pairwise_auc(y: &[f64], p: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (yi, pi) in y.iter().zip(p) {
        for (yj, pj) in y.iter().zip(p) {
            if *yi == 1.0 && *yj == 0.0 {
                pairs += 1.0;
                wins += if pi > pj { 1.0 } else if pi == pj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn c9_metrics() -> Outcome {
    let mut rng = seeded(9);
    let mut done = 0;
    while done < 500 {
        let n = rng.random_range(2..=100);
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        if !(y.contains(&0.0) && y.contains(&1.0)) {
            continue;
        }
        // Coarse scores so ties are common.
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 9.0).collect();
        let got = auc(&y, &p).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&y, &p);
        if got != want {
            return Err(format!("instance {done}: auc {got} vs pairwise {want}"));
        }
        done += 1;
    }

    // Values from tests/oracles/metrics.py (exact rational arithmetic).
    let a_y = [3.5, -1.25, 0.0, 7.0, 2.75, -4.0];
    let a_p = [3.0, -0.5, 0.0, 6.5, 4.0, -3.25];
    let a_t = [1.0, 2.5, 2.0, 4.0, 3.25, 5.0];
    let b_y = [10.0, 12.0, 9.5, 11.0, 13.25];
    let b_p = [11.0, 11.5, 9.0, 12.5, 12.0];
    let b_t = [8.0, 9.0, 11.0, 10.0, 12.0, 11.5, 13.0];
    let fixtures = [
        ("a smape", smape(&a_y, &a_p), 0.27705500119293225),
        ("a mase", mase(&a_y, &a_p, &a_t), 0.4807692307692308),
        ("a wape", wape(&a_y, &a_p), 0.20270270270270271),
        ("b smape", smape(&b_y, &b_p), 0.08370296324793902),
        ("b mase", mase(&b_y, &b_p, &b_t), 0.7125),
        ("b wape", wape(&b_y, &b_p), 0.08520179372197309),
    ];
    for (name, got, want) in fixtures {
        let got = got.map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok("500 auc instances exact, 6 regression fixtures within 1e-12".into())
}

fn c10_schedule() -> Outcome {
    for (total, frac) in [(100, 0.1), (1000, 0.05), (37, 0.2), (5000, 0.01), (10, 0.1)] {
        let lr0 = 0.005;
        let lr: Vec<f64> = (0..total)
            .map(|s| cosine_warmup_lr(s, total, lr0, frac))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let peak = warmup_end(total, frac);
        let fail = |m: &str| Err(format!("total {total}, warmup {frac}: {m}"));
        if lr[0] != 0.0 {
            return fail("lr(0) != 0");
        }
        if lr[peak] != lr0 {
            return fail("lr(warmup_end) != initial_lr");
        }
        if lr[total - 1] > 1e-8 * lr0 {
            return fail("final lr above 1e-8 * initial_lr");
        }
        if !lr[..=peak].windows(2).all(|w| w[1] >= w[0])
            || !lr[peak..].windows(2).all(|w| w[1] <= w[0])
        {
            return fail("not monotone up then down");
        }
    }
    Ok("5 schedules: 0 -> peak at warmup end -> <= 1e-8 of peak, monotone".into())
}

fn c11_determinism() -> Outcome {
    let spec = SyntheticSpec {
        relevant: 2,
        irrelevant: 3,
        length: 500,
        ..SyntheticSpec::default()
    };
    let (data, _) = prepare_synthetic(&spec, 2).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 4,
        n_features: 4,
        rnn_dropout: 0.1,
        module_dropout: 0.1,
        seed: 21,
        ..TrainConfig::default()
    };
    let a = train_and_test(&data, &cfg).map_err(|e| e.to_string())?;
    let b = train_and_test(&data, &cfg).map_err(|e| e.to_string())?;
    if a.history != b.history {
        return Err("histories differ".into());
    }
    let hash = a.model.checkpoint_hash().map_err(|e| e.to_string())?;
    if hash != b.model.checkpoint_hash().map_err(|e| e.to_string())? {
        return Err("checkpoint hashes differ".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.json");
    let saved = a.model.save(&path).map_err(|e| e.to_string())?;
    let loaded = AmnModel::load(&path).map_err(|e| e.to_string())?;
    let bits = |s: &ParamStore| -> Vec<u64> {
        s.entries().iter().flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits())).collect()
    };
    if saved != hash || bits(&loaded.store) != bits(&a.model.store) {
        return Err("checkpoint round trip changed parameters".into());
    }

    let render = |m: &AmnModel| {
        explain::explain(m, &data.train, &data.test, 64, 50).and_then(|e| e.to_json())
    };
    let ea = render(&a.model).map_err(|e| e.to_string())?;
    let eb = render(&b.model).map_err(|e| e.to_string())?;
    let el = render(&loaded).map_err(|e| e.to_string())?;
    check(
        ea == eb && ea == el,
        format!("history and hash {}... reproduced, explanation.json {} bytes stable", &hash[..12], ea.len()),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, t: Instant, outcome: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    };

    let t = Instant::now();
    report(1, "gradient oracle", t, c1_gradients());
    let t = Instant::now();
    report(2, "AFS normalisation and selection invariants", t, c2_afs_invariants());
    let t = Instant::now();
    report(3, "additivity contract", t, c3_additivity());
    let t = Instant::now();
    let runs = ablation_runs();
    match &runs {
        Ok(r) => report(4, "ablation ordering", t, c4_ordering(r)),
        Err(e) => report(4, "ablation ordering", t, Err(e.clone())),
    }
    let t = Instant::now();
    report(5, "fewer selected features win", t, c5_fewer_features());
    let t = Instant::now();
    match &runs {
        Ok(r) => report(6, "planted-relevance recovery", t, c6_recovery(r)),
        Err(e) => report(6, "planted-relevance recovery", t, Err(e.clone())),
    }
    let t = Instant::now();
    report(7, "shape-function fidelity", t, c7_shapes());
    let t = Instant::now();
    report(8, "overfit sanity", t, c8_overfit());
    let t = Instant::now();
    report(9, "metric oracles", t, c9_metrics());
    let t = Instant::now();
    report(10, "scheduler contract", t, c10_schedule());
    let t = Instant::now();
    report(11, "determinism and persistence", t, c11_determinism());

    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
