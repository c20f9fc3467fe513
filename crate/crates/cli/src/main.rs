mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amn_core::data::{
    apply_manifest, generate_synthetic, load_csv, prepare, DatasetManifest, GroundTruth,
    PrepareOptions, PreparedData, RawTable, SeriesDataset, Task, SYNTHETIC_TARGET,
};
use amn_core::diagnostics::{gradient_suite, suite_table};
use amn_core::experiment::{ablate, train_and_test, ALL_ARMS};
use amn_core::explain::{explain, render};
use amn_core::metrics::MetricReport;
use amn_core::model::{AmnModel, RnnKind};
use amn_core::modular::UnitKind;
use amn_core::{AmnError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "amn", version, about = "Attention modular networks for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_features: Option<usize>,
    /// anb, linear or exu
    #[arg(long)]
    unit: Option<UnitKind>,
    /// lstm or gru
    #[arg(long)]
    rnn: Option<RnnKind>,
    /// regression or classification
    #[arg(long)]
    task: Option<Task>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(n) = self.n_features {
            cfg.train.n_features = n;
        }
        if let Some(u) = self.unit {
            cfg.train.unit = u;
        }
        if let Some(r) = self.rnn {
            cfg.train.rnn = r;
        }
        if let Some(t) = self.task {
            cfg.set_task(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV with the same columns as the training data.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to manifest.json beside the checkpoint or one level up.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Rows to use, by the stored chronological split.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a CSV or synthetic series; --seeds k repeats over k seeds.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        i: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write predictions in original units (probabilities for classification).
    Predict {
        #[command(flatten)]
        i: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feature weights, shape functions and per-sample decompositions.
    Explain {
        #[command(flatten)]
        i: Inputs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic series with known relevant channels.
    Synth {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks over ops, layers and the model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare {anb, linear, exu} x {lstm, gru} on a synthetic series.
    Ablate {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &AmnError) -> u8 {
    match e {
        AmnError::Config(_) | AmnError::Version { .. } | AmnError::Io { .. } | AmnError::Json(_) => 2,
        AmnError::Data(_) | AmnError::UndefinedMetric(_) => 3,
        AmnError::Shape { .. }
        | AmnError::Domain { .. }
        | AmnError::NonFinite { .. }
        | AmnError::Contract(_)
        | AmnError::Diverged { .. } => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AMN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { o, seeds, out } => cmd_train(&o, seeds, &out),
        Command::Evaluate { i, out } => cmd_evaluate(&i, out.as_deref()),
        Command::Predict { i, out } => cmd_predict(&i, out.as_deref()),
        Command::Explain {
            i,
            out,
            grid,
            samples,
            config,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?.explain,
                None => Default::default(),
            };
            cmd_explain(&i, &out, grid.unwrap_or(cfg.grid), samples.unwrap_or(cfg.max_samples))
        }
        Command::Synth { o, out } => cmd_synth(&o, &out),
        Command::Gradcheck { seed, out } => cmd_gradcheck(seed, out.as_deref()),
        Command::Ablate { o, seeds, out } => cmd_ablate(&o, seeds, out.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AmnError::io(dir, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AmnError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| AmnError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Synthetic runs also return the generated table and its ground truth.
fn prepare_run(cfg: &RunConfig) -> Result<(PreparedData, Option<(RawTable, GroundTruth)>)> {
    let task = cfg.train.task;
    let d = &cfg.data;
    let (table, target, inputs, synth) = match cfg.synthetic_or_default() {
        Some(spec) => {
            let (table, truth) = generate_synthetic(&spec)?;
            let inputs = Some(truth.channels.clone());
            (table.clone(), SYNTHETIC_TARGET.to_string(), inputs, Some((table, truth)))
        }
        None => {
            let path = d.path.as_ref().expect("validated");
            let table = load_csv(path, d.schema.as_ref(), None)?;
            (table, d.target.clone().expect("validated"), d.inputs.clone(), None)
        }
    };
    let data = prepare(
        &table,
        &PrepareOptions {
            target,
            inputs,
            window: d.window,
            horizon: d.horizon,
            fractions: d.fractions,
            scheme: d.scheme,
            normalize_target: d.normalize_target.unwrap_or(task == Task::Regression),
        },
    )?;
    Ok((data, synth))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_train(o: &Overrides, seeds: Option<u64>, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    if seeds == Some(0) {
        return Err(AmnError::Config("--seeds must be at least 1".into()));
    }
    let (data, synth) = prepare_run(&cfg)?;
    create_dir(out)?;
    write_json(&out.join("manifest.json"), &data.manifest)?;
    write_json(&out.join("config.json"), &cfg)?;
    if let Some((table, truth)) = &synth {
        table.write_csv(&out.join("data.csv"))?;
        write_json(&out.join("ground_truth.json"), truth)?;
    }
    let seed_list: Vec<u64> = match seeds {
        None => vec![cfg.train.seed],
        Some(k) => (0..k).map(|i| cfg.train.seed + i).collect(),
    };
    let mut runs = Vec::new();
    for &seed in &seed_list {
        let dir = if seeds.is_some() {
            out.join(format!("seed_{seed}"))
        } else {
            out.to_path_buf()
        };
        create_dir(&dir)?;
        let train = amn_core::train::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let run = train_and_test(&data, &train)?;
        let sha = run.model.save(&dir.join("checkpoint.json"))?;
        run.history.write_jsonl(&dir.join("history.jsonl"))?;
        let summary = json!({
            "seed": seed,
            "task": run.test_metrics.task,
            "metrics": run.test_metrics.metrics,
            "n_samples": run.test_metrics.n_samples,
            "test_loss": run.test_loss,
            "best_epoch": run.history.best_epoch,
            "epochs_run": run.history.epochs.len(),
            "selected": run.model.selection()?.iter()
                .map(|&j| run.model.config.feature_names[j].clone()).collect::<Vec<_>>(),
            "checkpoint_sha256": sha,
        });
        write_json(&dir.join("metrics.json"), &summary)?;
        println!("seed {seed}: test loss {:.6}", run.test_loss.loss_mod);
        runs.push((run.test_metrics, summary));
    }
    if seeds.is_some() {
        let mut agg = BTreeMap::new();
        let names: Vec<String> = runs[0].0.metrics.keys().cloned().collect();
        println!("{:<10} {:>12} {:>12}", "metric", "mean", "std");
        for name in names {
            let vals: Vec<f64> = runs.iter().map(|r| r.0.metrics[&name]).collect();
            let (m, s) = mean_std(&vals);
            println!("{name:<10} {m:>12.6} {s:>12.6}");
            agg.insert(name, json!({ "mean": m, "std": s, "values": vals }));
        }
        write_json(
            &out.join("metrics.json"),
            &json!({ "seeds": seed_list, "metrics": agg,
                     "runs": runs.iter().map(|r| &r.1).collect::<Vec<_>>() }),
        )?;
    } else {
        print!("{}", runs[0].0.table());
    }
    Ok(())
}

fn find_manifest(i: &Inputs) -> Result<PathBuf> {
    if let Some(m) = &i.manifest {
        return Ok(m.clone());
    }
    let mut dir = i.checkpoint.parent();
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let cand = d.join("manifest.json");
        if cand.exists() {
            return Ok(cand);
        }
        dir = d.parent();
    }
    Err(AmnError::Config(format!(
        "no manifest.json found near {}; pass --manifest",
        i.checkpoint.display()
    )))
}

struct Loaded {
    model: AmnModel,
    manifest: DatasetManifest,
    table: RawTable,
}

fn load_inputs(i: &Inputs) -> Result<Loaded> {
    let manifest: DatasetManifest = read_json(&find_manifest(i)?)?;
    manifest.check_version()?;
    let model = AmnModel::load(&i.checkpoint)?;
    let table = load_csv(&i.data, Some(&manifest.schema), Some(&manifest.vocabularies))?;
    Ok(Loaded {
        model,
        manifest,
        table,
    })
}

/// Windows for the rows of one stored split segment, or for the whole table.
fn dataset_for(l: &Loaded, split: Split) -> Result<SeriesDataset> {
    let range = match split {
        Split::All => return apply_manifest(&l.table, &l.manifest),
        Split::Train => l.manifest.split.train,
        Split::Val => l.manifest.split.val,
        Split::Test => l.manifest.split.test,
    };
    if l.table.rows() < range.1 {
        return Err(AmnError::Data(format!(
            "table has {} rows but the stored {split:?} split covers rows {}..{}; use --split all for new data",
            l.table.rows(),
            range.0,
            range.1
        )));
    }
    let mut ds = apply_manifest(&l.table.slice_rows(range.0..range.1), &l.manifest)?;
    for r in ds.target_rows.iter_mut() {
        *r += range.0;
    }
    Ok(ds)
}

fn report(l: &Loaded, ds: &SeriesDataset) -> Result<MetricReport> {
    let pred = l.model.predict(ds)?;
    let truth = ds.denormalized()?.targets;
    match l.model.task() {
        Task::Regression => {
            let scale = l.manifest.mase_scale.ok_or_else(|| {
                AmnError::UndefinedMetric("manifest has no MASE scale".into())
            })?;
            MetricReport::regression_scaled(&truth, &pred, scale)
        }
        Task::Classification => MetricReport::classification(&truth, &pred),
    }
}

fn cmd_evaluate(i: &Inputs, out: Option<&Path>) -> Result<()> {
    let l = load_inputs(i)?;
    let ds = dataset_for(&l, i.split)?;
    let r = report(&l, &ds)?;
    print!("{}", r.table());
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &r)?;
    }
    Ok(())
}

fn cmd_predict(i: &Inputs, out: Option<&Path>) -> Result<()> {
    let l = load_inputs(i)?;
    let ds = dataset_for(&l, i.split)?;
    let pred = l.model.predict(&ds)?;
    let mut text = String::from("row,prediction\n");
    for (row, p) in ds.target_rows.iter().zip(&pred) {
        text.push_str(&format!("{row},{p}\n"));
    }
    match out {
        Some(out) => {
            create_dir(out)?;
            let path = out.join("predictions.csv");
            std::fs::write(&path, text).map_err(|e| AmnError::io(&path, e))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_explain(i: &Inputs, out: &Path, grid: usize, samples: usize) -> Result<()> {
    let l = load_inputs(i)?;
    let train = dataset_for(&l, Split::Train)?;
    let ds = dataset_for(&l, i.split)?;
    let e = explain(&l.model, &train, &ds, grid, samples)?;
    let written = render(&e, out)?;
    println!("{:<24} {:>10}", "feature", "weight");
    for fw in &e.feature_weights {
        let mark = if e.selected.contains(&fw.feature) { "*" } else { "" };
        println!("{:<24} {:>10.6} {mark}", fw.feature, fw.weight);
    }
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn cmd_synth(o: &Overrides, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    let mut spec = cfg.synthetic_or_default().ok_or_else(|| {
        AmnError::Config("synth needs a [synthetic] section, not data.path".into())
    })?;
    if let Some(s) = o.seed {
        spec.seed = s;
    }
    let (table, truth) = generate_synthetic(&spec)?;
    create_dir(out)?;
    table.write_csv(&out.join("data.csv"))?;
    write_json(&out.join("ground_truth.json"), &truth)?;
    println!(
        "{} rows, relevant channels {:?}, written to {}",
        table.rows(),
        truth.relevant,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Result<()> {
    let rows = gradient_suite(seed);
    print!("{}", suite_table(&rows));
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(AmnError::Contract(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn cmd_ablate(o: &Overrides, seeds: u64, out: Option<&Path>) -> Result<()> {
    let cfg = o.resolve()?;
    let spec = cfg.synthetic_or_default().ok_or_else(|| {
        AmnError::Config("ablate runs on a [synthetic] series, not data.path".into())
    })?;
    if seeds == 0 {
        return Err(AmnError::Config("--seeds must be at least 1".into()));
    }
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.train.seed + i).collect();
    let table = ablate(&spec, cfg.data.window, &cfg.train, &ALL_ARMS, &seed_list)?;
    print!("{}", table.table());
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("ablation.json"), &table)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&AmnError::Config("x".into())), 2);
        assert_eq!(exit_code(&AmnError::Data("x".into())), 3);
        assert_eq!(exit_code(&AmnError::Contract("x".into())), 1);
        let io = AmnError::io("a.csv", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&io), 2);
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["amn", "train", "--out", "x", "--unit", "exu", "--rnn", "gru"]);
        assert!(c.is_ok());
        assert!(Cli::try_parse_from(["amn", "train", "--out", "x", "--unit", "bogus"]).is_err());
    }
}
