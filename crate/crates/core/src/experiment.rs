//! End-to-end runs on synthetic data and the unit/RNN ablation grid.

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, prepare, GroundTruth, NormScheme, PrepareOptions, PreparedData,
    SyntheticSpec, Task,
};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{AmnModel, RnnKind};
use crate::modular::UnitKind;
use crate::train::{evaluate_loss, fit, History, LossReport, TrainConfig};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.15, 0.15];

/// Window, split and scaling for a generated series.
pub fn prepare_synthetic(
    spec: &SyntheticSpec,
    window: usize,
) -> Result<(PreparedData, GroundTruth)> {
    let (table, truth) = generate_synthetic(spec)?;
    let data = prepare(
        &table,
        &PrepareOptions {
            target: truth.target.clone(),
            inputs: Some(truth.channels.clone()),
            window,
            horizon: 1,
            fractions: DEFAULT_FRACTIONS,
            scheme: NormScheme::Zscore,
            normalize_target: spec.task == Task::Regression,
        },
    )?;
    Ok((data, truth))
}

pub struct RunOutcome {
    pub model: AmnModel,
    pub history: History,
    pub test_loss: LossReport,
    pub test_metrics: MetricReport,
}

/// Train one model and score it on the test split.
pub fn train_and_test(data: &PreparedData, cfg: &TrainConfig) -> Result<RunOutcome> {
    let mut model = AmnModel::new(cfg.model_config(&data.train)?)?;
    model.norm_meta = Some(data.manifest.norm_meta.clone());
    let history = fit(&mut model, &data.train, &data.val, cfg)?;
    let test_loss = evaluate_loss(&model, &data.test)?;
    let test_metrics = score(&model, data)?;
    Ok(RunOutcome {
        model,
        history,
        test_loss,
        test_metrics,
    })
}

/// Task metrics on the test split in original units.
pub fn score(model: &AmnModel, data: &PreparedData) -> Result<MetricReport> {
    let pred = model.predict(&data.test)?;
    let truth = data.test.denormalized()?.targets;
    match model.task() {
        Task::Regression => MetricReport::regression(&truth, &pred, &data.train_targets_raw),
        Task::Classification => MetricReport::classification(&truth, &pred),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rnn: RnnKind,
    pub unit: UnitKind,
    /// Test ensemble loss per seed.
    pub losses: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn median_of(&self, rnn: RnnKind, unit: UnitKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.rnn == rnn && r.unit == unit)
            .map(|r| r.median)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<6} {:<8} {:>12}  per-seed\n", "rnn", "unit", "median");
        for r in &self.rows {
            let per: Vec<String> = r.losses.iter().map(|l| format!("{l:.5}")).collect();
            out.push_str(&format!(
                "{:<6} {:<8} {:>12.6}  {}\n",
                r.rnn.as_str(),
                r.unit.as_str(),
                r.median,
                per.join(" ")
            ));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train every `(rnn, unit)` arm on each seed's dataset; seed `s` sets both
/// the generator and the training seed so arms share data.
pub fn ablate(
    spec: &SyntheticSpec,
    window: usize,
    base: &TrainConfig,
    arms: &[(RnnKind, UnitKind)],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut losses = vec![Vec::with_capacity(seeds.len()); arms.len()];
    for &seed in seeds {
        let (data, _) = prepare_synthetic(&SyntheticSpec { seed, ..spec.clone() }, window)?;
        for (k, &(rnn, unit)) in arms.iter().enumerate() {
            let cfg = TrainConfig {
                rnn,
                unit,
                seed,
                task: spec.task,
                ..base.clone()
            };
            let run = train_and_test(&data, &cfg)?;
            log::info!(
                "ablate seed {seed} {}+{}: test loss {:.6}",
                rnn.as_str(),
                unit.as_str(),
                run.test_loss.loss_mod
            );
            losses[k].push(run.test_loss.loss_mod);
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows: arms
            .iter()
            .zip(losses)
            .map(|(&(rnn, unit), l)| AblationRow {
                rnn,
                unit,
                median: median(&l),
                losses: l,
            })
            .collect(),
    })
}

pub const ALL_ARMS: [(RnnKind, UnitKind); 6] = [
    (RnnKind::Lstm, UnitKind::Anb),
    (RnnKind::Lstm, UnitKind::Linear),
    (RnnKind::Lstm, UnitKind::Exu),
    (RnnKind::Gru, UnitKind::Anb),
    (RnnKind::Gru, UnitKind::Linear),
    (RnnKind::Gru, UnitKind::Exu),
];
