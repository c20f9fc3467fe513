//! wasm-bindgen entry points for the static demo page in `www/`.

use amn_core::data::{SyntheticSpec, Task};
use amn_core::experiment::{prepare_synthetic, train_and_test};
use amn_core::explain::{self, Explanation};
use amn_core::modular::UnitKind;
use amn_core::train::{cosine_warmup_lr, TrainConfig};
use amn_core::Result;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Settings the page exposes; everything else uses small fixed sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoOptions {
    pub relevant: usize,
    pub irrelevant: usize,
    pub length: usize,
    pub noise_std: f64,
    pub epochs: usize,
    pub seed: u64,
    pub unit: UnitKind,
    pub grid: usize,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            relevant: 3,
            irrelevant: 3,
            length: 600,
            noise_std: 0.1,
            epochs: 15,
            seed: 0,
            unit: UnitKind::Anb,
            grid: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DemoResult {
    pub relevant: Vec<String>,
    pub test_loss: f64,
    pub epochs_run: usize,
    pub val_curve: Vec<f64>,
    pub explanation: Explanation,
}

pub fn schedule(total_steps: usize, initial_lr: f64, warmup_fraction: f64) -> Result<Vec<f64>> {
    if total_steps == 0 {
        return Err(amn_core::AmnError::Config("total_steps must be >= 1".into()));
    }
    (0..total_steps)
        .map(|s| cosine_warmup_lr(s, total_steps, initial_lr, warmup_fraction))
        .collect()
}

pub fn run_demo(opts: &DemoOptions) -> Result<DemoResult> {
    let spec = SyntheticSpec {
        relevant: opts.relevant,
        irrelevant: opts.irrelevant,
        length: opts.length,
        noise_std: opts.noise_std,
        seed: opts.seed,
        task: Task::Regression,
        ..SyntheticSpec::default()
    };
    let (data, truth) = prepare_synthetic(&spec, 1)?;
    let cfg = TrainConfig {
        epochs: opts.epochs,
        seed: opts.seed,
        unit: opts.unit,
        batch_size: 32,
        rnn_hidden: 16,
        d_model: 8,
        num_heads: 2,
        module_hidden: [16, 8],
        n_features: opts.relevant.max(1),
        ..TrainConfig::default()
    };
    let run = train_and_test(&data, &cfg)?;
    let explanation = explain::explain(&run.model, &data.train, &data.test, opts.grid, 20)?;
    Ok(DemoResult {
        relevant: truth.relevant_features(1),
        test_loss: run.test_loss.loss_mod,
        epochs_run: run.history.epochs.len(),
        val_curve: run.history.epochs.iter().map(|e| e.val.loss_mod).collect(),
        explanation,
    })
}

pub fn shape_plot(explanation_json: &str, index: usize) -> Result<String> {
    let e = Explanation::from_json(explanation_json)?;
    let sf = e.shape_functions.get(index).ok_or_else(|| {
        amn_core::AmnError::Contract(format!(
            "shape function {index} requested, explanation has {}",
            e.shape_functions.len()
        ))
    })?;
    Ok(explain::shape_svg(sf))
}

fn js(e: amn_core::AmnError) -> JsError {
    JsError::new(&e.to_string())
}

/// Learning rate at every step of a run.
#[wasm_bindgen(js_name = lrSchedule)]
pub fn lr_schedule(total_steps: usize, initial_lr: f64, warmup_fraction: f64) -> std::result::Result<Vec<f64>, JsError> {
    schedule(total_steps, initial_lr, warmup_fraction).map_err(js)
}

/// Train on a generated series; `options` is JSON for [`DemoOptions`].
#[wasm_bindgen(js_name = trainDemo)]
pub fn train_demo(options: &str) -> std::result::Result<String, JsError> {
    let opts: DemoOptions = if options.trim().is_empty() {
        DemoOptions::default()
    } else {
        serde_json::from_str(options).map_err(|e| JsError::new(&e.to_string()))?
    };
    let result = run_demo(&opts).map_err(js)?;
    serde_json::to_string(&result).map_err(|e| JsError::new(&e.to_string()))
}

/// SVG for the `index`-th shape function of an explanation.
#[wasm_bindgen(js_name = shapeSvg)]
pub fn shape_svg(explanation_json: &str, index: usize) -> std::result::Result<String, JsError> {
    shape_plot(explanation_json, index).map_err(js)
}
