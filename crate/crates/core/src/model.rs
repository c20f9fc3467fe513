//! The full network: recurrent encoder with per-step layer norm, feature
//! tokens, attention-based feature selection and the additive module
//! ensemble.
//!
//! Until the selection is frozen every feature has a module and a per-sample
//! mask keeps only the top-`n` live attention weights. After freezing only
//! the selected modules run. In evaluation mode the ANB units are scaled by
//! `reference_weights` (mean attention over the training data) rather than
//! the per-sample weights, so each contribution depends on its own feature
//! alone.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afs::{select_top_n, Afs, FeatureWeights};
use crate::autodiff::{sigmoid, Graph, Tensor, Var};
use crate::data::{NormMeta, SeriesDataset, Task};
use crate::error::{AmnError, Result};
use crate::layers::{self, Gru, LayerNorm, Linear, Lstm};
use crate::modular::{ModularEnsemble, UnitKind};
use crate::params::{self, Bound, ParamStore};
use crate::rng::seeded;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Evaluation-mode contributions and beta are rounded to multiples of
/// 2^-36. Sums of such values below 2^17 in magnitude are exact in f64, so
/// `prediction - beta` equals the contribution sum bit for bit in any
/// summation order.
pub const ADDITIVE_GRID: f64 = (1u64 << 36) as f64;

pub fn snap(x: f64) -> f64 {
    if x.abs() < 65536.0 {
        (x * ADDITIVE_GRID).round() / ADDITIVE_GRID
    } else {
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnKind {
    Lstm,
    Gru,
}

impl RnnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RnnKind::Lstm => "lstm",
            RnnKind::Gru => "gru",
        }
    }
}

impl std::str::FromStr for RnnKind {
    type Err = AmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(RnnKind::Lstm),
            "gru" => Ok(RnnKind::Gru),
            other => Err(AmnError::Config(format!(
                "unknown rnn kind {other:?} (expected lstm or gru)"
            ))),
        }
    }
}

/// Architecture and data layout. Everything needed to rebuild the
/// parameter layout from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub rnn: RnnKind,
    pub unit: UnitKind,
    pub task: Task,
    pub window: usize,
    pub channels: usize,
    pub feature_names: Vec<String>,
    pub rnn_hidden: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub module_hidden: [usize; 2],
    pub n_features: usize,
    pub rnn_dropout: f64,
    pub module_dropout: f64,
    pub output_dropout: f64,
    pub layer_norm_eps: f64,
    /// Seeds parameter initialisation.
    pub seed: u64,
}

impl ModelConfig {
    pub fn features(&self) -> usize {
        self.window * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmnError::Config(m));
        if self.window < 1 || self.channels < 1 {
            return bad(format!(
                "window ({}) and channels ({}) must be >= 1",
                self.window, self.channels
            ));
        }
        if self.feature_names.len() != self.features() {
            return bad(format!(
                "{} feature names for {} features",
                self.feature_names.len(),
                self.features()
            ));
        }
        if self.rnn_hidden < 1 || self.d_model < 1 {
            return bad("rnn_hidden and d_model must be >= 1".into());
        }
        if self.num_heads < 1 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.n_features < 1 || self.n_features > self.features() {
            return bad(format!(
                "n_features must be in 1..={}, got {}",
                self.features(),
                self.n_features
            ));
        }
        for r in [self.rnn_dropout, self.module_dropout, self.output_dropout] {
            layers::check_rate(r)?;
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Rnn {
    Lstm(Lstm),
    Gru(Gru),
}

/// Builds one `d_model` token per flattened feature:
/// `R_j = x_j · value + context(h_T) + embedding_j`, i.e. a shared linear map
/// of `[x_j, h_T]` plus a learned per-feature embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tokenizer {
    /// `[1 × d_model]`
    pub value: params::ParamId,
    pub context: Linear,
    /// `[D × d_model]`
    pub embedding: params::ParamId,
}

impl Tokenizer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        features: usize,
        hidden: usize,
        d_model: usize,
    ) -> Result<Self> {
        let value = params::xavier_uniform(rng, d_model, 1).reshaped(vec![1, d_model])?;
        Ok(Tokenizer {
            value: store.add("token.value", value),
            context: Linear::new(store, rng, "token.context", hidden, d_model),
            embedding: store.add(
                "token.embedding",
                params::xavier_uniform(rng, features, d_model),
            ),
        })
    }

    /// `x: [B × D]`, `h: [B × H]` → `[B × D × d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, d) = (shape[0], shape[1]);
        let x3 = g.reshape(x, &[b, d, 1])?;
        let values = g.matmul(x3, p.var(self.value))?;
        let ctx = self.context.forward(g, p, h)?;
        let dm = g.shape(ctx)[1];
        let ctx = g.reshape(ctx, &[b, 1, dm])?;
        let r = g.add(values, ctx)?;
        g.add(r, p.var(self.embedding))
    }
}

/// Forward mode. Training draws dropout masks from the given generator.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Tape handles for one batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Pre-link prediction `[B × 1]`.
    pub prediction: Var,
    /// Auxiliary head `[B × 1]`.
    pub aux: Var,
    /// Attention feature weights `F`, `[B × D]`.
    pub weights: Var,
    /// `[B × |active|]`, masked where a feature is not selected.
    pub contributions: Var,
    /// Feature index of each contribution column.
    pub active: Vec<usize>,
}

/// Plain values of an evaluation-mode forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub prediction: Vec<f64>,
    pub aux: Vec<f64>,
    /// `[B × D]` row-major.
    pub weights: Vec<f64>,
    /// `[B × |active|]` row-major.
    pub contributions: Vec<f64>,
    pub active: Vec<usize>,
    pub beta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmnModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub rnn: Rnn,
    pub layer_norm: LayerNorm,
    pub tokenizer: Tokenizer,
    pub afs: Afs,
    pub ensemble: ModularEnsemble,
    pub frozen_selection: Option<Vec<usize>>,
    /// Mean attention weights over the training data; uniform at init.
    pub reference_weights: Vec<f64>,
    pub norm_meta: Option<NormMeta>,
}

impl AmnModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut store = ParamStore::new();
        let (d, h, dm) = (config.channels, config.rnn_hidden, config.d_model);
        let features = config.features();
        let rnn = match config.rnn {
            RnnKind::Lstm => Rnn::Lstm(Lstm::new(&mut store, &mut rng, "rnn", d, h)),
            RnnKind::Gru => Rnn::Gru(Gru::new(&mut store, &mut rng, "rnn", d, h)),
        };
        let layer_norm = LayerNorm::new(&mut store, "rnn_ln", h, config.layer_norm_eps)?;
        let tokenizer = Tokenizer::new(&mut store, &mut rng, features, h, dm)?;
        let afs = Afs::new(&mut store, &mut rng, features, dm, config.num_heads)?;
        let ensemble = ModularEnsemble::new(
            &mut store,
            &mut rng,
            features,
            config.unit,
            config.module_hidden,
            config.module_dropout,
            config.output_dropout,
        )?;
        Ok(AmnModel {
            reference_weights: vec![1.0 / features as f64; features],
            config,
            store,
            rnn,
            layer_norm,
            tokenizer,
            afs,
            ensemble,
            frozen_selection: None,
            norm_meta: None,
        })
    }

    pub fn features(&self) -> usize {
        self.config.features()
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    /// Output bias as reported in evaluation mode (on the additive grid).
    pub fn beta(&self) -> f64 {
        snap(self.store.get(self.ensemble.beta).data()[0])
    }

    /// ANB factor for feature `j` once the selection is frozen or in
    /// evaluation: its reference weight relative to uniform, `D·F̄_j`.
    pub fn anb_scale(&self, j: usize) -> f64 {
        self.features() as f64 * self.reference_weights[j]
    }

    /// Features whose modules contribute in evaluation mode, by rank.
    pub fn selection(&self) -> Result<Vec<usize>> {
        match &self.frozen_selection {
            Some(s) => Ok(s.clone()),
            None => select_top_n(&self.reference_weights, self.config.n_features),
        }
    }

    pub fn feature_weights(&self) -> Result<FeatureWeights> {
        Ok(FeatureWeights {
            weights: self.reference_weights.clone(),
            selected: self.selection()?,
        })
    }

    /// Fix the selection to the top-`n` reference weights.
    pub fn freeze_selection(&mut self) -> Result<Vec<usize>> {
        let sel = select_top_n(&self.reference_weights, self.config.n_features)?;
        self.frozen_selection = Some(sel.clone());
        Ok(sel)
    }

    pub fn set_reference_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.features() {
            return Err(AmnError::Contract(format!(
                "{} reference weights for {} features",
                weights.len(),
                self.features()
            )));
        }
        self.reference_weights = weights;
        Ok(())
    }

    fn check_batch(&self, x: &[f64], batch: usize) -> Result<()> {
        let per = self.features();
        if batch == 0 || x.len() != batch * per {
            return Err(AmnError::Contract(format!(
                "batch of {batch} samples needs {} values (window {} × channels {}), got {}",
                batch * per,
                self.config.window,
                self.config.channels,
                x.len()
            )));
        }
        Ok(())
    }

    /// Forward on a bound parameter view. `x` is `[B × T × d]` row-major.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &[f64],
        batch: usize,
        mut mode: Mode,
    ) -> Result<ModelOutput> {
        self.check_batch(x, batch)?;
        let (t_len, d, hs) = (self.config.window, self.config.channels, self.config.rnn_hidden);
        let features = self.features();
        let x_flat = g.constant(Tensor::new(vec![batch, features], x.to_vec())?);

        let mut h = g.constant(Tensor::zeros(&[batch, hs]));
        let mut c = g.constant(Tensor::zeros(&[batch, hs]));
        for t in 0..t_len {
            let x_t = g.slice(x_flat, 1, t * d, d)?;
            let raw = match &self.rnn {
                Rnn::Lstm(cell) => {
                    let step = cell.step(g, p, x_t, h, c)?;
                    c = step.c;
                    step.h
                }
                Rnn::Gru(cell) => cell.step(g, p, x_t, h)?,
            };
            h = self.layer_norm.forward(g, p, raw)?;
        }
        let training = mode.is_training();
        let mut scratch = seeded(0);
        let rng: &mut ChaCha8Rng = match &mut mode {
            Mode::Train(r) => r,
            Mode::Eval => &mut scratch,
        };
        let h = layers::dropout(g, h, self.config.rnn_dropout, training, rng)?;

        let tokens = self.tokenizer.forward(g, p, x_flat, h)?;
        let afs = self.afs.forward(g, p, tokens)?;

        let (active, mask) = if training {
            match &self.frozen_selection {
                Some(sel) => (sel.clone(), None),
                None => {
                    let live = g.value(afs.weights).data().to_vec();
                    let mut m = vec![0.0; batch * features];
                    for b in 0..batch {
                        let row = &live[b * features..(b + 1) * features];
                        for j in select_top_n(row, self.config.n_features)? {
                            m[b * features + j] = 1.0;
                        }
                    }
                    let mask = g.constant(Tensor::new(vec![batch, features], m)?);
                    ((0..features).collect(), Some(mask))
                }
            }
        } else {
            (self.selection()?, None)
        };

        let mut xs = Vec::with_capacity(active.len());
        let mut fs = Vec::with_capacity(active.len());
        for &j in &active {
            xs.push(g.slice(x_flat, 1, j, 1)?);
            fs.push(match (training, &self.frozen_selection) {
                (true, None) => {
                    let f = g.slice(afs.weights, 1, j, 1)?;
                    g.scale(f, features as f64)?
                }
                _ => g.constant(Tensor::scalar(self.anb_scale(j))),
            });
        }
        let ens = self
            .ensemble
            .forward(g, p, &active, &xs, &fs, mask, training, rng)?;
        Ok(ModelOutput {
            prediction: ens.prediction,
            aux: afs.aux,
            weights: afs.weights,
            contributions: ens.contributions,
            active,
        })
    }

    /// Evaluation-mode forward returning plain values.
    pub fn evaluate(&self, x: &[f64], batch: usize) -> Result<Evaluation> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let out = self.forward(&mut g, &p, x, batch, Mode::Eval)?;
        let beta = self.beta();
        let contributions: Vec<f64> =
            g.value(out.contributions).data().iter().map(|&c| snap(c)).collect();
        let prediction = contributions
            .chunks(out.active.len())
            .map(|row| row.iter().fold(beta, |acc, c| acc + c))
            .collect();
        Ok(Evaluation {
            prediction,
            aux: g.value(out.aux).data().to_vec(),
            weights: g.value(out.weights).data().to_vec(),
            contributions,
            active: out.active,
            beta,
        })
    }

    /// Evaluate in chunks of `chunk` samples and concatenate.
    pub fn evaluate_all(&self, samples: &[f64], chunk: usize) -> Result<Evaluation> {
        let per = self.features();
        let n = samples.len() / per.max(1);
        self.check_batch(samples, n.max(1))?;
        let mut all = Evaluation {
            prediction: Vec::with_capacity(n),
            aux: Vec::with_capacity(n),
            weights: Vec::with_capacity(n * per),
            contributions: Vec::new(),
            active: self.selection()?,
            beta: self.beta(),
        };
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let e = self.evaluate(&samples[start * per..end * per], end - start)?;
            all.prediction.extend(e.prediction);
            all.aux.extend(e.aux);
            all.weights.extend(e.weights);
            all.contributions.extend(e.contributions);
        }
        Ok(all)
    }

    /// Mean live attention weights over a dataset.
    pub fn mean_weights(&self, ds: &SeriesDataset) -> Result<Vec<f64>> {
        let e = self.evaluate_all(&ds.samples, 256)?;
        let per = self.features();
        let mut mean = vec![0.0; per];
        for row in e.weights.chunks(per) {
            for (m, w) in mean.iter_mut().zip(row) {
                *m += w;
            }
        }
        let n = ds.len() as f64;
        Ok(mean.into_iter().map(|m| m / n).collect())
    }

    fn check_dataset(&self, ds: &SeriesDataset) -> Result<()> {
        if ds.feature_names != self.config.feature_names {
            return Err(AmnError::Data(format!(
                "dataset features {:?} do not match the model's {:?}",
                ds.feature_names, self.config.feature_names
            )));
        }
        if self.norm_meta.is_some() && ds.norm_meta != self.norm_meta {
            return Err(AmnError::Data(
                "dataset normalisation metadata does not match the model's".into(),
            ));
        }
        Ok(())
    }

    /// Post-link predictions: probabilities for classification, original
    /// target units for regression.
    pub fn predict(&self, ds: &SeriesDataset) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        let raw = self.evaluate_all(&ds.samples, 256)?.prediction;
        Ok(match self.config.task {
            Task::Classification => raw.into_iter().map(sigmoid).collect(),
            Task::Regression => match &self.norm_meta {
                Some(m) => raw.into_iter().map(|v| m.target.invert(v)).collect(),
                None => raw,
            },
        })
    }

    /// Pre-link predictions in normalised units.
    pub fn predict_raw(&self, ds: &SeriesDataset) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        Ok(self.evaluate_all(&ds.samples, 256)?.prediction)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.store.clone(),
            frozen_selection: self.frozen_selection.clone(),
            reference_weights: self.reference_weights.clone(),
            norm_meta: self.norm_meta.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(AmnError::Version {
                what: "checkpoint",
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut model = AmnModel::new(ck.config.clone())?;
        model.store.load_from(&ck.params)?;
        if let Some(sel) = &ck.frozen_selection {
            if sel.len() != ck.config.n_features || sel.iter().any(|&j| j >= model.features()) {
                return Err(AmnError::Data(format!("invalid frozen selection {sel:?}")));
            }
        }
        model.frozen_selection = ck.frozen_selection.clone();
        model.set_reference_weights(ck.reference_weights.clone())?;
        model.norm_meta = ck.norm_meta.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_checkpoint().to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| AmnError::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AmnError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        AmnModel::from_checkpoint(&ck)
    }

    /// Hash of the serialised checkpoint.
    pub fn checkpoint_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_checkpoint().to_bytes()?))
    }
}

/// On-disk model: config, every parameter array, selection state and
/// normalisation metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub frozen_selection: Option<Vec<usize>>,
    pub reference_weights: Vec<f64>,
    pub norm_meta: Option<NormMeta>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;

    pub(crate) fn toy_config(rnn: RnnKind, unit: UnitKind) -> ModelConfig {
        ModelConfig {
            rnn,
            unit,
            task: Task::Regression,
            window: 2,
            channels: 2,
            feature_names: vec!["a_t0".into(), "b_t0".into(), "a_t1".into(), "b_t1".into()],
            rnn_hidden: 3,
            d_model: 4,
            num_heads: 2,
            module_hidden: [4, 3],
            n_features: 2,
            rnn_dropout: 0.0,
            module_dropout: 0.0,
            output_dropout: 0.0,
            layer_norm_eps: 1e-5,
            seed: 3,
        }
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn batch_rows_match_single_samples_bit_exact() {
        let mut model = AmnModel::new(toy_config(RnnKind::Lstm, UnitKind::Anb)).unwrap();
        model.reference_weights = vec![0.1, 0.4, 0.3, 0.2];
        let mut rng = seeded(1);
        let x = random_x(&mut rng, 16);
        let all = model.evaluate(&x, 4).unwrap();
        for b in 0..4 {
            let one = model.evaluate(&x[b * 4..(b + 1) * 4], 1).unwrap();
            assert_eq!(one.prediction[0].to_bits(), all.prediction[b].to_bits());
            assert_eq!(one.contributions, all.contributions[b * 2..(b + 1) * 2]);
        }
    }

    #[test]
    fn zero_model_predicts_beta() {
        let mut model = AmnModel::new(toy_config(RnnKind::Gru, UnitKind::Anb)).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.get_mut(id).data_mut().fill(0.0);
        }
        model.store.get_mut(model.ensemble.beta).data_mut()[0] = 0.75;
        let e = model.evaluate(&[0.0; 8], 2).unwrap();
        assert_eq!(e.prediction, vec![0.75, 0.75]);
    }

    #[test]
    fn snapped_sums_are_order_free() {
        assert_eq!(snap(0.5), 0.5);
        assert_eq!(snap(1e6), 1e6);
        assert!((snap(0.1) - 0.1).abs() < 1e-11);
        let v: Vec<f64> = (0..50).map(|i| snap((i as f64 * 0.77).sin() * 3.0)).collect();
        let fwd = v.iter().fold(0.0, |a, b| a + b);
        let rev = v.iter().rev().fold(0.0, |a, b| a + b);
        assert_eq!(fwd.to_bits(), rev.to_bits());
    }

    #[test]
    fn evaluation_is_additive_in_literal_form() {
        let mut model = AmnModel::new(toy_config(RnnKind::Lstm, UnitKind::Anb)).unwrap();
        jitter(&mut model, 4);
        model.store.get_mut(model.ensemble.beta).data_mut()[0] = 0.3;
        let mut rng = seeded(5);
        let x: Vec<f64> = (0..400 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e = model.evaluate(&x, 400).unwrap();
        let k = e.active.len();
        for (b, &p) in e.prediction.iter().enumerate() {
            let sum: f64 = e.contributions[b * k..(b + 1) * k].iter().sum();
            assert_eq!((p - e.beta).to_bits(), sum.to_bits());
        }
    }

    #[test]
    fn wrong_input_size_is_contract_error() {
        let model = AmnModel::new(toy_config(RnnKind::Lstm, UnitKind::Anb)).unwrap();
        assert!(matches!(model.evaluate(&[0.0; 7], 2), Err(AmnError::Contract(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = toy_config(RnnKind::Lstm, UnitKind::Anb);
        c.n_features = 5;
        assert!(matches!(AmnModel::new(c), Err(AmnError::Config(_))));
        let mut c = toy_config(RnnKind::Lstm, UnitKind::Anb);
        c.num_heads = 3;
        assert!(matches!(AmnModel::new(c), Err(AmnError::Config(_))));
    }

    /// Sum of squared prediction and aux errors, the regression joint loss.
    fn loss_on(
        model: &AmnModel,
        g: &mut Graph,
        p: &Bound,
        x: &[f64],
        y: &[f64],
    ) -> Result<Var> {
        let mut rng = seeded(0);
        let out = model.forward(g, p, x, y.len(), Mode::Train(&mut rng))?;
        let t = g.constant(Tensor::new(vec![y.len(), 1], y.to_vec())?);
        let e1 = g.sub(out.prediction, t)?;
        let e1 = g.square(e1)?;
        let l1 = g.mean(e1)?;
        let e2 = g.sub(out.aux, t)?;
        let e2 = g.square(e2)?;
        let l2 = g.mean(e2)?;
        g.add(l1, l2)
    }

    /// Move every parameter off exact zeros so no ReLU sits on its kink.
    pub(crate) fn jitter(model: &mut AmnModel, seed: u64) {
        let mut rng = seeded(seed);
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }

    fn end_to_end_check(model: &AmnModel) -> f64 {
        let mut rng = seeded(9);
        let x = random_x(&mut rng, 3 * 4);
        let y = random_x(&mut rng, 3);
        let ids: Vec<_> = model.store.ids().collect();
        let inputs: Vec<Tensor> = ids.iter().map(|&id| model.store.get(id).clone()).collect();
        grad_check(
            |g, vars| {
                let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
                let p = Bound::with_overrides(&model.store, &overrides, g);
                loss_on(model, g, &p, &x, &y)
            },
            &inputs,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for rnn in [RnnKind::Lstm, RnnKind::Gru] {
            for unit in [UnitKind::Anb, UnitKind::Linear, UnitKind::Exu] {
                let mut model = AmnModel::new(toy_config(rnn, unit)).unwrap();
                jitter(&mut model, 5);
                let err = end_to_end_check(&model);
                assert!(err < 1e-4, "{rnn:?}/{unit:?} live selection: {err}");
                model.reference_weights = vec![0.4, 0.1, 0.2, 0.3];
                model.freeze_selection().unwrap();
                let err = end_to_end_check(&model);
                assert!(err < 1e-4, "{rnn:?}/{unit:?} frozen: {err}");
            }
        }
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let model = AmnModel::new(toy_config(RnnKind::Lstm, UnitKind::Anb)).unwrap();
        let mut rng = seeded(4);
        let x = random_x(&mut rng, 8 * 4);
        let y = random_x(&mut rng, 8);
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let loss = loss_on(&model, &mut g, &p, &x, &y).unwrap();
        g.backward(loss).unwrap();
        let grads = p.grads(&g, &model.store);
        for group in ["rnn.", "rnn_ln.", "token.", "afs.", "module", "ensemble.beta"] {
            let norm: f64 = model
                .store
                .entries()
                .iter()
                .zip(&grads)
                .filter(|(e, _)| e.name.starts_with(group))
                .flat_map(|(_, gr)| gr.iter())
                .map(|v| v * v)
                .sum();
            assert!(norm > 0.0, "no gradient reached {group}");
        }
    }

    #[test]
    fn frozen_model_runs_only_selected_modules() {
        let mut model = AmnModel::new(toy_config(RnnKind::Lstm, UnitKind::Linear)).unwrap();
        model.reference_weights = vec![0.1, 0.2, 0.4, 0.3];
        assert_eq!(model.freeze_selection().unwrap(), vec![2, 3]);
        let e = model.evaluate(&[0.5; 8], 2).unwrap();
        assert_eq!(e.active, vec![2, 3]);
        assert_eq!(e.contributions.len(), 4);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model = AmnModel::new(toy_config(RnnKind::Gru, UnitKind::Exu)).unwrap();
        model.reference_weights = vec![0.1, 0.2, 0.4, 0.3];
        model.freeze_selection().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let hash = model.save(&path).unwrap();
        let back = AmnModel::load(&path).unwrap();
        for (a, b) in model.store.entries().iter().zip(back.store.entries()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor), "{}", a.name);
        }
        assert_eq!(back.checkpoint_hash().unwrap(), hash);
        assert_eq!(back.frozen_selection, model.frozen_selection);
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let model = AmnModel::new(toy_config(RnnKind::Lstm, UnitKind::Anb)).unwrap();
        let mut ck = model.to_checkpoint();
        ck.version = 99;
        assert!(matches!(
            AmnModel::from_checkpoint(&ck),
            Err(AmnError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn classification_predictions_are_probabilities() {
        let mut c = toy_config(RnnKind::Lstm, UnitKind::Anb);
        c.task = Task::Classification;
        let model = AmnModel::new(c).unwrap();
        let mut rng = seeded(2);
        let ds = SeriesDataset {
            channel_names: vec!["a".into(), "b".into()],
            feature_names: model.config.feature_names.clone(),
            window: 2,
            samples: random_x(&mut rng, 20),
            targets: vec![0.0; 5],
            target_rows: (0..5).collect(),
            norm_meta: None,
        };
        let p = model.predict(&ds).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, model.predict(&ds).unwrap());
    }
}
