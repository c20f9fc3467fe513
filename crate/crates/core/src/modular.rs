//! Additive ensemble of univariate feature networks.
//!
//! Each module sees exactly one scalar input. Its first layer is one of three
//! units: attention-based node bootstrapping (ANB), whose weights are the
//! initial weights scaled by the feature's attention weight; the ExU unit; or
//! a plain linear layer. Two linear layers follow. The ensemble output is
//! `beta + Σ contributions`, kept pre-link so additivity is exact.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{AmnError, Result};
use crate::layers::{self, Exu, Linear};
use crate::params::{self, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Anb,
    Linear,
    Exu,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Anb => "anb",
            UnitKind::Linear => "linear",
            UnitKind::Exu => "exu",
        }
    }
}

impl std::str::FromStr for UnitKind {
    type Err = AmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anb" => Ok(UnitKind::Anb),
            "linear" => Ok(UnitKind::Linear),
            "exu" => Ok(UnitKind::Exu),
            other => Err(AmnError::Config(format!(
                "unknown unit kind {other:?} (expected anb, linear or exu)"
            ))),
        }
    }
}

/// ANB first layer: `relu((x − b) ⊙ (w_init ⊙ f))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnbUnit {
    /// `[h1]`, Xavier-initialised.
    pub w_init: ParamId,
    /// `[h1]`, per-node shift, zero-initialised.
    pub b: ParamId,
}

/// ANB on tape values. `x` and `f` broadcast against `[h1]`.
pub fn anb_forward(g: &mut Graph, x: Var, f: Var, w_init: Var, b: Var) -> Result<Var> {
    let w_mod = g.mul(w_init, f)?;
    let shifted = g.sub(x, b)?;
    let z = g.mul(shifted, w_mod)?;
    g.relu(z)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FirstLayer {
    Anb(AnbUnit),
    Exu(Exu),
    Linear(Linear),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureModule {
    pub first: FirstLayer,
    pub layer2: Linear,
    pub layer3: Linear,
    pub dropout: f64,
}

impl FeatureModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        unit: UnitKind,
        hidden: [usize; 2],
        dropout: f64,
    ) -> Result<Self> {
        layers::check_rate(dropout)?;
        let [h1, h2] = hidden;
        if h1 == 0 || h2 == 0 {
            return Err(AmnError::Config("module hidden sizes must be positive".into()));
        }
        let first = match unit {
            UnitKind::Anb => {
                let w = params::xavier_uniform(rng, h1, 1).reshaped(vec![h1])?;
                FirstLayer::Anb(AnbUnit {
                    w_init: store.add(format!("{name}.anb.w_init"), w),
                    b: store.add(format!("{name}.anb.b"), Tensor::zeros(&[h1])),
                })
            }
            UnitKind::Exu => FirstLayer::Exu(Exu::new(store, rng, &format!("{name}.exu"), 1, h1)),
            UnitKind::Linear => {
                FirstLayer::Linear(Linear::new(store, rng, &format!("{name}.linear1"), 1, h1))
            }
        };
        Ok(FeatureModule {
            first,
            layer2: Linear::new(store, rng, &format!("{name}.layer2"), h1, h2),
            layer3: Linear::new(store, rng, &format!("{name}.layer3"), h2, 1),
            dropout,
        })
    }

    pub fn unit_kind(&self) -> UnitKind {
        match self.first {
            FirstLayer::Anb(_) => UnitKind::Anb,
            FirstLayer::Exu(_) => UnitKind::Exu,
            FirstLayer::Linear(_) => UnitKind::Linear,
        }
    }

    /// Contribution `[B × 1]` for scalar inputs `x: [B × 1]`.
    ///
    /// `f` is the attention factor for this feature (`[B × 1]` or broadcastable);
    /// only the ANB unit reads it.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        f: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let h = match &self.first {
            FirstLayer::Anb(u) => anb_forward(g, x, f, p.var(u.w_init), p.var(u.b))?,
            FirstLayer::Exu(u) => u.forward(g, p, x)?,
            FirstLayer::Linear(l) => {
                let z = l.forward(g, p, x)?;
                g.relu(z)?
            }
        };
        let h = layers::dropout(g, h, self.dropout, training, rng)?;
        let h = self.layer2.forward(g, p, h)?;
        let h = g.relu(h)?;
        self.layer3.forward(g, p, h)
    }
}

/// One module per input feature plus the global bias `beta`.
///
/// The model decides which modules are active; inactive ones are simply not
/// evaluated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModularEnsemble {
    pub modules: Vec<FeatureModule>,
    pub beta: ParamId,
    pub output_dropout: f64,
}

/// Ensemble output for a batch.
#[derive(Clone, Copy, Debug)]
pub struct EnsembleOutput {
    /// `beta + Σ contributions`, `[B × 1]`.
    pub prediction: Var,
    /// Per-module contributions after any mask and dropout, `[B × n]`.
    pub contributions: Var,
}

impl ModularEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        features: usize,
        unit: UnitKind,
        hidden: [usize; 2],
        module_dropout: f64,
        output_dropout: f64,
    ) -> Result<Self> {
        layers::check_rate(output_dropout)?;
        let modules = (0..features)
            .map(|j| FeatureModule::new(store, rng, &format!("module{j}"), unit, hidden, module_dropout))
            .collect::<Result<Vec<_>>>()?;
        let beta = store.add("ensemble.beta", Tensor::scalar(0.0));
        Ok(ModularEnsemble {
            modules,
            beta,
            output_dropout,
        })
    }

    /// Evaluate modules `active[i]` on `xs[i]` (each `[B × 1]`) with weights
    /// `fs[i]`, then sum.
    ///
    /// `mask`, when given, is a constant `[B × n]` multiplier on the
    /// contributions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        active: &[usize],
        xs: &[Var],
        fs: &[Var],
        mask: Option<Var>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<EnsembleOutput> {
        if active.len() != xs.len() || active.len() != fs.len() || active.is_empty() {
            return Err(AmnError::Contract(format!(
                "ensemble got {} modules, {} inputs, {} weights",
                active.len(),
                xs.len(),
                fs.len()
            )));
        }
        let mut parts = Vec::with_capacity(active.len());
        for ((&j, &x), &f) in active.iter().zip(xs).zip(fs) {
            let module = self.modules.get(j).ok_or_else(|| {
                AmnError::Contract(format!("no module for feature {j}"))
            })?;
            parts.push(module.forward(g, p, x, f, training, rng)?);
        }
        let mut contributions = g.concat(&parts, 1)?;
        if let Some(m) = mask {
            contributions = g.mul(contributions, m)?;
        }
        contributions = layers::dropout(g, contributions, self.output_dropout, training, rng)?;
        let total = g.sum_axis(contributions, 1)?;
        let prediction = g.add(total, p.var(self.beta))?;
        Ok(EnsembleOutput {
            prediction,
            contributions,
        })
    }
}
