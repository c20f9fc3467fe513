//! Attention-based feature selection.
//!
//! Every flattened input feature is one token. Each head runs scaled
//! dot-product self-attention over the tokens; the attention mass a feature
//! receives, averaged over heads and query positions, is its raw score and a
//! softmax over the scores gives the feature weights `F`. A ReLU plus
//! fully-connected head on the `F`-scaled attention output produces an
//! auxiliary prediction so the recurrent and attention parameters get their
//! own loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{AmnError, Result};
use crate::layers::Linear;
use crate::params::{self, Bound, ParamId, ParamStore};

/// Scaled dot-product attention over the last two axes.
///
/// Returns `(softmax(QKᵀ/√d_k)·V, attention matrix)`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (dq, dk) = (
        *g.shape(q).last().unwrap_or(&0),
        *g.shape(k).last().unwrap_or(&0),
    );
    if dq != dk {
        return Err(AmnError::shape("attention", g.shape(q), g.shape(k)));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dk as f64).sqrt())?;
    let attn = g.softmax(logits)?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionHead {
    /// `[d_model × d_v]`
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Afs {
    pub heads: Vec<AttentionHead>,
    /// `[heads·d_v × d_model]`
    pub w_ah: ParamId,
    /// Maps per-feature pooled outputs (length `features`) to the target.
    pub aux: Linear,
    pub features: usize,
    pub d_model: usize,
    pub d_v: usize,
}

/// Tape values produced by one AFS pass over a batch.
#[derive(Clone, Debug)]
pub struct AfsOutput {
    /// `F`: `[B × features]`, each row a softmax.
    pub weights: Var,
    /// Pooled attention mass before the softmax, `[B × features]`.
    pub scores: Var,
    /// Auxiliary prediction, `[B × 1]`.
    pub aux: Var,
    /// Per-head attention matrices, `[B × features × features]`.
    pub attention: Vec<Var>,
}

impl Afs {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        features: usize,
        d_model: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if features < 1 {
            return Err(AmnError::Contract("AFS needs at least one feature".into()));
        }
        if num_heads < 1 || !d_model.is_multiple_of(num_heads) {
            return Err(AmnError::Config(format!(
                "d_model {d_model} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        let d_v = d_model / num_heads;
        let heads = (0..num_heads)
            .map(|h| AttentionHead {
                w_q: store.add(
                    format!("afs.head{h}.w_q"),
                    params::xavier_uniform(rng, d_model, d_v),
                ),
                w_k: store.add(
                    format!("afs.head{h}.w_k"),
                    params::xavier_uniform(rng, d_model, d_v),
                ),
                w_v: store.add(
                    format!("afs.head{h}.w_v"),
                    params::xavier_uniform(rng, d_model, d_v),
                ),
            })
            .collect();
        let w_ah = store.add(
            "afs.w_ah",
            params::xavier_uniform(rng, num_heads * d_v, d_model),
        );
        let aux = Linear::new(store, rng, "afs.aux", features, 1);
        Ok(Afs {
            heads,
            w_ah,
            aux,
            features,
            d_model,
            d_v,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Run AFS on feature tokens `r: [B × features × d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, r: Var) -> Result<AfsOutput> {
        let shape = g.shape(r).to_vec();
        if shape.len() != 3 || shape[1] != self.features || shape[2] != self.d_model {
            return Err(AmnError::shape(
                "afs",
                &shape,
                &[0, self.features, self.d_model],
            ));
        }
        let batch = shape[0];
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        let mut received: Option<Var> = None;
        for head in &self.heads {
            let q = g.matmul(r, p.var(head.w_q))?;
            let k = g.matmul(r, p.var(head.w_k))?;
            let v = g.matmul(r, p.var(head.w_v))?;
            let (out, attn) = scaled_dot_attention(g, q, k, v)?;
            // Mass each key (feature) receives, summed over query rows.
            let got = g.sum_axis(attn, 1)?;
            received = Some(match received {
                None => got,
                Some(acc) => g.add(acc, got)?,
            });
            outs.push(out);
            attention.push(attn);
        }
        let received = received.expect("at least one head");
        let pooled = g.scale(received, 1.0 / self.heads.len() as f64)?;
        let scores = g.reshape(pooled, &[batch, self.features])?;
        let weights = g.softmax(scores)?;

        let cat = g.concat(&outs, 2)?;
        let combined = g.matmul(cat, p.var(self.w_ah))?;
        let combined = g.add(combined, r)?;
        let per_feature = g.mean_axis(combined, 2)?;
        let per_feature = g.reshape(per_feature, &[batch, self.features])?;
        let gated = g.mul(per_feature, weights)?;
        let gated = g.relu(gated)?;
        let aux = self.aux.forward(g, p, gated)?;
        Ok(AfsOutput {
            weights,
            scores,
            aux,
            attention,
        })
    }
}

/// Feature weights with the selected top-`n` indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

impl FeatureWeights {
    pub fn new(weights: Vec<f64>, n: usize) -> Result<Self> {
        let selected = select_top_n(&weights, n)?;
        Ok(FeatureWeights { weights, selected })
    }

    /// `{feature_name: weight}` ordered by descending weight.
    pub fn to_json(&self, names: &[String]) -> Result<serde_json::Value> {
        if names.len() != self.weights.len() {
            return Err(AmnError::Contract(format!(
                "{} names for {} feature weights",
                names.len(),
                self.weights.len()
            )));
        }
        let order = select_top_n(&self.weights, self.weights.len())?;
        let mut map = serde_json::Map::new();
        for i in order {
            map.insert(names[i].clone(), serde_json::Value::from(self.weights[i]));
        }
        Ok(serde_json::Value::Object(map))
    }
}

/// Indices of the `n` largest weights, descending, ties to the lower index.
pub fn select_top_n(weights: &[f64], n: usize) -> Result<Vec<usize>> {
    if n < 1 || n > weights.len() {
        return Err(AmnError::Config(format!(
            "top-n selection needs 1 <= n <= {}, got {n}",
            weights.len()
        )));
    }
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}
