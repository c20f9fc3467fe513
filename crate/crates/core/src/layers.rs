//! Parameterised layers: linear, layer normalisation, dropout, LSTM and GRU
//! cells, and the exp-centred ExU unit.
//!
//! Inputs are batched along leading axes; feature vectors live in the last axis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{AmnError, Result};
use crate::params::{self, Bound, ParamId, ParamStore};

/// `y = x Wᵀ + b` with `W: [out × in]`, Xavier weights and zero bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            params::xavier_uniform(rng, out_dim, in_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let wt = g.transpose(p.var(self.weight))?;
        let y = g.matmul(x, wt)?;
        g.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub epsilon: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(AmnError::Config(format!(
                "layer norm epsilon must be > 0, got {epsilon}"
            )));
        }
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Ok(LayerNorm {
            gain,
            bias,
            epsilon,
            dim,
        })
    }

    /// `gain ⊙ (x − mean) / sqrt(var + ε) + bias` over the last axis.
    ///
    /// With a single unit the centred input is zero and the output is `bias`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        let mean = g.mean_axis(x, axis)?;
        let centred = g.sub(x, mean)?;
        let sq = g.square(centred)?;
        let var = g.mean_axis(sq, axis)?;
        let var_eps = g.add_scalar(var, self.epsilon)?;
        let std = g.sqrt(var_eps)?;
        let normed = g.div(centred, std)?;
        let scaled = g.mul(normed, p.var(self.gain))?;
        g.add(scaled, p.var(self.bias))
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1 / (1 − rate)`. Identity outside training.
pub fn dropout(
    g: &mut Graph,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AmnError::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// LSTM cell with fused gate matrices packed in the order forget, input,
/// candidate, output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lstm {
    /// `[4·hidden × input]`
    pub w_x: ParamId,
    /// `[4·hidden × hidden]`
    pub w_h: ParamId,
    /// `[4·hidden]`
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// All intermediate values of one LSTM step.
#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub h: Var,
    pub c: Var,
    pub forget: Var,
    pub input: Var,
    pub candidate: Var,
    pub output: Var,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        // Each gate block gets its own Glorot scale.
        let w_x = stack_gates(rng, 4, hidden, input);
        let w_h = stack_gates(rng, 4, hidden, hidden);
        Lstm {
            w_x: store.add(format!("{name}.w_x"), w_x),
            w_h: store.add(format!("{name}.w_h"), w_h),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            input,
            hidden,
        }
    }

    /// One step for a batch: `x: [B × input]`, `h, c: [B × hidden]`.
    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var, c: Var) -> Result<LstmStep> {
        let hs = self.hidden;
        let wx = g.transpose(p.var(self.w_x))?;
        let wh = g.transpose(p.var(self.w_h))?;
        let zx = g.matmul(x, wx)?;
        let zh = g.matmul(h, wh)?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, p.var(self.b))?;
        let axis = g.shape(z).len() - 1;
        let zf = g.slice(z, axis, 0, hs)?;
        let zi = g.slice(z, axis, hs, hs)?;
        let zs = g.slice(z, axis, 2 * hs, hs)?;
        let zo = g.slice(z, axis, 3 * hs, hs)?;
        let forget = g.sigmoid(zf)?;
        let input = g.sigmoid(zi)?;
        let candidate = g.tanh(zs)?;
        let output = g.sigmoid(zo)?;
        let keep = g.mul(forget, c)?;
        let write = g.mul(input, candidate)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next)?;
        let h_next = g.mul(squashed, output)?;
        Ok(LstmStep {
            h: h_next,
            c: c_next,
            forget,
            input,
            candidate,
            output,
        })
    }
}

/// GRU cell, gates packed reset, update, candidate (PyTorch convention).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gru {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let w_x = stack_gates(rng, 3, hidden, input);
        let w_h = stack_gates(rng, 3, hidden, hidden);
        Gru {
            w_x: store.add(format!("{name}.w_x"), w_x),
            w_h: store.add(format!("{name}.w_h"), w_h),
            b_x: store.add(format!("{name}.b_x"), Tensor::zeros(&[3 * hidden])),
            b_h: store.add(format!("{name}.b_h"), Tensor::zeros(&[3 * hidden])),
            input,
            hidden,
        }
    }

    /// `h' = (1 − z) ⊙ n + z ⊙ h` with `n = tanh(Wx x + bx + r ⊙ (Wh h + bh))`.
    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        let wx = g.transpose(p.var(self.w_x))?;
        let wh = g.transpose(p.var(self.w_h))?;
        let gx = g.matmul(x, wx)?;
        let gx = g.add(gx, p.var(self.b_x))?;
        let gh = g.matmul(h, wh)?;
        let gh = g.add(gh, p.var(self.b_h))?;
        let axis = g.shape(gx).len() - 1;
        let rx = g.slice(gx, axis, 0, hs)?;
        let rh = g.slice(gh, axis, 0, hs)?;
        let zx = g.slice(gx, axis, hs, hs)?;
        let zh = g.slice(gh, axis, hs, hs)?;
        let nx = g.slice(gx, axis, 2 * hs, hs)?;
        let nh = g.slice(gh, axis, 2 * hs, hs)?;
        let r = g.add(rx, rh)?;
        let r = g.sigmoid(r)?;
        let z = g.add(zx, zh)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, nh)?;
        let n = g.add(nx, gated)?;
        let n = g.tanh(n)?;
        // (1 − z) ⊙ n + z ⊙ h  ==  n + z ⊙ (h − n)
        let diff = g.sub(h, n)?;
        let carry = g.mul(z, diff)?;
        g.add(n, carry)
    }
}

/// ExU hidden unit: `relu((x − bias) · exp(W)ᵀ)` with `W: [out × in]`,
/// `bias: [in]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Exu {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Exu {
    /// Log-scale weights start near 4 (so `exp(W)` is large and units are
    /// sharp), biases spread over the typical normalised input range.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            params::truncated_normal(rng, &[out_dim, in_dim], 4.0, 0.5),
        );
        let bias = store.add(
            format!("{name}.bias"),
            params::truncated_normal(rng, &[in_dim], 0.0, 0.5),
        );
        Exu {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        exu(g, x, p.var(self.weight), p.var(self.bias))
    }
}

/// The raw ExU transform on tape values.
pub fn exu(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let shifted = g.sub(x, bias)?;
    let scale = g.exp(weight)?;
    let scale_t = g.transpose(scale)?;
    let y = g.matmul(shifted, scale_t)?;
    g.relu(y)
}

fn stack_gates(rng: &mut ChaCha8Rng, gates: usize, hidden: usize, fan_in: usize) -> Tensor {
    let mut data = Vec::with_capacity(gates * hidden * fan_in);
    for _ in 0..gates {
        data.extend(params::xavier_uniform(rng, hidden, fan_in).into_data());
    }
    Tensor::new(vec![gates * hidden, fan_in], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::seeded;

    fn zero_store(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let lstm = Lstm::new(&mut store, &mut rng, "lstm", 3, 2);
        zero_store(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let s = lstm.step(&mut g, &p, x, h, c).unwrap();
        assert_eq!(g.value(s.h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(s.c).data(), &[0.0, 0.0]);
        assert_eq!(g.value(s.forget).data(), &[0.5, 0.5]);
        assert_eq!(g.value(s.candidate).data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_lstm_matches_hand_arithmetic() {
        // hidden=1, w_x=[.1,.2,.3,.4] (f,i,s,o), w_h=0, b=0, x=1, zero state.
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let lstm = Lstm::new(&mut store, &mut rng, "lstm", 1, 1);
        zero_store(&mut store);
        store
            .get_mut(lstm.w_x)
            .data_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let s = lstm.step(&mut g, &p, x, z, z).unwrap();
        // Frozen from an independent scalar evaluation:
        //   i = σ(0.2), s = tanh(0.3), o = σ(0.4); c = i·s; h = tanh(c)·o
        assert!((g.value(s.c).data()[0] - 0.160_173_578_171_798_97).abs() < 1e-12);
        assert!((g.value(s.h).data()[0] - 0.095_082_202_560_879_36).abs() < 1e-12);
    }

    #[test]
    fn zero_gru_gives_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let gru = Gru::new(&mut store, &mut rng, "gru", 2, 3);
        zero_store(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let h = g.constant(Tensor::zeros(&[1, 3]));
        let out = gru.step(&mut g, &p, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 3]);
    }

    #[test]
    fn scalar_gru_matches_hand_arithmetic() {
        // hidden=1, w_x=[.5,-.3,.8] (r,z,n), w_h=[.2,.1,-.4], all biases 0,
        // x=1, h=0.5.
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let gru = Gru::new(&mut store, &mut rng, "gru", 1, 1);
        zero_store(&mut store);
        store
            .get_mut(gru.w_x)
            .data_mut()
            .copy_from_slice(&[0.5, -0.3, 0.8]);
        store
            .get_mut(gru.w_h)
            .data_mut()
            .copy_from_slice(&[0.2, 0.1, -0.4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let h = g.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let out = gru.step(&mut g, &p, x, h).unwrap();
        // r = σ(0.6), z = σ(−0.25), n = tanh(0.8 + r·(−0.2)), h' = (1−z)n + z·0.5
        let expected = 0.548_094_788_562_049_5;
        assert!((g.value(out).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_and_symmetric_cases() {
        let mut store = ParamStore::new();
        let ln3 = LayerNorm::new(&mut store, "ln3", 3, 1e-5).unwrap();
        let ln2 = LayerNorm::new(&mut store, "ln2", 2, 1e-300).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let a = g.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
        let y = ln3.forward(&mut g, &p, a).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let b = g.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = ln2.forward(&mut g, &p, b).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_single_unit_returns_bias() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 1, 1e-5).unwrap();
        store.get_mut(ln.bias).data_mut()[0] = 0.25;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let a = g.constant(Tensor::vector(vec![7.0]));
        let y = ln.forward(&mut g, &p, a).unwrap();
        assert_eq!(g.value(y).data(), &[0.25]);
    }

    #[test]
    fn layer_norm_rejects_non_positive_epsilon() {
        let mut store = ParamStore::new();
        assert!(LayerNorm::new(&mut store, "ln", 4, 0.0).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut rng = seeded(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = dropout(&mut g, x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
        let y = dropout(&mut g, x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(matches!(
            dropout(&mut g, x, 1.0, true, &mut rng),
            Err(AmnError::Config(_))
        ));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = seeded(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1000]));
        let y = dropout(&mut g, x, 0.25, true, &mut rng).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let zeros = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&zeros), "{zeros}");
    }

    #[test]
    fn exu_unit_scale() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let w = g.constant(Tensor::zeros(&[1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = exu(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn linear_grad_check() {
        let mut rng = seeded(3);
        let x = params::uniform(&mut rng, &[4, 3], 1.0);
        let w = params::uniform(&mut rng, &[2, 3], 1.0);
        let b = params::uniform(&mut rng, &[2], 1.0);
        let err = grad_check(
            |g, v| {
                let wt = g.transpose(v[1])?;
                let y = g.matmul(v[0], wt)?;
                let y = g.add(y, v[2])?;
                let y = g.square(y)?;
                g.sum(y)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn lstm_step_grad_check() {
        let mut rng = seeded(4);
        let inputs = vec![
            params::uniform(&mut rng, &[2, 3], 1.0),  // x
            params::uniform(&mut rng, &[2, 2], 0.5),  // h
            params::uniform(&mut rng, &[2, 2], 0.5),  // c
            params::uniform(&mut rng, &[8, 3], 0.7),  // w_x
            params::uniform(&mut rng, &[8, 2], 0.7),  // w_h
            params::uniform(&mut rng, &[8], 0.3),     // b
        ];
        let err = grad_check(
            |g, v| {
                let mut store = ParamStore::new();
                let mut r = seeded(0);
                let lstm = Lstm::new(&mut store, &mut r, "l", 3, 2);
                let bound = Bound::with_overrides(&store, &[(lstm.w_x, v[3]), (lstm.w_h, v[4]), (lstm.b, v[5])], g);
                let s = lstm.step(g, &bound, v[0], v[1], v[2])?;
                let hc = g.mul(s.h, s.c)?;
                let t = g.tanh(hc)?;
                g.sum(t)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gru_step_grad_check() {
        let mut rng = seeded(5);
        let inputs = vec![
            params::uniform(&mut rng, &[2, 3], 1.0),
            params::uniform(&mut rng, &[2, 2], 0.5),
            params::uniform(&mut rng, &[6, 3], 0.7),
            params::uniform(&mut rng, &[6, 2], 0.7),
            params::uniform(&mut rng, &[6], 0.3),
            params::uniform(&mut rng, &[6], 0.3),
        ];
        let err = grad_check(
            |g, v| {
                let mut store = ParamStore::new();
                let mut r = seeded(0);
                let gru = Gru::new(&mut store, &mut r, "g", 3, 2);
                let bound = Bound::with_overrides(
                    &store,
                    &[(gru.w_x, v[2]), (gru.w_h, v[3]), (gru.b_x, v[4]), (gru.b_h, v[5])],
                    g,
                );
                let h = gru.step(g, &bound, v[0], v[1])?;
                let h = g.square(h)?;
                g.sum(h)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn layer_norm_grad_check() {
        let mut rng = seeded(6);
        let inputs = vec![
            params::uniform(&mut rng, &[3, 4], 2.0),
            params::uniform(&mut rng, &[4], 1.0),
            params::uniform(&mut rng, &[4], 1.0),
            params::uniform(&mut rng, &[3, 4], 1.0),
        ];
        let err = grad_check(
            |g, v| {
                let mut store = ParamStore::new();
                let ln = LayerNorm::new(&mut store, "ln", 4, 1e-5)?;
                let bound = Bound::with_overrides(&store, &[(ln.gain, v[1]), (ln.bias, v[2])], g);
                let y = ln.forward(g, &bound, v[0])?;
                let y = g.mul(y, v[3])?;
                g.sum(y)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
