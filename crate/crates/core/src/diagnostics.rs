//! Gradient checks over every primitive op, each layer and the full model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afs::{scaled_dot_attention, Afs};
use crate::autodiff::{grad_check, Graph, Tensor, Var};
use crate::data::Task;
use crate::error::Result;
use crate::layers::{exu, Gru, LayerNorm, Linear, Lstm};
use crate::model::{AmnModel, ModelConfig, Mode, RnnKind};
use crate::modular::{anb_forward, FeatureModule, ModularEnsemble, UnitKind};
use crate::params::{Bound, ParamStore};
use crate::rng::seeded;
use crate::train::joint_loss;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Contract `out` with fixed non-uniform weights so every output element
/// carries a distinct gradient.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (1.0 + 0.7 * i as f64).sin()).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("consistent shape")
}

/// Values away from zero so ReLU kinks are not probed.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.2..1.5);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}

/// Check a function of parameters in `store` plus extra input tensors.
fn check_params<F>(store: &ParamStore, extra: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    inputs.extend_from_slice(extra);
    grad_check(
        |g, vars| {
            let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let p = Bound::with_overrides(store, &overrides, g);
            let out = f(g, &p, &vars[ids.len()..])?;
            project(g, out)
        },
        &inputs,
        GRAD_EPS,
    )
}

fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check(
        |g, v| {
            let out = f(g, v)?;
            project(g, out)
        },
        inputs,
        GRAD_EPS,
    )
}

type Case = (String, Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>);

fn unary(name: &'static str, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    (
        name.to_string(),
        Box::new(move |rng| {
            let x = if lo < 0.0 {
                rand_signed(rng, &[3, 4])
            } else {
                rand_tensor(rng, &[3, 4], lo, hi)
            };
            check_inputs(&[x], |g, v| op(g, v[0]))
        }),
    )
}

fn binary(name: &'static str, b_shape: &'static [usize], op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    (
        name.to_string(),
        Box::new(move |rng| {
            let a = rand_signed(rng, &[2, 3, 4]);
            let b = rand_tensor(rng, b_shape, 0.5, 1.5);
            check_inputs(&[a, b], |g, v| op(g, v[0], v[1]))
        }),
    )
}

fn primitive_cases() -> Vec<Case> {
    let mut cases = vec![
        unary("sigmoid", -1.0, 1.0, |g, a| g.sigmoid(a)),
        unary("tanh", -1.0, 1.0, |g, a| g.tanh(a)),
        unary("relu", -1.0, 1.0, |g, a| g.relu(a)),
        unary("exp", -1.0, 1.0, |g, a| g.exp(a)),
        unary("log", 0.5, 2.0, |g, a| g.log(a)),
        unary("square", -1.0, 1.0, |g, a| g.square(a)),
        unary("sqrt", 0.5, 2.0, |g, a| g.sqrt(a)),
        unary("softplus", -1.0, 1.0, |g, a| g.softplus(a)),
        unary("neg", -1.0, 1.0, |g, a| g.neg(a)),
        unary("scale", -1.0, 1.0, |g, a| g.scale(a, -1.7)),
        unary("add_scalar", -1.0, 1.0, |g, a| g.add_scalar(a, 0.3)),
        unary("transpose", -1.0, 1.0, |g, a| g.transpose(a)),
        unary("reshape", -1.0, 1.0, |g, a| g.reshape(a, &[4, 3])),
        unary("slice", -1.0, 1.0, |g, a| g.slice(a, 1, 1, 2)),
        unary("sum_axis", -1.0, 1.0, |g, a| g.sum_axis(a, 0)),
        unary("mean_axis", -1.0, 1.0, |g, a| g.mean_axis(a, 1)),
        unary("sum", -1.0, 1.0, |g, a| g.sum(a)),
        unary("mean", -1.0, 1.0, |g, a| g.mean(a)),
        unary("softmax", -1.0, 1.0, |g, a| g.softmax(a)),
        binary("add (broadcast)", &[4], |g, a, b| g.add(a, b)),
        binary("sub (broadcast)", &[3, 1], |g, a, b| g.sub(a, b)),
        binary("mul (broadcast)", &[1, 3, 4], |g, a, b| g.mul(a, b)),
        binary("div (broadcast)", &[2, 1, 4], |g, a, b| g.div(a, b)),
        binary("mul", &[2, 3, 4], |g, a, b| g.mul(a, b)),
    ];
    cases.push((
        "matmul (batched)".into(),
        Box::new(|rng| {
            let a = rand_signed(rng, &[2, 3, 4]);
            let b = rand_signed(rng, &[4, 5]);
            check_inputs(&[a, b], |g, v| g.matmul(v[0], v[1]))
        }),
    ));
    cases.push((
        "concat".into(),
        Box::new(|rng| {
            let a = rand_signed(rng, &[2, 3]);
            let b = rand_signed(rng, &[2, 2]);
            check_inputs(&[a, b], |g, v| g.concat(&[v[0], v[1]], 1))
        }),
    ));
    cases
}

fn layer_cases() -> Vec<Case> {
    vec![
        (
            "linear".into(),
            Box::new(|rng| {
                let mut s = ParamStore::new();
                let l = Linear::new(&mut s, rng, "l", 3, 4);
                jitter(&mut s, rng);
                let x = rand_signed(rng, &[5, 3]);
                check_params(&s, &[x], |g, p, v| l.forward(g, p, v[0]))
            }),
        ),
        (
            "layer_norm".into(),
            Box::new(|rng| {
                let mut s = ParamStore::new();
                let l = LayerNorm::new(&mut s, "ln", 4, 1e-5)?;
                jitter(&mut s, rng);
                let x = rand_signed(rng, &[3, 4]);
                check_params(&s, &[x], |g, p, v| l.forward(g, p, v[0]))
            }),
        ),
        (
            "lstm_step".into(),
            Box::new(|rng| {
                let mut s = ParamStore::new();
                let l = Lstm::new(&mut s, rng, "lstm", 2, 3);
                jitter(&mut s, rng);
                let x = rand_signed(rng, &[2, 2]);
                let h = rand_signed(rng, &[2, 3]);
                let c = rand_signed(rng, &[2, 3]);
                check_params(&s, &[x, h, c], |g, p, v| {
                    let st = l.step(g, p, v[0], v[1], v[2])?;
                    g.concat(&[st.h, st.c], 1)
                })
            }),
        ),
        (
            "gru_step".into(),
            Box::new(|rng| {
                let mut s = ParamStore::new();
                let l = Gru::new(&mut s, rng, "gru", 2, 3);
                jitter(&mut s, rng);
                let x = rand_signed(rng, &[2, 2]);
                let h = rand_signed(rng, &[2, 3]);
                check_params(&s, &[x, h], |g, p, v| l.step(g, p, v[0], v[1]))
            }),
        ),
        (
            "exu".into(),
            Box::new(|rng| {
                let x = rand_tensor(rng, &[4, 1], 0.3, 1.0);
                let w = rand_tensor(rng, &[3, 1], -0.5, 0.5);
                let b = rand_tensor(rng, &[1], -1.0, -0.5);
                check_inputs(&[x, w, b], |g, v| exu(g, v[0], v[1], v[2]))
            }),
        ),
        (
            "anb".into(),
            Box::new(|rng| {
                let x = rand_tensor(rng, &[4, 1], 0.5, 1.5);
                let f = rand_tensor(rng, &[4, 1], 0.1, 0.9);
                let w = rand_signed(rng, &[3]);
                let b = rand_tensor(rng, &[3], -0.3, 0.0);
                check_inputs(&[x, f, w, b], |g, v| anb_forward(g, v[0], v[1], v[2], v[3]))
            }),
        ),
        (
            "scaled_dot_attention".into(),
            Box::new(|rng| {
                let q = rand_signed(rng, &[2, 3, 4]);
                let k = rand_signed(rng, &[2, 3, 4]);
                let v = rand_signed(rng, &[2, 3, 2]);
                check_inputs(&[q, k, v], |g, x| Ok(scaled_dot_attention(g, x[0], x[1], x[2])?.0))
            }),
        ),
        (
            "afs".into(),
            Box::new(|rng| {
                let mut s = ParamStore::new();
                let afs = Afs::new(&mut s, rng, 3, 4, 2)?;
                jitter(&mut s, rng);
                let r = rand_signed(rng, &[2, 3, 4]);
                check_params(&s, &[r], |g, p, v| {
                    let o = afs.forward(g, p, v[0])?;
                    g.concat(&[o.weights, o.aux], 1)
                })
            }),
        ),
    ]
}

fn module_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    for unit in [UnitKind::Anb, UnitKind::Linear, UnitKind::Exu] {
        cases.push((
            format!("module ({})", unit.as_str()),
            Box::new(move |rng| {
                let mut s = ParamStore::new();
                let m = FeatureModule::new(&mut s, rng, "m", unit, [4, 3], 0.0)?;
                jitter(&mut s, rng);
                let x = rand_signed(rng, &[5, 1]);
                let f = rand_tensor(rng, &[5, 1], 0.1, 0.9);
                check_params(&s, &[x, f], |g, p, v| {
                    let mut r = seeded(0);
                    m.forward(g, p, v[0], v[1], false, &mut r)
                })
            }),
        ));
    }
    cases.push((
        "ensemble".into(),
        Box::new(|rng| {
            let mut s = ParamStore::new();
            let e = ModularEnsemble::new(&mut s, rng, 3, UnitKind::Anb, [4, 3], 0.0, 0.0)?;
            jitter(&mut s, rng);
            let xs: Vec<Tensor> = (0..3).map(|_| rand_signed(rng, &[4, 1])).collect();
            let fs: Vec<Tensor> = (0..3).map(|_| rand_tensor(rng, &[4, 1], 0.1, 0.9)).collect();
            let extra: Vec<Tensor> = xs.into_iter().chain(fs).collect();
            check_params(&s, &extra, |g, p, v| {
                let mut r = seeded(0);
                let o = e.forward(g, p, &[0, 1, 2], &v[..3], &v[3..], None, false, &mut r)?;
                g.concat(&[o.prediction, o.contributions], 1)
            })
        }),
    ));
    cases
}

/// Toy model used for the end-to-end check: 2 channels, window 2,
/// hidden 3, top-2 selection.
pub fn toy_model_config(rnn: RnnKind, unit: UnitKind, task: Task) -> ModelConfig {
    ModelConfig {
        rnn,
        unit,
        task,
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
        seed: 7,
    }
}

fn model_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    for rnn in [RnnKind::Lstm, RnnKind::Gru] {
        for unit in [UnitKind::Anb, UnitKind::Linear, UnitKind::Exu] {
            for (task, frozen) in [(Task::Regression, false), (Task::Classification, true)] {
                cases.push((
                    format!(
                        "amn ({}+{}, {}, {})",
                        rnn.as_str(),
                        unit.as_str(),
                        task.as_str(),
                        if frozen { "frozen" } else { "live selection" }
                    ),
                    Box::new(move |rng| {
                        let mut m = AmnModel::new(toy_model_config(rnn, unit, task))?;
                        jitter(&mut m.store, rng);
                        if frozen {
                            m.reference_weights = vec![0.4, 0.1, 0.2, 0.3];
                            m.freeze_selection()?;
                        }
                        let x: Vec<f64> = rand_signed(rng, &[3, 4]).into_data();
                        let y: Vec<f64> = match task {
                            Task::Regression => rand_signed(rng, &[3]).into_data(),
                            Task::Classification => vec![1.0, 0.0, 1.0],
                        };
                        let ids: Vec<_> = m.store.ids().collect();
                        let inputs: Vec<Tensor> = ids.iter().map(|&id| m.store.get(id).clone()).collect();
                        grad_check(
                            |g, vars| {
                                let overrides: Vec<_> =
                                    ids.iter().copied().zip(vars.iter().copied()).collect();
                                let p = Bound::with_overrides(&m.store, &overrides, g);
                                let mut r = seeded(0);
                                let out = m.forward(g, &p, &x, 3, Mode::Train(&mut r))?;
                                Ok(joint_loss(g, task, &out, &y)?.0)
                            },
                            &inputs,
                            GRAD_EPS,
                        )
                    }),
                ));
            }
        }
    }
    cases
}

/// Run every check; errors inside a check are reported as failures.
pub fn gradient_suite(seed: u64) -> Vec<GradCheckRow> {
    let mut rng = seeded(seed);
    primitive_cases()
        .into_iter()
        .chain(layer_cases())
        .chain(module_cases())
        .chain(model_cases())
        .map(|(name, case)| {
            let err = case(&mut rng).unwrap_or_else(|e| {
                log::error!("{name}: {e}");
                f64::INFINITY
            });
            GradCheckRow {
                name,
                max_rel_error: err,
                passed: err < GRAD_TOL,
            }
        })
        .collect()
}

pub fn suite_table(rows: &[GradCheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>12}  result\n", "check", "max rel err");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>12.3e}  {}\n",
            r.name,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}
