//! Central-difference checks of every differentiable op and of the joint loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use dyenet_core::kernels::ConvGeom;
use dyenet_core::model::{init_params, ModelDims};
use dyenet_core::reid::OimTable;
use dyenet_core::synth::{generate, ShapeSpec, SynthSpec};
use dyenet_core::tape::{F64Params, Tape, Var};
use dyenet_core::trainer::{build_batch, joint_loss_graph, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const SEEDS: u64 = 100;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;
/// Smaller step for the full pipeline: single-channel ReLU stacks put kinks
/// within 1e-3 of some pre-activations.
pub const E2E_EPS: f64 = 1e-5;

type Input = (Vec<usize>, Vec<f64>);

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between tape gradients and central differences
/// of `f` with respect to every element of every input.
fn max_rel_error(inputs: &[Input], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Input]| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|(s, v)| tape.leaf(s, v.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars);
        (tape.scalar(out), tape, vars, out)
    };
    let (_, tape, vars, out) = eval(inputs);
    let grads = tape.backward(out);
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].1.len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].1[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].1[i] -= EPS;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * EPS);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so ReLU kinks sit outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Scalar head: BCE against fixed random targets.
fn head(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let n = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbce);
    let t = Arc::new(rand_vec(&mut rng, n, 0.0, 1.0));
    tape.bce_with_logits(x, t).unwrap()
}

/// Worst error of one op over `SEEDS` random draws.
fn worst_over_seeds(make: impl Fn(&mut ChaCha8Rng) -> Vec<Input>, f: impl Fn(&mut Tape<f64>, &[Var], u64) -> Var) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        worst = worst.max(max_rel_error(&inputs, &|t, v| f(t, v, seed)));
    }
    worst
}

pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d/stride2",
    "conv2d/dilated",
    "conv2d/valid",
    "relu",
    "sigmoid",
    "sample",
    "softmax",
    "gate",
    "concat/add/scale/mean",
    "mul_const",
    "gap/linear/l2",
    "oim",
];

fn conv(geom: ConvGeom) -> f64 {
    worst_over_seeds(
        |r| {
            vec![
                (vec![2, 5, 6], rand_vec(r, 60, -1.0, 1.0)),
                (vec![3, 2, 3, 3], rand_vec(r, 54, -0.5, 0.5)),
                (vec![3], rand_vec(r, 3, -0.2, 0.2)),
            ]
        },
        |t, v, s| {
            let y = t.conv2d(v[0], v[1], v[2], geom).unwrap();
            head(t, y, s)
        },
    )
}

/// Worst relative error of the named op.
pub fn op_error(name: &str) -> f64 {
    match name {
        "conv2d" => conv(ConvGeom::same(3)),
        "conv2d/stride2" => conv(ConvGeom { stride: 2, dilation: 1, padding: 1 }),
        "conv2d/dilated" => conv(ConvGeom { stride: 1, dilation: 2, padding: 2 }),
        "conv2d/valid" => conv(ConvGeom { stride: 1, dilation: 1, padding: 0 }),
        "relu" => worst_over_seeds(|r| vec![(vec![2, 3, 3], away_from_zero(r, 18))], |t, v, s| {
            let y = t.relu(v[0]);
            head(t, y, s)
        }),
        "sigmoid" => worst_over_seeds(|r| vec![(vec![2, 3, 3], rand_vec(r, 18, -3.0, 3.0))], |t, v, s| {
            let y = t.sigmoid(v[0]);
            head(t, y, s)
        }),
        "sample" => worst_over_seeds(
            |r| vec![(vec![2, 5, 5], rand_vec(r, 50, -1.0, 1.0))],
            |t, v, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5a);
                // some points fall partly or wholly outside the map
                let pts: Vec<(f64, f64)> = (0..12).map(|_| (rng.gen_range(-1.5..5.5), rng.gen_range(-1.5..5.5))).collect();
                let y = t.sample(v[0], Arc::new(pts), 3, 4).unwrap();
                head(t, y, s)
            },
        ),
        "softmax" => worst_over_seeds(|r| vec![(vec![1, 4, 4], rand_vec(r, 16, -2.0, 2.0))], |t, v, s| {
            let y = t.softmax(v[0]);
            let y = t.scale(y, 16.0);
            head(t, y, s)
        }),
        "gate" => worst_over_seeds(
            |r| vec![(vec![3, 4, 4], rand_vec(r, 48, -1.0, 1.0)), (vec![1, 4, 4], rand_vec(r, 16, 0.0, 2.0))],
            |t, v, s| {
                let y = t.gate(v[0], v[1]).unwrap();
                head(t, y, s)
            },
        ),
        "concat/add/scale/mean" => worst_over_seeds(
            |r| vec![(vec![2, 3, 3], rand_vec(r, 18, -1.0, 1.0)), (vec![1, 3, 3], rand_vec(r, 9, -1.0, 1.0))],
            |t, v, s| {
                let c = t.concat(&[v[0], v[1]]).unwrap();
                let c2 = t.concat(&[v[1], v[0]]).unwrap();
                let sum = t.add(c, c2).unwrap();
                let sc = t.scale(sum, 0.7);
                let m = t.mean_of(&[sc, c, c2]).unwrap();
                head(t, m, s)
            },
        ),
        "mul_const" => worst_over_seeds(
            |r| vec![(vec![2, 3, 3], rand_vec(r, 18, -1.0, 1.0))],
            |t, v, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let k = Arc::new(rand_vec(&mut rng, 9, -2.0, 2.0));
                let y = t.mul_const(v[0], k).unwrap();
                head(t, y, s)
            },
        ),
        "gap/linear/l2" => worst_over_seeds(
            |r| {
                vec![
                    (vec![3, 4, 4], rand_vec(r, 48, -1.0, 1.0)),
                    (vec![4, 3], rand_vec(r, 12, -1.0, 1.0)),
                    (vec![4], away_from_zero(r, 4).iter().map(|b| b * 2.0).collect()),
                ]
            },
            |t, v, s| {
                let g = t.gap(v[0]).unwrap();
                let z = t.linear(g, v[1], v[2]).unwrap();
                let (y, _) = t.l2_normalize(z);
                let y = t.scale(y, 3.0);
                head(t, y, s)
            },
        ),
        "oim" => worst_over_seeds(
            |r| vec![(vec![6], rand_vec(r, 6, -1.0, 1.0))],
            |t, v, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x01);
                let lut = OimTable::new(5, 6, rand_vec(&mut rng, 30, -1.0, 1.0)).unwrap();
                let (e, _) = t.l2_normalize(v[0]);
                t.oim(e, lut.flat(), (s % 5) as usize, 0.5).unwrap()
            },
        ),
        other => panic!("unknown op {other}"),
    }
}

pub fn toy_dims() -> ModelDims {
    ModelDims { feat_width: 1, feat_depth: 1, embed_dim: 2, hidden_dim: 1 }
}

#[derive(Debug, Clone)]
pub struct JointCheck {
    pub params: usize,
    pub worst: f64,
    pub worst_key: String,
}

/// Checks the joint loss of a 2-frame toy batch against central
/// differences over every parameter element.
pub fn joint_loss_check() -> JointCheck {
    let spec = SynthSpec {
        name: "toy".into(),
        width: 16,
        height: 16,
        frames: 2,
        shapes: vec![ShapeSpec::rect(7.0, 6.0, (7.0, 8.0), (1.0, 0.5), 3)],
        occlusions: vec![],
        seed: 4,
    };
    let data = vec![generate(&spec).unwrap()];
    let mut cfg = TrainConfig { dims: toy_dims(), videos_per_batch: 1, frames_per_video: 2, unroll: 1, ..TrainConfig::desk() };
    cfg.remp.roi_m = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = build_batch(&data, &mut rng, &cfg).unwrap();
    let mut params = F64Params::from_store(&init_params(toy_dims(), 2));
    // nonzero biases keep pre-activations off the ReLU kink
    for (k, (_, v)) in params.values.iter_mut() {
        if k.ends_with(".b") {
            v.iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.2));
        }
    }
    let n_params: usize = params.values.values().map(|(_, v)| v.len()).sum();
    let lut = OimTable::new(8, 2, rand_vec(&mut rng, 16, -1.0, 1.0)).unwrap();

    let loss_of = |p: &F64Params| {
        let mut tape = Tape::<f64>::new();
        let v = joint_loss_graph(&mut tape, &batch, p, &lut, &cfg).unwrap();
        tape.scalar(v.total)
    };
    let mut tape = Tape::<f64>::new();
    let v = joint_loss_graph(&mut tape, &batch, &params, &lut, &cfg).unwrap();
    let grads = tape.backward(v.total);
    let analytic: BTreeMap<String, Vec<f64>> = tape.param_grads(&grads).map(|(k, g)| (k.to_string(), g.to_vec())).collect();

    let mut out = JointCheck { params: n_params, worst: 0.0, worst_key: String::new() };
    let keys: Vec<String> = params.values.keys().cloned().collect();
    for k in &keys {
        for i in 0..params.values[k].1.len() {
            let orig = params.values[k].1[i];
            params.values.get_mut(k).unwrap().1[i] = orig + E2E_EPS;
            let up = loss_of(&params);
            params.values.get_mut(k).unwrap().1[i] = orig - E2E_EPS;
            let down = loss_of(&params);
            params.values.get_mut(k).unwrap().1[i] = orig;
            let numeric = (up - down) / (2.0 * E2E_EPS);
            let e = rel_err(analytic.get(k).map_or(0.0, |g| g[i]), numeric);
            if e > out.worst {
                out.worst = e;
                out.worst_key = format!("{k}[{i}]");
            }
        }
    }
    out
}
