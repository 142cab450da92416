//! Central finite-difference gradient checking.

use koa_core::nngraph::{NnError, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, NnError>>;

/// One random instance of an op under test. `build` returns the op output;
/// the checker reduces it to a scalar with fixed random weights.
pub struct GradCase {
    pub inputs: Vec<(Tensor, bool)>,
    pub build: Builder,
}

fn eval(case: &GradCase, inputs: &[Tensor], weights: &Tensor) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.inputs)
        .map(|(t, (_, grad))| tape.leaf(t.clone(), *grad))
        .collect();
    let out = (case.build)(&mut tape, &vars).expect("op under test");
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).expect("weight shape");
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

/// Largest relative error `|a - n| / max(|a|, |n|)` (vector 2-norms) over the
/// inputs that require gradients.
pub fn check(case: &GradCase, rng: &mut ChaCha8Rng) -> f64 {
    let base: Vec<Tensor> = case.inputs.iter().map(|(t, _)| t.clone()).collect();
    let out_shape = {
        let mut t = Tape::new();
        let v: Vec<Var> = base.iter().map(|b| t.leaf(b.clone(), false)).collect();
        let o = (case.build)(&mut t, &v).expect("op under test");
        t.value(o).shape().to_vec()
    };
    let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));

    let (tape, vars, loss) = eval(case, &base, &weights);
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, (tensor, needs)) in case.inputs.iter().enumerate() {
        if !*needs {
            continue;
        }
        let analytic = grads.get(vars[i]).expect("gradient present").data().to_vec();
        let mut numeric = vec![0.0; tensor.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = base.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let (tp, _, lp) = eval(case, &plus, &weights);
            let (tm, _, lm) = eval(case, &minus, &weights);
            *slot = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * FD_STEP);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU-style kinks sit outside the
/// finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
}

/// Distinct values spaced 0.01 apart in random order, so no pooling window
/// has a near-tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap()
}

pub type CaseGen = fn(&mut ChaCha8Rng) -> GradCase;

/// Every differentiable op with a random-instance generator.
pub fn all_ops() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("dense", |rng| {
            let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
            let with_bias = rng.random_bool(0.5);
            let mut inputs = vec![(random(&[n, i], rng), true), (random(&[o, i], rng), true)];
            if with_bias {
                inputs.push((random(&[o], rng), true));
            }
            GradCase {
                inputs,
                build: Box::new(|t, v| t.dense(v[0], v[1], v.get(2).copied())),
            }
        }),
        ("conv2d", |rng| {
            let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
            let k = [1usize, 3][rng.random_range(0..2)];
            let (h, w) = (rng.random_range(k..6), rng.random_range(k..6));
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            GradCase {
                inputs: vec![(random(&[n, c, h, w], rng), true), (random(&[o, c, k, k], rng), true)],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
            }
        }),
        ("relu", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..6)];
            GradCase {
                inputs: vec![(away_from_zero(&shape, rng), true)],
                build: Box::new(|t, v| Ok(t.relu(v[0]))),
            }
        }),
        ("silu", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..6)];
            GradCase {
                inputs: vec![(Tensor::from_fn(&shape, |_| rng.random_range(-4.0..4.0)), true)],
                build: Box::new(|t, v| Ok(t.silu(v[0]))),
            }
        }),
        ("avg_pool2d", |rng| {
            let k = rng.random_range(1..3);
            let shape = [rng.random_range(1..3), rng.random_range(1..3), k * rng.random_range(1..4), k * rng.random_range(1..4)];
            GradCase {
                inputs: vec![(random(&shape, rng), true)],
                build: Box::new(move |t, v| t.avg_pool2d(v[0], k)),
            }
        }),
        ("max_pool2d", |rng| {
            let k = rng.random_range(1..3);
            let shape = [rng.random_range(1..3), rng.random_range(1..3), k * rng.random_range(1..4), k * rng.random_range(1..4)];
            GradCase {
                inputs: vec![(distinct(&shape, rng), true)],
                build: Box::new(move |t, v| t.max_pool2d(v[0], k)),
            }
        }),
        ("upsample_nearest2x", |rng| {
            let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
            GradCase {
                inputs: vec![(random(&shape, rng), true)],
                build: Box::new(|t, v| t.upsample_nearest2x(v[0])),
            }
        }),
        ("concat", |rng| {
            let mut a = vec![rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3)];
            let axis = rng.random_range(0..3);
            let mut b = a.clone();
            b[axis] = rng.random_range(1..4);
            a[axis] = rng.random_range(1..4);
            GradCase {
                inputs: vec![(random(&a, rng), true), (random(&b, rng), true)],
                build: Box::new(move |t, v| t.concat(v[0], v[1], axis)),
            }
        }),
        ("add", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            GradCase {
                inputs: vec![(random(&shape, rng), true), (random(&shape, rng), true)],
                build: Box::new(|t, v| t.add(v[0], v[1])),
            }
        }),
        ("add_channel", |rng| {
            let (n, c) = (rng.random_range(1..3), rng.random_range(1..4));
            let shape = [n, c, rng.random_range(1..4), rng.random_range(1..4)];
            let v_shape = if rng.random_bool(0.5) { vec![n, c] } else { vec![c] };
            GradCase {
                inputs: vec![(random(&shape, rng), true), (random(&v_shape, rng), true)],
                build: Box::new(|t, v| t.add_channel(v[0], v[1])),
            }
        }),
        ("mul", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            GradCase {
                inputs: vec![(random(&shape, rng), true), (random(&shape, rng), true)],
                build: Box::new(|t, v| t.mul(v[0], v[1])),
            }
        }),
        ("scale", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            let factor = rng.random_range(-3.0..3.0);
            GradCase {
                inputs: vec![(random(&shape, rng), true)],
                build: Box::new(move |t, v| Ok(t.scale(v[0], factor))),
            }
        }),
        ("add_scalar", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            let offset = rng.random_range(-3.0..3.0);
            GradCase {
                inputs: vec![(random(&shape, rng), true)],
                build: Box::new(move |t, v| Ok(t.add_scalar(v[0], offset))),
            }
        }),
        ("global_avg_pool", |rng| {
            let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
            GradCase {
                inputs: vec![(random(&shape, rng), true)],
                build: Box::new(|t, v| t.global_avg_pool(v[0])),
            }
        }),
        ("instance_norm", |rng| {
            let c = rng.random_range(1..4);
            let shape = [rng.random_range(1..3), c, rng.random_range(2..5), rng.random_range(2..5)];
            GradCase {
                inputs: vec![
                    (random(&shape, rng), true),
                    (random(&[c], rng), true),
                    (random(&[c], rng), true),
                ],
                build: Box::new(|t, v| t.instance_norm(v[0], v[1], v[2])),
            }
        }),
        ("softmax_cross_entropy", |rng| {
            let (n, c) = (rng.random_range(1..5), rng.random_range(2..6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            GradCase {
                inputs: vec![(Tensor::from_fn(&[n, c], |_| rng.random_range(-3.0..3.0)), true)],
                build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            }
        }),
        ("mse", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            GradCase {
                inputs: vec![(random(&shape, rng), true), (random(&shape, rng), true)],
                build: Box::new(|t, v| t.mse(v[0], v[1])),
            }
        }),
        ("sum", |rng| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            GradCase {
                inputs: vec![(random(&shape, rng), true)],
                build: Box::new(|t, v| Ok(t.sum(v[0]))),
            }
        }),
        ("pick_class", |rng| {
            let (n, c) = (rng.random_range(1..4), rng.random_range(1..6));
            let class = rng.random_range(0..c);
            GradCase {
                inputs: vec![(random(&[n, c], rng), true)],
                build: Box::new(move |t, v| t.pick_class(v[0], class)),
            }
        }),
    ]
}
