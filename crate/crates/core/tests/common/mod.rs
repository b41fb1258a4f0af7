#![allow(dead_code)]

use micfer::tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub loss: Loss,
    pub params: Vec<Tensor>,
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from a kink at `at`.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], at: f64) -> Tensor {
    let mut t = rand_tensor(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
        *v += at;
    }
    t
}

/// Reduces any output to a scalar through fixed random weights so every
/// output coordinate contributes to the checked gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(out).shape().to_vec();
    let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = g.input(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..5)).collect()
}

/// One gradient-check case per primitive with shapes drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    macro_rules! case {
        ($name:expr, $params:expr, $body:expr) => {{
            let body = $body;
            cases.push(Case {
                name: $name,
                params: $params,
                loss: Box::new(move |g: &mut Graph, v: &[Var]| {
                    let out = body(g, v)?;
                    project(g, out, seed)
                }),
            });
        }};
    }

    let s = dims(&mut rng, 3);
    let tail = s[1..].to_vec();
    let a = rand_tensor(&mut rng, &s, -2.0, 2.0);
    let b = rand_tensor(&mut rng, &s, -2.0, 2.0);
    let bt = rand_tensor(&mut rng, &tail, -2.0, 2.0);
    case!("add", vec![a.clone(), b.clone()], |g: &mut Graph, v: &[Var]| g.add(v[0], v[1]));
    case!("add_broadcast", vec![a.clone(), bt.clone()], |g: &mut Graph, v: &[Var]| g.add(v[0], v[1]));
    case!("subtract", vec![a.clone(), bt.clone()], |g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]));
    case!("multiply", vec![a.clone(), b.clone()], |g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]));
    case!("multiply_broadcast", vec![a.clone(), bt], |g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]));
    let k = rng.random_range(-3.0..3.0);
    case!("scale", vec![a.clone()], move |g: &mut Graph, v: &[Var]| g.scale(v[0], k));

    let (m, kk, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
    let x = rand_tensor(&mut rng, &[m, kk], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[kk, n], -1.0, 1.0);
    case!("matmul", vec![x, w], |g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]));

    let stride = rng.random_range(1..3);
    let padding = rng.random_range(0..2);
    let (nb, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
    let (h, wd) = (rng.random_range(3..7), rng.random_range(3..7));
    let img = rand_tensor(&mut rng, &[nb, c, h, wd], -1.0, 1.0);
    let ker = rand_tensor(&mut rng, &[o, c, 3, 3], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[o], -1.0, 1.0);
    case!("conv2d", vec![img, ker, bias], move |g: &mut Graph, v: &[Var]| {
        g.conv2d(v[0], v[1], Some(v[2]), stride, padding)
    });

    case!("relu", vec![away_from(&mut rng, &s, 0.0)], |g: &mut Graph, v: &[Var]| g.relu(v[0]));
    case!("tanh", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.tanh(v[0]));
    case!("sigmoid", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.sigmoid(v[0]));
    case!("exp", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.exp(v[0]));
    let pos = rand_tensor(&mut rng, &s, 0.3, 3.0);
    case!("log", vec![pos], |g: &mut Graph, v: &[Var]| g.log(v[0]));
    case!("clamp_min", vec![away_from(&mut rng, &s, 0.2)], |g: &mut Graph, v: &[Var]| {
        g.clamp_min(v[0], 0.2)
    });
    case!("logsumexp", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.logsumexp(v[0]));
    case!("softmax", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.softmax(v[0]));
    case!("mean", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.mean(v[0]));
    let axis = rng.random_range(0..3);
    case!("mean_axis", vec![a.clone()], move |g: &mut Graph, v: &[Var]| g.mean_axis(v[0], axis));
    case!("sum", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.sum(v[0]));
    case!("sum_axis", vec![a.clone()], move |g: &mut Graph, v: &[Var]| g.sum_axis(v[0], axis));
    let mut s2 = s.clone();
    s2[axis] = rng.random_range(1..4);
    let c2 = rand_tensor(&mut rng, &s2, -1.0, 1.0);
    case!("concat", vec![a.clone(), c2], move |g: &mut Graph, v: &[Var]| {
        g.concat(&[v[0], v[1], v[0]], axis)
    });
    let start = rng.random_range(0..s[axis]);
    let end = rng.random_range(start + 1..=s[axis]);
    case!("slice", vec![a.clone()], move |g: &mut Graph, v: &[Var]| g.slice(v[0], axis, start, end));
    let flat = vec![s.iter().product::<usize>()];
    case!("reshape", vec![a.clone()], move |g: &mut Graph, v: &[Var]| g.reshape(v[0], &flat));
    case!("squared_norm", vec![a.clone()], |g: &mut Graph, v: &[Var]| g.squared_norm(v[0]));
    let rows: Vec<usize> = (0..s[0] + 2).map(|_| rng.random_range(0..s[0])).collect();
    case!("gather_rows", vec![a], move |g: &mut Graph, v: &[Var]| g.gather_rows(v[0], &rows));
    cases
}
