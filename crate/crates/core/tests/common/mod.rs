//! Finite-difference oracles shared by the gradient tests and the acceptance
//! runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use feddapl::nn::{init_params, Group, ModelSpec, Network, ParamSet};
use feddapl::objective::{loss_d, loss_prox, loss_y, total_local_loss, LossBreakdown, ProxScope};
use feddapl::tensor::{Tape, Tensor, Var};
use feddapl::Result;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)`, or the plain difference when both are below 1e-10.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        return (a - n).abs();
    }
    (a - n).abs() / scale
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // keep away from the relu kink at zero
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces any op output to a scalar with fixed random weights so every
/// output element contributes.
fn scalarize(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out, 99).unwrap();
    tape.value(s).item().unwrap()
}

/// Worst relative error over every input element; `sign` scales the finite
/// difference (used for the reversal layer).
pub fn worst_error(build: &Build, inputs: &[Tensor], sign: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out, 99).unwrap();
    tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().data().to_vec();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = sign * (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
            worst = worst.max(rel_err(*a, numeric));
        }
    }
    worst
}

/// Worst relative error of one op over three random draws.
pub fn op_error(name: &str, build: &Build, shapes: &[&[usize]], sign: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    (0..3)
        .map(|_| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            worst_error(build, &inputs, sign)
        })
        .fold(0.0, f64::max)
}

/// Every differentiable op with its worst relative error.
pub fn all_op_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("matmul", op_error("matmul", &|t, v| t.matmul(v[0], v[1]), &[&[4, 3], &[3, 5]], 1.0)),
        ("add_bias", op_error("add_bias", &|t, v| t.add_bias(v[0], v[1]), &[&[4, 3], &[3]], 1.0)),
        ("add", op_error("add", &|t, v| t.add(v[0], v[1]), &[&[4, 3], &[4, 3]], 1.0)),
        ("sub", op_error("sub", &|t, v| t.sub(v[0], v[1]), &[&[4, 3], &[4, 3]], 1.0)),
        ("mul", op_error("mul", &|t, v| t.mul(v[0], v[1]), &[&[4, 3], &[4, 3]], 1.0)),
        ("scale", op_error("scale", &|t, v| Ok(t.scale(v[0], -2.5)), &[&[4, 3]], 1.0)),
        ("relu", op_error("relu", &|t, v| Ok(t.relu(v[0])), &[&[4, 3]], 1.0)),
        ("tanh", op_error("tanh", &|t, v| Ok(t.tanh(v[0])), &[&[4, 3]], 1.0)),
        ("sum", op_error("sum", &|t, v| Ok(t.sum(v[0])), &[&[4, 3]], 1.0)),
        ("mean", op_error("mean", &|t, v| Ok(t.mean(v[0])), &[&[4, 3]], 1.0)),
        ("sum_sq", op_error("sum_sq", &|t, v| Ok(t.sum_sq(v[0])), &[&[4, 3]], 1.0)),
        ("log_softmax", op_error("log_softmax", &|t, v| t.log_softmax(v[0]), &[&[4, 5]], 1.0)),
        // identity forward, so the reversed gradient is -λ times the difference quotient
        ("grad_reverse", op_error("grad_reverse", &|t, v| t.grad_reverse(v[0], 1.7), &[&[4, 3]], -1.7)),
        (
            "mlp chain",
            op_error(
                "mlp chain",
                &|t, v| {
                    let h = t.matmul(v[0], v[1])?;
                    let h = t.add_bias(h, v[2])?;
                    let h = t.tanh(h);
                    let o = t.matmul(h, v[3])?;
                    t.log_softmax(o)
                },
                &[&[4, 3], &[3, 6], &[6], &[6, 4]],
                1.0,
            ),
        ),
    ]
}

pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        input_dim: 5,
        fe_hidden: vec![6],
        feature_dim: 4,
        reg_hidden: vec![3],
        disc_hidden: vec![7],
        n_sites: 3,
        target_offset: 30.0,
        target_scale: 8.0,
    }
}

pub struct Sample {
    pub x: Tensor,
    pub y: Tensor,
    pub sites: Vec<usize>,
}

pub fn losses(
    spec: &ModelSpec,
    params: &ParamSet,
    anchor: &ParamSet,
    s: &Sample,
    lambda: f64,
    mu: f64,
) -> (LossBreakdown, ParamSet) {
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, spec, params, true);
    let x = tape.constant(s.x.clone());
    let y = tape.constant(s.y.clone());
    let f = net.forward_features(&mut tape, x).unwrap();
    let pred = net.forward_age(&mut tape, f).unwrap();
    let ly = loss_y(&mut tape, pred, y).unwrap();
    let logits = net.forward_site(&mut tape, f, lambda).unwrap();
    let ld = loss_d(&mut tape, logits, &s.sites, 0.06).unwrap();
    let lp = loss_prox(&mut tape, &net, params, anchor, mu, ProxScope::DiscriminatorOnly).unwrap();
    let (total, b) = total_local_loss(&mut tape, ly, Some(ld), Some(lp)).unwrap();
    tape.backward(total).unwrap();
    (b, net.grads(&tape, params).unwrap())
}

/// Worst relative error of the full local loss over every parameter of a
/// small network, for three random 4-sample batches. Also reports whether
/// every breakdown was additive.
pub fn composite_error() -> (f64, bool) {
    let spec = tiny_spec();
    let lambda = 1.3;
    let mu = 2.0;
    let mut worst: f64 = 0.0;
    let mut additive = true;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = init_params(&spec, seed).unwrap();
        let mut anchor = params.clone();
        for e in anchor.entries_mut() {
            e.tensor.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        // targets near the output offset keep l_y small, so the difference
        // quotient is not swamped by roundoff
        let sample = Sample {
            x: random(&mut rng, &[4, 5]),
            y: Tensor::matrix(4, 1, (0..4).map(|_| rng.random_range(26.0..34.0)).collect()).unwrap(),
            sites: (0..4).map(|_| rng.random_range(0..3)).collect(),
        };
        let (b, grads) = losses(&spec, &params, &anchor, &sample, lambda, mu);
        additive &= b.is_additive();
        for (k, entry) in params.entries().iter().enumerate() {
            for i in 0..entry.tensor.numel() {
                let shifted = |delta: f64| {
                    let mut p = params.clone();
                    p.entries_mut()[k].tensor.data_mut()[i] += delta;
                    losses(&spec, &p, &anchor, &sample, lambda, mu).0
                };
                let (hi, lo) = (shifted(H), shifted(-H));
                // below the reversal the site loss enters with weight -λ
                let objective = |l: &LossBreakdown| match entry.group {
                    Group::FeatureExtractor => l.l_y - lambda * l.l_d + l.l_prox,
                    _ => l.l_total,
                };
                let numeric = (objective(&hi) - objective(&lo)) / (2.0 * H);
                worst = worst.max(rel_err(grads.entries()[k].tensor.data()[i], numeric));
            }
        }
    }
    (worst, additive)
}
