//! Finite-difference checks for every differentiable op on three random
//! shapes each, runnable outside the test harness.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{grad_check, GradCheckOptions, GradCheckReport, Graph, Result, Tensor, Var};

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Outcome of one op on one input shape.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: String,
    pub shapes: Vec<Vec<usize>>,
    pub report: GradCheckReport,
}

impl fmt::Display for OpCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}: {}", self.op, self.shapes, self.report)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

/// Reduces a non-scalar output to a scalar with fixed random weights so every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn s(dims: &[&[usize]]) -> Vec<Vec<usize>> {
    dims.iter().map(|d| d.to_vec()).collect()
}

fn table() -> Vec<(&'static str, Vec<Vec<Vec<usize>>>, OpFn)> {
    let mut ops: Vec<(&'static str, Vec<Vec<Vec<usize>>>, OpFn)> = Vec::new();
    let mut add = |name: &'static str, shapes: &[Vec<Vec<usize>>], f: fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        ops.push((name, shapes.to_vec(), Box::new(f)));
    };
    add(
        "matmul",
        &[s(&[&[3, 4], &[4, 2]]), s(&[&[2, 3, 5], &[5, 4]]), s(&[&[1, 1], &[1, 3]])],
        |g, v| g.matmul(v[0], v[1]),
    );

    add(
        "bmm",
        &[
            s(&[&[2, 3, 4], &[2, 4, 5]]),
            s(&[&[3, 2, 2, 3], &[3, 2, 3, 2]]),
            s(&[&[1, 4, 1], &[1, 1, 4]]),
        ],
        |g, v| g.matmul(v[0], v[1]),
    );
    add(
        "matmul_t",
        &[
            s(&[&[2, 3, 4], &[2, 5, 4]]),
            s(&[&[4, 3], &[2, 3]]),
            s(&[&[2, 2, 3, 2], &[2, 2, 3, 2]]),
        ],
        |g, v| g.matmul_t(v[0], v[1]),
    );

    add(
        "linear",
        &[
            s(&[&[3, 4], &[4, 5], &[5]]),
            s(&[&[2, 3, 4], &[4, 2], &[2]]),
            s(&[&[1, 6], &[6, 1], &[1]]),
        ],
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            g.add_broadcast(h, v[2])
        },
    );

    let shapes = [s(&[&[3, 4], &[3, 4]]), s(&[&[5], &[5]]), s(&[&[2, 2, 3], &[2, 2, 3]])];
    add("add", &shapes, |g, v| g.add(v[0], v[1]));
    add("sub", &shapes, |g, v| g.sub(v[0], v[1]));
    add("mul", &shapes, |g, v| g.mul(v[0], v[1]));
    add(
        "add_broadcast",
        &[s(&[&[3, 4], &[4]]), s(&[&[2, 3, 4], &[3, 4]]), s(&[&[5, 1], &[1]])],
        |g, v| g.add_broadcast(v[0], v[1]),
    );

    let shapes = [s(&[&[3, 4], &[1]]), s(&[&[5], &[]]), s(&[&[2, 2, 3], &[1, 1]])];
    add("scalar_mul", &shapes, |g, v| g.scalar_mul(v[0], v[1]));
    add("scalar_add", &shapes, |g, v| g.scalar_add(v[0], v[1]));
    add("scale", &shapes, |g, v| Ok(g.scale(v[0], -2.5)));

    let shapes = [s(&[&[3, 4]]), s(&[&[7]]), s(&[&[2, 3, 2]])];
    add("exp", &shapes, |g, v| Ok(g.exp(v[0])));
    add("softplus", &shapes, |g, v| Ok(g.softplus(v[0])));
    add("gelu", &shapes, |g, v| Ok(g.gelu(v[0])));

    let shapes = [s(&[&[3, 4]]), s(&[&[7]]), s(&[&[2, 3, 2]])];
    add("sum", &shapes, |g, v| Ok(g.sum(v[0])));
    add("sum_sorted", &shapes, |g, v| Ok(g.sum_sorted(v[0])));
    add("mean", &shapes, |g, v| Ok(g.mean(v[0])));
    add("mean_axis0", &shapes, |g, v| g.mean_axis(v[0], 0));
    add(
        "mean_axis1",
        &[s(&[&[3, 4]]), s(&[&[2, 5, 3]]), s(&[&[1, 2, 2, 2]])],
        |g, v| g.mean_axis(v[0], 1),
    );

    add(
        "softmax_last",
        &[s(&[&[3, 4]]), s(&[&[6]]), s(&[&[2, 3, 5]])],
        |g, v| {
            let last = g.shape(v[0]).len() - 1;
            g.softmax(v[0], last)
        },
    );
    add(
        "softmax_axis0",
        &[s(&[&[3, 4]]), s(&[&[4, 2, 2]]), s(&[&[5, 1]])],
        |g, v| g.softmax(v[0], 0),
    );

    add(
        "layer_norm",
        &[
            s(&[&[3, 4], &[4], &[4]]),
            s(&[&[2, 3, 5], &[5], &[5]]),
            s(&[&[1, 8], &[8], &[8]]),
        ],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );

    add(
        "l2_normalize",
        &[s(&[&[3, 4]]), s(&[&[5]]), s(&[&[2, 2, 3]])],
        |g, v| g.l2_normalize(v[0], 1e-12),
    );

    add(
        "cross_entropy",
        &[s(&[&[4, 3]]), s(&[&[2, 5]]), s(&[&[6, 2]])],
        |g, v| {
            let b = g.shape(v[0])[0];
            let c = g.shape(v[0])[1];
            let targets: Vec<usize> = (0..b).map(|i| (i * 7 + 1) % c).collect();
            g.cross_entropy(v[0], &targets)
        },
    );
    // explicit softmax followed by a weighted sum of probabilities
    add(
        "linear+softmax",
        &[s(&[&[4, 3], &[3, 5]]), s(&[&[2, 2], &[2, 3]]), s(&[&[1, 4], &[4, 4]])],
        |g, v| {
            let z = g.matmul(v[0], v[1])?;
            g.softmax(z, 1)
        },
    );

    add(
        "reshape",
        &[s(&[&[3, 4]]), s(&[&[2, 6]]), s(&[&[12]])],
        |g, v| g.reshape(v[0], vec![4, 3]),
    );
    add(
        "permute",
        &[s(&[&[2, 3, 4]]), s(&[&[1, 2, 5]]), s(&[&[3, 3, 2]])],
        |g, v| g.permute(v[0], &[2, 0, 1]),
    );
    add(
        "narrow",
        &[s(&[&[3, 4]]), s(&[&[2, 5, 3]]), s(&[&[4, 2]])],
        |g, v| g.narrow(v[0], 1, 1, 1),
    );
    add(
        "concat",
        &[
            s(&[&[2, 3], &[2, 1]]),
            s(&[&[1, 2, 3], &[1, 4, 3]]),
            s(&[&[3, 2, 2], &[3, 1, 2]]),
        ],
        |g, v| g.concat(&[v[0], v[1], v[0]], 1),
    );

    add(
        "dropout",
        &[s(&[&[3, 4]]), s(&[&[10]]), s(&[&[2, 2, 2]])],
        |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            g.dropout(v[0], 0.3, &mut rng)
        },
    );

    ops
}

/// Names of the ops covered by [`op_suite`], in run order.
pub fn op_names() -> Vec<&'static str> {
    table().into_iter().map(|(n, _, _)| n).collect()
}

/// Runs every op check at the default tolerance (1e-4, 64-bit).
pub fn op_suite() -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut out = Vec::new();
    for (name, shapes, f) in table() {
        for (case, input_shapes) in shapes.iter().enumerate() {
            let inputs: Vec<Tensor<f64>> = input_shapes.iter().map(|s| random(&mut rng, s)).collect();
            let report = grad_check(
                |g, v| {
                    let y = f(g, v)?;
                    if g.value(y).numel() == 1 {
                        Ok(y)
                    } else {
                        weighted_sum(g, y, 17 + case as u64)
                    }
                },
                &inputs,
                GradCheckOptions::default(),
            )?;
            out.push(OpCheck {
                op: name.to_string(),
                shapes: input_shapes.clone(),
                report,
            });
        }
    }
    Ok(out)
}
