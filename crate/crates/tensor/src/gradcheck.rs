//! Analytic gradients against central finite differences.
//!
//! [`op_suite`] runs a block of randomized cases for every differentiable
//! tape op and reports the worst norm-wise relative error per op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-6;

/// Norm-wise relative error `|a - n| / sqrt(|a|^2 + |n|^2)`; zero when both
/// vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (a, n) in analytic.iter().zip(numeric) {
        diff += (a - n).powi(2);
        norm += a * a + n * n;
    }
    if norm == 0.0 {
        0.0
    } else {
        diff.sqrt() / norm.sqrt()
    }
}

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_gradient(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|e| {
            let orig = x[e];
            x[e] = orig + STEP;
            let plus = f(x);
            x[e] = orig - STEP;
            let minus = f(x);
            x[e] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

/// Uniform in `[-1, 1)`, kept away from zero so relu kinks are not probed.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() < 1e-2 {
            v + 0.05
        } else {
            v
        }
    })
}

/// `sum(op(inputs) * weights)` so every output element participates.
fn weighted_loss<F>(tape: &mut Tape, vars: &[Var], op: &F, weights: &Tensor) -> Var
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let out = op(tape, vars);
    let w = tape.constant(weights.clone().reshape(tape.shape(out).to_vec()).expect("output length"));
    let p = tape.hadamard(out, w).expect("same shape");
    tape.sum(p).expect("non-empty")
}

fn eval<F>(inputs: &[Tensor], op: &F, weights: &Tensor) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = weighted_loss(&mut tape, &vars, op, weights);
    tape.value(loss).item()
}

/// Relative error between the tape's gradient and central differences of
/// `sum(op(inputs) * w)` for a random `w`, over the inputs marked
/// differentiable.
pub fn gradient_error<F>(inputs: &[Tensor], differentiable: &[bool], op: &F, rng: &mut impl Rng) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).len()
    };
    let weights = Tensor::from_fn([out_len], |_| rng.gen_range(-1.0..1.0));

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| if d { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let loss = weighted_loss(&mut tape, &vars, op, &weights);
    let grads = tape.backward(loss).expect("scalar loss");

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, input) in inputs.iter().enumerate() {
        if !differentiable[k] {
            continue;
        }
        analytic.extend_from_slice(grads.get(vars[k]).expect("tracked input").data());
        let mut work = inputs.to_vec();
        let mut data = input.data().to_vec();
        numeric.extend(numeric_gradient(&mut data, &mut |x| {
            work[k].data_mut().copy_from_slice(x);
            eval(&work, op, &weights)
        }));
    }
    relative_error(&analytic, &numeric)
}

/// Worst relative error of one op over its randomized cases.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<bool>)>;
type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn pair(lo: usize, hi: usize) -> Gen {
    Box::new(move |r| {
        let s = [dims(r, lo, hi), dims(r, 1, 4)];
        (vec![random_tensor(&s, r), random_tensor(&s, r)], vec![true, true])
    })
}

fn catalogue() -> Vec<(&'static str, Gen, Op)> {
    vec![
        ("add", pair(1, 3), Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", pair(1, 3), Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("hadamard", pair(1, 3), Box::new(|t, v| t.hadamard(v[0], v[1]).unwrap())),
        (
            "scale",
            Box::new(|r| (vec![random_tensor(&[dims(r, 1, 5)], r)], vec![true])),
            Box::new(|t, v| t.scale(v[0], -1.7).unwrap()),
        ),
        (
            "relu",
            Box::new(|r| (vec![random_tensor(&[dims(r, 2, 6), 3], r)], vec![true])),
            Box::new(|t, v| t.relu(v[0]).unwrap()),
        ),
        (
            "matmul",
            Box::new(|r| {
                let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                (vec![random_tensor(&[m, k], r), random_tensor(&[k, n], r)], vec![true, true])
            }),
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "transpose",
            Box::new(|r| (vec![random_tensor(&[dims(r, 1, 4), dims(r, 1, 4)], r)], vec![true])),
            Box::new(|t, v| t.transpose(v[0]).unwrap()),
        ),
        (
            "reshape",
            Box::new(|r| (vec![random_tensor(&[2, 3, dims(r, 1, 3)], r)], vec![true])),
            Box::new(|t, v| {
                let n = t.value(v[0]).len();
                t.reshape(v[0], &[n]).unwrap()
            }),
        ),
        (
            "add_row",
            Box::new(|r| {
                let (n, d) = (dims(r, 1, 4), dims(r, 1, 4));
                (vec![random_tensor(&[n, d], r), random_tensor(&[1, d], r)], vec![true, true])
            }),
            Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
        ),
        (
            "sum",
            Box::new(|r| (vec![random_tensor(&[dims(r, 1, 4), 2], r)], vec![true])),
            Box::new(|t, v| t.sum(v[0]).unwrap()),
        ),
        (
            "row_sum",
            Box::new(|r| (vec![random_tensor(&[dims(r, 1, 4), dims(r, 1, 4)], r)], vec![true])),
            Box::new(|t, v| t.row_sum(v[0]).unwrap()),
        ),
        (
            "mean_rows",
            Box::new(|r| (vec![random_tensor(&[dims(r, 1, 4), dims(r, 1, 4)], r)], vec![true])),
            Box::new(|t, v| t.mean_rows(v[0]).unwrap()),
        ),
        (
            "gather_rows",
            Box::new(|r| (vec![random_tensor(&[4, dims(r, 1, 3)], r)], vec![true])),
            Box::new(|t, v| t.gather_rows(v[0], &[3, 1, 1, 0]).unwrap()),
        ),
        (
            "concat_cols",
            Box::new(|r| {
                let n = dims(r, 1, 3);
                (
                    vec![random_tensor(&[n, dims(r, 1, 3)], r), random_tensor(&[n, dims(r, 1, 3)], r)],
                    vec![true, true],
                )
            }),
            Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap()),
        ),
        (
            "inverse",
            Box::new(|r| {
                let n = dims(r, 1, 4);
                // diagonally dominant so the matrix is comfortably invertible
                let mut a = random_tensor(&[n, n], r);
                for i in 0..n {
                    a.data_mut()[i * n + i] += 3.0;
                }
                (vec![a], vec![true])
            }),
            Box::new(|t, v| t.inverse(v[0]).unwrap()),
        ),
        (
            "add_ridge",
            Box::new(|r| {
                let n = dims(r, 1, 4);
                (vec![random_tensor(&[n, n], r)], vec![true])
            }),
            Box::new(|t, v| t.add_ridge(v[0], 0.37).unwrap()),
        ),
        (
            "l2_normalize",
            Box::new(|r| (vec![random_tensor(&[dims(r, 1, 4), dims(r, 2, 5)], r)], vec![true])),
            Box::new(|t, v| t.l2_normalize(v[0]).unwrap()),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|r| (vec![random_tensor(&[4, dims(r, 3, 5)], r).map(|x| 3.0 * x)], vec![true])),
            Box::new(|t, v| {
                let k = t.shape(v[0])[1];
                t.softmax_cross_entropy(v[0], &[0, k - 1, 1, 2]).unwrap()
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|r| {
                let s = [dims(r, 1, 2), dims(r, 1, 3), 2, dims(r, 1, 3)];
                (vec![random_tensor(&s, r)], vec![true])
            }),
            Box::new(|t, v| t.global_avg_pool(v[0]).unwrap()),
        ),
        (
            "channel_scale",
            Box::new(|r| {
                let c = dims(r, 1, 3);
                (
                    vec![random_tensor(&[dims(r, 1, 2), c, 2, 3], r), random_tensor(&[c], r)],
                    vec![true, true],
                )
            }),
            Box::new(|t, v| t.channel_scale(v[0], v[1]).unwrap()),
        ),
        (
            "batch_norm_inference",
            Box::new(|r| {
                let c = dims(r, 1, 3);
                (
                    vec![
                        random_tensor(&[dims(r, 1, 2), c, 2, 2], r),
                        random_tensor(&[c], r),
                        random_tensor(&[c], r),
                        random_tensor(&[c], r),
                        random_tensor(&[c], r).map(|x| x.abs() + 0.5),
                    ],
                    vec![true, true, true, false, false],
                )
            }),
            Box::new(|t, v| {
                let mean = t.value(v[3]).clone();
                let var = t.value(v[4]).clone();
                t.batch_norm_inference(v[0], &mean, &var, v[1], v[2], 1e-5).unwrap()
            }),
        ),
        (
            "batch_norm_train",
            Box::new(|r| {
                let c = dims(r, 1, 3);
                (
                    vec![
                        random_tensor(&[dims(r, 2, 3), c, 2, 2], r),
                        random_tensor(&[c], r),
                        random_tensor(&[c], r),
                    ],
                    vec![true, true, true],
                )
            }),
            Box::new(|t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0),
        ),
        (
            "conv2d",
            Box::new(|r| {
                let c = dims(r, 1, 3);
                let o = dims(r, 1, 3);
                let k = dims(r, 1, 3);
                let h = dims(r, k.max(2), 5);
                let x = random_tensor(&[dims(r, 1, 2), c, h, dims(r, k, 5)], r);
                (vec![x, random_tensor(&[o, c, k, k], r)], vec![true, true])
            }),
            Box::new(|t, v| {
                // stride/padding vary with the kernel extent to cover all paths
                let k = t.shape(v[1])[2];
                let (stride, pad) = match k {
                    1 => (1, 0),
                    2 => (2, 1),
                    _ => (1, 1),
                };
                t.conv2d(v[0], v[1], stride, pad).unwrap()
            }),
        ),
    ]
}

/// Runs `cases` randomized gradient checks for every differentiable op.
pub fn op_suite(cases: usize, seed: u64) -> Vec<OpCheck> {
    catalogue()
        .into_iter()
        .enumerate()
        .map(|(i, (name, gen, op))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let worst = (0..cases).fold(0.0f64, |w, _| {
                let (inputs, diff) = gen(&mut rng);
                w.max(gradient_error(&inputs, &diff, &op, &mut rng))
            });
            OpCheck { name, cases, worst }
        })
        .collect()
}
