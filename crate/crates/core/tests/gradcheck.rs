//! Central finite differences against every tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elodin::autodiff::{AutodiffError, Shape, Tape, Value};
use elodin::naming::{naming_loss, TargetSpec};
use elodin::pipeline::Pipeline;

const H: f64 = 1e-6;
const TOLERANCE: f64 = 1e-5;
const TRIALS: u64 = 20;

type Build = dyn Fn(&mut Tape, &[Value]) -> Result<Value, AutodiffError>;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn evaluate(inputs: &[(Vec<f64>, Shape)], build: &Build) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let leaves: Vec<Value> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), *s).unwrap())
        .collect();
    let out = build(&mut tape, &leaves).unwrap();
    let grads = tape.backward(out).unwrap();
    (
        tape.scalar(out),
        leaves.iter().map(|&l| grads.wrt(l).to_vec()).collect(),
    )
}

fn value(inputs: &[(Vec<f64>, Shape)], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<Value> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), *s).unwrap())
        .collect();
    let out = build(&mut tape, &leaves).unwrap();
    tape.scalar(out)
}

fn check(name: &str, inputs: &[(Vec<f64>, Shape)], build: &Build) {
    let (_, analytic) = evaluate(inputs, build);
    for (i, (data, _)) in inputs.iter().enumerate() {
        let mut fd = vec![0.0; data.len()];
        for j in 0..data.len() {
            let mut shifted = inputs.to_vec();
            shifted[i].0[j] = data[j] + H;
            let up = value(&shifted, build);
            shifted[i].0[j] = data[j] - H;
            let down = value(&shifted, build);
            fd[j] = (up - down) / (2.0 * H);
        }
        let err = relative_error(&analytic[i], &fd);
        assert!(
            err <= TOLERANCE,
            "{name}: input {i} relative error {err:.3e}\nanalytic {:?}\nnumeric  {fd:?}",
            analytic[i]
        );
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Reduces any output to a scalar with fixed random weights so every
/// component of the output adjoint is exercised.
fn weighted(weights: Vec<f64>, op: impl Fn(&mut Tape, &[Value]) -> Result<Value, AutodiffError> + 'static) -> Box<Build> {
    Box::new(move |t: &mut Tape, x: &[Value]| {
        let out = op(t, x)?;
        let w = t.vector(weights.clone());
        let flat = if t.shape(out) == Shape::Scalar {
            t.broadcast(out, weights.len())?
        } else {
            out
        };
        t.dot(flat, w)
    })
}

fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (Vec<(Vec<f64>, Shape)>, Vec<f64>) {
    let n = rng.random_range(1..8);
    (vec![(uniform(rng, n, lo, hi), Shape::Vector(n))], uniform(rng, n, -1.0, 1.0))
}

fn binary(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (Vec<(Vec<f64>, Shape)>, Vec<f64>) {
    let n = rng.random_range(1..8);
    (
        vec![
            (uniform(rng, n, -2.0, 2.0), Shape::Vector(n)),
            (uniform(rng, n, lo, hi), Shape::Vector(n)),
        ],
        uniform(rng, n, -1.0, 1.0),
    )
}

fn trials(name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<(Vec<f64>, Shape)>, Box<Build>)) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let (inputs, build) = case(&mut rng);
        check(&format!("{name} trial {trial}"), &inputs, &build);
    }
}

#[test]
fn elementwise_binary_ops() {
    trials("add", |r| {
        let (x, w) = binary(r, -2.0, 2.0);
        (x, weighted(w, |t, v| t.add(v[0], v[1])))
    });
    trials("sub", |r| {
        let (x, w) = binary(r, -2.0, 2.0);
        (x, weighted(w, |t, v| t.sub(v[0], v[1])))
    });
    trials("mul", |r| {
        let (x, w) = binary(r, -2.0, 2.0);
        (x, weighted(w, |t, v| t.mul(v[0], v[1])))
    });
    trials("div", |r| {
        let (x, w) = binary(r, 0.5, 2.0);
        (x, weighted(w, |t, v| t.div(v[0], v[1])))
    });
    trials("dot", |r| {
        let (x, _) = binary(r, -2.0, 2.0);
        (x, Box::new(|t: &mut Tape, v: &[Value]| t.dot(v[0], v[1])))
    });
    trials("cosine", |r| {
        let (x, _) = binary(r, -2.0, 2.0);
        (x, Box::new(|t: &mut Tape, v: &[Value]| t.cosine(v[0], v[1])))
    });
}

#[test]
fn elementwise_unary_ops() {
    trials("scale", |r| {
        let c = r.random_range(-3.0..3.0);
        let (x, w) = unary(r, -2.0, 2.0);
        (x, weighted(w, move |t, v| t.scale(v[0], c)))
    });
    trials("offset", |r| {
        let c = r.random_range(-3.0..3.0);
        let (x, w) = unary(r, -2.0, 2.0);
        (x, weighted(w, move |t, v| t.offset(v[0], c)))
    });
    trials("square", |r| {
        let (x, w) = unary(r, -2.0, 2.0);
        (x, weighted(w, |t, v| t.square(v[0])))
    });
    trials("sqrt", |r| {
        let (x, w) = unary(r, 0.2, 3.0);
        (x, weighted(w, |t, v| t.sqrt(v[0])))
    });
    trials("sigmoid", |r| {
        let (x, w) = unary(r, -4.0, 4.0);
        (x, weighted(w, |t, v| t.sigmoid(v[0])))
    });
    trials("tanh", |r| {
        let (x, w) = unary(r, -3.0, 3.0);
        (x, weighted(w, |t, v| t.tanh(v[0])))
    });
    trials("clamp01", |r| {
        let n = r.random_range(1..8);
        // Away from the kinks at 0 and 1.
        let x: Vec<f64> = (0..n)
            .map(|i| match i % 3 {
                0 => r.random_range(0.05..0.95),
                1 => r.random_range(-1.0..-0.05),
                _ => r.random_range(1.05..2.0),
            })
            .collect();
        let w = uniform(r, n, -1.0, 1.0);
        (vec![(x, Shape::Vector(n))], weighted(w, |t, v| t.clamp01(v[0])))
    });
}

#[test]
fn reductions_and_structure() {
    trials("sum", |r| {
        let (x, _) = unary(r, -2.0, 2.0);
        (x, Box::new(|t: &mut Tape, v: &[Value]| t.sum(v[0])))
    });
    trials("mean", |r| {
        let (x, _) = unary(r, -2.0, 2.0);
        (x, Box::new(|t: &mut Tape, v: &[Value]| t.mean(v[0])))
    });
    trials("l2_norm", |r| {
        let (x, _) = unary(r, 0.3, 2.0);
        (x, Box::new(|t: &mut Tape, v: &[Value]| t.l2_norm(v[0])))
    });
    trials("broadcast", |r| {
        let n = r.random_range(1..8);
        let w = uniform(r, n, -1.0, 1.0);
        let x = vec![(vec![r.random_range(-2.0..2.0)], Shape::Scalar)];
        (x, weighted(w, move |t, v| t.broadcast(v[0], n)))
    });
    trials("scale_by", |r| {
        let (mut x, w) = unary(r, -2.0, 2.0);
        x.insert(0, (vec![r.random_range(-2.0..2.0)], Shape::Scalar));
        (x, weighted(w, |t, v| t.scale_by(v[0], v[1])))
    });
    trials("slice", |r| {
        let n = r.random_range(2..10);
        let start = r.random_range(0..n - 1);
        let len = r.random_range(1..=n - start);
        let w = uniform(r, len, -1.0, 1.0);
        let x = vec![(uniform(r, n, -2.0, 2.0), Shape::Vector(n))];
        (x, weighted(w, move |t, v| t.slice(v[0], start, len)))
    });
    trials("element", |r| {
        let n = r.random_range(1..8);
        let i = r.random_range(0..n);
        let x = vec![(uniform(r, n, -2.0, 2.0), Shape::Vector(n))];
        (x, Box::new(move |t: &mut Tape, v: &[Value]| t.element(v[0], i)))
    });
    trials("concat", |r| {
        let (a, b) = (r.random_range(1..5), r.random_range(1..5));
        let w = uniform(r, a + b + 1, -1.0, 1.0);
        let x = vec![
            (uniform(r, a, -2.0, 2.0), Shape::Vector(a)),
            (vec![r.random_range(-2.0..2.0)], Shape::Scalar),
            (uniform(r, b, -2.0, 2.0), Shape::Vector(b)),
        ];
        (x, weighted(w, |t, v| t.concat(&[v[0], v[1], v[2]])))
    });
    trials("matvec", |r| {
        let (rows, cols) = (r.random_range(1..6), r.random_range(1..6));
        let w = uniform(r, rows, -1.0, 1.0);
        let x = vec![
            (uniform(r, rows * cols, -2.0, 2.0), Shape::Matrix(rows, cols)),
            (uniform(r, cols, -2.0, 2.0), Shape::Vector(cols)),
        ];
        (x, weighted(w, |t, v| t.matvec(v[0], v[1])))
    });
}

#[test]
fn composite_expression() {
    trials("composite", |r| {
        let (x, _) = binary(r, -2.0, 2.0);
        let build = |t: &mut Tape, v: &[Value]| {
            let s = t.sigmoid(v[0])?;
            let p = t.mul(s, v[1])?;
            let q = t.tanh(p)?;
            let c = t.cosine(q, v[0])?;
            let n = t.l2_norm(p)?;
            let n = t.offset(n, 1.0)?;
            let m = t.square(n)?;
            t.add(c, m)
        };
        (x, Box::new(build))
    });
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..TRIALS {
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let n = rng.random_range(2..8);
        let x = uniform(&mut rng, n, -2.0, 2.0);
        let grad = |wf: f64, wg: f64| {
            let mut t = Tape::new();
            let v = t.vector(x.clone());
            let s = t.sigmoid(v).unwrap();
            let f = t.sum(s).unwrap();
            let sq = t.square(v).unwrap();
            let g = t.mean(sq).unwrap();
            let f = t.scale(f, wf).unwrap();
            let g = t.scale(g, wg).unwrap();
            let out = t.add(f, g).unwrap();
            t.backward(out).unwrap().wrt(v).to_vec()
        };
        let (gf, gg, gab) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..n {
            assert!((gab[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-12);
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&mut rng, 16, -2.0, 2.0);
    let run = || {
        let mut t = Tape::new();
        let v = t.vector(x.clone());
        let s = t.tanh(v).unwrap();
        let c = t.cosine(s, v).unwrap();
        let g = t.backward(c).unwrap();
        (t.scalar(c).to_bits(), g.wrt(v).iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

fn check_naming_loss(initial: &str, target: TargetSpec, points: u64) {
    let p = Pipeline::default();
    for point in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(point + 100);
        let mut list = p.encode(&[initial]).unwrap();
        let row: Vec<f64> = list.row(0).iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
        list.set_row(0, row.clone());
        let seed = rng.random::<u64>();
        let (_, grad) = naming_loss(&p, &list, 1, &target, seed, 0.05).unwrap();
        let fd: Vec<f64> = (0..row.len())
            .map(|j| {
                let at = |delta: f64| {
                    let mut r = row.clone();
                    r[j] += delta;
                    let mut l = list.clone();
                    l.set_row(0, r);
                    naming_loss(&p, &l, 1, &target, seed, 0.05).unwrap().0
                };
                (at(H) - at(-H)) / (2.0 * H)
            })
            .collect();
        let err = relative_error(&grad[0], &fd);
        assert!(err <= TOLERANCE, "{target} point {point}: {err:.3e}");
    }
}

#[test]
fn text_naming_loss_gradient() {
    check_naming_loss("bird", TargetSpec::text("a yellow hawk"), 4);
}

#[test]
fn identity_naming_loss_gradient() {
    check_naming_loss("woman", TargetSpec::Identity(vec![0.85, 0.2, 0.7, 0.3]), 4);
}

#[test]
fn multi_row_naming_loss_gradient() {
    let p = Pipeline::default();
    let target = TargetSpec::text("a yellow hawk");
    let list = p.encode(&["a", "bird"]).unwrap();
    let (_, grad) = naming_loss(&p, &list, 2, &target, 3, 0.05).unwrap();
    for r in 0..2 {
        let fd: Vec<f64> = (0..p.dim())
            .map(|j| {
                let at = |delta: f64| {
                    let mut l = list.clone();
                    let mut row = l.row(r).to_vec();
                    row[j] += delta;
                    l.set_row(r, row);
                    naming_loss(&p, &l, 2, &target, 3, 0.05).unwrap().0
                };
                (at(H) - at(-H)) / (2.0 * H)
            })
            .collect();
        assert!(relative_error(&grad[r], &fd) <= TOLERANCE, "row {r}");
    }
}
