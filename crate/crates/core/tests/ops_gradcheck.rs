//! Every differentiable tape operation against central finite differences:
//! 100 seeds each, at most 64 input elements, relative error at most 1e-6.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hfwave::numerics::{gradcheck_many, Reduction, Tape, Tensor, Var};
use hfwave::Result;

const SEEDS: u64 = 100;
const TOLERANCE: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Reduces any output to a scalar with fixed, non-uniform weights.
fn project<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let dims = y.dims();
    let w = Tensor::from_fn(&dims, |i| ((i * 7919 % 13) as f64 - 6.0) / 6.0 + 0.05);
    y.mul(tape.constant(w))?.sum()
}

fn check<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        for x in &inputs {
            assert!(x.len() <= 64, "{name}: input of {} elements", x.len());
        }
        let err = gradcheck_many(|tape, v| project(tape, f(tape, v)?), &inputs, EPS)
            .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst <= TOLERANCE, "{name}: max relative error {worst:.3e}");
}

fn pair(dims: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![uniform(r, dims, -2.0, 2.0), uniform(r, dims, -2.0, 2.0)]
}

fn one(dims: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![uniform(r, dims, -2.0, 2.0)]
}

#[test]
fn elementwise() {
    check("add", pair(&[3, 4]), |_, v| v[0].add(v[1]));
    check("sub", pair(&[3, 4]), |_, v| v[0].sub(v[1]));
    check("mul", pair(&[3, 4]), |_, v| v[0].mul(v[1]));
    check("scale", one(&[3, 4]), |_, v| v[0].scale(-1.7));
    check("shift", one(&[3, 4]), |_, v| v[0].shift(0.3)?.mul(v[0]));
    check("exp", one(&[3, 4]), |_, v| v[0].exp());
    check(
        "ln",
        |r| vec![uniform(r, &[3, 4], 0.2, 3.0)],
        |_, v| v[0].ln(),
    );
    check(
        "gelu",
        |r| vec![uniform(r, &[4, 4], -4.0, 4.0)],
        |_, v| v[0].gelu(),
    );
    check(
        "smooth_l1",
        |r| {
            vec![
                uniform(r, &[4, 3], -3.0, 3.0),
                uniform(r, &[4, 3], -3.0, 3.0),
            ]
        },
        |_, v| v[0].smooth_l1(v[1]),
    );
}

#[test]
fn linear_algebra() {
    check(
        "add_bias",
        |r| vec![uniform(r, &[4, 3], -2.0, 2.0), uniform(r, &[3], -2.0, 2.0)],
        |_, v| v[0].add_bias(v[1]),
    );
    check(
        "matmul",
        |r| {
            vec![
                uniform(r, &[3, 4], -2.0, 2.0),
                uniform(r, &[4, 5], -2.0, 2.0),
            ]
        },
        |_, v| v[0].matmul(v[1]),
    );
    check(
        "linear",
        |r| {
            vec![
                uniform(r, &[2, 2, 3], -2.0, 2.0),
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[4], -1.0, 1.0),
            ]
        },
        |_, v| v[0].linear(v[1], Some(v[2])),
    );
    check(
        "rank_dot",
        |r| {
            vec![
                uniform(r, &[3, 4], -2.0, 2.0),
                uniform(r, &[2, 3, 4], -2.0, 2.0),
            ]
        },
        |_, v| v[0].rank_dot(v[1]),
    );
}

#[test]
fn convolutions() {
    check(
        "conv2d",
        |r| {
            vec![
                uniform(r, &[4, 4, 2], -2.0, 2.0),
                uniform(r, &[3, 3, 2, 2], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ]
        },
        |_, v| v[0].conv2d(v[1], Some(v[2])),
    );
    check(
        "conv_transpose2x2",
        |r| {
            vec![
                uniform(r, &[2, 3, 2], -2.0, 2.0),
                uniform(r, &[2, 2, 2, 3], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ]
        },
        |_, v| v[0].conv_transpose2x2(v[1], Some(v[2])),
    );
    check("haar_forward", one(&[4, 4, 2]), |_, v| v[0].haar_forward());
    check("haar_inverse", one(&[2, 2, 8]), |_, v| v[0].haar_inverse());
    check("resize_nearest", one(&[2, 3, 2]), |_, v| {
        v[0].resize_nearest(5, 4)
    });
}

#[test]
fn normalizations() {
    check(
        "layer_norm",
        |r| {
            vec![
                uniform(r, &[3, 5], -2.0, 2.0),
                uniform(r, &[5], 0.5, 1.5),
                uniform(r, &[5], -1.0, 1.0),
            ]
        },
        |_, v| v[0].layer_norm(v[1], v[2]),
    );
    check("softmax", one(&[3, 5]), |_, v| v[0].softmax());
    check("log_softmax", one(&[3, 5]), |_, v| v[0].log_softmax());
    check("row_norms", one(&[4, 3]), |_, v| v[0].row_norms());
    check("l2_normalize_rows", one(&[4, 3]), |_, v| {
        v[0].l2_normalize_rows()
    });
    check("cross_entropy sum", one(&[4, 5]), |_, v| {
        v[0].cross_entropy(&[0, 4, 2, 2], Reduction::Sum)
    });
    check("cross_entropy mean", one(&[4, 5]), |_, v| {
        v[0].cross_entropy(&[1, 3, 0, 4], Reduction::Mean)
    });
}

#[test]
fn reductions_and_layout() {
    check("sum", one(&[3, 4]), |_, v| v[0].mul(v[0])?.sum());
    check("mean", one(&[3, 4]), |_, v| v[0].mul(v[0])?.mean());
    check("mean_rows", one(&[5, 3]), |_, v| v[0].mean_rows());
    check("narrow", one(&[2, 3, 4]), |_, v| v[0].narrow(2, 1, 2));
    check("reshape", one(&[2, 3, 4]), |_, v| v[0].reshape(&[6, 4]));
    check("gather_rows", one(&[5, 3]), |_, v| {
        v[0].gather_rows(&[4, 0, 4, 2])
    });
    check("mix_rows", pair(&[4, 3]), |_, v| {
        v[0].mix_rows(v[1], &[true, false, false, true])
    });
    check(
        "concat",
        |r| {
            vec![
                uniform(r, &[2, 2, 1], -2.0, 2.0),
                uniform(r, &[2, 2, 3], -2.0, 2.0),
            ]
        },
        |t, v| t.concat(&[v[0], v[1]], 2),
    );
}
