use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsb_core::recurrent::lstm_scan;
use tsb_core::tensor::grad_check;
use tsb_core::{Graph, Result, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CASES: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar through fixed random weights so no partial
/// cancels by symmetry.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random(&mut rng, g.shape(out)));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let report = grad_check(
            |g, v| {
                let out = f(g, v)?;
                weighted_sum(g, out, seed)
            },
            &inputs,
            H,
            TOL,
        )
        .unwrap();
        assert!(report.passed, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn matmul_gradients() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check("matmul flat", &[&[2, 3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check("matmul batched", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn elementwise_gradients() {
    check("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]));
    check("add broadcast", &[&[2, 3, 4], &[4]], |g, v| g.add(v[0], v[1]));
    check("sub", &[&[3, 2], &[3, 2]], |g, v| g.sub(v[0], v[1]));
    check("sub broadcast", &[&[2, 3], &[3]], |g, v| g.sub(v[0], v[1]));
    check("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
    check("mul broadcast", &[&[2, 2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
    check("scale", &[&[4]], |g, v| g.scale(v[0], -1.7));
    check("sigmoid", &[&[2, 5]], |g, v| g.sigmoid(v[0]));
    check("tanh", &[&[2, 5]], |g, v| g.tanh(v[0]));
}

#[test]
fn normalization_gradients() {
    check("softmax last", &[&[3, 4]], |g, v| g.softmax(v[0], 1));
    check("softmax first", &[&[3, 4]], |g, v| g.softmax(v[0], 0));
    check("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn shape_gradients() {
    check("concat", &[&[2, 3], &[2, 5]], |g, v| g.concat(&[v[0], v[1]], 1));
    check("slice", &[&[3, 6]], |g, v| g.slice(v[0], 1, 2, 3));
    check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check("transpose", &[&[2, 3, 4]], |g, v| g.transpose(v[0]));
}

#[test]
fn reduction_gradients() {
    let as_vec = |g: &mut Graph, s: Var| g.reshape(s, &[1]);
    check("sum", &[&[3, 3]], |g, v| {
        let s = g.sum(v[0])?;
        as_vec(g, s)
    });
    check("mean", &[&[3, 3]], |g, v| {
        let s = g.mean(v[0])?;
        as_vec(g, s)
    });
    check("sum_squares", &[&[3, 3]], |g, v| {
        let s = g.sum_squares(v[0])?;
        as_vec(g, s)
    });
}

#[test]
fn lstm_scan_gradients() {
    for reverse in [false, true] {
        check("lstm_scan", &[&[2, 4, 8], &[2, 8]], |g, v| lstm_scan(g, v[0], v[1], reverse));
    }
}

#[test]
fn three_layer_composite() {
    check("composite", &[&[4, 3], &[3, 5], &[5], &[5, 2]], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add(h, v[2])?;
        let h = g.tanh(h)?;
        let h = g.matmul(h, v[3])?;
        g.sigmoid(h)
    });
}

#[test]
fn shared_leaf_sums_both_paths() {
    check("shared", &[&[3]], |g, v| {
        let a = g.tanh(v[0])?;
        let b = g.mul(v[0], v[0])?;
        g.add(a, b)
    });
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.param(random(&mut rng, &[4, 6]));
        let b = g.param(random(&mut rng, &[6, 6]));
        let h = g.matmul(a, b).unwrap();
        let s = g.softmax(h, 1).unwrap();
        let loss = g.sum_squares(s).unwrap();
        g.backward(loss).unwrap();
        (g.value(s).clone(), g.grad(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let cols = rng.random_range(1..9);
        let x = random(&mut rng, &[3, cols]).map(|v| v * 40.0);
        let mut g = Graph::new();
        let a = g.constant(x);
        let s = g.softmax(a, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(s).data()[r * cols..(r + 1) * cols].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(a, 0).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (i, &v) in g.value(s).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 16]).map(|v| 3.0 * v + 2.0);
    let xm = x.data().iter().sum::<f64>() / 16.0;
    let xv = x.data().iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / 16.0;
    let mut g = Graph::new();
    let a = g.constant(x);
    let gamma = g.constant(Tensor::full(&[16], 1.0));
    let beta = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(a, gamma, beta, 1e-5).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 16.0;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - xv / (xv + 1e-5)).abs() < 1e-12, "{var}");
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
            assert!((g.value(c).at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}
