use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output entry
/// contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph<'_>, y: Var, weights: &Tensor) -> Result<Var, DiffError> {
    if g.value(y).is_scalar() {
        let w = g.constant_scalar(weights.data()[0])?;
        let y = g.reshape(y, vec![])?;
        let w = g.reshape(w, vec![])?;
        let p = g.mul(y, w)?;
        return Ok(p);
    }
    let w = g.input(weights.clone().reshaped(g.value(y).shape().to_vec())?)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Build = fn(&mut Graph<'_>, &[ParamId]) -> Result<Var, DiffError>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    build: Build,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.matmul(a, b)
            },
        },
        Case {
            name: "matmul_vector",
            shapes: vec![vec![4], vec![4, 3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.matmul(a, b)
            },
        },
        Case {
            name: "matmul_t",
            shapes: vec![vec![3, 4], vec![5, 4]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.matmul_t(a, b)
            },
        },
        Case {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.add(a, b)
            },
        },
        Case {
            name: "sub",
            shapes: vec![vec![5], vec![5]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.sub(a, b)
            },
        },
        Case {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.mul(a, b)
            },
        },
        Case {
            name: "add_row",
            shapes: vec![vec![3, 4], vec![4]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.add_row(a, b)
            },
        },
        Case {
            name: "scale_rows",
            shapes: vec![vec![3, 4], vec![3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.scale_rows(a, b)
            },
        },
        Case {
            name: "scale",
            shapes: vec![vec![4]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.affine(a, -1.7, 0.3)
            },
        },
        Case {
            name: "sigmoid",
            shapes: vec![vec![6]],
            range: (-4.0, 4.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.sigmoid(a)
            },
        },
        Case {
            name: "tanh",
            shapes: vec![vec![2, 3]],
            range: (-3.0, 3.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.tanh(a)
            },
        },
        Case {
            name: "softmax",
            shapes: vec![vec![5]],
            range: (-2.0, 2.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.softmax(a, 0.7)
            },
        },
        Case {
            name: "softmax_rows",
            shapes: vec![vec![3, 4]],
            range: (-2.0, 2.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.softmax(a, 1.3)
            },
        },
        Case {
            name: "logsumexp",
            shapes: vec![vec![6]],
            range: (-3.0, 3.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.logsumexp(a)
            },
        },
        Case {
            name: "logsumexp_rows",
            shapes: vec![vec![3, 4]],
            range: (-3.0, 3.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.logsumexp(a)
            },
        },
        Case {
            name: "exp",
            shapes: vec![vec![4]],
            range: (-2.0, 2.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.exp(a)
            },
        },
        Case {
            name: "ln",
            shapes: vec![vec![4]],
            range: (0.2, 3.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.ln(a, 1e-8)
            },
        },
        Case {
            name: "sq_norm",
            shapes: vec![vec![5]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.sq_norm(a)
            },
        },
        Case {
            name: "dot",
            shapes: vec![vec![5], vec![5]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.dot(a, b)
            },
        },
        Case {
            name: "cosine",
            shapes: vec![vec![5], vec![5]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.cosine(a, b)
            },
        },
        Case {
            name: "mean_rows",
            shapes: vec![vec![4, 3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.mean_rows(a)
            },
        },
        Case {
            name: "concat_cols",
            shapes: vec![vec![2, 3], vec![2, 2]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.concat_cols(a, b)
            },
        },
        Case {
            name: "concat_rows",
            shapes: vec![vec![2, 3], vec![3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let (a, b) = (g.param(p[0])?, g.param(p[1])?);
                g.concat_rows(&[a, b, a])
            },
        },
        Case {
            name: "clamp01",
            // keep samples away from the kinks at 0 and 1
            shapes: vec![vec![6]],
            range: (-0.45, 1.45),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.clamp01(a)
            },
        },
        Case {
            name: "transpose",
            shapes: vec![vec![2, 3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.transpose(a)
            },
        },
        Case {
            name: "select",
            shapes: vec![vec![4, 2]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.select(a, &[3, 0, 3])
            },
        },
        Case {
            name: "repeat_rows",
            shapes: vec![vec![3]],
            range: (-1.0, 1.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.repeat_rows(a, 4)
            },
        },
        Case {
            name: "relu",
            shapes: vec![vec![2, 5]],
            range: (-3.0, 3.0),
            build: |g, p| {
                let a = g.param(p[0])?;
                g.relu(a)
            },
        },
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in cases() {
        let mut worst = 0.0f64;
        for _trial in 0..100 {
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.insert(format!("x{i}"), rand_tensor(&mut rng, s, case.range.0, case.range.1)))
                .collect();
            // Output shape is needed to draw the reduction weights.
            let out_len = {
                let mut g = Graph::new(&store);
                let y = (case.build)(&mut g, &ids).unwrap();
                g.value(y).numel()
            };
            let weights = rand_tensor(&mut rng, &[out_len], -1.0, 1.0);
            let build = case.build;
            let report = finite_diff_check(&store, 1e-5, |g| {
                let y = build(g, &ids)?;
                weighted_sum(g, y, &weights)
            })
            .unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst < 1e-6, "{}: max rel error {worst:e}", case.name);
    }
}

#[test]
fn sigmoid_at_zero_and_its_derivative() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::scalar(0.0));
    let mut g = Graph::new(&store);
    let xv = g.param(x).unwrap();
    let y = g.sigmoid(xv).unwrap();
    assert_eq!(g.scalar(y), 0.5);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).item(), 0.25);
}

#[test]
fn logsumexp_single_element_is_identity() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::vector(vec![3.25])).unwrap();
    let y = g.logsumexp(x).unwrap();
    assert_eq!(g.scalar(y), 3.25);
}

#[test]
fn logsumexp_is_overflow_safe() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
    let y = g.logsumexp(x).unwrap();
    assert!((g.scalar(y) - (1000.0 + 2f64.ln())).abs() < 1e-9);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
    let y = g.softmax(x, 1.0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_sums_to_one_and_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let t = rng.random_range(0.05..5.0);
        let p = softmax(&row, t);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0 || v == 0.0 && n > 1));
    }
}

#[test]
fn logsumexp_gradient_scaled_by_temperature_is_softmax() {
    // d/dv [tau * lse(v / tau)] = softmax(v / tau)
    let tau = 2.0;
    let v = vec![0.3, -1.2, 2.5, 0.0];
    let mut store = ParamStore::new();
    let id = store.insert("v", Tensor::vector(v.clone()));
    let mut g = Graph::new(&store);
    let x = g.param(id).unwrap();
    let scaled = g.scale(x, 1.0 / tau).unwrap();
    let lse = g.logsumexp(scaled).unwrap();
    let out = g.scale(lse, tau).unwrap();
    let grads = g.backward(out).unwrap();
    let expected = softmax(&v, tau);
    for (a, b) in grads.get(id).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn linear_function_checks_exactly() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::vector(vec![0.5, -2.0, 3.0]));
    let x = Tensor::vector(vec![1.5, 0.25, -4.0]);
    let report = finite_diff_check(&store, 1e-5, |g| {
        let wv = g.param(w)?;
        let xv = g.input(x.clone())?;
        g.dot(wv, xv)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-10, "{}", report.max_rel_error);
}

#[test]
fn zero_epsilon_is_rejected() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::vector(vec![1.0]));
    let err = finite_diff_check(&store, 0.0, |g| {
        let wv = g.param(w)?;
        g.sum(wv)
    })
    .unwrap_err();
    assert_eq!(err, DiffError::InvalidEpsilon(0.0));
}

#[test]
fn non_scalar_objective_is_rejected() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::vector(vec![1.0, 2.0]));
    let err = finite_diff_check(&store, 1e-5, |g| g.param(w)).unwrap_err();
    assert!(matches!(err, DiffError::NotScalar { .. }));
}

#[test]
fn shape_mismatch_reports_node() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, DiffError::Shape { node: 2, op: "matmul", .. }), "{err:?}");
}

#[test]
fn non_finite_intermediate_reports_node() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::vector(vec![-1.0])).unwrap();
    let err = g.ln(a, 0.0).unwrap_err();
    assert_eq!(err, DiffError::NonFinite { node: 1, op: "ln" });
}

#[test]
fn backward_on_empty_graph_is_rejected() {
    let store = ParamStore::new();
    let mut scratch = Graph::new(&store);
    let v = scratch.constant_scalar(1.0).unwrap();
    let empty = Graph::new(&store);
    assert_eq!(empty.backward(v).unwrap_err(), DiffError::NotEvaluated);
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.insert("used", Tensor::vector(vec![1.0, 2.0]));
    let unused = store.insert("unused", Tensor::zeros(&[2, 2]));
    let mut g = Graph::new(&store);
    let x = g.param(used).unwrap();
    let y = g.sq_norm(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(unused), &Tensor::zeros(&[2, 2]));
    assert_eq!(grads.get(used).data(), &[2.0, 4.0]);
}

#[test]
fn clamp_blocks_gradient_outside_interval() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::vector(vec![-0.5, 0.5, 1.5]));
    let mut g = Graph::new(&store);
    let xv = g.param(x).unwrap();
    let c = g.clamp01(xv).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn stop_grad_cuts_the_path() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::vector(vec![1.0, 2.0]));
    let mut g = Graph::new(&store);
    let xv = g.param(x).unwrap();
    let frozen = g.stop_grad(xv).unwrap();
    let diff = g.sub(xv, frozen).unwrap();
    let y = g.sum(diff).unwrap();
    assert_eq!(g.scalar(y), 0.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0, 1.0]);
}

#[test]
fn backward_is_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let a = store.insert("a", rand_tensor(&mut rng, &[5, 4], -1.0, 1.0));
    let b = store.insert("b", rand_tensor(&mut rng, &[4, 3], -1.0, 1.0));
    let run = || {
        let mut g = Graph::new(&store);
        let (av, bv) = (g.param(a).unwrap(), g.param(b).unwrap());
        let h = g.matmul(av, bv).unwrap();
        let h = g.tanh(h).unwrap();
        let p = g.softmax(h, 0.5).unwrap();
        let l = g.logsumexp(p).unwrap();
        let s = g.sum(l).unwrap();
        g.backward(s).unwrap()
    };
    let (g1, g2) = (run(), run());
    for ((_, x), (_, y)) in g1.iter().zip(g2.iter()) {
        let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bx, by);
    }
}
