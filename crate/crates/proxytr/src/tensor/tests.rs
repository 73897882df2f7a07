use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences of a scalar-valued builder with respect to one
/// leaf input. The builder receives fresh leaf data and must return the loss id.
fn numeric_grad(
    build: &dyn Fn(&mut Graph<f64>, &[Vec<f64>]) -> TensorId,
    inputs: &[Vec<f64>],
    which: usize,
    step: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(inputs[which].len());
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which][i] += step;
        let mut g = Graph::new();
        let lp = build(&mut g, &plus);
        let fp = g.value(lp)[0];

        let mut minus = inputs.to_vec();
        minus[which][i] -= step;
        let mut g = Graph::new();
        let lm = build(&mut g, &minus);
        let fm = g.value(lm)[0];

        out.push((fp - fm) / (2.0 * step));
    }
    out
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Assert analytic gradients of every leaf match central differences.
fn check_grads(build: &dyn Fn(&mut Graph<f64>, &[Vec<f64>]) -> TensorId, inputs: &[Vec<f64>], label: &str) {
    let mut g = Graph::new();
    let loss = build(&mut g, inputs);
    g.backward(loss).unwrap();
    let leaves: Vec<TensorId> = (0..inputs.len()).map(TensorId).collect();
    for (w, &leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(leaf).unwrap_or_else(|| panic!("{label}: input {w} has no grad"));
        let numeric = numeric_grad(build, inputs, w, 1e-5);
        let err = max_rel_err(analytic, &numeric);
        assert!(
            err < 1e-4,
            "{label}: input {w} rel err {err:.3e}\n analytic {analytic:?}\n  numeric {numeric:?}"
        );
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity() {
    let mut g: Graph<f64> = Graph::new();
    let eye = g
        .tensor(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3], false)
        .unwrap();
    let out = g.matmul(eye, eye).unwrap();
    assert_eq!(g.value(out), g.value(eye));
}

#[test]
fn matmul_hand_case() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.tensor(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false).unwrap();
    let b = g.tensor(vec![1.0, 1.0], vec![2, 1], false).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[3.0, 7.0]);
    assert_eq!(g.shape(c), &[2, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.tensor(vec![0.0; 6], vec![2, 3], false).unwrap();
    let b = g.tensor(vec![0.0; 4], vec![2, 2], false).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![rand_vec(&mut rng, 6), rand_vec(&mut rng, 12)];
    check_grads(
        &|g, data| {
            let a = g.tensor(data[0].clone(), vec![2, 3], true).unwrap();
            let b = g.tensor(data[1].clone(), vec![3, 4], true).unwrap();
            let c = g.matmul(a, b).unwrap();
            g.sum(c, None).unwrap()
        },
        &inputs,
        "matmul",
    );
}

#[test]
fn relu_forward() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.tensor(vec![-1.0, 0.0, 2.0], vec![3], false).unwrap();
    let y = g.relu(x);
    assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn sigmoid_at_zero() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.tensor(vec![0.0], vec![1], false).unwrap();
    let y = g.sigmoid(x);
    assert_eq!(g.value(y), &[0.5]);
}

#[test]
fn add_gradient_is_one() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.tensor(vec![1.0, 2.0], vec![2], true).unwrap();
    let b = g.tensor(vec![3.0, 4.0], vec![2], true).unwrap();
    let c = g.add(a, b).unwrap();
    let loss = g.sum(c, None).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
}

#[test]
fn broadcast_add_rejects_incompatible() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.tensor(vec![0.0; 6], vec![2, 3], false).unwrap();
    let b = g.tensor(vec![0.0; 2], vec![2], false).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn broadcast_row_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![rand_vec(&mut rng, 12), rand_vec(&mut rng, 4)];
    check_grads(
        &|g, data| {
            let x = g.tensor(data[0].clone(), vec![3, 4], true).unwrap();
            let b = g.tensor(data[1].clone(), vec![1, 4], true).unwrap();
            let y = g.add(x, b).unwrap();
            let z = g.mul(y, y).unwrap();
            g.sum(z, None).unwrap()
        },
        &inputs,
        "row bias",
    );
}

#[test]
fn softmax_uniform_on_equal_inputs() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.tensor(vec![0.0, 0.0, 0.0], vec![3], false).unwrap();
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_is_stabilized() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.tensor(vec![1000.0, 0.0], vec![2], false).unwrap();
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y);
    assert!(v.iter().all(|x| x.is_finite()));
    assert!(v[0] > 1.0 - 1e-9 && v[1] < 1e-9);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g: Graph<f64> = Graph::new();
    let x = g.tensor(rand_vec(&mut rng, 28), vec![4, 7], false).unwrap();
    let y = g.softmax(x, 1).unwrap();
    for r in 0..4 {
        let s: f64 = g.value(y)[r * 7..(r + 1) * 7].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![rand_vec(&mut rng, 4)];
    let build = |g: &mut Graph<f64>, data: &[Vec<f64>]| {
        let x = g.tensor(data[0].clone(), vec![4], true).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let w = g.constant(vec![0.3, -0.7, 0.2, 0.9], vec![4]).unwrap();
        let p = g.mul(s, w).unwrap();
        g.sum(p, None).unwrap()
    };
    let mut g = Graph::new();
    let loss = build(&mut g, &inputs);
    g.backward(loss).unwrap();
    let analytic = g.grad(TensorId(0)).unwrap();
    let numeric = numeric_grad(&build, &inputs, 0, 1e-5);
    assert!(max_rel_err(analytic, &numeric) < 1e-6);
}

#[test]
fn max_reduce_tie_routes_to_lowest_index() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.tensor(vec![3.0, 1.0, 3.0], vec![3], true).unwrap();
    let m = g.max(x, None).unwrap();
    assert_eq!(g.value(m), &[3.0]);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn mean_of_constant_tensor() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.tensor(vec![2.5; 12], vec![3, 4], false).unwrap();
    let m = g.mean(x, None).unwrap();
    assert!((g.value(m)[0] - 2.5).abs() < 1e-15);
}

#[test]
fn sum_backward_is_ones() {
    let mut g: Graph<f64> = Graph::new();
    let w = g.tensor(vec![0.1, 0.2, 0.3], vec![3], true).unwrap();
    let loss = g.sum(w, None).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn repeated_backward_accumulates_on_leaves() {
    let mut g: Graph<f64> = Graph::new();
    let w = g.tensor(vec![0.1, 0.2, 0.3], vec![3], true).unwrap();
    let loss = g.sum(w, None).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g: Graph<f64> = Graph::new();
    let w = g.tensor(vec![0.1, 0.2], vec![2], true).unwrap();
    assert!(matches!(g.backward(w), Err(Error::Usage(_))));
}

#[test]
fn axis_reductions_match_manual() {
    let mut g: Graph<f64> = Graph::new();
    // [[1,2,3],[4,5,6]]
    let x = g.tensor(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3], false).unwrap();
    let s0 = g.sum(x, Some(0)).unwrap();
    assert_eq!(g.value(s0), &[5.0, 7.0, 9.0]);
    let s1 = g.sum(x, Some(1)).unwrap();
    assert_eq!(g.value(s1), &[6.0, 15.0]);
    let m0 = g.max(x, Some(0)).unwrap();
    assert_eq!(g.value(m0), &[4.0, 5.0, 6.0]);
    let mean1 = g.mean(x, Some(1)).unwrap();
    assert_eq!(g.value(mean1), &[2.0, 5.0]);
}

#[test]
fn gather_concat_slice_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![rand_vec(&mut rng, 12), rand_vec(&mut rng, 8)];
    check_grads(
        &|g, data| {
            let a = g.tensor(data[0].clone(), vec![3, 4], true).unwrap();
            let b = g.tensor(data[1].clone(), vec![2, 4], true).unwrap();
            let picked = g.gather_rows(a, &[2, 0, 2]).unwrap();
            let joined = g.concat(&[picked, b], 0).unwrap();
            let left = g.slice_cols(joined, 0, 2).unwrap();
            let right = g.slice_cols(joined, 2, 2).unwrap();
            let t = g.transpose(right).unwrap();
            let prod = g.matmul(left, t).unwrap();
            let sq = g.mul(prod, prod).unwrap();
            g.sum(sq, None).unwrap()
        },
        &inputs,
        "gather/concat/slice/transpose",
    );
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs = vec![rand_vec(&mut rng, 10), rand_vec(&mut rng, 5), rand_vec(&mut rng, 5)];
    check_grads(
        &|g, data| {
            let x = g.tensor(data[0].clone(), vec![2, 5], true).unwrap();
            let gamma = g.tensor(data[1].clone(), vec![5], true).unwrap();
            let beta = g.tensor(data[2].clone(), vec![5], true).unwrap();
            let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum(sq, None).unwrap()
        },
        &inputs,
        "layer_norm",
    );
}

#[test]
fn relu_sigmoid_sqrt_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let inputs = vec![rand_vec(&mut rng, 9)];
    check_grads(
        &|g, data| {
            let x = g.tensor(data[0].clone(), vec![3, 3], true).unwrap();
            let r = g.relu(x);
            let s = g.sigmoid(x);
            let sq = g.mul(x, x).unwrap();
            let shifted = g.add_const(sq, 0.5);
            let root = g.sqrt(shifted);
            let sum1 = g.add(r, s).unwrap();
            let sum2 = g.add(sum1, root).unwrap();
            let scaled = g.scale(sum2, 0.7);
            g.sum(scaled, None).unwrap()
        },
        &inputs,
        "elementwise chain",
    );
}

#[test]
fn softmax_reduce_mean_axis_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let inputs = vec![rand_vec(&mut rng, 24)];
    check_grads(
        &|g, data| {
            let x = g.tensor(data[0].clone(), vec![2, 3, 4], true).unwrap();
            let s = g.softmax(x, 2).unwrap();
            let m = g.max(s, Some(1)).unwrap();
            let mn = g.mean(m, Some(0)).unwrap();
            let sq = g.mul(mn, mn).unwrap();
            g.sum(sq, None).unwrap()
        },
        &inputs,
        "softmax+reduce 3d",
    );
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut g: Graph<f32> = Graph::new();
        let a = g.tensor((0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![5, 8], false).unwrap();
        let b = g.tensor((0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![8, 6], false).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let r = g.relu(s);
        g.value(r).to_vec()
    };
    let x = run();
    let y = run();
    assert_eq!(x, y);
}

#[test]
fn inference_graph_records_no_ops() {
    let mut g: Graph<f32> = Graph::inference();
    let a = g.tensor(vec![1.0, 2.0], vec![2], true).unwrap();
    let b = g.relu(a);
    assert_eq!(g.value(b), &[1.0, 2.0]);
    assert!(g.backward(b).is_err());
}

#[test]
fn param_store_accumulates_across_graphs() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let w = store.add("w", vec![2], vec![1.0, 2.0]).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let wt = g.param(&store, w);
        let loss = g.sum(wt, None).unwrap();
        g.backward(loss).unwrap();
        store.accumulate_grads(&g);
    }
    assert_eq!(store.grad(w), &[2.0, 2.0]);
    store.zero_grads();
    assert_eq!(store.grad(w), &[0.0, 0.0]);
}

#[test]
fn adamw_with_zero_lr_keeps_weights() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let w = store.add("w", vec![2], vec![1.0, -1.0]).unwrap();
    let mut g = Graph::new();
    let wt = g.param(&store, w);
    let sq = g.mul(wt, wt).unwrap();
    let loss = g.sum(sq, None).unwrap();
    g.backward(loss).unwrap();
    store.accumulate_grads(&g);
    store.adamw_step(0.0, 0.9, 0.999, 1e-8, 0.05, 1);
    assert_eq!(store.data(w), &[1.0, -1.0]);
}

#[test]
fn adamw_descends_a_quadratic() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let w = store.add("w", vec![1], vec![3.0]).unwrap();
    let mut last = f64::INFINITY;
    for step in 1..=50 {
        let mut g = Graph::new();
        let wt = g.param(&store, w);
        let sq = g.mul(wt, wt).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        store.accumulate_grads(&g);
        store.adamw_step(0.1, 0.9, 0.999, 1e-8, 0.0, step);
        store.zero_grads();
        let v = store.data(w)[0].powi(2);
        last = v;
    }
    assert!(last < 1.0, "quadratic should shrink, got {last}");
}
