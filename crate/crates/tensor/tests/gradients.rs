use ami_tensor::gradcheck::{finite_diff_check, param_grad_check};
use ami_tensor::{AttentionMask, Graph, ParamSet, Result, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contract `y` with fixed random weights so every output entry matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), &mut rng(seed ^ 0xABCD));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Check `op` against finite differences over `SEEDS` random inputs.
fn check_unary(name: &str, shape: &[usize], transform: fn(f64) -> f64, op: fn(&mut Graph, Var) -> Result<Var>) {
    for seed in 0..SEEDS {
        let x = Tensor::randn(shape, &mut rng(seed)).map(transform);
        let err = finite_diff_check(
            |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y, seed)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

/// Check a binary op with respect to each operand in turn.
fn check_binary(name: &str, sa: &[usize], sb: &[usize], op: fn(&mut Graph, Var, Var) -> Result<Var>) {
    for seed in 0..SEEDS {
        let a = Tensor::randn(sa, &mut rng(seed));
        let b = Tensor::randn(sb, &mut rng(seed + 1000)).map(|v| v.signum() * (v.abs() + 0.5));
        let bc = b.clone();
        let err_a = finite_diff_check(
            move |g, x| {
                let other = g.constant(bc.clone());
                let y = op(g, x, other)?;
                weighted_sum(g, y, seed)
            },
            &a,
            EPS,
        )
        .unwrap();
        let ac = a.clone();
        let err_b = finite_diff_check(
            move |g, x| {
                let other = g.constant(ac.clone());
                let y = op(g, other, x)?;
                weighted_sum(g, y, seed)
            },
            &b,
            EPS,
        )
        .unwrap();
        assert!(err_a <= TOL && err_b <= TOL, "{name} seed {seed}: {err_a:e} {err_b:e}");
    }
}

fn id(v: f64) -> f64 {
    v
}

#[test]
fn elementwise_binary_rules() {
    check_binary("add", &[3, 4], &[3, 4], |g, a, b| g.add(a, b));
    check_binary("add_broadcast", &[2, 3, 4], &[4], |g, a, b| g.add(a, b));
    check_binary("sub_broadcast", &[2, 1, 4], &[3, 1], |g, a, b| g.sub(a, b));
    check_binary("mul_broadcast", &[2, 3, 4], &[2, 1, 1], |g, a, b| g.mul(a, b));
    check_binary("div", &[3, 4], &[3, 4], |g, a, b| g.div(a, b));
}

#[test]
fn matmul_rules() {
    check_binary("matmul_2d", &[3, 4], &[4, 5], |g, a, b| g.matmul(a, b));
    check_binary("matmul_broadcast_rhs", &[2, 3, 4], &[4, 2], |g, a, b| g.matmul(a, b));
    check_binary("matmul_batched", &[2, 2, 3, 4], &[2, 2, 4, 3], |g, a, b| g.matmul(a, b));
    check_binary("matmul_broadcast_lhs", &[3, 4], &[2, 4, 2], |g, a, b| g.matmul(a, b));
}

#[test]
fn shape_rules() {
    check_unary("permute", &[2, 3, 4], id, |g, x| g.permute(x, &[1, 2, 0]));
    check_unary("transpose", &[2, 3, 4], id, |g, x| g.transpose(x));
    check_unary("reshape", &[2, 3, 4], id, |g, x| g.reshape(x, &[6, 4]));
    check_unary("slice", &[3, 5, 2], id, |g, x| g.slice(x, 1, 1, 4));
    check_unary("concat", &[3, 2], id, |g, x| {
        let s = g.square(x);
        g.concat(&[x, s, x], 1)
    });
    check_unary("cumsum", &[3, 4, 2], id, |g, x| g.cumsum(x, 1));
}

#[test]
fn reduction_rules() {
    check_unary("sum", &[3, 4, 2], id, |g, x| g.sum(x, 1));
    check_unary("mean", &[3, 4, 2], id, |g, x| g.mean(x, 2));
    check_unary("sum_all", &[3, 4], id, |g, x| g.sum_all(x));
    check_unary("squared_l2", &[3, 4], id, |g, x| g.squared_l2(x));
}

#[test]
fn pointwise_rules() {
    check_unary("scale", &[5], id, |g, x| Ok(g.scale(x, -2.5)));
    check_unary("add_scalar", &[5], id, |g, x| Ok(g.add_scalar(x, 3.0)));
    check_unary("abs", &[6], |v| v + v.signum() * 0.1, |g, x| Ok(g.abs(x)));
    check_unary("exp", &[6], id, |g, x| Ok(g.exp(x)));
    check_unary("log", &[6], |v| v.abs() + 0.2, |g, x| Ok(g.log(x)));
    check_unary("sigmoid", &[6], |v| 3.0 * v, |g, x| Ok(g.sigmoid(x)));
    check_unary("tanh", &[6], id, |g, x| Ok(g.tanh(x)));
    check_unary("gelu", &[6], |v| 2.0 * v, |g, x| Ok(g.gelu(x)));
    check_unary("relu", &[6], |v| v + v.signum() * 0.1, |g, x| Ok(g.relu(x)));
    check_unary("square", &[6], id, |g, x| Ok(g.square(x)));
}

#[test]
fn normalization_rules() {
    check_unary("softmax", &[3, 5], |v| 2.0 * v, |g, x| g.softmax(x));
    check_unary("log_softmax", &[3, 5], |v| 2.0 * v, |g, x| g.log_softmax(x));
    check_unary("layer_norm", &[4, 6], id, |g, x| g.layer_norm(x));
    check_unary("l2_normalize", &[4, 3], id, |g, x| g.l2_normalize(x));
    check_binary("cosine_similarity", &[4, 3], &[4, 3], |g, a, b| g.cosine_similarity(a, b));
}

#[test]
fn layer_rules() {
    check_binary("conv1d_patch", &[2, 3, 8], &[5, 3, 4], |g, x, w| g.conv1d_patch(x, w));
    check_unary("embedding", &[4, 3], id, |g, t| g.embedding(t, &[1, 3, 1, 0]));
    check_unary("dropout", &[10], id, |g, x| g.dropout(x, 0.3, &mut rng(77)));
    check_unary("attention", &[2, 3, 4], id, |g, x| {
        let k = g.scale(x, 0.7);
        let v = g.tanh(x);
        Ok(g.scaled_dot_product_attention(x, k, v, None)?.output)
    });
    check_unary("attention_masked", &[1, 4, 3], id, |g, x| {
        let mask = AttentionMask::from_fn(4, 4, |q, k| k > q);
        let v = g.square(x);
        Ok(g.scaled_dot_product_attention(x, x, v, Some(&mask))?.output)
    });
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::randn(&[2, 3, 4], &mut rng(0)), true);
    let loss = g.sum_all(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3, 4]));
}

#[test]
fn sigmoid_gradient_at_zero_weight() {
    let xd = Tensor::randn(&[5], &mut rng(1));
    let mut g = Graph::new();
    let w = g.leaf(Tensor::zeros(&[5]), true);
    let x = g.constant(xd.clone());
    let wx = g.mul(w, x).unwrap();
    let dot = g.sum_all(wx).unwrap();
    let loss = g.sigmoid(dot);
    let grads = g.backward(loss).unwrap();
    for (gw, xv) in grads.get(w).unwrap().data().iter().zip(xd.data()) {
        assert!((gw - 0.25 * xv).abs() < 1e-15);
    }
}

fn three_layer(g: &mut Graph, p: &ParamSet) -> Result<Var> {
    let x = g.constant(Tensor::randn(&[4, 3], &mut rng(999)));
    let w1 = g.param(p, "w1")?;
    let w2 = g.param(p, "w2")?;
    let w3 = g.param(p, "w3")?;
    let h = g.matmul(x, w1)?;
    let h = g.tanh(h);
    let h = g.matmul(h, w2)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w3)?;
    let h = g.log_softmax(h)?;
    let s = g.mean_all(h)?;
    Ok(g.neg(s))
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut p = ParamSet::new();
        p.insert("w1", Tensor::randn(&[3, 6], &mut r));
        p.insert("w2", Tensor::randn(&[6, 5], &mut r));
        p.insert("w3", Tensor::randn(&[5, 4], &mut r));
        let report = param_grad_check(&p, three_layer, EPS, None).unwrap();
        assert_eq!(report.checked, 18 + 30 + 20);
        assert!(report.max_rel_error <= TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn half_squared_norm_has_identity_gradient() {
    let x = Tensor::randn(&[7], &mut rng(2));
    let err = finite_diff_check(
        |g, x| {
            let s = g.squared_l2(x)?;
            Ok(g.scale(s, 0.5))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3]), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalar(_))));
}

#[test]
fn backward_is_deterministic_and_repeatable() {
    let run = || {
        let mut r = rng(42);
        let mut p = ParamSet::new();
        p.insert("w1", Tensor::randn(&[3, 6], &mut r));
        p.insert("w2", Tensor::randn(&[6, 5], &mut r));
        p.insert("w3", Tensor::randn(&[5, 4], &mut r));
        let mut g = Graph::new();
        let loss = three_layer(&mut g, &p).unwrap();
        let first = g.backward(loss).unwrap().for_params(&p);
        let second = g.backward(loss).unwrap().for_params(&p);
        assert_eq!(first, second);
        first
    };
    let a = run();
    let b = run();
    for (name, ga) in &a {
        let bits_a: Vec<u64> = ga.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b[name].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{name}");
        assert!(ga.is_finite());
    }
}

#[test]
fn shared_parameter_accumulates_gradient() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::from_vec(vec![2.0]));
    let mut g = Graph::new();
    let w1 = g.param(&p, "w").unwrap();
    let w2 = g.param(&p, "w").unwrap();
    assert_eq!(w1, w2);
    let y = g.mul(w1, w2).unwrap();
    let loss = g.sum_all(y).unwrap();
    let grads = g.backward(loss).unwrap().for_params(&p);
    assert_eq!(grads["w"].data(), &[4.0]);
}
