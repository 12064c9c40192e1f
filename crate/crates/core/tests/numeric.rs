use std::sync::Arc;

use mogen_core::numeric::{
    grad_check, read_tensors, relative_error, write_tensors, AttentionMask, Graph, Tensor, Var,
};
use mogen_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randm(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(rows, cols, 1.0, &mut rng(seed))
}

#[test]
fn matmul_identity_is_noop() {
    let a = randm(4, 3, 1);
    let mut g = Graph::new();
    let va = g.leaf(a.clone());
    let vi = g.leaf(Tensor::identity(3));
    let out = g.matmul(va, vi).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn row_softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::randn(5, 7, 10.0, &mut rng(2)));
    let y = g.row_softmax(x).unwrap();
    for r in 0..5 {
        let s: f64 = g.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "row {r} sums to {s}");
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn mlp_matches_straight_line_reevaluation() {
    let x = randm(3, 4, 3);
    let w1 = randm(4, 6, 4);
    let b1 = randm(1, 6, 5);
    let w2 = randm(6, 2, 6);

    let mut g = Graph::new();
    let (vx, vw1, vb1, vw2) = (g.leaf(x.clone()), g.leaf(w1.clone()), g.leaf(b1.clone()), g.leaf(w2.clone()));
    let h = g.matmul(vx, vw1).unwrap();
    let h = g.add_row(h, vb1).unwrap();
    let h = g.gelu(h).unwrap();
    let y = g.matmul(h, vw2).unwrap();

    for i in 0..3 {
        for o in 0..2 {
            let mut acc = 0.0;
            for j in 0..6 {
                let mut pre = b1.get(0, j);
                for k in 0..4 {
                    pre += x.get(i, k) * w1.get(k, j);
                }
                acc += gelu(pre) * w2.get(j, o);
            }
            assert!((g.value(y).get(i, o) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_of_sum_is_all_ones() {
    let mut g = Graph::new();
    let a = g.leaf(randm(3, 5, 7));
    let s = g.sum(a).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(&g, a).data().iter().all(|&v| v == 1.0));
}

#[test]
fn gradient_of_constant_is_zero() {
    let mut g = Graph::new();
    let a = g.leaf(randm(2, 2, 8));
    let c = g.leaf(Tensor::scalar(3.0));
    let out = g.scale(c, 2.0).unwrap();
    let grads = g.backward(out).unwrap();
    assert!(grads.get(a).is_none());
    assert!(grads.wrt(&g, a).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut g = Graph::new();
    let a = g.leaf(randm(2, 2, 9));
    let b = g.tanh(a).unwrap();
    assert!(matches!(g.backward(b), Err(Error::NonScalarOutput(_))));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.leaf(randm(2, 3, 1));
    let b = g.leaf(randm(2, 3, 2));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    let c = g.leaf(randm(3, 2, 3));
    assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(Tensor::from_f64(1, 2, &[0.0, 1.0]).unwrap());
    assert!(matches!(g.log(a), Err(Error::NonFinite { op: "log" })));
}

fn two_layer(g: &mut Graph<f64>, v: &[Var]) -> mogen_core::Result<Var> {
    let h = g.matmul(v[0], v[1])?;
    let h = g.tanh(h)?;
    let o = g.matmul(h, v[2])?;
    let o = g.sigmoid(o)?;
    g.sum(o)
}

#[test]
fn two_layer_input_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let inputs = [randm(2, 5, seed), randm(5, 8, seed + 100), randm(8, 1, seed + 200)];
        let report = grad_check(two_layer, &inputs, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn quadratic_form_passes_at_1e_6() {
    let m = randm(4, 4, 11);
    let x = randm(4, 1, 12);
    let report = grad_check(
        |g, v| {
            // x^T M x written as sum(x * (M x)).
            let mx = g.matmul(v[1], v[0])?;
            let prod = g.mul(v[0], mx)?;
            g.sum(prod)
        },
        &[x, m],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn attention_block(mask: Arc<AttentionMask>) -> impl Fn(&mut Graph<f64>, &[Var]) -> mogen_core::Result<Var> {
    move |g, v| {
        let q = g.matmul(v[0], v[1])?;
        let k = g.matmul(v[0], v[2])?;
        let a = g.masked_attention(q, k, v[0], 2, Arc::clone(&mask))?;
        let n = g.layer_norm(a, 1e-5)?;
        let w = g.mul(n, v[3])?;
        g.sum(w)
    }
}

#[test]
fn masked_attention_block_passes_at_1e_4() {
    let mask = Arc::new(AttentionMask::causal(4));
    let inputs = [randm(8, 4, 21), randm(4, 4, 22), randm(4, 4, 23), randm(8, 4, 24)];
    let report = grad_check(attention_block(mask), &inputs, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn zero_input_gradients_are_defined() {
    let inputs = [Tensor::zeros(&[2, 5]), randm(5, 8, 31), randm(8, 1, 32)];
    let report = grad_check(two_layer, &inputs, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn masked_positions_receive_exactly_zero_gradient() {
    let mask = Arc::new(AttentionMask::causal(3));
    let mut g = Graph::new();
    let x = g.leaf(randm(3, 4, 40));
    let a = g.masked_attention(x, x, x, 1, mask).unwrap();
    // Output row 0 may only depend on input row 0.
    let sel = g.leaf(Tensor::from_f64(3, 4, &[1., 1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0.]).unwrap());
    let o = g.mul(a, sel).unwrap();
    let s = g.sum(o).unwrap();
    let grads = g.backward(s).unwrap();
    let gx = grads.wrt(&g, x);
    assert!(gx.row(1).iter().chain(gx.row(2)).all(|&v| v == 0.0));
    assert!(gx.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn dag_mask_is_ancestor_closure() {
    // 0 -> 1 -> 2, 3 isolated.
    let mut adj = vec![0u8; 16];
    adj[1] = 1;
    adj[4 + 2] = 1;
    let m = AttentionMask::from_dag(4, &adj).unwrap();
    assert!(m.allows(2, 0) && m.allows(2, 1) && m.allows(2, 2));
    assert!(!m.allows(0, 2) && !m.allows(3, 0) && m.allows(3, 3));
}

/// Every primitive agrees with central differences on a random linear
/// functional of its output, across 100 seeds.
#[test]
fn primitive_jacobians_match_finite_differences() {
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> mogen_core::Result<Var>>;
    type Prim = (&'static str, Vec<(usize, usize)>, Build);
    let mask = Arc::new(AttentionMask::causal(3));
    let prims: Vec<Prim> = vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1]))),
        ("add", vec![(3, 4), (3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1]))),
        ("sub", vec![(3, 4), (3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sub(v[0], v[1]))),
        ("mul", vec![(3, 4), (3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mul(v[0], v[1]))),
        ("add_row", vec![(3, 4), (1, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add_row(v[0], v[1]))),
        ("mul_row", vec![(3, 4), (1, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mul_row(v[0], v[1]))),
        ("scale", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.scale(v[0], -1.7))),
        ("repeat_rows", vec![(2, 3)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.repeat_rows(v[0], 3))),
        ("segment_mean", vec![(6, 3)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.segment_mean(v[0], 3))),
        ("embedding", vec![(4, 3)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.embedding(v[0], Arc::from(vec![2, 0, 2, 3])))),
        ("row_softmax", vec![(3, 5)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.row_softmax(v[0]))),
        ("layer_norm", vec![(3, 5)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.layer_norm(v[0], 1e-5))),
        ("gelu", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.gelu(v[0]))),
        ("tanh", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.tanh(v[0]))),
        ("sigmoid", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sigmoid(v[0]))),
        ("exp", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.exp(v[0]))),
        ("square", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.square(v[0]))),
        ("log", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| {
            let s = g.square(v[0])?;
            let one = g.leaf(Tensor::full(&[3, 4], 0.5));
            let p = g.add(s, one)?;
            g.log(p)
        })),
        ("mean", vec![(3, 4)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mean(v[0]))),
        ("attention", vec![(6, 4), (6, 4), (6, 4)], Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
            g.masked_attention(v[0], v[1], v[2], 2, Arc::clone(&mask))
        })),
    ];
    for (name, shapes, build) in &prims {
        for seed in 0..100u64 {
            let mut r = rng(seed * 31 + name.len() as u64);
            let mut inputs: Vec<Tensor<f64>> =
                shapes.iter().map(|&(a, b)| Tensor::randn(a, b, 1.0, &mut r)).collect();
            // Random linear functional of the primitive output.
            let probe_seed: u64 = r.random();
            let probe = std::cell::RefCell::new(None::<Tensor<f64>>);
            let f = |g: &mut Graph<f64>, v: &[Var]| -> mogen_core::Result<Var> {
                let y = build(g, &v[..v.len() - 1])?;
                let shape = g.value(y).dims2();
                let w = probe
                    .borrow_mut()
                    .get_or_insert_with(|| Tensor::randn(shape.0, shape.1, 1.0, &mut rng(probe_seed)))
                    .clone();
                let wv = g.leaf(w);
                let p = g.mul(y, wv)?;
                g.sum(p)
            };
            inputs.push(Tensor::zeros(&[1, 1]));
            let report = grad_check(f, &inputs, 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let inputs = [randm(2, 5, 50), randm(5, 8, 51), randm(8, 1, 52)];
    let run = || {
        let mut g = Graph::new();
        let v: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = two_layer(&mut g, &v).unwrap();
        let grads = g.backward(out).unwrap();
        v.iter().map(|&x| grads.wrt(&g, x).to_vec()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn ops_do_not_mutate_inputs() {
    let a = randm(3, 3, 60);
    let mut g = Graph::new();
    let va = g.leaf(a.clone());
    let sq = g.square(va).unwrap();
    let s = g.sum(sq).unwrap();
    let _ = g.backward(s).unwrap();
    assert_eq!(g.value(va), &a);
}

#[test]
fn engine_is_generic_over_f32() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.leaf(Tensor::from_f64(2, 1, &[0.5, -0.25]).unwrap());
    let y = g.matmul(x, w).unwrap();
    let y = g.sigmoid(y).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let gw = grads.wrt(&g, w);
    // d/dw sum(sigmoid(xw)) = x^T (s(1-s))
    let s0 = 1.0 / (1.0 + (-(0.5f64 - 0.5)).exp());
    let s1 = 1.0 / (1.0 + (-(1.5f64 - 1.0)).exp());
    let expect0 = 1.0 * s0 * (1.0 - s0) + 3.0 * s1 * (1.0 - s1);
    assert!((gw.data()[0] as f64 - expect0).abs() < 1e-5);
}

#[test]
fn relative_error_uses_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!(relative_error(1.0, 1.00001) < 1e-4);
}

#[test]
fn checkpoint_container_round_trips() {
    let named = vec![
        ("a.weight".to_string(), randm(3, 2, 70)),
        ("b".to_string(), Tensor::<f64>::new(vec![4], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
    ];
    let mut buf = Vec::new();
    write_tensors(&mut buf, &named).unwrap();
    assert_eq!(&buf[..4], b"MGN1");
    let back: Vec<(String, Tensor<f64>)> = read_tensors(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 2);
    for ((n1, t1), (n2, t2)) in named.iter().zip(&back) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_tensors::<f64, _>(bad.as_slice()).is_err());
}
