//! Analytic gradients of every primitive against central differences.

use eanet_autodiff::check::{central_difference, max_relative_error};
use eanet_autodiff::{Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Weighted-sum loss so that every output element carries a distinct,
/// strictly positive upstream gradient.
fn weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0)
}

fn loss_of(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let w = tape.constant(weights(tape.shape(y)));
    let yw = tape.mul(y, w).unwrap();
    let loss = tape.sum_all(yw);
    let value = tape.value(loss).item().unwrap();
    let grads = tape.backward(loss).unwrap();
    let gs = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
    (value, gs)
}

fn max_error(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: Vec<Tensor>) -> f64 {
    let (_, analytic) = loss_of(&build, &inputs);
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let numeric = central_difference(
            |probe| {
                let mut xs = inputs.clone();
                xs[k] = probe.clone();
                loss_of(&build, &xs).0
            },
            &inputs[k],
            H,
        );
        worst = worst.max(max_relative_error(a, &numeric, 1e-8));
    }
    worst
}

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Values bounded away from zero, either sign.
fn off_zero(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec((0.1f64..1.5, any::<bool>()), n).prop_map(move |d| {
        Tensor::new(
            shape.clone(),
            d.into_iter().map(|(v, s)| if s { v } else { -v }).collect(),
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul(a in tensor(vec![3, 4], 0.5, 1.5), b in tensor(vec![4, 2], 0.5, 1.5)) {
        let e = max_error(|t, v| t.matmul(v[0], v[1]).unwrap(), vec![a, b]);
        prop_assert!(e < TOL, "rel err {e}");
    }

    #[test]
    fn batch_matmul(a in tensor(vec![2, 3, 3], 0.5, 1.5), b in tensor(vec![2, 3, 2], 0.5, 1.5)) {
        let e = max_error(|t, v| t.batch_matmul(v[0], v[1]).unwrap(), vec![a, b]);
        prop_assert!(e < TOL, "rel err {e}");
    }

    #[test]
    fn conv2d(x in tensor(vec![1, 2, 4, 3], 0.5, 1.5), k in tensor(vec![3, 2, 3, 3], 0.5, 1.5)) {
        let e = max_error(|t, v| t.conv2d(v[0], v[1]).unwrap(), vec![x, k]);
        prop_assert!(e < TOL, "rel err {e}");
    }

    #[test]
    fn conv2d_narrow_kernel(x in tensor(vec![2, 3, 5], 0.5, 1.5), k in tensor(vec![2, 2, 1, 3], 0.5, 1.5)) {
        let e = max_error(|t, v| t.conv2d(v[0], v[1]).unwrap(), vec![x, k]);
        prop_assert!(e < TOL, "rel err {e}");
    }

    #[test]
    fn add_sub_broadcast(a in tensor(vec![2, 3], -1.0, 1.0), b in tensor(vec![1, 3], -1.0, 1.0)) {
        let e = max_error(|t, v| t.add(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
        prop_assert!(e < TOL, "add rel err {e}");
        let e = max_error(|t, v| t.sub(v[0], v[1]).unwrap(), vec![a, b]);
        prop_assert!(e < TOL, "sub rel err {e}");
    }

    #[test]
    fn mul_div_broadcast(a in off_zero(vec![2, 1, 3]), b in off_zero(vec![2, 4, 1])) {
        let e = max_error(|t, v| t.mul(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
        prop_assert!(e < TOL, "mul rel err {e}");
        let e = max_error(|t, v| t.div(v[0], v[1]).unwrap(), vec![a, b]);
        prop_assert!(e < TOL, "div rel err {e}");
    }

    #[test]
    fn unary_ops(x in tensor(vec![2, 3], -1.5, 1.5), p in tensor(vec![5], 0.2, 2.0)) {
        for (name, e) in [
            ("tanh", max_error(|t, v| t.tanh(v[0]), vec![x.clone()])),
            ("sigmoid", max_error(|t, v| t.sigmoid(v[0]), vec![x.clone()])),
            ("exp", max_error(|t, v| t.exp(v[0]), vec![x.clone()])),
            ("scale", max_error(|t, v| t.scale(v[0], -1.7), vec![x.clone()])),
            ("offset", max_error(|t, v| t.add_scalar(v[0], 0.3), vec![x.clone()])),
            ("log", max_error(|t, v| t.ln(v[0]), vec![p.clone()])),
            ("clamp", max_error(|t, v| t.clamp(v[0], 0.0, 10.0), vec![p.clone()])),
        ] {
            prop_assert!(e < TOL, "{name} rel err {e}");
        }
    }

    #[test]
    fn prelu(x in off_zero(vec![3, 2]), a in tensor(vec![1], 0.05, 0.5)) {
        let e = max_error(|t, v| t.prelu(v[0], v[1]).unwrap(), vec![x, a]);
        prop_assert!(e < TOL, "rel err {e}");
    }

    #[test]
    fn reductions(x in tensor(vec![2, 3, 4], -1.0, 1.0), axis in 0usize..3, keep in any::<bool>()) {
        let e = max_error(|t, v| t.sum(v[0], axis, keep).unwrap(), vec![x.clone()]);
        prop_assert!(e < TOL, "sum rel err {e}");
        let e = max_error(|t, v| t.mean(v[0], axis, keep).unwrap(), vec![x]);
        prop_assert!(e < TOL, "mean rel err {e}");
    }

    #[test]
    fn reshape_narrow_stack(x in tensor(vec![2, 6], -1.0, 1.0), y in tensor(vec![2, 6], -1.0, 1.0)) {
        let e = max_error(|t, v| t.reshape(v[0], &[3, 4]).unwrap(), vec![x.clone()]);
        prop_assert!(e < TOL, "reshape rel err {e}");
        let e = max_error(|t, v| t.narrow(v[0], 1, 2, 3).unwrap(), vec![x.clone()]);
        prop_assert!(e < TOL, "narrow rel err {e}");
        let e = max_error(|t, v| t.stack(&[v[0], v[1]], 1).unwrap(), vec![x, y]);
        prop_assert!(e < TOL, "stack rel err {e}");
    }
}

#[test]
fn determinism_bit_identical() {
    let build = |t: &mut Tape, v: &[Var]| {
        let c = t.conv2d(v[0], v[1]).unwrap();
        t.tanh(c)
    };
    let x = Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 0.37).sin());
    let k = Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.11).cos());
    let (l1, g1) = loss_of(&build, &[x.clone(), k.clone()]);
    let (l2, g2) = loss_of(&build, &[x, k]);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
