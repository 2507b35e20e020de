//! Hand-evaluated examples and invariants of the graph operations.

use proptest::prelude::*;
use resonance::{Graph, PadMode, Tensor};

fn conv(x: Tensor, w: Tensor, bias: Option<Tensor>) -> Tensor {
    let mut g = Graph::new();
    let (x, w) = (g.constant(x), g.constant(w));
    let b = bias.map(|b| g.constant(b));
    let y = g.conv2d(x, w, b, 1, 0, PadMode::Zeros).unwrap();
    g.value(y).clone()
}

#[test]
fn unit_kernel_is_identity() {
    let x = Tensor::from_fn(vec![2, 1, 3, 4], |i| (i as f64 * 0.37).sin());
    let y = conv(x.clone(), Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), Some(Tensor::zeros(vec![1])));
    assert_eq!(y, x);
}

#[test]
fn diagonal_kernel_dot_product() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = conv(x, w, None);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[5.0]);
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    for c in [2, 5, 10] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, c], 4.2));
        let y = g.softmax(x, 1).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / c as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_c() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 10]));
    let l = g.cross_entropy(x, &[3]).unwrap();
    assert!((g.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
    assert!((10f64.ln() - 2.302585).abs() < 1e-6);
}

#[test]
fn losses_are_monotone_in_margin() {
    let at = |m: f64| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![m, 0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(x, &[0]).unwrap();
        let mg = g.margin_loss(x, &[0], 0.0).unwrap();
        (g.value(ce).item().unwrap(), g.value(mg).item().unwrap())
    };
    let (a, b, c) = (at(0.5), at(1.5), at(3.0));
    assert!(a.0 > b.0 && b.0 > c.0);
    assert!(a.1 < b.1 && b.1 < c.1);
}

#[test]
fn margin_is_clamped_at_kappa() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![-5.0, 1.0, 0.0]).unwrap());
    let m = g.margin_loss(x, &[0], 0.5).unwrap();
    assert_eq!(g.value(m).item().unwrap(), -0.5);
    let grad = g.backward(m).unwrap();
    assert!(grad.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.cross_entropy(a, &[0]).is_err());
    assert!(g.cross_entropy(a, &[0, 7]).is_err());
}

#[test]
fn backward_accumulates_shared_inputs() {
    // y = x*x + 3x uses x three times; dy/dx = 2x + 3.
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let y = g.add(sq, lin).unwrap();
    let s = g.sum(y);
    assert_eq!(g.backward(s).unwrap().wrt(x).unwrap().data(), &[6.0, -1.0]);
}

fn small_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(t in small_tensor()) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.softmax(x, 1).unwrap();
        let c = t.shape()[1];
        for row in g.value(y).data().chunks(c) {
            prop_assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_stay_finite(t in small_tensor(), y in 0usize..4) {
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let labels = vec![y % c; b];
        let mut g = Graph::new();
        let x = g.leaf(t);
        let ce = g.cross_entropy(x, &labels).unwrap();
        prop_assert!(g.value(ce).item().unwrap().is_finite());
        prop_assert!(g.backward(ce).unwrap().wrt(x).unwrap().all_finite());
    }

    #[test]
    fn sum_gradient_is_all_ones(t in small_tensor()) {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let s = g.sum(x);
        prop_assert!(g.backward(s).unwrap().wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
