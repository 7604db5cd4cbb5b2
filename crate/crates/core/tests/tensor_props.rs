use drmc_core::tensor::{Conv3dSpec, Tape, Tensor};
use proptest::prelude::*;

fn vec_in(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(v in vec_in(1..20), scale in 0.1f32..50.0) {
        let mut t = Tape::new();
        let data: Vec<f32> = v.iter().map(|x| x * scale).collect();
        let x = t.constant(Tensor::new(&[data.len()], data).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let s: f64 = t.value(y).data().iter().map(|&p| p as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(t.value(y).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn relu_is_exact_zero_on_negatives(v in vec_in(1..50)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[v.len()], v.clone()).unwrap());
        let y = t.relu(x);
        for (&a, &b) in v.iter().zip(t.value(y).data()) {
            if a <= 0.0 {
                prop_assert_eq!(b.to_bits(), 0f32.to_bits());
            } else {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn forward_backward_is_deterministic(v in vec_in(27..28), w in vec_in(27..28)) {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(&[1, 3, 3, 3], v.clone()).unwrap().requiring_grad());
            let k = t.leaf(Tensor::new(&[1, 1, 3, 3, 3], w.clone()).unwrap().requiring_grad());
            let y = t.conv3d(x, k, None, Conv3dSpec::same(3)).unwrap();
            let y = t.gelu(y);
            let l = t.mean(y).unwrap();
            t.backward(l).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(k).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        prop_assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn sum_of_losses_backward_matches_separate_passes(v in vec_in(2..30)) {
        let n = v.len();
        let run = |joint: bool| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(&[n], v.clone()).unwrap().requiring_grad());
            let sq = t.mul(x, x).unwrap();
            let l1 = t.sum(sq);
            let g = t.gelu(x);
            let l2 = t.sum(g);
            if joint {
                let l = t.add(l1, l2).unwrap();
                t.backward(l).unwrap();
            } else {
                t.backward(l1).unwrap();
                t.backward(l2).unwrap();
            }
            t.grad(x).unwrap().to_vec()
        };
        let (a, b) = (run(true), run(false));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
        }
    }
}
