//! Property tests: determinism and structural invariants of the graph.

use omni_autodiff::ops;
use omni_autodiff::{backward, Tensor};
use proptest::prelude::*;

fn pipeline(data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = data.len();
    let x = Tensor::new(data.to_vec(), vec![n], true).unwrap();
    let y = ops::tanh(&ops::scale_const(&x, 0.7).unwrap()).unwrap();
    let loss = ops::mean(&ops::square(&y).unwrap()).unwrap();
    let g = backward(&loss, &[x], false).unwrap().remove(0);
    (vec![loss.item()], g.data().to_vec())
}

proptest! {
    #[test]
    fn forward_and_backward_are_bit_deterministic(
        data in proptest::collection::vec(-3.0f64..3.0, 1..16)
    ) {
        let (l1, g1) = pipeline(&data);
        let (l2, g2) = pipeline(&data);
        prop_assert_eq!(l1[0].to_bits(), l2[0].to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn outputs_without_grad_inputs_carry_no_grad(
        data in proptest::collection::vec(-3.0f64..3.0, 1..16)
    ) {
        let n = data.len();
        let c = Tensor::constant(data, vec![n]).unwrap();
        let out = ops::tanh(&c).unwrap();
        prop_assert!(!out.requires_grad());
    }

    #[test]
    fn transpose_is_an_involution(
        rows in 1usize..5, cols in 1usize..5,
        seed in any::<u64>()
    ) {
        let mut v = Vec::with_capacity(rows * cols);
        let mut s = seed;
        for _ in 0..rows * cols {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            v.push(((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5);
        }
        let t = Tensor::constant(v.clone(), vec![rows, cols]).unwrap();
        let tt = ops::transpose(&ops::transpose(&t).unwrap()).unwrap();
        prop_assert_eq!(tt.data(), &v[..]);
    }

    #[test]
    fn sum_equals_mean_times_count(
        data in proptest::collection::vec(-3.0f64..3.0, 1..16)
    ) {
        let n = data.len();
        let t = Tensor::constant(data, vec![n]).unwrap();
        let s = ops::sum(&t).unwrap().item();
        let m = ops::mean(&t).unwrap().item();
        prop_assert!((s - m * n as f64).abs() < 1e-12);
    }
}
