//! Property-based invariants for tensor ops.

use proptest::prelude::*;

use ueidg_nn::{scaled_dot_attention, Tensor};

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-20.0..20.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(data in finite_vec(12)) {
        let y = Tensor::new(3, 4, data).softmax_rows().to_vec();
        for r in 0..3 {
            let row = &y[r * 4..(r + 1) * 4];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn attention_stays_in_value_hull(
        q in finite_vec(6),
        k in finite_vec(8),
        v in finite_vec(8),
    ) {
        let q = Tensor::new(3, 2, q);
        let k = Tensor::new(4, 2, k);
        let vt = Tensor::new(4, 2, v.clone());
        let out = scaled_dot_attention(&q, &k, &vt).to_vec();
        for c in 0..2 {
            let lo = (0..4).map(|r| v[r * 2 + c]).fold(f64::INFINITY, f64::min);
            let hi = (0..4).map(|r| v[r * 2 + c]).fold(f64::NEG_INFINITY, f64::max);
            for r in 0..3 {
                prop_assert!(out[r * 2 + c] >= lo - 1e-9);
                prop_assert!(out[r * 2 + c] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_centers_and_scales(data in finite_vec(10)) {
        // Skip near-constant rows where eps dominates the variance.
        let gamma = Tensor::new(1, 5, vec![1.0; 5]);
        let beta = Tensor::new(1, 5, vec![0.0; 5]);
        let x = Tensor::new(2, 5, data.clone());
        let y = x.layer_norm(&gamma, &beta, 1e-12).to_vec();
        for r in 0..2 {
            let row_in = &data[r * 5..(r + 1) * 5];
            let spread = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - row_in.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread < 1e-3 {
                continue;
            }
            let row = &y[r * 5..(r + 1) * 5];
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn transpose_is_an_involution(data in finite_vec(12)) {
        let x = Tensor::new(3, 4, data.clone());
        prop_assert_eq!(x.transpose().transpose().to_vec(), data);
    }

    #[test]
    fn slice_concat_round_trip(data in finite_vec(12)) {
        let x = Tensor::new(3, 4, data.clone());
        let left = x.slice_cols(0, 2);
        let right = x.slice_cols(2, 4);
        let back = Tensor::concat_cols(&[left, right]);
        prop_assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn softmax_preserves_row_order(data in finite_vec(5)) {
        // Softmax is monotone: larger logits map to larger probabilities.
        let x = Tensor::new(1, 5, data.clone());
        let y = x.softmax_rows().to_vec();
        for i in 0..5 {
            for j in 0..5 {
                if data[i] > data[j] {
                    prop_assert!(y[i] >= y[j]);
                }
            }
        }
    }
}

#[test]
fn gather_gradient_counts_row_usage() {
    let x = Tensor::param(3, 2, vec![0.0; 6]);
    let loss = x.gather_rows(&[1, 1, 2]).sum_all();
    ueidg_nn::backward(&loss).unwrap();
    // Row 0 unused, row 1 used twice, row 2 once.
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
}
