//! Property tests of the spectral diagnostics, the Gram regularizer and the
//! corpus pipeline.

use collapse_core::asnc::gram_loss;
use collapse_core::corpus::{chunk, detokenize, tokenize, Source, TokenStream};
use collapse_core::metrics::{distinct_n, effective_rank, HiddenBatch};
use collapse_core::tensor::Graph;
use proptest::prelude::*;

fn matrix(rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), rows)
}

fn rank(rows: &[Vec<f64>]) -> f64 {
    effective_rank(&HiddenBatch::from_rows(rows).unwrap()).unwrap()
}

/// Rotation by `theta` in the plane of coordinates `i` and `j`.
fn rotate(rows: &[Vec<f64>], i: usize, j: usize, theta: f64) -> Vec<Vec<f64>> {
    let (s, c) = theta.sin_cos();
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            let (a, b) = (r[i], r[j]);
            r[i] = c * a - s * b;
            r[j] = s * a + c * b;
            r
        })
        .collect()
}

fn gram(rows: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let d = rows[0].len();
    let v = g.constant(vec![rows.len(), 1, d], rows.concat()).unwrap();
    let l = gram_loss(&mut g, v, None).unwrap();
    g.scalar(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_is_bounded_by_dimension(rows in matrix(12, 5)) {
        let r = rank(&rows);
        prop_assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&r), "{}", r);
    }

    #[test]
    fn rank_ignores_row_order(rows in matrix(10, 4), shift in 1usize..9) {
        let mut perm = rows.clone();
        perm.rotate_left(shift);
        prop_assert!((rank(&rows) - rank(&perm)).abs() < 1e-9);
    }

    #[test]
    fn rank_ignores_uniform_scaling(rows in matrix(10, 4), s in 0.1f64..10.0) {
        prop_assume!(rank(&rows) > 1.5);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        prop_assert!((rank(&rows) - rank(&scaled)).abs() < 1e-6);
    }

    #[test]
    fn rank_ignores_rotation(rows in matrix(10, 4), theta in 0.0f64..std::f64::consts::TAU) {
        let rot = rotate(&rotate(&rows, 0, 2, theta), 1, 3, theta * 0.7);
        prop_assert!((rank(&rows) - rank(&rot)).abs() < 1e-8);
    }

    #[test]
    fn rank_ignores_duplicated_batches(rows in matrix(8, 3)) {
        let mut doubled = rows.clone();
        doubled.extend(rows.iter().cloned());
        // Duplication rescales the covariance by (2N-2)/(2N-1)·N/(N-1) only.
        prop_assert!((rank(&rows) - rank(&doubled)).abs() < 1e-8);
    }

    #[test]
    fn gram_loss_is_bounded_and_rescaling_invariant(rows in matrix(5, 4), s in 0.1f64..50.0) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let l = gram(&rows);
        let mut scaled = rows.clone();
        scaled[2].iter_mut().for_each(|v| *v *= s);
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert!((l - gram(&scaled)).abs() < 1e-9);
    }

    #[test]
    fn distinct_n_is_a_ratio(seqs in prop::collection::vec(prop::collection::vec(0u32..5, 2..20), 1..6)) {
        let d = distinct_n(&seqs, 2).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
    }

    #[test]
    fn tokenizer_is_a_bijection_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
    }

    #[test]
    fn chunk_conserves_whole_rows(len in 1usize..500, seq in 1usize..40, cap in 1usize..30) {
        let s = TokenStream::new((0..len as u32).collect(), Source::Real);
        match chunk(&s, seq, cap) {
            Ok(d) => {
                prop_assert_eq!(d.len(), (len / seq).min(cap));
                prop_assert_eq!(d.flat(), &s.ids()[..d.len() * seq]);
            }
            Err(_) => prop_assert!(len < seq),
        }
    }
}
