//! Loss numerics against independent brute-force oracles and analytic
//! identities. The oracles implement the objectives literally (per-pair
//! cosines, plain exponentials) with none of the production code paths.

use fkt_core::losses::{
    cosine_similarity_matrix, cross_entropy, fkt_loss, nt_xent, ContrastiveConfig, Reduction,
};
use fkt_core::rng::StreamRng;
use ndarray::Array2;
use proptest::prelude::*;

fn random_matrix(rng: &mut StreamRng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.normal())
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Literal contrastive loss: for every anchor among the 2N stacked samples,
/// the positive term uses the sibling view and the denominator sums plain
/// exponentials over all samples except the anchor itself.
fn nt_xent_oracle(za: &Array2<f64>, zb: &Array2<f64>, tau: f64, mean: bool) -> f64 {
    let n = za.nrows();
    let two_n = 2 * n;
    let row = |i: usize| -> Vec<f64> {
        if i < n {
            za.row(i).to_vec()
        } else {
            zb.row(i - n).to_vec()
        }
    };
    let mut total = 0.0;
    for anchor in 0..two_n {
        let pos = (anchor + n) % two_n;
        let numerator = (cosine(&row(anchor), &row(pos)) / tau).exp();
        let mut denom = 0.0;
        for k in 0..two_n {
            if k != anchor {
                denom += (cosine(&row(anchor), &row(k)) / tau).exp();
            }
        }
        total += -(numerator / denom).ln();
    }
    if mean {
        total / two_n as f64
    } else {
        total
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn nt_xent_matches_bruteforce_oracle_100_batches() {
    let mut rng = StreamRng::from_key(&[0x10c]);
    let taus = [0.1, 0.5, 1.0];
    for case in 0..100u64 {
        let n = 1 + (case as usize % 8);
        let d = 2 + (case as usize % 15);
        let tau = taus[case as usize % 3];
        let za = random_matrix(&mut rng, n, d);
        let zb = random_matrix(&mut rng, n, d);
        for (reduction, mean) in [(Reduction::Mean, true), (Reduction::Sum, false)] {
            let cfg = ContrastiveConfig {
                temperature: tau,
                reduction,
            };
            let ours = nt_xent(&za, &zb, &cfg).unwrap();
            let oracle = nt_xent_oracle(&za, &zb, tau, mean);
            assert!(
                rel_diff(ours, oracle) < 1e-6,
                "case {case}: n={n} d={d} tau={tau} ours={ours} oracle={oracle}"
            );
        }
    }
}

#[test]
fn nt_xent_single_pair_exactly_zero() {
    let mut rng = StreamRng::from_key(&[0x11]);
    for _ in 0..10 {
        let za = random_matrix(&mut rng, 1, 5);
        let zb = random_matrix(&mut rng, 1, 5);
        let loss = nt_xent(&za, &zb, &ContrastiveConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }
}

#[test]
fn nt_xent_high_temperature_limit() {
    // With tau huge all scaled similarities collapse to ~0, so each anchor
    // term approaches log(2N - 1); at N = 2 that is log 3.
    let mut rng = StreamRng::from_key(&[0x7a0]);
    let cfg = ContrastiveConfig {
        temperature: 1e4,
        reduction: Reduction::Mean,
    };
    for _ in 0..20 {
        let mut za = random_matrix(&mut rng, 2, 8);
        let mut zb = random_matrix(&mut rng, 2, 8);
        for mut row in za.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        for mut row in zb.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        let loss = nt_xent(&za, &zb, &cfg).unwrap();
        assert!(
            (loss - 3.0f64.ln()).abs() < 1e-3,
            "loss {loss} vs log3 {}",
            3.0f64.ln()
        );
        let oracle = nt_xent_oracle(&za, &zb, 1e4, true);
        assert!(rel_diff(loss, oracle) < 1e-6);
    }
}

#[test]
fn cosine_matrix_matches_elementwise_oracle() {
    let mut rng = StreamRng::from_key(&[0xc05]);
    let z = random_matrix(&mut rng, 6, 4);
    let sim = cosine_similarity_matrix(&z).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let expected = if i == j {
                1.0
            } else {
                cosine(&z.row(i).to_vec(), &z.row(j).to_vec())
            };
            assert!(
                (sim[[i, j]] - expected).abs() < 1e-6,
                "({i},{j}): {} vs {expected}",
                sim[[i, j]]
            );
            assert_eq!(sim[[i, j]], sim[[j, i]]);
        }
    }
}

#[test]
fn cross_entropy_matches_per_sample_oracle() {
    let mut rng = StreamRng::from_key(&[0xce0]);
    let logits = random_matrix(&mut rng, 5, 3);
    let labels = vec![0usize, 2, 1, 1, 0];
    let ours = cross_entropy(&logits, &labels).unwrap();
    // softmax then -log p_true per sample, no stability tricks
    let mut total = 0.0;
    for i in 0..5 {
        let row = logits.row(i);
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        let p_true = row[labels[i]].exp() / denom;
        total += -p_true.ln();
    }
    let oracle = total / 5.0;
    assert!(rel_diff(ours, oracle) < 1e-9, "{ours} vs {oracle}");
}

#[test]
fn cross_entropy_uniform_equals_log_c() {
    let logits = Array2::<f64>::from_elem((7, 10), 3.25);
    let labels: Vec<usize> = (0..7).map(|i| i % 10).collect();
    let loss = cross_entropy(&logits, &labels).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-9);
}

// ---------------------------------------------------------------------------
// Invariances
// ---------------------------------------------------------------------------

#[test]
fn nt_xent_invariant_under_pair_permutation() {
    let mut rng = StreamRng::from_key(&[0x9e1]);
    let cfg = ContrastiveConfig::default();
    for _ in 0..10 {
        let n = 6;
        let za = random_matrix(&mut rng, n, 5);
        let zb = random_matrix(&mut rng, n, 5);
        let base = nt_xent(&za, &zb, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pa = Array2::from_shape_fn((n, 5), |(i, j)| za[[perm[i], j]]);
        let pb = Array2::from_shape_fn((n, 5), |(i, j)| zb[[perm[i], j]]);
        let permuted = nt_xent(&pa, &pb, &cfg).unwrap();
        assert!(
            (base - permuted).abs() < 1e-9,
            "permutation changed loss: {base} vs {permuted}"
        );
    }
}

#[test]
fn nt_xent_invariant_under_view_swap() {
    let mut rng = StreamRng::from_key(&[0x9e2]);
    let cfg = ContrastiveConfig::default();
    for _ in 0..10 {
        let za = random_matrix(&mut rng, 5, 7);
        let zb = random_matrix(&mut rng, 5, 7);
        let ab = nt_xent(&za, &zb, &cfg).unwrap();
        let ba = nt_xent(&zb, &za, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-9, "swap changed loss: {ab} vs {ba}");
    }
}

#[test]
fn nt_xent_invariant_under_row_rescaling() {
    let mut rng = StreamRng::from_key(&[0x9e3]);
    let cfg = ContrastiveConfig::default();
    for _ in 0..10 {
        let n = 4;
        let za = random_matrix(&mut rng, n, 6);
        let zb = random_matrix(&mut rng, n, 6);
        let base = nt_xent(&za, &zb, &cfg).unwrap();
        let mut sa = za.clone();
        let mut sb = zb.clone();
        for i in 0..n {
            let fa = rng.uniform_in(0.1, 10.0);
            let fb = rng.uniform_in(0.1, 10.0);
            sa.row_mut(i).mapv_inplace(|v| v * fa);
            sb.row_mut(i).mapv_inplace(|v| v * fb);
        }
        let scaled = nt_xent(&sa, &sb, &cfg).unwrap();
        assert!(
            (base - scaled).abs() < 1e-9,
            "rescaling changed loss: {base} vs {scaled}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nt_xent_is_nonnegative(seed in 0u64..1_000_000, n in 1usize..6, d in 2usize..8) {
        let mut rng = StreamRng::from_key(&[seed, 0xabc]);
        let za = random_matrix(&mut rng, n, d);
        let zb = random_matrix(&mut rng, n, d);
        let loss = nt_xent(&za, &zb, &ContrastiveConfig::default()).unwrap();
        prop_assert!(loss >= 0.0, "negative loss {loss}");
    }

    #[test]
    fn fkt_is_linear_in_lambda(
        ssl in 0.0f64..10.0,
        ce in 0.0f64..10.0,
        l1 in 0.0f64..5.0,
        l2 in 0.0f64..5.0,
    ) {
        // fkt(l1) + fkt(l2) - ce == fkt(l1 + l2)
        let a = fkt_loss(ssl, ce, l1).unwrap().fkt_loss;
        let b = fkt_loss(ssl, ce, l2).unwrap().fkt_loss;
        let c = fkt_loss(ssl, ce, l1 + l2).unwrap().fkt_loss;
        prop_assert!((a + b - ce - c).abs() < 1e-9 * (1.0 + c.abs()));
    }

    #[test]
    fn cross_entropy_nonnegative(seed in 0u64..1_000_000, n in 1usize..6, c in 2usize..7) {
        let mut rng = StreamRng::from_key(&[seed, 0xdef]);
        let logits = random_matrix(&mut rng, n, c);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let loss = cross_entropy(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0);
    }
}
