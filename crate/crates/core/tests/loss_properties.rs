use dwdr::autodiff::standardize_columns;
use dwdr::losses::{
    barlow_twins_loss, dwdr_from_rho, dwdr_loss, instance_loss, pearson_matrix, triplet_loss, DwdrConfig,
    TripletConfig, TripletVariant,
};
use dwdr::{DenseMatrix, Graph};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
}

fn pair(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = (DenseMatrix, DenseMatrix)> {
    (rows, cols).prop_flat_map(|(b, d)| (matrix(b, d), matrix(b, d)))
}

fn pop_std(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

fn min_std(x: &DenseMatrix) -> f64 {
    (0..x.cols()).map(|c| pop_std(&x.column(c))).fold(f64::INFINITY, f64::min)
}

fn non_constant(x: &DenseMatrix) -> bool {
    min_std(x) > 1e-3
}

fn rho_of(x: &DenseMatrix, y: &DenseMatrix, eps: f64) -> DenseMatrix {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(y.clone());
    let r = pearson_matrix(&mut g, a, b, eps).unwrap();
    g.value(r).clone()
}

fn dwdr_value(x: &DenseMatrix, y: &DenseMatrix, cfg: &DwdrConfig) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(y.clone());
    let l = dwdr_loss(&mut g, a, b, cfg).unwrap();
    g.scalar(l)
}

/// Pearson coefficients computed entry by entry with plain loops.
fn naive_pearson(x: &DenseMatrix, y: &DenseMatrix, eps: f64) -> DenseMatrix {
    let b = x.rows() as f64;
    DenseMatrix::from_fn(x.cols(), y.cols(), |m, n| {
        let xm = x.column(m);
        let yn = y.column(n);
        let mx = xm.iter().sum::<f64>() / b;
        let my = yn.iter().sum::<f64>() / b;
        let cov = xm.iter().zip(&yn).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / b;
        cov / ((pop_std(&xm) + eps) * (pop_std(&yn) + eps))
    })
}

/// Weighted decorrelation loss evaluated with plain loops over a given rho.
fn naive_dwdr(rho: &DenseMatrix, cfg: &DwdrConfig) -> f64 {
    let d = rho.rows();
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            let r = rho.get(i, j);
            let c = r.clamp(-1.0, 1.0);
            if i == j {
                let w1 = if cfg.gamma1 == 0.0 { 1.0 } else { ((1.0 - c) / 2.0).powf(cfg.gamma1) };
                loss += w1 * (1.0 - r).powi(2);
            } else {
                let w2 = if cfg.gamma2 == 0.0 { 1.0 } else { c.abs().powf(cfg.gamma2) };
                loss += cfg.lambda * w2 * r * r;
            }
        }
    }
    loss
}

fn cfg_with(lambda: f64, gamma1: f64, gamma2: f64) -> DwdrConfig {
    DwdrConfig { lambda, gamma1, gamma2, ..DwdrConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pearson_matches_naive_loops((x, y) in pair(2..12, 1..7)) {
        let eps = 1e-8;
        let fast = rho_of(&x, &y, eps);
        let slow = naive_pearson(&x, &y, eps);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pearson_entries_are_bounded((x, y) in pair(2..12, 1..7)) {
        prop_assume!(non_constant(&x) && non_constant(&y));
        let eps = 1e-8;
        for &v in rho_of(&x, &y, eps).data() {
            prop_assert!(v.abs() <= 1.0 + 10.0 * eps, "{v}");
        }
    }

    #[test]
    fn self_correlation_has_unit_diagonal(x in (2usize..12, 1usize..7).prop_flat_map(|(b, d)| matrix(b, d))) {
        // rho_ii = (σ / (σ + eps))², about 1 - 2·eps/σ, so the 10·eps band
        // needs σ >= 0.2.
        prop_assume!(min_std(&x) >= 0.2);
        let eps = 1e-8;
        let rho = rho_of(&x, &x, eps);
        for i in 0..rho.rows() {
            prop_assert!((rho.get(i, i) - 1.0).abs() <= 10.0 * eps);
        }
    }

    #[test]
    fn pearson_is_invariant_to_positive_affine_maps(
        (x, y) in pair(3..12, 1..6),
        scales in prop::collection::vec(0.1f64..10.0, 6),
        shifts in prop::collection::vec(-10.0f64..10.0, 6),
    ) {
        prop_assume!(min_std(&x) >= 0.1 && min_std(&y) >= 0.1);
        let moved = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| scales[c] * x.get(r, c) + shifts[c]);

        // With a negligible guard the invariance is exact up to rounding.
        let tiny = 1e-12;
        let before = rho_of(&x, &y, tiny);
        let after = rho_of(&moved, &y, tiny);
        for (a, b) in before.data().iter().zip(after.data()) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let cfg = DwdrConfig { eps: tiny, ..DwdrConfig::default() };
        prop_assert!((dwdr_value(&x, &y, &cfg) - dwdr_value(&moved, &y, &cfg)).abs() < 1e-9);

        // With the default guard, each coefficient moves by at most
        // eps·|1/σ - 1/σ'| relative to its size.
        let eps = DwdrConfig::default().eps;
        let before = rho_of(&x, &y, eps);
        let after = rho_of(&moved, &y, eps);
        let bound = eps / min_std(&x) + eps / min_std(&moved) + 1e-12;
        for (a, b) in before.data().iter().zip(after.data()) {
            prop_assert!((a - b).abs() <= bound * a.abs().max(1e-3), "{a} vs {b}, bound {bound}");
        }
    }

    #[test]
    fn dwdr_matches_naive_loops(
        (x, y) in pair(2..10, 1..6),
        lambda in 1e-4f64..1.0,
        gamma1 in 0.0f64..3.0,
        gamma2 in 0.0f64..3.0,
    ) {
        let cfg = cfg_with(lambda, gamma1, gamma2);
        let rho = rho_of(&x, &y, cfg.eps);
        let expected = naive_dwdr(&rho, &cfg);
        let got = dwdr_value(&x, &y, &cfg);
        prop_assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn dwdr_is_non_negative(
        (x, y) in pair(2..10, 1..6),
        lambda in 1e-4f64..1.0,
        gamma1 in 0.0f64..3.0,
        gamma2 in 0.0f64..3.0,
    ) {
        prop_assert!(dwdr_value(&x, &y, &cfg_with(lambda, gamma1, gamma2)) >= 0.0);
    }

    #[test]
    fn zero_gammas_reduce_to_barlow_twins((x, y) in pair(2..10, 1..6), lambda in 1e-4f64..1.0) {
        let cfg = cfg_with(lambda, 0.0, 0.0);
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.constant(y.clone());
        let rho = pearson_matrix(&mut g, a, b, cfg.eps).unwrap();
        let bt = barlow_twins_loss(&mut g, rho, lambda).unwrap();
        let dw = dwdr_loss(&mut g, a, b, &cfg).unwrap();
        prop_assert!((g.scalar(bt) - g.scalar(dw)).abs() < 1e-12);
    }

    #[test]
    fn larger_gamma2_shrinks_off_diagonal_term(
        r in -0.99f64..0.99,
        gamma in 0.0f64..4.0,
        step in 0.1f64..2.0,
    ) {
        prop_assume!(r.abs() > 1e-3);
        // One off-diagonal entry on an otherwise perfect 2x2 matrix.
        let rho = DenseMatrix::from_rows(&[vec![1.0, r], vec![0.0, 1.0]]).unwrap();
        let value = |g2: f64| {
            let mut g = Graph::new();
            let m = g.constant(rho.clone());
            let l = dwdr_from_rho(&mut g, m, &cfg_with(1.0, 1.0, g2)).unwrap();
            g.scalar(l)
        };
        prop_assert!(value(gamma + step) < value(gamma));
    }

    #[test]
    fn larger_gamma1_shrinks_diagonal_term(
        r in -0.99f64..0.99,
        gamma in 0.0f64..4.0,
        step in 0.1f64..2.0,
    ) {
        let rho = DenseMatrix::from_rows(&[vec![r]]).unwrap();
        let value = |g1: f64| {
            let mut g = Graph::new();
            let m = g.constant(rho.clone());
            let l = dwdr_from_rho(&mut g, m, &cfg_with(1.0, g1, 1.0)).unwrap();
            g.scalar(l)
        };
        prop_assert!(value(gamma + step) < value(gamma));
    }

    #[test]
    fn standardized_columns_have_zero_mean_and_unit_spread(
        x in (2usize..16, 1usize..6).prop_flat_map(|(b, d)| matrix(b, d)),
    ) {
        // The spread is σ / (σ + eps), inside the band once σ >= 0.1.
        prop_assume!(min_std(&x) >= 0.1);
        let eps = 1e-8;
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let (z, _, _) = standardize_columns(&mut g, a, eps).unwrap();
        let z = g.value(z).clone();
        for c in 0..z.cols() {
            let col = z.column(c);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            prop_assert!(mean.abs() < 1e-12, "mean {mean}");
            let s = pop_std(&col);
            prop_assert!(s >= 1.0 - 10.0 * eps && s <= 1.0 + 1e-12, "std {s}");
        }
    }

    #[test]
    fn instance_loss_matches_naive_cross_entropy(
        (z1, z2) in pair(1..8, 2..6),
        seed in any::<u64>(),
    ) {
        let (b, c) = z1.shape();
        let labels: Vec<usize> = (0..b).map(|i| ((seed >> (i % 60)) as usize + i) % c).collect();
        let ce = |z: &DenseMatrix| {
            (0..b).map(|r| {
                let row = z.row(r);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[labels[r]]
            }).sum::<f64>() / b as f64
        };
        let mut g = Graph::new();
        let a = g.constant(z1.clone());
        let bb = g.constant(z2.clone());
        let l = instance_loss(&mut g, a, bb, &labels).unwrap();
        let expected = ce(&z1) + ce(&z2);
        prop_assert!((g.scalar(l) - expected).abs() < 1e-10);
    }

    #[test]
    fn triplet_matches_naive_loops(
        (a, p) in pair(1..8, 1..5),
        shift in -2.0f64..2.0,
        margin in 0.0f64..1.0,
    ) {
        let n = a.map(|v| v * 0.7 + shift);
        let dist = |x: &DenseMatrix, y: &DenseMatrix, r: usize| {
            x.row(r).iter().zip(y.row(r)).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
        };
        for variant in [TripletVariant::HardMargin, TripletVariant::SoftMargin] {
            let cfg = TripletConfig { margin, variant };
            let expected = (0..a.rows()).map(|r| {
                let gap = dist(&a, &p, r) - dist(&a, &n, r);
                match variant {
                    TripletVariant::HardMargin => (gap + margin).max(0.0),
                    TripletVariant::SoftMargin => (1.0 + gap.exp()).ln(),
                }
            }).sum::<f64>() / a.rows() as f64;
            let mut g = Graph::new();
            let (na, np, nn) = (g.constant(a.clone()), g.constant(p.clone()), g.constant(n.clone()));
            let l = triplet_loss(&mut g, na, np, nn, &cfg).unwrap();
            prop_assert!((g.scalar(l) - expected).abs() < 1e-10);
        }
    }
}

#[test]
fn backward_twice_on_one_tape_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap());
    let y = g.param(DenseMatrix::from_rows(&[vec![0.5, 1.0], vec![2.0, -1.0]]).unwrap());
    let l = dwdr_loss(&mut g, x, y, &DwdrConfig::default()).unwrap();
    assert!(g.backward(l).is_ok());
    assert!(g.backward(l).is_err());
}
