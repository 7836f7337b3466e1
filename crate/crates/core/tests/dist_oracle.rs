//! Quadrature CDFs against an independent midpoint-rule oracle, the
//! truncated-exponential closed form, and table-inversion roundtrips.

mod common;

use cdfcut_core::dist::{
    build_cdf_table, cdf, MarginalBase, QuadratureSpec, ScoreDistribution,
};
use cdfcut_core::verify::riemann_cdf;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn beta_cdf_matches_riemann_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let thresholds = [-0.9, -0.5, -0.1, 0.2, 0.6, 0.95];
    for _ in 0..10 {
        let alpha = rng.gen_range(0.5..20.0);
        let beta = rng.gen_range(0.5..20.0);
        let dist = ScoreDistribution::beta(alpha, beta).unwrap();
        let oracle = riemann_cdf(alpha, beta, 0.0, &thresholds, 1_000_000);
        for (t, expected) in thresholds.iter().zip(oracle) {
            let got = cdf(&dist, *t).unwrap();
            assert!(
                (got - expected).abs() < 1e-5,
                "Beta({alpha:.3},{beta:.3}) at {t}: {got} vs oracle {expected}"
            );
        }
    }
}

#[test]
fn spherical_cdf_matches_riemann_oracle() {
    // The spherical marginal folds into endpoint exponents; the oracle
    // integrates the same shape in its angular variable.
    let tau = 0.1;
    let n = 24u32;
    let dist = ScoreDistribution::spherical(MarginalBase::TruncExp { tau }, n).unwrap();
    let half = (n as f64 - 1.0) / 2.0;
    let thresholds = [-0.5, 0.0, 0.3, 0.7];
    let oracle = riemann_cdf(half, half, 1.0 / tau, &thresholds, 1_000_000);
    for (t, expected) in thresholds.iter().zip(oracle) {
        let got = cdf(&dist, *t).unwrap();
        assert!(
            (got - expected).abs() < 1e-5,
            "at {t}: {got} vs oracle {expected}"
        );
    }
}

#[test]
fn trunc_exp_closed_form_matches_quadrature_to_1e8() {
    // The spherical marginal at n = 3 integrates the identical density by
    // quadrature, while the plain variant uses the closed form.
    for tau in [0.02, 0.05, 0.3, 1.0, 10.0] {
        let closed = ScoreDistribution::trunc_exp(tau).unwrap();
        let quad = ScoreDistribution::spherical(MarginalBase::TruncExp { tau }, 3).unwrap();
        for t in [-0.99, -0.5, 0.0, 0.4, 0.9, 0.999] {
            let a = cdf(&closed, t).unwrap();
            let b = cdf(&quad, t).unwrap();
            assert!((a - b).abs() < 1e-8, "tau={tau} t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn spherical_at_n3_collapses_to_base_beta() {
    let base = ScoreDistribution::beta(2.5, 0.8).unwrap();
    let marginal = ScoreDistribution::spherical(
        MarginalBase::Beta {
            alpha: 2.5,
            beta: 0.8,
        },
        3,
    )
    .unwrap();
    for t in [-0.8, -0.2, 0.3, 0.77] {
        let a = cdf(&base, t).unwrap();
        let b = cdf(&marginal, t).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cdf_is_monotone(
        alpha in 0.5f64..20.0,
        beta in 0.5f64..20.0,
        t1 in -1.0f64..1.0,
        t2 in -1.0f64..1.0,
    ) {
        let dist = ScoreDistribution::beta(alpha, beta).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = cdf(&dist, lo).unwrap();
        let b = cdf(&dist, hi).unwrap();
        prop_assert!(a <= b + 1e-12, "F({lo})={a} > F({hi})={b}");
    }

    // The 2e-3 roundtrip bound presumes a bounded density: with both
    // endpoint exponents >= 1 the interpolation error is O(grid step).
    // That covers everything the cutoff machinery inverts.
    #[test]
    fn inverse_roundtrip_within_grid_resolution(
        alpha in 1.0f64..50.0,
        beta in 1.0f64..20.0,
        p in 0.001f64..0.999,
    ) {
        let dist = ScoreDistribution::beta(alpha, beta).unwrap();
        let table = build_cdf_table(&dist).unwrap();
        let t = table.inverse(p).unwrap();
        let back = cdf(&dist, t).unwrap();
        prop_assert!((back - p).abs() <= 2e-3, "p={p} t={t} back={back}");
    }

    // Endpoint-singular densities (exponent < 1) put large probability mass
    // inside the outermost grid cells, where a linear table cannot resolve
    // the square-root-shaped CDF; the bound still holds away from the
    // singular tails.
    #[test]
    fn inverse_roundtrip_interior_quantiles_singular_densities(
        alpha in 0.5f64..20.0,
        beta in 0.5f64..20.0,
        p in 0.2f64..0.8,
    ) {
        let dist = ScoreDistribution::beta(alpha, beta).unwrap();
        let table = build_cdf_table(&dist).unwrap();
        let t = table.inverse(p).unwrap();
        let back = cdf(&dist, t).unwrap();
        prop_assert!((back - p).abs() <= 2e-3, "p={p} t={t} back={back}");
    }

    #[test]
    fn trunc_exp_inverse_roundtrip(tau in 0.02f64..2.0, p in 0.001f64..0.999) {
        let dist = ScoreDistribution::trunc_exp(tau).unwrap();
        let table = build_cdf_table(&dist).unwrap();
        let t = table.inverse(p).unwrap();
        let back = cdf(&dist, t).unwrap();
        prop_assert!((back - p).abs() <= 2e-3, "tau={tau} p={p} back={back}");
    }
}

#[test]
fn fixed_panel_method_agrees_with_adaptive() {
    let dist = ScoreDistribution::beta(4.0, 2.5).unwrap();
    let spec = QuadratureSpec {
        method: cdfcut_core::dist::QuadMethod::FixedPanel { panels: 256 },
        ..QuadratureSpec::default()
    };
    for t in [-0.4, 0.1, 0.8] {
        let a = cdfcut_core::dist::cdf_with(&dist, t, &spec).unwrap();
        let b = cdf(&dist, t).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}
