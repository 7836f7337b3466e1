//! Independent oracles and checkers used by the test and acceptance suites.
//!
//! Everything here deliberately avoids the production code paths it is used
//! to check: the Riemann CDF oracle integrates in an angular variable with a
//! fixed midpoint rule (the quadrature engine uses adaptive Gauss-Kronrod
//! panels with power substitutions), the retrieval oracle is a plain
//! full-scan loop, and the gradient checker is central finite differences.

/// Midpoint-rule CDF oracle for the integrand
/// `(1+x)^(a-1) (1-x)^(b-1) e^(c x)` on [-1, 1].
///
/// Integration runs in the angle `φ` with `x = -cos φ`, under which the
/// integrand becomes `2^(a+b-1) sin^(2a-1)(φ/2) cos^(2b-1)(φ/2) e^(c x)`:
/// bounded for all `a, b >= 1/2`, so a plain midpoint sum over `panels`
/// equal slices converges even when the original integrand is singular at
/// an endpoint. Returns the CDF at each requested threshold.
pub fn riemann_cdf(a: f64, b: f64, c: f64, thresholds: &[f64], panels: usize) -> Vec<f64> {
    assert!(a >= 0.5 && b >= 0.5, "oracle requires exponents >= 1/2");
    let h = std::f64::consts::PI / panels as f64;
    // The 2^(a+b-1) constant cancels in normalization; e^(c x) is carried
    // with an e^-c shift so sharp rates stay inside f64 range.
    let g = |phi: f64| {
        let half = 0.5 * phi;
        let x = -phi.cos();
        let mut ln = c * (x - 1.0);
        if a != 0.5 {
            ln += (2.0 * a - 1.0) * half.sin().ln();
        }
        if b != 0.5 {
            ln += (2.0 * b - 1.0) * half.cos().ln();
        }
        ln.exp()
    };
    // Midpoint values once; prefix sums give every threshold in one pass.
    let mid: Vec<f64> = (0..panels).map(|i| g((i as f64 + 0.5) * h)).collect();
    let mut prefix = Vec::with_capacity(panels + 1);
    let mut acc = 0.0;
    prefix.push(0.0);
    for v in &mid {
        acc += v;
        prefix.push(acc);
    }
    let total = acc * h;
    thresholds
        .iter()
        .map(|&t| {
            if t <= -1.0 {
                return 0.0;
            }
            if t >= 1.0 {
                return 1.0;
            }
            let phi_t = (-t).acos();
            let idx = ((phi_t / h) as usize).min(panels - 1);
            let partial = prefix[idx] * h + mid[idx] * (phi_t - idx as f64 * h);
            (partial / total).clamp(0.0, 1.0)
        })
        .collect()
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Largest relative error between two gradients, with an absolute floor so
/// coordinates where both values are ~0 do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// One item of a naive full-scan retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleHit {
    pub id: String,
    pub score: f64,
}

fn oracle_scores(items: &[(String, Vec<f64>)], query: &[f64]) -> Vec<OracleHit> {
    let mut hits: Vec<OracleHit> = items
        .iter()
        .map(|(id, emb)| {
            let mut s = 0.0;
            for (a, b) in emb.iter().zip(query) {
                s += a * b;
            }
            OracleHit {
                id: id.clone(),
                score: s,
            }
        })
        .collect();
    // Same tie rule as the index: score descending, then id ascending.
    hits.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.id.cmp(&y.id)));
    hits
}

/// Naive top-k by full scan.
pub fn naive_topk(items: &[(String, Vec<f64>)], query: &[f64], k: usize) -> Vec<OracleHit> {
    let mut hits = oracle_scores(items, query);
    hits.truncate(k.min(items.len()));
    hits
}

/// Naive score-threshold retrieval by full scan.
pub fn naive_threshold(items: &[(String, Vec<f64>)], query: &[f64], t: f64) -> Vec<OracleHit> {
    oracle_scores(items, query)
        .into_iter()
        .filter(|h| h.score >= t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_uniform_cdf() {
        let f = riemann_cdf(1.0, 1.0, 0.0, &[-0.5, 0.0, 0.5], 100_000);
        assert!((f[0] - 0.25).abs() < 1e-8);
        assert!((f[1] - 0.5).abs() < 1e-8);
        assert!((f[2] - 0.75).abs() < 1e-8);
    }

    #[test]
    fn oracle_matches_trunc_exp_closed_form() {
        let tau: f64 = 0.3;
        let t = 0.2;
        let f = riemann_cdf(1.0, 1.0, 1.0 / tau, &[t], 1_000_000)[0];
        let closed = ((t / tau).exp() - (-1.0 / tau).exp()) / ((1.0 / tau).exp() - (-1.0 / tau).exp());
        assert!((f - closed).abs() < 1e-8, "{f} vs {closed}");
    }

    #[test]
    fn finite_diff_matches_simple_quadratic() {
        let grad = finite_diff_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((grad[0] - 4.0).abs() < 1e-8);
        assert!((grad[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn naive_retrieval_tie_rule() {
        let items = vec![
            ("b".to_string(), vec![1.0, 0.0]),
            ("a".to_string(), vec![1.0, 0.0]),
            ("c".to_string(), vec![0.0, 1.0]),
        ];
        let hits = naive_topk(&items, &[1.0, 0.0], 2);
        assert_eq!(hits[0].id, "a");
        assert_eq!(hits[1].id, "b");
    }
}
