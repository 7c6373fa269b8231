//! Independent reference implementations used by the integration suites.
//! Everything here deliberately avoids the code paths it is used to check.

/// Exact 1-D optimal transport cost between two equally-weighted empirical
/// distributions, solved as a transportation problem: each distribution is
/// expanded into `n_a · n_b` unit point masses and matched in sorted order,
/// which is the optimal coupling for a convex cost on the line.
pub fn transport_lp_wasserstein(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut ua: Vec<f64> = a
        .iter()
        .flat_map(|&x| std::iter::repeat_n(x, b.len()))
        .collect();
    let mut ub: Vec<f64> = b
        .iter()
        .flat_map(|&x| std::iter::repeat_n(x, a.len()))
        .collect();
    ua.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ub.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let units = ua.len() as f64;
    ua.iter()
        .zip(&ub)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / units
}

/// Spearman correlation by the tie-free rank-difference formula
/// 1 − 6·Σd²/(n(n²−1)). Callers must pass tie-free data.
pub fn spearman_rank_formula(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let rank = |v: &[f64]| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut ranks = vec![0usize; n];
        for (r, &i) in order.iter().enumerate() {
            ranks[i] = r + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let d2: f64 = rx
        .iter()
        .zip(&ry)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let nf = n as f64;
    1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0))
}

/// Two-sided Student-t tail probability by direct numerical quadrature of the
/// unnormalized density (1 + x²/df)^(−(df+1)/2), substituting x = tan θ to
/// make both integrals finite. No gamma functions, no continued fractions.
pub fn student_t_p_quadrature(t: f64, df: f64) -> f64 {
    let g = |theta: f64| -> f64 {
        let x = theta.tan();
        let sec2 = 1.0 + x * x;
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) * sec2
    };
    let simpson = |lo: f64, hi: f64| -> f64 {
        let n = 20_000; // even
        let h = (hi - lo) / n as f64;
        let mut acc = g(lo) + g(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * g(lo + i as f64 * h);
        }
        acc * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    let tail = simpson(t.abs().atan(), half);
    let full = simpson(0.0, half);
    (tail / full).clamp(0.0, 1.0)
}

/// Pooled-variance t statistic recomputed from first principles.
pub fn pooled_t_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let df = (a.len() + b.len() - 2) as f64;
    let pooled = (ss(a, ma) + ss(b, mb)) / df;
    (ma - mb) / (pooled * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt()
}

/// Scalar-logit steering loop: how many δ·s increments lift the logit to the
/// τ threshold.
pub fn scalar_steering_steps(logit0: f64, scale: f64, delta: f64, tau: f64) -> usize {
    let mut logit = logit0;
    let mut steps = 0usize;
    while 1.0 / (1.0 + (-logit).exp()) < tau {
        logit += delta * scale;
        steps += 1;
        assert!(steps < 1_000_000, "oracle runaway");
    }
    steps
}
