//! Monte Carlo summaries and the two-sample statistics used by the
//! convergence reports.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    /// Whether `target` lies within `k` standard errors (plus a round-off
    /// allowance for exact estimates).
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se + 1e-12 * (1.0 + target.abs())
    }

    /// Combined-error comparison of two independent estimates.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        let se = self.se.hypot(other.se);
        (self.value - other.value).abs() <= k * se + 1e-12 * (1.0 + self.value.abs())
    }

    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.value - target;
        if self.se > 0.0 {
            d / self.se
        } else if d.abs() <= 1e-12 * (1.0 + target.abs()) {
            0.0
        } else {
            f64::INFINITY * d.signum()
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean with the standard error of i.i.d. draws.
pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return Estimate::new(m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Estimate::new(m, (var / n as f64).sqrt())
}

/// Mean with a batch-means standard error, for correlated (MCMC) series.
pub fn batch_means(xs: &[f64], batches: usize) -> Estimate {
    let n = xs.len();
    let batches = batches.min(n / 2).max(1);
    if batches < 2 {
        return mean_se(xs);
    }
    let size = n / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| mean(&xs[b * size..(b + 1) * size]))
        .collect();
    let se = mean_se(&means).se;
    Estimate::new(mean(xs), se.max(mean_se(xs).se))
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len().max(2) - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub residual_rms: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let dof = (n - 2.0).max(1.0);
    LinearFit {
        slope,
        intercept,
        slope_se: if sxx > 0.0 { (rss / dof / sxx).sqrt() } else { f64::INFINITY },
        residual_rms: (rss / n).sqrt(),
    }
}

/// Least-squares weights `w` with `slope = Σ w_i y_i` for abscissae `x`.
pub fn slope_weights(x: &[f64]) -> Vec<f64> {
    let mx = mean(x);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    x.iter().map(|a| (a - mx) / sxx).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    }
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let jf = f64::from(j);
        let term = sign * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` (U-statistic form
/// for the within-sample terms).
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let idx: Vec<usize> = (0..pooled.len()).collect();
    energy_from_split(&pooled, &idx, x.len())
}

fn energy_from_split(pooled: &[&[f64]], order: &[usize], nx: usize) -> f64 {
    let (xs, ys) = order.split_at(nx);
    let cross = |a: &[usize], b: &[usize]| -> f64 {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += euclid(pooled[i], pooled[j]);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let within = |a: &[usize]| -> f64 {
        if a.len() < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for (p, &i) in a.iter().enumerate() {
            for &j in &a[p + 1..] {
                s += euclid(pooled[i], pooled[j]);
            }
        }
        2.0 * s / (a.len() * (a.len() - 1)) as f64
    };
    2.0 * cross(xs, ys) - within(xs) - within(ys)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Energy-distance two-sample test with a permutation p-value.
pub fn energy_test(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    permutations: usize,
    rng: &mut impl Rng,
) -> PermutationResult {
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let observed = energy_from_split(&pooled, &order, x.len());
    let mut exceed = 0;
    for _ in 0..permutations {
        order.shuffle(rng);
        if energy_from_split(&pooled, &order, x.len()) >= observed {
            exceed += 1;
        }
    }
    PermutationResult {
        statistic: observed,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
    }
}

/// Pearson goodness-of-fit p-value for binned counts.
pub fn chi_square_p_value(observed: &[u64], expected: &[f64]) -> f64 {
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let dof = (observed.len() - 1) as f64;
    let dist = ChiSquared::new(dof).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// Nonnegative least squares for a handful of columns by enumerating
/// active sets. Returns the coefficients and the residual sum of squares.
pub fn nnls_small(columns: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let p = columns.len();
    assert!(p <= 8, "nnls_small handles at most 8 columns");
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << p) {
        let active: Vec<usize> = (0..p).filter(|i| mask & (1 << i) != 0).collect();
        let mut coef = vec![0.0; p];
        if !active.is_empty() {
            let n = y.len();
            let a = nalgebra::DMatrix::from_fn(n, active.len(), |r, c| columns[active[c]][r]);
            let b = nalgebra::DVector::from_column_slice(y);
            let Ok(sol) = a.svd(true, true).solve(&b, 1e-12) else {
                continue;
            };
            if sol.iter().any(|&v| v < 0.0) {
                continue;
            }
            for (c, &i) in active.iter().enumerate() {
                coef[i] = sol[c];
            }
        }
        let rss: f64 = y
            .iter()
            .enumerate()
            .map(|(r, &yr)| {
                let fit: f64 = (0..p).map(|i| coef[i] * columns[i][r]).sum();
                (yr - fit).powi(2)
            })
            .sum();
        if best.as_ref().is_none_or(|(_, b)| rss < *b) {
            best = Some((coef, rss));
        }
    }
    best.expect("the empty active set is always feasible")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn mean_and_standard_error() {
        let e = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        assert!((e.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ks_detects_shift_and_accepts_same_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.01);
        assert!(ks_two_sample(&a, &c).p_value < 1e-6);
    }

    #[test]
    fn ks_statistic_of_disjoint_samples_is_one() {
        let r = ks_two_sample(&[0.0, 1.0], &[5.0, 6.0, 7.0]);
        assert_eq!(r.statistic, 1.0);
    }

    #[test]
    fn energy_statistic_is_nonpositive_on_identical_sets_and_detects_shift() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!(energy_distance(&x, &x) <= 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..150)
            .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 1.0, v[1]]).collect();
        let res = energy_test(&a, &b, 99, &mut rng);
        assert!(res.p_value <= 0.02);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = linear_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14);
        let w = slope_weights(&x);
        let s: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((s - 2.0).abs() < 1e-14);
    }

    #[test]
    fn nnls_clamps_negative_coefficients() {
        let cols = vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]];
        let (c, _) = nnls_small(&cols, &[3.0, 2.0, 1.0]);
        assert!(c.iter().all(|&v| v >= 0.0));
        assert_eq!(c[1], 0.0);
        assert!((c[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_uniform_counts_pass() {
        let p = chi_square_p_value(&[100, 98, 103, 99], &[100.0; 4]);
        assert!(p > 0.9);
    }
}
