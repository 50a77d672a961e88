//! Reductions and classical statistics shared by the estimators.
//!
//! All sums go through [`pairwise_sum`] so that results do not depend on
//! how a batch was produced, only on its contents and order.

use libm::erfc;

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation with a fixed split rule.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub sd: f64,
    pub count: usize,
}

pub fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len();
    assert!(n > 0, "mean of an empty sample");
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return MeanSe { mean, se: 0.0, sd: 0.0, count: 1 };
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    MeanSe {
        mean,
        se: (var / n as f64).sqrt(),
        sd: var.sqrt(),
        count: n,
    }
}

/// Sample covariance of two equally long sequences.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = pairwise_sum(a) / n as f64;
    let mb = pairwise_sum(b) / n as f64;
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    pairwise_sum(&prod) / (n - 1) as f64
}

/// `log(mean(exp(values)))` evaluated with a max shift, plus a delta-method
/// standard error.
pub fn log_mean_exp(values: &[f64]) -> (f64, f64) {
    let shift = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = values.iter().map(|v| (v - shift).exp()).collect();
    let m = mean_se(&scaled);
    (shift + m.mean.ln(), m.se / m.mean)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
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
    d
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0, |d: f64, (i, &x)| {
        let c = cdf(x);
        d.max((i as f64 + 1.0) / n - c).max(c - i as f64 / n)
    })
}

/// Asymptotic critical value of the KS statistic at significance `alpha`
/// for sample sizes `n` and `m` (`m = None` for the one-sample test).
pub fn ks_critical(alpha: f64, n: usize, m: Option<usize>) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    match m {
        Some(m) => c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt(),
        None => c / (n as f64).sqrt(),
    }
}

fn sorted_abs_pair_sum(sorted: &[f64]) -> f64 {
    // sum over ordered pairs (i, j) of |x_i - x_j|
    let n = sorted.len() as f64;
    let terms: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(j, x)| x * (2.0 * j as f64 - n + 1.0))
        .collect();
    2.0 * pairwise_sum(&terms)
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` between two 1-d empirical
/// measures (V-statistic), in O((n+m) log(n+m)).
pub fn energy_distance_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let mut sc: Vec<f64> = sa.iter().chain(sb.iter()).cloned().collect();
    sc.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let s_a = sorted_abs_pair_sum(&sa);
    let s_b = sorted_abs_pair_sum(&sb);
    let cross = 0.5 * (sorted_abs_pair_sum(&sc) - s_a - s_b);
    2.0 * cross / (na * nb) - s_a / (na * na) - s_b / (nb * nb)
}

/// Integrated autocorrelation time with Sokal's adaptive window (c = 5).
pub fn integrated_autocorr_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return 1.0;
    }
    let m = mean_se(series).mean;
    let centered: Vec<f64> = series.iter().map(|x| x - m).collect();
    let sq: Vec<f64> = centered.iter().map(|x| x * x).collect();
    let c0 = pairwise_sum(&sq) / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let prods: Vec<f64> = centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .collect();
        tau += 2.0 * pairwise_sum(&prods) / n as f64 / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}
