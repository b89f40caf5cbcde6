//! Interval estimators and reliability statistics: Wilson score intervals,
//! percentile bootstrap, ICC(2,k) and Pearson correlation with a Student-t
//! significance test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("sample size must be positive")]
    EmptySample,
    #[error("successes ({successes}) exceed sample size ({n})")]
    SuccessesExceedN { successes: u64, n: u64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("undefined: {0}")]
    Undefined(&'static str),
}

/// A proportion with its Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionCI {
    pub successes: u64,
    pub n: u64,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Wilson score interval for `successes / n` at normal quantile `z`.
pub fn wilson_ci(successes: u64, n: u64, z: f64) -> Result<ProportionCI, StatsError> {
    if n == 0 {
        return Err(StatsError::EmptySample);
    }
    if successes > n {
        return Err(StatsError::SuccessesExceedN { successes, n });
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let mut lo = (center - half).clamp(0.0, 1.0);
    let mut hi = (center + half).clamp(0.0, 1.0);
    // The closed form can land a few ulps inside the estimate at p = 0 or 1.
    if successes == 0 {
        lo = 0.0;
    }
    if successes == n {
        hi = 1.0;
    }
    Ok(ProportionCI {
        successes,
        n,
        estimate: p,
        lo,
        hi,
    })
}

/// Wilson interval from boolean outcomes; `None` for an empty slice.
pub fn proportion<I: IntoIterator<Item = bool>>(outcomes: I) -> Option<ProportionCI> {
    let (mut k, mut n) = (0u64, 0u64);
    for hit in outcomes {
        n += 1;
        k += hit as u64;
    }
    wilson_ci(k, n, Z_95).ok()
}

/// Linear-interpolation quantile of an ascending slice (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap over `n_units` resampled with replacement.
///
/// `statistic` receives the resampled unit indices and may return `None`
/// when the statistic is undefined on that resample; such draws are skipped.
/// Returns `None` if no resample produced a value.
pub fn bootstrap_statistic<F>(n_units: usize, resamples: usize, seed: u64, statistic: F) -> Option<(f64, f64)>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n_units == 0 || resamples == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n_units];
    let mut draws = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n_units);
        }
        if let Some(v) = statistic(&idx) {
            draws.push(v);
        }
    }
    if draws.is_empty() {
        return None;
    }
    draws.sort_by(f64::total_cmp);
    Some((quantile_sorted(&draws, 0.025), quantile_sorted(&draws, 0.975)))
}

/// 95% percentile-bootstrap interval of the mean of `values`.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64), StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if resamples == 0 {
        return Err(StatsError::TooFew {
            what: "resamples",
            needed: 1,
            got: 0,
        });
    }
    let n = values.len() as f64;
    Ok(
        bootstrap_statistic(values.len(), resamples, seed, |idx| {
            Some(idx.iter().map(|&i| values[i]).sum::<f64>() / n)
        })
        .expect("non-empty bootstrap"),
    )
}

/// Mean with a normal-approximation 95% interval (`mean ± 1.96 sd / sqrt(n)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCI {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

pub fn mean_ci(values: &[f64]) -> Result<MeanCI, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = Z_95 * sd / (n as f64).sqrt();
    Ok(MeanCI {
        mean,
        lo: mean - half,
        hi: mean + half,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub value: f64,
    pub n_items: usize,
    pub n_raters: usize,
    pub dropped_rows: usize,
    pub ms_rows: f64,
    pub ms_cols: f64,
    pub ms_error: f64,
}

/// ICC(2,k): two-way random effects, absolute agreement, average of k raters.
///
/// `ratings` is items × raters; rows with any missing cell are dropped and
/// counted.
pub fn icc2k(ratings: &[Vec<Option<f64>>]) -> Result<IccResult, StatsError> {
    let n_raters = ratings.iter().map(Vec::len).max().unwrap_or(0);
    let complete: Vec<Vec<f64>> = ratings
        .iter()
        .filter(|row| row.len() == n_raters && row.iter().all(Option::is_some))
        .map(|row| row.iter().map(|v| v.unwrap()).collect())
        .collect();
    let dropped_rows = ratings.len() - complete.len();
    let n = complete.len();
    let k = n_raters;
    if n < 2 {
        return Err(StatsError::TooFew {
            what: "complete items",
            needed: 2,
            got: n,
        });
    }
    if k < 2 {
        return Err(StatsError::TooFew {
            what: "raters",
            needed: 2,
            got: k,
        });
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = complete.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = complete.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| complete.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();
    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total = complete.iter().flatten().map(|v| (v - grand).powi(2)).sum::<f64>();
    let ss_error = (ss_total - ss_rows - ss_cols).max(0.0);
    let ms_rows = ss_rows / (nf - 1.0);
    let ms_cols = ss_cols / (kf - 1.0);
    let ms_error = ss_error / ((nf - 1.0) * (kf - 1.0));
    if ms_rows <= f64::EPSILON * ss_total.max(1.0) {
        return Err(StatsError::Undefined("zero between-item variance"));
    }
    let denom = ms_rows + (ms_cols - ms_error) / nf;
    if denom.abs() <= 1e-9 * (ms_rows + ms_cols + ms_error) {
        return Err(StatsError::Undefined("ICC denominator is zero"));
    }
    let value = (ms_rows - ms_error) / denom;
    Ok(IccResult {
        value,
        n_items: n,
        n_raters: k,
        dropped_rows,
        ms_rows,
        ms_cols,
        ms_error,
    })
}

/// Significance stars at the .05 / .01 / .001 thresholds.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub p_two_sided: f64,
    pub stars: String,
    pub n: usize,
}

/// Sample Pearson correlation with a two-sided t test on `n - 2` df.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFew {
            what: "observations",
            needed: 3,
            got: n,
        });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Undefined("zero variance"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p = pearson_p_value(r, n);
    Ok(PearsonResult {
        r,
        p_two_sided: p,
        stars: stars(p).to_string(),
        n,
    })
}

/// Two-sided p-value for correlation `r` over `n` pairs.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    student_t_two_sided_p(t, df)
}

/// P(|T| > |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(0.5 * df, 0.5, x)
}

/// Student-t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(a, b, x)) / a
    } else {
        1.0 - (ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x)) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
