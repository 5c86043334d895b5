//! Two-sample tests and run summaries.

use serde::Serialize;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
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

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Result for a zero standard error: no evidence when the means agree,
/// certainty when they differ.
fn degenerate(diff: f64) -> (f64, f64) {
    if diff == 0.0 {
        (0.0, 1.0)
    } else {
        (diff.signum() * f64::INFINITY, 0.0)
    }
}

/// Welch's unequal-variance t-test of `mean(a) − mean(b)`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Usage(format!(
            "Welch test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (qa, qb) = (sample_var(a, ma) / a.len() as f64, sample_var(b, mb) / b.len() as f64);
    let se2 = qa + qb;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (statistic, df, p_value) = if se2 == 0.0 {
        let (t, p) = degenerate(ma - mb);
        (t, na + nb - 2.0, p)
    } else {
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
        (t, df, student_t_two_sided(t, df))
    };
    Ok(TestResult { statistic, df, p_value, mean_a: ma, mean_b: mb, n_a: a.len(), n_b: b.len() })
}

/// Paired t-test on `a[i] − b[i]`.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Usage("paired test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&diffs);
    let n = diffs.len() as f64;
    let se = (sample_var(&diffs, md) / n).sqrt();
    let df = n - 1.0;
    let (statistic, p_value) = if se == 0.0 {
        degenerate(md)
    } else {
        let t = md / se;
        (t, student_t_two_sided(t, df))
    };
    Ok(TestResult { statistic, df, p_value, mean_a: mean(a), mean_b: mean(b), n_a: a.len(), n_b: b.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    /// Half-width of the normal-approximation 95% interval, `1.96 · se`.
    pub halfwidth: f64,
}

pub fn run_summary(values: &[f64]) -> Result<RunSummary> {
    if values.len() < 2 {
        return Err(Error::Usage(format!("run summary needs at least 2 runs, got {}", values.len())));
    }
    let m = mean(values);
    let sd = sample_var(values, m).sqrt();
    let se = sd / (values.len() as f64).sqrt();
    Ok(RunSummary { n: values.len(), mean: m, sd, se, halfwidth: 1.96 * se })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(0.1) - 2.252_712_651_734_206).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_known_values() {
        // df = 1 is Cauchy: P(|T| > 1) = 0.5
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-13);
        // df = 2 closed form: p = 1 − t / sqrt(2 + t²)
        for t in [0.3, 1.0, 2.5, 7.0] {
            let exact = 1.0 - t / (2.0f64 + t * t).sqrt();
            assert!((student_t_two_sided(t, 2.0) - exact).abs() < 1e-13);
        }
        assert_eq!(student_t_two_sided(0.0, 5.0), 1.0);
    }

    #[test]
    fn welch_separated_groups() {
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[10.0, 11.0, 12.0, 13.0, 14.0]).unwrap();
        assert!((r.statistic - (-9.0)).abs() < 1e-12);
        assert!((r.df - 8.0).abs() < 1e-12);
        assert!(r.p_value < 1e-4);
    }

    #[test]
    fn welch_zero_variance() {
        let r = welch_t(&[3.0, 3.0], &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = welch_t(&[4.0, 4.0], &[3.0, 3.0]).unwrap();
        assert_eq!((r.statistic, r.p_value), (f64::INFINITY, 0.0));
        assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn paired_examples() {
        let r = paired_t(&[2.0, 3.0, 4.0], &[1.0, 1.0, 1.0]).unwrap();
        // diffs 1,2,3: mean 2, sd 1, t = 2·sqrt(3)
        assert!((r.statistic - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 2.0);
        let r = paired_t(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!((r.statistic, r.p_value), (f64::INFINITY, 0.0));
        assert!(matches!(paired_t(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn run_summary_examples() {
        let s = run_summary(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert!((s.sd - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((s.se - (0.5f64).sqrt()).abs() < 1e-15);
        let s = run_summary(&[0.0, 2.0, 0.0, 2.0]).unwrap();
        // sd = sqrt(4/3), se = sd/2
        assert!((s.halfwidth - 1.96 * (4.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert!(run_summary(&[1.0]).is_err());
    }
}
