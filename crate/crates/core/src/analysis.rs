//! Paired t-tests, training curves and study summaries.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use thiserror::Error;

use crate::math::{exp, ln, mean, sqrt, variance};
use crate::smc::StudyRow;
use crate::training::MetricRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("paired samples need equal lengths of at least 2 (got {a} and {b})")]
    Length { a: usize, b: usize },
    #[error("paired samples must be finite")]
    NonFinite,
}

/// Two equal-length samples paired by label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub labels: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self, AnalysisError> {
        if a.len() != b.len() || a.len() < 2 {
            return Err(AnalysisError::Length { a: a.len(), b: b.len() });
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
        Ok(Self {
            labels: (0..a.len()).collect(),
            a,
            b,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    /// Differences have zero variance and nonzero mean: `p = 0`.
    ZeroVariance,
    /// Every difference is zero: the statistic is undefined.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub mean_difference: f64,
    pub degenerate: Option<Degenerate>,
}

/// Paired t-test on the differences `a - b`.
pub fn paired_t_test(s: &PairedSample) -> TTest {
    let d: Vec<f64> = s.a.iter().zip(&s.b).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let v = variance(&d);
    let df = n - 1.0;
    if v == 0.0 {
        return if m == 0.0 {
            TTest {
                t: f64::NAN,
                df,
                p: f64::NAN,
                mean_difference: 0.0,
                degenerate: Some(Degenerate::Identical),
            }
        } else {
            TTest {
                t: m.signum() * f64::INFINITY,
                df,
                p: 0.0,
                mean_difference: m,
                degenerate: Some(Degenerate::ZeroVariance),
            }
        };
    }
    let t = m / sqrt(v / n);
    TTest {
        t,
        df,
        p: student_t_two_sided_p(t, df),
        mean_difference: m,
        degenerate: None,
    }
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

/// Student's t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// `I_x(a, b)` by the continued fraction (modified Lentz), using the symmetry
/// `I_x(a, b) = 1 - I_{1-x}(b, a)` where it converges faster.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * ln(x) + b * ln(1.0 - x);
    if x < (a + 1.0) / (a + b + 2.0) {
        exp(ln_front) * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - exp(ln_front) * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const TOL: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        for num in [
            m * (b - m) * x / ((a + m2 - 1.0) * (a + m2)),
            -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
            if (d * c - 1.0).abs() < TOL {
                return h;
            }
        }
    }
    h
}

/// Trailing moving average over `window` entries (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// `(iteration, rejection rate)` for every logged estimate, optionally
/// smoothed with a trailing window of `smooth` entries.
pub fn training_curve(log: &[MetricRecord], smooth: Option<usize>) -> Vec<(usize, f64)> {
    let (its, rates): (Vec<usize>, Vec<f64>) = log
        .iter()
        .filter_map(|r| r.rejection_rate.map(|v| (r.iteration, v)))
        .unzip();
    let rates = match smooth {
        Some(w) => moving_average(&rates, w),
        None => rates,
    };
    its.into_iter().zip(rates).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub n_datasets: usize,
    pub mean_var_p: f64,
    pub mean_var_q: f64,
    /// Fraction of datasets with `var_q < var_p`; ties count one half.
    pub win_fraction: f64,
    pub ties: usize,
    pub failed_p: usize,
    pub failed_q: usize,
    /// Test on the variances (`p` minus `q`).
    pub variance_test: Option<TTest>,
    /// Test on the log-variances.
    pub log_variance_test: Option<TTest>,
}

/// Aggregates the rows with finite variances under both proposals.
pub fn summarize_study(rows: &[StudyRow]) -> StudySummary {
    let usable: Vec<&StudyRow> = rows
        .iter()
        .filter(|r| r.var_p.is_finite() && r.var_q.is_finite())
        .collect();
    let vp: Vec<f64> = usable.iter().map(|r| r.var_p).collect();
    let vq: Vec<f64> = usable.iter().map(|r| r.var_q).collect();
    let ties = usable.iter().filter(|r| r.var_q == r.var_p).count();
    let wins = usable.iter().filter(|r| r.var_q < r.var_p).count();
    let win_fraction = if usable.is_empty() {
        f64::NAN
    } else {
        (wins as f64 + 0.5 * ties as f64) / usable.len() as f64
    };
    let variance_test = PairedSample::new(vp.clone(), vq.clone())
        .ok()
        .map(|s| paired_t_test(&s));
    let positive = vp.iter().chain(&vq).all(|v| *v > 0.0);
    let log_variance_test = positive
        .then(|| PairedSample::new(vp.iter().map(|v| ln(*v)).collect(), vq.iter().map(|v| ln(*v)).collect()).ok())
        .flatten()
        .map(|s| paired_t_test(&s));
    StudySummary {
        n_datasets: usable.len(),
        mean_var_p: mean(&vp),
        mean_var_q: mean(&vq),
        win_fraction,
        ties,
        failed_p: rows.iter().map(|r| r.failed_p).sum(),
        failed_q: rows.iter().map(|r| r.failed_q).sum(),
        variance_test,
        log_variance_test,
    }
}

impl StudySummary {
    /// Plain-text block.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "datasets          {}", self.n_datasets);
        let _ = writeln!(s, "mean var(L) p     {:.6}", self.mean_var_p);
        let _ = writeln!(s, "mean var(L) q     {:.6}", self.mean_var_q);
        let _ = writeln!(s, "q wins            {:.3} ({} ties)", self.win_fraction, self.ties);
        let _ = writeln!(s, "failed sweeps     p {} / q {}", self.failed_p, self.failed_q);
        for (name, t) in [
            ("variance", &self.variance_test),
            ("log-variance", &self.log_variance_test),
        ] {
            match t {
                Some(t) => {
                    let _ = writeln!(
                        s,
                        "paired t ({name}) t = {:.4}, df = {}, p = {:.3e}{}",
                        t.t,
                        t.df,
                        t.p,
                        match t.degenerate {
                            Some(Degenerate::ZeroVariance) => " [zero variance]",
                            Some(Degenerate::Identical) => " [identical samples]",
                            None => "",
                        }
                    );
                }
                None => {
                    let _ = writeln!(s, "paired t ({name}) not available");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn diffs(d: &[f64]) -> PairedSample {
        PairedSample::new(d.to_vec(), vec![0.0; d.len()]).unwrap()
    }

    #[test]
    fn identical_samples_are_flagged() {
        let s = PairedSample::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        let t = paired_t_test(&s);
        assert_eq!(t.degenerate, Some(Degenerate::Identical));
    }

    #[test]
    fn constant_nonzero_differences_give_p_zero() {
        let t = paired_t_test(&diffs(&[2.0, 2.0, 2.0]));
        assert_eq!(t.degenerate, Some(Degenerate::ZeroVariance));
        assert_eq!(t.p, 0.0);
    }

    #[test]
    fn symmetric_differences() {
        let t = paired_t_test(&diffs(&[1.0, -1.0, 1.0, -1.0]));
        assert_eq!(t.t, 0.0);
        assert!((t.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_example() {
        let t = paired_t_test(&diffs(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        assert!((t.t - 4.242_640_687).abs() < 1e-8);
        assert_eq!(t.df, 4.0);
        assert!((t.p - 0.0132).abs() < 1e-4, "{}", t.p);
    }

    #[test]
    fn cdf_matches_reference_implementation() {
        for df in [1.0, 2.0, 4.0, 9.5, 30.0, 200.0] {
            let reference = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [-30.0, -4.0, -1.0, -0.1, 0.0, 0.3, 2.0, 7.0] {
                let ours = student_t_cdf(t, df);
                let theirs = reference.cdf(t);
                assert!(
                    (ours - theirs).abs() < 1e-10 * theirs.max(1e-3),
                    "df {df}, t {t}: {ours} vs {theirs}"
                );
            }
        }
    }

    #[test]
    fn length_errors() {
        assert!(PairedSample::new(vec![1.0], vec![1.0]).is_err());
        assert!(PairedSample::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(PairedSample::new(vec![1.0, f64::NAN], vec![1.0, 2.0]).is_err());
    }

    fn record(iteration: usize, rate: Option<f64>) -> MetricRecord {
        MetricRecord {
            iteration,
            train_objective: 0.0,
            held_out_objective: None,
            rejection_rate: rate,
            grad_norm: 0.0,
        }
    }

    #[test]
    fn curves() {
        assert!(training_curve(&[], Some(10)).is_empty());
        let log: Vec<MetricRecord> = (1..=20).map(|i| record(i, Some(0.4))).collect();
        assert!(training_curve(&log, Some(10))
            .iter()
            .all(|(_, v)| (*v - 0.4).abs() < 1e-15));
        let log: Vec<MetricRecord> = (0..30)
            .map(|i| {
                record(
                    i,
                    if i % 2 == 0 {
                        Some(if i < 10 { 1.0 } else { 0.0 })
                    } else {
                        None
                    },
                )
            })
            .collect();
        let c = training_curve(&log, None);
        assert_eq!(c.len(), 15);
        assert_eq!(c[1], (2, 1.0));
    }

    #[test]
    fn step_function_smooths_to_a_ramp() {
        let mut v = vec![0.0; 20];
        v.extend(vec![1.0; 20]);
        let s = moving_average(&v, 10);
        for k in 0..=10 {
            assert!((s[19 + k] - k as f64 / 10.0).abs() < 1e-12);
        }
        assert_eq!(s[35], 1.0);
    }

    fn row(d: usize, var_p: f64, var_q: f64) -> StudyRow {
        StudyRow {
            dataset: d,
            var_p,
            var_q,
            mean_p: 0.0,
            mean_q: 0.0,
            failed_p: 0,
            failed_q: 0,
        }
    }

    #[test]
    fn study_win_fractions() {
        assert_eq!(summarize_study(&[row(0, 2.0, 1.0)]).win_fraction, 1.0);
        assert_eq!(summarize_study(&[row(0, 1.0, 2.0)]).win_fraction, 0.0);
        let s = summarize_study(&[row(0, 1.0, 1.0), row(1, 3.0, 3.0)]);
        assert_eq!((s.win_fraction, s.ties), (0.5, 2));
        let s = summarize_study(&[row(0, 2.0, 1.0), row(1, 3.0, 1.0), row(2, 1.0, 4.0)]);
        assert!((s.win_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert!(s.variance_test.is_some() && s.log_variance_test.is_some());
        assert!(s.render().contains("q wins"));
    }

    proptest! {
        #[test]
        fn exchange_flips_sign_only(a in proptest::collection::vec(-10.0..10.0f64, 3..12), seed in 0.0..1.0f64) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * seed + i as f64 * 0.37).collect();
            let ab = paired_t_test(&PairedSample::new(a.clone(), b.clone()).unwrap());
            let ba = paired_t_test(&PairedSample::new(b, a).unwrap());
            prop_assume!(ab.degenerate.is_none());
            prop_assert!((ab.t + ba.t).abs() < 1e-9 * ab.t.abs().max(1.0));
            prop_assert!((ab.p - ba.p).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab.p));
        }

        #[test]
        fn p_decreases_in_abs_t(df in 1.0..100.0f64, t1 in 0.0..20.0f64, dt in 0.0..5.0f64) {
            prop_assert!(student_t_two_sided_p(t1 + dt, df) <= student_t_two_sided_p(t1, df) + 1e-15);
        }
    }
}
