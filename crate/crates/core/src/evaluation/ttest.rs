//! Two-sided unpaired Student's t-test with pooled variance.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// Student statistic; `±inf` when the pooled variance is zero and the
    /// means differ. Serialized as the string `"inf"` / `"-inf"` then.
    #[serde(with = "signed_infinity")]
    pub t: f64,
    pub df: usize,
    /// Two-sided p-value.
    pub p: f64,
}

mod signed_infinity {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float `{other}`"))),
            },
        }
    }
}

/// Sums run over a sorted copy so that the result depends only on the
/// multiset of values.
fn mean_and_ss(x: &[f64]) -> (f64, f64) {
    let mut x = x.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, ss)
}

pub fn ttest_two_sided(x: &[f64], y: &[f64]) -> Result<TTestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::contract(format!(
            "t-test needs at least two observations per sample, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::contract("t-test samples must be finite"));
    }
    let (mx, ssx) = mean_and_ss(x);
    let (my, ssy) = mean_and_ss(y);
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let df = x.len() + y.len() - 2;
    let pooled = (ssx + ssy) / df as f64;
    let diff = mx - my;
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0 }
        } else {
            TTestResult {
                t: f64::INFINITY.copysign(diff),
                df,
                p: 0.0,
            }
        });
    }
    let t = diff / (pooled * (1.0 / nx + 1.0 / ny)).sqrt();
    Ok(TTestResult {
        t,
        df,
        p: student_t_two_sided_p(t, df as f64),
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let t2 = t * t;
    let x = df / (df + t2);
    let y = t2 / (df + t2);
    regularized_incomplete_beta_split(df / 2.0, 0.5, x, y).clamp(0.0, 1.0)
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    regularized_incomplete_beta_split(a, b, x, 1.0 - x)
}

/// `I_x(a, b)` with `y = 1 - x` supplied by the caller, so that arguments
/// close to one keep their precision.
fn regularized_incomplete_beta_split(a: f64, b: f64, x: f64, y: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, y) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    const MAX_TERMS: usize = 100_000;

    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=MAX_TERMS {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + even * d);
        c = guard(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + odd * d);
        c = guard(1.0 + odd / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let x = [0.2, 0.4, 0.9];
        let r = ttest_two_sided(&x, &x).unwrap();
        assert_eq!((r.t, r.df, r.p), (0.0, 4, 1.0));
    }

    #[test]
    fn shifted_samples() {
        let r = ttest_two_sided(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((r.t + 1.0).abs() < 1e-12);
        assert_eq!(r.df, 8);
        assert!((r.p - 0.3466).abs() < 1e-4);
        let s = ttest_two_sided(&[2.0, 3.0, 4.0, 5.0, 6.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn degenerate_variance() {
        let r = ttest_two_sided(&[0.0, 0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((r.t, r.p), (f64::NEG_INFINITY, 0.0));
        let r = ttest_two_sided(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
    }

    #[test]
    fn infinite_statistic_survives_json() {
        let r = ttest_two_sided(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<TTestResult>(&text).unwrap(), r);
    }

    #[test]
    fn too_small() {
        assert!(ttest_two_sided(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn closed_forms() {
        // df = 1 is Cauchy: p = 1 - 2 atan(|t|) / pi
        for t in [0.1f64, 0.5, 1.0, 3.0, 20.0] {
            let expected = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_two_sided_p(t, 1.0) - expected).abs() < 1e-13);
        }
        // df = 2: p = 1 - |t| / sqrt(2 + t^2)
        for t in [0.1f64, 0.5, 1.0, 3.0, 20.0] {
            let expected = 1.0 - t / (2.0 + t * t).sqrt();
            assert!((student_t_two_sided_p(t, 2.0) - expected).abs() < 1e-13);
        }
        // I_x(1, 1) = x
        assert!((regularized_incomplete_beta(1.0, 1.0, 0.37) - 0.37).abs() < 1e-14);
    }

    #[test]
    fn p_decreases_with_mean_gap() {
        let base = [0.1, 0.4, 0.35, 0.8, 0.55, 0.2];
        let mut last = 1.1;
        for k in 0..20 {
            let shifted: Vec<f64> = base.iter().map(|v| v + 0.05 * k as f64).collect();
            let p = ttest_two_sided(&base, &shifted).unwrap().p;
            assert!(p < last || (k == 0 && p == 1.0));
            last = p;
        }
    }
}
