use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// A real function of time used to drive model coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFunction {
    Constant { value: f64 },
    /// `c0 + c1 sin(c2 t)`
    Sinusoid { c0: f64, c1: f64, c2: f64 },
    /// `Σ coeffs[k] t^k`
    Polynomial { coeffs: Vec<f64> },
    /// Natural cubic spline through `(t[k], values[k])`.
    Tabulated { t: Vec<f64>, values: Vec<f64> },
}

impl ScalarFunction {
    pub fn constant(value: f64) -> Self {
        ScalarFunction::Constant { value }
    }

    pub fn sinusoid(c0: f64, c1: f64, c2: f64) -> Self {
        ScalarFunction::Sinusoid { c0, c1, c2 }
    }

    pub fn linear(c0: f64, c1: f64) -> Self {
        ScalarFunction::Polynomial { coeffs: vec![c0, c1] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarFunction::Tabulated { t, values } => {
                if t.len() < 2 || t.len() != values.len() {
                    return Err(LabError::ConfigInvalid(
                        "tabulated function needs at least two (t, value) pairs of equal length".into(),
                    ));
                }
                if t.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(LabError::ConfigInvalid("tabulated times must be strictly increasing".into()));
                }
                Ok(())
            }
            ScalarFunction::Polynomial { coeffs } if coeffs.is_empty() => {
                Err(LabError::ConfigInvalid("polynomial needs at least one coefficient".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            ScalarFunction::Constant { value } => *value,
            ScalarFunction::Sinusoid { c0, c1, c2 } => c0 + c1 * (c2 * t).sin(),
            ScalarFunction::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, &a| acc * t + a),
            ScalarFunction::Tabulated { t: ts, values } => spline_eval(ts, values, t).0,
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            ScalarFunction::Constant { .. } => 0.0,
            ScalarFunction::Sinusoid { c1, c2, .. } => c1 * c2 * (c2 * t).cos(),
            ScalarFunction::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, &a)| acc * t + k as f64 * a),
            ScalarFunction::Tabulated { t: ts, values } => spline_eval(ts, values, t).1,
        }
    }
}

/// Second derivatives of the natural cubic spline (Thomas algorithm).
fn spline_moments(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 1..n - 1 {
        let h0 = t[i] - t[i - 1];
        let h1 = t[i + 1] - t[i];
        diag[i] = 2.0 * (h0 + h1);
        upper[i] = h1;
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    for i in 2..n - 1 {
        let lower = t[i] - t[i - 1];
        let f = lower / diag[i - 1];
        diag[i] -= f * upper[i - 1];
        rhs[i] -= f * rhs[i - 1];
    }
    for i in (1..n - 1).rev() {
        m[i] = (rhs[i] - upper[i] * m[i + 1]) / diag[i];
    }
    m
}

fn spline_eval(t: &[f64], y: &[f64], x: f64) -> (f64, f64) {
    let m = spline_moments(t, y);
    let n = t.len();
    let i = match t.iter().position(|&ti| ti > x) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => n - 2,
    };
    let h = t[i + 1] - t[i];
    let a = (t[i + 1] - x) / h;
    let b = (x - t[i]) / h;
    let v = a * y[i] + b * y[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0;
    let d = (y[i + 1] - y[i]) / h - (3.0 * a * a - 1.0) * h * m[i] / 6.0 + (3.0 * b * b - 1.0) * h * m[i + 1] / 6.0;
    (v, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_evaluate() {
        assert_eq!(ScalarFunction::constant(2.0).value(7.0), 2.0);
        let s = ScalarFunction::sinusoid(1.0, 0.5, 1.0);
        assert_eq!(s.value(0.0), 1.0);
        assert!((s.derivative(0.0) - 0.5).abs() < 1e-15);
        let p = ScalarFunction::linear(0.2, 0.1);
        assert!((p.value(0.5) - 0.25).abs() < 1e-15);
        assert!((p.derivative(0.3) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn spline_interpolates_nodes_and_is_exact_for_lines() {
        let t = vec![0.0, 0.3, 0.5, 1.0];
        let values: Vec<f64> = t.iter().map(|x| 0.2 + 0.1 * x).collect();
        let f = ScalarFunction::Tabulated { t: t.clone(), values: values.clone() };
        for (x, v) in t.iter().zip(values) {
            assert!((f.value(*x) - v).abs() < 1e-15);
        }
        assert!((f.value(0.77) - 0.277).abs() < 1e-15);
        assert!((f.derivative(0.41) - 0.1).abs() < 1e-14);
    }

    #[test]
    fn spline_tracks_smooth_function() {
        let t: Vec<f64> = (0..41).map(|k| k as f64 / 40.0).collect();
        let values: Vec<f64> = t.iter().map(|x| x.sin()).collect();
        let f = ScalarFunction::Tabulated { t, values };
        assert!((f.value(0.5123) - 0.5123f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn config_round_trip() {
        let s = ScalarFunction::sinusoid(1.0, 0.5, 1.0);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"kind":"sinusoid","c0":1.0,"c1":0.5,"c2":1.0}"#);
        assert_eq!(serde_json::from_str::<ScalarFunction>(&json).unwrap(), s);
    }

    #[test]
    fn invalid_tables_rejected() {
        let bad = ScalarFunction::Tabulated { t: vec![0.0, 0.0], values: vec![1.0, 2.0] };
        assert!(bad.validate().is_err());
    }
}
