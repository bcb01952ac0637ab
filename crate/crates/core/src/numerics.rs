//! Quadrature, interpolation, fitting and root bracketing on uniform grids.

use crate::linalg::C64;
use nalgebra::{DMatrix, SymmetricEigen};

/// Running integral `I[k] = ∫_{t_0}^{t_k} f` of uniformly sampled values.
///
/// Even indices use composite Simpson; odd indices add the first interval
/// from the quadratic through the first three samples, so every entry is
/// fourth-order accurate. Two samples fall back to the trapezoid.
pub fn cumulative_simpson_c(f: &[C64], dt: f64) -> Vec<C64> {
    let n = f.len();
    let mut out = vec![C64::new(0.0, 0.0); n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = (f[0] + f[1]) * (0.5 * dt);
        return out;
    }
    out[1] = (f[0] * 5.0 + f[1] * 8.0 - f[2]) * (dt / 12.0);
    for k in 2..n {
        out[k] = out[k - 2] + (f[k - 2] + f[k - 1] * 4.0 + f[k]) * (dt / 3.0);
    }
    out
}

pub fn cumulative_simpson(f: &[f64], dt: f64) -> Vec<f64> {
    let fc: Vec<C64> = f.iter().map(|&x| C64::new(x, 0.0)).collect();
    cumulative_simpson_c(&fc, dt).into_iter().map(|z| z.re).collect()
}

pub fn simpson(f: &[f64], dt: f64) -> f64 {
    cumulative_simpson(f, dt).last().copied().unwrap_or(0.0)
}

/// Cumulative trapezoid rule.
pub fn cumulative_trapezoid_c(f: &[C64], dt: f64) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); f.len()];
    for k in 1..f.len() {
        out[k] = out[k - 1] + (f[k - 1] + f[k]) * (0.5 * dt);
    }
    out
}

/// Uniform grid with `n` intervals on `[a, b]`.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| a + (b - a) * k as f64 / n as f64).collect()
}

/// Indices and weights of the 4-point Lagrange interpolant at `t` on a
/// uniform grid starting at `t0` with spacing `dt` and `len` points.
pub fn lagrange4(t0: f64, dt: f64, len: usize, t: f64) -> ([usize; 4], [f64; 4]) {
    assert!(len >= 4, "need at least four samples");
    let s = (t - t0) / dt;
    let base = (s.floor() as isize - 1).clamp(0, len as isize - 4) as usize;
    let mut w = [1.0; 4];
    for (i, wi) in w.iter_mut().enumerate() {
        for j in 0..4 {
            if i != j {
                *wi *= (s - (base + j) as f64) / (i as f64 - j as f64);
            }
        }
    }
    ([base, base + 1, base + 2, base + 3], w)
}

/// Least-squares line `y = slope x + intercept` with coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    LineFit { slope, intercept, r2 }
}

/// Slope of `log y` against `log x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> LineFit {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Bisection for a sign change of `f` on `[a, b]`; `None` if the signs agree.
pub fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> Option<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    while (b - a).abs() > tol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

/// Normalised Hermite functions `ψ_0..ψ_{n-1}` at `x` (all finite for |x| < 38).
pub fn hermite_functions(n: usize, x: f64) -> Vec<f64> {
    let mut psi = vec![0.0; n];
    if n == 0 {
        return psi;
    }
    psi[0] = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    if n > 1 {
        psi[1] = std::f64::consts::SQRT_2 * x * psi[0];
    }
    for k in 2..n {
        let kf = k as f64;
        psi[k] = (2.0 / kf).sqrt() * x * psi[k - 1] - ((kf - 1.0) / kf).sqrt() * psi[k - 2];
    }
    psi
}

/// Gauss–Hermite rule for `∫ f(x) dx` over the real line.
///
/// Nodes come from the Golub–Welsch eigenproblem and are polished by Newton
/// steps on `ψ_n`. The returned weights already include the factor `e^{x²}`
/// (`W_i = 1 / (n ψ_{n-1}(x_i)²)`), so `Σ W_i ψ_a(x_i) ψ_b(x_i) x_i^k` is exact
/// whenever `a + b + k < 2n`.
pub fn gauss_hermite_functions(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let psi = hermite_functions(n + 1, *x);
            // ψ_n' = sqrt(2n) ψ_{n-1} - x ψ_n
            let d = (2.0 * n as f64).sqrt() * psi[n - 1] - *x * psi[n];
            if d != 0.0 {
                *x -= psi[n] / d;
            }
        }
    }
    let weights = nodes
        .iter()
        .map(|&x| {
            let psi = hermite_functions(n, x);
            1.0 / (n as f64 * psi[n - 1] * psi[n - 1])
        })
        .collect();
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let dt = 0.1;
        let t: Vec<f64> = (0..11).map(|k| k as f64 * dt).collect();
        let f: Vec<f64> = t.iter().map(|x| 1.0 + x - 2.0 * x * x + x.powi(3)).collect();
        let cum = cumulative_simpson(&f, dt);
        for (k, &x) in t.iter().enumerate() {
            let exact = x + x * x / 2.0 - 2.0 * x.powi(3) / 3.0 + x.powi(4) / 4.0;
            // The odd-index start interval is exact only for quadratics.
            let tol = if k % 2 == 0 { 1e-14 } else { 1e-4 };
            assert!((cum[k] - exact).abs() < tol, "k={k}");
        }
    }

    #[test]
    fn cumulative_simpson_converges_fourth_order() {
        let err = |n: usize| {
            let dt = 1.0 / n as f64;
            let f: Vec<f64> = (0..=n).map(|k| (3.0 * k as f64 * dt).sin()).collect();
            let cum = cumulative_simpson(&f, dt);
            (0..=n)
                .map(|k| (cum[k] - (1.0 - (3.0 * k as f64 * dt).cos()) / 3.0).abs())
                .fold(0.0, f64::max)
        };
        let order = (err(40) / err(80)).log2();
        assert!(order > 3.7, "order {order}");
    }

    #[test]
    fn lagrange4_reproduces_cubics() {
        let t0 = 0.2;
        let dt = 0.05;
        let f = |t: f64| 2.0 - t + 3.0 * t * t * t;
        let samples: Vec<f64> = (0..10).map(|k| f(t0 + k as f64 * dt)).collect();
        for &t in &[0.2, 0.213, 0.37, 0.61, 0.65] {
            let (idx, w) = lagrange4(t0, dt, 10, t);
            let v: f64 = idx.iter().zip(w.iter()).map(|(&i, &wi)| wi * samples[i]).sum();
            assert!((v - f(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let fit = linear_fit(&x, &y);
        assert!((fit.slope - 2.5).abs() < 1e-14);
        assert!((fit.intercept + 1.0).abs() < 1e-13);
        assert!((fit.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bisect_finds_root() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-13).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        assert!(bisect(|x| x * x + 1.0, 0.0, 1.0, 1e-12).is_none());
    }

    #[test]
    fn gauss_hermite_integrates_hermite_moments() {
        let (x, w) = gauss_hermite_functions(60);
        // orthonormality of ψ_0..ψ_29
        let mut worst: f64 = 0.0;
        let psis: Vec<Vec<f64>> = x.iter().map(|&xi| hermite_functions(30, xi)).collect();
        for a in 0..30 {
            for b in 0..30 {
                let s: f64 = (0..60).map(|i| w[i] * psis[i][a] * psis[i][b]).sum();
                worst = worst.max((s - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        assert!(worst < 1e-12, "{worst}");
        // <ψ_0| x^2 |ψ_0> = 1/2
        let m2: f64 = (0..60).map(|i| w[i] * psis[i][0] * psis[i][0] * x[i] * x[i]).sum();
        assert!((m2 - 0.5).abs() < 1e-13);
    }
}
