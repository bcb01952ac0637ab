//! Adiabatic transport for the doubled linearisation: tracked spectral
//! projectors, Kato's generator, the intertwiner `W`, the dynamical phase,
//! the exact evolution `T^ε` and its comparison with `V^ε = W Φ^ε W⁻¹`.

use serde::Serialize;

use crate::eigenpath::EigenPath;
use crate::error::{LabError, Result};
use crate::linalg::{c, cr, expm, spectral_norm, CMat, CVec, C64, I};
use crate::linearized::{build_f, spectrum_f, BiorthogonalSpectrum};
use crate::model::Model;
use crate::numerics::{cumulative_simpson, cumulative_simpson_c, lagrange4, loglog_fit, LineFit};
use crate::propagator::{IntegratorConfig, Scheme};

/// Minimum normalised overlap `|tr(ℙ_prev ℙ_next)| / rank` between
/// consecutive grid points for a cluster to count as the same one.
pub const MIN_TRACKING_OVERLAP: f64 = 0.5;

/// Spectral data of `F` on a uniform grid, tracked cluster by cluster,
/// with Kato's generator and the intertwiner.
#[derive(Clone, Debug)]
pub struct TransportBundle {
    pub times: Vec<f64>,
    pub dt: f64,
    pub f: Vec<CMat>,
    /// `projectors[j][k] = ℙⱼ(tₖ)`
    pub projectors: Vec<Vec<CMat>>,
    /// `eigenvalues[j][k] = ℓⱼ(tₖ)` (cluster mean)
    pub eigenvalues: Vec<Vec<C64>>,
    pub kernel: Option<usize>,
    /// `K(tₖ) = i Σⱼ Ṗⱼ ℙⱼ`
    pub generator: Vec<CMat>,
    pub w: Vec<CMat>,
    pub w_inv: Vec<CMat>,
    /// `maxⱼ ‖ℙⱼ(tₖ)W(tₖ) − W(tₖ)ℙⱼ(t₀)‖`
    pub intertwining_residual: Vec<f64>,
    /// Largest admissible `|Im ℓⱼ|` for the phase construction.
    pub real_tol: f64,
}

/// Matches clusters between consecutive spectra by projector overlap
/// (ties broken by eigenvalue proximity).
pub fn track_clusters(spectra: &[BiorthogonalSpectrum]) -> Result<(Vec<Vec<CMat>>, Vec<Vec<C64>>, Option<usize>)> {
    let first = spectra.first().ok_or_else(|| LabError::InvalidParameter("no spectra to track".into()))?;
    let m = first.clusters.len();
    let mut projectors: Vec<Vec<CMat>> = first.clusters.iter().map(|c| vec![c.projector.clone()]).collect();
    let mut eigenvalues: Vec<Vec<C64>> = first.clusters.iter().map(|c| vec![c.center]).collect();
    for (k, sp) in spectra.iter().enumerate().skip(1) {
        if sp.clusters.len() != m {
            return Err(LabError::TrackingBroken { k, overlap: 0.0 });
        }
        let mut taken = vec![false; m];
        let mut candidates = Vec::with_capacity(m * m);
        for j in 0..m {
            let prev = projectors[j].last().unwrap();
            let rank = first.clusters[j].rank();
            for (c, cl) in sp.clusters.iter().enumerate() {
                if cl.rank() != rank {
                    continue;
                }
                let ov = (prev * &cl.projector).trace().norm() / rank as f64;
                let dist = (cl.center - eigenvalues[j].last().unwrap()).norm();
                candidates.push((ov, -dist, j, c));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
        let mut assigned = vec![None; m];
        for (ov, _, j, c) in candidates {
            if assigned[j].is_none() && !taken[c] {
                if ov < MIN_TRACKING_OVERLAP {
                    return Err(LabError::TrackingBroken { k, overlap: ov });
                }
                assigned[j] = Some(c);
                taken[c] = true;
            }
        }
        for j in 0..m {
            let c = assigned[j].ok_or(LabError::TrackingBroken { k, overlap: 0.0 })?;
            projectors[j].push(sp.clusters[c].projector.clone());
            eigenvalues[j].push(sp.clusters[c].center);
        }
    }
    Ok((projectors, eigenvalues, first.kernel_cluster))
}

/// Second-order finite-difference derivative of matrix samples.
fn derivative(samples: &[CMat], k: usize, dt: f64) -> CMat {
    let n = samples.len();
    if k == 0 {
        (&samples[0] * cr(-3.0) + &samples[1] * cr(4.0) - &samples[2]) / cr(2.0 * dt)
    } else if k == n - 1 {
        (&samples[n - 1] * cr(3.0) - &samples[n - 2] * cr(4.0) + &samples[n - 3]) / cr(2.0 * dt)
    } else {
        (&samples[k + 1] - &samples[k - 1]) / cr(2.0 * dt)
    }
}

fn interpolate(samples: &[CMat], t0: f64, dt: f64, t: f64) -> CMat {
    let (idx, w) = lagrange4(t0, dt, samples.len(), t);
    let mut out = &samples[idx[0]] * cr(w[0]);
    for i in 1..4 {
        out += &samples[idx[i]] * cr(w[i]);
    }
    out
}

impl TransportBundle {
    /// Builds `F` and its spectrum at every point of `path`, tracks the
    /// clusters and integrates the intertwiner.
    pub fn from_path(model: &Model, path: &EigenPath, cluster_tol: Option<f64>) -> Result<Self> {
        let mut f = Vec::with_capacity(path.len());
        let mut spectra = Vec::with_capacity(path.len());
        let mut tol: f64 = 0.0;
        for k in 0..path.len() {
            let op = build_f(model, path, k)?;
            let sp = spectrum_f(&op, cluster_tol)?;
            tol = tol.max(sp.cluster_tol);
            spectra.push(sp);
            f.push(op.f);
        }
        let (projectors, eigenvalues, kernel) = track_clusters(&spectra)?;
        Self::from_samples(path.times.clone(), f, projectors, eigenvalues, kernel, tol)
    }

    pub fn from_samples(
        times: Vec<f64>,
        f: Vec<CMat>,
        projectors: Vec<Vec<CMat>>,
        eigenvalues: Vec<Vec<C64>>,
        kernel: Option<usize>,
        real_tol: f64,
    ) -> Result<Self> {
        let len = times.len();
        if len < 4 || f.len() != len || projectors.iter().any(|p| p.len() != len) {
            return Err(LabError::InvalidParameter("transport needs at least four consistent samples".into()));
        }
        let dt = times[1] - times[0];
        let n = f[0].nrows();
        let generator: Vec<CMat> = (0..len)
            .map(|k| {
                let mut kk = CMat::zeros(n, n);
                for pj in &projectors {
                    kk += derivative(pj, k, dt) * &pj[k];
                }
                kk * I
            })
            .collect();
        // i W' = K W by classical RK4, K at half steps from cubic interpolation.
        let mut w = vec![CMat::identity(n, n)];
        let rhs = |k: &CMat, w: &CMat| -(k * w) * I;
        for s in 0..len - 1 {
            let t = times[s];
            let k_half = interpolate(&generator, times[0], dt, t + 0.5 * dt);
            let wk = &w[s];
            let k1 = rhs(&generator[s], wk);
            let k2 = rhs(&k_half, &(wk + &k1 * cr(0.5 * dt)));
            let k3 = rhs(&k_half, &(wk + &k2 * cr(0.5 * dt)));
            let k4 = rhs(&generator[s + 1], &(wk + &k3 * cr(dt)));
            w.push(wk + (k1 + k2 * cr(2.0) + k3 * cr(2.0) + k4) * cr(dt / 6.0));
        }
        let w_inv = w
            .iter()
            .map(|m| m.clone().try_inverse().ok_or(LabError::IllConditioned { index: 0, condition: f64::INFINITY }))
            .collect::<Result<Vec<_>>>()?;
        let intertwining_residual = (0..len)
            .map(|k| {
                projectors
                    .iter()
                    .map(|pj| spectral_norm(&(&pj[k] * &w[k] - &w[k] * &pj[0])))
                    .fold(0.0, f64::max)
            })
            .collect();
        Ok(TransportBundle { times, dt, f, projectors, eigenvalues, kernel, generator, w, w_inv, intertwining_residual, real_tol })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_intertwining_residual(&self) -> f64 {
        self.intertwining_residual.iter().cloned().fold(0.0, f64::max)
    }

    /// `maxₖ ‖W(tₖ)‖·‖W(tₖ)⁻¹‖`
    pub fn w_condition(&self) -> f64 {
        self.w.iter().zip(&self.w_inv).map(|(a, b)| spectral_norm(a) * spectral_norm(b)).fold(0.0, f64::max)
    }

    /// `maxⱼ ‖ℙⱼ K ℙⱼ‖` at grid index `k`; Kato's generator is block off-diagonal.
    pub fn generator_diagonal_blocks(&self, k: usize) -> f64 {
        self.projectors.iter().map(|pj| spectral_norm(&(&pj[k] * &self.generator[k] * &pj[k]))).fold(0.0, f64::max)
    }

    /// Running phases `Θⱼ(tₖ) = ∫_{t₀}^{tₖ} ℓⱼ`; the kernel's is identically zero.
    pub fn phases(&self) -> Result<Vec<Vec<f64>>> {
        let imag = self.eigenvalues.iter().flatten().map(|z| z.im.abs()).fold(0.0, f64::max);
        if imag > self.real_tol {
            return Err(LabError::NonRealEigenvaluePath { imag });
        }
        Ok(self
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(j, l)| {
                if Some(j) == self.kernel {
                    vec![0.0; l.len()]
                } else {
                    cumulative_simpson(&l.iter().map(|z| z.re).collect::<Vec<_>>(), self.dt)
                }
            })
            .collect())
    }

    /// `Φ^ε(tₖ, tₘ) = Σⱼ ℙⱼ(t₀) e^{−(i/ε)∫_{tₘ}^{tₖ} ℓⱼ}`
    pub fn dynamical_phase(&self, epsilon: f64, k: usize, m: usize) -> Result<CMat> {
        let theta = self.phases()?;
        Ok(self.phase_from(&theta, epsilon, k, m))
    }

    fn phase_from(&self, theta: &[Vec<f64>], epsilon: f64, k: usize, m: usize) -> CMat {
        let n = self.f[0].nrows();
        let mut out = CMat::zeros(n, n);
        for (j, pj) in self.projectors.iter().enumerate() {
            out += &pj[0] * c(0.0, -(theta[j][k] - theta[j][m]) / epsilon).exp();
        }
        out
    }

    /// `V^ε(tₖ, tₘ) = W(tₖ) Φ^ε(tₖ, tₘ) W(tₘ)⁻¹`
    pub fn comparison_operator(&self, epsilon: f64, k: usize, m: usize) -> Result<CMat> {
        Ok(&self.w[k] * self.dynamical_phase(epsilon, k, m)? * &self.w_inv[m])
    }

    fn f_at(&self, t: f64) -> CMat {
        interpolate(&self.f, self.times[0], self.dt, t)
    }

    fn evolve_step(&self, t: f64, h: f64, epsilon: f64, scheme: Scheme) -> CMat {
        let single = |t: f64, h: f64| expm(&(self.f_at(t + 0.5 * h) * c(0.0, -h / epsilon)));
        match scheme {
            Scheme::Midpoint => single(t, h),
            Scheme::Composition4 => {
                let c1 = 1.0 / (2.0 - 2f64.cbrt());
                let c2 = 1.0 - 2.0 * c1;
                single(t + (c1 + c2) * h, c1 * h) * single(t + c1 * h, c2 * h) * single(t, c1 * h)
            }
        }
    }

    /// `T^ε(tₖ, t₀)` for every grid point (`iε ∂ₜT = F T`), or `T^ε(tₖ, t_end)`
    /// when integrating backwards.
    pub fn true_evolution(&self, epsilon: f64, cfg: &IntegratorConfig, backward: bool) -> Result<Vec<CMat>> {
        cfg.validate()?;
        let n = self.f[0].nrows();
        let len = self.len();
        let mut out = vec![CMat::identity(n, n)];
        let m = cfg.steps_for(self.dt);
        for s in 0..len - 1 {
            let (a, b) = if backward { (self.times[len - 1 - s], self.times[len - 2 - s]) } else { (self.times[s], self.times[s + 1]) };
            let h = (b - a) / m as f64;
            let mut tm = out.last().unwrap().clone();
            for i in 0..m {
                tm = self.evolve_step(a + h * i as f64, h, epsilon, cfg.scheme) * tm;
            }
            out.push(tm);
        }
        if backward {
            out.reverse();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AdiabaticComparison {
    pub epsilon: f64,
    pub times: Vec<f64>,
    /// `‖T^ε(tₖ, t₀) − V^ε(tₖ, t₀)‖`
    pub defect: Vec<f64>,
    pub sup_defect: f64,
    /// `maxₖ ‖T^ε(tₖ, t₀)‖`
    pub uniform_bound: f64,
    /// `‖T^ε(t_end, t₀) T^ε(t₀, t_end) − I‖`
    pub inversion_residual: f64,
}

pub fn compare_adiabatic(bundle: &TransportBundle, epsilon: f64, cfg: &IntegratorConfig) -> Result<AdiabaticComparison> {
    let theta = bundle.phases()?;
    let cfg = IntegratorConfig { epsilon, ..cfg.clone() };
    let t = bundle.true_evolution(epsilon, &cfg, false)?;
    let back = bundle.true_evolution(epsilon, &cfg, true)?;
    let n = bundle.f[0].nrows();
    let last = bundle.len() - 1;
    let inversion_residual = spectral_norm(&(&t[last] * &back[0] - CMat::identity(n, n)));
    let defect: Vec<f64> = (0..bundle.len())
        .map(|k| {
            let v = &bundle.w[k] * bundle.phase_from(&theta, epsilon, k, 0) * &bundle.w_inv[0];
            spectral_norm(&(&t[k] - v))
        })
        .collect();
    Ok(AdiabaticComparison {
        epsilon,
        times: bundle.times.clone(),
        sup_defect: defect.iter().cloned().fold(0.0, f64::max),
        defect,
        uniform_bound: t.iter().map(spectral_norm).fold(0.0, f64::max),
        inversion_residual,
    })
}

/// Sweep summary: `log(sup defect)` against `log ε`.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonSweep {
    pub runs: Vec<AdiabaticComparison>,
    pub order: LineFit,
    /// `(max − min)/max` of the uniform bounds across the sweep.
    pub bound_variation: f64,
}

pub fn compare_sweep(bundle: &TransportBundle, eps_list: &[f64], cfg: &IntegratorConfig) -> Result<ComparisonSweep> {
    let runs = eps_list.iter().map(|&e| compare_adiabatic(bundle, e, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(summarise(runs))
}

pub fn summarise(runs: Vec<AdiabaticComparison>) -> ComparisonSweep {
    let eps: Vec<f64> = runs.iter().map(|r| r.epsilon).collect();
    let sup: Vec<f64> = runs.iter().map(|r| r.sup_defect).collect();
    let bounds: Vec<f64> = runs.iter().map(|r| r.uniform_bound).collect();
    let hi = bounds.iter().cloned().fold(f64::MIN, f64::max);
    let lo = bounds.iter().cloned().fold(f64::MAX, f64::min);
    ComparisonSweep { order: loglog_fit(&eps, &sup), bound_variation: (hi - lo) / hi, runs }
}

#[derive(Clone, Debug, Serialize)]
pub struct SourceIntegral {
    pub epsilon: f64,
    /// `‖∫_{t₀}^{tₖ} V^ε(tₖ, s) χ(s) ds‖`
    pub norms: Vec<f64>,
    pub sup: f64,
}

/// The forcing `χ = (ω̇, conj ω̇)` along the path, optionally with the kernel
/// component `ℙ₀(s)(ω, ω̄)` injected as a negative control.
pub fn source_term(bundle: &TransportBundle, path: &EigenPath, inject_kernel: bool) -> Result<Vec<CVec>> {
    let dots = path.omega_dot();
    let n = path.omega[0].len();
    let mut out = Vec::with_capacity(path.len());
    for k in 0..path.len() {
        let d = &dots[k];
        let mut chi = CVec::from_fn(2 * n, |i, _| if i < n { d[i] } else { d[i - n].conj() });
        if inject_kernel {
            let kernel = bundle.kernel.ok_or_else(|| LabError::InvalidParameter("no kernel cluster".into()))?;
            let w = &path.omega[k];
            let ww = CVec::from_fn(2 * n, |i, _| if i < n { w[i] } else { w[i - n].conj() });
            chi += &bundle.projectors[kernel][k] * ww;
        }
        out.push(chi);
    }
    Ok(out)
}

/// `I(tₖ) = W(tₖ) Σⱼ e^{−iΘⱼ(tₖ)/ε} ∫ e^{iΘⱼ(s)/ε} ℙⱼ(t₀) W(s)⁻¹ χ(s) ds`,
/// which equals `∫ V^ε(tₖ, s) χ(s) ds` and needs one cumulative integral per cluster.
pub fn source_integral(bundle: &TransportBundle, chi: &[CVec], epsilon: f64) -> Result<SourceIntegral> {
    if chi.len() != bundle.len() {
        return Err(LabError::InvalidParameter("source samples must match the bundle grid".into()));
    }
    let theta = bundle.phases()?;
    let len = bundle.len();
    let n = chi[0].len();
    let pulled: Vec<CVec> = (0..len).map(|k| &bundle.w_inv[k] * &chi[k]).collect();
    let mut total = vec![CVec::zeros(n); len];
    for (j, pj) in bundle.projectors.iter().enumerate() {
        let integrand: Vec<CVec> =
            (0..len).map(|k| (&pj[0] * &pulled[k]) * c(0.0, theta[j][k] / epsilon).exp()).collect();
        // Componentwise cumulative Simpson.
        let mut cum = vec![CVec::zeros(n); len];
        for i in 0..n {
            let col: Vec<C64> = integrand.iter().map(|v| v[i]).collect();
            for (k, z) in cumulative_simpson_c(&col, bundle.dt).into_iter().enumerate() {
                cum[k][i] = z;
            }
        }
        for k in 0..len {
            total[k] += &cum[k] * c(0.0, -theta[j][k] / epsilon).exp();
        }
    }
    let norms: Vec<f64> = (0..len).map(|k| (&bundle.w[k] * &total[k]).norm()).collect();
    Ok(SourceIntegral { epsilon, sup: norms.iter().cloned().fold(0.0, f64::max), norms })
}

#[derive(Clone, Debug, Serialize)]
pub struct SourceSweep {
    pub runs: Vec<SourceIntegral>,
    pub order: LineFit,
}

pub fn source_integral_check(bundle: &TransportBundle, path: &EigenPath, eps_list: &[f64], inject_kernel: bool) -> Result<SourceSweep> {
    let chi = source_term(bundle, path, inject_kernel)?;
    let runs = eps_list.iter().map(|&e| source_integral(bundle, &chi, e)).collect::<Result<Vec<_>>>()?;
    let eps: Vec<f64> = runs.iter().map(|r| r.epsilon).collect();
    let sup: Vec<f64> = runs.iter().map(|r| r.sup).collect();
    Ok(SourceSweep { order: loglog_fit(&eps, &sup), runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigenpath::{continue_path, FixedPointConfig};
    use crate::linalg::{outer, real_vec};
    use crate::model::ModelConfig;
    use crate::numerics::uniform_grid;
    use crate::scalar_fn::ScalarFunction;

    fn rotation(theta: f64) -> CMat {
        let (c_, s) = (theta.cos(), theta.sin());
        CMat::from_row_slice(3, 3, &[cr(c_), cr(-s), cr(0.0), cr(s), cr(c_), cr(0.0), cr(0.0), cr(0.0), cr(1.0)])
    }

    /// Projectors `R(t)PⱼR(t)ᵀ` of `diag(1, 2, 3)` rotated by angle `a t²`.
    fn rotating_bundle(n: usize, a: f64) -> TransportBundle {
        let times = uniform_grid(0.0, 1.0, n);
        let basis: Vec<CVec> = (0..3).map(|j| CVec::from_fn(3, |i, _| cr(if i == j { 1.0 } else { 0.0 }))).collect();
        let mut projectors = vec![Vec::new(); 3];
        let mut f = Vec::new();
        for &t in &times {
            let r = rotation(a * t * t);
            let mut ft = CMat::zeros(3, 3);
            for j in 0..3 {
                let p = &r * outer(&basis[j], &basis[j]) * r.transpose();
                ft += &p * cr(j as f64 + 1.0);
                projectors[j].push(p);
            }
            f.push(ft);
        }
        let ev = (0..3).map(|j| vec![cr(j as f64 + 1.0); times.len()]).collect();
        TransportBundle::from_samples(times, f, projectors, ev, None, 1e-8).unwrap()
    }

    #[test]
    fn constant_spectrum_has_zero_generator() {
        let times = uniform_grid(0.0, 1.0, 10);
        let p = vec![vec![CMat::identity(2, 2); 11]];
        let b = TransportBundle::from_samples(times, vec![CMat::identity(2, 2); 11], p, vec![vec![cr(1.0); 11]], None, 1e-8).unwrap();
        assert!(b.generator.iter().all(|k| k.norm() == 0.0));
        assert!(b.w.iter().all(|w| (w - CMat::identity(2, 2)).norm() == 0.0));
    }

    #[test]
    fn generator_matches_rotation_and_is_off_diagonal() {
        let a = 0.7;
        let err = |n: usize| {
            let b = rotating_bundle(n, a);
            let mut worst: f64 = 0.0;
            let mut diag: f64 = 0.0;
            for k in 0..b.len() {
                let t = b.times[k];
                let r = rotation(a * t * t);
                let rd = {
                    let th = a * t * t;
                    let w = 2.0 * a * t;
                    CMat::from_row_slice(3, 3, &[cr(-th.sin() * w), cr(-th.cos() * w), cr(0.0), cr(th.cos() * w), cr(-th.sin() * w), cr(0.0), cr(0.0), cr(0.0), cr(0.0)])
                };
                // With Σ Pⱼ = I, i Σ Ṗⱼ Pⱼ for P = R P(0) Rᵀ is i(Ṙ Rᵀ − Σ P Ṙ Rᵀ P).
                let omega = &rd * r.transpose();
                let mut exact = omega.clone();
                for pj in &b.projectors {
                    exact -= &pj[k] * &omega * &pj[k];
                }
                worst = worst.max((&b.generator[k] - exact * I).norm());
                diag = diag.max(b.generator_diagonal_blocks(k));
            }
            (worst, diag, b.max_intertwining_residual())
        };
        let (e1, d1, i1) = err(50);
        let (e2, d2, i2) = err(100);
        assert!(e1 / e2 > 3.5, "{e1} {e2}");
        assert!(d1 / d2 > 3.5 || d2 < 1e-12, "{d1} {d2}");
        assert!(i1 / i2 > 3.5, "{i1} {i2}");
    }

    #[test]
    fn phase_group_law_and_kernel() {
        let b = rotating_bundle(40, 0.5);
        let eps = 0.05;
        let (p1, p2) = (b.dynamical_phase(eps, 30, 10).unwrap(), b.dynamical_phase(eps, 10, 2).unwrap());
        let p3 = b.dynamical_phase(eps, 30, 2).unwrap();
        assert!((&p1 * &p2 - &p3).norm() < 1e-10);
        let inv = b.dynamical_phase(eps, 10, 30).unwrap();
        assert!((&p1 * inv - CMat::identity(3, 3)).norm() < 1e-10);
        let single = b.dynamical_phase(eps, 40, 0).unwrap();
        let want = &b.projectors[0][0] * c(0.0, -1.0 / eps).exp();
        assert!((&b.projectors[0][0] * single - want).norm() < 1e-12);
    }

    #[test]
    fn constant_operator_evolution_is_exponential_and_comparison_exact() {
        let times = uniform_grid(0.0, 0.5, 20);
        let f0 = CMat::from_row_slice(2, 2, &[cr(1.0), cr(0.3), cr(0.0), cr(-1.0)]);
        let sp = crate::linearized::spectrum_of_matrix(&f0, None).unwrap();
        let projectors: Vec<Vec<CMat>> = sp.clusters.iter().map(|c| vec![c.projector.clone(); 21]).collect();
        let ev = sp.clusters.iter().map(|c| vec![c.center; 21]).collect();
        let b = TransportBundle::from_samples(times, vec![f0.clone(); 21], projectors, ev, None, 1e-8).unwrap();
        let cfg = IntegratorConfig::default();
        let t = b.true_evolution(0.05, &cfg, false).unwrap();
        let exact = expm(&(&f0 * c(0.0, -0.5 / 0.05)));
        assert!((t.last().unwrap() - exact).norm() < 1e-8);
        let cmp = compare_adiabatic(&b, 0.05, &cfg).unwrap();
        assert!(cmp.sup_defect < 1e-9, "{}", cmp.sup_defect);
        assert!(cmp.inversion_residual < 1e-9);
    }

    #[test]
    fn non_real_spectrum_rejected() {
        let times = uniform_grid(0.0, 1.0, 5);
        let p = vec![vec![CMat::identity(1, 1); 6]];
        let b = TransportBundle::from_samples(times, vec![CMat::identity(1, 1); 6], p, vec![vec![c(1.0, 0.1); 6]], None, 1e-8).unwrap();
        assert!(matches!(b.dynamical_phase(0.1, 3, 0), Err(LabError::NonRealEigenvaluePath { .. })));
    }

    fn detuned_bundle(dt: f64) -> (Model, EigenPath, TransportBundle) {
        let m = ModelConfig::DoubleWellMcww {
            kappa: ScalarFunction::linear(0.2, 0.1),
            omega: ScalarFunction::constant(1.0),
            detuning: Some(ScalarFunction::linear(0.3, 0.4)),
        }
        .build()
        .unwrap();
        let cfg = FixedPointConfig { continuation_step: dt, ..Default::default() };
        let path = continue_path(&m, (0.0, 0.5), &real_vec(&[0.7, -0.7]), &cfg).unwrap();
        let b = TransportBundle::from_path(&m, &path, None).unwrap();
        (m, path, b)
    }

    #[test]
    fn double_well_bundle_intertwines() {
        let (_, _, b) = detuned_bundle(1e-3);
        assert!(b.max_intertwining_residual() < 1e-6, "{}", b.max_intertwining_residual());
        assert!(b.w_condition().is_finite());
        assert_eq!(b.projectors[b.kernel.unwrap()][0].trace().re.round(), 2.0);
    }

    #[test]
    fn time_independent_path_has_no_source() {
        let m = ModelConfig::Diagonal { values: vec![0.0, 1.0, 2.0], p: 1 }.build().unwrap();
        let cfg = FixedPointConfig { continuation_step: 0.05, ..Default::default() };
        let path = continue_path(&m, (0.0, 0.5), &real_vec(&[1.0, 0.0, 0.0]), &cfg).unwrap();
        let b = TransportBundle::from_path(&m, &path, None).unwrap();
        let s = source_integral_check(&b, &path, &[0.1, 0.05], false).unwrap();
        assert!(s.runs.iter().all(|r| r.sup == 0.0));
    }

    #[test]
    fn source_integral_matches_direct_quadrature() {
        let (_, path, b) = detuned_bundle(0.01);
        let chi = source_term(&b, &path, false).unwrap();
        let eps = 0.1;
        let fast = source_integral(&b, &chi, eps).unwrap();
        let k = b.len() - 1;
        let samples: Vec<CVec> = (0..=k).map(|m| b.comparison_operator(eps, k, m).unwrap() * &chi[m]).collect();
        let n = chi[0].len();
        let mut direct = CVec::zeros(n);
        for i in 0..n {
            let col: Vec<C64> = samples.iter().map(|v| v[i]).collect();
            direct[i] = *cumulative_simpson_c(&col, b.dt).last().unwrap();
        }
        assert!((fast.norms[k] - direct.norm()).abs() < 1e-10);
    }
}
