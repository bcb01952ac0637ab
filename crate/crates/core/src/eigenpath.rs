//! Instantaneous nonlinear eigenvectors `P(t, [ω]) ω = ω`, their
//! continuation in time with the parallel-transport phase, and folds.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{cr, inner, moduli_sq, smallest_singular_value_real, CVec, RMat};
use crate::model::{Model, ParameterPoint, RotationBifurcation, SmoothFrame, ThetaProfile};
use crate::numerics::{bisect, cumulative_simpson, cumulative_trapezoid_c};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointConfig {
    pub picard_max_iters: usize,
    pub picard_tol: f64,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub continuation_step: f64,
    /// Number of trailing accepted points used to extrapolate the Jacobian's
    /// smallest singular value when classifying a truncation.
    pub fold_detection_window: usize,
    /// Resolution of the failure bracket when a continuation step fails.
    pub min_step: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            picard_max_iters: 200,
            picard_tol: 1e-12,
            newton_tol: 1e-13,
            newton_max_iters: 40,
            continuation_step: 1e-3,
            fold_detection_window: 4,
            min_step: 1e-9,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0 && self.newton_tol > 0.0 && self.continuation_step > 0.0 && self.min_step > 0.0) {
            return Err(LabError::ConfigInvalid("fixed-point tolerances and steps must be positive".into()));
        }
        if self.fold_detection_window < 2 {
            return Err(LabError::ConfigInvalid("fold_detection_window must be at least 2".into()));
        }
        Ok(())
    }
}

/// A converged nonlinear eigenvector at one time.
#[derive(Clone, Debug)]
pub struct FixedPointSolution {
    pub omega: CVec,
    pub lambda: f64,
    /// `‖ω − φ(t, [ω])‖`
    pub residual: f64,
    /// `‖H(t,[ω])ω − λω‖`
    pub eigen_residual: f64,
    pub picard_iterations: usize,
    pub newton_iterations: usize,
    /// Smallest singular value of the Newton Jacobian at the solution.
    pub sigma_min: f64,
}

/// Real Jacobian of `r ↦ r − φ(t, [r])` in the variables `(Re v, Im v)`.
///
/// This is the doubled map `(v, v̄) ↦ (v − φ, v̄ − φ̄)` written in real
/// coordinates: `δxⱼ = 2 Re(v̄ⱼ δvⱼ)`.
pub fn newton_jacobian(model: &Model, frame: &SmoothFrame, t: f64, v: &CVec) -> Result<RMat> {
    let n = v.len();
    let x = moduli_sq(v, model.p());
    let value = frame.value(model, t, &x)?;
    let dphi = frame.dphi_dx(model, t, &x, &value)?;
    let mut jac = RMat::identity(2 * n, 2 * n);
    for (j, d) in dphi.iter().enumerate() {
        let (a, b) = (2.0 * v[j].re, 2.0 * v[j].im);
        for i in 0..n {
            jac[(i, j)] -= d[i].re * a;
            jac[(i, n + j)] -= d[i].re * b;
            jac[(n + i, j)] -= d[i].im * a;
            jac[(n + i, n + j)] -= d[i].im * b;
        }
    }
    Ok(jac)
}

fn check_domain(model: &Model, t: f64, v: &CVec) -> Result<Vec<f64>> {
    let x = moduli_sq(v, model.p());
    if !model.in_domain(t, &x) {
        return Err(LabError::DomainExit { t });
    }
    Ok(x)
}

fn finish(model: &Model, frame: &SmoothFrame, t: f64, w: CVec, picard: usize, newton: usize) -> Result<FixedPointSolution> {
    let x = check_domain(model, t, &w)?;
    let value = frame.value(model, t, &x)?;
    let residual = (&value.phi - &w).norm();
    let omega = value.phi;
    let h = model.h(t, &moduli_sq(&omega, model.p()))?;
    let hw = &h * &omega;
    let lambda = inner(&omega, &hw).re;
    let eigen_residual = (hw - &omega * cr(lambda)).norm();
    let sigma_min = smallest_singular_value_real(&newton_jacobian(model, frame, t, &omega)?);
    Ok(FixedPointSolution { omega, lambda, residual, eigen_residual, picard_iterations: picard, newton_iterations: newton, sigma_min })
}

/// Solves `ω = φ(t, [ω])` by Picard iteration, switching to Newton when the
/// contraction stalls (increment ratio above 0.9 for five iterations).
pub fn solve_fixed_point(
    model: &Model,
    frame: &SmoothFrame,
    t: f64,
    seed: &CVec,
    cfg: &FixedPointConfig,
) -> Result<FixedPointSolution> {
    let mut w = seed / cr(seed.norm());
    let mut best = (f64::INFINITY, w.clone());
    let mut prev_inc = f64::INFINITY;
    let mut slow = 0usize;
    let mut picard = 0usize;
    while picard < cfg.picard_max_iters {
        let x = check_domain(model, t, &w)?;
        let next = frame.value(model, t, &x)?.phi;
        let inc = (&next - &w).norm();
        picard += 1;
        if inc <= cfg.picard_tol {
            return finish(model, frame, t, next, picard, 0);
        }
        if inc < best.0 {
            best = (inc, w.clone());
        }
        slow = if inc > 0.9 * prev_inc { slow + 1 } else { 0 };
        if slow >= 5 || !inc.is_finite() {
            break;
        }
        prev_inc = inc;
        w = next;
    }
    newton(model, frame, t, best.1, cfg, picard)
}

fn newton(model: &Model, frame: &SmoothFrame, t: f64, mut w: CVec, cfg: &FixedPointConfig, picard: usize) -> Result<FixedPointSolution> {
    let n = w.len();
    let residual_of = |w: &CVec| -> Result<(CVec, f64)> {
        let x = check_domain(model, t, w)?;
        let f = w - frame.value(model, t, &x)?.phi;
        let r = f.norm();
        Ok((f, r))
    };
    let (mut f, mut r) = residual_of(&w)?;
    for it in 1..=cfg.newton_max_iters {
        if r <= cfg.newton_tol {
            return finish(model, frame, t, w, picard, it - 1);
        }
        let jac = newton_jacobian(model, frame, t, &w)?;
        let rhs = nalgebra::DVector::from_fn(2 * n, |i, _| if i < n { -f[i].re } else { -f[i - n].im });
        let delta = match jac.lu().solve(&rhs) {
            Some(d) => d,
            None => break,
        };
        let step = CVec::from_fn(n, |i, _| crate::linalg::c(delta[i], delta[n + i]));
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial = &w + &step * cr(scale);
            if let Ok((ft, rt)) = residual_of(&trial) {
                if rt < r || rt <= cfg.newton_tol {
                    w = trial;
                    f = ft;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r <= cfg.newton_tol {
        return finish(model, frame, t, w, picard, cfg.newton_max_iters);
    }
    Err(LabError::NoConvergence { t, residual: r })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationKind {
    Fold,
    SolverFailure,
}

/// Why and where a continuation stopped before the end of its range.
#[derive(Clone, Debug, Serialize)]
pub struct Truncation {
    /// First time at which no solution was found (bracketed to `min_step`).
    pub t_fail: f64,
    /// Last time at which a solution was found.
    pub t_last: f64,
    pub kind: TruncationKind,
    pub sigma_min: f64,
    pub message: String,
}

/// A sampled instantaneous nonlinear eigenvector path.
#[derive(Clone, Debug, Serialize)]
pub struct EigenPath {
    pub times: Vec<f64>,
    #[serde(skip)]
    pub omega: Vec<CVec>,
    pub lambda: Vec<f64>,
    /// `Λ(tₖ) = ∫_{t₀}^{tₖ} λ`
    pub phase: Vec<f64>,
    pub residual: Vec<f64>,
    pub fixed_point_residual: Vec<f64>,
    pub phase_defect: Vec<f64>,
    pub sigma_min: Vec<f64>,
    /// Signed grid step.
    pub step: f64,
    pub truncation: Option<Truncation>,
    pub reanchor_events: usize,
}

impl EigenPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `ω̇(tₖ)` by second-order finite differences on the grid.
    pub fn omega_dot(&self) -> Vec<CVec> {
        derivative_on_grid(&self.omega, self.step)
    }

    /// CSV header and rows: `t, Re/Im ω_j, lambda, phase, residual, phase_defect`.
    pub fn csv(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let n = self.omega.first().map(|v| v.len()).unwrap_or(0);
        let mut header = vec!["t".to_string()];
        for j in 0..n {
            header.push(format!("re_omega_{}", j + 1));
            header.push(format!("im_omega_{}", j + 1));
        }
        header.extend(["lambda", "phase", "residual", "phase_defect"].map(String::from));
        let rows = (0..self.len())
            .map(|k| {
                let mut row = vec![self.times[k]];
                for z in self.omega[k].iter() {
                    row.push(z.re);
                    row.push(z.im);
                }
                row.extend([self.lambda[k], self.phase[k], self.residual[k], self.phase_defect[k]]);
                row
            })
            .collect();
        (header, rows)
    }
}

/// Second-order differences: central inside, one-sided at the ends.
pub fn derivative_on_grid(v: &[CVec], h: f64) -> Vec<CVec> {
    let n = v.len();
    if n < 3 {
        return if n == 2 { vec![(&v[1] - &v[0]) / cr(h); 2] } else { vec![v[0].clone() * cr(0.0); n] };
    }
    (0..n)
        .map(|k| {
            if k == 0 {
                (&v[0] * cr(-3.0) + &v[1] * cr(4.0) - &v[2]) / cr(2.0 * h)
            } else if k == n - 1 {
                (&v[n - 1] * cr(3.0) - &v[n - 2] * cr(4.0) + &v[n - 3]) / cr(2.0 * h)
            } else {
                (&v[k + 1] - &v[k - 1]) / cr(2.0 * h)
            }
        })
        .collect()
}

/// Continues the nonlinear eigenvector from `t_range.0` to `t_range.1`
/// (either direction) on a uniform grid, then applies the phase correction
/// `ω = ω̃ e^{−∫⟨ω̃|ω̃'⟩}` so that `⟨ω|ω̇⟩ = 0`.
///
/// The frame is anchored at `(t₀, [seed])` on the projection of the seed.
/// A failure inside the range truncates the path; the failure time is
/// bracketed and classified as a fold or a solver failure.
pub fn continue_path(model: &Model, t_range: (f64, f64), seed: &CVec, cfg: &FixedPointConfig) -> Result<EigenPath> {
    cfg.validate()?;
    let (t0, t1) = t_range;
    let span = t1 - t0;
    if span == 0.0 {
        return Err(LabError::InvalidParameter("empty time range".into()));
    }
    let steps = ((span.abs() / cfg.continuation_step).round() as usize).max(2);
    let h = span / steps as f64;
    let seed = seed / cr(seed.norm());
    let mut frame = SmoothFrame::from_seed(model, ParameterPoint::new(t0, moduli_sq(&seed, model.p())), &seed)?;
    let start_seed = frame.phi0.clone();
    let first = solve_fixed_point(model, &frame, t0, &start_seed, cfg)?;
    let mut sols = vec![first];
    let mut times = vec![t0];
    let mut truncation = None;
    for k in 1..=steps {
        let t = t0 + h * k as f64;
        let prev = sols.last().unwrap().omega.clone();
        match solve_fixed_point(model, &frame, t, &prev, cfg) {
            Ok(sol) => {
                let q = ParameterPoint::new(t, moduli_sq(&sol.omega, model.p()));
                if let Ok(v) = frame.value(model, t, &q.x) {
                    frame.maybe_reanchor(&q, &v);
                }
                times.push(t);
                sols.push(sol);
            }
            Err(err) => {
                truncation = Some(bracket_failure(model, &frame, &times, &sols, t, err, cfg));
                break;
            }
        }
    }
    let raw: Vec<CVec> = sols.iter().map(|s| s.omega.clone()).collect();
    let omega = if times.len() >= 2 { transport_phase(&raw, h) } else { raw };
    let lambda: Vec<f64> = sols.iter().map(|s| s.lambda).collect();
    let phase = if lambda.len() >= 2 { cumulative_simpson(&lambda, h) } else { vec![0.0; lambda.len()] };
    let mut residual = Vec::with_capacity(omega.len());
    for (k, w) in omega.iter().enumerate() {
        let hm = model.h(times[k], &moduli_sq(w, model.p()))?;
        residual.push((&hm * w - w * cr(lambda[k])).norm());
    }
    let phase_defect = if omega.len() >= 2 {
        derivative_on_grid(&omega, h).iter().zip(&omega).map(|(d, w)| inner(w, d).norm()).collect()
    } else {
        vec![0.0; omega.len()]
    };
    Ok(EigenPath {
        times,
        omega,
        lambda,
        phase,
        residual,
        fixed_point_residual: sols.iter().map(|s| s.residual).collect(),
        phase_defect,
        sigma_min: sols.iter().map(|s| s.sigma_min).collect(),
        step: h,
        truncation,
        reanchor_events: frame.events.len(),
    })
}

fn transport_phase(raw: &[CVec], h: f64) -> Vec<CVec> {
    let d = derivative_on_grid(raw, h);
    // ⟨ω̃|ω̃'⟩ is imaginary for unit vectors; drop the discretisation's real part.
    let a: Vec<_> = raw.iter().zip(&d).map(|(w, dw)| crate::linalg::c(0.0, inner(w, dw).im)).collect();
    let cum = cumulative_trapezoid_c(&a, h);
    raw.iter().zip(cum).map(|(w, s)| w * (-s).exp()).collect()
}

fn bracket_failure(
    model: &Model,
    frame: &SmoothFrame,
    times: &[f64],
    sols: &[FixedPointSolution],
    t_bad: f64,
    err: LabError,
    cfg: &FixedPointConfig,
) -> Truncation {
    let mut lo = *times.last().unwrap();
    let mut lo_sol = sols.last().unwrap().clone();
    let mut hi = t_bad;
    while (hi - lo).abs() > cfg.min_step {
        let mid = 0.5 * (lo + hi);
        match solve_fixed_point(model, frame, mid, &lo_sol.omega, cfg) {
            Ok(s) => {
                lo = mid;
                lo_sol = s;
            }
            Err(_) => hi = mid,
        }
    }
    // σ_min² vanishes linearly at a fold; extrapolate it from the trailing points.
    let w = cfg.fold_detection_window.min(times.len());
    let mut ts: Vec<f64> = times[times.len() - w..].to_vec();
    let mut s2: Vec<f64> = sols[sols.len() - w..].iter().map(|s| s.sigma_min * s.sigma_min).collect();
    ts.push(lo);
    s2.push(lo_sol.sigma_min * lo_sol.sigma_min);
    let fit = crate::numerics::linear_fit(&ts, &s2);
    let t_zero = -fit.intercept / fit.slope;
    let reach = 2.0 * (times.last().unwrap() - times[times.len().saturating_sub(2)]).abs().max(cfg.min_step);
    let towards = (hi - lo).signum();
    let ahead = (t_zero - lo) * towards;
    let collapsing = lo_sol.sigma_min < 0.1 * sols[0].sigma_min;
    let kind = if lo_sol.sigma_min < 1e-6 || (collapsing && ahead > -reach && ahead < reach) {
        TruncationKind::Fold
    } else {
        TruncationKind::SolverFailure
    };
    Truncation { t_fail: hi, t_last: lo, kind, sigma_min: lo_sol.sigma_min, message: err.to_string() }
}

/// Roots of the scalar reduction `Y = cos(t θ(Y²)/2)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RootCount {
    pub count: usize,
    pub roots: Vec<f64>,
}

fn rotation_family(model: &Model) -> Result<RotationBifurcation> {
    model
        .family()
        .rotation_profile()
        .map(|theta: &ThetaProfile| RotationBifurcation { theta: theta.clone() })
        .ok_or_else(|| LabError::InvalidParameter(format!("model `{}` has no scalar reduction", model.name())))
}

/// Counts sign changes of the scalar residual on `grid_size` points and
/// refines each root by bisection to `1e-12`.
pub fn count_solutions(model: &Model, t: f64, grid_size: usize) -> Result<RootCount> {
    let fam = rotation_family(model)?;
    let n = grid_size.max(2);
    let ys: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    let rs: Vec<f64> = ys.iter().map(|&y| fam.scalar_residual(t, y)).collect();
    let mut roots = Vec::new();
    for k in 0..n {
        if rs[k] == 0.0 {
            roots.push(ys[k]);
        } else if k + 1 < n && rs[k + 1] != 0.0 && rs[k].signum() != rs[k + 1].signum() {
            if let Some(r) = bisect(|y| fam.scalar_residual(t, y), ys[k], ys[k + 1], 1e-12) {
                roots.push(r);
            }
        }
    }
    Ok(RootCount { count: roots.len(), roots })
}

/// Result of fold detection.
#[derive(Clone, Debug, Serialize)]
pub struct FoldReport {
    pub tau: f64,
    /// First component of the double root (scalar-reduction models).
    pub y_fold: Option<f64>,
    pub count_below: Option<usize>,
    pub count_above: Option<usize>,
    /// Scalar residual and its `Y`-derivative at the tangency.
    pub residual: Option<f64>,
    pub residual_dy: Option<f64>,
    /// Smallest Jacobian singular value at the last solved point (general models).
    pub sigma_min: Option<f64>,
}

/// Grid size used to count scalar roots.
pub const COUNT_GRID: usize = 4001;

/// Locates the time at which the solution count of the scalar reduction
/// changes (rotation family), or where a continued path folds (others).
pub fn detect_fold(model: &Model, t_range: (f64, f64), seed: Option<&CVec>, cfg: &FixedPointConfig) -> Result<FoldReport> {
    if model.family().rotation_profile().is_some() {
        return detect_fold_scalar(model, t_range);
    }
    let seed = match seed {
        Some(s) => s.clone(),
        None => model.tracked_eigenpair(t_range.0, &vec![0.5; model.p()])?.vector,
    };
    let path = continue_path(model, t_range, &seed, cfg)?;
    match path.truncation {
        Some(tr) if tr.kind == TruncationKind::Fold => Ok(FoldReport {
            tau: 0.5 * (tr.t_fail + tr.t_last),
            y_fold: None,
            count_below: None,
            count_above: None,
            residual: None,
            residual_dy: None,
            sigma_min: Some(tr.sigma_min),
        }),
        _ => Err(LabError::NoFoldInRange),
    }
}

fn detect_fold_scalar(model: &Model, t_range: (f64, f64)) -> Result<FoldReport> {
    let fam = rotation_family(model)?;
    let (a, b) = t_range;
    let scan = 1000;
    let count_at = |t: f64| count_solutions(model, t, COUNT_GRID).map(|c| c.count);
    let mut prev_t = a;
    let mut prev_c = count_at(a)?;
    let mut bracket = None;
    for k in 1..=scan {
        let t = a + (b - a) * k as f64 / scan as f64;
        let c = count_at(t)?;
        if c != prev_c {
            bracket = Some((prev_t, t, prev_c, c));
            break;
        }
        prev_t = t;
        prev_c = c;
    }
    let (mut lo, mut hi, c_lo, c_hi) = bracket.ok_or(LabError::NoFoldInRange)?;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if count_at(mid)? == c_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // The emerging pair is the closest pair of roots just past the change;
    // the tangency is the extremum of the residual between them.
    let roots = count_solutions(model, hi, COUNT_GRID)?.roots;
    let (ya, yb) = roots
        .windows(2)
        .map(|w| (w[0], w[1]))
        .min_by(|p, q| (p.1 - p.0).total_cmp(&(q.1 - q.0)))
        .ok_or(LabError::NoFoldInRange)?;
    let mut y_star = bisect(|y| fam.scalar_residual_dy(hi, y), ya, yb, 1e-14).unwrap_or(0.5 * (ya + yb));
    let extremum = |t: f64, guess: f64| -> f64 {
        let w = 0.02;
        bisect(|y| fam.scalar_residual_dy(t, y), (guess - w).max(0.0), (guess + w).min(1.0), 1e-15).unwrap_or(guess)
    };
    let g = |t: f64, guess: f64| fam.scalar_residual(t, extremum(t, guess));
    let sign_hi = g(hi, y_star).signum();
    let (mut tl, mut th) = ((lo - 1e-4).max(a), (hi + 1e-4).min(b));
    if g(tl, y_star).signum() == sign_hi {
        tl = lo;
    }
    for _ in 0..200 {
        if (th - tl).abs() < 1e-14 {
            break;
        }
        let mid = 0.5 * (tl + th);
        y_star = extremum(mid, y_star);
        if fam.scalar_residual(mid, y_star).signum() == sign_hi {
            th = mid;
        } else {
            tl = mid;
        }
    }
    let tau = 0.5 * (tl + th);
    let y_fold = extremum(tau, y_star);
    Ok(FoldReport {
        tau,
        y_fold: Some(y_fold),
        count_below: Some(c_lo),
        count_above: Some(c_hi),
        residual: Some(fam.scalar_residual(tau, y_fold)),
        residual_dy: Some(fam.scalar_residual_dy(tau, y_fold)),
        sigma_min: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::real_vec;
    use crate::model::{random_real_affine, ModelConfig, ThetaProfile};
    use crate::scalar_fn::ScalarFunction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flip() -> Model {
        ModelConfig::TwoLevelFlip { gamma: ScalarFunction::sinusoid(1.0, 0.5, 1.0) }.build().unwrap()
    }

    fn rotation(theta: ThetaProfile) -> Model {
        ModelConfig::RotationBifurcation { theta }.build().unwrap()
    }

    #[test]
    fn flip_fixed_point_in_one_iteration() {
        let m = flip();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let seed = real_vec(&[s, s]);
        let frame = SmoothFrame::new(ParameterPoint::new(0.0, vec![0.5]), seed.clone());
        let sol = solve_fixed_point(&m, &frame, 0.3, &seed, &FixedPointConfig::default()).unwrap();
        assert_eq!(sol.picard_iterations, 1);
        assert!((sol.omega - seed).norm() < 1e-15);
        assert!((sol.lambda - 0.5 * (1.0 + 0.5 * 0.3f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn x_independent_model_gives_linear_eigenvector() {
        let m = ModelConfig::Diagonal { values: vec![0.0, 1.0, 3.0], p: 2 }.build().unwrap();
        let seed = real_vec(&[0.9, 0.3, 0.1]);
        let frame = SmoothFrame::from_seed(&m, ParameterPoint::new(0.0, vec![0.81, 0.09]), &seed).unwrap();
        let sol = solve_fixed_point(&m, &frame, 0.0, &seed, &FixedPointConfig::default()).unwrap();
        assert!((sol.omega - real_vec(&[1.0, 0.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn double_well_matches_scalar_bisection() {
        let (kappa, om) = (0.3, 1.0);
        let m = ModelConfig::DoubleWellMcww {
            kappa: ScalarFunction::constant(kappa),
            omega: ScalarFunction::constant(om),
            detuning: Some(ScalarFunction::constant(0.4)),
        }
        .build()
        .unwrap();
        // Independent oracle: ground state of the real 2×2 matrix at x = (u², 1 − u²),
        // phased with a positive first component.
        let phi1 = |u: f64| {
            let h = [[kappa * u * u + 0.2, om], [om, kappa * (1.0 - u * u) - 0.2]];
            let tr = h[0][0] + h[1][1];
            let det = h[0][0] * h[1][1] - om * om;
            let l = 0.5 * tr - (0.25 * tr * tr - det).sqrt();
            let (a, b) = (om, l - h[0][0]);
            a.abs() / (a * a + b * b).sqrt()
        };
        let u = bisect(|u| u - phi1(u), 0.0, 1.0, 1e-15).unwrap();
        let seed = real_vec(&[0.7, -0.7]);
        let frame = SmoothFrame::from_seed(&m, ParameterPoint::new(0.0, vec![0.5, 0.5]), &seed).unwrap();
        let sol = solve_fixed_point(&m, &frame, 0.0, &seed, &FixedPointConfig::default()).unwrap();
        assert!((sol.omega[0].re - u).abs() < 1e-12, "{} vs {u}", sol.omega[0].re);
        assert!(sol.eigen_residual < 1e-12);
    }

    #[test]
    fn newton_takes_over_when_picard_stalls() {
        let m = rotation(ThetaProfile::default());
        let t = 0.6;
        let roots = count_solutions(&m, t, 4001).unwrap();
        assert_eq!(roots.count, 1);
        let y = roots.roots[0];
        let seed = real_vec(&[y + 0.05, (1.0 - (y + 0.05).powi(2)).sqrt()]);
        let frame = SmoothFrame::from_seed(&m, ParameterPoint::new(t, vec![seed[0].re.powi(2)]), &seed).unwrap();
        let sol = solve_fixed_point(&m, &frame, t, &seed, &FixedPointConfig::default()).unwrap();
        assert!(sol.newton_iterations > 0);
        assert!((sol.omega[0].re.abs() - y).abs() < 1e-10);
    }

    #[test]
    fn flip_path_is_constant_with_half_gamma() {
        let m = flip();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let cfg = FixedPointConfig { continuation_step: 0.01, ..Default::default() };
        let path = continue_path(&m, (0.0, 1.0), &real_vec(&[s, s]), &cfg).unwrap();
        assert!(path.truncation.is_none());
        assert_eq!(path.len(), 101);
        for k in 0..path.len() {
            assert!((&path.omega[k] - real_vec(&[s, s])).norm() < 1e-14);
            assert!((path.lambda[k] - 0.5 * (1.0 + 0.5 * path.times[k].sin())).abs() < 1e-14);
        }
        let exact = 0.5 * (1.0 + 0.5 * (1.0 - 1f64.cos()));
        assert!((path.phase.last().unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn phase_defect_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = random_real_affine(4, 1, 0.05, &mut rng);
        // Complex time dependence so that the raw frame carries a Berry-type phase.
        let fam = crate::model::AffineFamily {
            a0: m.family().h(0.0, &[0.0]),
            a1: {
                let a = crate::linalg::CMat::from_fn(4, 4, |i, j| crate::linalg::c((i + j) as f64 * 0.05, (i as f64 - j as f64) * 0.1));
                a.clone() + a.adjoint()
            },
            b: vec![m.dh_dx(0.0, &[0.0], 0).unwrap()],
            real: false,
        };
        m = Model::new(std::sync::Arc::new(fam), 0);
        let seed = m.tracked_eigenpair(0.0, &[0.5]).unwrap().vector;
        let defect = |dt: f64| {
            let cfg = FixedPointConfig { continuation_step: dt, ..Default::default() };
            let p = continue_path(&m, (0.0, 1.0), &seed, &cfg).unwrap();
            p.phase_defect.iter().cloned().fold(0.0, f64::max)
        };
        let (d1, d2) = (defect(0.02), defect(0.01));
        assert!(d1 > 0.0);
        let order = (d1 / d2).log2();
        assert!(order > 1.7, "order {order} ({d1:e}, {d2:e})");
    }

    #[test]
    fn gauge_rotated_seed_gives_same_path_up_to_constant_phase() {
        let m = ModelConfig::DoubleWellMcww {
            kappa: ScalarFunction::linear(0.2, 0.1),
            omega: ScalarFunction::constant(1.0),
            detuning: Some(ScalarFunction::linear(0.3, 0.4)),
        }
        .build()
        .unwrap();
        let cfg = FixedPointConfig { continuation_step: 0.01, ..Default::default() };
        let seed = real_vec(&[0.7, -0.7]);
        let a = continue_path(&m, (0.0, 0.5), &seed, &cfg).unwrap();
        let b = continue_path(&m, (0.0, 0.5), &(&seed * num_complex::Complex64::from_polar(1.0, 1.1)), &cfg).unwrap();
        for k in 0..a.len() {
            let ov = inner(&a.omega[k], &b.omega[k]).norm(); assert!((ov - 1.0).abs() < 1e-10, "k={k} ov={ov} a={} b={}", a.omega[k], b.omega[k]);
            assert!(crate::linalg::max_imag(&a.omega[k]) < 1e-10);
            assert!(a.residual[k] < 1e-8);
        }
    }

    #[test]
    fn scalar_counts() {
        let m = rotation(ThetaProfile::default());
        let c0 = count_solutions(&m, 0.0, 1001).unwrap();
        assert_eq!(c0.count, 1);
        assert_eq!(c0.roots[0], 1.0);
        assert!(count_solutions(&flip(), 0.0, 11).is_err());
    }

    #[test]
    fn fold_of_default_rotation_family() {
        let m = rotation(ThetaProfile::default());
        let f = detect_fold(&m, (0.0, 1.0), None, &FixedPointConfig::default()).unwrap();
        assert!(f.tau > 0.0 && f.tau < 1.0);
        assert_eq!(count_solutions(&m, f.tau - 1e-3, COUNT_GRID).unwrap().count, 1);
        assert_eq!(count_solutions(&m, f.tau + 1e-3, COUNT_GRID).unwrap().count, 3);
        assert!(f.residual.unwrap().abs() < 1e-6 && f.residual_dy.unwrap().abs() < 1e-6);
    }

    #[test]
    fn no_fold_cases() {
        let mild = rotation(ThetaProfile::Sine { c: 1.5, scale: 0.5 });
        assert!(matches!(detect_fold(&mild, (0.0, 1.0), None, &FixedPointConfig::default()), Err(LabError::NoFoldInRange)));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let cfg = FixedPointConfig { continuation_step: 0.01, ..Default::default() };
        assert!(matches!(detect_fold(&flip(), (0.0, 1.0), Some(&real_vec(&[s, s])), &cfg), Err(LabError::NoFoldInRange)));
    }

    #[test]
    fn backward_continuation_truncates_at_fold() {
        let m = rotation(ThetaProfile::default());
        let fold = detect_fold(&m, (0.0, 1.0), None, &FixedPointConfig::default()).unwrap();
        let roots = count_solutions(&m, 1.0, COUNT_GRID).unwrap().roots;
        let y = fold.y_fold.unwrap();
        let start = *roots.iter().min_by(|a, b| (*a - y).abs().total_cmp(&(*b - y).abs())).unwrap();
        let seed = real_vec(&[start, (1.0 - start * start).sqrt()]);
        let path = continue_path(&m, (1.0, 0.0), &seed, &FixedPointConfig::default()).unwrap();
        let tr = path.truncation.expect("path must truncate");
        assert_eq!(tr.kind, TruncationKind::Fold);
        assert!((tr.t_fail - fold.tau).abs() < 1e-2, "{} vs {}", tr.t_fail, fold.tau);
    }
}
