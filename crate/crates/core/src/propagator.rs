//! Unitary integration of `iε ∂ₜv = H(t, [v]) v`, energy content, the
//! gauge-shift check, and the closed-form two-level solution.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::eigenpath::EigenPath;
use crate::error::{LabError, Result};
use crate::linalg::{c, cr, expm_i_hermitian, inner, moduli_sq, CMat, CVec};
use crate::model::{selected_eigenvalue, Family, Model};
use crate::numerics::{cumulative_simpson, uniform_grid};
use crate::scalar_fn::ScalarFunction;

/// Where the nonlinearity is evaluated inside an implicit midpoint step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidpointRule {
    /// `x = ½([vₙ] + [vₙ₊₁])`. Depends on moduli only, so the step commutes
    /// with constant phases and with `H → H + χ·I`.
    #[default]
    ModuliAverage,
    /// `x = [½(vₙ + vₙ₊₁)]`.
    StateAverage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exponential midpoint, order 2.
    #[default]
    Midpoint,
    /// Symmetric triple-jump composition of the midpoint step, order 4.
    Composition4,
}

impl Scheme {
    pub fn order(self) -> u32 {
        match self {
            Scheme::Midpoint => 2,
            Scheme::Composition4 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub epsilon: f64,
    /// Steps per unit of ε: `dt ≤ ε / dt_factor`.
    pub dt_factor: f64,
    pub midpoint_fixed_point_tol: f64,
    pub midpoint_max_iters: usize,
    pub norm_renormalize: bool,
    pub midpoint: MidpointRule,
    pub scheme: Scheme,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            epsilon: 0.1,
            dt_factor: 40.0,
            midpoint_fixed_point_tol: 1e-13,
            midpoint_max_iters: 100,
            norm_renormalize: false,
            midpoint: MidpointRule::ModuliAverage,
            scheme: Scheme::Midpoint,
        }
    }
}

impl IntegratorConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        IntegratorConfig { epsilon, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LabError::ConfigInvalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.dt_factor >= 10.0) {
            return Err(LabError::ConfigInvalid(format!("dt_factor must be at least 10, got {}", self.dt_factor)));
        }
        if !(self.midpoint_fixed_point_tol > 0.0) || self.midpoint_max_iters == 0 {
            return Err(LabError::ConfigInvalid("midpoint iteration controls must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps of size at most `ε / dt_factor` covering `span`.
    pub fn steps_for(&self, span: f64) -> usize {
        ((span.abs() * self.dt_factor / self.epsilon) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PropagationResult {
    pub times: Vec<f64>,
    #[serde(skip)]
    pub states: Vec<CVec>,
    pub norm_drift: Vec<f64>,
    pub energy: Vec<f64>,
    pub epsilon: f64,
}

impl PropagationResult {
    pub fn max_norm_drift(&self) -> f64 {
        self.norm_drift.iter().cloned().fold(0.0, f64::max)
    }

    /// CSV header and rows: `t, Re/Im v_j, norm_drift, energy`.
    pub fn csv(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let n = self.states.first().map(|v| v.len()).unwrap_or(0);
        let mut header = vec!["t".to_string()];
        for j in 0..n {
            header.push(format!("re_v_{}", j + 1));
            header.push(format!("im_v_{}", j + 1));
        }
        header.push("norm_drift".into());
        header.push("energy".into());
        let rows = (0..self.times.len())
            .map(|k| {
                let mut row = vec![self.times[k]];
                for z in self.states[k].iter() {
                    row.push(z.re);
                    row.push(z.im);
                }
                row.push(self.norm_drift[k]);
                row.push(self.energy[k]);
                row
            })
            .collect();
        (header, rows)
    }
}

/// `E_v(t) = ⟨v|H(t,[v])v⟩`.
pub fn energy_of(model: &Model, t: f64, v: &CVec) -> Result<f64> {
    let h = model.h(t, &moduli_sq(v, model.p()))?;
    Ok(inner(v, &(&h * v)).re)
}

pub fn energy_content(model: &Model, result: &PropagationResult) -> Result<Vec<f64>> {
    result.times.iter().zip(&result.states).map(|(&t, v)| energy_of(model, t, v)).collect()
}

/// One implicit exponential-midpoint step from `t` to `t + h`.
fn midpoint_step(model: &Model, t: f64, h: f64, v: &CVec, cfg: &IntegratorConfig) -> Result<CVec> {
    let p = model.p();
    let xv = moduli_sq(v, p);
    let tau = h / cfg.epsilon;
    let mut w = v.clone();
    let mut first_diff = f64::NAN;
    let mut tol = cfg.midpoint_fixed_point_tol;
    for it in 0..cfg.midpoint_max_iters {
        let x_mid: Vec<f64> = match cfg.midpoint {
            MidpointRule::ModuliAverage => xv.iter().zip(moduli_sq(&w, p)).map(|(a, b)| 0.5 * (a + b)).collect(),
            MidpointRule::StateAverage => moduli_sq(&((v + &w) * cr(0.5)), p),
        };
        let hm = model.h(t + 0.5 * h, &x_mid)?;
        if it == 0 {
            // Phases τλ carry roundoff of order ε_mach·τ‖H‖; a tighter tolerance is unreachable.
            tol = tol.max(64.0 * f64::EPSILON * tau.abs() * max_row_sum(&hm));
        }
        let next = expm_i_hermitian(&hm, tau) * v;
        let diff = (&next - &w).norm();
        w = next;
        if diff <= tol {
            return Ok(w);
        }
        if it == 0 {
            first_diff = diff;
        } else if !diff.is_finite() || diff > 1e3 * first_diff.max(tol) {
            return Err(LabError::InnerIterationDiverged { t });
        }
    }
    Err(LabError::StepTooLarge { t, max_iters: cfg.midpoint_max_iters })
}

/// `‖A‖_∞`, an upper bound on the spectral norm of a Hermitian matrix.
fn max_row_sum(a: &CMat) -> f64 {
    a.row_iter().map(|r| r.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
}

const YOSHIDA_C1: f64 = 1.351_207_191_959_657_6; // 1 / (2 − 2^{1/3})
const YOSHIDA_C2: f64 = -1.702_414_383_919_315_3; // −2^{1/3} / (2 − 2^{1/3})

fn step(model: &Model, t: f64, h: f64, v: &CVec, cfg: &IntegratorConfig) -> Result<CVec> {
    let mut w = match cfg.scheme {
        Scheme::Midpoint => midpoint_step(model, t, h, v, cfg)?,
        Scheme::Composition4 => {
            let a = midpoint_step(model, t, YOSHIDA_C1 * h, v, cfg)?;
            let b = midpoint_step(model, t + YOSHIDA_C1 * h, YOSHIDA_C2 * h, &a, cfg)?;
            midpoint_step(model, t + (YOSHIDA_C1 + YOSHIDA_C2) * h, YOSHIDA_C1 * h, &b, cfg)?
        }
    };
    if cfg.norm_renormalize {
        let n = v.norm() / w.norm();
        w *= cr(n);
    }
    Ok(w)
}

fn check_initial(v0: &CVec) -> Result<()> {
    let n = v0.norm();
    if (n - 1.0).abs() > 1e-10 {
        return Err(LabError::InvalidInitialData(format!("initial state must have unit norm, got {n}")));
    }
    Ok(())
}

/// Propagates over `t_range` (either direction), recording every step.
pub fn propagate(model: &Model, v0: &CVec, t_range: (f64, f64), cfg: &IntegratorConfig) -> Result<PropagationResult> {
    let n = cfg.steps_for(t_range.1 - t_range.0);
    propagate_on_grid(model, v0, &uniform_grid(t_range.0, t_range.1, n), cfg)
}

/// Propagates through the given monotone grid, taking equal substeps of
/// size at most `ε / dt_factor` inside each interval and recording only
/// at the grid points.
pub fn propagate_on_grid(model: &Model, v0: &CVec, grid: &[f64], cfg: &IntegratorConfig) -> Result<PropagationResult> {
    cfg.validate()?;
    check_initial(v0)?;
    if grid.is_empty() {
        return Err(LabError::InvalidParameter("empty propagation grid".into()));
    }
    let n0 = v0.norm();
    let mut v = v0.clone();
    let mut states = Vec::with_capacity(grid.len());
    states.push(v.clone());
    for w in grid.windows(2) {
        let m = cfg.steps_for(w[1] - w[0]);
        let h = (w[1] - w[0]) / m as f64;
        for j in 0..m {
            v = step(model, w[0] + h * j as f64, h, &v, cfg)?;
        }
        states.push(v.clone());
    }
    let norm_drift = states.iter().map(|s| (s.norm() - n0).abs()).collect();
    let energy = grid.iter().zip(&states).map(|(&t, s)| energy_of(model, t, s)).collect::<Result<Vec<_>>>()?;
    Ok(PropagationResult { times: grid.to_vec(), states, norm_drift, energy, epsilon: cfg.epsilon })
}

/// Exact solution of the two-level flip model for real initial data
/// `(x₀, z₀)`, sampled on `grid` (with `s(t) = ∫γ` by Simpson on that grid).
pub fn analytic_two_level(gamma: &ScalarFunction, x0: f64, z0: f64, grid: &[f64], epsilon: f64) -> Result<PropagationResult> {
    if !(x0 > 0.0) || z0 == 0.0 || (x0 * x0 + z0 * z0 - 1.0).abs() > 1e-12 {
        return Err(LabError::InvalidInitialData(format!("need x0 > 0, z0 != 0, x0² + z0² = 1; got ({x0}, {z0})")));
    }
    if grid.len() < 2 {
        return Err(LabError::InvalidParameter("grid needs at least two points".into()));
    }
    let dt = grid[1] - grid[0];
    let g: Vec<f64> = grid.iter().map(|&t| gamma.value(t)).collect();
    let s = cumulative_simpson(&g, dt);
    let states: Vec<CVec> = s.iter().map(|&s| two_level_state(x0, z0, s, epsilon)).collect();
    let energy = s
        .iter()
        .zip(&g)
        .map(|(&s, &gm)| {
            let a = -x0 * z0 * s / epsilon;
            let d2 = a.cos().powi(2) + (x0 / z0).powi(2) * a.sin().powi(2);
            2.0 * gm * x0.powi(3) * z0 / d2
        })
        .collect();
    Ok(PropagationResult {
        times: grid.to_vec(),
        norm_drift: states.iter().map(|v| (v.norm() - 1.0).abs()).collect(),
        states,
        energy,
        epsilon,
    })
}

/// Closed form at reparametrised time `s`: `v = (x + iy, z + it)`.
pub fn two_level_state(x0: f64, z0: f64, s: f64, epsilon: f64) -> CVec {
    let a = -x0 * z0 * s / epsilon;
    let d = (a.cos().powi(2) + (x0 / z0).powi(2) * a.sin().powi(2)).sqrt();
    CVec::from_vec(vec![c(x0 * a.cos() / d, x0 * a.sin() / d), c(z0 * a.cos() / d, x0 * x0 * a.sin() / (z0 * d))])
}

/// `(x² + t², y² + z², xz + yt)` for `v = (x + iy, z + it)`; conserved by the
/// two-level flip flow.
pub fn constants_of_motion(v: &CVec) -> [f64; 3] {
    let (x, y, z, t) = (v[0].re, v[0].im, v[1].re, v[1].im);
    [x * x + t * t, y * y + z * z, x * z + y * t]
}

/// Scalar shift `χ(t, x)` added to the Hamiltonian as `χ·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GaugeShift {
    Zero,
    /// The selected eigenvalue of `H(t, x)`.
    TrackedEigenvalue,
    /// `f(t) · x_j`
    ScaledModulus { f: ScalarFunction, j: usize },
}

impl GaugeShift {
    pub fn eval(&self, model: &Model, t: f64, x: &[f64]) -> f64 {
        match self {
            GaugeShift::Zero => 0.0,
            GaugeShift::TrackedEigenvalue => {
                selected_eigenvalue(&model.family().h(t, x), model.selected_index, model.degeneracy_rel_tol)
            }
            GaugeShift::ScaledModulus { f, j } => f.value(t) * x[*j],
        }
    }
}

#[derive(Debug)]
struct ShiftedFamily {
    base: Model,
    chi: GaugeShift,
}

impl Family for ShiftedFamily {
    fn name(&self) -> &str {
        self.base.name()
    }
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn p(&self) -> usize {
        self.base.p()
    }
    fn h(&self, t: f64, x: &[f64]) -> CMat {
        let mut h = self.base.family().h(t, x);
        let shift = self.chi.eval(&self.base, t, x);
        for k in 0..h.nrows() {
            h[(k, k)] += shift;
        }
        h
    }
    fn is_real(&self) -> bool {
        self.base.is_real()
    }
}

/// The model with `H` replaced by `H + χ·I`.
pub fn shifted_model(model: &Model, chi: &GaugeShift) -> Model {
    model.with_family(Arc::new(ShiftedFamily { base: model.clone(), chi: chi.clone() }))
}

#[derive(Clone, Debug, Serialize)]
pub struct GaugeShiftReport {
    /// `max_k ‖s(tₖ) − e^{−(i/ε)∫χ} v(tₖ)‖`
    pub residual: f64,
    /// Step-halving error estimate of the unshifted run.
    pub integrator_tolerance: f64,
    pub passes: bool,
}

/// Propagates with `H` and with `H + χ·I` and compares the shifted state to
/// the unshifted one times the accumulated phase.
pub fn gauge_shift_check(
    model: &Model,
    chi: &GaugeShift,
    v0: &CVec,
    t_range: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<GaugeShiftReport> {
    let base = propagate(model, v0, t_range, cfg)?;
    let shifted = propagate(&shifted_model(model, chi), v0, t_range, cfg)?;
    let dt = base.times[1] - base.times[0];
    let samples: Vec<f64> =
        base.times.iter().zip(&base.states).map(|(&t, v)| chi.eval(model, t, &moduli_sq(v, model.p()))).collect();
    let integral = cumulative_simpson(&samples, dt);
    let residual = base
        .states
        .iter()
        .zip(&shifted.states)
        .zip(&integral)
        .map(|((v, s), &phi)| (s - v * c(0.0, -phi / cfg.epsilon).exp()).norm())
        .fold(0.0, f64::max);
    let integrator_tolerance = richardson_estimate(model, v0, &base, cfg)?;
    Ok(GaugeShiftReport { residual, integrator_tolerance, passes: residual <= 5.0 * integrator_tolerance })
}

/// Error estimate of `run` from a half-step rerun: `‖v_h − v_{h/2}‖·2^q/(2^q − 1)`.
pub fn richardson_estimate(model: &Model, v0: &CVec, run: &PropagationResult, cfg: &IntegratorConfig) -> Result<f64> {
    let fine_cfg = IntegratorConfig { dt_factor: 2.0 * cfg.dt_factor, ..cfg.clone() };
    let fine = propagate_on_grid(model, v0, &run.times, &fine_cfg)?;
    let q = 2f64.powi(cfg.scheme.order() as i32);
    Ok(run.states.iter().zip(&fine.states).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) * q / (q - 1.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderReport {
    pub dt: [f64; 3],
    /// Sup differences between the dt/dt₂ and dt₂/dt₄ runs on the coarse grid.
    pub differences: [f64; 2],
    /// `log₂` of the ratio of successive differences; `None` when the scheme
    /// is exact to roundoff and the ratio carries no information.
    pub order: Option<f64>,
}

/// Measures the convergence order from three runs at `dt`, `dt/2`, `dt/4`.
pub fn measure_order(model: &Model, v0: &CVec, t_range: (f64, f64), cfg: &IntegratorConfig) -> Result<OrderReport> {
    let n = cfg.steps_for(t_range.1 - t_range.0);
    let grid = uniform_grid(t_range.0, t_range.1, n);
    let run = |f: f64| propagate_on_grid(model, v0, &grid, &IntegratorConfig { dt_factor: cfg.dt_factor * f, ..cfg.clone() });
    let (a, b, cc) = (run(1.0)?, run(2.0)?, run(4.0)?);
    let sup = |x: &PropagationResult, y: &PropagationResult| {
        x.states.iter().zip(&y.states).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
    };
    let (d1, d2) = (sup(&a, &b), sup(&b, &cc));
    let dt = (t_range.1 - t_range.0).abs() / n as f64;
    let order = if d1 < 1e-12 { None } else { Some((d1 / d2).log2()) };
    Ok(OrderReport { dt: [dt, dt / 2.0, dt / 4.0], differences: [d1, d2], order })
}

#[derive(Clone, Debug, Serialize)]
pub struct AdiabaticError {
    pub times: Vec<f64>,
    pub error: Vec<f64>,
    pub sup: f64,
    /// `max_{0 < tₖ − t₀ ≤ ε} err[k] / (tₖ − t₀)`, if the grid resolves `[0, ε]`.
    pub early_ratio: Option<f64>,
    pub epsilon: f64,
}

/// Distance between the solution started on `ω(t₀)` and the adiabatic
/// approximation `e^{−iΛ/ε} ω`, on the path grid.
pub fn adiabatic_error(model: &Model, path: &EigenPath, cfg: &IntegratorConfig) -> Result<AdiabaticError> {
    if path.len() < 2 {
        return Err(LabError::InvalidParameter("path needs at least two points".into()));
    }
    let run = propagate_on_grid(model, &path.omega[0], &path.times, cfg)?;
    let error: Vec<f64> = run
        .states
        .iter()
        .zip(&path.omega)
        .zip(&path.phase)
        .map(|((v, w), &l)| (v - w * c(0.0, -l / cfg.epsilon).exp()).norm())
        .collect();
    let t0 = path.times[0];
    let early_ratio = path
        .times
        .iter()
        .zip(&error)
        .filter(|(t, _)| (**t - t0).abs() > 0.0 && (**t - t0).abs() <= cfg.epsilon * (1.0 + 1e-12))
        .map(|(t, e)| e / (t - t0).abs())
        .reduce(f64::max);
    let sup = error.iter().cloned().fold(0.0, f64::max);
    Ok(AdiabaticError { times: path.times.clone(), error, sup, early_ratio, epsilon: cfg.epsilon })
}
