//! Hamiltonian families `H(t, x)`, their hypotheses, and the linear
//! spectral toolkit used by every other module.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{conjugation_residual, cr, eigh, hermiticity_residual, inner, outer, spectral_norm, CMat, CVec, RMat};
use crate::numerics::{gauss_hermite_functions, hermite_functions};
use crate::scalar_fn::ScalarFunction;

/// A point `(t, x)` of the parameter space; `x` has one entry per nonlinear component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl ParameterPoint {
    pub fn new(t: f64, x: Vec<f64>) -> Self {
        ParameterPoint { t, x }
    }
}

/// A smooth family of Hermitian matrices.
///
/// Implementations must return Hermitian matrices; derivatives are optional
/// and fall back to central differences in [`Model`].
pub trait Family: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn p(&self) -> usize;
    fn h(&self, t: f64, x: &[f64]) -> CMat;
    fn dh_dx(&self, _t: f64, _x: &[f64], _j: usize) -> Option<CMat> {
        None
    }
    fn dh_dt(&self, _t: f64, _x: &[f64]) -> Option<CMat> {
        None
    }
    /// `true` when `H` is entrywise real in the standard basis.
    fn is_real(&self) -> bool;
    /// The rotation family admits the scalar reduction `Y = cos(t θ(Y²)/2)`.
    fn rotation_profile(&self) -> Option<&ThetaProfile> {
        None
    }
}

/// A Hamiltonian family together with the tracked eigenvalue index and the
/// parameter box it may be evaluated on.
#[derive(Clone)]
pub struct Model {
    family: Arc<dyn Family>,
    /// Index into the sorted list of distinct eigenvalues.
    pub selected_index: usize,
    pub t_domain: (f64, f64),
    pub x_domain: (f64, f64),
    /// Relative central-difference step for derivative fallbacks.
    pub fd_step: f64,
    pub allow_finite_differences: bool,
    /// Eigenvalues closer than `degeneracy_rel_tol * ‖H‖` are merged.
    pub degeneracy_rel_tol: f64,
    /// Supremum of `‖∂ₓⱼH‖` over the last validation grid.
    pub delta_bound: Option<f64>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("family", &self.family)
            .field("selected_index", &self.selected_index)
            .field("t_domain", &self.t_domain)
            .field("x_domain", &self.x_domain)
            .finish()
    }
}

const HERMITICITY_REL_TOL: f64 = 1e-12;

impl Model {
    pub fn new(family: Arc<dyn Family>, selected_index: usize) -> Self {
        Model {
            family,
            selected_index,
            t_domain: (-0.5, 1.5),
            x_domain: (-0.5, 1.5),
            fd_step: 1e-5,
            allow_finite_differences: true,
            degeneracy_rel_tol: 1e-8,
            delta_bound: None,
        }
    }

    pub fn with_selected(mut self, index: usize) -> Self {
        self.selected_index = index;
        self
    }

    pub fn with_t_domain(mut self, a: f64, b: f64) -> Self {
        self.t_domain = (a, b);
        self
    }

    pub fn family(&self) -> &dyn Family {
        self.family.as_ref()
    }

    pub fn family_arc(&self) -> Arc<dyn Family> {
        Arc::clone(&self.family)
    }

    /// Same selection and domain, different family.
    pub fn with_family(&self, family: Arc<dyn Family>) -> Model {
        Model { family, ..self.clone() }
    }

    pub fn name(&self) -> &str {
        self.family.name()
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn p(&self) -> usize {
        self.family.p()
    }

    pub fn is_real(&self) -> bool {
        self.family.is_real()
    }

    pub fn in_domain(&self, t: f64, x: &[f64]) -> bool {
        let (t0, t1) = self.t_domain;
        let (x0, x1) = self.x_domain;
        t.is_finite()
            && t >= t0
            && t <= t1
            && x.len() == self.p()
            && x.iter().all(|&v| v.is_finite() && v >= x0 && v <= x1)
    }

    /// `H(t, x)` with domain, Hermiticity and realness checks.
    pub fn h(&self, t: f64, x: &[f64]) -> Result<CMat> {
        if !self.in_domain(t, x) {
            return Err(LabError::OutOfDomain { t, x: x.to_vec() });
        }
        let h = self.family.h(t, x);
        let bound = HERMITICITY_REL_TOL * h.norm();
        let residual = hermiticity_residual(&h);
        if residual > bound {
            return Err(LabError::NonHermitian { t, residual, bound });
        }
        if self.is_real() {
            let residual = conjugation_residual(&h);
            if residual > bound {
                return Err(LabError::NonHermitian { t, residual, bound });
            }
        }
        Ok(h)
    }

    pub fn evaluate_h(&self, q: &ParameterPoint) -> Result<CMat> {
        self.h(q.t, &q.x)
    }

    pub fn has_analytic_derivatives(&self, t: f64, x: &[f64]) -> bool {
        self.family.dh_dt(t, x).is_some() && (0..self.p()).all(|j| self.family.dh_dx(t, x, j).is_some())
    }

    /// `∂ₓⱼH(t, x)`, analytic when the family supplies it.
    pub fn dh_dx(&self, t: f64, x: &[f64], j: usize) -> Result<CMat> {
        if let Some(d) = self.family.dh_dx(t, x, j) {
            return Ok(d);
        }
        if !self.allow_finite_differences {
            return Err(LabError::DerivativeUnavailable(format!("∂x{} of {}", j + 1, self.name())));
        }
        let step = self.fd_step * (self.x_domain.1 - self.x_domain.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += step;
        xm[j] -= step;
        Ok((self.family.h(t, &xp) - self.family.h(t, &xm)) / cr(2.0 * step))
    }

    /// `∂ₜH(t, x)`, analytic when the family supplies it.
    pub fn dh_dt(&self, t: f64, x: &[f64]) -> Result<CMat> {
        if let Some(d) = self.family.dh_dt(t, x) {
            return Ok(d);
        }
        if !self.allow_finite_differences {
            return Err(LabError::DerivativeUnavailable(format!("∂t of {}", self.name())));
        }
        let step = self.fd_step * (self.t_domain.1 - self.t_domain.0);
        Ok((self.family.h(t + step, x) - self.family.h(t - step, x)) / cr(2.0 * step))
    }

    pub fn spectral(&self, t: f64, x: &[f64]) -> Result<SpectralDecomposition> {
        let h = self.h(t, x)?;
        let tol = self.degeneracy_rel_tol * h.norm().max(f64::MIN_POSITIVE);
        Ok(spectral_decompose(&h, tol))
    }

    /// The tracked eigenpair at `(t, x)`: eigenvalue, unit eigenvector and
    /// the full eigen-decomposition it came from.
    pub fn tracked_eigenpair(&self, t: f64, x: &[f64]) -> Result<TrackedEigen> {
        let h = self.h(t, x)?;
        tracked_from_matrix(&h, self.selected_index, self.degeneracy_rel_tol).ok_or(LabError::SimplicityViolation { t })
    }
}

/// The selected eigenpair of a Hermitian matrix plus its complement.
#[derive(Clone, Debug)]
pub struct TrackedEigen {
    pub lambda: f64,
    pub vector: CVec,
    /// Raw column index of `vector` in `eigen.vectors`.
    pub raw_index: usize,
    pub eigen: crate::linalg::HermitianEigen,
}

impl TrackedEigen {
    /// Reduced resolvent `S = Σ_{k≠j₀} P_k / (λ − λ_k)`.
    pub fn reduced_resolvent(&self) -> CMat {
        let l = self.lambda;
        let raw = self.raw_index;
        self.eigen.apply_fn_masked(|k, lk| if k == raw { cr(0.0) } else { cr(1.0 / (l - lk)) })
    }

    pub fn gap(&self) -> f64 {
        let v = &self.eigen.values;
        let mut g = f64::INFINITY;
        if self.raw_index > 0 {
            g = g.min(self.lambda - v[self.raw_index - 1]);
        }
        if self.raw_index + 1 < v.len() {
            g = g.min(v[self.raw_index + 1] - self.lambda);
        }
        g
    }
}

/// Picks the `selected`-th distinct eigenvalue and checks it is simple.
pub fn tracked_from_matrix(h: &CMat, selected: usize, rel_tol: f64) -> Option<TrackedEigen> {
    let eigen = eigh(h);
    let tol = rel_tol * h.norm().max(f64::MIN_POSITIVE);
    let groups = group_indices(&eigen.values, tol);
    let group = groups.get(selected)?;
    if group.len() != 1 {
        return None;
    }
    let raw_index = group[0];
    Some(TrackedEigen { lambda: eigen.values[raw_index], vector: eigen.column(raw_index), raw_index, eigen })
}

/// Value of the `selected`-th distinct eigenvalue, simple or not (clamped
/// to the largest).
pub fn selected_eigenvalue(h: &CMat, selected: usize, rel_tol: f64) -> f64 {
    let values = eigh(h).values;
    let tol = rel_tol * h.norm().max(f64::MIN_POSITIVE);
    let groups = group_indices(&values, tol);
    values[groups[selected.min(groups.len() - 1)][0]]
}

fn group_indices(values: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (k, &v) in values.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if v - values[*g.last().unwrap()] <= tol => g.push(k),
            _ => groups.push(vec![k]),
        }
    }
    groups
}

/// Eigenvalues (distinct, ascending) with orthogonal eigenprojectors.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub projectors: Vec<CMat>,
    /// Minimum separation of adjacent distinct eigenvalues (`∞` if only one).
    pub gap: f64,
}

impl SpectralDecomposition {
    pub fn reconstruct(&self) -> CMat {
        let n = self.projectors[0].nrows();
        self.eigenvalues.iter().zip(&self.projectors).fold(CMat::zeros(n, n), |acc, (&l, p)| acc + p * cr(l))
    }
}

/// Spectral decomposition of a Hermitian matrix; eigenvalues within
/// `degeneracy_tol` of their neighbour share one projector.
pub fn spectral_decompose(h: &CMat, degeneracy_tol: f64) -> SpectralDecomposition {
    let eigen = eigh(h);
    let groups = group_indices(&eigen.values, degeneracy_tol);
    let n = h.nrows();
    let mut eigenvalues = Vec::with_capacity(groups.len());
    let mut projectors = Vec::with_capacity(groups.len());
    let mut multiplicities = Vec::with_capacity(groups.len());
    for g in &groups {
        let mean = g.iter().map(|&k| eigen.values[k]).sum::<f64>() / g.len() as f64;
        let mut p = CMat::zeros(n, n);
        for &k in g {
            let v = eigen.column(k);
            p += outer(&v, &v);
        }
        eigenvalues.push(mean);
        projectors.push(p);
        multiplicities.push(g.len());
    }
    let gap = eigenvalues.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    SpectralDecomposition { eigenvalues, multiplicities, projectors, gap }
}

/// Measured hypotheses of a model over a parameter grid.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub points: usize,
    /// Minimum gap between adjacent distinct eigenvalues over the grid.
    pub gap: f64,
    /// Minimum distance from the tracked eigenvalue to the rest of the spectrum.
    pub tracked_gap: f64,
    /// `max_j sup ‖∂ₓⱼH‖` (operator norm).
    pub delta: f64,
    pub max_hermiticity_residual: f64,
    pub selected_simple_everywhere: bool,
    /// Times at which the tracked eigenvalue was degenerate or missing.
    pub simplicity_violations: Vec<ParameterPoint>,
    /// Points where the spectrum had fewer distinct eigenvalues than the dimension.
    pub gap_violations: Vec<ParameterPoint>,
    pub real_verdict: bool,
    /// `σ(H−λ) ∩ σ(−H+λ) = {0}` at every grid point.
    pub generic: bool,
    /// `8δ/g`, the contraction factor of the eigenvector fixed-point map.
    pub contraction_factor: f64,
}

/// Tensor grid `t × x^p` with `nt` and `nx` points per axis.
pub fn tensor_grid(p: usize, t: (f64, f64), nt: usize, x: (f64, f64), nx: usize) -> Vec<ParameterPoint> {
    let lin = |a: f64, b: f64, n: usize, k: usize| if n == 1 { a } else { a + (b - a) * k as f64 / (n - 1) as f64 };
    let mut pts = Vec::new();
    for it in 0..nt {
        let tv = lin(t.0, t.1, nt, it);
        let total = nx.pow(p as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut xs = Vec::with_capacity(p);
            for _ in 0..p {
                xs.push(lin(x.0, x.1, nx, rem % nx));
                rem /= nx;
            }
            pts.push(ParameterPoint::new(tv, xs));
        }
    }
    pts
}

pub fn validate_hypotheses(model: &Model, grid: &[ParameterPoint]) -> Result<HypothesisReport> {
    if grid.is_empty() {
        return Err(LabError::InvalidParameter("validation grid is empty".into()));
    }
    let n = model.dim();
    let mut report = HypothesisReport {
        points: grid.len(),
        gap: f64::INFINITY,
        tracked_gap: f64::INFINITY,
        delta: 0.0,
        max_hermiticity_residual: 0.0,
        selected_simple_everywhere: true,
        simplicity_violations: Vec::new(),
        gap_violations: Vec::new(),
        real_verdict: true,
        generic: true,
        contraction_factor: 0.0,
    };
    for q in grid {
        let h = model.evaluate_h(q)?;
        let norm = h.norm();
        report.max_hermiticity_residual = report.max_hermiticity_residual.max(hermiticity_residual(&h));
        if conjugation_residual(&h) > HERMITICITY_REL_TOL * norm {
            report.real_verdict = false;
        }
        let sd = spectral_decompose(&h, model.degeneracy_rel_tol * norm.max(f64::MIN_POSITIVE));
        if sd.eigenvalues.len() < n {
            report.gap_violations.push(q.clone());
        } else {
            report.gap = report.gap.min(sd.gap);
        }
        let j0 = model.selected_index;
        match sd.multiplicities.get(j0) {
            Some(1) => {
                let l0 = sd.eigenvalues[j0];
                for (k, &l) in sd.eigenvalues.iter().enumerate() {
                    if k != j0 {
                        report.tracked_gap = report.tracked_gap.min((l - l0).abs());
                    }
                }
                let tol = 1e-9 * norm.max(1.0);
                for (a, &la) in sd.eigenvalues.iter().enumerate() {
                    for (b, &lb) in sd.eigenvalues.iter().enumerate() {
                        if (a != j0 || b != j0) && ((la - l0) + (lb - l0)).abs() <= tol {
                            report.generic = false;
                        }
                    }
                }
            }
            _ => {
                report.selected_simple_everywhere = false;
                report.simplicity_violations.push(q.clone());
            }
        }
        for j in 0..model.p() {
            let d = model.dh_dx(q.t, &q.x, j)?;
            report.delta = report.delta.max(spectral_norm(&d));
        }
    }
    report.real_verdict &= model.is_real();
    report.contraction_factor = if report.tracked_gap > 0.0 { 8.0 * report.delta / report.tracked_gap } else { f64::INFINITY };
    Ok(report)
}

/// Caller-owned smooth eigenvector frame `φ(q) = P(q)φ₀ / ‖P(q)φ₀‖`.
///
/// Deterministic given the anchor. When `‖P(q)φ₀‖` drops below
/// `overlap_floor` the frame re-anchors at `q` with `φ₀ ← φ(q)`, which keeps
/// `φ` continuous across the splice.
#[derive(Clone, Debug)]
pub struct SmoothFrame {
    pub anchor: ParameterPoint,
    pub phi0: CVec,
    pub overlap_floor: f64,
    pub events: Vec<ReanchorEvent>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReanchorEvent {
    pub at: ParameterPoint,
    pub overlap: f64,
}

/// Frame value at a point with the ingredients needed for derivatives.
#[derive(Clone, Debug)]
pub struct FrameValue {
    pub phi: CVec,
    pub lambda: f64,
    /// `‖P(q)φ₀‖`
    pub overlap: f64,
    pub tracked: TrackedEigen,
}

pub const DEFAULT_OVERLAP_FLOOR: f64 = 0.840_896_415_253_714_6; // 2^{-1/4}

impl SmoothFrame {
    pub fn new(anchor: ParameterPoint, phi0: CVec) -> Self {
        let nrm = phi0.norm();
        SmoothFrame { anchor, phi0: phi0 / cr(nrm), overlap_floor: DEFAULT_OVERLAP_FLOOR, events: Vec::new() }
    }

    /// Anchors at the tracked eigenvector of `H(q)`, phased so that its
    /// largest-modulus component is real and positive.
    pub fn at_eigenvector(model: &Model, q: ParameterPoint) -> Result<Self> {
        let te = model.tracked_eigenpair(q.t, &q.x)?;
        let v = te.vector;
        let k = (0..v.len()).max_by(|&a, &b| v[a].norm().total_cmp(&v[b].norm())).unwrap();
        let phase = v[k] / cr(v[k].norm());
        Ok(SmoothFrame::new(q, v / phase))
    }

    /// Anchors at the projection of `seed` on the tracked eigenspace at `q`.
    pub fn from_seed(model: &Model, q: ParameterPoint, seed: &CVec) -> Result<Self> {
        let te = model.tracked_eigenpair(q.t, &q.x)?;
        let ov = inner(&te.vector, seed);
        if ov.norm() < 1e-12 * seed.norm() {
            return Err(LabError::AnchorDegenerate { overlap: ov.norm() });
        }
        Ok(SmoothFrame::new(q, &te.vector * (ov / cr(ov.norm()))))
    }

    /// Frame value without re-anchoring.
    pub fn value(&self, model: &Model, t: f64, x: &[f64]) -> Result<FrameValue> {
        let tracked = model.tracked_eigenpair(t, x)?;
        let ov = inner(&tracked.vector, &self.phi0);
        let overlap = ov.norm();
        if overlap < 1e-12 {
            return Err(LabError::AnchorDegenerate { overlap });
        }
        let phi = &tracked.vector * (ov / cr(overlap));
        Ok(FrameValue { phi, lambda: tracked.lambda, overlap, tracked })
    }

    /// `∂ₓⱼφ` for each `j` at a frame value.
    ///
    /// With `u = Pφ₀`, `∂u = (S ∂H P + P ∂H S) φ₀` and
    /// `∂φ = ∂u/‖u‖ − u Re⟨u|∂u⟩/‖u‖³`.
    pub fn dphi_dx(&self, model: &Model, t: f64, x: &[f64], value: &FrameValue) -> Result<Vec<CVec>> {
        let s = value.tracked.reduced_resolvent();
        let psi = &value.tracked.vector;
        let c0 = inner(psi, &self.phi0);
        let u = psi * c0;
        let un = u.norm();
        let s_phi0 = &s * &self.phi0;
        (0..model.p())
            .map(|j| {
                let dh = model.dh_dx(t, x, j)?;
                let du = &s * (&dh * psi) * c0 + psi * inner(psi, &(&dh * &s_phi0));
                let re = inner(&u, &du).re;
                Ok(du / cr(un) - &u * cr(re / (un * un * un)))
            })
            .collect()
    }

    /// The smooth eigenvector at `q`, re-anchoring when the overlap is low.
    pub fn smooth_eigenvector(&mut self, model: &Model, q: &ParameterPoint) -> Result<CVec> {
        let v = self.value(model, q.t, &q.x)?;
        self.maybe_reanchor(q, &v);
        Ok(v.phi)
    }

    /// Re-anchors at `q` if the overlap has dropped below the floor.
    pub fn maybe_reanchor(&mut self, q: &ParameterPoint, v: &FrameValue) -> bool {
        if v.overlap < self.overlap_floor {
            self.events.push(ReanchorEvent { at: q.clone(), overlap: v.overlap });
            self.anchor = q.clone();
            self.phi0 = v.phi.clone();
            true
        } else {
            false
        }
    }
}

// ---------------------------------------------------------------------------
// Builtin families

/// `H = [[0, γ(t) x], [γ(t) x, 0]]`, `p = 1`.
#[derive(Clone, Debug)]
pub struct TwoLevelFlip {
    pub gamma: ScalarFunction,
}

fn sigma_x(a: f64) -> CMat {
    CMat::from_row_slice(2, 2, &[cr(0.0), cr(a), cr(a), cr(0.0)])
}

impl Family for TwoLevelFlip {
    fn name(&self) -> &str {
        "two_level_flip"
    }
    fn dim(&self) -> usize {
        2
    }
    fn p(&self) -> usize {
        1
    }
    fn h(&self, t: f64, x: &[f64]) -> CMat {
        sigma_x(self.gamma.value(t) * x[0])
    }
    fn dh_dx(&self, t: f64, _x: &[f64], _j: usize) -> Option<CMat> {
        Some(sigma_x(self.gamma.value(t)))
    }
    fn dh_dt(&self, t: f64, x: &[f64]) -> Option<CMat> {
        Some(sigma_x(self.gamma.derivative(t) * x[0]))
    }
    fn is_real(&self) -> bool {
        true
    }
}

/// Two-mode condensate `H = [[κ x₁ + Δ/2, Ω], [Ω, κ x₂ − Δ/2]]`, `p = 2`.
///
/// With `Δ ≡ 0` the symmetric ground state `(1, −1)/√2` is a nonlinear
/// eigenvector for every `κ, Ω`, so the tracked path is constant.
#[derive(Clone, Debug)]
pub struct DoubleWell {
    pub kappa: ScalarFunction,
    pub omega: ScalarFunction,
    pub detuning: ScalarFunction,
}

impl Family for DoubleWell {
    fn name(&self) -> &str {
        "double_well_mcww"
    }
    fn dim(&self) -> usize {
        2
    }
    fn p(&self) -> usize {
        2
    }
    fn h(&self, t: f64, x: &[f64]) -> CMat {
        let k = self.kappa.value(t);
        let o = self.omega.value(t);
        let d = 0.5 * self.detuning.value(t);
        CMat::from_row_slice(2, 2, &[cr(k * x[0] + d), cr(o), cr(o), cr(k * x[1] - d)])
    }
    fn dh_dx(&self, t: f64, _x: &[f64], j: usize) -> Option<CMat> {
        let mut m = CMat::zeros(2, 2);
        m[(j, j)] = cr(self.kappa.value(t));
        Some(m)
    }
    fn dh_dt(&self, t: f64, x: &[f64]) -> Option<CMat> {
        let k = self.kappa.derivative(t);
        let o = self.omega.derivative(t);
        let d = 0.5 * self.detuning.derivative(t);
        Some(CMat::from_row_slice(2, 2, &[cr(k * x[0] + d), cr(o), cr(o), cr(k * x[1] - d)]))
    }
    fn is_real(&self) -> bool {
        true
    }
}

/// Shape of the angle `θ(s)` of the rotation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ThetaProfile {
    /// `scale · (π s + c sin 2πs)`
    Sine { c: f64, scale: f64 },
    /// `scale · π (s + a s (1 − s)(s − s0))`
    Cubic { a: f64, s0: f64, scale: f64 },
}

impl Default for ThetaProfile {
    fn default() -> Self {
        ThetaProfile::Sine { c: 1.5, scale: 1.0 }
    }
}

/// Location of the interior maximum of `θ` and the fold condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThetaShape {
    pub s_max: f64,
    pub y_max: f64,
    pub theta_max: f64,
    /// `cos(θ_max / 2) < y_max`: a fold occurs before `t = 1`.
    pub folds: bool,
}

impl ThetaProfile {
    pub fn theta(&self, s: f64) -> f64 {
        use std::f64::consts::PI;
        match *self {
            ThetaProfile::Sine { c, scale } => scale * (PI * s + c * (2.0 * PI * s).sin()),
            ThetaProfile::Cubic { a, s0, scale } => scale * PI * (s + a * s * (1.0 - s) * (s - s0)),
        }
    }

    pub fn dtheta(&self, s: f64) -> f64 {
        use std::f64::consts::PI;
        match *self {
            ThetaProfile::Sine { c, scale } => scale * (PI + 2.0 * PI * c * (2.0 * PI * s).cos()),
            ThetaProfile::Cubic { a, s0, scale } => {
                scale * PI * (1.0 + a * ((1.0 - 2.0 * s) * (s - s0) + s * (1.0 - s)))
            }
        }
    }

    /// Scans `θ` on `[0, 1]` for an interior local maximum below `π`.
    pub fn shape(&self) -> Result<ThetaShape> {
        let n = 20_000;
        let vals: Vec<f64> = (0..=n).map(|k| self.theta(k as f64 / n as f64)).collect();
        let k = (1..n)
            .find(|&k| vals[k] >= vals[k - 1] && vals[k] > vals[k + 1])
            .ok_or_else(|| LabError::InvalidParameter("θ has no interior local maximum on [0, 1]".into()))?;
        let s_max = crate::numerics::bisect(|s| self.dtheta(s), (k - 1) as f64 / n as f64, (k + 1) as f64 / n as f64, 1e-15)
            .unwrap_or(k as f64 / n as f64);
        let theta_max = self.theta(s_max);
        if theta_max >= std::f64::consts::PI {
            return Err(LabError::InvalidParameter(format!("θ_max = {theta_max} is not below π")));
        }
        let y_max = s_max.sqrt();
        Ok(ThetaShape { s_max, y_max, theta_max, folds: (0.5 * theta_max).cos() < y_max })
    }
}

/// `H = [[cos tθ(x), sin tθ(x)], [sin tθ(x), −cos tθ(x)]]`, `p = 1`, eigenvalues ±1.
#[derive(Clone, Debug)]
pub struct RotationBifurcation {
    pub theta: ThetaProfile,
}

impl RotationBifurcation {
    /// `r(t, Y) = Y − cos(t θ(Y²) / 2)`; its zeros in `[0, 1]` are the
    /// first components of the real nonlinear eigenvectors of eigenvalue +1.
    pub fn scalar_residual(&self, t: f64, y: f64) -> f64 {
        y - (0.5 * t * self.theta.theta(y * y)).cos()
    }

    pub fn scalar_residual_dy(&self, t: f64, y: f64) -> f64 {
        1.0 + (0.5 * t * self.theta.theta(y * y)).sin() * t * y * self.theta.dtheta(y * y)
    }
}

fn rotation_matrix(a: f64, scale: f64, derivative: bool) -> CMat {
    let (s, c) = a.sin_cos();
    let v = if derivative { [-s, c, c, s] } else { [c, s, s, -c] };
    CMat::from_row_slice(2, 2, &v.map(|e| cr(scale * e)))
}

impl Family for RotationBifurcation {
    fn name(&self) -> &str {
        "rotation_bifurcation"
    }
    fn dim(&self) -> usize {
        2
    }
    fn p(&self) -> usize {
        1
    }
    fn h(&self, t: f64, x: &[f64]) -> CMat {
        rotation_matrix(t * self.theta.theta(x[0]), 1.0, false)
    }
    fn dh_dx(&self, t: f64, x: &[f64], _j: usize) -> Option<CMat> {
        Some(rotation_matrix(t * self.theta.theta(x[0]), t * self.theta.dtheta(x[0]), true))
    }
    fn dh_dt(&self, t: f64, x: &[f64]) -> Option<CMat> {
        let th = self.theta.theta(x[0]);
        Some(rotation_matrix(t * th, th, true))
    }
    fn is_real(&self) -> bool {
        true
    }
    fn rotation_profile(&self) -> Option<&ThetaProfile> {
        Some(&self.theta)
    }
}

/// Galerkin truncation of `−½Δ + y⁸ − b(t) e^{x₂} (y − a(t) x₁)²` on the
/// first `n` eigenfunctions of a harmonic oscillator of length `basis_scale`.
#[derive(Clone, Debug)]
pub struct TruncatedAnharmonic {
    pub a: ScalarFunction,
    pub b: ScalarFunction,
    /// Constant factor applied to `b`.
    pub b_factor: f64,
    pub n: usize,
    pub basis_scale: f64,
    pub h0: RMat,
    pub y1: RMat,
    pub y2: RMat,
}

pub const MIN_TRUNCATION: usize = 8;

/// Matrices of `−½Δ + y⁸`, `y` and `y²` in the scaled oscillator basis
/// `ψ_k(y/L)/√L`, integrated by an `nq`-point Gauss–Hermite rule.
pub fn anharmonic_matrices(n: usize, nq: usize, basis_scale: f64) -> (RMat, RMat, RMat) {
    let (nodes, weights) = gauss_hermite_functions(nq);
    let psi: Vec<Vec<f64>> = nodes.iter().map(|&x| hermite_functions(n, x)).collect();
    let moment = |k: i32| {
        RMat::from_fn(n, n, |a, b| (0..nq).map(|i| weights[i] * psi[i][a] * psi[i][b] * nodes[i].powi(k)).sum())
    };
    let l = basis_scale;
    let x1 = moment(1);
    let x2 = moment(2);
    let x8 = moment(8);
    let number = RMat::from_fn(n, n, |a, b| if a == b { a as f64 + 0.5 } else { 0.0 });
    let kinetic = (number - &x2 * 0.5) / (l * l);
    let h0 = kinetic + x8 * l.powi(8);
    let h0 = (&h0 + h0.transpose()) * 0.5;
    let y1 = (&x1 + x1.transpose()) * (0.5 * l);
    let y2 = (&x2 + x2.transpose()) * (0.5 * l * l);
    (h0, y1, y2)
}

impl TruncatedAnharmonic {
    pub fn new(a: ScalarFunction, b: ScalarFunction, n: usize, quadrature: usize, basis_scale: f64) -> Result<Self> {
        if n < MIN_TRUNCATION {
            return Err(LabError::TruncationTooSmall { n, min: MIN_TRUNCATION });
        }
        if quadrature < n + 4 {
            return Err(LabError::InvalidParameter(format!(
                "quadrature size {quadrature} cannot integrate y⁸ matrix elements exactly for n = {n}"
            )));
        }
        if basis_scale <= 0.0 {
            return Err(LabError::InvalidParameter("basis_scale must be positive".into()));
        }
        let (h0, y1, y2) = anharmonic_matrices(n, quadrature, basis_scale);
        Ok(TruncatedAnharmonic { a, b, b_factor: 1.0, n, basis_scale, h0, y1, y2 })
    }

    /// `Y2 − 2 a x₁ Y1 + a² x₁² Id`
    fn shifted_square(&self, a: f64, x1: f64) -> RMat {
        let mut m = &self.y2 - &self.y1 * (2.0 * a * x1);
        for i in 0..self.n {
            m[(i, i)] += a * a * x1 * x1;
        }
        m
    }

    fn b(&self, t: f64) -> f64 {
        self.b_factor * self.b.value(t)
    }
}

impl Family for TruncatedAnharmonic {
    fn name(&self) -> &str {
        "truncated_anharmonic"
    }
    fn dim(&self) -> usize {
        self.n
    }
    fn p(&self) -> usize {
        2
    }
    fn h(&self, t: f64, x: &[f64]) -> CMat {
        let w = self.shifted_square(self.a.value(t), x[0]) * (-self.b(t) * x[1].exp());
        (&self.h0 + w).map(cr)
    }
    fn dh_dx(&self, t: f64, x: &[f64], j: usize) -> Option<CMat> {
        let a = self.a.value(t);
        let pre = -self.b(t) * x[1].exp();
        let m = if j == 0 {
            let mut d = &self.y1 * (-2.0 * a);
            for i in 0..self.n {
                d[(i, i)] += 2.0 * a * a * x[0];
            }
            d * pre
        } else {
            self.shifted_square(a, x[0]) * pre
        };
        Some(m.map(cr))
    }
    fn dh_dt(&self, t: f64, x: &[f64]) -> Option<CMat> {
        let a = self.a.value(t);
        let da = self.a.derivative(t);
        let e = x[1].exp();
        let db = self.b_factor * self.b.derivative(t);
        let mut d_sq = &self.y1 * (-2.0 * da * x[0]);
        for i in 0..self.n {
            d_sq[(i, i)] += 2.0 * a * da * x[0] * x[0];
        }
        let m = self.shifted_square(a, x[0]) * (-db * e) + d_sq * (-self.b(t) * e);
        Some(m.map(cr))
    }
    fn is_real(&self) -> bool {
        true
    }
}

/// An x-independent diagonal family `H = diag(values)`.
#[derive(Clone, Debug)]
pub struct ConstantDiagonal {
    pub values: Vec<f64>,
    pub p: usize,
}

impl Family for ConstantDiagonal {
    fn name(&self) -> &str {
        "diagonal"
    }
    fn dim(&self) -> usize {
        self.values.len()
    }
    fn p(&self) -> usize {
        self.p
    }
    fn h(&self, _t: f64, _x: &[f64]) -> CMat {
        CMat::from_diagonal(&crate::linalg::real_vec(&self.values))
    }
    fn dh_dx(&self, _t: f64, _x: &[f64], _j: usize) -> Option<CMat> {
        Some(CMat::zeros(self.values.len(), self.values.len()))
    }
    fn dh_dt(&self, _t: f64, _x: &[f64]) -> Option<CMat> {
        Some(CMat::zeros(self.values.len(), self.values.len()))
    }
    fn is_real(&self) -> bool {
        true
    }
}

/// `H(t, x) = A₀ + t A₁ + Σⱼ xⱼ Bⱼ`.
#[derive(Clone, Debug)]
pub struct AffineFamily {
    pub a0: CMat,
    pub a1: CMat,
    pub b: Vec<CMat>,
    pub real: bool,
}

impl Family for AffineFamily {
    fn name(&self) -> &str {
        "affine"
    }
    fn dim(&self) -> usize {
        self.a0.nrows()
    }
    fn p(&self) -> usize {
        self.b.len()
    }
    fn h(&self, t: f64, x: &[f64]) -> CMat {
        let mut h = &self.a0 + &self.a1 * cr(t);
        for (bj, &xj) in self.b.iter().zip(x) {
            h += bj * cr(xj);
        }
        h
    }
    fn dh_dx(&self, _t: f64, _x: &[f64], j: usize) -> Option<CMat> {
        Some(self.b[j].clone())
    }
    fn dh_dt(&self, _t: f64, _x: &[f64]) -> Option<CMat> {
        Some(self.a1.clone())
    }
    fn is_real(&self) -> bool {
        self.real
    }
}

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> RMat {
    let g = RMat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    g.qr().q()
}

fn random_symmetric_unit(n: usize, rng: &mut impl Rng) -> RMat {
    let g = RMat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let s = &g + g.transpose();
    let nrm = s.clone().singular_values().max();
    s / nrm
}

/// Random real affine family with eigenvalues of `A₀` near `0, 1, …, n−1`,
/// `‖A₁‖ = 0.1`, and `‖Bⱼ‖ = delta`; the tracked eigenvalue is the ground state.
pub fn random_real_affine(n: usize, p: usize, delta: f64, rng: &mut impl Rng) -> Model {
    let q = random_orthogonal(n, rng);
    let d = RMat::from_diagonal(&nalgebra::DVector::from_fn(n, |k, _| k as f64 + rng.random_range(-0.1..0.1)));
    let a0 = &q * d * q.transpose();
    let a1 = random_symmetric_unit(n, rng) * 0.1;
    let b = (0..p).map(|_| (random_symmetric_unit(n, rng) * delta).map(cr)).collect();
    let fam = AffineFamily { a0: a0.map(cr), a1: a1.map(cr), b, real: true };
    Model::new(Arc::new(fam), 0)
}

// ---------------------------------------------------------------------------
// Configuration

fn default_n() -> usize {
    64
}
fn default_quadrature() -> usize {
    200
}
fn default_basis_scale() -> f64 {
    0.4
}
fn default_p() -> usize {
    1
}

/// Declarative description of a builtin model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    TwoLevelFlip {
        gamma: ScalarFunction,
    },
    DoubleWellMcww {
        kappa: ScalarFunction,
        omega: ScalarFunction,
        #[serde(default)]
        detuning: Option<ScalarFunction>,
    },
    RotationBifurcation {
        #[serde(default)]
        theta: ThetaProfile,
    },
    TruncatedAnharmonic {
        a: ScalarFunction,
        b: ScalarFunction,
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_quadrature")]
        quadrature: usize,
        #[serde(default = "default_basis_scale")]
        basis_scale: f64,
        /// Rescale `b` so that `sup ‖∂ₓⱼH‖` over `t, x ∈ [0, 1]` equals this value.
        #[serde(default)]
        target_delta: Option<f64>,
    },
    Diagonal {
        values: Vec<f64>,
        #[serde(default = "default_p")]
        p: usize,
    },
}

/// Builds a builtin model from its name and a JSON parameter object.
pub fn builtin_model(name: &str, params: serde_json::Value) -> Result<Model> {
    const KNOWN: [&str; 5] = ["two_level_flip", "double_well_mcww", "rotation_bifurcation", "truncated_anharmonic", "diagonal"];
    if !KNOWN.contains(&name) {
        return Err(LabError::UnknownModel(name.to_string()));
    }
    let mut obj = match params {
        serde_json::Value::Object(m) => m,
        serde_json::Value::Null => serde_json::Map::new(),
        other => return Err(LabError::ConfigInvalid(format!("model parameters must be an object, got {other}"))),
    };
    obj.insert("name".into(), serde_json::Value::String(name.into()));
    let cfg: ModelConfig =
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| LabError::ConfigInvalid(e.to_string()))?;
    cfg.build()
}

impl ModelConfig {
    pub fn build(&self) -> Result<Model> {
        match self {
            ModelConfig::TwoLevelFlip { gamma } => {
                gamma.validate()?;
                Ok(Model::new(Arc::new(TwoLevelFlip { gamma: gamma.clone() }), 1))
            }
            ModelConfig::DoubleWellMcww { kappa, omega, detuning } => {
                kappa.validate()?;
                omega.validate()?;
                let detuning = detuning.clone().unwrap_or(ScalarFunction::constant(0.0));
                detuning.validate()?;
                Ok(Model::new(Arc::new(DoubleWell { kappa: kappa.clone(), omega: omega.clone(), detuning }), 0))
            }
            ModelConfig::RotationBifurcation { theta } => {
                theta.shape()?;
                Ok(Model::new(Arc::new(RotationBifurcation { theta: theta.clone() }), 1))
            }
            ModelConfig::TruncatedAnharmonic { a, b, n, quadrature, basis_scale, target_delta } => {
                a.validate()?;
                b.validate()?;
                let mut fam = TruncatedAnharmonic::new(a.clone(), b.clone(), *n, *quadrature, *basis_scale)?;
                if let Some(target) = target_delta {
                    let probe = Model::new(Arc::new(fam.clone()), 0);
                    let grid = tensor_grid(2, (0.0, 1.0), 5, (0.0, 1.0), 3);
                    let mut delta: f64 = 0.0;
                    for q in &grid {
                        for j in 0..2 {
                            delta = delta.max(spectral_norm(&probe.dh_dx(q.t, &q.x, j)?));
                        }
                    }
                    if delta == 0.0 {
                        return Err(LabError::InvalidParameter("b vanishes; cannot reach target δ".into()));
                    }
                    fam.b_factor = target / delta;
                }
                Ok(Model::new(Arc::new(fam), 0))
            }
            ModelConfig::Diagonal { values, p } => {
                if values.is_empty() || *p == 0 {
                    return Err(LabError::ConfigInvalid("diagonal model needs values and p ≥ 1".into()));
                }
                Ok(Model::new(Arc::new(ConstantDiagonal { values: values.clone(), p: *p }), 0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, companion_roots, poly_mul, C64};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flip(gamma: ScalarFunction) -> Model {
        ModelConfig::TwoLevelFlip { gamma }.build().unwrap()
    }

    #[test]
    fn two_level_flip_evaluates() {
        let m = flip(ScalarFunction::constant(1.0));
        let h = m.h(0.3, &[0.5]).unwrap();
        assert_eq!(h, sigma_x(0.5));
        assert_eq!(m.h(0.3, &[0.0]).unwrap(), CMat::zeros(2, 2));
        let m = flip(ScalarFunction::sinusoid(1.0, 0.5, 1.0));
        assert_eq!(m.evaluate_h(&ParameterPoint::new(0.0, vec![0.5])).unwrap(), sigma_x(0.5));
    }

    #[test]
    fn double_well_without_interaction_is_tunnelling_only() {
        let cfg = ModelConfig::DoubleWellMcww {
            kappa: ScalarFunction::constant(0.0),
            omega: ScalarFunction::constant(0.7),
            detuning: None,
        };
        let h = cfg.build().unwrap().h(0.2, &[0.3, 0.7]).unwrap();
        assert_eq!(h, sigma_x(0.7));
    }

    #[test]
    fn out_of_domain_rejected() {
        let m = flip(ScalarFunction::constant(1.0));
        assert!(matches!(m.h(0.0, &[3.0]), Err(LabError::OutOfDomain { .. })));
        assert!(matches!(m.h(f64::NAN, &[0.5]), Err(LabError::OutOfDomain { .. })));
    }

    #[derive(Debug)]
    struct Broken;
    impl Family for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn dim(&self) -> usize {
            2
        }
        fn p(&self) -> usize {
            1
        }
        fn h(&self, _t: f64, _x: &[f64]) -> CMat {
            CMat::from_row_slice(2, 2, &[cr(0.0), cr(1.0), cr(0.0), cr(0.0)])
        }
        fn is_real(&self) -> bool {
            true
        }
    }

    #[test]
    fn non_hermitian_family_rejected() {
        let m = Model::new(Arc::new(Broken), 0);
        assert!(matches!(m.h(0.0, &[0.5]), Err(LabError::NonHermitian { .. })));
    }

    #[test]
    fn spectral_decompose_flip_matrix() {
        let sd = spectral_decompose(&sigma_x(0.5), 1e-12);
        assert_eq!(sd.eigenvalues.len(), 2);
        assert!((sd.eigenvalues[0] + 0.5).abs() < 1e-15 && (sd.eigenvalues[1] - 0.5).abs() < 1e-15);
        let half = |s: f64| CMat::from_row_slice(2, 2, &[cr(0.5), cr(0.5 * s), cr(0.5 * s), cr(0.5)]);
        assert!((&sd.projectors[0] - half(-1.0)).norm() < 1e-15);
        assert!((&sd.projectors[1] - half(1.0)).norm() < 1e-15);
        assert!((sd.gap - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_decompose_diagonal_and_degenerate() {
        let h = CMat::from_diagonal(&crate::linalg::real_vec(&[0.0, 1.0, 2.0]));
        let sd = spectral_decompose(&h, 1e-12);
        for k in 0..3 {
            let mut e = CMat::zeros(3, 3);
            e[(k, k)] = cr(1.0);
            assert!((&sd.projectors[k] - e).norm() < 1e-15);
        }
        let h = CMat::from_diagonal(&crate::linalg::real_vec(&[1.0, 0.0, 1.0]));
        let sd = spectral_decompose(&h, 1e-8);
        assert_eq!(sd.multiplicities, vec![1, 2]);
    }

    /// Characteristic polynomial of a Hermitian matrix by the Faddeev–LeVerrier
    /// recursion, used as an independent oracle for the eigensolver.
    fn charpoly(a: &CMat) -> Vec<C64> {
        let n = a.nrows();
        let mut coeffs = vec![cr(0.0); n + 1];
        coeffs[n] = cr(1.0);
        let mut m = CMat::zeros(n, n);
        for k in 1..=n {
            m = a * &m + CMat::identity(n, n) * coeffs[n - k + 1];
            coeffs[n - k] = -(a * &m).trace() / cr(k as f64);
        }
        coeffs
    }

    #[test]
    fn eigenvalues_match_companion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = CMat::from_fn(6, 6, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let h = &g + g.adjoint();
        let mut roots: Vec<f64> = companion_roots(&charpoly(&h)).iter().map(|z| z.re).collect();
        roots.sort_by(|a, b| a.total_cmp(b));
        let sd = spectral_decompose(&h, 1e-12);
        for (a, b) in sd.eigenvalues.iter().zip(&roots) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        // sanity of the oracle itself
        let p = poly_mul(&[cr(-1.0), cr(1.0)], &[cr(-2.0), cr(1.0)]);
        let d = CMat::from_diagonal(&crate::linalg::real_vec(&[1.0, 2.0]));
        assert!(charpoly(&d).iter().zip(&p).all(|(a, b)| (a - b).norm() < 1e-14));
    }

    #[test]
    fn validate_flip_gap_is_twice_min_x() {
        let m = flip(ScalarFunction::constant(1.0));
        let grid = tensor_grid(1, (0.0, 1.0), 20, (0.05, 1.0), 20);
        let r = validate_hypotheses(&m, &grid).unwrap();
        assert!((r.gap - 0.1).abs() < 1e-14);
        assert!(r.selected_simple_everywhere);
        assert!(r.real_verdict);
        assert!((r.delta - 1.0).abs() < 1e-14);
        let with_zero = tensor_grid(1, (0.0, 1.0), 3, (0.0, 1.0), 3);
        let r = validate_hypotheses(&m, &with_zero).unwrap();
        assert!(!r.selected_simple_everywhere);
        assert!(!r.gap_violations.is_empty());
    }

    #[test]
    fn validate_constant_diagonal() {
        let m = ModelConfig::Diagonal { values: vec![0.0, 1.0], p: 1 }.build().unwrap();
        let r = validate_hypotheses(&m, &tensor_grid(1, (0.0, 1.0), 4, (0.0, 1.0), 4)).unwrap();
        assert_eq!(r.gap, 1.0);
        assert_eq!(r.delta, 0.0);
        assert!(r.generic);
    }

    #[test]
    fn validate_rotation_gap_two() {
        let m = ModelConfig::RotationBifurcation { theta: ThetaProfile::default() }.build().unwrap();
        let r = validate_hypotheses(&m, &tensor_grid(1, (0.0, 1.0), 11, (0.0, 1.0), 11)).unwrap();
        assert!((r.gap - 2.0).abs() < 1e-12);
        assert!(r.selected_simple_everywhere);
    }

    #[test]
    fn smooth_frame_identities() {
        let m = flip(ScalarFunction::sinusoid(1.0, 0.5, 1.0));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let phi0 = crate::linalg::real_vec(&[s, s]);
        let mut frame = SmoothFrame::new(ParameterPoint::new(0.0, vec![0.5]), phi0.clone());
        let at_anchor = frame.smooth_eigenvector(&m, &ParameterPoint::new(0.0, vec![0.5])).unwrap();
        assert!((at_anchor - &phi0).norm() < 1e-15);
        for &(t, x) in &[(0.1, 0.2), (0.9, 0.9), (0.5, 0.01)] {
            let v = frame.smooth_eigenvector(&m, &ParameterPoint::new(t, vec![x])).unwrap();
            assert!((v - &phi0).norm() < 1e-14);
        }
        assert!(frame.events.is_empty());
    }

    #[test]
    fn smooth_frame_rotation_family() {
        let theta = ThetaProfile::default();
        let m = ModelConfig::RotationBifurcation { theta: theta.clone() }.build().unwrap();
        let mut frame = SmoothFrame::new(ParameterPoint::new(0.0, vec![0.3]), crate::linalg::real_vec(&[1.0, 0.0]));
        for &(t, x) in &[(0.2, 0.3), (0.5, 0.6), (0.3, 0.9)] {
            let v = frame.smooth_eigenvector(&m, &ParameterPoint::new(t, vec![x])).unwrap();
            let a = 0.5 * t * theta.theta(x);
            assert!((v[0] - cr(a.cos())).norm() < 1e-13 && (v[1] - cr(a.sin())).norm() < 1e-13);
        }
    }

    #[test]
    fn smooth_frame_reanchors_and_stays_continuous() {
        let m = Model::new(Arc::new(RotationBifurcation { theta: ThetaProfile::Sine { c: 0.0, scale: 2.0 } }), 1);
        let mut frame = SmoothFrame::new(ParameterPoint::new(1.0, vec![0.0]), crate::linalg::real_vec(&[1.0, 0.0]));
        let mut prev: Option<CVec> = None;
        let steps = 400;
        for k in 0..=steps {
            let x = k as f64 / steps as f64;
            let v = frame.smooth_eigenvector(&m, &ParameterPoint::new(1.0, vec![x])).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-12);
            if let Some(p) = &prev {
                assert!((&v - p).norm() < 0.05);
            }
            prev = Some(v);
        }
        assert!(!frame.events.is_empty());
    }

    #[test]
    fn frame_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_real_affine(5, 2, 0.3, &mut rng);
        let frame = SmoothFrame::at_eigenvector(&m, ParameterPoint::new(0.4, vec![0.3, 0.6])).unwrap();
        let (t, x) = (0.5, vec![0.35, 0.55]);
        let v = frame.value(&m, t, &x).unwrap();
        let d = frame.dphi_dx(&m, t, &x, &v).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (frame.value(&m, t, &xp).unwrap().phi - frame.value(&m, t, &xm).unwrap().phi) / cr(2.0 * h);
            assert!((&fd - &d[j]).norm() < 1e-8, "j={j}");
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let cfgs = vec![
            ModelConfig::TwoLevelFlip { gamma: ScalarFunction::sinusoid(1.0, 0.5, 1.0) },
            ModelConfig::DoubleWellMcww {
                kappa: ScalarFunction::linear(0.2, 0.1),
                omega: ScalarFunction::constant(1.0),
                detuning: Some(ScalarFunction::linear(0.3, 0.4)),
            },
            ModelConfig::RotationBifurcation { theta: ThetaProfile::default() },
            ModelConfig::TruncatedAnharmonic {
                a: ScalarFunction::linear(0.2, 0.6),
                b: ScalarFunction::sinusoid(1.0, 0.3, 2.0),
                n: 12,
                quadrature: 40,
                basis_scale: 0.4,
                target_delta: Some(0.05),
            },
        ];
        for cfg in cfgs {
            let m = cfg.build().unwrap();
            let (t, x) = (0.37, vec![0.41; m.p()]);
            let h = 1e-6;
            let scale = m.h(t, &x).unwrap().norm().max(1.0);
            let fd_t = (m.family().h(t + h, &x) - m.family().h(t - h, &x)) / cr(2.0 * h);
            assert!((fd_t - m.dh_dt(t, &x).unwrap()).norm() < 1e-7 * scale, "{}", m.name());
            for j in 0..m.p() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (m.family().h(t, &xp) - m.family().h(t, &xm)) / cr(2.0 * h);
                assert!((fd - m.dh_dx(t, &x, j).unwrap()).norm() < 1e-7 * scale, "{} j={j}", m.name());
            }
        }
    }

    #[test]
    fn finite_difference_fallback_and_refusal() {
        let mut m = Model::new(Arc::new(Broken), 0);
        assert!(m.dh_dx(0.0, &[0.5], 0).unwrap().norm() == 0.0);
        m.allow_finite_differences = false;
        assert!(matches!(m.dh_dt(0.0, &[0.5]), Err(LabError::DerivativeUnavailable(_))));
    }

    #[test]
    fn theta_profiles() {
        let shape = ThetaProfile::default().shape().unwrap();
        assert!(shape.folds);
        assert!((shape.y_max - 0.5514).abs() < 1e-3);
        assert!(shape.theta_max < std::f64::consts::PI);
        let mild = ThetaProfile::Sine { c: 1.5, scale: 0.5 }.shape().unwrap();
        assert!(!mild.folds);
        assert!(ThetaProfile::Sine { c: 0.2, scale: 1.0 }.shape().is_err());
    }

    #[test]
    fn anharmonic_gaps_grow() {
        let m = ModelConfig::TruncatedAnharmonic {
            a: ScalarFunction::constant(0.0),
            b: ScalarFunction::constant(0.0),
            n: 64,
            quadrature: 200,
            basis_scale: 0.4,
            target_delta: None,
        }
        .build()
        .unwrap();
        let sd = m.spectral(0.0, &[0.0, 0.0]).unwrap();
        let gaps: Vec<f64> = sd.eigenvalues.windows(2).take(20).map(|w| w[1] - w[0]).collect();
        assert!(gaps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn builtin_names() {
        assert!(matches!(builtin_model("nope", serde_json::Value::Null), Err(LabError::UnknownModel(_))));
        let m = builtin_model("two_level_flip", serde_json::json!({"gamma": {"kind": "constant", "value": 1.0}})).unwrap();
        assert_eq!(m.name(), "two_level_flip");
        let err = builtin_model(
            "truncated_anharmonic",
            serde_json::json!({"a": {"kind": "constant", "value": 0.0}, "b": {"kind": "constant", "value": 0.0}, "n": 4}),
        );
        assert!(matches!(err, Err(LabError::TruncationTooSmall { n: 4, .. })));
    }
}
