//! The doubled linearisation `F = F₀ + G` of the evolution around a
//! nonlinear eigenvector, its biorthogonal spectral data, the
//! finite-rank perturbation determinant, and the realness discriminant.

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use crate::eigenpath::EigenPath;
use crate::error::{LabError, Result};
use crate::linalg::{
    companion_roots, cr, eigh, general_eigen, inner, moduli_sq, outer, poly_eval, poly_mul, riesz_projector,
    singular_values, spectral_norm, CMat, CVec, HermitianEigen, C64,
};
use crate::model::{spectral_decompose, Model};

pub type RVec = DVector<f64>;

/// `F = F₀ + G` at one time, with `F₀ = diag(H − λ, −conj(H − λ))` and
/// `G = Σⱼ |μⱼ⟩⟨νⱼ|`.
#[derive(Clone, Debug)]
pub struct DoubledOperator {
    pub t: f64,
    pub f: CMat,
    pub f0: CMat,
    pub g: CMat,
    pub h_shift: CMat,
    pub omega: CVec,
    pub v: Vec<CVec>,
    pub mu: Vec<CVec>,
    pub nu: Vec<CVec>,
    h_eigen: HermitianEigen,
}

fn block_diag(a: &CMat, b: &CMat) -> CMat {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = CMat::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (m, m)).copy_from(b);
    out
}

fn stack(a: &CVec, b: &CVec) -> CVec {
    let n = a.len();
    CVec::from_fn(n + b.len(), |i, _| if i < n { a[i] } else { b[i - n] })
}

impl DoubledOperator {
    /// Assembles the operator from a shifted Hamiltonian (with `ω` in its
    /// kernel) and the vectors `vⱼ`.
    pub fn from_parts(t: f64, h_shift: CMat, omega: CVec, v: Vec<CVec>) -> Result<Self> {
        let n = h_shift.nrows();
        if omega.len() != n || v.iter().any(|x| x.len() != n) || v.len() > n {
            return Err(LabError::InvalidParameter("inconsistent dimensions for the doubled operator".into()));
        }
        let f0 = block_diag(&h_shift, &(-h_shift.map(|z| z.conj())));
        let mut mu = Vec::with_capacity(v.len());
        let mut nu = Vec::with_capacity(v.len());
        let mut g = CMat::zeros(2 * n, 2 * n);
        for (j, vj) in v.iter().enumerate() {
            let m = stack(vj, &(-vj.map(|z| z.conj())));
            let mut top = CVec::zeros(n);
            let mut bottom = CVec::zeros(n);
            top[j] = omega[j];
            bottom[j] = omega[j].conj();
            let nj = stack(&top, &bottom);
            g += outer(&m, &nj);
            mu.push(m);
            nu.push(nj);
        }
        let h_eigen = eigh(&h_shift);
        Ok(DoubledOperator { t, f: &f0 + &g, f0, g, h_shift, omega, v, mu, nu, h_eigen })
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn p(&self) -> usize {
        self.v.len()
    }

    /// True when `H − λ`, `ω` and all `vⱼ` are real.
    pub fn is_real(&self) -> bool {
        let real = |x: &CVec| x.iter().all(|z| z.im == 0.0);
        self.h_shift.iter().all(|z| z.im == 0.0) && real(&self.omega) && self.v.iter().all(real)
    }

    /// Largest `|⟨ω|vⱼ⟩|`; the `vⱼ` are orthogonal to `ω` by construction.
    pub fn perp_residual(&self) -> f64 {
        self.v.iter().map(|x| inner(&self.omega, x).norm()).fold(0.0, f64::max)
    }

    /// Number of singular values of `G` above `rel_tol·‖F‖`.
    pub fn g_rank(&self, rel_tol: f64) -> usize {
        let scale = spectral_norm(&self.f);
        singular_values(&self.g).iter().filter(|&&x| x > rel_tol * scale).count()
    }

    /// `σ(F₀)` as the eigenvalues of `H − λ` and their negatives.
    pub fn unperturbed_spectrum(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.h_eigen.values.iter().flat_map(|&e| [e, -e]).collect();
        out.sort_by(|a, b| a.total_cmp(b));
        out
    }

    fn kernel_column(&self) -> usize {
        (0..self.dim())
            .max_by(|&a, &b| {
                inner(&self.h_eigen.column(a), &self.omega).norm().total_cmp(&inner(&self.h_eigen.column(b), &self.omega).norm())
            })
            .unwrap()
    }
}

/// Builds `F` at grid index `k` of a path.
pub fn build_f(model: &Model, path: &EigenPath, k: usize) -> Result<DoubledOperator> {
    build_f_at(model, path.times[k], &path.omega[k])
}

/// Builds `F` at `(t, ω)` for a nonlinear eigenvector `ω`, with
/// `vⱼ = (∂ₓⱼH − ⟨ω|∂ₓⱼH ω⟩) ω`.
pub fn build_f_at(model: &Model, t: f64, omega: &CVec) -> Result<DoubledOperator> {
    let x = moduli_sq(omega, model.p());
    let h = model.h(t, &x)?;
    let lambda = inner(omega, &(&h * omega)).re;
    let mut h_shift = h;
    for i in 0..h_shift.nrows() {
        h_shift[(i, i)] -= lambda;
    }
    let mut v = Vec::with_capacity(model.p());
    for j in 0..model.p() {
        let d = model.dh_dx(t, &x, j)?;
        let dw = &d * omega;
        let dl = inner(omega, &dw).re;
        v.push(dw - omega * cr(dl));
    }
    DoubledOperator::from_parts(t, h_shift, omega.clone(), v)
}

/// A group of eigenvalues of `F` closer than the cluster tolerance.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub center: C64,
    pub members: Vec<usize>,
    pub projector: CMat,
    /// `‖(F − ℓ̄)ℙ‖`
    pub nilpotent_norm: f64,
    /// `1/|⟨φ|ψ⟩|` for unit vectors (singletons), `‖ℙ‖` otherwise.
    pub condition: f64,
}

impl Cluster {
    pub fn rank(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug)]
pub struct BiorthogonalSpectrum {
    /// Sorted by real part, then imaginary part.
    pub eigenvalues: Vec<C64>,
    /// Unit-norm right eigenvectors.
    pub right: Vec<CVec>,
    /// Left eigenvectors with `⟨φⱼ|ψⱼ⟩ = 1`.
    pub left: Vec<CVec>,
    pub clusters: Vec<Cluster>,
    /// Cluster index per eigenvalue.
    pub cluster_of: Vec<usize>,
    pub kernel_cluster: Option<usize>,
    pub cluster_tol: f64,
    pub max_imag: f64,
    pub realness_verdict: bool,
}

impl BiorthogonalSpectrum {
    pub fn kernel_projector(&self) -> Option<&CMat> {
        self.kernel_cluster.map(|k| &self.clusters[k].projector)
    }

    /// `‖Σ ℙⱼ − I‖`
    pub fn completeness_residual(&self) -> f64 {
        let n = self.eigenvalues.len();
        let mut s = -CMat::identity(n, n);
        for cl in &self.clusters {
            s += &cl.projector;
        }
        spectral_norm(&s)
    }

    /// `max ‖ℙⱼℙₖ − δⱼₖℙⱼ‖`
    pub fn annihilation_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, pa) in self.clusters.iter().enumerate() {
            for (b, pb) in self.clusters.iter().enumerate() {
                let prod = &pa.projector * &pb.projector;
                let r = if a == b { (prod - &pa.projector).norm() } else { prod.norm() };
                worst = worst.max(r);
            }
        }
        worst
    }

    /// `max |⟨φⱼ|ψₖ⟩ − δⱼₖ|` over pairs of singleton clusters.
    pub fn biorthogonality_residual(&self) -> f64 {
        let singles: Vec<usize> =
            (0..self.eigenvalues.len()).filter(|&j| self.clusters[self.cluster_of[j]].rank() == 1).collect();
        let mut worst: f64 = 0.0;
        for &j in &singles {
            for &k in &singles {
                let d = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((inner(&self.left[j], &self.right[k]) - d).norm());
            }
        }
        worst
    }

    /// Largest distance from an eigenvalue `z` off `σ(F₀)` to the nearest of
    /// `z̄, −z, −z̄` in the spectrum.
    pub fn quadruple_symmetry_residual(&self, unperturbed: &[f64], off_tol: f64) -> f64 {
        let nearest = |w: C64| self.eigenvalues.iter().map(|e| (e - w).norm()).fold(f64::INFINITY, f64::min);
        let mut worst: f64 = 0.0;
        for &z in &self.eigenvalues {
            let off = unperturbed.iter().all(|&e| (z - cr(e)).norm() > off_tol);
            if off {
                for w in [z.conj(), -z, -z.conj()] {
                    worst = worst.max(nearest(w));
                }
            }
        }
        worst
    }

    /// CSV rows `t, Re ℓ, Im ℓ, condition, nilpotent norm, cluster id`.
    pub fn csv_rows(&self, t: f64) -> Vec<Vec<f64>> {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let cl = &self.clusters[self.cluster_of[j]];
                vec![t, l.re, l.im, cl.condition, cl.nilpotent_norm, self.cluster_of[j] as f64]
            })
            .collect()
    }
}

pub const SPECTRUM_CSV_HEADER: [&str; 6] = ["t", "re_l", "im_l", "condition", "nilpotent_norm", "cluster"];

/// Default clustering tolerance `10⁻⁶·‖F‖`.
pub fn default_cluster_tol(f: &CMat) -> f64 {
    1e-6 * spectral_norm(f).max(f64::MIN_POSITIVE)
}

const RIESZ_NODES: usize = 64;
const MAX_CONDITION: f64 = 1e8;

pub fn spectrum_f(op: &DoubledOperator, cluster_tol: Option<f64>) -> Result<BiorthogonalSpectrum> {
    spectrum_of_matrix(&op.f, cluster_tol)
}

/// Biorthogonal decomposition of a general matrix. Simple eigenvalues get
/// rank-one projectors from the paired left/right vectors; clusters get
/// Riesz projectors on a circle around the cluster mean.
pub fn spectrum_of_matrix(f: &CMat, cluster_tol: Option<f64>) -> Result<BiorthogonalSpectrum> {
    let n = f.nrows();
    let tol = cluster_tol.unwrap_or_else(|| default_cluster_tol(f));
    let ge = general_eigen(f);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ge.values[a].re.total_cmp(&ge.values[b].re).then(ge.values[a].im.total_cmp(&ge.values[b].im)));
    let eigenvalues: Vec<C64> = order.iter().map(|&k| ge.values[k]).collect();
    let right: Vec<CVec> = order.iter().map(|&k| ge.right.column(k).into_owned()).collect();
    let left: Vec<CVec> = order.iter().map(|&k| ge.left.column(k).into_owned()).collect();

    // Single-linkage grouping.
    let mut cluster_of: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            if (eigenvalues[a] - eigenvalues[b]).norm() <= tol {
                let (ra, rb) = (root(&mut cluster_of, a), root(&mut cluster_of, b));
                cluster_of[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut ids: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut assign = vec![0usize; n];
    for j in 0..n {
        let r = root(&mut cluster_of, j);
        let id = match ids.iter().position(|&x| x == r) {
            Some(i) => i,
            None => {
                ids.push(r);
                members.push(Vec::new());
                ids.len() - 1
            }
        };
        members[id].push(j);
        assign[j] = id;
    }

    let mut clusters = Vec::with_capacity(members.len());
    for m in members {
        let center = m.iter().map(|&j| eigenvalues[j]).sum::<C64>() / cr(m.len() as f64);
        let mut shifted = f.clone();
        for i in 0..n {
            shifted[(i, i)] -= center;
        }
        let (projector, condition, nilpotent_norm) = if m.len() == 1 {
            let j = m[0];
            let cond = left[j].norm();
            if cond > MAX_CONDITION {
                return Err(LabError::IllConditioned { index: j, condition: cond });
            }
            let p = outer(&right[j], &left[j]);
            let resid = (&shifted * &right[j]).norm() * left[j].norm();
            (p, cond, resid)
        } else {
            let outside = (0..n)
                .filter(|j| !m.contains(j))
                .map(|j| (eigenvalues[j] - center).norm())
                .fold(f64::INFINITY, f64::min);
            let spread = m.iter().map(|&j| (eigenvalues[j] - center).norm()).fold(0.0, f64::max);
            let radius = if outside.is_finite() { 0.5 * outside } else { 1.0 + 2.0 * spread };
            let p = riesz_projector(f, center, radius.max(2.0 * spread), RIESZ_NODES);
            let cond = spectral_norm(&p);
            let nil = spectral_norm(&(&shifted * &p));
            (p, cond, nil)
        };
        clusters.push(Cluster { center, members: m, projector, nilpotent_norm, condition });
    }
    let kernel_cluster = clusters
        .iter()
        .enumerate()
        .filter(|(_, cl)| cl.center.norm() <= tol)
        .min_by(|a, b| a.1.center.norm().total_cmp(&b.1.center.norm()))
        .map(|(i, _)| i);
    let max_imag = eigenvalues.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    Ok(BiorthogonalSpectrum {
        eigenvalues,
        right,
        left,
        clusters,
        cluster_of: assign,
        kernel_cluster,
        cluster_tol: tol,
        max_imag,
        realness_verdict: max_imag <= tol,
    })
}

const MIN_DISTANCE_TO_F0: f64 = 1e-8;

/// `w(z) = det(δⱼₖ + ⟨νₖ|(F₀ − z)⁻¹μⱼ⟩)`.
pub fn aw_determinant(op: &DoubledOperator, z: C64) -> Result<C64> {
    let e = &op.h_eigen;
    let distance = e.values.iter().flat_map(|&l| [(z - l).norm(), (z + l).norm()]).fold(f64::INFINITY, f64::min);
    if distance <= MIN_DISTANCE_TO_F0 {
        return Err(LabError::TooCloseToUnperturbedSpectrum { distance });
    }
    let n = op.dim();
    let p = op.p();
    // (F₀ − z)⁻¹μⱼ = (Σ ψᵢ cᵢⱼ/(eᵢ − z), Σ ψ̄ᵢ c̄ᵢⱼ/(eᵢ + z)) with cᵢⱼ = ⟨ψᵢ|vⱼ⟩.
    let mut m = CMat::identity(p, p);
    for j in 0..p {
        let mut top = CVec::zeros(n);
        let mut bottom = CVec::zeros(n);
        for (i, &l) in e.values.iter().enumerate() {
            let psi = e.column(i);
            let cij = inner(&psi, &op.v[j]);
            top += &psi * (cij / (cr(l) - z));
            bottom += psi.map(|x| x.conj()) * (cij.conj() / (cr(l) + z));
        }
        for k in 0..p {
            m[(j, k)] += op.omega[k].conj() * top[k] + op.omega[k] * bottom[k];
        }
    }
    Ok(m.determinant())
}

/// The rational form of `w` for `p = 1` over the distinct nonzero
/// eigenvalues `λₖ` of `H − λ` with projectors `Pₖ`:
/// `w = w̃ / Πₖ(λₖ² − z²)`.
#[derive(Clone, Debug)]
pub struct AwRationalP1 {
    pub lambdas: Vec<f64>,
    pub projectors: Vec<CMat>,
    /// `aₖ = ⟨e₁|Pₖ v₁⟩`
    pub a: Vec<C64>,
    pub omega1: C64,
    /// Ascending coefficients of `w̃`, degree `2N′`.
    pub numerator: Vec<C64>,
}

impl AwRationalP1 {
    pub fn new(op: &DoubledOperator) -> Result<Self> {
        if op.p() != 1 {
            return Err(LabError::NotScalarNonlinearity { p: op.p() });
        }
        let tol = 1e-10 * spectral_norm(&op.h_shift).max(1.0);
        let sd = spectral_decompose(&op.h_shift, tol);
        let zero = (0..sd.eigenvalues.len()).min_by(|&a, &b| sd.eigenvalues[a].abs().total_cmp(&sd.eigenvalues[b].abs())).unwrap();
        let mut lambdas = Vec::new();
        let mut projectors = Vec::new();
        for (k, &l) in sd.eigenvalues.iter().enumerate() {
            if k != zero {
                lambdas.push(l);
                projectors.push(sd.projectors[k].clone());
            }
        }
        let a: Vec<C64> = projectors.iter().map(|pk| (pk * &op.v[0])[0]).collect();
        let omega1 = op.omega[0];
        let factor = |l: f64| vec![cr(l * l), cr(0.0), cr(-1.0)];
        let mut numerator = vec![cr(1.0)];
        for &l in &lambdas {
            numerator = poly_mul(&numerator, &factor(l));
        }
        for (k, &lk) in lambdas.iter().enumerate() {
            // conj(ω₁) aₖ (λₖ + z) + ω₁ conj(aₖ) (λₖ − z)
            let (p, q) = (omega1.conj() * a[k], omega1 * a[k].conj());
            let mut term = vec![(p + q) * lk, p - q];
            for (i, &li) in lambdas.iter().enumerate() {
                if i != k {
                    term = poly_mul(&term, &factor(li));
                }
            }
            for (i, t) in term.into_iter().enumerate() {
                numerator[i] += t;
            }
        }
        Ok(AwRationalP1 { lambdas, projectors, a, omega1, numerator })
    }

    pub fn eval(&self, z: C64) -> C64 {
        let den = self.lambdas.iter().fold(cr(1.0), |acc, &l| acc * (cr(l * l) - z * z));
        self.numerator_at(z) / den
    }

    /// `w̃(z)` from its product form, which stays accurate where the
    /// expanded coefficients cancel.
    pub fn numerator_at(&self, z: C64) -> C64 {
        let f: Vec<C64> = self.lambdas.iter().map(|&l| cr(l * l) - z * z).collect();
        let others = |k: usize| f.iter().enumerate().filter(|(i, _)| *i != k).fold(cr(1.0), |acc, (_, &x)| acc * x);
        let mut total = f.iter().fold(cr(1.0), |acc, &x| acc * x);
        for (k, &lk) in self.lambdas.iter().enumerate() {
            let (p, q) = (self.omega1.conj() * self.a[k], self.omega1 * self.a[k].conj());
            total += (p * (lk + z) + q * (lk - z)) * others(k);
        }
        total
    }

    /// Roots of `w̃`, polished by Newton on the coefficient form.
    pub fn roots(&self) -> Vec<C64> {
        let d: Vec<C64> = self.numerator.iter().enumerate().skip(1).map(|(k, &a)| a * (k as f64)).collect();
        let mut roots = companion_roots(&self.numerator);
        for r in roots.iter_mut() {
            for _ in 0..8 {
                let dv = poly_eval(&d, *r);
                if dv.norm() == 0.0 {
                    break;
                }
                let step = poly_eval(&self.numerator, *r) / dv;
                *r -= step;
                if step.norm() <= 1e-15 * r.norm().max(1.0) {
                    break;
                }
            }
        }
        roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        roots
    }

    /// `sₖ = 2λₖ Π_{j≠k}(λⱼ² − λₖ²) / w̃(λₖ)`.
    pub fn s(&self, k: usize) -> Result<C64> {
        let lk = self.lambdas[k];
        let prod = self.lambdas.iter().enumerate().filter(|(j, _)| *j != k).fold(1.0, |acc, (_, &l)| acc * (l * l - lk * lk));
        let w = self.numerator_at(cr(lk));
        let scale = self.numerator.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if w.norm() <= 1e-12 * scale {
            return Err(LabError::NumeratorVanishes { k });
        }
        Ok(cr(2.0 * lk * prod) / w)
    }

    /// `conj(ω₁) sₖ ⟨e₁|Pₖ v₁⟩`, equal to one whenever `w̃(λₖ) ≠ 0`.
    pub fn normalization(&self, k: usize) -> Result<C64> {
        Ok(self.omega1.conj() * self.s(k)? * self.a[k])
    }
}

pub fn aw_roots_p1(op: &DoubledOperator) -> Result<Vec<C64>> {
    Ok(AwRationalP1::new(op)?.roots())
}

/// Spectral projector of `F` for the eigenvalue `λₖ` kept from a degenerate
/// eigenvalue of `H − λ` (`p = 1`):
/// `ℙₖ = diag(Pₖ(I − conj(ω₁) sₖ |v₁⟩⟨e₁|)Pₖ, 0)`.
pub fn p1_eigenprojector(op: &DoubledOperator, k: usize) -> Result<CMat> {
    let rat = AwRationalP1::new(op)?;
    if k >= rat.lambdas.len() {
        return Err(LabError::InvalidParameter(format!("eigenvalue index {k} out of range")));
    }
    let n = op.dim();
    let pk = &rat.projectors[k];
    if op.v[0].iter().all(|z| *z == cr(0.0)) {
        return Ok(block_diag(pk, &CMat::zeros(n, n)));
    }
    let s = rat.s(k)?;
    let mut e1 = CVec::zeros(n);
    e1[0] = cr(1.0);
    let inner_op = CMat::identity(n, n) - outer(&op.v[0], &e1) * (rat.omega1.conj() * s);
    let top = pk * inner_op * pk;
    Ok(block_diag(&top, &CMat::zeros(n, n)))
}

/// `ℙ₀ = [I + (F₀)⁻¹_{Q̃₀} G]⁻¹ P̃₀`, the rank-two projector on the kernel of `F`.
pub fn kernel_projector(op: &DoubledOperator, cluster_tol: Option<f64>) -> Result<CMat> {
    let n = op.dim();
    let tol = cluster_tol.unwrap_or_else(|| default_cluster_tol(&op.f));
    let schur = nalgebra::Schur::new(op.f.clone()).unpack().1;
    let mut ev: Vec<C64> = (0..2 * n).map(|k| schur[(k, k)]).collect();
    ev.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let gap = ev.get(2).map(|z| z.norm()).unwrap_or(f64::INFINITY);
    if gap <= 10.0 * tol {
        return Err(LabError::GapTooSmall { gap });
    }
    let w = &op.omega;
    let wb = w.map(|z| z.conj());
    let p0 = block_diag(&outer(w, w), &outer(&wb, &wb));
    let zero = op.kernel_column();
    let e = &op.h_eigen;
    let top = e.apply_fn_masked(|i, l| if i == zero { cr(0.0) } else { cr(1.0 / l) });
    let bottom = top.map(|z| -z.conj());
    let reduced = block_diag(&top, &bottom);
    let m = CMat::identity(2 * n, 2 * n) + reduced * &op.g;
    m.lu().solve(&p0).ok_or(LabError::GapTooSmall { gap })
}

/// `(Re ω₁⟨e₁|u₁⟩ − ω₂⟨e₂|u₂⟩)² + 4 ω₁ω₂⟨e₁|u₂⟩⟨e₂|u₁⟩` with `ωⱼ = ⟨ω|eⱼ⟩`.
/// Negative values make the two eigenvalues of `F` born from a doubly
/// degenerate level non-real when the rest of the spectrum is far away.
pub fn realness_discriminant(e1: &RVec, e2: &RVec, omega: &RVec, u1: &RVec, u2: &RVec) -> Result<f64> {
    for (name, u) in [("u1", u1), ("u2", u2)] {
        let d = u.dot(omega);
        if d.abs() > 1e-10 * u.norm().max(1.0) {
            return Err(LabError::ConstraintViolated(format!("{name} is not orthogonal to omega (overlap {d:e})")));
        }
    }
    let (w1, w2) = (omega.dot(e1), omega.dot(e2));
    let a = w1 * e1.dot(u1) - w2 * e2.dot(u2);
    Ok(a * a + 4.0 * w1 * w2 * e1.dot(u2) * e2.dot(u1))
}

/// A real instance `(ω, u₁, u₂)` in the standard basis `e₁, e₂`.
#[derive(Clone, Debug, Serialize)]
pub struct RealnessInstance {
    pub draw: usize,
    pub omega: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub discriminant: f64,
}

fn basis(n: usize, j: usize) -> RVec {
    let mut e = RVec::zeros(n);
    e[j] = 1.0;
    e
}

fn gaussian_vec(n: usize, rng: &mut impl Rng) -> RVec {
    // Box–Muller keeps the draw independent of optional distribution crates.
    RVec::from_fn(n, |_, _| {
        let (a, b): (f64, f64) = (rng.random::<f64>().max(f64::MIN_POSITIVE), rng.random());
        (-2.0 * a.ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos()
    })
}

/// Random search for an instance with discriminant below `threshold`.
pub fn search_negative_discriminant(dim: usize, max_draws: usize, threshold: f64, rng: &mut impl Rng) -> Option<RealnessInstance> {
    let (e1, e2) = (basis(dim, 0), basis(dim, 1));
    for draw in 1..=max_draws {
        let omega = gaussian_vec(dim, rng).normalize();
        let mut u1 = gaussian_vec(dim, rng);
        let mut u2 = gaussian_vec(dim, rng);
        u1 -= &omega * u1.dot(&omega);
        u2 -= &omega * u2.dot(&omega);
        let d = realness_discriminant(&e1, &e2, &omega, &u1, &u2).ok()?;
        if d < threshold {
            return Some(RealnessInstance {
                draw,
                omega: omega.iter().copied().collect(),
                u1: u1.iter().copied().collect(),
                u2: u2.iter().copied().collect(),
                discriminant: d,
            });
        }
    }
    None
}

impl RealnessInstance {
    pub fn vectors(&self) -> (RVec, RVec, RVec) {
        (RVec::from_vec(self.omega.clone()), RVec::from_vec(self.u1.clone()), RVec::from_vec(self.u2.clone()))
    }

    /// Discriminant with `(e₁, e₂)` replaced by `(R e₁, R e₂)`.
    pub fn discriminant_in_frame(&self, r: &nalgebra::DMatrix<f64>) -> Result<f64> {
        let (w, u1, u2) = self.vectors();
        let n = w.len();
        realness_discriminant(&(r * basis(n, 0)), &(r * basis(n, 1)), &w, &u1, &u2)
    }

    /// Doubled operator of `H − λ = λ₁P₁ + λ₂P₂` with `P₀ = |ω⟩⟨ω|`,
    /// `P₁` the projector on `span(u₁, u₂)`, and `vⱼ = scale·uⱼ` (`p = 2`).
    pub fn assemble(&self, lambda1: f64, lambda2: f64, scale: f64) -> Result<DoubledOperator> {
        let (w, u1, u2) = self.vectors();
        let n = w.len();
        let b1 = u1.normalize();
        let b2 = (&u2 - &b1 * b1.dot(&u2)).normalize();
        let p0 = &w * w.transpose();
        let p1 = &b1 * b1.transpose() + &b2 * b2.transpose();
        let p2 = nalgebra::DMatrix::<f64>::identity(n, n) - &p0 - &p1;
        let h = (p1 * lambda1 + p2 * lambda2).map(cr);
        let to_c = |x: &RVec| CVec::from_fn(n, |i, _| cr(x[i]));
        DoubledOperator::from_parts(0.0, h, to_c(&w), vec![to_c(&u1) * cr(scale), to_c(&u2) * cr(scale)])
    }
}

/// Random real orthogonal `R` with `R ω = ω`.
pub fn random_rotation_fixing(omega: &RVec, rng: &mut impl Rng) -> nalgebra::DMatrix<f64> {
    let n = omega.len();
    let w = omega.normalize();
    // Orthonormal basis B of ω^⊥ from the QR factorisation of [ω | random].
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    m.set_column(0, &w);
    for j in 1..n {
        m.set_column(j, &gaussian_vec(n, rng));
    }
    let q = m.qr().q();
    let b = q.columns(1, n - 1).into_owned();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n - 1, n - 1);
    for j in 0..n - 1 {
        a.set_column(j, &gaussian_vec(n - 1, rng));
    }
    let g = a.qr().q();
    &w * w.transpose() + &b * g * b.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigenpath::{continue_path, FixedPointConfig};
    use crate::linalg::{c, real_mat, real_vec};
    use crate::model::{random_real_affine, ModelConfig};
    use crate::scalar_fn::ScalarFunction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flip_op() -> DoubledOperator {
        let m = ModelConfig::TwoLevelFlip { gamma: ScalarFunction::sinusoid(1.0, 0.5, 1.0) }.build().unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        build_f_at(&m, 0.4, &real_vec(&[s, s])).unwrap()
    }

    fn random_op(n: usize, p: usize, delta: f64, seed: u64) -> DoubledOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_real_affine(n, p, delta, &mut rng);
        let seed_v = m.tracked_eigenpair(0.0, &vec![0.3; p]).unwrap().vector;
        let cfg = FixedPointConfig { continuation_step: 0.1, ..Default::default() };
        let path = continue_path(&m, (0.0, 0.2), &seed_v, &cfg).unwrap();
        build_f(&m, &path, 1).unwrap()
    }

    /// `H − λ` with a doubly degenerate level, `ω = e₀`, and a generic `v ⊥ ω`.
    fn degenerate_p1(seed: u64) -> DoubledOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            m.set_column(j, &gaussian_vec(n, &mut rng));
        }
        m.set_column(0, &{
            let mut e = RVec::zeros(n);
            e[0] = 0.6;
            e[1] = 0.8;
            e
        });
        let q = m.qr().q();
        let diag = nalgebra::DMatrix::from_diagonal(&RVec::from_vec(vec![0.0, 1.0, 1.0, 2.5, 4.0]));
        let h = real_mat(&(&q * diag * q.transpose()));
        let omega = CVec::from_fn(n, |i, _| cr(q[(i, 0)]));
        let mut v = gaussian_vec(n, &mut rng) * 0.3;
        let w = q.column(0).into_owned();
        v -= &w * v.dot(&w);
        DoubledOperator::from_parts(0.0, h, omega, vec![v.map(cr)]).unwrap()
    }

    #[test]
    fn flip_eigenvector_gives_unperturbed_operator() {
        let op = flip_op();
        assert!(op.g.norm() < 1e-15);
        assert_eq!(op.g_rank(1e-10), 0);
        let sp = spectrum_f(&op, None).unwrap();
        let g = 1.0 + 0.5 * 0.4f64.sin();
        let want = [-g, 0.0, 0.0, g];
        for (l, w) in sp.eigenvalues.iter().zip(want) {
            assert!((l - cr(w)).norm() < 1e-12);
        }
        assert!(sp.clusters.iter().all(|c| c.nilpotent_norm < 1e-12));
        for cl in &sp.clusters {
            assert!((&cl.projector - cl.projector.adjoint()).norm() < 1e-10);
        }
        assert!(sp.completeness_residual() < 1e-10);
        assert_eq!(sp.clusters[sp.kernel_cluster.unwrap()].rank(), 2);
    }

    #[test]
    fn x_independent_model_has_no_perturbation() {
        let m = ModelConfig::Diagonal { values: vec![0.0, 1.0, 2.0], p: 2 }.build().unwrap();
        let op = build_f_at(&m, 0.0, &real_vec(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(op.g.norm(), 0.0);
        assert!((aw_determinant(&op, c(0.3, 0.2)).unwrap() - cr(1.0)).norm() < 1e-15);
        let p0 = kernel_projector(&op, None).unwrap();
        let w = &op.omega;
        let want = block_diag(&outer(w, w), &outer(w, w));
        assert!((p0 - want).norm() < 1e-15);
    }

    #[test]
    fn double_well_operator_structure() {
        let m = ModelConfig::DoubleWellMcww {
            kappa: ScalarFunction::constant(0.3),
            omega: ScalarFunction::constant(1.0),
            detuning: Some(ScalarFunction::constant(0.2)),
        }
        .build()
        .unwrap();
        let cfg = FixedPointConfig { continuation_step: 0.05, ..Default::default() };
        let path = continue_path(&m, (0.0, 0.5), &real_vec(&[0.7, -0.7]), &cfg).unwrap();
        for k in [0, 5, 10] {
            let op = build_f(&m, &path, k).unwrap();
            assert!(op.perp_residual() < 1e-8);
            assert!(op.g_rank(1e-10) <= 2);
            let g: CMat = op.mu.iter().zip(&op.nu).map(|(a, b)| outer(a, b)).fold(CMat::zeros(4, 4), |acc, x| acc + x);
            assert!((g - &op.g).norm() < 1e-12);
            let sp = spectrum_f(&op, None).unwrap();
            let kp = kernel_projector(&op, None).unwrap();
            assert!((&kp - sp.kernel_projector().unwrap()).norm() < 1e-8);
            assert!((&kp * &kp - &kp).norm() < 1e-10);
            assert!((&op.f * &kp).norm() < 1e-10);
        }
    }

    #[test]
    fn kernel_projector_annihilates_path_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_real_affine(5, 2, 0.05, &mut rng);
        let seed = m.tracked_eigenpair(0.0, &[0.3, 0.3]).unwrap().vector;
        let cfg = FixedPointConfig { continuation_step: 0.01, ..Default::default() };
        let path = continue_path(&m, (0.0, 1.0), &seed, &cfg).unwrap();
        let dots = path.omega_dot();
        for k in (0..path.len()).step_by(10) {
            let op = build_f(&m, &path, k).unwrap();
            let p0 = kernel_projector(&op, None).unwrap();
            let chi = stack(&dots[k], &dots[k].map(|z| z.conj()));
            assert!((&p0 * chi).norm() < 1e-6);
        }
    }

    #[test]
    fn block_hermitian_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = CMat::from_fn(4, 4, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let a = &a + a.adjoint();
        let f = block_diag(&a, &(-a.map(|z| z.conj())));
        let sp = spectrum_of_matrix(&f, None).unwrap();
        let ev = eigh(&a).values;
        let mut want: Vec<f64> = ev.iter().flat_map(|&e| [e, -e]).collect();
        want.sort_by(|x, y| x.total_cmp(y));
        for (l, w) in sp.eigenvalues.iter().zip(want) {
            assert!((l - cr(w)).norm() < 1e-10);
        }
        assert!(sp.realness_verdict);
        for cl in &sp.clusters {
            assert!((&cl.projector - cl.projector.adjoint()).norm() < 1e-9);
        }
    }

    #[test]
    fn random_real_operator_properties() {
        for (seed, (n, p)) in [(1u64, (4usize, 1usize)), (2, (6, 2)), (3, (8, 1))] {
            let op = random_op(n, p, 0.04, seed);
            let sp = spectrum_f(&op, None).unwrap();
            assert!(sp.realness_verdict, "max imag {}", sp.max_imag);
            assert!(sp.completeness_residual() < 1e-8);
            assert!(sp.annihilation_residual() < 1e-8);
            assert!(sp.biorthogonality_residual() < 1e-10);
            let kc = &sp.clusters[sp.kernel_cluster.unwrap()];
            assert_eq!(kc.rank(), 2);
            assert!(kc.nilpotent_norm < 1e-8);
            assert!(sp.quadruple_symmetry_residual(&op.unperturbed_spectrum(), 1e-8) < 1e-8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..100 {
                let z = c(rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 2.0 - 1.0);
                let w = aw_determinant(&op, z).unwrap();
                let rel = |a: C64, b: C64| (a - b).norm() / a.norm().max(1e-300);
                assert!(rel(w, aw_determinant(&op, -z).unwrap()) < 1e-10);
                assert!(rel(w, aw_determinant(&op, -z.conj()).unwrap().conj()) < 1e-10);
            }
        }
    }

    #[test]
    fn p1_determinant_closed_form_and_roots() {
        let op = random_op(6, 1, 0.04, 7);
        let rat = AwRationalP1::new(&op).unwrap();
        assert_eq!(rat.numerator.len(), 2 * rat.lambdas.len() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let z = c(rng.random::<f64>() * 8.0 - 4.0, rng.random::<f64>() * 2.0 - 1.0);
            let a = aw_determinant(&op, z).unwrap();
            assert!((a - rat.eval(z)).norm() / a.norm() < 1e-10);
        }
        let roots = rat.roots();
        assert_eq!(roots.len(), 2 * rat.lambdas.len());
        let sp = spectrum_f(&op, None).unwrap();
        for r in &roots {
            assert!(r.im.abs() < 1e-8);
            let near = sp.eigenvalues.iter().map(|e| (e - r).norm()).fold(f64::INFINITY, f64::min);
            assert!(near < 1e-6, "root {r} unmatched ({near:e})");
            let mirrored = roots.iter().map(|s| (s + r).norm()).fold(f64::INFINITY, f64::min);
            assert!(mirrored < 1e-8);
        }
        assert!(aw_roots_p1(&random_op(5, 2, 0.04, 1)).is_err());
    }

    #[test]
    fn p1_unperturbed_roots_are_shifted_eigenvalues() {
        let op = flip_op();
        let roots = aw_roots_p1(&op).unwrap();
        let g = 1.0 + 0.5 * 0.4f64.sin();
        assert_eq!(roots.len(), 2);
        assert!((roots[0] + g).norm() < 1e-12 && (roots[1] - g).norm() < 1e-12);
    }

    #[test]
    fn p1_projector_on_degenerate_level() {
        let op = degenerate_p1(21);
        let rat = AwRationalP1::new(&op).unwrap();
        let k = rat.lambdas.iter().position(|&l| (l - 1.0).abs() < 1e-9).unwrap();
        assert!((rat.normalization(k).unwrap() - cr(1.0)).norm() < 1e-10);
        let pk = p1_eigenprojector(&op, k).unwrap();
        assert!((&pk * &pk - &pk).norm() < 1e-8);
        let riesz = riesz_projector(&op.f, cr(1.0), 0.05, 64);
        assert!((&pk - &riesz).norm() < 1e-8, "{:e}", (&pk - &riesz).norm());
        assert!((pk.trace() - cr(1.0)).norm() < 1e-10);
        // Simple levels give the zero projector.
        let simple = rat.lambdas.iter().position(|&l| (l - 2.5).abs() < 1e-9).unwrap();
        assert!(p1_eigenprojector(&op, simple).unwrap().norm() < 1e-10);
    }

    #[test]
    fn p1_projector_without_perturbation_is_the_linear_one() {
        let mut op = degenerate_p1(4);
        op = DoubledOperator::from_parts(0.0, op.h_shift.clone(), op.omega.clone(), vec![CVec::zeros(5)]).unwrap();
        let rat = AwRationalP1::new(&op).unwrap();
        assert!(matches!(rat.s(0), Err(LabError::NumeratorVanishes { .. })));
        let k = rat.lambdas.iter().position(|&l| (l - 1.0).abs() < 1e-9).unwrap();
        let pk = p1_eigenprojector(&op, k).unwrap();
        assert!((pk.view((0, 0), (5, 5)) - &rat.projectors[k]).norm() < 1e-12);
    }

    #[test]
    fn discriminant_examples() {
        let n = 5;
        let omega = RVec::from_vec(vec![0.5, 0.5, 0.5, 0.5, 0.0]);
        let u = RVec::from_vec(vec![1.0, -1.0, 0.3, -0.3, 2.0]);
        let (e1, e2) = (basis(n, 0), basis(n, 1));
        let d = realness_discriminant(&e1, &e2, &omega, &u, &u).unwrap();
        let w = 0.5;
        assert!((d - ((w * 1.0 - w * -1.0) * (w * 1.0 - w * -1.0) + 4.0 * w * w * 1.0 * -1.0)).abs() < 1e-14);
        assert!(realness_discriminant(&e1, &e2, &omega, &omega, &u).is_err());
    }

    #[test]
    fn negative_discriminant_gives_complex_pair_and_flips_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let inst = search_negative_discriminant(5, 100_000, -0.1, &mut rng).expect("instance");
        let op = inst.assemble(1.0, 50.0, 0.1).unwrap();
        let sp = spectrum_f(&op, None).unwrap();
        assert!(!sp.realness_verdict);
        let pair = sp.eigenvalues.iter().filter(|z| z.im.abs() > 1e-3).count();
        assert!(pair >= 2);
        let (w, _, _) = inst.vectors();
        let flipped = (0..1000).any(|_| inst.discriminant_in_frame(&random_rotation_fixing(&w, &mut rng)).unwrap() > 0.0);
        assert!(flipped);
    }
}
