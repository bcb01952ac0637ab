//! Dense complex linear algebra helpers built on nalgebra.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn real_vec(v: &[f64]) -> CVec {
    CVec::from_iterator(v.len(), v.iter().map(|&x| cr(x)))
}

pub fn real_mat(m: &RMat) -> CMat {
    m.map(cr)
}

/// `|a><b|`
pub fn outer(a: &CVec, b: &CVec) -> CMat {
    a * b.adjoint()
}

/// `<a|b>`, antilinear in `a`.
#[inline]
pub fn inner(a: &CVec, b: &CVec) -> C64 {
    a.dotc(b)
}

pub fn hermiticity_residual(h: &CMat) -> f64 {
    (h - h.adjoint()).norm()
}

pub fn conjugation_residual(h: &CMat) -> f64 {
    h.iter().map(|z| 4.0 * z.im * z.im).sum::<f64>().sqrt()
}

pub fn is_exactly_real(h: &CMat) -> bool {
    h.iter().all(|z| z.im == 0.0)
}

/// Modulus-squared of each component, the argument `[v]` of the nonlinearity.
pub fn moduli_sq(v: &CVec, p: usize) -> Vec<f64> {
    (0..p).map(|j| v[j].norm_sqr()).collect()
}

pub fn max_imag(v: &CVec) -> f64 {
    v.iter().fold(0.0f64, |m, z| m.max(z.im.abs()))
}

/// Eigen-decomposition of a Hermitian matrix with ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Columns are orthonormal eigenvectors in the order of `values`.
    pub vectors: CMat,
}

pub fn eigh(h: &CMat) -> HermitianEigen {
    let n = h.nrows();
    let (vals, vecs) = if is_exactly_real(h) {
        let e = SymmetricEigen::new(h.map(|z| z.re));
        (e.eigenvalues.iter().copied().collect::<Vec<_>>(), e.eigenvectors.map(cr))
    } else {
        let e = SymmetricEigen::new(h.clone());
        (e.eigenvalues.iter().copied().collect::<Vec<_>>(), e.eigenvectors)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let values = order.iter().map(|&k| vals[k]).collect();
    let vectors = CMat::from_fn(n, n, |i, j| vecs[(i, order[j])]);
    HermitianEigen { values, vectors }
}

impl HermitianEigen {
    pub fn column(&self, k: usize) -> CVec {
        self.vectors.column(k).into_owned()
    }

    /// `V f(Λ) V*` for a scalar function of the eigenvalues.
    pub fn apply_fn(&self, f: impl Fn(f64) -> C64) -> CMat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            let s = f(l);
            for i in 0..n {
                scaled[(i, j)] *= s;
            }
        }
        scaled * self.vectors.adjoint()
    }

    /// `V f(k, Λ) V*` where `k` is the column index.
    pub fn apply_fn_masked(&self, f: impl Fn(usize, f64) -> C64) -> CMat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            let s = f(j, l);
            for i in 0..n {
                scaled[(i, j)] *= s;
            }
        }
        scaled * self.vectors.adjoint()
    }
}

/// `exp(-i tau H)` for Hermitian `H`; unitary to rounding.
pub fn expm_i_hermitian(h: &CMat, tau: f64) -> CMat {
    eigh(h).apply_fn(|l| C64::from_polar(1.0, -tau * l))
}

/// General matrix exponential (scaling and squaring with a Padé kernel).
pub fn expm(a: &CMat) -> CMat {
    a.clone().exp()
}

pub fn spectral_norm(a: &CMat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone().singular_values().iter().fold(0.0f64, |m, &s| m.max(s))
}

pub fn singular_values(a: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn smallest_singular_value_real(a: &RMat) -> f64 {
    a.clone().singular_values().iter().fold(f64::INFINITY, |m, &s| m.min(s))
}

/// Right and left eigenvectors of a general square matrix.
#[derive(Clone, Debug)]
pub struct GeneralEigen {
    pub values: Vec<C64>,
    /// Unit-norm right eigenvectors as columns.
    pub right: CMat,
    /// Left eigenvectors as columns, scaled so that `<left_j|right_j> = 1`.
    pub left: CMat,
}

/// Eigen-decomposition through the complex Schur form. Eigenvectors of
/// (numerically) repeated eigenvalues are not meaningful individually;
/// callers needing those use [`riesz_projector`].
pub fn general_eigen(a: &CMat) -> GeneralEigen {
    let n = a.nrows();
    let (q, t) = Schur::new(a.clone()).unpack();
    let values: Vec<C64> = (0..n).map(|k| t[(k, k)]).collect();
    let smin = (f64::EPSILON * t.norm()).max(f64::MIN_POSITIVE);
    let guard = |d: C64| if d.norm() < smin { cr(smin) } else { d };
    let mut right = CMat::zeros(n, n);
    let mut left = CMat::zeros(n, n);
    for k in 0..n {
        let lk = values[k];
        let mut y = CVec::zeros(n);
        y[k] = cr(1.0);
        for i in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                s += t[(i, j)] * y[j];
            }
            y[i] = -s / guard(t[(i, i)] - lk);
        }
        let mut x = CVec::zeros(n);
        x[k] = cr(1.0);
        for j in (k + 1)..n {
            let mut s = C64::new(0.0, 0.0);
            for i in k..j {
                s += x[i] * t[(i, j)];
            }
            x[j] = -s / guard(t[(j, j)] - lk);
        }
        let mut psi = &q * y;
        let nrm = psi.norm();
        psi /= cr(nrm);
        let mut phi = &q * x.map(|z| z.conj());
        let ov = inner(&phi, &psi);
        phi /= ov.conj();
        right.set_column(k, &psi);
        left.set_column(k, &phi);
    }
    GeneralEigen { values, right, left }
}

/// Spectral projector of the eigenvalues of `a` inside the circle
/// `|z - center| = radius`, by the trapezoidal rule on the Riesz integral.
pub fn riesz_projector(a: &CMat, center: C64, radius: f64, nodes: usize) -> CMat {
    let n = a.nrows();
    let mut p = CMat::zeros(n, n);
    for k in 0..nodes {
        let e = C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / nodes as f64);
        let z = center + e * radius;
        let mut m = -a.clone();
        for i in 0..n {
            m[(i, i)] += z;
        }
        let inv = m.try_inverse().expect("contour passes through the spectrum");
        p += inv * (e * radius);
    }
    p / cr(nodes as f64)
}

/// Roots of `c[0] + c[1] z + ... + c[n] z^n` from the companion matrix.
pub fn companion_roots(coeffs: &[C64]) -> Vec<C64> {
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].norm() == 0.0 {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let mut m = CMat::zeros(deg, deg);
    for i in 1..deg {
        m[(i, i - 1)] = cr(1.0);
    }
    for i in 0..deg {
        m[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let t = Schur::new(m).unpack().1;
    (0..deg).map(|k| t[(k, k)]).collect()
}

/// Evaluates a polynomial given by ascending coefficients.
pub fn poly_eval(coeffs: &[C64], z: C64) -> C64 {
    coeffs.iter().rev().fold(C64::new(0.0, 0.0), |acc, &a| acc * z + a)
}

/// Product of two polynomials in ascending coefficient order.
pub fn poly_mul(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Gram–Schmidt orthonormalisation of `v` against the unit vectors in `basis`.
pub fn orthogonalize(v: &CVec, basis: &[CVec]) -> CVec {
    let mut w = v.clone();
    for _ in 0..2 {
        for b in basis {
            let s = inner(b, &w);
            w -= b * s;
        }
    }
    let n = w.norm();
    w / cr(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, seed: u64) -> CMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CMat::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn eigh_reconstructs() {
        let a = random_matrix(7, 1);
        let h = &a + a.adjoint();
        let e = eigh(&h);
        let rec = e.apply_fn(cr);
        assert!((rec - &h).norm() < 1e-12 * h.norm());
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn hermitian_exponential_is_unitary() {
        let a = random_matrix(6, 2);
        let h = &a + a.adjoint();
        let u = expm_i_hermitian(&h, 0.7);
        assert!((u.adjoint() * &u - identity(6)).norm() < 1e-13);
        let via_pade = expm(&(h * c(0.0, -0.7)));
        assert!((via_pade - u).norm() < 1e-11);
    }

    #[test]
    fn general_eigen_left_right_pairs() {
        let a = random_matrix(8, 3);
        let e = general_eigen(&a);
        for k in 0..8 {
            let psi = e.right.column(k).into_owned();
            let phi = e.left.column(k).into_owned();
            assert!((&a * &psi - &psi * e.values[k]).norm() < 1e-11);
            assert!((a.adjoint() * &phi - &phi * e.values[k].conj()).norm() < 1e-10 * phi.norm());
            for j in 0..8 {
                let d = inner(&e.left.column(j).into_owned(), &psi);
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((d - cr(expect)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn riesz_projector_matches_rank_one_formula() {
        let a = random_matrix(5, 4);
        let e = general_eigen(&a);
        let k = 2;
        let psi = e.right.column(k).into_owned();
        let phi = e.left.column(k).into_owned();
        let rank_one = outer(&psi, &phi);
        let gap = (0..5)
            .filter(|&j| j != k)
            .map(|j| (e.values[j] - e.values[k]).norm())
            .fold(f64::INFINITY, f64::min);
        let p = riesz_projector(&a, e.values[k], 0.5 * gap, 128);
        assert!((p - rank_one).norm() < 1e-9);
    }

    #[test]
    fn companion_roots_of_known_polynomial() {
        // (z - 1)(z + 2)(z - 3i)
        let p = poly_mul(&poly_mul(&[cr(-1.0), cr(1.0)], &[cr(2.0), cr(1.0)]), &[c(0.0, -3.0), cr(1.0)]);
        let mut roots = companion_roots(&p);
        roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        let expect = [cr(-2.0), c(0.0, 3.0), cr(1.0)];
        for (r, e) in roots.iter().zip(expect.iter()) {
            assert!((r - e).norm() < 1e-12);
        }
        assert!(poly_eval(&p, cr(1.0)).norm() < 1e-14);
    }
}
