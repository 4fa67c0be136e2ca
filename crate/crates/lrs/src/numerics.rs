//! Shared kernels: hard thresholding, clipping, QR, eigenvectors, least squares and
//! the Kronecker-structured solve behind the U update.

use nalgebra::{DMatrix, DVector};

use crate::error::{LrsError, Result};

/// Above this system size the structured solve switches to conjugate gradients.
pub const DENSE_SOLVE_LIMIT: usize = 2048;

/// Keeps entries with |v_i| > delta (strict), zeroes the rest.
pub fn hard_threshold(v: &DVector<f64>, delta: f64) -> DVector<f64> {
    let mut out = v.clone();
    hard_threshold_in_place(&mut out, delta);
    out
}

pub fn hard_threshold_in_place(v: &mut DVector<f64>, delta: f64) {
    for x in v.iter_mut() {
        if !(x.abs() > delta) {
            *x = 0.0;
        }
    }
}

/// Zeroes all but the `keep` largest-magnitude entries. Ties break toward the lower index.
pub fn keep_largest(v: &mut DVector<f64>, keep: usize) {
    let nnz = v.iter().filter(|x| **x != 0.0).count();
    if nnz <= keep {
        return;
    }
    let mut idx: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    for &i in &idx[keep..] {
        v[i] = 0.0;
    }
}

pub fn clip_vector(v: &DVector<f64>, rho: f64) -> DVector<f64> {
    let n = v.norm();
    if n > rho {
        v * (rho / n)
    } else {
        v.clone()
    }
}

/// Scalar clip by magnitude: sign is kept, |output| ≤ rho.
pub fn clip_scalar(x: f64, rho: f64) -> f64 {
    if x.abs() > rho {
        rho.copysign(x)
    } else {
        x
    }
}

pub fn clip_frobenius(m: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let n = m.norm();
    if n > rho {
        m * (rho / n)
    } else {
        m.clone()
    }
}

/// Thin QR with a positive diagonal in R, so the factorization is unique.
pub fn qr_orthonormalize(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (d, r) = m.shape();
    if r == 0 || d < r {
        return Err(LrsError::RankDeficient(format!("{d}x{r} matrix cannot have full column rank")));
    }
    let scale = m.norm();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut rf = qr.r();
    for j in 0..r {
        let p = rf[(j, j)];
        if !(p.abs() >= 1e-12 * scale) || scale == 0.0 {
            return Err(LrsError::RankDeficient(format!(
                "pivot {j} has magnitude {:.3e} against |m|_F = {scale:.3e}",
                p.abs()
            )));
        }
        if p < 0.0 {
            q.column_mut(j).neg_mut();
            rf.row_mut(j).neg_mut();
        }
    }
    Ok((q, rf))
}

/// argmin ‖a z − y‖² + ridge ‖z‖².
pub fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let (m, p) = a.shape();
    if m == 0 || y.len() != m {
        return Err(LrsError::Config(format!(
            "least squares needs matching nonempty rows (a has {m}, y has {})",
            y.len()
        )));
    }
    if ridge < 0.0 {
        return Err(LrsError::Config("ridge must be nonnegative".into()));
    }
    let gram = a.tr_mul(a);
    if ridge == 0.0 {
        check_gram_nonsingular(&gram)?;
        if m < p {
            return Err(LrsError::SingularSystem(format!("{m} rows for {p} unknowns")));
        }
        // QR on the design itself avoids squaring the condition number.
        let qr = a.clone().qr();
        let rhs = qr.q().tr_mul(y);
        return qr
            .r()
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| LrsError::SingularSystem("zero pivot in triangular solve".into()));
    }
    let mut reg = gram;
    for i in 0..p {
        reg[(i, i)] += ridge;
    }
    solve_spd(reg, &a.tr_mul(y))
}

/// Smallest eigenvalue of a Gram matrix against 1e−12 · trace.
pub(crate) fn check_gram_nonsingular(gram: &DMatrix<f64>) -> Result<()> {
    let trace = gram.trace();
    let lmin = gram.clone().symmetric_eigenvalues().min();
    if !(trace > 0.0) || lmin < 1e-12 * trace {
        return Err(LrsError::SingularSystem(format!(
            "smallest Gram eigenvalue {lmin:.3e} below 1e-12 * trace ({trace:.3e})"
        )));
    }
    Ok(())
}

/// Cholesky solve of a symmetric positive definite system.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| LrsError::SingularSystem("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Solves a dense square system: Cholesky first, LU when the matrix is indefinite.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LrsError::Config("dense solve needs a square system".into()));
    }
    let max_diag = a.diagonal().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if let Some(chol) = a.clone().cholesky() {
        let l = chol.l_dirty();
        let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot < 1e-13 * max_diag {
            return Err(LrsError::SingularSystem(format!(
                "pivot {min_pivot:.3e} is negligible against diagonal scale {max_diag:.3e}"
            )));
        }
        return Ok(chol.solve(b));
    }
    let lu = a.clone().lu();
    let x = lu
        .solve(b)
        .ok_or_else(|| LrsError::SingularSystem("LU factorization hit a zero pivot".into()))?;
    let res = (a * &x - b).norm();
    if !x.iter().all(|v| v.is_finite()) || res > 1e-8 * b.norm().max(f64::MIN_POSITIVE) {
        return Err(LrsError::SingularSystem(format!(
            "dense solve residual {res:.3e} too large"
        )));
    }
    Ok(x)
}

/// One term wwᵀ ⊗ XᵀX of the structured operator.
#[derive(Debug, Clone)]
pub struct GramBlock<'a> {
    /// r×r, typically w wᵀ.
    pub w_outer: DMatrix<f64>,
    /// d×d, typically XᵀX.
    pub gram: &'a DMatrix<f64>,
}

/// A = Σᵢ (w⁽ⁱ⁾w⁽ⁱ⁾ᵀ ⊗ XᵢᵀXᵢ) acting on vec(U), with right-hand side V (d×r).
#[derive(Debug, Clone)]
pub struct StructuredSystem<'a> {
    pub blocks: Vec<GramBlock<'a>>,
    pub rhs: DMatrix<f64>,
}

impl StructuredSystem<'_> {
    pub fn d(&self) -> usize {
        self.rhs.nrows()
    }

    pub fn r(&self) -> usize {
        self.rhs.ncols()
    }

    /// U ↦ Σᵢ Gᵢ U Wᵢ, the operator without materializing it.
    pub fn apply(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d(), self.r());
        for blk in &self.blocks {
            out += blk.gram * (u * &blk.w_outer);
        }
        out
    }

    /// The full rd×rd matrix in column-major vec ordering.
    pub fn assemble(&self) -> DMatrix<f64> {
        let (d, r) = (self.d(), self.r());
        let mut a = DMatrix::zeros(d * r, d * r);
        for s in 0..r {
            for q in s..r {
                let mut acc = DMatrix::zeros(d, d);
                for blk in &self.blocks {
                    let c = blk.w_outer[(s, q)];
                    if c != 0.0 {
                        acc += blk.gram * c;
                    }
                }
                a.view_mut((s * d, q * d), (d, d)).copy_from(&acc);
                if q != s {
                    a.view_mut((q * d, s * d), (d, d)).copy_from(&acc.transpose());
                }
            }
        }
        a
    }

    fn check_dims(&self) -> Result<()> {
        let (d, r) = (self.d(), self.r());
        for (i, blk) in self.blocks.iter().enumerate() {
            if blk.w_outer.shape() != (r, r) || blk.gram.shape() != (d, d) {
                return Err(LrsError::Config(format!(
                    "block {i} has shapes {:?} / {:?}, expected ({r}, {r}) / ({d}, {d})",
                    blk.w_outer.shape(),
                    blk.gram.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStrategy {
    /// Dense factorization up to `DENSE_SOLVE_LIMIT` unknowns, CG beyond.
    Auto,
    Dense,
    ConjugateGradient,
}

/// vec⁻¹(A⁻¹ vec(V)).
pub fn solve_structured(sys: &StructuredSystem) -> Result<DMatrix<f64>> {
    solve_structured_with(sys, SolveStrategy::Auto)
}

pub fn solve_structured_with(sys: &StructuredSystem, strategy: SolveStrategy) -> Result<DMatrix<f64>> {
    sys.check_dims()?;
    let (d, r) = (sys.d(), sys.r());
    if sys.blocks.is_empty() {
        return Err(LrsError::SingularSystem("no blocks in structured system".into()));
    }
    let dense = match strategy {
        SolveStrategy::Auto => d * r <= DENSE_SOLVE_LIMIT,
        SolveStrategy::Dense => true,
        SolveStrategy::ConjugateGradient => false,
    };
    let out = if dense {
        let a = sys.assemble();
        let v = DVector::from_column_slice(sys.rhs.as_slice());
        let x = solve_dense(&a, &v)?;
        DMatrix::from_column_slice(d, r, x.as_slice())
    } else {
        conjugate_gradient(sys, 1e-10, 10 * d * r)?
    };
    let res = (sys.apply(&out) - &sys.rhs).norm();
    let scale = sys.rhs.norm();
    if !out.iter().all(|v| v.is_finite()) || res > 1e-8 * scale {
        return Err(LrsError::SingularSystem(format!(
            "structured solve residual {res:.3e} exceeds 1e-8 * |V| = {:.3e}",
            1e-8 * scale
        )));
    }
    Ok(out)
}

fn conjugate_gradient(sys: &StructuredSystem, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let b = &sys.rhs;
    let bnorm = b.norm();
    let mut x = DMatrix::zeros(sys.d(), sys.r());
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut res = b.clone();
    let mut p = res.clone();
    let mut rs = res.norm_squared();
    for _ in 0..max_iter {
        let ap = sys.apply(&p);
        let curv = p.dot(&ap);
        if !(curv > 0.0) {
            return Err(LrsError::SingularSystem("operator is not positive definite".into()));
        }
        let alpha = rs / curv;
        x += &p * alpha;
        res -= &ap * alpha;
        let rs_new = res.norm_squared();
        if rs_new.sqrt() <= tol * bnorm {
            return Ok(x);
        }
        p = &res + &p * (rs_new / rs);
        rs = rs_new;
    }
    Err(LrsError::SingularSystem(format!(
        "conjugate gradients did not reach {tol:e} in {max_iter} iterations"
    )))
}

/// Top-r eigenpairs of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct TopEigen {
    /// d×r, orthonormal, ordered by descending eigenvalue.
    pub vectors: DMatrix<f64>,
    /// Descending.
    pub values: DVector<f64>,
    /// λ_r − λ_{r+1}; infinite when r = d.
    pub gap: f64,
    /// The gap is below 1e−12·‖s‖₂, so the subspace is ill-defined.
    pub degenerate: bool,
}

pub fn top_r_eigvecs(s: &DMatrix<f64>, r: usize) -> Result<TopEigen> {
    let d = s.nrows();
    if s.ncols() != d {
        return Err(LrsError::Domain("eigen-decomposition needs a square matrix".into()));
    }
    if r == 0 || r > d {
        return Err(LrsError::Domain(format!("need 1 <= r <= d, got r={r}, d={d}")));
    }
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * s.amax().max(1.0) {
        return Err(LrsError::Domain(format!("matrix is not symmetric (max |s - sᵀ| = {asym:.3e})")));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vectors = DMatrix::zeros(d, r);
    for (j, &src) in order.iter().take(r).enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        // Sign convention: largest-magnitude entry positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(j, &col);
    }
    let values = DVector::from_iterator(r, order.iter().take(r).map(|&i| eig.eigenvalues[i]));
    let spectral = eig.eigenvalues.amax();
    let gap = if r < d {
        eig.eigenvalues[order[r - 1]] - eig.eigenvalues[order[r]]
    } else {
        f64::INFINITY
    };
    Ok(TopEigen {
        vectors,
        values,
        gap,
        degenerate: gap < 1e-12 * spectral || spectral == 0.0,
    })
}

/// Largest eigenvalue of a symmetric matrix.
pub(crate) fn lambda_max(s: &DMatrix<f64>) -> f64 {
    s.clone().symmetric_eigenvalues().max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn ht_examples() {
        let v = DVector::from_vec(vec![0.5, -0.2, 0.9]);
        assert_eq!(hard_threshold(&v, 0.3).as_slice(), &[0.5, 0.0, 0.9]);
        assert_eq!(hard_threshold(&v, 0.0), v);
        let tie = DVector::from_vec(vec![0.3, 0.3]);
        assert_eq!(hard_threshold(&tie, 0.3).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn keep_largest_caps_support() {
        let mut v = DVector::from_vec(vec![0.1, -3.0, 0.0, 2.0, -2.0]);
        keep_largest(&mut v, 2);
        assert_eq!(v.as_slice(), &[0.0, -3.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn clip_examples() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let c = clip_vector(&v, 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        let inside = DVector::from_vec(vec![0.3, 0.4]);
        assert_eq!(clip_vector(&inside, 1.0), inside);
        assert_eq!(clip_scalar(-3.0, 1.0), -1.0);
        assert_eq!(clip_scalar(0.5, 1.0), 0.5);
        assert_eq!(clip_vector(&DVector::zeros(3), 1.0), DVector::zeros(3));
    }

    #[test]
    fn clip_frobenius_examples() {
        let m = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let c = clip_frobenius(&m, 1.0);
        assert!((c[(0, 0)] - 0.6).abs() < 1e-15 && (c[(0, 1)] - 0.8).abs() < 1e-15);
        let inside = DMatrix::from_row_slice(2, 1, &[0.3, 0.4]);
        assert_eq!(clip_frobenius(&inside, 1.0), inside);
        assert_eq!(clip_frobenius(&DMatrix::zeros(2, 2), 1.0), DMatrix::zeros(2, 2));
    }

    #[test]
    fn qr_of_orthonormal_is_identity_map() {
        let (q0, _) = qr_orthonormalize(&randn(9, 3, 1)).unwrap();
        let (q, r) = qr_orthonormalize(&q0).unwrap();
        assert!((&q - &q0).amax() < 1e-12);
        assert!((r - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn qr_random_reconstructs() {
        let m = randn(10, 3, 2);
        let (q, r) = qr_orthonormalize(&m).unwrap();
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).norm() <= 1e-12);
        assert!((&q * &r - &m).amax() <= 1e-10);
        for j in 0..3 {
            assert!(r[(j, j)] > 0.0);
            for i in j + 1..3 {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_duplicate_columns_rank_deficient() {
        let c = randn(6, 1, 3);
        let m = DMatrix::from_columns(&[c.column(0), c.column(0)]);
        assert!(matches!(qr_orthonormalize(&m), Err(LrsError::RankDeficient(_))));
    }

    #[test]
    fn least_squares_identity_design() {
        let y = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let z = least_squares(&DMatrix::identity(3, 3), &y, 0.0).unwrap();
        assert!((z - y).amax() < 1e-15);
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let a = randn(20, 3, 4);
        let y = DVector::from_column_slice(randn(20, 1, 5).as_slice());
        let z = least_squares(&a, &y, 0.0).unwrap();
        let oracle = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &y;
        assert!((z - oracle).amax() <= 1e-10);
    }

    #[test]
    fn least_squares_ridge_matches_closed_form() {
        let a = randn(5, 8, 6);
        let y = DVector::from_column_slice(randn(5, 1, 7).as_slice());
        let z = least_squares(&a, &y, 0.3).unwrap();
        let oracle = (a.transpose() * &a + DMatrix::identity(8, 8) * 0.3).try_inverse().unwrap()
            * a.transpose()
            * &y;
        assert!((z - oracle).amax() <= 1e-10);
    }

    #[test]
    fn least_squares_underdetermined_is_singular() {
        let a = randn(2, 4, 8);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(least_squares(&a, &y, 0.0), Err(LrsError::SingularSystem(_))));
    }

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
    }

    #[test]
    fn structured_matches_materialized_kronecker() {
        let (d, r, t) = (6, 2, 3);
        let xs: Vec<DMatrix<f64>> = (0..t).map(|i| randn(8, d, 10 + i as u64)).collect();
        let grams: Vec<DMatrix<f64>> = xs.iter().map(|x| x.transpose() * x).collect();
        let w = randn(t, r, 20);
        let rhs = randn(d, r, 21);
        let sys = StructuredSystem {
            blocks: (0..t)
                .map(|i| {
                    let wi = w.row(i).transpose();
                    GramBlock { w_outer: &wi * wi.transpose(), gram: &grams[i] }
                })
                .collect(),
            rhs: rhs.clone(),
        };
        let mut big = DMatrix::zeros(d * r, d * r);
        for (i, g) in grams.iter().enumerate() {
            let wi = w.row(i).transpose();
            big += kron(&(&wi * wi.transpose()), g);
        }
        let oracle = big.lu().solve(&DVector::from_column_slice(rhs.as_slice())).unwrap();
        for strategy in [SolveStrategy::Dense, SolveStrategy::ConjugateGradient] {
            let u = solve_structured_with(&sys, strategy).unwrap();
            let diff = (DVector::from_column_slice(u.as_slice()) - &oracle).amax();
            assert!(diff <= 1e-8, "{strategy:?}: {diff}");
        }
    }

    #[test]
    fn structured_scalar_case_is_least_squares() {
        let x = randn(15, 4, 30);
        let y = DVector::from_column_slice(randn(15, 1, 31).as_slice());
        let gram = x.transpose() * &x;
        let sys = StructuredSystem {
            blocks: vec![GramBlock { w_outer: DMatrix::from_element(1, 1, 1.0), gram: &gram }],
            rhs: DMatrix::from_column_slice(4, 1, (x.transpose() * &y).as_slice()),
        };
        let u = solve_structured(&sys).unwrap();
        let ls = least_squares(&x, &y, 0.0).unwrap();
        assert!((DVector::from_column_slice(u.as_slice()) - ls).amax() <= 1e-10);
    }

    #[test]
    fn structured_zero_weights_singular() {
        let gram = DMatrix::identity(3, 3);
        let sys = StructuredSystem {
            blocks: vec![GramBlock { w_outer: DMatrix::zeros(2, 2), gram: &gram }; 2],
            rhs: DMatrix::from_element(3, 2, 1.0),
        };
        for strategy in [SolveStrategy::Dense, SolveStrategy::ConjugateGradient] {
            assert!(matches!(
                solve_structured_with(&sys, strategy),
                Err(LrsError::SingularSystem(_))
            ));
        }
    }

    #[test]
    fn eigvecs_diagonal() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let e = top_r_eigvecs(&s, 2).unwrap();
        assert!((e.vectors.column(0).abs() - DVector::from_vec(vec![0.0, 1.0, 0.0])).amax() < 1e-12);
        assert!((e.vectors.column(1).abs() - DVector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-12);
        assert_eq!(e.values.as_slice(), &[3.0, 2.0]);
        assert!(!e.degenerate);
    }

    #[test]
    fn eigvecs_rank_one() {
        let mut u = DVector::from_column_slice(randn(7, 1, 40).as_slice());
        u /= u.norm();
        let e = top_r_eigvecs(&(&u * u.transpose()), 1).unwrap();
        let v = e.vectors.column(0);
        let err = (v - &u).amax().min((v + &u).amax());
        assert!(err <= 1e-10);
    }

    #[test]
    fn eigvecs_residual() {
        let a = randn(8, 8, 41);
        let s = &a + a.transpose();
        let e = top_r_eigvecs(&s, 3).unwrap();
        let res = &s * &e.vectors - &e.vectors * DMatrix::from_diagonal(&e.values);
        assert!(res.norm() <= 1e-9);
    }

    #[test]
    fn eigvecs_flags_degenerate_gap() {
        let e = top_r_eigvecs(&DMatrix::identity(4, 4), 2).unwrap();
        assert!(e.degenerate);
    }
}
