//! Pointwise differential-geometric kernels: projection tensors, Lie
//! brackets, the flag of a distribution, the Frobenius integrability tensor,
//! the compatible almost-Kahler triple, and the generalized Dirac bracket.
//!
//! Matrix convention for 2-forms: the value of a form with matrix `M` on
//! vectors X, Y is `(M X) . Y`. With the chart symplectic matrix
//! `J = [[0, I], [-I, 0]]` the Hamiltonian field is `X_H = J dH` and
//! skew-orthogonality of a projector reads `P J = J P^T`.

use crate::linalg::{self, GMat, RANK_REL_TOL};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Step scale for finite-difference fallbacks on black-box fields:
/// `h = FD_H_SCALE * (1 + |q|)`.
pub const FD_H_SCALE: f64 = 1e-6;

/// A vector field given by an evaluation callback. Implementors may override
/// [`VectorField::jacobian`] with an exact rule; the default falls back to
/// central finite differences.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, q: &[f64]) -> Result<DVector<f64>>;
    fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        linalg::fd_jacobian(&|x| self.eval(x), q, FD_H_SCALE)
    }
}

/// A matrix-valued field (projector fields and the like).
pub trait MatrixField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, q: &[f64]) -> Result<DMatrix<f64>>;
    /// Partial derivatives of every entry with respect to each coordinate;
    /// element `r` of the result is the entrywise derivative in direction `r`.
    fn derivatives(&self, q: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let base = self.eval(q)?;
        let (rows, cols) = base.shape();
        let xnorm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = FD_H_SCALE * (1.0 + xnorm);
        let mut out = Vec::with_capacity(q.len());
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        for r in 0..q.len() {
            qp[r] = q[r] + h;
            qm[r] = q[r] - h;
            let mp = self.eval(&qp)?;
            let mm = self.eval(&qm)?;
            let mut d = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    d[(i, j)] = (mp[(i, j)] - mm[(i, j)]) / (2.0 * h);
                }
            }
            out.push(d);
            qp[r] = q[r];
            qm[r] = q[r];
        }
        Ok(out)
    }
}

/// A scalar field with an optionally exact gradient.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = FD_H_SCALE * (1.0 + xnorm);
        let mut g = DVector::zeros(x.len());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            xm[i] = x[i] - h;
            g[i] = (self.eval(&xp)? - self.eval(&xm)?) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        Ok(g)
    }
}

/// Vector field from closures; supply `jac` when an exact Jacobian is known.
pub struct ClosureField {
    dim: usize,
    f: Box<dyn Fn(&[f64]) -> Result<DVector<f64>> + Sync + Send>,
    jac: Option<Box<dyn Fn(&[f64]) -> Result<DMatrix<f64>> + Sync + Send>>,
}

impl ClosureField {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> Result<DVector<f64>> + Sync + Send + 'static) -> Self {
        ClosureField {
            dim,
            f: Box::new(f),
            jac: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&[f64]) -> Result<DMatrix<f64>> + Sync + Send + 'static,
    ) -> Self {
        self.jac = Some(Box::new(jac));
        self
    }
}

impl VectorField for ClosureField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, q: &[f64]) -> Result<DVector<f64>> {
        (self.f)(q)
    }
    fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        match &self.jac {
            Some(j) => j(q),
            None => linalg::fd_jacobian(&|x| self.eval(x), q, FD_H_SCALE),
        }
    }
}

/// Pointwise pair of complementary projection tensors with the metric data
/// they were built from.
#[derive(Clone, Debug)]
pub struct ProjectorPair {
    /// Projection onto W (rank k), g-symmetric.
    pub rho: DMatrix<f64>,
    /// Complement `I - rho` (rank n-k).
    pub rho_bar: DMatrix<f64>,
    /// Inverse metric at the evaluation point.
    pub g_inv: DMatrix<f64>,
}

impl ProjectorPair {
    /// Entrywise residuals of the defining identities: (idempotence,
    /// complement, g-symmetry). Rank is checked separately.
    pub fn residuals(&self) -> (f64, f64, f64) {
        let idem = (&self.rho * &self.rho - &self.rho).abs().max();
        let n = self.rho.nrows();
        let compl = (&self.rho + &self.rho_bar - DMatrix::<f64>::identity(n, n))
            .abs()
            .max();
        // g rho symmetric  <=>  rho g^-1 symmetric
        let rg = &self.rho * &self.g_inv;
        let sym = (&rg - rg.transpose()).abs().max();
        (idem, compl, sym)
    }

    pub fn rank(&self) -> usize {
        linalg::rank(&self.rho)
    }
}

/// Compatible almost-Kahler triple on a chart: SPD metric `g_k`, complex
/// structure `j` with `j*j = -I`, and the symplectic matrix `omega` with
/// `omega = g_k * j`.
#[derive(Clone, Debug)]
pub struct CompatibleTriple {
    pub g_k: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

/// Flag of a distribution: fibre ranks per level, degree of non-holonomy and
/// Chow condition.
#[derive(Clone, Debug, Serialize)]
pub struct FlagReport {
    /// Ranks `[rank V_0, rank V_1, ...]` up to stabilization.
    pub ranks: Vec<usize>,
    /// First level at which the ranks stabilize. A lower bound when
    /// `stabilized` is false.
    pub degree: usize,
    /// Final rank equals the ambient dimension.
    pub chow: bool,
    /// False when `max_depth` was reached before the ranks settled.
    pub stabilized: bool,
}

/// The chart symplectic matrix `[[0, I], [-I, 0]]` of size 2n.
pub fn standard_symplectic(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        m[(i, n + i)] = 1.0;
        m[(n + i, i)] = -1.0;
    }
    m
}

/// Orthonormalize a coframe in the dual metric: the columns of the result
/// span the same space as the input 1-forms and satisfy `E^T g^-1 E = I`.
pub fn orthonormalize_coframe(
    zetas: &[DVector<f64>],
    g_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = g_inv.nrows();
    for z in zetas {
        if z.len() != n {
            return Err(Error::Dimension(format!(
                "coframe row has length {}, metric dimension is {n}",
                z.len()
            )));
        }
    }
    let gm = GMat::from_fn(n, n, |i, j| g_inv[(i, j)]);
    let rows: Vec<Vec<f64>> = zetas.iter().map(|z| z.iter().cloned().collect()).collect();
    let ortho = linalg::gram_schmidt(&rows, &gm)?;
    let mut e = DMatrix::zeros(n, zetas.len());
    for (j, col) in ortho.iter().enumerate() {
        for i in 0..n {
            e[(i, j)] = col[i];
        }
    }
    Ok(e)
}

/// Projection tensors from a g*-orthonormal coframe: `rho_bar = g^-1 E E^T`
/// and `rho = I - rho_bar`.
pub fn projectors_from_coframe(e: &DMatrix<f64>, g_inv: &DMatrix<f64>) -> ProjectorPair {
    let n = g_inv.nrows();
    let rho_bar = g_inv * e * e.transpose();
    let rho = DMatrix::identity(n, n) - &rho_bar;
    ProjectorPair {
        rho,
        rho_bar,
        g_inv: g_inv.clone(),
    }
}

/// Skew-orthogonal projector onto the span of the columns of `y`, built from
/// `C_ij = omega(Y_i, Y_j)`: the projector is `Y C^-1 (omega Y)^T`.
pub fn skew_projector_from_spanning(
    omega: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let oy = omega * y;
    let c = oy.transpose() * y;
    let c_inv = c
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("spanning family is not symplectic".into()))?;
    Ok(y * c_inv * oy.transpose())
}

/// SPD square root via symmetric eigendecomposition.
pub fn matrix_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let scale = m.abs().max();
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-8 * scale.max(1e-300) {
        return Err(Error::NotSpdMatrix(format!(
            "matrix is not symmetric (asymmetry {asym})"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotSpdMatrix(format!(
            "non-positive eigenvalue {}",
            eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = eig.eigenvalues[i].sqrt();
    }
    let a = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&a + a.transpose()) * 0.5)
}

/// Compatible triple `(g_K, J, omega)` from a nondegenerate 2-form, a
/// skew-orthogonal projector and an auxiliary SPD metric.
///
/// Follows the standard construction: average `g_prime` over the projector
/// splitting to get a metric in which `pi` is symmetric, read off the skew
/// map `K = g~^-1 omega`, take the positive square root `A` of `-K^2` in the
/// g~ geometry, and set `J = K A^-1`, `g_K = g~ A`.
pub fn compatible_triple(
    omega: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    g_prime: &DMatrix<f64>,
) -> Result<CompatibleTriple> {
    let n = omega.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let pi_bar = &id - pi;
    let g_tilde = pi.transpose() * g_prime * pi + pi_bar.transpose() * g_prime * &pi_bar;
    let chol = nalgebra::Cholesky::new(g_tilde.clone())
        .ok_or_else(|| Error::NotSpdMatrix("averaged metric is not SPD".into()))?;
    let g_tilde_inv = chol.inverse();
    let k = &g_tilde_inv * omega;
    let minus_k2 = -(&k * &k);
    // conjugate into plain-symmetric form with the Cholesky factor
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotSpdMatrix("Cholesky factor not invertible".into()))?;
    let s = l.transpose() * &minus_k2 * l_inv.transpose();
    let a_s = matrix_sqrt_spd(&s)?;
    let a = l_inv.transpose() * a_s * l.transpose();
    let a_inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotSpdMatrix("square root not invertible".into()))?;
    let j = &k * a_inv;
    let g_k = &g_tilde * &a;
    let g_k = (&g_k + g_k.transpose()) * 0.5;
    Ok(CompatibleTriple {
        g_k,
        j,
        omega: omega.clone(),
    })
}

/// Lie bracket `[X, Y]^i = X^j d_j Y^i - Y^j d_j X^i` at a point.
pub fn lie_bracket(x: &dyn VectorField, y: &dyn VectorField, q: &[f64]) -> Result<DVector<f64>> {
    let xv = x.eval(q)?;
    let yv = y.eval(q)?;
    let jx = x.jacobian(q)?;
    let jy = y.jacobian(q)?;
    Ok(jy * xv - jx * yv)
}

enum Gen<'a> {
    Base(&'a dyn VectorField),
    Bracket(usize, Box<Gen<'a>>),
}

struct GenCtx<'a> {
    bases: &'a [&'a dyn VectorField],
}

impl Gen<'_> {
    fn eval(&self, ctx: &GenCtx, q: &[f64]) -> Result<DVector<f64>> {
        match self {
            Gen::Base(f) => f.eval(q),
            Gen::Bracket(b, inner) => {
                let wrapped = GenField {
                    ctx,
                    gen: inner,
                    dim: q.len(),
                };
                lie_bracket(ctx.bases[*b], &wrapped, q)
            }
        }
    }
}

struct GenField<'a> {
    ctx: &'a GenCtx<'a>,
    gen: &'a Gen<'a>,
    dim: usize,
}

impl VectorField for GenField<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, q: &[f64]) -> Result<DVector<f64>> {
        self.gen.eval(self.ctx, q)
    }
}

/// Compute the flag `V_0 subset V_1 subset ...` of the distribution spanned
/// by the given fields at `q`, where `V_{i+1} = V_i + [V_0, V_i]`.
///
/// New generators at each level are brackets of the level-0 fields with the
/// surviving generators of the previous level, pruned by rank growth; ranks
/// are decided by SVD with the crate-wide relative threshold.
pub fn flag(fields: &[&dyn VectorField], q: &[f64], max_depth: usize) -> Result<FlagReport> {
    let n = q.len();
    let ctx = GenCtx { bases: fields };
    let mut kept: Vec<(Gen, DVector<f64>)> = Vec::new();
    for f in fields {
        let v = f.eval(q)?;
        kept.push((Gen::Base(*f), v));
    }
    let stacked = |kept: &[(Gen, DVector<f64>)]| {
        let cols: Vec<DVector<f64>> = kept.iter().map(|(_, w)| w.clone()).collect();
        linalg::columns(n, &cols)
    };
    let mut rank_prev = linalg::rank(&stacked(&kept));
    let mut ranks = vec![rank_prev];
    if rank_prev == n {
        return Ok(FlagReport {
            ranks,
            degree: 0,
            chow: true,
            stabilized: true,
        });
    }
    let mut frontier: Vec<usize> = (0..kept.len()).collect();
    for depth in 1..=max_depth {
        let mut new_frontier = Vec::new();
        let mut span_rank = rank_prev;
        for b in 0..fields.len() {
            for &gi in &frontier {
                let cand = Gen::Bracket(b, Box::new(clone_gen(&kept[gi].0)));
                let v = cand.eval(&ctx, q)?;
                // keep the bracket only if it grows the span
                let ncols = kept.len();
                let mut with_cand = stacked(&kept).insert_column(ncols, 0.0);
                with_cand.set_column(ncols, &v);
                if linalg::rank(&with_cand) > span_rank {
                    span_rank += 1;
                    kept.push((cand, v));
                    new_frontier.push(kept.len() - 1);
                }
            }
        }
        let r = linalg::rank(&stacked(&kept));
        if r == rank_prev {
            return Ok(FlagReport {
                ranks,
                degree: depth - 1,
                chow: r == n,
                stabilized: true,
            });
        }
        ranks.push(r);
        if r == n {
            return Ok(FlagReport {
                ranks,
                degree: depth,
                chow: true,
                stabilized: true,
            });
        }
        rank_prev = r;
        frontier = new_frontier;
    }
    Ok(FlagReport {
        ranks,
        degree: max_depth,
        chow: rank_prev == n,
        stabilized: false,
    })
}

fn clone_gen<'a>(g: &Gen<'a>) -> Gen<'a> {
    match g {
        Gen::Base(f) => Gen::Base(*f),
        Gen::Bracket(b, inner) => Gen::Bracket(*b, Box::new(clone_gen(inner))),
    }
}

/// Maximum entry of the Frobenius tensor
/// `L^k_ij = pi^r_i pi^s_j (d_r pi^k_s - d_s pi^k_r)` at `q`; zero iff the
/// distribution `im(pi)` is integrable there.
pub fn frobenius_defect(pi: &dyn MatrixField, q: &[f64]) -> Result<f64> {
    let p = pi.eval(q)?;
    let d = pi.derivatives(q)?;
    let n = q.len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let mut acc = 0.0;
                for r in 0..n {
                    let pri = p[(r, i)];
                    if pri == 0.0 {
                        continue;
                    }
                    for s in 0..n {
                        let psj = p[(s, j)];
                        if psj == 0.0 {
                            continue;
                        }
                        acc += pri * psj * (d[r][(k, s)] - d[s][(k, r)]);
                    }
                }
                worst = worst.max(acc.abs());
            }
        }
    }
    Ok(worst)
}

/// Generalized Dirac bracket `{f, g}_V = omega(pi X_f, pi X_g)` evaluated
/// through the identity `{f,g}_V = df . (pi omega^-1 dg)`, antisymmetrized so
/// that swapping arguments flips the sign exactly.
pub fn v_bracket(
    f: &dyn ScalarField,
    g: &dyn ScalarField,
    pi: &DMatrix<f64>,
    omega_inv: &DMatrix<f64>,
    x: &[f64],
) -> Result<f64> {
    let df = f.gradient(x)?;
    let dg = g.gradient(x)?;
    let m = pi * omega_inv;
    let fg = df.dot(&(&m * &dg));
    let gf = dg.dot(&(&m * &df));
    Ok(0.5 * (fg - gf))
}

/// Rank threshold re-export used by callers making the same decisions.
pub fn rank_threshold() -> f64 {
    RANK_REL_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn disc_skate_coframe_is_already_orthonormal_at_unit_mass() {
        let phi: f64 = 0.83;
        let zeta = DVector::from_vec(vec![phi.sin(), -phi.cos(), 0.0]);
        let g_inv = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 1.0]));
        let e = orthonormalize_coframe(&[zeta.clone()], &g_inv).unwrap();
        for i in 0..3 {
            assert!((e[(i, 0)] - zeta[i]).abs() < 1e-14);
        }
        let gram = e.transpose() * &g_inv * &e;
        assert!((gram[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn parallel_coframe_rows_error() {
        let g_inv = DMatrix::<f64>::identity(3, 3);
        let z1 = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        let z2 = DVector::from_vec(vec![2.0, 4.0, 0.0]);
        assert!(matches!(
            orthonormalize_coframe(&[z1, z2], &g_inv),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn disc_skate_projector_formula() {
        let phi: f64 = 1.234;
        let (s, c) = phi.sin_cos();
        let g_inv = DMatrix::<f64>::identity(3, 3);
        let e = orthonormalize_coframe(&[DVector::from_vec(vec![s, -c, 0.0])], &g_inv).unwrap();
        let pp = projectors_from_coframe(&e, &g_inv);
        let expect = DMatrix::from_row_slice(
            3,
            3,
            &[s * s, -s * c, 0.0, -s * c, c * c, 0.0, 0.0, 0.0, 0.0],
        );
        assert!((&pp.rho_bar - expect).abs().max() < 1e-14);
        let (idem, compl, sym) = pp.residuals();
        assert!(idem < 1e-12 && compl < 1e-14 && sym < 1e-12);
        assert_eq!(pp.rank(), 2);
    }

    #[test]
    fn empty_coframe_gives_identity_projector() {
        let g_inv = DMatrix::<f64>::identity(3, 3);
        let e = DMatrix::<f64>::zeros(3, 0);
        let pp = projectors_from_coframe(&e, &g_inv);
        assert!((&pp.rho - DMatrix::<f64>::identity(3, 3)).abs().max() == 0.0);
        assert!(pp.rho_bar.abs().max() == 0.0);
    }

    #[test]
    fn random_projector_pairs_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let k = rng.gen_range(1..=n);
            let nmk = n - k;
            let g = rand_spd(&mut rng, n);
            let g_inv = g.clone().try_inverse().unwrap();
            let zetas: Vec<DVector<f64>> = (0..nmk)
                .map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let Ok(e) = orthonormalize_coframe(&zetas, &g_inv) else {
                continue;
            };
            let pp = projectors_from_coframe(&e, &g_inv);
            let (idem, compl, sym) = pp.residuals();
            assert!(idem < 1e-10, "idempotence residual {idem}");
            assert!(compl < 1e-10);
            assert!(sym < 1e-10, "g-symmetry residual {sym}");
            assert_eq!(pp.rank(), k);
        }
    }

    #[test]
    fn matrix_sqrt_identity_and_diagonal() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_spd(&id).unwrap() - &id).abs().max() < 1e-14);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let a = matrix_sqrt_spd(&m).unwrap();
        assert!((a[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((a[(1, 1)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_sqrt_random_spd_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..7);
            let m = rand_spd(&mut rng, n);
            let a = matrix_sqrt_spd(&m).unwrap();
            let err = (&a * &a - &m).norm() / m.norm();
            assert!(err < 1e-9, "sqrt residual {err}");
            assert!(nalgebra::Cholesky::new(a).is_some());
        }
    }

    #[test]
    fn matrix_sqrt_rejects_non_spd() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0]));
        assert!(matrix_sqrt_spd(&m).is_err());
    }

    #[test]
    fn compatible_triple_identity_case() {
        let omega = standard_symplectic(2);
        let id = DMatrix::<f64>::identity(4, 4);
        let t = compatible_triple(&omega, &id, &id).unwrap();
        assert!((&t.j - &omega).abs().max() < 1e-12);
        assert!((&t.g_k - &id).abs().max() < 1e-12);
    }

    #[test]
    fn compatible_triple_scaled_omega() {
        // omega = 2J, pi = I, g' = I: K = 2J, A = 2I, so J = J and g_K = 2I
        let omega = standard_symplectic(2) * 2.0;
        let id = DMatrix::<f64>::identity(4, 4);
        let t = compatible_triple(&omega, &id, &id).unwrap();
        assert!((&t.j - standard_symplectic(2)).abs().max() < 1e-12);
        assert!((&t.g_k - &id * 2.0).abs().max() < 1e-12);
    }

    fn check_triple(t: &CompatibleTriple, pi: &DMatrix<f64>, tol: f64) {
        let n = t.j.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        assert!((&t.j * &t.j + &id).abs().max() < tol, "J^2 != -I");
        // omega(X,Y) = g_K(JX,Y) is the matrix identity omega = g_K J
        assert!(
            (&t.g_k * &t.j - &t.omega).abs().max() < tol * t.omega.abs().max().max(1.0),
            "omega != g_K J"
        );
        // hermitean: J^T g_K J = g_K
        assert!(
            (t.j.transpose() * &t.g_k * &t.j - &t.g_k).abs().max() < tol * t.g_k.abs().max(),
            "g_K not hermitean"
        );
        assert!(
            ((pi * &t.j) - (&t.j * pi)).abs().max() < tol,
            "pi does not commute with J"
        );
        // g_K-symmetry of pi
        let gp = &t.g_k * pi;
        assert!(
            (&gp - gp.transpose()).abs().max() < tol * t.g_k.abs().max(),
            "pi not g_K-symmetric"
        );
    }

    #[test]
    fn compatible_triple_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut done = 0;
        while done < 100 {
            let n = *[1usize, 2, 3].choose(&mut rng).unwrap();
            let omega = standard_symplectic(n);
            // random symplectic subspace of dimension 2m
            let m = rng.gen_range(1..=n);
            let y = DMatrix::from_fn(2 * n, 2 * m, |_, _| rng.gen_range(-1.0..1.0));
            let Ok(pi) = skew_projector_from_spanning(&omega, &y) else {
                continue;
            };
            if pi.abs().max() > 50.0 {
                continue; // nearly degenerate spanning family; retry
            }
            let gp = rand_spd(&mut rng, 2 * n);
            let t = compatible_triple(&omega, &pi, &gp).unwrap();
            check_triple(&t, &pi, 1e-8);
            done += 1;
        }
    }

    #[test]
    fn lie_bracket_constant_fields_vanish() {
        let x = ClosureField::new(2, |_| Ok(DVector::from_vec(vec![1.0, 2.0])));
        let y = ClosureField::new(2, |_| Ok(DVector::from_vec(vec![-3.0, 0.5])));
        let b = lie_bracket(&x, &y, &[0.3, -0.7]).unwrap();
        assert!(b.abs().max() < 1e-9);
    }

    #[test]
    fn lie_bracket_textbook_example() {
        // X = d_x, Y = x d_y: [X, Y] = d_y
        let x = ClosureField::new(2, |_| Ok(DVector::from_vec(vec![1.0, 0.0])));
        let y = ClosureField::new(2, |q| Ok(DVector::from_vec(vec![0.0, q[0]])));
        let b = lie_bracket(&x, &y, &[0.4, 1.2]).unwrap();
        assert!((b[0]).abs() < 1e-9);
        assert!((b[1] - 1.0).abs() < 1e-9);
    }

    /// Polynomial vector fields with exact Jacobians for bracket tests.
    fn poly_field(rng: &mut ChaCha8Rng, n: usize) -> ClosureField {
        // components are random quadratics c0 + sum c_i x_i + sum c_ij x_i x_j
        let c0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c1: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let c2: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
                    .collect()
            })
            .collect();
        let (c0e, c1e, c2e) = (c0.clone(), c1.clone(), c2.clone());
        ClosureField::new(n, move |q| {
            Ok(DVector::from_fn(n, |i, _| {
                let mut v = c0e[i];
                for j in 0..n {
                    v += c1e[i][j] * q[j];
                    for k in 0..n {
                        v += c2e[i][j][k] * q[j] * q[k];
                    }
                }
                v
            }))
        })
        .with_jacobian(move |q| {
            Ok(DMatrix::from_fn(n, n, |i, j| {
                let mut v = c1[i][j];
                for k in 0..n {
                    v += (c2[i][j][k] + c2[i][k][j]) * q[k];
                }
                v
            }))
        })
    }

    #[test]
    fn lie_bracket_antisymmetry_and_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let n = rng.gen_range(2..4);
            let x = poly_field(&mut rng, n);
            let y = poly_field(&mut rng, n);
            let z = poly_field(&mut rng, n);
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let bxy = lie_bracket(&x, &y, &q).unwrap();
            let byx = lie_bracket(&y, &x, &q).unwrap();
            assert!((&bxy + &byx).abs().max() < 1e-12);

            // Jacobi: [X,[Y,Z]] + [Y,[Z,X]] + [Z,[X,Y]] = 0
            let nested = |a: &ClosureField, b: &ClosureField, c: &ClosureField| {
                let inner_b = b as &dyn VectorField;
                let inner_c = c as &dyn VectorField;
                let bc = BracketPair { x: inner_b, y: inner_c, dim: n };
                lie_bracket(a, &bc, &q).unwrap()
            };
            let resid = nested(&x, &y, &z) + nested(&y, &z, &x) + nested(&z, &x, &y);
            assert!(
                resid.abs().max() < 1e-5,
                "Jacobi residual {}",
                resid.abs().max()
            );
        }
    }

    struct BracketPair<'a> {
        x: &'a dyn VectorField,
        y: &'a dyn VectorField,
        dim: usize,
    }

    impl VectorField for BracketPair<'_> {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, q: &[f64]) -> Result<DVector<f64>> {
            lie_bracket(self.x, self.y, q)
        }
    }

    #[test]
    fn flag_of_coordinate_fields_is_integrable() {
        let e1 = ClosureField::new(2, |_| Ok(DVector::from_vec(vec![1.0, 0.0])));
        let e2 = ClosureField::new(2, |_| Ok(DVector::from_vec(vec![0.0, 1.0])));
        let r = flag(&[&e1, &e2], &[0.1, 0.2], 4).unwrap();
        assert_eq!(r.ranks, vec![2]);
        assert_eq!(r.degree, 0);
        assert!(r.chow);
        assert!(r.stabilized);
    }

    #[test]
    fn flag_of_planes_in_three_space_is_integrable_not_chow() {
        let e1 = ClosureField::new(3, |_| Ok(DVector::from_vec(vec![1.0, 0.0, 0.0])));
        let e2 = ClosureField::new(3, |_| Ok(DVector::from_vec(vec![0.0, 1.0, 0.0])));
        let r = flag(&[&e1, &e2], &[0.1, 0.2, -0.4], 4).unwrap();
        assert_eq!(r.ranks, vec![2]);
        assert_eq!(r.degree, 0);
        assert!(!r.chow);
    }

    #[test]
    fn flag_of_skate_distribution() {
        // W on T^3 spanned by (cos phi, sin phi, 0) and (0, 0, 1)
        let y1 = ClosureField::new(3, |q| {
            Ok(DVector::from_vec(vec![q[2].cos(), q[2].sin(), 0.0]))
        })
        .with_jacobian(|q| {
            let mut j = DMatrix::zeros(3, 3);
            j[(0, 2)] = -q[2].sin();
            j[(1, 2)] = q[2].cos();
            Ok(j)
        });
        let y2 = ClosureField::new(3, |_| Ok(DVector::from_vec(vec![0.0, 0.0, 1.0])));
        let r = flag(&[&y1, &y2], &[0.3, 1.1, 0.77], 4).unwrap();
        assert_eq!(r.ranks, vec![2, 3]);
        assert_eq!(r.degree, 1);
        assert!(r.chow);
        assert!(r.stabilized);
    }

    #[test]
    fn flag_of_heisenberg_fields() {
        // d_x - y d_z and d_y: one bracket gives d_z
        let y1 = ClosureField::new(3, |q| Ok(DVector::from_vec(vec![1.0, 0.0, -q[1]])))
            .with_jacobian(|_| {
                let mut j = DMatrix::zeros(3, 3);
                j[(2, 1)] = -1.0;
                Ok(j)
            });
        let y2 = ClosureField::new(3, |_| Ok(DVector::from_vec(vec![0.0, 1.0, 0.0])));
        let r = flag(&[&y1, &y2], &[0.0, 0.5, 0.0], 4).unwrap();
        assert_eq!(r.ranks, vec![2, 3]);
        assert_eq!(r.degree, 1);
        assert!(r.chow);
    }

    struct ConstProjector(DMatrix<f64>);
    impl MatrixField for ConstProjector {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn eval(&self, _q: &[f64]) -> Result<DMatrix<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn frobenius_defect_constant_projector_vanishes() {
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        let d = frobenius_defect(&ConstProjector(p), &[0.2, -0.4, 0.9]).unwrap();
        assert!(d < 1e-12);
    }

    struct LevelSetProjector;
    impl MatrixField for LevelSetProjector {
        fn dim(&self) -> usize {
            3
        }
        // orthogonal projector onto tangent planes of the spheres |q| = const,
        // an integrable distribution away from the origin
        fn eval(&self, q: &[f64]) -> Result<DMatrix<f64>> {
            let n2: f64 = q.iter().map(|v| v * v).sum();
            let mut p = DMatrix::<f64>::identity(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    p[(i, j)] -= q[i] * q[j] / n2;
                }
            }
            Ok(p)
        }
    }

    #[test]
    fn frobenius_defect_integrable_level_sets() {
        let d = frobenius_defect(&LevelSetProjector, &[0.8, -0.3, 1.1]).unwrap();
        assert!(d < 1e-8, "defect {d}");
    }

    struct Quadratic {
        dim: usize,
        a: DMatrix<f64>,
    }
    impl ScalarField for Quadratic {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, x: &[f64]) -> Result<f64> {
            let v = DVector::from_column_slice(x);
            Ok(0.5 * v.dot(&(&self.a * &v)))
        }
        fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
            let v = DVector::from_column_slice(x);
            Ok((&self.a + self.a.transpose()) * v * 0.5)
        }
    }

    #[test]
    fn v_bracket_antisymmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let omega = standard_symplectic(2);
        let omega_inv = omega.clone().try_inverse().unwrap();
        for _ in 0..20 {
            let f = Quadratic {
                dim: 4,
                a: DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
            };
            let g = Quadratic {
                dim: 4,
                a: DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
            };
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pi = DMatrix::<f64>::identity(4, 4);
            let fg = v_bracket(&f, &g, &pi, &omega_inv, &x).unwrap();
            let gf = v_bracket(&g, &f, &pi, &omega_inv, &x).unwrap();
            assert_eq!(fg, -gf);
            let ff = v_bracket(&f, &f, &pi, &omega_inv, &x).unwrap();
            assert_eq!(ff, 0.0);
        }
    }

    #[test]
    fn v_bracket_reduces_to_poisson_for_full_projector() {
        // H = (p^2 + q^2)/2 on R^2, f = q: {H, f} = dH/dp = p
        let h = Quadratic {
            dim: 2,
            a: DMatrix::<f64>::identity(2, 2),
        };
        struct Coord0;
        impl ScalarField for Coord0 {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, x: &[f64]) -> Result<f64> {
                Ok(x[0])
            }
            fn gradient(&self, _x: &[f64]) -> Result<DVector<f64>> {
                Ok(DVector::from_vec(vec![1.0, 0.0]))
            }
        }
        let omega = standard_symplectic(1);
        let omega_inv = omega.clone().try_inverse().unwrap();
        let pi = DMatrix::<f64>::identity(2, 2);
        let x = [0.3, -1.7];
        let v = v_bracket(&h, &Coord0, &pi, &omega_inv, &x).unwrap();
        assert!((v - x[1]).abs() < 1e-12);
    }
}
