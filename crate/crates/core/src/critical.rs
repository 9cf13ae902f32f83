//! Equilibria and the critical manifold C_Q: Gauss-Newton refinement,
//! multistart search over the critical points of U, predictor-corrector
//! continuation of one-dimensional components, and genericity/index
//! diagnostics.
//!
//! The critical set is the zero locus of the constrained force
//! `r(q) = rho^T(q) dU(q)`; its Jacobian `D r = rho^T D^2 U + [d_j rho^T dU]`
//! is assembled from exact dual derivatives. A point is generic when the
//! Jacobian has full rank k; the kernel (dimension n-k) spans the tangent of
//! the component. The index counts negative eigenvalues of the symmetrized
//! restriction of the Jacobian to the kernel's complement, i.e. the unstable
//! normal directions of the descent flow `qdot = -rho grad_g U`.

use crate::linalg;
use crate::mechsys::{MechSystem, PhasePoint};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

/// Default Gauss-Newton convergence tolerance on the residual norm.
pub const NEWTON_TOL: f64 = 1e-12;
/// Default iteration cap for refinement.
pub const NEWTON_MAX_ITER: usize = 50;
/// Residual below which a point counts as lying on C_Q for membership
/// preconditions.
pub const ON_MANIFOLD_TOL: f64 = 1e-8;
/// Deduplication distance for multistart results.
const DEDUP_DIST: f64 = 1e-6;

/// A refined point of the critical manifold with its local diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub q: Vec<f64>,
    /// Norm of the constrained force rho^T dU.
    pub residual: f64,
    /// Jacobian of the constrained force (not serialized).
    #[serde(skip)]
    pub jac: DMatrix<f64>,
    /// Dimension of the Jacobian kernel (n - rank).
    pub kernel_dim: usize,
    /// True iff rank(jac) = k.
    pub generic: bool,
    /// Descent-flow index; `None` at non-generic points.
    pub index: Option<usize>,
}

impl CriticalPoint {
    pub fn q_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.q)
    }
}

/// A connected piece of C_Q traced by continuation.
#[derive(Clone, Debug, Serialize)]
pub struct CriticalComponent {
    pub points: Vec<CriticalPoint>,
    pub index: usize,
    pub closed: bool,
    pub arc_length: f64,
    /// Set when continuation stopped at a point whose kernel dimension
    /// differs from n-k.
    pub nongeneric_boundary: bool,
}

/// Outcome of the non-genericity indicator.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NongenericityReport {
    pub nongeneric: bool,
    /// Conditioning diagnostic sigma_k / sigma_1 of the force Jacobian.
    pub sigma_ratio: f64,
}

/// Constrained force covector `rho^T(q) dU(q)`; zero exactly on C_Q.
pub fn critical_residual(sys: &MechSystem, q: &DVector<f64>) -> Result<DVector<f64>> {
    let pp = sys.projectors(q)?;
    let du = sys.grad_potential(q)?;
    Ok(pp.rho.transpose() * du)
}

/// Jacobian of the constrained force from exact derivatives:
/// `J = rho^T D^2 U + M` with `M[:,j] = (d_j rho)^T dU`.
pub fn residual_jacobian(sys: &MechSystem, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = sys.n;
    let (rho, drho) = sys.rho_with_derivatives(q)?;
    let du = sys.grad_potential(q)?;
    let hess = sys.hess_potential(q)?;
    let mut jac = rho.transpose() * hess;
    for j in 0..n {
        let col = drho[j].transpose() * &du;
        for i in 0..n {
            jac[(i, j)] += col[i];
        }
    }
    Ok(jac)
}

fn index_from_jacobian(jac: &DMatrix<f64>, k: usize) -> Option<usize> {
    let n = jac.nrows();
    if linalg::rank(jac) != k {
        return None;
    }
    // basis of the complement of the kernel: right singular vectors with
    // sigma above threshold
    let svd = jac.clone().svd(false, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = linalg::RANK_REL_TOL * smax;
    let vt = svd.v_t.as_ref().unwrap();
    let mut basis = Vec::new();
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > tol {
            basis.push(vt.row(i).transpose());
        }
    }
    let b = linalg::columns(n, &basis);
    let restricted = b.transpose() * jac * &b;
    let sym = (&restricted + restricted.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    Some(
        eig.eigenvalues
            .iter()
            .filter(|&&l| l < -1e-12 * scale)
            .count(),
    )
}

/// Classify a point: residual, Jacobian, kernel dimension, genericity, index.
pub fn classify_point(sys: &MechSystem, q: &DVector<f64>) -> Result<CriticalPoint> {
    let r = critical_residual(sys, q)?;
    let jac = residual_jacobian(sys, q)?;
    let rank = linalg::rank(&jac);
    let k = sys.k();
    let generic = rank == k;
    let index = index_from_jacobian(&jac, k);
    Ok(CriticalPoint {
        q: q.iter().cloned().collect(),
        residual: r.norm(),
        kernel_dim: sys.n - rank,
        generic,
        index,
        jac,
    })
}

/// The descent-flow index of a generic critical point.
pub fn component_index(sys: &MechSystem, cp: &CriticalPoint) -> Result<usize> {
    if !cp.generic {
        return Err(Error::IndexUndefined {
            kernel_dim: cp.kernel_dim,
        });
    }
    Ok(index_from_jacobian(&cp.jac, sys.k()).expect("generic point has an index"))
}

/// Damped Gauss-Newton on a residual map, with pseudo-inverse steps
/// truncated to the expected Jacobian rank.
fn newton_solve(
    residual: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    jacobian: &dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
    wrap: &dyn Fn(&mut DVector<f64>),
    q0: &DVector<f64>,
    rank_cap: usize,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let mut q = q0.clone();
    wrap(&mut q);
    let mut r = residual(&q)?;
    let mut rnorm = r.norm();
    if rnorm <= tol {
        return Ok(q);
    }
    let mut consecutive_doubling = 0usize;
    for _ in 0..max_iter {
        let jac = jacobian(&q)?;
        let step = -(linalg::pinv_capped(&jac, rank_cap) * &r);
        // halve until the residual decreases, at most 20 times
        let mut lambda = 1.0;
        let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
        for _ in 0..20 {
            let mut cand = &q + &step * lambda;
            wrap(&mut cand);
            let rc = residual(&cand)?;
            let rcn = rc.norm();
            if best.as_ref().map_or(true, |(_, _, b)| rcn < *b) {
                best = Some((cand.clone(), rc.clone(), rcn));
            }
            if rcn < rnorm {
                break;
            }
            lambda *= 0.5;
        }
        let (qn, rn, rnn) = best.expect("at least one damping candidate");
        if rnn >= 2.0 * rnorm {
            consecutive_doubling += 1;
            if consecutive_doubling >= 5 {
                return Err(Error::Divergence { residual: rnn });
            }
        } else {
            consecutive_doubling = 0;
        }
        q = qn;
        r = rn;
        rnorm = rnn;
        if rnorm <= tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iters: max_iter,
        residual: rnorm,
    })
}

/// Gauss-Newton refinement of a seed onto C_Q.
pub fn newton_refine(
    sys: &MechSystem,
    q0: &DVector<f64>,
    newton_tol: f64,
    max_iter: usize,
) -> Result<CriticalPoint> {
    let q = newton_solve(
        &|q| critical_residual(sys, q),
        &|q| residual_jacobian(sys, q),
        &|q| sys.wrap_q(q),
        q0,
        sys.k(),
        newton_tol,
        max_iter,
    )?;
    classify_point(sys, &q)
}

/// Multistart Newton on `dU = 0` over a uniform grid; returns the
/// deduplicated critical points of U, each classified against C_Q.
pub fn find_u_critical_points(sys: &MechSystem, grid_per_dim: usize) -> Result<Vec<CriticalPoint>> {
    assert!(grid_per_dim >= 2, "grid_per_dim must be at least 2");
    let n = sys.n;
    let tau = std::f64::consts::TAU;
    // grid: periodic coordinates sample [0, 2pi), others [-pi, pi]
    let axis: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..grid_per_dim)
                .map(|j| {
                    if sys.periodic[i] {
                        j as f64 * tau / grid_per_dim as f64
                    } else {
                        -std::f64::consts::PI
                            + j as f64 * tau / (grid_per_dim - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let total = grid_per_dim.pow(n as u32);
    let starts: Vec<DVector<f64>> = (0..total)
        .map(|mut idx| {
            DVector::from_fn(n, |i, _| {
                let j = idx % grid_per_dim;
                idx /= grid_per_dim;
                axis[i][j]
            })
        })
        .collect();

    // degenerate-potential guard: a potential with vanishing gradient at
    // every grid start gives multistart nothing to work with
    let mut any_nonzero = false;
    for q in &starts {
        if sys.grad_potential(q)?.norm() > 1e-12 {
            any_nonzero = true;
            break;
        }
    }
    if !any_nonzero {
        return Err(Error::DegeneratePotential(
            "gradient of U vanishes at every grid point".into(),
        ));
    }

    let solutions: Vec<Option<DVector<f64>>> = starts
        .par_iter()
        .map(|q0| {
            newton_solve(
                &|q| sys.grad_potential(q),
                &|q| sys.hess_potential(q),
                &|q| sys.wrap_q(q),
                q0,
                sys.n,
                NEWTON_TOL,
                NEWTON_MAX_ITER,
            )
            .ok()
        })
        .collect();

    let mut found: Vec<DVector<f64>> = Vec::new();
    for sol in solutions.into_iter().flatten() {
        if found
            .iter()
            .all(|p| sys.config_distance(p, &sol) > DEDUP_DIST)
        {
            found.push(sol);
        }
    }
    found.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    found.iter().map(|q| classify_point(sys, q)).collect()
}

/// Trace the one-dimensional component through a generic seed by predictor
/// steps along the Jacobian kernel and Gauss-Newton correction.
pub fn continue_component(
    sys: &MechSystem,
    seed: &CriticalPoint,
    step: f64,
    max_points: usize,
) -> Result<CriticalComponent> {
    continue_component_oriented(sys, seed, step, max_points, false)
}

/// As [`continue_component`] but optionally starting in the opposite
/// orientation; both orientations trace the same closed set.
pub fn continue_component_oriented(
    sys: &MechSystem,
    seed: &CriticalPoint,
    step: f64,
    max_points: usize,
    flip: bool,
) -> Result<CriticalComponent> {
    let nmk = sys.n - sys.k();
    if !seed.generic {
        return Err(Error::IndexUndefined {
            kernel_dim: seed.kernel_dim,
        });
    }
    if nmk == 0 {
        return Ok(CriticalComponent {
            index: seed.index.expect("generic seed"),
            points: vec![seed.clone()],
            closed: true,
            arc_length: 0.0,
            nongeneric_boundary: false,
        });
    }
    if nmk > 1 {
        return Err(Error::ComponentDimension(nmk));
    }

    let seed_index = seed.index.expect("generic seed");
    let seed_q = seed.q_vector();
    let mut points = vec![seed.clone()];
    let mut q = seed_q.clone();
    let mut jac = seed.jac.clone();
    let mut tangent: Option<DVector<f64>> = None;
    let mut closed = false;
    let mut nongeneric_boundary = false;

    loop {
        if points.len() >= max_points {
            return Err(Error::MaxSteps(max_points));
        }
        let kernel = linalg::kernel_basis(&jac);
        if kernel.len() != nmk {
            nongeneric_boundary = true;
            break;
        }
        let mut t = kernel[0].clone();
        match &tangent {
            Some(prev) => {
                if t.dot(prev) < 0.0 {
                    t = -t;
                }
            }
            None => {
                // deterministic initial orientation: largest-magnitude
                // component positive, then the requested flip
                let lead = t
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if t[lead] < 0.0 {
                    t = -t;
                }
                if flip {
                    t = -t;
                }
            }
        }
        let pred = &q + &t * step;
        let refined = newton_refine(sys, &pred, NEWTON_TOL, NEWTON_MAX_ITER)?;
        let qn = refined.q_vector();
        if !refined.generic {
            nongeneric_boundary = true;
            points.push(refined);
            break;
        }
        let idx = refined.index.expect("generic point");
        if idx != seed_index {
            return Err(Error::IndexChange(format!(
                "index {idx} at {:?} differs from seed index {seed_index}",
                refined.q
            )));
        }
        jac = refined.jac.clone();
        points.push(refined);
        // secant through the shortest periodic representative, so wrapping
        // never flips the orientation
        tangent = Some(sys.config_delta(&qn, &q));
        q = qn;
        if points.len() > 10 && sys.config_distance(&q, &seed_q) < step / 2.0 {
            closed = true;
            break;
        }
    }

    let mut arc = 0.0;
    for w in points.windows(2) {
        arc += sys.config_distance(&w[0].q_vector(), &w[1].q_vector());
    }
    if closed {
        arc += sys.config_distance(&points.last().unwrap().q_vector(), &seed_q);
    }
    Ok(CriticalComponent {
        index: seed_index,
        points,
        closed,
        arc_length: arc,
        nongeneric_boundary,
    })
}

/// Basis of the critical-bundle fibre over a point of C_Q: the
/// orthonormalized constraint covectors. The extension field is checked to
/// vanish on a fibre element before returning.
pub fn critical_bundle_fibre(sys: &MechSystem, q: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let r = critical_residual(sys, q)?.norm();
    if r > ON_MANIFOLD_TOL {
        return Err(Error::OffCritical {
            residual: r,
            tol: ON_MANIFOLD_TOL,
        });
    }
    let e = sys.coframe(q)?;
    let cols: Vec<DVector<f64>> = (0..e.ncols()).map(|j| e.column(j).into_owned()).collect();
    for c in &cols {
        let x = PhasePoint {
            q: q.clone(),
            p: c.clone(),
        };
        let f = sys.extension_field(&x)?;
        if f.norm() > 1e-9 * (1.0 + c.norm()) {
            return Err(Error::OffCritical {
                residual: f.norm(),
                tol: 1e-9,
            });
        }
    }
    Ok(cols)
}

/// Reduced rank of the force Jacobian signals a non-generic critical point.
pub fn nongenericity_indicator(sys: &MechSystem, cp: &CriticalPoint) -> NongenericityReport {
    let mut sv: Vec<f64> = cp.jac.clone().singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = sys.k();
    let smax = sv.first().cloned().unwrap_or(0.0);
    let sigma_k = if k == 0 { 0.0 } else { sv.get(k - 1).cloned().unwrap_or(0.0) };
    let ratio = if smax > 0.0 { sigma_k / smax } else { 0.0 };
    NongenericityReport {
        nongeneric: linalg::rank(&cp.jac) < k,
        sigma_ratio: ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    const DISC_SKATE: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/disc_skate.cfg"));

    fn skate() -> MechSystem {
        MechSystem::load_system(DISC_SKATE).unwrap()
    }

    fn qv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn residual_vanishes_on_x2_circle() {
        let sys = skate();
        for x2 in [0.0, 0.9, 2.7, 5.5] {
            let r = critical_residual(&sys, &qv(&[0.0, x2, 0.0])).unwrap();
            assert!(r.norm() < 1e-14, "residual {} at x2 = {x2}", r.norm());
        }
    }

    #[test]
    fn residual_away_from_manifold() {
        let sys = skate();
        let r = critical_residual(&sys, &qv(&[0.5, 0.0, 0.0])).unwrap();
        assert!((r[0] - 0.5f64.sin()).abs() < 1e-14);
        assert!(r[1].abs() < 1e-14);
        assert!(r[2].abs() < 1e-14);
    }

    #[test]
    fn residual_jacobian_matches_finite_differences() {
        let sys = skate();
        for q0 in [[0.3, 1.2, 0.7], [PI, 2.0, PI], [1.0, 0.0, 2.2]] {
            let q = qv(&q0);
            let jac = residual_jacobian(&sys, &q).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[j] += h;
                qm[j] -= h;
                let rp = critical_residual(&sys, &qp).unwrap();
                let rm = critical_residual(&sys, &qm).unwrap();
                for i in 0..3 {
                    let fd = (rp[i] - rm[i]) / (2.0 * h);
                    assert!(
                        (jac[(i, j)] - fd).abs() < 1e-6,
                        "jac[{i}][{j}] = {} vs fd {}",
                        jac[(i, j)],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_paper_matrix_on_components() {
        // at (a, x2, b) the Jacobian is [[c1 cos a, 0, c2 sin x2], 0, [0, 0, cphi cos b]]
        let sys = skate();
        let x2 = 1.3;
        for (a, b) in [(0.0, 0.0), (0.0, PI), (PI, 0.0), (PI, PI)] {
            let jac = residual_jacobian(&sys, &qv(&[a, x2, b])).unwrap();
            let want = DMatrix::from_row_slice(
                3,
                3,
                &[
                    a.cos(), 0.0, x2.sin(),
                    0.0, 0.0, 0.0,
                    0.0, 0.0, 2.0 * b.cos(),
                ],
            );
            assert!(
                (&jac - &want).abs().max() < 1e-12,
                "at (a,b)=({a},{b}): {jac}"
            );
        }
    }

    #[test]
    fn newton_refine_keeps_points_on_manifold() {
        let sys = skate();
        let q0 = qv(&[0.0, 1.7, 0.0]);
        let cp = newton_refine(&sys, &q0, NEWTON_TOL, NEWTON_MAX_ITER).unwrap();
        assert_eq!(cp.q_vector(), q0);
    }

    #[test]
    fn newton_refine_converges_to_component() {
        let sys = skate();
        let cp = newton_refine(&sys, &qv(&[0.05, 1.7, -0.03]), NEWTON_TOL, NEWTON_MAX_ITER)
            .unwrap();
        assert!(cp.residual <= NEWTON_TOL);
        assert!(cp.q[0].abs() < 1e-10 || (cp.q[0] - TAU).abs() < 1e-10);
        let phi = cp.q[2];
        assert!(phi.abs() < 1e-10 || (phi - TAU).abs() < 1e-10);
        // the kernel direction is d_x2: the x2 coordinate barely moves
        assert!((cp.q[1] - 1.7).abs() < 0.05, "x2 drifted to {}", cp.q[1]);
        assert!(cp.generic);
        assert_eq!(cp.kernel_dim, 1);
    }

    #[test]
    fn newton_no_convergence_is_surfaced() {
        let sys = skate();
        let err = newton_refine(&sys, &qv(&[1.4, 0.3, 1.9]), 1e-14, 2).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { .. }));
    }

    #[test]
    fn multistart_finds_the_eight_corners() {
        let sys = skate();
        let pts = find_u_critical_points(&sys, 6).unwrap();
        assert_eq!(pts.len(), 8, "found {:?}", pts.iter().map(|p| &p.q).collect::<Vec<_>>());
        for p in &pts {
            for &c in &p.q {
                let d0 = c.min(TAU - c);
                let dpi = (c - PI).abs();
                assert!(d0.min(dpi) < 1e-9, "coordinate {c} is not in {{0, pi}}");
            }
            assert!(p.generic);
        }
    }

    #[test]
    fn constant_potential_is_degenerate() {
        let text = "
[model]
coordinates = x, y
periodic = true, true
[metric]
g = 1, 0, 0, 1
[potential]
U = 0
[constraints]
zeta = 1, 0
";
        let sys = MechSystem::load_system(text).unwrap();
        assert!(matches!(
            find_u_critical_points(&sys, 4),
            Err(Error::DegeneratePotential(_))
        ));
    }

    #[test]
    fn one_dimensional_torus_has_two_critical_points() {
        let text = "
[model]
coordinates = x
periodic = true
unconstrained = true
[metric]
g = 1
[potential]
U = 1 - cos(x)
";
        let sys = MechSystem::load_system(text).unwrap();
        let pts = find_u_critical_points(&sys, 5).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].index, Some(0)); // minimum at 0
        assert_eq!(pts[1].index, Some(1)); // maximum at pi
        assert!((pts[1].q[0] - PI).abs() < 1e-10);
    }

    #[test]
    fn index_multiset_is_0_1_1_2() {
        let sys = skate();
        let mut indices: Vec<usize> = [(0.0, 0.0), (0.0, PI), (PI, 0.0), (PI, PI)]
            .iter()
            .map(|&(a, b)| {
                let cp = classify_point(&sys, &qv(&[a, 0.4, b])).unwrap();
                component_index(&sys, &cp).unwrap()
            })
            .collect();
        indices.sort();
        assert_eq!(indices, vec![0, 1, 1, 2]);
        // the component through the minimum of U has index 0
        let min_cp = classify_point(&sys, &qv(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(component_index(&sys, &min_cp).unwrap(), 0);
    }

    #[test]
    fn continuation_traces_the_x2_circle() {
        let sys = skate();
        let seed = newton_refine(&sys, &qv(&[0.0, 0.0, 0.0]), NEWTON_TOL, NEWTON_MAX_ITER)
            .unwrap();
        let comp = continue_component(&sys, &seed, 1e-2, 100_000).unwrap();
        assert!(comp.closed);
        assert!(!comp.nongeneric_boundary);
        assert_eq!(comp.index, 0);
        let count = comp.points.len();
        assert!(
            (600..660).contains(&count),
            "expected ~629 points, got {count}"
        );
        assert!((comp.arc_length - TAU).abs() < 0.01, "arc {}", comp.arc_length);
        for p in &comp.points {
            let x1 = p.q[0].min(TAU - p.q[0]);
            let phi = p.q[2].min(TAU - p.q[2]);
            assert!(x1.abs() <= 1e-8, "x1 residual {x1}");
            assert!(phi.abs() <= 1e-8, "phi residual {phi}");
        }
        // x2 sweeps the whole circle
        let mut x2s: Vec<f64> = comp.points.iter().map(|p| p.q[1]).collect();
        x2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let max_gap = x2s
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(TAU - x2s.last().unwrap() + x2s.first().unwrap(), f64::max);
        assert!(max_gap < 3e-2, "largest x2 gap {max_gap}");
    }

    #[test]
    fn continuation_is_reversible_and_seed_independent() {
        let sys = skate();
        let seed_a = newton_refine(&sys, &qv(&[0.0, 0.0, 0.0]), NEWTON_TOL, NEWTON_MAX_ITER)
            .unwrap();
        let seed_b = newton_refine(&sys, &qv(&[0.0, 1.0, 0.0]), NEWTON_TOL, NEWTON_MAX_ITER)
            .unwrap();
        let fwd = continue_component_oriented(&sys, &seed_a, 1e-2, 100_000, false).unwrap();
        let rev = continue_component_oriented(&sys, &seed_a, 1e-2, 100_000, true).unwrap();
        let other = continue_component(&sys, &seed_b, 1e-2, 100_000).unwrap();
        for set in [&rev, &other] {
            for p in &set.points {
                let q = p.q_vector();
                let dmin = fwd
                    .points
                    .iter()
                    .map(|w| sys.config_distance(&q, &w.q_vector()))
                    .fold(f64::INFINITY, f64::min);
                // same circle: every point lies on the polyline traced forward
                assert!(dmin < 1.2e-2, "point {:?} off by {dmin}", p.q);
            }
            assert!(set.closed);
        }
    }

    #[test]
    fn zero_dimensional_component_is_a_point() {
        let text = "
[model]
coordinates = x
periodic = true
unconstrained = true
[metric]
g = 1
[potential]
U = 1 - cos(x)
";
        let sys = MechSystem::load_system(text).unwrap();
        let seed = newton_refine(&sys, &qv(&[0.1]), NEWTON_TOL, NEWTON_MAX_ITER).unwrap();
        let comp = continue_component(&sys, &seed, 1e-2, 100).unwrap();
        assert!(comp.closed);
        assert_eq!(comp.points.len(), 1);
        assert_eq!(comp.arc_length, 0.0);
    }

    #[test]
    fn fibre_at_phi_pi_is_e2() {
        let sys = skate();
        let fibre = critical_bundle_fibre(&sys, &qv(&[PI, 1.0, PI])).unwrap();
        assert_eq!(fibre.len(), 1);
        assert!(fibre[0][0].abs() < 1e-12);
        assert!((fibre[0][1].abs() - 1.0).abs() < 1e-12);
        assert!(fibre[0][2].abs() < 1e-12);
    }

    #[test]
    fn fibre_rejects_off_manifold_points() {
        let sys = skate();
        assert!(matches!(
            critical_bundle_fibre(&sys, &qv(&[0.5, 0.0, 0.3])),
            Err(Error::OffCritical { .. })
        ));
    }

    #[test]
    fn generic_points_pass_nongenericity_indicator() {
        let sys = skate();
        let cp = classify_point(&sys, &qv(&[PI, 2.0, PI])).unwrap();
        let rep = nongenericity_indicator(&sys, &cp);
        assert!(!rep.nongeneric);
        // sigma_k / sigma_1 bounded below by min(c1, cphi)/spectral scale
        assert!(rep.sigma_ratio > 0.2, "ratio {}", rep.sigma_ratio);
    }

    #[test]
    fn vanishing_cphi_drops_rank() {
        let text = DISC_SKATE.replace("cphi = 2", "cphi = 0");
        let sys = MechSystem::load_system(&text).unwrap();
        let cp = classify_point(&sys, &qv(&[PI, 0.7, PI])).unwrap();
        assert!(!cp.generic);
        let rep = nongenericity_indicator(&sys, &cp);
        assert!(rep.nongeneric);
        assert!(matches!(
            component_index(&sys, &cp),
            Err(Error::IndexUndefined { .. })
        ));
    }

    #[test]
    fn constant_potential_nongeneric_everywhere() {
        let text = "
[model]
coordinates = x, y
periodic = true, true
[metric]
g = 1, 0, 0, 1
[potential]
U = 0
[constraints]
zeta = 1, 0
";
        let sys = MechSystem::load_system(text).unwrap();
        let cp = classify_point(&sys, &qv(&[1.0, 2.0])).unwrap();
        let rep = nongenericity_indicator(&sys, &cp);
        assert!(rep.nongeneric);
        assert_eq!(rep.sigma_ratio, 0.0);
    }
}
