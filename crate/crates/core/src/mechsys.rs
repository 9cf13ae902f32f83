//! Constrained mechanical systems (Q, g, U, W) and the auxiliary extension
//! on T*Q.
//!
//! The extension is assembled pointwise from the g*-orthonormalized
//! constraint coframe: `rho_bar = g^-1 E E^T`, the momentum-coupling matrix
//! `T = E F^T rho - rho^T F E^T` with `F = [d_qj f_K]`, and the phase-space
//! projector `pi_V = [[rho, 0], [-T, rho^T]]`. The extension field is
//! `(qdot, pdot) = [[0, rho], [-rho^T, -T]] (dH_q, dH_p)`; its orbits
//! conserve H and every constraint function f_I, and restrict to the
//! physical dynamics on the leaf f = 0.

use crate::config::{self, RawConfig};
use crate::dual::{seed_grad, Dual, Dual1, Scalar};
use crate::expr::Expression;
use crate::flow::Trajectory;
use crate::geometry::{self, ProjectorPair};
use crate::linalg::{self, GMat};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

const TWO_PI: f64 = std::f64::consts::TAU;

/// A point of T*Q in bundle coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl PhasePoint {
    pub fn flat(&self) -> DVector<f64> {
        let n = self.q.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.p[i - n] })
    }

    pub fn from_flat(x: &[f64]) -> Self {
        let n = x.len() / 2;
        PhasePoint {
            q: DVector::from_column_slice(&x[..n]),
            p: DVector::from_column_slice(&x[n..]),
        }
    }
}

/// Per-point scratch record for the extension: coframe, constraint Jacobian,
/// coupling matrix, configuration projectors and the phase-space projector.
#[derive(Clone, Debug)]
pub struct ExtensionAssembly {
    /// Orthonormalized coframe, n x (n-k); columns are the zeta_I.
    pub e: DMatrix<f64>,
    /// F[j][K] = d f_K / d q^j with p held fixed, n x (n-k).
    pub f: DMatrix<f64>,
    /// Antisymmetric coupling matrix, n x n.
    pub t: DMatrix<f64>,
    pub rho: DMatrix<f64>,
    pub rho_bar: DMatrix<f64>,
    /// Phase-space projector [[rho, 0], [-T, rho^T]], 2n x 2n.
    pub pi_v: DMatrix<f64>,
}

/// The tuple (Q, g, U, W) plus parameter bindings. Immutable after load;
/// all assembly operations are pure.
#[derive(Debug, Clone)]
pub struct MechSystem {
    pub name: String,
    pub n: usize,
    pub coord_names: Vec<String>,
    pub periodic: Vec<bool>,
    pub unconstrained: bool,
    g_exprs: Vec<Expression>,
    u_expr: Expression,
    zeta_exprs: Vec<Vec<Expression>>,
    pub param_names: Vec<String>,
    pub param_values: Vec<f64>,
}

impl MechSystem {
    pub fn load_system(config_text: &str) -> Result<MechSystem> {
        let raw = config::parse(config_text)?;
        Self::from_config(&raw)
    }

    pub fn from_config(raw: &RawConfig) -> Result<MechSystem> {
        let n = raw.coordinates.len();
        if raw.periodic.len() != n {
            return Err(Error::Dimension(format!(
                "{} coordinates but {} periodic flags",
                n,
                raw.periodic.len()
            )));
        }
        if raw.metric_entries.len() != n * n {
            return Err(Error::Dimension(format!(
                "metric needs {} entries for {} coordinates, got {}",
                n * n,
                n,
                raw.metric_entries.len()
            )));
        }
        if raw.unconstrained {
            if !raw.zeta_rows.is_empty() {
                return Err(Error::Config {
                    line: None,
                    msg: "unconstrained = true but [constraints] rows are present".into(),
                });
            }
        } else if raw.zeta_rows.is_empty() {
            return Err(Error::Config {
                line: None,
                msg: "at least one constraint required; set unconstrained = true for a free system"
                    .into(),
            });
        }
        if raw.zeta_rows.len() >= n && !raw.unconstrained {
            return Err(Error::Dimension(format!(
                "{} constraint rows leave no degrees of freedom on a {n}-dimensional chart",
                raw.zeta_rows.len()
            )));
        }
        let param_names: Vec<String> = raw.params.iter().map(|(k, _)| k.clone()).collect();
        let param_values: Vec<f64> = raw.params.iter().map(|(_, v)| *v).collect();
        let coords = &raw.coordinates;
        let g_exprs = raw
            .metric_entries
            .iter()
            .map(|t| Expression::parse(t, coords, &param_names))
            .collect::<Result<Vec<_>>>()?;
        let u_expr = Expression::parse(&raw.potential, coords, &param_names)?;
        let zeta_exprs = raw
            .zeta_rows
            .iter()
            .map(|row| {
                if row.len() != n {
                    return Err(Error::Dimension(format!(
                        "constraint row has {} entries, expected {n}",
                        row.len()
                    )));
                }
                row.iter()
                    .map(|t| Expression::parse(t, coords, &param_names))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MechSystem {
            name: raw.name.clone(),
            n,
            coord_names: coords.clone(),
            periodic: raw.periodic.clone(),
            unconstrained: raw.unconstrained,
            g_exprs,
            u_expr,
            zeta_exprs,
            param_names,
            param_values,
        })
    }

    /// Number of constraint rows, n - k.
    pub fn num_constraints(&self) -> usize {
        self.zeta_exprs.len()
    }

    /// Rank of the constraint distribution W.
    pub fn k(&self) -> usize {
        self.n - self.zeta_exprs.len()
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.param_names
            .iter()
            .position(|p| p == name)
            .map(|i| self.param_values[i])
    }

    /// Wrap periodic coordinates into [0, 2pi). Storage only; derivative
    /// evaluation always treats coordinates as real.
    pub fn wrap_q(&self, q: &mut DVector<f64>) {
        for i in 0..self.n {
            if self.periodic[i] {
                q[i] = q[i].rem_euclid(TWO_PI);
            }
        }
    }

    /// Shortest-representative difference a - b; periodic coordinates wrap
    /// into [-pi, pi).
    pub fn config_delta(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            let d = a[i] - b[i];
            if self.periodic[i] {
                (d + std::f64::consts::PI).rem_euclid(TWO_PI) - std::f64::consts::PI
            } else {
                d
            }
        })
    }

    /// Periodic-aware distance between configuration points.
    pub fn config_distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.config_delta(a, b).norm()
    }

    // ---- generic (dual-capable) pipeline -------------------------------

    fn metric_scalar<T: Scalar>(&self, q: &[T], proto: &T) -> Result<GMat<T>> {
        let n = self.n;
        let mut data = Vec::with_capacity(n * n);
        for e in &self.g_exprs {
            data.push(e.eval_scalar(q, &self.param_values, proto)?);
        }
        Ok(GMat { rows: n, cols: n, data })
    }

    fn coframe_scalar<T: Scalar>(
        &self,
        q: &[T],
        g_inv: &GMat<T>,
        proto: &T,
    ) -> Result<Vec<Vec<T>>> {
        let rows = self
            .zeta_exprs
            .iter()
            .map(|row| {
                row.iter()
                    .map(|e| e.eval_scalar(q, &self.param_values, proto))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        linalg::gram_schmidt(&rows, g_inv)
    }

    /// Constraint functions f_I = zeta_I(g^-1 p) evaluated generically; the
    /// coframe is g*-orthonormalized first, so E's q-dependence is included
    /// when `q` carries duals.
    fn constraints_scalar<T: Scalar>(&self, q: &[T], p: &[T], proto: &T) -> Result<Vec<T>> {
        let g = self.metric_scalar(q, proto)?;
        let g_inv = g.inverse()?;
        let e = self.coframe_scalar(q, &g_inv, proto)?;
        let ginv_p = g_inv.matvec(p);
        Ok(e.iter()
            .map(|zeta| {
                let mut acc = proto.lift(0.0);
                for (zi, vi) in zeta.iter().zip(&ginv_p) {
                    acc = acc.add(&zi.mul(vi));
                }
                acc
            })
            .collect())
    }

    // ---- f64 front ends -------------------------------------------------

    /// Metric tensor with lazy SPD check.
    pub fn metric(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let qs: Vec<f64> = q.iter().cloned().collect();
        let g = self.metric_scalar(&qs, &0.0)?;
        let m = DMatrix::from_fn(self.n, self.n, |i, j| *g.at(i, j));
        let asym = (&m - m.transpose()).abs().max();
        if asym > 1e-10 * m.abs().max().max(1.0) {
            return Err(Error::Config {
                line: None,
                msg: format!("metric is not symmetric at q = {qs:?} (residual {asym})"),
            });
        }
        if nalgebra::Cholesky::new(m.clone()).is_none() {
            return Err(Error::NotSpd(qs));
        }
        Ok(m)
    }

    pub fn metric_inv(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m = self.metric(q)?;
        Ok(nalgebra::Cholesky::new(m).unwrap().inverse())
    }

    /// Orthonormalized coframe matrix E (n x (n-k)); empty when unconstrained.
    pub fn coframe(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        if self.unconstrained {
            return Ok(DMatrix::zeros(self.n, 0));
        }
        let g_inv = self.metric_inv(q)?;
        let zetas: Vec<DVector<f64>> = self
            .zeta_exprs
            .iter()
            .map(|row| {
                Ok(DVector::from_vec(
                    row.iter()
                        .map(|e| e.eval(q.as_slice(), &self.param_values))
                        .collect::<Result<Vec<f64>>>()?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        geometry::orthonormalize_coframe(&zetas, &g_inv)
    }

    /// Configuration-space projector pair at q.
    pub fn projectors(&self, q: &DVector<f64>) -> Result<ProjectorPair> {
        let g_inv = self.metric_inv(q)?;
        let e = self.coframe(q)?;
        Ok(geometry::projectors_from_coframe(&e, &g_inv))
    }

    pub fn potential(&self, q: &DVector<f64>) -> Result<f64> {
        self.u_expr.eval(q.as_slice(), &self.param_values)
    }

    pub fn grad_potential(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(
            self.u_expr.grad(q.as_slice(), &self.param_values)?,
        ))
    }

    pub fn hess_potential(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.u_expr.hessian(q.as_slice(), &self.param_values)
    }

    /// H = 1/2 p^T g^-1(q) p + U(q).
    pub fn hamiltonian(&self, x: &PhasePoint) -> Result<f64> {
        let g_inv = self.metric_inv(&x.q)?;
        Ok(0.5 * x.p.dot(&(&g_inv * &x.p)) + self.potential(&x.q)?)
    }

    /// Both partial gradients of H: (dH/dq, dH/dp). The q-gradient includes
    /// the derivative of g^-1 through the dual pipeline.
    pub fn grad_hamiltonian(&self, x: &PhasePoint) -> Result<(DVector<f64>, DVector<f64>)> {
        // check SPD (and symmetry) before doing dual work
        let g_inv_f = self.metric_inv(&x.q)?;
        let dp = &g_inv_f * &x.p;

        let qs: Vec<f64> = x.q.iter().cloned().collect();
        let qd = seed_grad(&qs);
        let proto = Dual::constant(&0.0, 0.0, self.n);
        let g = self.metric_scalar(&qd, &proto)?;
        let g_inv = g.inverse()?;
        let pd: Vec<Dual1> = x.p.iter().map(|&v| proto.lift(v)).collect();
        let ginv_p = g_inv.matvec(&pd);
        let mut kinetic = proto.lift(0.0);
        for (pi, vi) in pd.iter().zip(&ginv_p) {
            kinetic = kinetic.add(&pi.mul(vi));
        }
        let half = proto.lift(0.5);
        let kinetic = kinetic.mul(&half);
        let u = self.u_expr.eval_scalar(&qd, &self.param_values, &proto)?;
        let h = kinetic.add(&u);
        let dq = DVector::from_fn(self.n, |i, _| h.eps[i]);
        if dq.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dH/dq".into()));
        }
        Ok((dq, dp))
    }

    /// Constraint values f = E^T g^-1 p.
    pub fn constraint_values(&self, x: &PhasePoint) -> Result<DVector<f64>> {
        if self.unconstrained {
            return Ok(DVector::zeros(0));
        }
        let qs: Vec<f64> = x.q.iter().cloned().collect();
        let ps: Vec<f64> = x.p.iter().cloned().collect();
        let f = self.constraints_scalar(&qs, &ps, &0.0)?;
        Ok(DVector::from_vec(f))
    }

    /// Lyapunov function of the physical leaf, L = sum_I |f_I|^2.
    pub fn lyapunov(&self, x: &PhasePoint) -> Result<f64> {
        Ok(self.constraint_values(x)?.norm_squared())
    }

    /// Assemble the per-point extension record.
    pub fn assemble(&self, x: &PhasePoint) -> Result<ExtensionAssembly> {
        let n = self.n;
        if self.unconstrained {
            let id = DMatrix::identity(n, n);
            return Ok(ExtensionAssembly {
                e: DMatrix::zeros(n, 0),
                f: DMatrix::zeros(n, 0),
                t: DMatrix::zeros(n, n),
                rho: id.clone(),
                rho_bar: DMatrix::zeros(n, n),
                pi_v: DMatrix::identity(2 * n, 2 * n),
            });
        }
        let nc = self.num_constraints();
        let g_inv = self.metric_inv(&x.q)?;
        let e = self.coframe(&x.q)?;
        let pair = geometry::projectors_from_coframe(&e, &g_inv);

        // F by differentiating the orthonormalized f(q, p) in q with p fixed
        let qs: Vec<f64> = x.q.iter().cloned().collect();
        let qd = seed_grad(&qs);
        let proto = Dual::constant(&0.0, 0.0, n);
        let pd: Vec<Dual1> = x.p.iter().map(|&v| proto.lift(v)).collect();
        let fd = self.constraints_scalar(&qd, &pd, &proto)?;
        let mut f = DMatrix::zeros(n, nc);
        for (kk, fk) in fd.iter().enumerate() {
            for j in 0..n {
                let v = fk.eps[j];
                if !v.is_finite() {
                    return Err(Error::NonFinite("constraint Jacobian F".into()));
                }
                f[(j, kk)] = v;
            }
        }

        let t = &e * f.transpose() * &pair.rho - pair.rho.transpose() * &f * e.transpose();
        let mut pi_v = DMatrix::zeros(2 * n, 2 * n);
        pi_v.view_mut((0, 0), (n, n)).copy_from(&pair.rho);
        pi_v.view_mut((n, 0), (n, n)).copy_from(&(-&t));
        pi_v.view_mut((n, n), (n, n)).copy_from(&pair.rho.transpose());
        Ok(ExtensionAssembly {
            e,
            f,
            t,
            rho: pair.rho,
            rho_bar: pair.rho_bar,
            pi_v,
        })
    }

    /// Right-hand side of the extension:
    /// `qdot = rho dH_p`, `pdot = -rho^T dH_q - T dH_p`.
    pub fn extension_field(&self, x: &PhasePoint) -> Result<DVector<f64>> {
        let asm = self.assemble(x)?;
        let (dq, dp) = self.grad_hamiltonian(x)?;
        let qdot = &asm.rho * &dp;
        let pdot = -(asm.rho.transpose() * &dq) - &asm.t * &dp;
        let n = self.n;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&qdot);
        out.rows_mut(n, n).copy_from(&pdot);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extension field".into()));
        }
        Ok(out)
    }

    /// Project the momentum onto the physical leaf: p' = rho^T p, after which
    /// all constraint values vanish.
    pub fn physical_leaf_project(&self, x: &PhasePoint) -> Result<PhasePoint> {
        let asm = self.assemble(x)?;
        Ok(PhasePoint {
            q: x.q.clone(),
            p: asm.rho.transpose() * &x.p,
        })
    }

    /// Maxima over trajectory samples of the three Euler-Lagrange residuals
    /// (horizontal velocity, projected force balance, leaf membership), with
    /// derivatives taken from the extension field itself.
    pub fn holder_residuals(&self, traj: &Trajectory) -> Result<(f64, f64, f64)> {
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        for state in &traj.states {
            let x = PhasePoint::from_flat(state.as_slice());
            let field = self.extension_field(&x)?;
            let n = self.n;
            let qdot = field.rows(0, n).into_owned();
            let pdot = field.rows(n, n).into_owned();
            let asm = self.assemble(&x)?;
            let (dq, dp) = self.grad_hamiltonian(&x)?;
            let r1 = (&qdot - &asm.rho * &dp).norm();
            let r2 = (asm.rho.transpose() * (&pdot + &dq)).norm();
            let r3 = (&asm.rho_bar * &dp).norm();
            worst.0 = worst.0.max(r1);
            worst.1 = worst.1.max(r2);
            worst.2 = worst.2.max(r3);
        }
        Ok(worst)
    }

    /// Configuration projector rho and its coordinate derivatives, via the
    /// dual pipeline (used by the analytic linearization).
    pub fn rho_with_derivatives(
        &self,
        q: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let n = self.n;
        if self.unconstrained {
            return Ok((
                DMatrix::identity(n, n),
                vec![DMatrix::zeros(n, n); n],
            ));
        }
        let qs: Vec<f64> = q.iter().cloned().collect();
        let qd = seed_grad(&qs);
        let proto = Dual::constant(&0.0, 0.0, n);
        let g = self.metric_scalar(&qd, &proto)?;
        let g_inv = g.inverse()?;
        let e = self.coframe_scalar(&qd, &g_inv, &proto)?;
        // rho_bar = g^-1 E E^T; build as sum over coframe columns
        let mut rho = DMatrix::<f64>::identity(n, n);
        let mut drho = vec![DMatrix::<f64>::zeros(n, n); n];
        for zeta in &e {
            let gz = g_inv.matvec(zeta); // column of g^-1 E
            for i in 0..n {
                for j in 0..n {
                    let prod = gz[i].mul(&zeta[j]);
                    rho[(i, j)] -= prod.re;
                    for (r, d) in drho.iter_mut().enumerate() {
                        d[(i, j)] -= prod.eps[r];
                    }
                }
            }
        }
        Ok((rho, drho))
    }
}
