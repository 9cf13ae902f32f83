//! Linearization of the extension at equilibria, stability classification,
//! frequency extraction and small-divisor resonance diagnostics.
//!
//! At an equilibrium (q_c, 0) on the critical bundle the linearized
//! extension is block anti-diagonal:
//!
//! ```text
//! DX = [[0,                      rho g^-1 rho^T],
//!       [-(rho^T D^2U rho + R),  0             ]]
//! ```
//!
//! with the curvature correction `R_jk = dU_i rho^r_j rho^s_k d_s rho^i_r`.
//! The analytic assembly is always cross-validated against the
//! finite-difference Jacobian of the extension field; the comparison is part
//! of the report.

use crate::critical::{self, CriticalPoint, ON_MANIFOLD_TOL};
use crate::linalg;
use crate::mechsys::{MechSystem, PhasePoint};
use crate::{Error, Result};
use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

/// Default spectral tolerance for classification.
pub const CLASSIFY_TOL: f64 = 1e-8;
/// Default absolute tolerance on small divisors.
pub const RESONANCE_TOL: f64 = 1e-6;
/// Hard cap on resonance enumeration size per order r.
pub const ENUMERATION_CAP: u64 = 10_000_000;
/// Entrywise tolerance for the analytic-vs-finite-difference cross-check.
pub const CROSSCHECK_TOL: f64 = 1e-5;

pub type C64 = Complex<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    AsymptoticallyStable,
    Unstable,
    CriticallyStable,
    Degenerate,
}

/// One candidate tuple (l; i_1..i_r) from the resonance scan.
#[derive(Clone, Debug, Serialize)]
pub struct ResonanceFinding {
    pub r: usize,
    /// Indices into the signed frequency set; the leading entry is l.
    pub tuple: Vec<usize>,
    /// omega_l + sum_m omega_{i_m}.
    pub divisor: f64,
    pub resonant: bool,
    /// True when the tuple multiset cancels in +/- pairs, which happens for
    /// every system because frequencies come in opposite-sign pairs.
    pub structural: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConjectureHypotheses {
    pub index_zero: bool,
    pub no_resonance_to_r: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossCheck {
    pub max_abs_diff: f64,
    pub within_tol: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PointRecord {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

/// Linearization plus its finite-difference cross-check.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// Matrix used downstream: the analytic assembly when the cross-check
    /// passes, otherwise the finite-difference arbiter.
    pub matrix: DMatrix<f64>,
    /// The analytic assembly `[[0, rho g^-1 rho^T], [-(rho^T D2U rho + R), 0]]`.
    pub analytic: DMatrix<f64>,
    pub crosscheck: CrossCheck,
}

/// Full stability report at an equilibrium of the extension.
#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub point: PointRecord,
    /// Eigenvalues as [re, im] pairs, sorted by (re, im).
    pub spectrum: Vec<[f64; 2]>,
    pub classification: Classification,
    pub frequencies: Vec<f64>,
    pub index: usize,
    pub resonances: Vec<ResonanceFinding>,
    pub conjecture_hypotheses: ConjectureHypotheses,
    pub linearization_crosscheck: CrossCheck,
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
}

/// Analytic linearization of the extension field at (q_c, 0), cross-checked
/// entrywise against central finite differences of the field.
pub fn linearize_extension(sys: &MechSystem, q_c: &DVector<f64>) -> Result<Linearization> {
    let r = critical::critical_residual(sys, q_c)?.norm();
    if r > ON_MANIFOLD_TOL {
        return Err(Error::OffCritical {
            residual: r,
            tol: ON_MANIFOLD_TOL,
        });
    }
    let n = sys.n;
    let g_inv = sys.metric_inv(q_c)?;
    let (rho, drho) = sys.rho_with_derivatives(q_c)?;
    let du = sys.grad_potential(q_c)?;
    let d2u = sys.hess_potential(q_c)?;

    let upper_right = &rho * &g_inv * rho.transpose();
    // R = rho^T M rho with M[r][s] = sum_i d_s rho[i][r] dU_i
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        let col = drho[s].transpose() * &du;
        for rr in 0..n {
            m[(rr, s)] = col[rr];
        }
    }
    let big_r = rho.transpose() * m * &rho;
    let lower_left = -(rho.transpose() * d2u * &rho + big_r);

    let mut dx = DMatrix::zeros(2 * n, 2 * n);
    dx.view_mut((0, n), (n, n)).copy_from(&upper_right);
    dx.view_mut((n, 0), (n, n)).copy_from(&lower_left);

    // mandatory cross-check against the finite-difference Jacobian; the
    // finite differences arbitrate when the analytic blocks disagree (the
    // lower-left reduction to rho^T D2U rho + R needs the constrained
    // directions tangent to C_Q, which a non-diagonal metric can break)
    let x0: Vec<f64> = q_c.iter().cloned().chain(std::iter::repeat(0.0).take(n)).collect();
    let fd = linalg::fd_jacobian(
        &|x| sys.extension_field(&PhasePoint::from_flat(x)),
        &x0,
        1e-6,
    )?;
    let max_abs_diff = (&dx - &fd).abs().max();
    let within_tol = max_abs_diff <= CROSSCHECK_TOL;
    Ok(Linearization {
        matrix: if within_tol { dx.clone() } else { fd },
        analytic: dx,
        crosscheck: CrossCheck {
            max_abs_diff,
            within_tol,
        },
    })
}

fn is_zero_mode(l: &C64, tol: f64) -> bool {
    l.norm() <= tol
}

fn on_axis(l: &C64, tol: f64) -> bool {
    l.re.abs() <= tol * (1.0 + l.norm())
}

/// Classify a spectrum by the real-part pattern of its nonzero eigenvalues.
pub fn classify(spectrum: &[C64], tol: f64) -> Classification {
    if spectrum
        .iter()
        .any(|l| l.re > tol * (1.0 + l.norm()))
    {
        return Classification::Unstable;
    }
    let nonzero: Vec<&C64> = spectrum.iter().filter(|l| !is_zero_mode(l, tol)).collect();
    if !nonzero.is_empty()
        && nonzero
            .iter()
            .all(|l| l.re < -tol * (1.0 + l.norm()))
    {
        return Classification::AsymptoticallyStable;
    }
    if nonzero.iter().all(|l| on_axis(l, tol))
        && nonzero.iter().any(|l| l.im.abs() > tol)
    {
        return Classification::CriticallyStable;
    }
    Classification::Degenerate
}

/// Moduli of the oscillatory eigenfrequencies: one entry per conjugate pair
/// on the imaginary axis, multiplicity kept, sorted ascending.
///
/// Errors when the spectrum has off-axis structure (classification other
/// than critically stable or all-zero).
pub fn frequencies(spectrum: &[C64], tol: f64) -> Result<Vec<f64>> {
    match classify(spectrum, tol) {
        Classification::CriticallyStable => {}
        Classification::Degenerate
            if spectrum.iter().all(|l| is_zero_mode(l, tol)) => {}
        other => {
            return Err(Error::NotCriticallyStable(format!(
                "frequencies (classification {other:?})"
            )))
        }
    }
    let mut out: Vec<f64> = spectrum
        .iter()
        .filter(|l| on_axis(l, tol) && l.im > tol)
        .map(|l| l.im)
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// The signed frequency set {+omega} union {-omega}.
pub fn signed_frequencies(freqs: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = freqs.to_vec();
    out.extend(freqs.iter().map(|w| -w));
    out
}

fn check_cap(set_len: usize, r: usize) -> Result<()> {
    let mut total: u64 = 1;
    for _ in 0..r {
        total = total
            .checked_mul(set_len as u64)
            .ok_or(Error::EnumerationCap(u64::MAX, ENUMERATION_CAP))?;
        if total > ENUMERATION_CAP {
            return Err(Error::EnumerationCap(total, ENUMERATION_CAP));
        }
    }
    Ok(())
}

/// Iterate over non-decreasing index tuples of length r into 0..len
/// (combinations with repetition).
fn for_each_multiset(len: usize, r: usize, f: &mut dyn FnMut(&[usize])) {
    let mut idx = vec![0usize; r];
    loop {
        f(&idx);
        // odometer with non-decreasing constraint
        let mut pos = r;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            if idx[pos] + 1 < len {
                idx[pos] += 1;
                for j in pos + 1..r {
                    idx[j] = idx[pos];
                }
                break;
            }
        }
    }
}

/// Exact distance between the r-fold sumset of the signed frequency set and
/// the negated set: `min |a + w|` over r-term sums a and frequencies w.
pub fn sumset_distance(signed: &[f64], r: usize) -> Result<f64> {
    assert!(r >= 1);
    if signed.is_empty() {
        return Ok(f64::INFINITY);
    }
    check_cap(signed.len(), r)?;
    let mut best = f64::INFINITY;
    for_each_multiset(signed.len(), r, &mut |idx| {
        let sum: f64 = idx.iter().map(|&i| signed[i]).sum();
        for &w in signed {
            best = best.min((sum + w).abs());
        }
    });
    Ok(best)
}

/// True when the multiset of values cancels in exact +/- pairs.
fn cancels_in_pairs(values: &[f64]) -> bool {
    if values.len() % 2 != 0 {
        return false;
    }
    let mut rest: Vec<f64> = values.to_vec();
    while let Some(v) = rest.pop() {
        let mate = rest
            .iter()
            .position(|&w| (w + v).abs() <= 1e-9 * (1.0 + v.abs()));
        match mate {
            Some(j) => {
                rest.swap_remove(j);
            }
            None => return false,
        }
    }
    true
}

/// Scan all tuples (l; i_1 <= ... <= i_r) for r = 1..=r_max, excluding
/// all-equal-index tuples, and report divisors sorted by magnitude.
pub fn resonance_scan(
    signed: &[f64],
    r_max: usize,
    resonance_tol: f64,
) -> Result<Vec<ResonanceFinding>> {
    let len = signed.len();
    let mut findings = Vec::new();
    for r in 1..=r_max {
        check_cap(len, r)?;
        for l in 0..len {
            for_each_multiset(len, r, &mut |idx| {
                if idx.iter().all(|&i| i == l) {
                    return; // nested commutators vanish for all-equal indices
                }
                let divisor = signed[l] + idx.iter().map(|&i| signed[i]).sum::<f64>();
                let mut tuple = Vec::with_capacity(r + 1);
                tuple.push(l);
                tuple.extend_from_slice(idx);
                let values: Vec<f64> = tuple.iter().map(|&i| signed[i]).collect();
                findings.push(ResonanceFinding {
                    r,
                    tuple,
                    divisor,
                    resonant: divisor.abs() < resonance_tol,
                    structural: cancels_in_pairs(&values),
                });
            });
        }
    }
    findings.sort_by(|a, b| {
        a.divisor
            .abs()
            .partial_cmp(&b.divisor.abs())
            .unwrap()
            .then(a.r.cmp(&b.r))
            .then(a.tuple.cmp(&b.tuple))
    });
    Ok(findings)
}

/// Closed-form oscillatory integral
/// `I_{l;i_1..i_r}(t) = int_0^t omega_l A_l prod_m A_{i_m} e^{-i s delta} ds`
/// with `delta = omega_l + sum omega_{i_m}`; the resonant branch is linear
/// in t.
pub fn i_integral(
    l: usize,
    idx_tuple: &[usize],
    t: f64,
    amplitudes: &[C64],
    signed: &[f64],
    resonance_tol: f64,
) -> C64 {
    let omega_l = signed[l];
    let delta: f64 = omega_l + idx_tuple.iter().map(|&i| signed[i]).sum::<f64>();
    let mut prod = amplitudes[l];
    for &i in idx_tuple {
        prod *= amplitudes[i];
    }
    if delta.abs() < resonance_tol {
        return C64::new(-t * omega_l, 0.0) * prod;
    }
    let phase = C64::new(0.0, -t * delta).exp() - C64::new(1.0, 0.0);
    C64::new(0.0, omega_l / delta) * prod * phase
}

/// Aggregate report: linearization, spectrum, classification, frequencies,
/// resonance scan up to r_max, the component index, and whether both
/// hypotheses of the critical-stability conjecture hold.
pub fn stability_report(sys: &MechSystem, q_c: &DVector<f64>, r_max: usize) -> Result<StabilityReport> {
    let cp: CriticalPoint = critical::classify_point(sys, q_c)?;
    let index = critical::component_index(sys, &cp)?;
    let lin = linearize_extension(sys, q_c)?;
    let eig = lin.matrix.clone().complex_eigenvalues();
    let mut spectrum: Vec<C64> = eig.iter().cloned().collect();
    spectrum.sort_by(|a, b| {
        a.re.partial_cmp(&b.re)
            .unwrap()
            .then(a.im.partial_cmp(&b.im).unwrap())
    });
    let classification = classify(&spectrum, CLASSIFY_TOL);
    let freqs = if classification == Classification::CriticallyStable {
        frequencies(&spectrum, CLASSIFY_TOL)?
    } else {
        Vec::new()
    };
    let resonances = if freqs.is_empty() {
        Vec::new()
    } else {
        resonance_scan(&signed_frequencies(&freqs), r_max, RESONANCE_TOL)?
    };
    let no_resonance = !resonances.iter().any(|f| f.resonant && !f.structural);
    Ok(StabilityReport {
        point: PointRecord {
            q: q_c.iter().cloned().collect(),
            p: vec![0.0; sys.n],
        },
        spectrum: spectrum.iter().map(|l| [l.re, l.im]).collect(),
        classification,
        frequencies: freqs,
        index,
        resonances,
        conjecture_hypotheses: ConjectureHypotheses {
            index_zero: index == 0,
            no_resonance_to_r: no_resonance,
        },
        linearization_crosscheck: lin.crosscheck,
        matrix: lin.matrix,
    })
}
