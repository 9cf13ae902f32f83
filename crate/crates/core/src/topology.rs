//! Poincare-polynomial ledger for the critical manifold: the shifted sum of
//! component Betti polynomials against the ambient Betti numbers, the
//! Morse-style inequalities and the Euler-characteristic identity. Exact
//! integer arithmetic throughout.

use serde::{Deserialize, Serialize};

/// Betti data of one connectivity component together with its index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentTopology {
    pub label: String,
    pub betti: Vec<u64>,
    pub index: usize,
}

/// Integer polynomial in ascending degree order, canonical (no trailing
/// zeros).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyZ {
    pub coeffs: Vec<i64>,
}

impl PolyZ {
    pub fn zero() -> PolyZ {
        PolyZ { coeffs: Vec::new() }
    }

    pub fn from_coeffs(mut coeffs: Vec<i64>) -> PolyZ {
        while coeffs.last() == Some(&0) {
            coeffs.pop();
        }
        PolyZ { coeffs }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn degree(&self) -> Option<usize> {
        self.coeffs.len().checked_sub(1)
    }

    pub fn coeff(&self, p: usize) -> i64 {
        self.coeffs.get(p).copied().unwrap_or(0)
    }

    pub fn add(&self, other: &PolyZ) -> PolyZ {
        let len = self.coeffs.len().max(other.coeffs.len());
        PolyZ::from_coeffs((0..len).map(|i| self.coeff(i) + other.coeff(i)).collect())
    }

    pub fn sub(&self, other: &PolyZ) -> PolyZ {
        let len = self.coeffs.len().max(other.coeffs.len());
        PolyZ::from_coeffs((0..len).map(|i| self.coeff(i) - other.coeff(i)).collect())
    }

    /// Multiply by lambda^s.
    pub fn shift(&self, s: usize) -> PolyZ {
        if self.is_zero() {
            return PolyZ::zero();
        }
        let mut coeffs = vec![0i64; s];
        coeffs.extend_from_slice(&self.coeffs);
        PolyZ { coeffs }
    }

    /// Evaluate at an integer point.
    pub fn eval(&self, x: i64) -> i64 {
        self.coeffs.iter().rev().fold(0i64, |acc, &c| acc * x + c)
    }

    /// Exact division by (1 + lambda) via synthetic division at the root -1;
    /// returns None when a remainder is left.
    pub fn div_one_plus_lambda(&self) -> Option<PolyZ> {
        if self.is_zero() {
            return Some(PolyZ::zero());
        }
        let mut quotient = vec![0i64; self.coeffs.len() - 1];
        let mut carry = 0i64;
        for i in (0..self.coeffs.len()).rev() {
            let value = self.coeffs[i] - carry;
            if i == 0 {
                if value != 0 {
                    return None; // remainder
                }
                break;
            }
            quotient[i - 1] = value;
            carry = value;
        }
        Some(PolyZ::from_coeffs(quotient))
    }
}

/// Poincare polynomial of a component from its Betti numbers.
pub fn betti_polynomial(betti: &[u64]) -> PolyZ {
    PolyZ::from_coeffs(betti.iter().map(|&b| b as i64).collect())
}

/// Left side of the ledger identity: `sum_i lambda^{mu_i} P_{C_i}(lambda)`.
pub fn shifted_sum(components: &[ComponentTopology]) -> PolyZ {
    components
        .iter()
        .fold(PolyZ::zero(), |acc, c| {
            acc.add(&betti_polynomial(&c.betti).shift(c.index))
        })
}

/// Outcome of the ledger identity check.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum QPolynomialOutcome {
    /// The identity holds with the given quotient polynomial.
    Holds { q: PolyZ },
    /// The difference is not divisible by (1 + lambda) or the quotient has a
    /// negative coefficient.
    Violation { reason: String, difference: PolyZ },
}

/// Solve `shifted_sum = ambient + (1 + lambda) Q` for Q with non-negative
/// integer coefficients; a failure is a structured violation, not an error.
pub fn q_polynomial(components: &[ComponentTopology], ambient_betti: &[u64]) -> QPolynomialOutcome {
    let lhs = shifted_sum(components);
    let ambient = betti_polynomial(ambient_betti);
    let diff = lhs.sub(&ambient);
    match diff.div_one_plus_lambda() {
        None => QPolynomialOutcome::Violation {
            reason: "difference is not divisible by (1 + lambda)".into(),
            difference: diff,
        },
        Some(q) => {
            if q.coeffs.iter().any(|&c| c < 0) {
                QPolynomialOutcome::Violation {
                    reason: format!("quotient has a negative coefficient: {:?}", q.coeffs),
                    difference: diff,
                }
            } else {
                QPolynomialOutcome::Holds { q }
            }
        }
    }
}

/// Per-degree Morse inequalities `sum_i b_{p - mu_i}(C_i) >= b_p(M)`.
pub fn morse_inequalities(components: &[ComponentTopology], ambient_betti: &[u64]) -> Vec<bool> {
    let lhs = shifted_sum(components);
    let ambient = betti_polynomial(ambient_betti);
    let top = lhs.coeffs.len().max(ambient.coeffs.len());
    (0..top).map(|p| lhs.coeff(p) >= ambient.coeff(p)).collect()
}

/// Euler characteristic from Betti numbers: alternating sum.
pub fn euler_characteristic(betti: &[u64]) -> i64 {
    betti
        .iter()
        .enumerate()
        .map(|(p, &b)| if p % 2 == 0 { b as i64 } else { -(b as i64) })
        .sum()
}

/// The identity `sum_i (-1)^{mu_i} chi(C_i) = chi(M)`; returns the verdict
/// together with both sides.
pub fn euler_check(components: &[ComponentTopology], ambient_betti: &[u64]) -> (bool, i64, i64) {
    let lhs: i64 = components
        .iter()
        .map(|c| {
            let chi = euler_characteristic(&c.betti);
            if c.index % 2 == 0 {
                chi
            } else {
                -chi
            }
        })
        .sum();
    let rhs = euler_characteristic(ambient_betti);
    (lhs == rhs, lhs, rhs)
}

/// Input record for the CLI topology check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologyInput {
    pub ambient_betti: Vec<u64>,
    pub components: Vec<ComponentTopology>,
}

/// Full verdict: ledger identity, per-degree inequalities, Euler identity.
#[derive(Clone, Debug, Serialize)]
pub struct TopologyVerdict {
    pub identity: QPolynomialOutcome,
    pub morse_inequalities: Vec<bool>,
    pub euler_holds: bool,
    pub euler_lhs: i64,
    pub euler_rhs: i64,
}

pub fn verdict(input: &TopologyInput) -> TopologyVerdict {
    let identity = q_polynomial(&input.components, &input.ambient_betti);
    let ineq = morse_inequalities(&input.components, &input.ambient_betti);
    let (euler_holds, euler_lhs, euler_rhs) = euler_check(&input.components, &input.ambient_betti);
    TopologyVerdict {
        identity,
        morse_inequalities: ineq,
        euler_holds,
        euler_lhs,
        euler_rhs,
    }
}
