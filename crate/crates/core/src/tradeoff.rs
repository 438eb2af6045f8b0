//! End-to-end delay of two concatenated queues.
//!
//! With per-queue delay tails `Pr{D_k > t} = exp(-J_k t)` the tail of the sum
//! is
//!
//! ```text
//! theta(J1, J2) = (J1 e^{-J2 D} - J2 e^{-J1 D}) / (J1 - J2),   J1 != J2
//!               = (1 + J D) e^{-J D},                           J1 = J2 = J
//! ```
//!
//! and a pair of exponents meets an `(eps, D)` constraint with equality when
//! `theta(J1, J2) = eps`. Exponents are per block and `D` is in blocks.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Below this value of `|J1 - J2| * D` the symmetric branch is used at the
/// mean exponent.
pub const BRANCH_SWITCH: f64 = 1e-6;

/// Default `J2` ceiling of [`ConstraintCurve`], per block.
pub const DEFAULT_PHI_CEILING: f64 = 1e6;

/// Lower branch `W_{-1}` of the Lambert W function on `[-1/e, 0)`.
pub fn lambert_w_m1(x: f64) -> Result<f64> {
    let branch_point = -1.0 / E;
    if !(x < 0.0 && x >= branch_point) {
        // tolerate the rounding of -1/e itself
        if x < branch_point && x > branch_point * (1.0 + 4.0 * f64::EPSILON) {
            return Ok(-1.0);
        }
        return Err(Error::Domain {
            value: x,
            domain: "[-1/e, 0)",
        });
    }
    if x == branch_point {
        return Ok(-1.0);
    }
    let q = 1.0 + E * x;
    let mut w = if q < 0.3 {
        // expansion around the branch point in p = -sqrt(2(1 + e x))
        let p = -(2.0 * q).max(0.0).sqrt();
        let series = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p.powi(3) - 43.0 / 540.0 * p.powi(4)
            + 769.0 / 17280.0 * p.powi(5)
            - 221.0 / 8505.0 * p.powi(6);
        if p.abs() < 1e-5 {
            return Ok(series);
        }
        series
    } else {
        let l1 = (-x).ln();
        let l2 = (-l1).ln();
        l1 - l2 + l2 / l1
    };
    for _ in 0..100 {
        // Halley on w - x e^{-w} = 0, which is w e^w = x scaled by e^{-w}
        let wp1 = w + 1.0;
        let t = w - x * (-w).exp();
        let step = t / (wp1 - (w + 2.0) * t / (2.0 * wp1));
        let next = (w - step).min(-1.0);
        if (next - w).abs() <= 4.0 * f64::EPSILON * w.abs() {
            return Ok(next);
        }
        w = next;
    }
    Err(Error::NonConvergence(format!("Lambert W_-1 at {x}")))
}

/// `(eps, D_max)` with `D_max` in blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayConstraint {
    epsilon: f64,
    d_max_blocks: f64,
    j0: f64,
    j_th: f64,
}

impl DelayConstraint {
    pub fn new(epsilon: f64, d_max_blocks: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(invalid("epsilon", format!("must lie in (0, 1], got {epsilon}")));
        }
        if !(d_max_blocks > 0.0 && d_max_blocks.is_finite()) {
            return Err(invalid("d_max", format!("must be positive, got {d_max_blocks}")));
        }
        let j0 = -epsilon.ln() / d_max_blocks;
        let j_th = if epsilon == 1.0 {
            0.0
        } else {
            -(1.0 + lambert_w_m1(-epsilon / E)?) / d_max_blocks
        };
        Ok(Self {
            epsilon,
            d_max_blocks,
            j0,
            j_th,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn d_max_blocks(&self) -> f64 {
        self.d_max_blocks
    }

    /// Exponent a single queue would need, `-ln(eps) / D`.
    pub fn j0(&self) -> f64 {
        self.j0
    }

    /// Symmetric point of the constraint curve.
    pub fn j_th(&self) -> f64 {
        self.j_th
    }

    /// True when the constraint is void (`eps = 1`).
    pub fn is_void(&self) -> bool {
        self.epsilon == 1.0
    }
}

/// Symmetric-point exponent `J_th(eps)`.
pub fn j_threshold(constraint: &DelayConstraint) -> f64 {
    constraint.j_th()
}

/// `Pr{D1 + D2 > D}` for exponential stage delays with rates `j1`, `j2`.
pub fn delay_violation(j1: f64, j2: f64, d_max_blocks: f64) -> f64 {
    let a = j1.max(0.0) * d_max_blocks;
    let b = j2.max(0.0) * d_max_blocks;
    let value = if a.is_infinite() || b.is_infinite() {
        (-a.min(b)).exp()
    } else if (a - b).abs() < BRANCH_SWITCH {
        let x = 0.5 * (a + b);
        (1.0 + x) * (-x).exp()
    } else {
        (a * (-b).exp() - b * (-a).exp()) / (a - b)
    };
    value.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiValue {
    Finite(f64),
    /// The partner exponent would exceed the ceiling.
    AboveCeiling,
}

impl PhiValue {
    /// The exponent, with `AboveCeiling` mapped to infinity.
    pub fn value(self) -> f64 {
        match self {
            PhiValue::Finite(v) => v,
            PhiValue::AboveCeiling => f64::INFINITY,
        }
    }
}

/// The curve `J2 = Phi(J1)` on which `theta(J1, J2) = eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintCurve {
    constraint: DelayConstraint,
    ceiling: f64,
}

impl ConstraintCurve {
    pub fn new(constraint: DelayConstraint) -> Self {
        Self {
            constraint,
            ceiling: DEFAULT_PHI_CEILING,
        }
    }

    pub fn with_ceiling(constraint: DelayConstraint, ceiling: f64) -> Self {
        Self { constraint, ceiling }
    }

    pub fn constraint(&self) -> &DelayConstraint {
        &self.constraint
    }

    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }

    pub fn violation(&self, j1: f64, j2: f64) -> f64 {
        delay_violation(j1, j2, self.constraint.d_max_blocks)
    }

    /// `Phi(j1)`; requires `j1 > J0`.
    pub fn phi(&self, j1: f64) -> Result<PhiValue> {
        let c = &self.constraint;
        if c.is_void() {
            if j1 < 0.0 {
                return Err(Error::Domain {
                    value: j1,
                    domain: "[0, inf)",
                });
            }
            return Ok(PhiValue::Finite(0.0));
        }
        if j1 < c.j0 || j1.is_nan() {
            return Err(Error::Domain {
                value: j1,
                domain: "[J0, inf)",
            });
        }
        if j1 == c.j0 {
            return Err(Error::Unbounded(j1));
        }
        if j1.is_infinite() {
            return Ok(PhiValue::Finite(c.j0));
        }
        let eps = c.epsilon;
        let above = |j2: f64| self.violation(j1, j2) > eps;
        let mut lo = c.j0;
        let mut hi = c.j_th.max(2.0 * c.j0).max(f64::MIN_POSITIVE);
        while above(hi) {
            lo = hi;
            if hi >= self.ceiling {
                return Ok(PhiValue::AboveCeiling);
            }
            hi = (2.0 * hi).min(self.ceiling);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi {
                break;
            }
            if above(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(PhiValue::Finite(0.5 * (lo + hi)))
    }
}

/// `Phi(j1)` with the default ceiling.
pub fn phi(j1: f64, constraint: &DelayConstraint) -> Result<PhiValue> {
    ConstraintCurve::new(*constraint).phi(j1)
}
