//! Frobenius traces a_p of elliptic curves over Q and the normalized feature
//! vectors built from them.
//!
//! Curves are given by the five a-invariants of a globally minimal long
//! Weierstrass model
//!
//! ```text
//! y^2 + a1 xy + a3 y = x^3 + a2 x^2 + a4 x + a6
//! ```
//!
//! At a good prime p >= 5 we pass to the short model
//! `y^2 = x^3 - 27 c4 x - 54 c6` and evaluate the quadratic character sum; at
//! p = 2, 3 the transform is not available, so points are counted directly.
//! At a bad prime the trace is `p - #E_ns(F_p)`, which is 1, -1 or 0 for split
//! multiplicative, non-split multiplicative and additive reduction.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numtheory::{self, legendre_unchecked, prime_divisors, PrimeTable, QuadraticCharacter};

/// Largest prime whose quadratic-character table is kept by a [`TraceEngine`].
/// Above this the table is rebuilt per curve to bound memory.
const CACHED_CHARACTER_LIMIT: u64 = 20_000;

/// Highest analytic rank carried by the data sets.
pub const MAX_RANK: u8 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub label: String,
    /// `[a1, a2, a3, a4, a6]` of a globally minimal model.
    pub ainvs: [i64; 5],
    pub conductor: u64,
    pub rank: u8,
}

/// Standard b- and c-invariants and the discriminant of a long Weierstrass model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Invariants {
    pub b2: i128,
    pub b4: i128,
    pub b6: i128,
    pub b8: i128,
    pub c4: i128,
    pub c6: i128,
    pub discriminant: i128,
}

impl Invariants {
    /// Exact invariants, or `None` if an intermediate overflows `i128`.
    pub fn checked(ainvs: [i64; 5]) -> Option<Invariants> {
        let [a1, a2, a3, a4, a6] = ainvs.map(i128::from);
        let mul = |x: i128, y: i128| x.checked_mul(y);
        let b2 = mul(a1, a1)?.checked_add(mul(4, a2)?)?;
        let b4 = mul(2, a4)?.checked_add(mul(a1, a3)?)?;
        let b6 = mul(a3, a3)?.checked_add(mul(4, a6)?)?;
        let b8 = mul(mul(a1, a1)?, a6)?
            .checked_add(mul(mul(4, a2)?, a6)?)?
            .checked_sub(mul(mul(a1, a3)?, a4)?)?
            .checked_add(mul(a2, mul(a3, a3)?)?)?
            .checked_sub(mul(a4, a4)?)?;
        let c4 = mul(b2, b2)?.checked_sub(mul(24, b4)?)?;
        let c6 = mul(-b2, mul(b2, b2)?)?
            .checked_add(mul(36, mul(b2, b4)?)?)?
            .checked_sub(mul(216, b6)?)?;
        let discriminant = mul(-mul(b2, b2)?, b8)?
            .checked_sub(mul(8, mul(b4, mul(b4, b4)?)?)?)?
            .checked_sub(mul(27, mul(b6, b6)?)?)?
            .checked_add(mul(9, mul(b2, mul(b4, b6)?)?)?)?;
        Some(Invariants {
            b2,
            b4,
            b6,
            b8,
            c4,
            c6,
            discriminant,
        })
    }

    /// Invariants of the model reduced mod p, as residues in `[0, p)`.
    ///
    /// The a-invariants are reduced first, so nothing can overflow for
    /// p < 2^20.
    pub fn mod_p(ainvs: [i64; 5], p: u64) -> Invariants {
        let reduced = ainvs.map(|a| numtheory::reduce(a, p) as i64);
        let inv = Invariants::checked(reduced).expect("residues below 2^20 cannot overflow i128");
        let r = |x: i128| x.rem_euclid(p as i128);
        Invariants {
            b2: r(inv.b2),
            b4: r(inv.b4),
            b6: r(inv.b6),
            b8: r(inv.b8),
            c4: r(inv.c4),
            c6: r(inv.c6),
            discriminant: r(inv.discriminant),
        }
    }
}

impl CurveRecord {
    /// Builds a record and checks it: rank in range, nonzero discriminant, and
    /// (when the discriminant fits in `i128`) that its prime divisors are
    /// exactly those of the conductor.
    pub fn new(label: impl Into<String>, ainvs: [i64; 5], conductor: u64, rank: u8) -> Result<CurveRecord> {
        let record = CurveRecord {
            label: label.into(),
            ainvs,
            conductor,
            rank,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidRecord(format!("{}: {msg}", self.label)));
        if self.rank > MAX_RANK {
            return fail(format!("rank {} outside [0, {MAX_RANK}]", self.rank));
        }
        if self.conductor == 0 {
            return fail("conductor must be positive".into());
        }
        let Some(inv) = Invariants::checked(self.ainvs) else {
            // Too large to check exactly; fall back to the per-prime checks in
            // ap_good / ap_bad.
            return Ok(());
        };
        if inv.discriminant == 0 {
            return fail("singular model (discriminant 0)".into());
        }
        let mut rest = inv.discriminant.unsigned_abs();
        for q in prime_divisors(self.conductor) {
            let q = q as u128;
            if rest % q != 0 {
                return fail(format!("conductor prime {q} does not divide the discriminant"));
            }
            while rest % q == 0 {
                rest /= q;
            }
        }
        if rest != 1 {
            return fail(format!(
                "discriminant {} has prime factors not dividing the conductor {}",
                inv.discriminant, self.conductor
            ));
        }
        Ok(())
    }

    pub fn is_bad_prime(&self, p: u64) -> bool {
        self.conductor % p == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReductionType {
    Good,
    SplitMultiplicative,
    NonSplitMultiplicative,
    Additive,
}

impl ReductionType {
    /// a_p at a bad prime; `None` for good reduction.
    pub fn bad_trace(self) -> Option<i64> {
        match self {
            ReductionType::Good => None,
            ReductionType::SplitMultiplicative => Some(1),
            ReductionType::NonSplitMultiplicative => Some(-1),
            ReductionType::Additive => Some(0),
        }
    }

    pub fn from_bad_trace(a: i64) -> Option<ReductionType> {
        match a {
            1 => Some(ReductionType::SplitMultiplicative),
            -1 => Some(ReductionType::NonSplitMultiplicative),
            0 => Some(ReductionType::Additive),
            _ => None,
        }
    }
}

/// Checks |a| <= 2 sqrt(p) exactly, as a^2 <= 4p.
pub fn within_hasse_bound(a: i64, p: u64) -> bool {
    (a as i128) * (a as i128) <= 4 * p as i128
}

/// Value of `y^2 + a1 xy + a3 y - (x^3 + a2 x^2 + a4 x + a6)` and its two
/// partial derivatives at (x, y), all mod p.
fn weierstrass_residues(r: &[u64; 5], p: u64, x: u64, y: u64) -> (u64, u64, u64) {
    let [a1, a2, a3, a4, a6] = *r;
    let m = |u: u64, v: u64| u * v % p;
    let x2 = m(x, x);
    let lhs = (m(y, y) + m(m(a1, x), y) + m(a3, y)) % p;
    let rhs = (m(x2, x) + m(a2, x2) + m(a4, x) + a6) % p;
    let f = (lhs + p - rhs) % p;
    // dF/dx = a1 y - 3x^2 - 2 a2 x - a4
    let fx = (m(a1, y) + 3 * p * p - 3 * x2 % p - m(2 * a2 % p, x) - a4) % p;
    // dF/dy = 2y + a1 x + a3
    let fy = (2 * y + m(a1, x) + a3) % p;
    (f, fx, fy)
}

/// Counts the points of the reduced model over F_p, including the point at
/// infinity. With `nonsingular_only`, singular affine points are skipped.
fn count_points(ainvs: [i64; 5], p: u64, nonsingular_only: bool) -> u64 {
    let r = ainvs.map(|a| numtheory::reduce(a, p));
    let mut count = 1; // point at infinity, always nonsingular
    for x in 0..p {
        for y in 0..p {
            let (f, fx, fy) = weierstrass_residues(&r, p, x, y);
            if f == 0 && !(nonsingular_only && fx == 0 && fy == 0) {
                count += 1;
            }
        }
    }
    count
}

/// `p + 1 - #E(F_p)` by enumerating every projective point. O(p^2).
pub fn ap_by_enumeration(ainvs: [i64; 5], p: u64) -> i64 {
    p as i64 + 1 - count_points(ainvs, p, false) as i64
}

/// `p - #E_ns(F_p)` by enumerating the nonsingular points. O(p^2).
pub fn ap_bad_by_enumeration(ainvs: [i64; 5], p: u64) -> i64 {
    p as i64 - count_points(ainvs, p, true) as i64
}

/// `-sum_x (x^3 + Ax + B / p)` for the short model of the curve mod p >= 5.
pub fn ap_by_character_sum(ainvs: [i64; 5], p: u64, chi: &QuadraticCharacter) -> i64 {
    debug_assert_eq!(chi.modulus(), p);
    debug_assert!(p >= 5);
    let inv = Invariants::mod_p(ainvs, p);
    let pi = p as i128;
    let a = (-27 * inv.c4).rem_euclid(pi) as i64;
    let b = (-54 * inv.c6).rem_euclid(pi) as i64;
    let (a, b) = numtheory::mod_reduce_polynomial(a, b, p);
    // Walk f(x) = x^3 + a x + b by finite differences:
    // f(0) = b, delta f(0) = 1 + a, delta^2 f(x) = 6x + 6, delta^3 f = 6.
    let six = 6 % p;
    let add = |u: u64, v: u64| {
        let s = u + v;
        if s >= p {
            s - p
        } else {
            s
        }
    };
    let mut value = b;
    let mut d1 = add(1, a);
    let mut d2 = six;
    let mut sum: i64 = 0;
    for _ in 0..p {
        sum += chi.get(value) as i64;
        value = add(value, d1);
        d1 = add(d1, d2);
        d2 = add(d2, six);
    }
    -sum
}

fn check_hasse(a: i64, p: u64) -> Result<i64> {
    if within_hasse_bound(a, p) {
        Ok(a)
    } else {
        Err(Error::Arithmetic(format!(
            "a_{p} = {a} violates the Hasse bound |a_p| <= 2 sqrt(p)"
        )))
    }
}

fn ap_good_with(record: &CurveRecord, p: u64, chi: Option<&QuadraticCharacter>) -> Result<i64> {
    if record.is_bad_prime(p) {
        return Err(Error::WrongDispatch {
            p,
            conductor: record.conductor,
            divides: true,
        });
    }
    if Invariants::mod_p(record.ainvs, p).discriminant == 0 {
        return Err(Error::Arithmetic(format!(
            "model is singular mod {p}, but {p} does not divide the conductor {}",
            record.conductor
        )));
    }
    let a = if p <= 3 {
        ap_by_enumeration(record.ainvs, p)
    } else {
        match chi {
            Some(chi) => ap_by_character_sum(record.ainvs, p, chi),
            None => ap_by_character_sum(record.ainvs, p, &QuadraticCharacter::new(p)),
        }
    };
    check_hasse(a, p)
}

/// a_p at a prime of good reduction.
pub fn ap_good(record: &CurveRecord, p: u64) -> Result<i64> {
    ap_good_with(record, p, None)
}

/// Reduction type at a bad prime p (p must divide the conductor).
pub fn reduction_type(record: &CurveRecord, p: u64) -> Result<ReductionType> {
    if !record.is_bad_prime(p) {
        return Ok(ReductionType::Good);
    }
    let inv = Invariants::mod_p(record.ainvs, p);
    if inv.discriminant != 0 {
        return Err(Error::Arithmetic(format!(
            "{p} divides the conductor {} but the model is nonsingular mod {p}",
            record.conductor
        )));
    }
    if p <= 3 {
        let a = ap_bad_by_enumeration(record.ainvs, p);
        return ReductionType::from_bad_trace(a).ok_or_else(|| {
            Error::Arithmetic(format!("nonsingular point count at {p} gives a_p = {a}"))
        });
    }
    if inv.c4 == 0 {
        return Ok(ReductionType::Additive);
    }
    let minus_c6 = (-inv.c6).rem_euclid(p as i128) as u64;
    Ok(match legendre_unchecked(minus_c6, p) {
        1 => ReductionType::SplitMultiplicative,
        -1 => ReductionType::NonSplitMultiplicative,
        _ => unreachable!("c6 vanishes mod {p} while c4 does not, impossible for a nodal cubic"),
    })
}

/// a_p in {-1, 0, 1} at a prime of bad reduction.
pub fn ap_bad(record: &CurveRecord, p: u64) -> Result<i64> {
    if !record.is_bad_prime(p) {
        return Err(Error::WrongDispatch {
            p,
            conductor: record.conductor,
            divides: false,
        });
    }
    Ok(reduction_type(record, p)?.bad_trace().expect("bad prime"))
}

/// a_p at any prime, dispatching on whether p divides the conductor.
pub fn ap(record: &CurveRecord, p: u64) -> Result<i64> {
    if record.is_bad_prime(p) {
        ap_bad(record, p)
    } else {
        ap_good(record, p)
    }
}

/// `a / (2 sqrt p)`.
#[inline]
pub fn normalize_trace(a: f64, p: u64) -> f64 {
    a / (2.0 * (p as f64).sqrt())
}

/// Integer traces at every prime up to a bound, with normalized values on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceVector {
    pub curve_label: String,
    table: Arc<PrimeTable>,
    ap_values: Vec<i64>,
}

impl TraceVector {
    pub fn from_values(curve_label: impl Into<String>, table: Arc<PrimeTable>, ap_values: Vec<i64>) -> Result<TraceVector> {
        if ap_values.len() != table.count() {
            return Err(Error::Dimension(format!(
                "{} trace values for {} primes",
                ap_values.len(),
                table.count()
            )));
        }
        Ok(TraceVector {
            curve_label: curve_label.into(),
            table,
            ap_values,
        })
    }

    pub fn bound(&self) -> u64 {
        self.table.bound()
    }

    pub fn primes(&self) -> &[u64] {
        self.table.primes()
    }

    pub fn table(&self) -> &Arc<PrimeTable> {
        &self.table
    }

    pub fn ap_values(&self) -> &[i64] {
        &self.ap_values
    }

    pub fn len(&self) -> usize {
        self.ap_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ap_values.is_empty()
    }

    /// ã_p = a_p / (2 sqrt p), applied uniformly at good and bad primes.
    pub fn normalized(&self) -> Vec<f64> {
        self.normalized_prefix(self.len())
    }

    /// Normalized values at the first `len` primes.
    pub fn normalized_prefix(&self, len: usize) -> Vec<f64> {
        self.ap_values
            .iter()
            .zip(self.table.primes())
            .take(len)
            .map(|(&a, &p)| normalize_trace(a as f64, p))
            .collect()
    }
}

/// Computes trace vectors against one prime table, reusing character tables
/// across curves.
pub struct TraceEngine {
    table: Arc<PrimeTable>,
    characters: Vec<Option<QuadraticCharacter>>,
}

impl TraceEngine {
    pub fn new(table: Arc<PrimeTable>) -> TraceEngine {
        let characters = table
            .primes()
            .iter()
            .map(|&p| (p >= 5 && p <= CACHED_CHARACTER_LIMIT).then(|| QuadraticCharacter::new(p)))
            .collect();
        TraceEngine { table, characters }
    }

    pub fn table(&self) -> &Arc<PrimeTable> {
        &self.table
    }

    pub fn trace_vector(&self, record: &CurveRecord) -> Result<TraceVector> {
        let values = self
            .table
            .primes()
            .iter()
            .zip(&self.characters)
            .map(|(&p, chi)| {
                if record.is_bad_prime(p) {
                    ap_bad(record, p)
                } else {
                    ap_good_with(record, p, chi.as_ref())
                }
            })
            .collect::<Result<Vec<i64>>>()
            .map_err(|e| e.with_label(&record.label))?;
        TraceVector::from_values(record.label.clone(), self.table.clone(), values)
    }

    /// Trace vectors for many curves in parallel; output order follows input order.
    pub fn trace_vectors(&self, records: &[CurveRecord]) -> Result<Vec<TraceVector>> {
        records.par_iter().map(|r| self.trace_vector(r)).collect()
    }
}

/// One-off trace vector; prefer [`TraceEngine`] for many curves.
pub fn trace_vector(record: &CurveRecord, table: &Arc<PrimeTable>) -> Result<TraceVector> {
    TraceEngine::new(table.clone()).trace_vector(record)
}
