//! Prime tables and the small amount of modular arithmetic the trace
//! computation needs.
//!
//! Everything here works on 64-bit integers. Primes in the experiments stay
//! below 10^5, so products of two residues fit comfortably in `u64`, and we
//! widen to `u128` only inside [`pow_mod`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All primes up to a bound, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimeTable {
    bound: u64,
    primes: Vec<u64>,
}

impl PrimeTable {
    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn primes(&self) -> &[u64] {
        &self.primes
    }

    /// pi(bound).
    pub fn count(&self) -> usize {
        self.primes.len()
    }

    /// Table of the primes up to a smaller bound (a prefix of this one).
    pub fn truncate(&self, bound: u64) -> Result<PrimeTable> {
        if bound > self.bound {
            return Err(Error::Domain(format!(
                "cannot truncate a table with bound {} to the larger bound {bound}",
                self.bound
            )));
        }
        if bound < 2 {
            return Err(Error::EmptyTable(bound));
        }
        let end = self.primes.partition_point(|&p| p <= bound);
        Ok(PrimeTable {
            bound,
            primes: self.primes[..end].to_vec(),
        })
    }

    /// Rebuilds a table from a stored prime list, checking it against a fresh sieve.
    pub fn from_parts(bound: u64, primes: Vec<u64>) -> Result<PrimeTable> {
        let fresh = primes_up_to(bound)?;
        if fresh.primes != primes {
            return Err(Error::Corrupt(format!(
                "stored prime list does not match the primes up to {bound}"
            )));
        }
        Ok(fresh)
    }
}

/// Sieve of Eratosthenes.
pub fn primes_up_to(bound: u64) -> Result<PrimeTable> {
    if bound < 2 {
        return Err(Error::EmptyTable(bound));
    }
    let n = usize::try_from(bound)
        .map_err(|_| Error::Domain(format!("sieve bound {bound} does not fit in memory")))?;
    let mut composite = vec![false; n + 1];
    let mut primes = Vec::new();
    for i in 2..=n {
        if composite[i] {
            continue;
        }
        primes.push(i as u64);
        let mut j = i.saturating_mul(i);
        while j <= n {
            composite[j] = true;
            j += i;
        }
    }
    Ok(PrimeTable { bound, primes })
}

/// Trial-division primality test. Only meant for argument checking.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut d = 3u64;
    while d.saturating_mul(d) <= n {
        if n % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

/// `base^exp mod m`.
pub fn pow_mod(base: u64, mut exp: u64, m: u64) -> u64 {
    if m == 1 {
        return 0;
    }
    let m128 = m as u128;
    let mut acc: u128 = 1;
    let mut b = (base % m) as u128;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m128;
        }
        b = b * b % m128;
        exp >>= 1;
    }
    acc as u64
}

/// Canonical residue of `a` in `[0, p)`.
#[inline]
pub fn reduce(a: i64, p: u64) -> u64 {
    (a as i128).rem_euclid(p as i128) as u64
}

/// Legendre symbol (a/p) via Euler's criterion.
pub fn legendre(a: i64, p: u64) -> Result<i8> {
    if p == 2 || !is_prime(p) {
        return Err(Error::Domain(format!(
            "Legendre symbol needs an odd prime modulus, got {p}"
        )));
    }
    Ok(legendre_unchecked(reduce(a, p), p))
}

/// Euler's criterion without validating `p`; `a` must already be reduced.
pub(crate) fn legendre_unchecked(a: u64, p: u64) -> i8 {
    if a == 0 {
        return 0;
    }
    match pow_mod(a, (p - 1) / 2, p) {
        1 => 1,
        r if r == p - 1 => -1,
        r => unreachable!("Euler's criterion gave {r} mod {p}; modulus is not prime"),
    }
}

/// Reduces the coefficients of a short Weierstrass model `y^2 = x^3 + Ax + B` mod p.
pub fn mod_reduce_polynomial(a: i64, b: i64, p: u64) -> (u64, u64) {
    (reduce(a, p), reduce(b, p))
}

/// Quadratic character of every residue mod an odd prime, indexed by residue.
///
/// Built by squaring, so it is independent of [`legendre`]; the tests check
/// the two against each other.
#[derive(Clone, Debug)]
pub struct QuadraticCharacter {
    p: u64,
    chi: Vec<i8>,
}

impl QuadraticCharacter {
    pub fn new(p: u64) -> QuadraticCharacter {
        assert!(p > 2, "quadratic character table needs an odd prime");
        let n = p as usize;
        let mut chi = vec![-1i8; n];
        chi[0] = 0;
        for x in 1..=(n - 1) / 2 {
            chi[x * x % n] = 1;
        }
        QuadraticCharacter { p, chi }
    }

    pub fn modulus(&self) -> u64 {
        self.p
    }

    #[inline]
    pub fn get(&self, residue: u64) -> i8 {
        self.chi[residue as usize]
    }
}

/// Distinct prime divisors of `n` by trial division.
pub fn prime_divisors(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut d = 2u64;
    while d.saturating_mul(d) <= n {
        if n % d == 0 {
            out.push(d);
            while n % d == 0 {
                n /= d;
            }
        }
        d += if d == 2 { 1 } else { 2 };
    }
    if n > 1 {
        out.push(n);
    }
    out
}
