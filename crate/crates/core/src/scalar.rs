//! Scalar abstraction shared by observables, averages and defect bounds.
//!
//! Odometer certification runs in [`Rational`]; torus experiments run in
//! `f64`. Every binary float is a dyadic rational, so any scalar can be
//! lifted exactly into the rational evaluator.

use std::fmt::{Debug, Display};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, One, Signed, ToPrimitive, Zero};

/// Arbitrary-precision rational used for every exact quantity.
pub type Rational = BigRational;

pub trait Scalar:
    Num + Signed + Clone + PartialOrd + Debug + Display + Send + Sync + 'static
{
    fn from_ratio(num: i64, den: i64) -> Self;

    /// Exact rational value, `None` for non-finite values.
    fn to_rational(&self) -> Option<Rational>;

    fn from_rational(r: &Rational) -> Self;

    fn as_f64(&self) -> f64;

    fn from_u128(v: u128) -> Self;
}

impl Scalar for f64 {
    fn from_ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
    fn to_rational(&self) -> Option<Rational> {
        BigRational::from_float(*self)
    }
    fn from_rational(r: &Rational) -> Self {
        rational_to_f64(r)
    }
    fn as_f64(&self) -> f64 {
        *self
    }
    fn from_u128(v: u128) -> Self {
        v as f64
    }
}

impl Scalar for f32 {
    fn from_ratio(num: i64, den: i64) -> Self {
        (num as f64 / den as f64) as f32
    }
    fn to_rational(&self) -> Option<Rational> {
        BigRational::from_float(*self)
    }
    fn from_rational(r: &Rational) -> Self {
        rational_to_f64(r) as f32
    }
    fn as_f64(&self) -> f64 {
        *self as f64
    }
    fn from_u128(v: u128) -> Self {
        v as f32
    }
}

impl Scalar for Rational {
    fn from_ratio(num: i64, den: i64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
    fn to_rational(&self) -> Option<Rational> {
        Some(self.clone())
    }
    fn from_rational(r: &Rational) -> Self {
        r.clone()
    }
    fn as_f64(&self) -> f64 {
        rational_to_f64(self)
    }
    fn from_u128(v: u128) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }
}

/// Nearest-ish `f64` for display and for float-side comparisons.
pub fn rational_to_f64(r: &Rational) -> f64 {
    match (r.numer().to_f64(), r.denom().to_f64()) {
        (Some(n), Some(d)) if n.is_finite() && d.is_finite() && d != 0.0 => n / d,
        _ => {
            // Huge numerator or denominator: rescale by the bit length gap.
            let nb = r.numer().bits() as i64;
            let db = r.denom().bits() as i64;
            let shift = nb - db;
            let scaled = if shift >= 0 {
                BigRational::new(r.numer().clone(), r.denom().clone() << (shift as usize))
            } else {
                BigRational::new(r.numer().clone() << ((-shift) as usize), r.denom().clone())
            };
            let base = scaled.numer().to_f64().unwrap_or(0.0) / scaled.denom().to_f64().unwrap_or(1.0);
            base * 2f64.powi(shift as i32)
        }
    }
}

pub fn rat(num: i64, den: i64) -> Rational {
    Rational::from_ratio(num, den)
}

pub fn rat_int(v: i128) -> Rational {
    BigRational::from_integer(BigInt::from(v))
}

pub fn pow2(k: u32) -> Rational {
    BigRational::from_integer(BigInt::one() << k as usize)
}

/// Parses `"p/q"`, `"p"` or a decimal literal such as `"0.25"` exactly.
pub fn parse_rational(s: &str) -> Option<Rational> {
    let s = s.trim();
    if let Some((p, q)) = s.split_once('/') {
        let p = BigInt::from_str_radix(p.trim(), 10).ok()?;
        let q = BigInt::from_str_radix(q.trim(), 10).ok()?;
        if q.is_zero() {
            return None;
        }
        return Some(BigRational::new(p, q));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let neg = int.starts_with('-');
        let digits = format!("{}{}", int.trim_start_matches('-'), frac);
        let num = BigInt::from_str_radix(&digits, 10).ok()?;
        let den = num_traits::pow(BigInt::from(10), frac.len());
        let r = BigRational::new(num, den);
        return Some(if neg { -r } else { r });
    }
    BigInt::from_str_radix(s, 10).ok().map(BigRational::from_integer)
}

/// `p/q` rendering used in every report.
pub fn fmt_rational(r: &Rational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

pub fn floor_i128(r: &Rational) -> i128 {
    r.floor().to_integer().to_i128().expect("value exceeds i128")
}

pub fn ceil_i128(r: &Rational) -> i128 {
    r.ceil().to_integer().to_i128().expect("value exceeds i128")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fraction_and_decimal_forms() {
        assert_eq!(parse_rational("1/8"), Some(rat(1, 8)));
        assert_eq!(parse_rational(" 3 "), Some(rat(3, 1)));
        assert_eq!(parse_rational("0.25"), Some(rat(1, 4)));
        assert_eq!(parse_rational("-1.5"), Some(rat(-3, 2)));
        assert_eq!(parse_rational("1/0"), None);
        assert_eq!(parse_rational("x"), None);
    }

    #[test]
    fn floats_lift_exactly() {
        assert_eq!(0.375f64.to_rational(), Some(rat(3, 8)));
        assert_eq!(f64::NAN.to_rational(), None);
        assert_eq!(rational_to_f64(&rat(1, 3)), 1.0 / 3.0);
    }

    #[test]
    fn huge_rationals_still_convert() {
        let r = pow2(2000) / pow2(1999);
        assert_eq!(rational_to_f64(&r), 2.0);
    }
}
