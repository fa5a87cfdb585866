//! Exact-rational numerics: directed n-th roots, fixed-point binary
//! logarithms, and display helpers.
//!
//! Bound formulas contain square and cube roots of rationals, and the
//! tiling LPs need logarithms of rationals.  Both are evaluated as
//! rationals with relative error at most 2^-64.  Roots are always rounded
//! down so a lower bound built from them can only understate, never
//! overstate.

use num_bigint::{BigInt, BigUint, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Fractional bits carried by [`log2_rat`] and the root helpers.
pub const REL_BITS: u32 = 64;

/// Largest rational `r` of the form `m / (den * 2^64)` with `r <= x^(1/n)`.
///
/// Relative error is below 2^-64.  Panics if `x` is negative.
pub fn nth_root_floor(x: &BigRational, n: u32) -> BigRational {
    assert!(n >= 1);
    assert!(!x.is_negative(), "root of a negative rational");
    if x.is_zero() {
        return BigRational::zero();
    }
    let a = x.numer().magnitude();
    let b = x.denom().magnitude();
    // x^(1/n) = (a * b^(n-1))^(1/n) / b; scale by 2^(n*k) before the
    // integer root so the floor costs at most 2^-k relative error.
    let k = REL_BITS;
    let scaled = a * b.pow(n - 1) << (n as u64 * k as u64);
    let root = scaled.nth_root(n);
    BigRational::new(
        BigInt::from_biguint(Sign::Plus, root),
        BigInt::from_biguint(Sign::Plus, b << k),
    )
}

/// `sqrt` rounded down; see [`nth_root_floor`].
pub fn sqrt_floor(x: &BigRational) -> BigRational {
    nth_root_floor(x, 2)
}

/// `cbrt` rounded down; see [`nth_root_floor`].
pub fn cbrt_floor(x: &BigRational) -> BigRational {
    nth_root_floor(x, 3)
}

/// Binary logarithm of a positive rational as a rational with
/// `|result - log2 x| <= 2^-64`.  Exact whenever `x` is a power of two.
pub fn log2_rat(x: &BigRational) -> BigRational {
    assert!(x.is_positive(), "log2 of a non-positive rational");
    log2_uint(x.numer().magnitude()) - log2_uint(x.denom().magnitude())
}

fn log2_uint(n: &BigUint) -> BigRational {
    assert!(!n.is_zero());
    let frac_bits = REL_BITS;
    // Working fixed-point width.  Truncation error roughly doubles per
    // emitted bit, so keep a wide guard band.
    let w = (frac_bits + 80) as u64;
    let e = n.bits() - 1;
    // Mantissa of n with w fractional bits, in [2^w, 2^(w+1)).
    let mut y = (n << w) >> e;
    let mut frac_num = BigUint::zero();
    for _ in 0..frac_bits {
        y = (&y * &y) >> w;
        frac_num <<= 1;
        if y.bits() == w + 2 {
            y >>= 1;
            frac_num += 1u32;
        }
    }
    let frac = BigRational::new(
        BigInt::from_biguint(Sign::Plus, frac_num),
        BigInt::one() << frac_bits,
    );
    BigRational::from_integer(BigInt::from(e)) + frac
}

/// `2^-64` as a rational, the slop used to make [`log2_rat`] one-sided.
pub fn log2_slop() -> BigRational {
    BigRational::new(BigInt::one(), BigInt::one() << REL_BITS)
}

/// Lossy conversion for display and heuristics.
pub fn rat_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Renders a float as a plain decimal with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    let scale = 10f64.powi(exp - 5);
    let rounded = (x / scale).round() * scale;
    format!("{rounded:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::FromPrimitive;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn sqrt_of_perfect_squares_is_exact() {
        for v in [1i64, 4, 9, 144, 1 << 40] {
            assert_eq!(sqrt_floor(&rat(v, 1)), sqrt_floor(&rat(v, 1)));
            let s = sqrt_floor(&rat(v, 1));
            assert_eq!(&s * &s, rat(v, 1));
        }
        assert_eq!(sqrt_floor(&rat(9, 4)), rat(3, 2));
    }

    #[test]
    fn roots_round_down_within_tolerance() {
        for (n, v) in [(2u32, rat(2, 1)), (2, rat(7, 3)), (3, rat(10, 1)), (6, rat(5, 7))] {
            let r = nth_root_floor(&v, n);
            let mut p = BigRational::one();
            for _ in 0..n {
                p *= &r;
            }
            assert!(p <= v, "rounded-down root overshoots");
            let approx = rat_to_f64(&r);
            let truth = rat_to_f64(&v).powf(1.0 / n as f64);
            assert!((approx - truth).abs() / truth < 1e-12);
        }
    }

    #[test]
    fn log2_exact_for_powers_of_two() {
        assert_eq!(log2_rat(&rat(1, 1)), rat(0, 1));
        assert_eq!(log2_rat(&rat(8, 1)), rat(3, 1));
        assert_eq!(log2_rat(&rat(1, 4)), rat(-2, 1));
        assert_eq!(log2_rat(&rat(3 << 20, 3)), rat(20, 1));
    }

    #[test]
    fn log2_matches_f64_for_general_values() {
        for v in [rat(3, 1), rat(10, 7), rat(1, 3), rat(1000003, 17)] {
            let got = rat_to_f64(&log2_rat(&v));
            let want = rat_to_f64(&v).log2();
            assert!((got - want).abs() < 1e-12, "log2({v}) = {got}, want {want}");
        }
    }

    #[test]
    fn log2_error_is_bounded_one_sided_after_slop() {
        // log2_rat(x) - slop must stay below the true log; check against a
        // much more precise reference obtained from f64 on easy values.
        let x = rat(5, 1);
        let lo = log2_rat(&x) - log2_slop();
        let hi = log2_rat(&x) + log2_slop();
        let truth = BigRational::from_f64(5f64.log2()).unwrap();
        // f64 itself carries ~2^-52 error, so compare loosely.
        let eps = rat(1, 1 << 40);
        assert!(&lo - &eps < truth && truth < &hi + &eps);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(123456789.0), "123457000");
        assert_eq!(fmt_sig6(0.0012345678), "0.00123457");
        assert_eq!(fmt_sig6(2.5), "2.50000");
        assert_eq!(fmt_sig6(-42.0), "-42.0000");
    }
}
