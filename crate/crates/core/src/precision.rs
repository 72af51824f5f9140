//! Configurable-precision binary floating point.
//!
//! Just enough arithmetic to evaluate Boltzmann sums and their differences far
//! beyond double precision: add, subtract, multiply, divide and `exp`. A value
//! is `mantissa * 2^exponent`, rounded to nearest after every operation.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::{BigInt, Sign};
use num_traits::{Float, One, Signed, ToPrimitive, Zero};

/// Default retained decimal digits.
pub const DEFAULT_DIGITS: u32 = 60;

const LOG2_10: f64 = std::f64::consts::LOG2_10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BigReal {
    mantissa: BigInt,
    exponent: i64,
}

impl BigReal {
    pub fn zero() -> Self {
        Self {
            mantissa: BigInt::zero(),
            exponent: 0,
        }
    }

    /// Exact conversion.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite(), "cannot represent {x} as BigReal");
        let (m, e, s) = x.integer_decode();
        let mantissa = BigInt::from(m) * s as i64;
        Self {
            mantissa,
            exponent: e as i64,
        }
        .trimmed()
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa.is_zero()
    }

    pub fn signum(&self) -> i32 {
        match self.mantissa.sign() {
            Sign::Minus => -1,
            Sign::NoSign => 0,
            Sign::Plus => 1,
        }
    }

    pub fn neg(&self) -> Self {
        Self {
            mantissa: -&self.mantissa,
            exponent: self.exponent,
        }
    }

    pub fn abs(&self) -> Self {
        Self {
            mantissa: self.mantissa.abs(),
            exponent: self.exponent,
        }
    }

    // Strip trailing zero bits so equal values compare equal.
    fn trimmed(mut self) -> Self {
        if self.mantissa.is_zero() {
            self.exponent = 0;
            return self;
        }
        let tz = self.mantissa.trailing_zeros().unwrap_or(0);
        if tz > 0 {
            self.mantissa >>= tz;
            self.exponent += tz as i64;
        }
        self
    }

    fn rounded(self, bits: u64) -> Self {
        let len = self.mantissa.bits();
        if len <= bits {
            return self.trimmed();
        }
        let shift = len - bits;
        let negative = self.mantissa.is_negative();
        let mut mag = self.mantissa.abs();
        let half = BigInt::one() << (shift - 1);
        mag += half;
        mag >>= shift;
        let mantissa = if negative { -mag } else { mag };
        Self {
            mantissa,
            exponent: self.exponent + shift as i64,
        }
        .trimmed()
    }

    /// `log2 |x|`, approximately.
    pub fn log2_abs(&self) -> f64 {
        if self.is_zero() {
            return f64::NEG_INFINITY;
        }
        let len = self.mantissa.bits();
        let top = if len > 60 {
            (self.mantissa.abs() >> (len - 60)).to_f64().unwrap()
        } else {
            self.mantissa.abs().to_f64().unwrap()
        };
        let shift = len.saturating_sub(60) as f64;
        top.log2() + shift + self.exponent as f64
    }

    pub fn log10_abs(&self) -> f64 {
        self.log2_abs() / LOG2_10
    }

    /// Nearest double; saturates to 0 or infinity outside the f64 range.
    pub fn to_f64(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let len = self.mantissa.bits();
        let (top, shift) = if len > 62 {
            let shift = len - 62;
            ((&self.mantissa >> shift).to_f64().unwrap(), shift as i64)
        } else {
            (self.mantissa.to_f64().unwrap(), 0)
        };
        ldexp(top, self.exponent + shift)
    }

    pub fn cmp_value(&self, other: &Self) -> Ordering {
        let d = self.sub(other, u64::MAX);
        d.mantissa.sign().cmp(&Sign::NoSign)
    }

    fn add_exact(&self, other: &Self) -> Self {
        if self.is_zero() {
            return other.clone();
        }
        if other.is_zero() {
            return self.clone();
        }
        let e = self.exponent.min(other.exponent);
        let a = &self.mantissa << (self.exponent - e) as u64;
        let b = &other.mantissa << (other.exponent - e) as u64;
        Self {
            mantissa: a + b,
            exponent: e,
        }
    }

    pub fn add(&self, other: &Self, bits: u64) -> Self {
        // Operands far below the rounding unit of the other only affect the
        // sticky bit; clip them to avoid giant shifts.
        if !self.is_zero() && !other.is_zero() {
            let (hi, lo) = if self.log2_abs() >= other.log2_abs() { (self, other) } else { (other, self) };
            if hi.log2_abs() - lo.log2_abs() > bits as f64 + 8.0 && bits != u64::MAX {
                return hi.clone().rounded(bits);
            }
        }
        self.add_exact(other).rounded(bits)
    }

    pub fn sub(&self, other: &Self, bits: u64) -> Self {
        self.add(&other.neg(), bits)
    }

    pub fn mul(&self, other: &Self, bits: u64) -> Self {
        Self {
            mantissa: &self.mantissa * &other.mantissa,
            exponent: self.exponent + other.exponent,
        }
        .rounded(bits)
    }

    pub fn div(&self, other: &Self, bits: u64) -> Self {
        assert!(!other.is_zero(), "BigReal division by zero");
        let shift = bits + other.mantissa.bits() + 2;
        let num = &self.mantissa << shift;
        Self {
            mantissa: num / &other.mantissa,
            exponent: self.exponent - other.exponent - shift as i64,
        }
        .rounded(bits)
    }

    /// Scientific notation with `digits` significant decimal digits
    /// (truncated, not rounded).
    pub fn to_scientific(&self, digits: usize) -> String {
        if self.is_zero() {
            return "0".to_string();
        }
        let dec_exp = self.log10_abs().floor() as i64;
        // |x| * 10^(digits - 1 - dec_exp), as an integer
        let scale_pow = digits as i64 - 1 - dec_exp;
        let mut m = self.mantissa.abs();
        let mut e2 = self.exponent;
        if scale_pow >= 0 {
            m *= BigInt::from(10u32).pow(scale_pow as u32);
        } else {
            let p = BigInt::from(10u32).pow((-scale_pow) as u32);
            m <<= 64u64 + p.bits();
            e2 -= 64 + p.bits() as i64;
            m /= p;
        }
        let int = if e2 >= 0 { m << e2 as u64 } else { m >> (-e2) as u64 };
        let mut s = int.to_string();
        let mut exp10 = dec_exp;
        if s.len() > digits {
            s.truncate(digits);
            exp10 += 1;
        }
        let sign = if self.mantissa.is_negative() { "-" } else { "" };
        format!("{sign}{}.{}e{exp10}", &s[..1], &s[1..])
    }
}

impl fmt::Display for BigReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_scientific(f.precision().unwrap_or(30)))
    }
}

fn ldexp(mut x: f64, mut e: i64) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
        if x.is_infinite() {
            return x;
        }
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
        if x == 0.0 {
            return x;
        }
    }
    x * 2f64.powi(e as i32)
}

/// Working precision plus cached constants for `exp`.
#[derive(Clone, Debug)]
pub struct ExtContext {
    bits: u64,
    fixed_width: u64,
    ln2: BigInt,
}

impl ExtContext {
    /// Context holding `digits` significant decimal digits.
    pub fn with_digits(digits: u32) -> Self {
        Self::with_bits((digits as f64 * LOG2_10).ceil() as u64 + 8)
    }

    pub fn with_bits(bits: u64) -> Self {
        let bits = bits.max(64);
        // Guard bits cover argument reduction by up to 2^40 * ln 2 plus the
        // repeated squaring in `exp`.
        let fixed_width = bits + 96;
        Self {
            bits,
            fixed_width,
            ln2: ln2_fixed(fixed_width),
        }
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn digits(&self) -> f64 {
        self.bits as f64 / LOG2_10
    }

    pub fn from_f64(&self, x: f64) -> BigReal {
        BigReal::from_f64(x)
    }

    pub fn add(&self, a: &BigReal, b: &BigReal) -> BigReal {
        a.add(b, self.bits)
    }

    pub fn sub(&self, a: &BigReal, b: &BigReal) -> BigReal {
        a.sub(b, self.bits)
    }

    pub fn mul(&self, a: &BigReal, b: &BigReal) -> BigReal {
        a.mul(b, self.bits)
    }

    pub fn div(&self, a: &BigReal, b: &BigReal) -> BigReal {
        a.div(b, self.bits)
    }

    pub fn sum<'a>(&self, terms: impl IntoIterator<Item = &'a BigReal>) -> BigReal {
        terms.into_iter().fold(BigReal::zero(), |acc, t| acc.add(t, self.bits))
    }

    /// `exp(x)` to the working precision.
    pub fn exp(&self, x: &BigReal) -> BigReal {
        if x.is_zero() {
            return BigReal::from_f64(1.0);
        }
        let w = self.fixed_width;
        // x in fixed point
        let xf = if x.exponent + w as i64 >= 0 {
            &x.mantissa << (x.exponent + w as i64) as u64
        } else {
            &x.mantissa >> (-(x.exponent + w as i64)) as u64
        };
        let approx = x.to_f64();
        let k = (approx / std::f64::consts::LN_2).round() as i64;
        let r = xf - &self.ln2 * k;
        // halve the reduced argument `m` times, Taylor, square back
        let m: u32 = 12;
        let rr = r >> m;
        let one = BigInt::one() << w;
        let mut sum = one.clone();
        let mut term = one;
        let mut n: u64 = 1;
        loop {
            term = (&term * &rr >> w) / n;
            if term.is_zero() {
                break;
            }
            sum += &term;
            n += 1;
        }
        for _ in 0..m {
            sum = &sum * &sum >> w;
        }
        BigReal {
            mantissa: sum,
            exponent: k - w as i64,
        }
        .rounded(self.bits)
    }
}

/// `ln 2 * 2^width` via `sum_k 1 / (k 2^k)`.
fn ln2_fixed(width: u64) -> BigInt {
    let extra = 16;
    let one = BigInt::one() << (width + extra);
    let mut acc = BigInt::zero();
    let mut k: u64 = 1;
    loop {
        let term = (&one >> k) / k;
        if term.is_zero() {
            break;
        }
        acc += term;
        k += 1;
    }
    acc >> extra
}

/// Double-double number `hi + lo`, about 32 significant digits. Used where
/// plain doubles lose too much to conditioning but a full `BigReal` is
/// needlessly slow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, other: Self) -> Self {
        let (s, e) = two_sum(self.hi, other.hi);
        let (t, f) = two_sum(self.lo, other.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Self { hi, lo }
    }

    pub fn sub(self, other: Self) -> Self {
        self.add(Self {
            hi: -other.hi,
            lo: -other.lo,
        })
    }

    pub fn mul(self, other: Self) -> Self {
        let p = self.hi * other.hi;
        let e = self.hi.mul_add(other.hi, -p);
        let e = e + (self.hi * other.lo + self.lo * other.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Self { hi, lo }
    }

    pub fn div(self, other: Self) -> Self {
        let q1 = self.hi / other.hi;
        let r = self.sub(other.mul(Self::from_f64(q1)));
        let q2 = r.hi / other.hi;
        let r = r.sub(other.mul(Self::from_f64(q2)));
        let q3 = r.hi / other.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self { hi, lo }.add(Self::from_f64(q3))
    }

    /// One Newton step from the double square root.
    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::from_f64(self.hi.sqrt());
        }
        let x = Self::from_f64(self.hi.sqrt());
        let corr = self.sub(x.mul(x)).hi / (2.0 * x.hi);
        x.add(Self::from_f64(corr))
    }

    pub fn powi(self, k: u32) -> Self {
        (0..k).fold(Self::from_f64(1.0), |acc, _| acc.mul(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E_DIGITS: &str = "2.71828182845904523536028747135266249775724709369995957496696762772407663035354759457138";
    const LN2_DIGITS: &str = "6.93147180559945309417232121458176568075500134360255254120680009493393621969694715605863";

    fn mantissa_digits(s: &str) -> String {
        s.split('e').next().unwrap().replace(['.', '-'], "")
    }

    #[test]
    fn double_double_recovers_digits_lost_in_doubles() {
        let third = DoubleDouble::from_f64(1.0).div(DoubleDouble::from_f64(3.0));
        let back = third.mul(DoubleDouble::from_f64(3.0)).sub(DoubleDouble::from_f64(1.0));
        assert!(back.to_f64().abs() < 1e-31);
        let two = DoubleDouble::from_f64(2.0).sqrt();
        let err = two.mul(two).sub(DoubleDouble::from_f64(2.0)).to_f64();
        assert!(err.abs() < 1e-31, "{err:e}");
        // (1 + 2^-60)^2 - 1 keeps the 2^-59 term
        let x = DoubleDouble::from_f64(1.0).add(DoubleDouble::from_f64(2f64.powi(-60)));
        let d = x.powi(2).sub(DoubleDouble::from_f64(1.0)).to_f64();
        assert!((d / 2f64.powi(-59) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exp_of_one_matches_reference_digits() {
        let ctx = ExtContext::with_digits(80);
        let e = ctx.exp(&BigReal::from_f64(1.0));
        let got = mantissa_digits(&e.to_scientific(75));
        let want = mantissa_digits(E_DIGITS);
        assert_eq!(&got[..74], &want[..74]);
    }

    #[test]
    fn ln2_reference_digits() {
        let ctx = ExtContext::with_digits(80);
        let ln2 = BigReal {
            mantissa: ctx.ln2.clone(),
            exponent: -(ctx.fixed_width as i64),
        };
        let got = mantissa_digits(&ln2.to_scientific(80));
        assert_eq!(&got[..78], &mantissa_digits(LN2_DIGITS)[..78]);
    }

    #[test]
    fn exp_far_outside_double_range() {
        let ctx = ExtContext::with_digits(40);
        let big = ctx.exp(&BigReal::from_f64(-4.0e6));
        assert!((big.log10_abs() - (-4.0e6 / std::f64::consts::LN_10)).abs() < 1e-6);
        assert_eq!(big.to_f64(), 0.0);
    }

    #[test]
    fn cancellation_recovered_at_high_precision() {
        // (1 + 1e-40)^2 - 1 = 2e-40 + 1e-80
        let ctx = ExtContext::with_digits(100);
        let tiny = ctx.exp(&BigReal::from_f64(-40.0 * std::f64::consts::LN_10));
        let one = BigReal::from_f64(1.0);
        let a = ctx.add(&one, &tiny);
        let d = ctx.sub(&ctx.mul(&a, &a), &one);
        let rel = ctx.div(&d, &tiny).to_f64() - 2.0;
        assert!(rel.abs() < 1e-30, "rel {rel:e}");
    }

    #[test]
    fn division_and_conversion() {
        let ctx = ExtContext::with_digits(30);
        let q = ctx.div(&BigReal::from_f64(1.0), &BigReal::from_f64(3.0));
        assert!((q.to_f64() - 1.0 / 3.0).abs() < 1e-17);
        assert_eq!(BigReal::from_f64(-2.5).to_f64(), -2.5);
        assert_eq!(BigReal::from_f64(0.0).to_f64(), 0.0);
        assert_eq!(format!("{:.5}", BigReal::from_f64(-1234.5)), "-1.2345e3");
    }

    proptest! {
        #[test]
        fn exp_agrees_with_double(x in -700.0f64..700.0) {
            let ctx = ExtContext::with_digits(30);
            let got = ctx.exp(&BigReal::from_f64(x)).to_f64();
            let want = x.exp();
            prop_assert!(((got - want) / want).abs() < 4e-15);
        }

        #[test]
        fn exp_is_additive(a in -300.0f64..300.0, b in -300.0f64..300.0) {
            let ctx = ExtContext::with_digits(60);
            let lhs = ctx.mul(&ctx.exp(&BigReal::from_f64(a)), &ctx.exp(&BigReal::from_f64(b)));
            let rhs = ctx.exp(&ctx.add(&BigReal::from_f64(a), &BigReal::from_f64(b)));
            let rel = ctx.div(&ctx.sub(&lhs, &rhs), &rhs).to_f64().abs();
            prop_assert!(rel < 1e-55, "rel {:e}", rel);
        }

        #[test]
        fn add_is_exact_when_wide(a in -1e10f64..1e10, b in -1e10f64..1e10) {
            let s = BigReal::from_f64(a).add(&BigReal::from_f64(b), 4096);
            let back = s.sub(&BigReal::from_f64(b), 4096);
            prop_assert_eq!(back, BigReal::from_f64(a));
        }
    }
}
