//! Exact rational scalar with a machine-word fast path.
//!
//! Values whose numerator and denominator both fit in an `i64` are kept
//! inline and combined through `i128` intermediates; anything larger falls
//! back to `BigRational`. The representation is canonical (lowest terms,
//! positive denominator, inline whenever it fits), so structural equality
//! and hashing are value equality.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

const SMALL_MAX: i128 = i64::MAX as i128;

#[derive(Clone)]
enum Repr {
    Small(i64, i64),
    Big(Box<BigRational>),
}

#[derive(Clone)]
pub struct Rational(Repr);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseRationalError {
    #[error("empty rational literal")]
    Empty,
    #[error("invalid rational literal `{0}`")]
    Invalid(String),
    #[error("zero denominator in `{0}`")]
    ZeroDenominator(String),
}

#[inline]
fn gcd_u64(mut a: u64, mut b: u64) -> u64 {
    if a == 0 {
        return b;
    }
    if b == 0 {
        return a;
    }
    let shift = (a | b).trailing_zeros();
    a >>= a.trailing_zeros();
    loop {
        b >>= b.trailing_zeros();
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        b -= a;
        if b == 0 {
            return a << shift;
        }
    }
}

#[inline]
fn gcd_u128(mut a: u128, mut b: u128) -> u128 {
    if a <= u64::MAX as u128 && b <= u64::MAX as u128 {
        return gcd_u64(a as u64, b as u64) as u128;
    }
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Rational {
    pub fn zero() -> Self {
        Rational(Repr::Small(0, 1))
    }

    pub fn one() -> Self {
        Rational(Repr::Small(1, 1))
    }

    pub fn from_integer(n: i64) -> Self {
        if n == i64::MIN {
            return Self::from_big(BigRational::from_integer(BigInt::from(n)));
        }
        Rational(Repr::Small(n, 1))
    }

    /// `num / den`; panics on a zero denominator.
    pub fn new(num: i64, den: i64) -> Self {
        assert!(den != 0, "zero denominator");
        Self::from_i128(num as i128, den as i128)
    }

    fn from_i128(num: i128, den: i128) -> Self {
        debug_assert!(den != 0);
        let (mut n, mut d) = if den < 0 { (-num, -den) } else { (num, den) };
        if n.abs() <= SMALL_MAX && d <= SMALL_MAX {
            let (n, d) = (n as i64, d as i64);
            let g = gcd_u64(n.unsigned_abs(), d as u64) as i64;
            return Rational(Repr::Small(n / g, d / g));
        }
        let g = gcd_u128(n.unsigned_abs(), d as u128);
        if g > 1 {
            n /= g as i128;
            d /= g as i128;
        }
        if n.abs() <= SMALL_MAX && d <= SMALL_MAX {
            Rational(Repr::Small(n as i64, d as i64))
        } else {
            Rational(Repr::Big(Box::new(BigRational::new_raw(
                BigInt::from(n),
                BigInt::from(d),
            ))))
        }
    }

    /// Canonicalizes a (reduced) big rational, demoting it when it fits.
    fn from_big(r: BigRational) -> Self {
        if let (Some(n), Some(d)) = (r.numer().to_i64(), r.denom().to_i64()) {
            if n != i64::MIN && d != i64::MIN {
                return Rational(Repr::Small(n, d));
            }
        }
        Rational(Repr::Big(Box::new(r)))
    }

    pub fn from_bigint(num: BigInt, den: BigInt) -> Self {
        assert!(!den.is_zero(), "zero denominator");
        Self::from_big(BigRational::new(num, den))
    }

    fn to_big(&self) -> BigRational {
        match &self.0 {
            Repr::Small(n, d) => BigRational::new_raw(BigInt::from(*n), BigInt::from(*d)),
            Repr::Big(b) => (**b).clone(),
        }
    }

    pub fn numer(&self) -> BigInt {
        match &self.0 {
            Repr::Small(n, _) => BigInt::from(*n),
            Repr::Big(b) => b.numer().clone(),
        }
    }

    pub fn denom(&self) -> BigInt {
        match &self.0 {
            Repr::Small(_, d) => BigInt::from(*d),
            Repr::Big(b) => b.denom().clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.0, Repr::Small(0, _))
    }

    pub fn is_integer(&self) -> bool {
        match &self.0 {
            Repr::Small(_, d) => *d == 1,
            Repr::Big(b) => b.is_integer(),
        }
    }

    pub fn signum(&self) -> i32 {
        match &self.0 {
            Repr::Small(n, _) => n.signum() as i32,
            Repr::Big(b) => {
                if b.is_positive() {
                    1
                } else if b.is_negative() {
                    -1
                } else {
                    0
                }
            }
        }
    }

    pub fn is_positive(&self) -> bool {
        self.signum() > 0
    }

    pub fn is_negative(&self) -> bool {
        self.signum() < 0
    }

    pub fn abs(&self) -> Self {
        if self.is_negative() {
            -self
        } else {
            self.clone()
        }
    }

    pub fn recip(&self) -> Self {
        match &self.0 {
            Repr::Small(n, d) => {
                assert!(*n != 0, "reciprocal of zero");
                Self::from_i128(*d as i128, *n as i128)
            }
            Repr::Big(b) => Self::from_big(b.recip()),
        }
    }

    /// Largest integer not above `self`.
    pub fn floor(&self) -> Self {
        match &self.0 {
            Repr::Small(n, d) => Rational(Repr::Small(n.div_euclid(*d), 1)),
            Repr::Big(b) => Self::from_big(b.floor()),
        }
    }

    /// Smallest integer not below `self`.
    pub fn ceil(&self) -> Self {
        match &self.0 {
            Repr::Small(n, d) => {
                let f = n.div_euclid(*d);
                let c = if n.rem_euclid(*d) == 0 { f } else { f + 1 };
                Rational(Repr::Small(c, 1))
            }
            Repr::Big(b) => Self::from_big(b.ceil()),
        }
    }

    /// Integer value, if `self` is an integer that fits an `i64`.
    pub fn to_i64(&self) -> Option<i64> {
        match &self.0 {
            Repr::Small(n, 1) => Some(*n),
            Repr::Small(..) => None,
            Repr::Big(b) if b.is_integer() => b.numer().to_i64(),
            Repr::Big(_) => None,
        }
    }

    pub fn to_f64(&self) -> f64 {
        match &self.0 {
            Repr::Small(n, d) => *n as f64 / *d as f64,
            Repr::Big(b) => b.to_f64().unwrap_or_else(|| {
                // Ratio of two huge integers: scale down before converting.
                let n = b.numer().to_f64().unwrap_or(f64::NAN);
                let d = b.denom().to_f64().unwrap_or(f64::NAN);
                n / d
            }),
        }
    }

    /// Exact value of a finite `f64`.
    pub fn from_f64(x: f64) -> Option<Self> {
        if !x.is_finite() {
            return None;
        }
        BigRational::from_float(x).map(Self::from_big)
    }

    /// Closest rational with denominator `den` that is `<= x` (`round_up = false`)
    /// or `>= x` (`round_up = true`).
    pub fn from_f64_rounded(x: f64, den: i64, round_up: bool) -> Self {
        let scaled = x * den as f64;
        let n = if round_up { scaled.ceil() } else { scaled.floor() };
        let mut r = Rational::new(n as i64, den);
        // Guard against the scaling itself rounding the wrong way.
        let exact = Rational::from_f64(x).expect("finite");
        if round_up && r < exact {
            r += Rational::new(1, den);
        } else if !round_up && r > exact {
            r -= Rational::new(1, den);
        }
        r
    }

    pub fn is_small(&self) -> bool {
        matches!(self.0, Repr::Small(..))
    }

    pub fn min_of(a: &Self, b: &Self) -> Self {
        if a <= b {
            a.clone()
        } else {
            b.clone()
        }
    }

    pub fn max_of(a: &Self, b: &Self) -> Self {
        if a >= b {
            a.clone()
        } else {
            b.clone()
        }
    }

    #[inline]
    fn add_ref(&self, other: &Self) -> Self {
        match (&self.0, &other.0) {
            (Repr::Small(a, b), Repr::Small(c, d)) => {
                if *b == *d {
                    if let Some(n) = a.checked_add(*c) {
                        if n == 0 {
                            return Self::zero();
                        }
                        let g = gcd_u64(n.unsigned_abs(), *b as u64) as i64;
                        if n != i64::MIN {
                            return Rational(Repr::Small(n / g, b / g));
                        }
                    }
                    return Self::from_i128(*a as i128 + *c as i128, *b as i128);
                }
                if *d == 1 {
                    if let Some(n) = c.checked_mul(*b).and_then(|x| x.checked_add(*a)) {
                        if n != i64::MIN {
                            return Rational(Repr::Small(n, *b));
                        }
                    }
                } else if *b == 1 {
                    if let Some(n) = a.checked_mul(*d).and_then(|x| x.checked_add(*c)) {
                        if n != i64::MIN {
                            return Rational(Repr::Small(n, *d));
                        }
                    }
                }
                let g = gcd_u64(*b as u64, *d as u64) as i64;
                let (bg, dg) = (b / g, d / g);
                if let Some(t) = a.checked_mul(dg).and_then(|x| c.checked_mul(bg).and_then(|y| x.checked_add(y))) {
                    if t == 0 {
                        return Self::zero();
                    }
                    if t != i64::MIN {
                        let g2 = gcd_u64(t.unsigned_abs(), g as u64) as i64;
                        if let Some(den) = bg.checked_mul(d / g2) {
                            return Rational(Repr::Small(t / g2, den));
                        }
                    }
                }
                let g = g as i128;
                let (b, d) = (*b as i128, *d as i128);
                let t = *a as i128 * (d / g) + *c as i128 * (b / g);
                let g2 = gcd_u128(t.unsigned_abs() % g as u128, g as u128) as i128;
                let g2 = if g2 == 0 { g } else { g2 };
                let num = t / g2;
                let den = (b / g) * (d / g2);
                if num.abs() <= SMALL_MAX && den <= SMALL_MAX {
                    Rational(Repr::Small(num as i64, den as i64))
                } else {
                    Self::from_i128(num, den)
                }
            }
            _ => Self::from_big(self.to_big() + other.to_big()),
        }
    }

    #[inline]
    fn mul_ref(&self, other: &Self) -> Self {
        match (&self.0, &other.0) {
            (Repr::Small(a, b), Repr::Small(c, d)) => {
                if *a == 0 || *c == 0 {
                    return Self::zero();
                }
                if let (Some(n), Some(m)) = (a.checked_mul(*c), b.checked_mul(*d)) {
                    if n != i64::MIN {
                        let g = gcd_u64(n.unsigned_abs(), m as u64) as i64;
                        return Rational(Repr::Small(n / g, m / g));
                    }
                }
                let g1 = gcd_u64(a.unsigned_abs(), d.unsigned_abs()) as i64;
                let g2 = gcd_u64(c.unsigned_abs(), b.unsigned_abs()) as i64;
                let num = (a / g1) as i128 * (c / g2) as i128;
                let den = (b / g2) as i128 * (d / g1) as i128;
                if num.abs() <= SMALL_MAX && den <= SMALL_MAX {
                    Rational(Repr::Small(num as i64, den as i64))
                } else {
                    Rational(Repr::Big(Box::new(BigRational::new_raw(
                        BigInt::from(num),
                        BigInt::from(den),
                    ))))
                }
            }
            _ => Self::from_big(self.to_big() * other.to_big()),
        }
    }

    #[inline]
    fn div_ref(&self, other: &Self) -> Self {
        assert!(!other.is_zero(), "division by zero");
        match &other.0 {
            Repr::Small(c, d) => {
                let (c, d) = if *c < 0 { (-*d, -*c) } else { (*d, *c) };
                self.mul_ref(&Rational(Repr::Small(c, d)))
            }
            Repr::Big(b) => self.mul_ref(&Self::from_big(b.recip())),
        }
    }

    fn neg_ref(&self) -> Self {
        match &self.0 {
            Repr::Small(n, d) => Rational(Repr::Small(-n, *d)),
            Repr::Big(b) => Self::from_big(-(**b).clone()),
        }
    }
}

impl Default for Rational {
    fn default() -> Self {
        Self::zero()
    }
}

impl From<i64> for Rational {
    fn from(n: i64) -> Self {
        Self::from_integer(n)
    }
}

impl From<i32> for Rational {
    fn from(n: i32) -> Self {
        Self::from_integer(n as i64)
    }
}

impl PartialEq for Rational {
    fn eq(&self, other: &Self) -> bool {
        match (&self.0, &other.0) {
            (Repr::Small(a, b), Repr::Small(c, d)) => a == c && b == d,
            (Repr::Big(x), Repr::Big(y)) => x == y,
            _ => false,
        }
    }
}

impl Eq for Rational {}

impl Hash for Rational {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match &self.0 {
            Repr::Small(n, d) => {
                0u8.hash(state);
                n.hash(state);
                d.hash(state);
            }
            Repr::Big(b) => {
                1u8.hash(state);
                b.hash(state);
            }
        }
    }
}

impl Ord for Rational {
    fn cmp(&self, other: &Self) -> Ordering {
        match (&self.0, &other.0) {
            (Repr::Small(a, b), Repr::Small(c, d)) => {
                if b == d {
                    a.cmp(c)
                } else {
                    (*a as i128 * *d as i128).cmp(&(*c as i128 * *b as i128))
                }
            }
            _ => self.to_big().cmp(&other.to_big()),
        }
    }
}

impl PartialOrd for Rational {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

macro_rules! forward_binop {
    ($tr:ident, $method:ident, $imp:ident) => {
        impl $tr<&Rational> for &Rational {
            type Output = Rational;
            #[inline]
            fn $method(self, rhs: &Rational) -> Rational {
                self.$imp(rhs)
            }
        }
        impl $tr<Rational> for Rational {
            type Output = Rational;
            #[inline]
            fn $method(self, rhs: Rational) -> Rational {
                (&self).$imp(&rhs)
            }
        }
        impl $tr<&Rational> for Rational {
            type Output = Rational;
            #[inline]
            fn $method(self, rhs: &Rational) -> Rational {
                (&self).$imp(rhs)
            }
        }
        impl $tr<Rational> for &Rational {
            type Output = Rational;
            #[inline]
            fn $method(self, rhs: Rational) -> Rational {
                self.$imp(&rhs)
            }
        }
    };
}

impl Rational {
    #[inline]
    fn sub_ref(&self, other: &Self) -> Self {
        self.add_ref(&other.neg_ref())
    }
}

forward_binop!(Add, add, add_ref);
forward_binop!(Sub, sub, sub_ref);
forward_binop!(Mul, mul, mul_ref);
forward_binop!(Div, div, div_ref);

impl Neg for Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        self.neg_ref()
    }
}

impl Neg for &Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        self.neg_ref()
    }
}

impl AddAssign<&Rational> for Rational {
    fn add_assign(&mut self, rhs: &Rational) {
        *self = self.add_ref(rhs);
    }
}

impl AddAssign<Rational> for Rational {
    fn add_assign(&mut self, rhs: Rational) {
        *self = self.add_ref(&rhs);
    }
}

impl SubAssign<&Rational> for Rational {
    fn sub_assign(&mut self, rhs: &Rational) {
        *self = self.sub_ref(rhs);
    }
}

impl SubAssign<Rational> for Rational {
    fn sub_assign(&mut self, rhs: Rational) {
        *self = self.sub_ref(&rhs);
    }
}

impl MulAssign<&Rational> for Rational {
    fn mul_assign(&mut self, rhs: &Rational) {
        *self = self.mul_ref(rhs);
    }
}

impl<'a> Sum<&'a Rational> for Rational {
    fn sum<I: Iterator<Item = &'a Rational>>(iter: I) -> Self {
        iter.fold(Rational::zero(), |acc, x| acc + x)
    }
}

impl Sum<Rational> for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Self {
        iter.fold(Rational::zero(), |acc, x| acc + x)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Repr::Small(n, 1) => write!(f, "{n}"),
            Repr::Small(n, d) => write!(f, "{n}/{d}"),
            Repr::Big(b) if b.is_integer() => write!(f, "{}", b.numer()),
            Repr::Big(b) => write!(f, "{}/{}", b.numer(), b.denom()),
        }
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

fn parse_decimal(s: &str, orig: &str) -> Result<Rational, ParseRationalError> {
    let invalid = || ParseRationalError::Invalid(orig.to_string());
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(i) => {
            let e: i32 = s[i + 1..].parse().map_err(|_| invalid())?;
            (&s[..i], e)
        }
        None => (s, 0),
    };
    let (neg, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((a, b)) => (a, b),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(invalid());
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return Err(invalid());
    }
    let all: String = format!("{int_part}{frac_part}");
    let mut num: BigInt = all.parse().unwrap_or_else(|_| BigInt::zero());
    if neg {
        num = -num;
    }
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10);
    let r = if scale >= 0 {
        BigRational::from_integer(num * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(num, num_traits::pow(ten, (-scale) as usize))
    };
    Ok(Rational::from_big(r))
}

impl FromStr for Rational {
    type Err = ParseRationalError;

    /// Accepts integers, fractions `a/b`, and decimals with an optional exponent.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.is_empty() {
            return Err(ParseRationalError::Empty);
        }
        if let Some((a, b)) = t.split_once('/') {
            let n = parse_decimal(a.trim(), s)?;
            let d = parse_decimal(b.trim(), s)?;
            if d.is_zero() {
                return Err(ParseRationalError::ZeroDenominator(s.to_string()));
            }
            return Ok(n / d);
        }
        parse_decimal(t, s)
    }
}

/// Shorthand for `Rational::new`.
pub fn q(num: i64, den: i64) -> Rational {
    Rational::new(num, den)
}

/// Integer rational.
pub fn qi(n: i64) -> Rational {
    Rational::from_integer(n)
}
