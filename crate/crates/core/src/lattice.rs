//! Concrete ergodic `Z^n` actions: `n` independent dyadic adding machines, or
//! a single circle rotated by `z·α`.
//!
//! Odometer digits are numbered from 1; digit 1 is the least significant and
//! receives the unit of each generator. A point is an infinite digit stream
//! per generator: a materialized prefix followed by a tail that is either
//! constant or produced by a counter-based generator keyed by the point's
//! seed, so repeated deepening always sees the same digits.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatticePoint(pub Vec<i64>);

impl LatticePoint {
    pub fn zero(n: usize) -> Self {
        LatticePoint(vec![0; n])
    }

    pub fn unit(n: usize, axis: usize) -> Self {
        let mut v = vec![0; n];
        v[axis] = 1;
        LatticePoint(v)
    }

    pub fn splat(n: usize, value: i64) -> Self {
        LatticePoint(vec![value; n])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }
}

impl From<Vec<i64>> for LatticePoint {
    fn from(v: Vec<i64>) -> Self {
        LatticePoint(v)
    }
}

impl Add for &LatticePoint {
    type Output = LatticePoint;
    fn add(self, rhs: &LatticePoint) -> LatticePoint {
        assert_eq!(self.dim(), rhs.dim(), "lattice dimension mismatch");
        LatticePoint(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &LatticePoint {
    type Output = LatticePoint;
    fn sub(self, rhs: &LatticePoint) -> LatticePoint {
        assert_eq!(self.dim(), rhs.dim(), "lattice dimension mismatch");
        LatticePoint(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Neg for &LatticePoint {
    type Output = LatticePoint;
    fn neg(self) -> LatticePoint {
        LatticePoint(self.0.iter().map(|a| -a).collect())
    }
}

/// The cube `Q_N = {z : 1 <= z_i <= N}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SquareWindow {
    pub side: u64,
    pub dim: usize,
}

impl SquareWindow {
    pub fn new(side: u64, dim: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidArgument("window side must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("window dimension must be positive".into()));
        }
        Ok(SquareWindow { side, dim })
    }

    pub fn cardinality(&self) -> u128 {
        (self.side as u128).pow(self.dim as u32)
    }

    pub fn contains(&self, z: &LatticePoint) -> bool {
        z.dim() == self.dim && z.0.iter().all(|&c| c >= 1 && c as u64 <= self.side)
    }

    pub fn iter(&self) -> impl Iterator<Item = LatticePoint> {
        CubeIter::new(self.dim, 1, self.side as i64)
    }

    /// Points of `Q_{N+1} \ Q_N`, where `N = self.side`.
    pub fn shell(&self) -> impl Iterator<Item = LatticePoint> {
        let top = self.side as i64 + 1;
        CubeIter::new(self.dim, 1, top).filter(move |z| z.0.contains(&top))
    }
}

struct CubeIter {
    lo: i64,
    hi: i64,
    cur: Option<Vec<i64>>,
}

impl CubeIter {
    fn new(dim: usize, lo: i64, hi: i64) -> Self {
        CubeIter {
            lo,
            hi,
            cur: if lo <= hi { Some(vec![lo; dim]) } else { None },
        }
    }
}

impl Iterator for CubeIter {
    type Item = LatticePoint;

    fn next(&mut self) -> Option<LatticePoint> {
        let out = self.cur.clone()?;
        let cur = self.cur.as_mut().unwrap();
        let mut i = 0;
        loop {
            if i == cur.len() {
                self.cur = None;
                break;
            }
            if cur[i] < self.hi {
                cur[i] += 1;
                break;
            }
            cur[i] = self.lo;
            i += 1;
        }
        Some(LatticePoint(out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemKind {
    Odometer,
    /// Rotation of one circle by `sum z_i α_i`. Rational independence of
    /// `(1, α_1, ..., α_n)` is a caller precondition.
    Torus { alpha: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n: usize,
    pub seed: u64,
}

impl SystemSpec {
    pub fn odometer(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        Ok(SystemSpec { kind: SystemKind::Odometer, n, seed: 0 })
    }

    pub fn torus(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("torus needs at least one frequency".into()));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("torus frequencies must be finite".into()));
        }
        Ok(SystemSpec { n: alpha.len(), kind: SystemKind::Torus { alpha }, seed: 0 })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_odometer(&self) -> bool {
        matches!(self.kind, SystemKind::Odometer)
    }

    /// `T^z x`.
    pub fn apply(&self, z: &LatticePoint, x: &SystemPoint) -> Result<SystemPoint> {
        if z.dim() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: z.dim() });
        }
        match (&self.kind, x) {
            (SystemKind::Odometer, SystemPoint::Odometer(p)) => {
                if p.dim() != self.n {
                    return Err(Error::DimensionMismatch { expected: self.n, got: p.dim() });
                }
                let mut out = p.clone();
                for (stream, &zi) in out.streams.iter_mut().zip(&z.0) {
                    stream.add_signed(zi);
                }
                Ok(SystemPoint::Odometer(out))
            }
            (SystemKind::Torus { alpha }, SystemPoint::Torus(t)) => {
                let mut s = *t;
                for (&zi, &a) in z.0.iter().zip(alpha) {
                    s += frac(zi as f64 * a);
                }
                Ok(SystemPoint::Torus(frac(s)))
            }
            _ => Err(Error::InvalidArgument("point does not belong to this system".into())),
        }
    }

    /// Draws a point from the invariant measure.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SystemPoint {
        match &self.kind {
            SystemKind::Odometer => SystemPoint::Odometer(OdometerPoint::seeded(self.n, rng.gen())),
            SystemKind::Torus { .. } => SystemPoint::Torus(rng.gen::<f64>()),
        }
    }
}

/// Fractional part in `[0, 1)`.
pub fn frac(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemPoint {
    Odometer(OdometerPoint),
    Torus(f64),
}

impl SystemPoint {
    pub fn as_odometer(&self) -> Option<&OdometerPoint> {
        match self {
            SystemPoint::Odometer(p) => Some(p),
            SystemPoint::Torus(_) => None,
        }
    }

    pub fn as_torus(&self) -> Option<f64> {
        match self {
            SystemPoint::Torus(t) => Some(*t),
            SystemPoint::Odometer(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tail {
    Zeros,
    Ones,
    /// Digits beyond the materialized prefix come from a counter-based
    /// generator keyed by this seed.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DigitStream {
    words: Vec<u64>,
    tail: Tail,
}

const WORD: u32 = 64;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DigitStream {
    pub fn from_digits(digits: &[u8], tail: Tail) -> Self {
        let mut words = vec![0u64; digits.len().div_ceil(WORD as usize)];
        for (i, &d) in digits.iter().enumerate() {
            assert!(d <= 1, "odometer digits are binary");
            words[i / 64] |= (d as u64) << (i % 64);
        }
        // Bits above the listed digits inside the last word follow the tail.
        let rem = digits.len() % 64;
        if rem != 0 {
            let k = words.len() - 1;
            let fill = tail_word(tail, k) & !((1u64 << rem) - 1);
            words[k] |= fill;
        }
        DigitStream { words, tail }
    }

    pub fn seeded(seed: u64) -> Self {
        DigitStream { words: Vec::new(), tail: Tail::Seeded(seed) }
    }

    pub fn materialized_depth(&self) -> u32 {
        self.words.len() as u32 * WORD
    }

    fn word(&self, k: usize) -> u64 {
        self.words.get(k).copied().unwrap_or_else(|| tail_word(self.tail, k))
    }

    /// Digit at 1-based position `pos`.
    pub fn digit(&self, pos: u32) -> u8 {
        assert!(pos >= 1, "digit positions start at 1");
        let i = pos - 1;
        ((self.word((i / WORD) as usize) >> (i % WORD)) & 1) as u8
    }

    /// The first `depth <= 64` digits as an integer, digit 1 in bit 0.
    pub fn prefix(&self, depth: u32) -> u64 {
        assert!(depth <= 64);
        if depth == 0 {
            return 0;
        }
        let w = self.word(0);
        if depth == 64 {
            w
        } else {
            w & ((1u64 << depth) - 1)
        }
    }

    pub fn extend_to(&mut self, depth: u32) {
        let need = depth.div_ceil(WORD) as usize;
        while self.words.len() < need {
            let k = self.words.len();
            self.words.push(tail_word(self.tail, k));
        }
    }

    /// 2-adic addition of `z`.
    pub fn add_signed(&mut self, z: i64) {
        let ext = if z < 0 { u64::MAX } else { 0 };
        let mut carry = false;
        let mut k = 0usize;
        loop {
            let e = if k == 0 { z as u64 } else { ext };
            if k >= self.words.len() {
                // Tail is left untouched by these two combinations.
                if (e == 0 && !carry) || (e == u64::MAX && carry) {
                    return;
                }
                match self.tail {
                    Tail::Seeded(_) => self.words.push(tail_word(self.tail, k)),
                    Tail::Zeros | Tail::Ones => {
                        let t = tail_word(self.tail, k);
                        let (s1, c1) = t.overflowing_add(e);
                        let (s, c2) = s1.overflowing_add(carry as u64);
                        let c = c1 || c2;
                        if c == carry && (s == 0 || s == u64::MAX) {
                            self.tail = if s == 0 { Tail::Zeros } else { Tail::Ones };
                            return;
                        }
                        self.words.push(s);
                        carry = c;
                        k += 1;
                        continue;
                    }
                }
            }
            let (s1, c1) = self.words[k].overflowing_add(e);
            let (s, c2) = s1.overflowing_add(carry as u64);
            self.words[k] = s;
            carry = c1 || c2;
            k += 1;
        }
    }
}

fn tail_word(tail: Tail, k: usize) -> u64 {
    match tail {
        Tail::Zeros => 0,
        Tail::Ones => u64::MAX,
        Tail::Seeded(seed) => splitmix64(seed ^ splitmix64(k as u64 ^ 0xD1B5_4A32_D192_ED03)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OdometerPoint {
    streams: Vec<DigitStream>,
}

impl OdometerPoint {
    pub fn new(streams: Vec<DigitStream>) -> Self {
        assert!(!streams.is_empty());
        OdometerPoint { streams }
    }

    /// One stream per generator, each from a listed digit prefix followed by
    /// zeros.
    pub fn from_digits(digits: &[Vec<u8>]) -> Self {
        OdometerPoint::new(digits.iter().map(|d| DigitStream::from_digits(d, Tail::Zeros)).collect())
    }

    /// Point whose streams are the binary expansions of `values`, then zeros.
    pub fn from_prefixes(values: &[u64]) -> Self {
        OdometerPoint::new(
            values
                .iter()
                .map(|&v| DigitStream { words: vec![v], tail: Tail::Zeros })
                .collect(),
        )
    }

    pub fn seeded(n: usize, seed: u64) -> Self {
        OdometerPoint::new(
            (0..n)
                .map(|i| DigitStream::seeded(splitmix64(seed ^ splitmix64(0xA5A5 + i as u64))))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.streams.len()
    }

    pub fn stream(&self, i: usize) -> &DigitStream {
        &self.streams[i]
    }

    pub fn digit(&self, stream: usize, pos: u32) -> u8 {
        self.streams[stream].digit(pos)
    }

    pub fn prefixes(&self, depth: u32) -> Vec<u64> {
        self.streams.iter().map(|s| s.prefix(depth)).collect()
    }

    pub fn extend_to(&mut self, depth: u32) {
        for s in &mut self.streams {
            s.extend_to(depth);
        }
    }
}

impl fmt::Display for OdometerPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.streams.iter().enumerate() {
            if i > 0 {
                write!(f, " | ")?;
            }
            for pos in 1..=16 {
                write!(f, "{}", s.digit(pos))?;
            }
            write!(f, "…")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn odo(n: usize) -> SystemSpec {
        SystemSpec::odometer(n).unwrap()
    }

    fn digits_of(p: &SystemPoint, stream: usize, count: u32) -> Vec<u8> {
        let p = p.as_odometer().unwrap();
        (1..=count).map(|i| p.digit(stream, i)).collect()
    }

    #[test]
    fn binary_increment() {
        let x = SystemPoint::Odometer(OdometerPoint::from_digits(&[vec![0, 0, 0]]));
        let y = odo(1).apply(&LatticePoint(vec![1]), &x).unwrap();
        assert_eq!(digits_of(&y, 0, 4), vec![1, 0, 0, 0]);
    }

    #[test]
    fn carry_chain() {
        let x = SystemPoint::Odometer(OdometerPoint::from_digits(&[vec![1, 1, 1, 0]]));
        let y = odo(1).apply(&LatticePoint(vec![1]), &x).unwrap();
        assert_eq!(digits_of(&y, 0, 5), vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn minus_one_of_zero_is_all_ones() {
        let x = SystemPoint::Odometer(OdometerPoint::from_digits(&[vec![]]));
        let y = odo(1).apply(&LatticePoint(vec![-1]), &x).unwrap();
        assert!(digits_of(&y, 0, 200).iter().all(|&d| d == 1));
        let back = odo(1).apply(&LatticePoint(vec![1]), &y).unwrap();
        assert!(digits_of(&back, 0, 200).iter().all(|&d| d == 0));
    }

    #[test]
    fn carry_runs_through_a_full_word() {
        let x = SystemPoint::Odometer(OdometerPoint::new(vec![DigitStream::from_digits(&[1; 70], Tail::Zeros)]));
        let y = odo(1).apply(&LatticePoint(vec![1]), &x).unwrap();
        let d = digits_of(&y, 0, 72);
        assert!(d[..70].iter().all(|&v| v == 0));
        assert_eq!(d[70], 1);
    }

    #[test]
    fn torus_rotation() {
        let spec = SystemSpec::torus(vec![0.3, 0.4]).unwrap();
        let y = spec.apply(&LatticePoint(vec![1, 1]), &SystemPoint::Torus(0.9)).unwrap();
        assert!((y.as_torus().unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let x = SystemPoint::Odometer(OdometerPoint::from_digits(&[vec![0]]));
        let err = odo(1).apply(&LatticePoint(vec![1, 2]), &x).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 1, got: 2 }));
    }

    #[test]
    fn seeded_sampling_replays() {
        let spec = odo(2);
        let a = spec.sample(&mut ChaCha8Rng::seed_from_u64(7));
        let b = spec.sample(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(digits_of(&a, 1, 100), digits_of(&b, 1, 100));
    }

    #[test]
    fn extension_keeps_materialized_digits() {
        let mut p = OdometerPoint::seeded(1, 99);
        let before: Vec<u8> = (1..=300).map(|i| p.digit(0, i)).collect();
        p.extend_to(64);
        let mid: Vec<u8> = (1..=300).map(|i| p.digit(0, i)).collect();
        p.extend_to(512);
        let after: Vec<u8> = (1..=300).map(|i| p.digit(0, i)).collect();
        assert_eq!(before, mid);
        assert_eq!(before, after);
    }

    #[test]
    fn first_digit_is_fair() {
        // 4 sigma of Binomial(10^5, 1/2) is ~632 around 50000.
        let spec = odo(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let ones: u64 = (0..100_000)
            .map(|_| spec.sample(&mut rng).as_odometer().unwrap().digit(0, 1) as u64)
            .sum();
        let sigma = (100_000f64 * 0.25).sqrt();
        assert!(((ones as f64) - 50_000.0).abs() < 4.0 * sigma, "ones = {ones}");
    }

    #[test]
    fn torus_samples_pass_ks() {
        let spec = SystemSpec::torus(vec![0.5f64.sqrt()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs: Vec<f64> = (0..100_000).map(|_| spec.sample(&mut rng).as_torus().unwrap()).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
            .fold(0.0, f64::max);
        // Asymptotic 1% critical value 1.628 / sqrt(n).
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn window_enumeration_and_shell() {
        let w = SquareWindow::new(3, 2).unwrap();
        let pts: Vec<_> = w.iter().collect();
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().all(|z| w.contains(z)));
        let shell: Vec<_> = w.shell().collect();
        assert_eq!(shell.len(), 16 - 9);
        assert!(shell.iter().all(|z| !w.contains(z)));
    }

    proptest! {
        #[test]
        fn odometer_group_law(seed in any::<u64>(), z in prop::collection::vec(-1024i64..=1024, 2), w in prop::collection::vec(-1024i64..=1024, 2)) {
            let spec = odo(2);
            let x = SystemPoint::Odometer(OdometerPoint::seeded(2, seed));
            let z = LatticePoint(z);
            let w = LatticePoint(w);
            let lhs = spec.apply(&z, &spec.apply(&w, &x).unwrap()).unwrap();
            let rhs = spec.apply(&(&z + &w), &x).unwrap();
            for s in 0..2 {
                prop_assert_eq!(digits_of(&lhs, s, 256), digits_of(&rhs, s, 256));
            }
        }

        #[test]
        fn odometer_group_law_on_constant_tails(v in any::<u64>(), ones in any::<bool>(), z in -1024i64..=1024, w in -1024i64..=1024) {
            let spec = odo(1);
            let tail = if ones { Tail::Ones } else { Tail::Zeros };
            let digits: Vec<u8> = (0..64).map(|i| ((v >> i) & 1) as u8).collect();
            let x = SystemPoint::Odometer(OdometerPoint::new(vec![DigitStream::from_digits(&digits, tail)]));
            let lhs = spec.apply(&LatticePoint(vec![z]), &spec.apply(&LatticePoint(vec![w]), &x).unwrap()).unwrap();
            let rhs = spec.apply(&LatticePoint(vec![z + w]), &x).unwrap();
            prop_assert_eq!(digits_of(&lhs, 0, 300), digits_of(&rhs, 0, 300));
        }

        #[test]
        fn torus_translation(x in 0.0f64..1.0, z in prop::collection::vec(-1024i64..=1024, 2)) {
            let alpha = vec![2f64.sqrt() - 1.0, 3f64.sqrt() - 1.0];
            let spec = SystemSpec::torus(alpha.clone()).unwrap();
            let y = spec.apply(&LatticePoint(z.clone()), &SystemPoint::Torus(x)).unwrap().as_torus().unwrap();
            prop_assert!((0.0..1.0).contains(&y));
            let shift: f64 = z.iter().zip(&alpha).map(|(&zi, a)| zi as f64 * a).sum();
            let d = frac(y - x - shift);
            prop_assert!(d.min(1.0 - d) < 1e-12);
            let same = spec.apply(&LatticePoint::zero(2), &SystemPoint::Torus(x)).unwrap().as_torus().unwrap();
            prop_assert_eq!(same, x);
        }
    }
}
