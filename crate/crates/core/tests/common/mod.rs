//! Brute-force reference computations over the dyadic odometer.
//!
//! Everything here works on raw integer prefixes and shares no code with
//! the library beyond the rational type.

#![allow(dead_code)]

use num_rational::BigRational;
use num_bigint::BigInt;
use rand::Rng;

/// A function of the first `depth` digits of each stream, with values
/// `table[idx] / den` where `idx = sum_i prefix_i << (i * depth)`.
#[derive(Clone, Debug)]
pub struct NaiveFunction {
    pub n: usize,
    pub depth: u32,
    pub table: Vec<i64>,
    pub den: i64,
}

/// Tower mask: a point is covered when the refinement digits, read as a
/// binary number with the first listed digit least significant, fall
/// below `threshold`.
#[derive(Clone, Debug)]
pub struct NaiveMask {
    pub level_depth: u32,
    /// `(stream, 1-based position)`.
    pub digits: Vec<(usize, u32)>,
    pub threshold: u64,
}

#[derive(Clone, Debug)]
pub struct NaiveInstance {
    pub f: NaiveFunction,
    pub masks: Vec<NaiveMask>,
}

impl NaiveInstance {
    /// Digits per stream that determine the observable.
    pub fn depth(&self) -> u32 {
        self.masks
            .iter()
            .flat_map(|m| m.digits.iter().map(|d| d.1))
            .chain(std::iter::once(self.f.depth))
            .max()
            .unwrap_or(0)
    }

    /// Numerator of the value at the point with the given prefixes.
    pub fn value(&self, prefixes: &[u64]) -> i64 {
        for m in &self.masks {
            let v: u64 = m
                .digits
                .iter()
                .enumerate()
                .map(|(j, &(s, p))| ((prefixes[s] >> (p - 1)) & 1) << j)
                .sum();
            if v < m.threshold {
                return 0;
            }
        }
        let mask = (1u64 << self.f.depth) - 1;
        let idx: u64 = prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| (p & mask) << (i as u32 * self.f.depth))
            .sum();
        self.f.table[idx as usize]
    }

    fn points(&self) -> Vec<Vec<u64>> {
        let d = self.depth();
        let n = self.f.n;
        let side = 1u64 << d;
        (0..side.pow(n as u32))
            .map(|mut c| {
                (0..n)
                    .map(|_| {
                        let v = c % side;
                        c /= side;
                        v
                    })
                    .collect()
            })
            .collect()
    }

    pub fn integral(&self) -> BigRational {
        let pts = self.points();
        let total: i64 = pts.iter().map(|p| self.value(p)).sum();
        BigRational::new(BigInt::from(total), BigInt::from(self.f.den) * BigInt::from(pts.len() as u64))
    }

    /// `sum_{z in [lo, hi]^n} f(x + z)` as a numerator over `den`.
    pub fn window_sum(&self, x: &[u64], lo: u64, hi: u64) -> i64 {
        let d = self.depth();
        let modulus = 1u64 << d;
        let n = self.f.n;
        let len = hi - lo + 1;
        let mut total = 0;
        for c in 0..len.pow(n as u32) {
            let mut c = c;
            let moved: Vec<u64> = (0..n)
                .map(|i| {
                    let z = lo + c % len;
                    c /= len;
                    (x[i] + z) % modulus
                })
                .collect();
            total += self.value(&moved);
        }
        total
    }

    /// `m{x : |A(x, N, f) - integral| > t}` with `A` over `[1, N]^n`.
    pub fn deviation(&self, window: u64, t: &BigRational) -> BigRational {
        let pts = self.points();
        let integral = self.integral();
        let cells = BigInt::from(window).pow(self.f.n as u32) * BigInt::from(self.f.den);
        let mut bad = 0u64;
        for p in &pts {
            let s = BigRational::new(BigInt::from(self.window_sum(p, 1, window)), cells.clone());
            let gap = &s - &integral;
            let gap = if gap < BigRational::from_integer(0.into()) { -gap } else { gap };
            if gap > *t {
                bad += 1;
            }
        }
        BigRational::new(BigInt::from(bad), BigInt::from(pts.len() as u64))
    }
}

/// Random instance with `n * depth <= budget` digits in total.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, budget: u32) -> NaiveInstance {
    let per_stream = budget / n as u32;
    let depth = rng.gen_range(1..=per_stream.min(4));
    let den = rng.gen_range(1..=8);
    let table = (0..1usize << (n as u32 * depth)).map(|_| rng.gen_range(0..=3 * den)).collect();
    let mut masks = Vec::new();
    if rng.gen_bool(0.6) && per_stream >= 2 {
        let level_depth = rng.gen_range(0..per_stream - 1);
        let count = rng.gen_range(1..=(per_stream - level_depth).min(3));
        let mut positions: Vec<u32> = (level_depth + 1..=per_stream).collect();
        let mut digits = Vec::new();
        for _ in 0..count {
            let j = rng.gen_range(0..positions.len());
            digits.push((rng.gen_range(0..n), positions.swap_remove(j)));
        }
        digits.sort();
        digits.dedup();
        let threshold = rng.gen_range(1..=1u64 << digits.len());
        masks.push(NaiveMask { level_depth, digits, threshold });
    }
    NaiveInstance { f: NaiveFunction { n, depth, table, den }, masks }
}

/// The same instance as a library observable.
pub fn to_library(inst: &NaiveInstance) -> slowavg::ExactObservable {
    use slowavg::cylinder::DigitPos;
    use slowavg::observables::{BaseObservable, CylinderFunction, MaskedObservable};
    use slowavg::towers::RokhlinTower;
    use std::sync::Arc;

    let values = inst
        .f
        .table
        .iter()
        .map(|&v| BigRational::new(v.into(), inst.f.den.into()))
        .collect();
    let base = CylinderFunction::from_table(inst.f.n, inst.f.depth, values).unwrap();
    let mut f = MaskedObservable::new(BaseObservable::Cylinder(base));
    for m in &inst.masks {
        let digits = m.digits.iter().map(|&(s, p)| DigitPos::new(s, p)).collect();
        let t = RokhlinTower::with_refinement(inst.f.n, m.level_depth, digits, m.threshold).unwrap();
        f = f.masked(Arc::new(t));
    }
    f
}

/// Constant one masked by a single tower, for defect measurements.
pub fn tower_complement(n: usize, mask: NaiveMask) -> NaiveInstance {
    NaiveInstance { f: NaiveFunction { n, depth: 0, table: vec![1], den: 1 }, masks: vec![mask] }
}

/// `(m(Δ \ U), m(Δ ∩ U))` by enumeration, windows over `[1, N]^n`.
pub fn naive_defects(n: usize, mask: NaiveMask, window: u64) -> (BigRational, BigRational) {
    let inst = tower_complement(n, mask);
    let pts = inst.points();
    let full = (window as i64).pow(n as u32);
    let (mut outer, mut inner) = (0u64, 0u64);
    for p in &pts {
        let s = inst.window_sum(p, 1, window);
        if inst.value(p) == 1 && s < full {
            outer += 1;
        }
        if inst.value(p) == 0 && s > 0 {
            inner += 1;
        }
    }
    let total = BigInt::from(pts.len() as u64);
    (BigRational::new(outer.into(), total.clone()), BigRational::new(inner.into(), total))
}
