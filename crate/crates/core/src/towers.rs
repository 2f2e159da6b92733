//! Rokhlin towers on the dyadic odometer.
//!
//! A tower of height `h = 2^m` has as base the cylinder "first `m` digits of
//! every stream are zero", refined by a block of extra digits placed above
//! `m`. Translating a base point by `j ∈ [0, h)^n` only rewrites the first
//! `m` digits, so the levels are disjoint cylinders and their union is the
//! set `{v(x) < threshold}` where `v` reads the refinement digits as a
//! binary number. Its measure is `threshold / 2^r` exactly.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_traits::{One, ToPrimitive, Zero};

use crate::cylinder::{DigitPos, Factor, MAX_POSITION};
use crate::error::{Error, Result};
use crate::lattice::{LatticePoint, OdometerPoint, SystemSpec};
use crate::scalar::{fmt_rational, pow2, Rational, Scalar};
use crate::window::{OffsetBox, WindowEvaluator};

/// Refinement digits a single tower may claim when the requested measure is
/// not an exact dyadic.
pub const DEFAULT_REFINEMENT_BITS: u32 = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct RokhlinTower {
    n: usize,
    level_depth: u32,
    refinement: Vec<DigitPos>,
    threshold: u64,
    requested: Rational,
    measure: Rational,
}

impl RokhlinTower {
    /// Tower with explicitly chosen refinement digits; `U = {v < threshold}`.
    pub fn with_refinement(
        n: usize,
        level_depth: u32,
        refinement: Vec<DigitPos>,
        threshold: u64,
    ) -> Result<Self> {
        if level_depth > MAX_POSITION {
            return Err(Error::DigitBudgetExhausted(format!("level depth {level_depth}")));
        }
        let r = refinement.len() as u32;
        if r > 24 {
            return Err(Error::DigitBudgetExhausted(format!("{r} refinement digits")));
        }
        if threshold == 0 || threshold > 1u64 << r {
            return Err(Error::InvalidArgument(format!(
                "threshold {threshold} outside [1, 2^{r}]"
            )));
        }
        let distinct: BTreeSet<_> = refinement.iter().collect();
        if distinct.len() != refinement.len() {
            return Err(Error::InvalidArgument("refinement digits must be distinct".into()));
        }
        for p in &refinement {
            if p.stream >= n {
                return Err(Error::DimensionMismatch { expected: n, got: p.stream + 1 });
            }
            if p.pos <= level_depth {
                return Err(Error::InvalidArgument(format!(
                    "refinement digit {p} lies inside the level digits 1..={level_depth}"
                )));
            }
            if p.pos > MAX_POSITION {
                return Err(Error::DigitBudgetExhausted(format!("refinement digit {p}")));
            }
        }
        let measure = Rational::new(BigInt::from(threshold), BigInt::one() << r as usize);
        Ok(RokhlinTower {
            n,
            level_depth,
            refinement,
            threshold,
            requested: measure.clone(),
            measure,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> u64 {
        1u64 << self.level_depth
    }

    pub fn level_depth(&self) -> u32 {
        self.level_depth
    }

    pub fn refinement(&self) -> &[DigitPos] {
        &self.refinement
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    /// `m(U)`, exact.
    pub fn measure(&self) -> &Rational {
        &self.measure
    }

    pub fn requested(&self) -> &Rational {
        &self.requested
    }

    pub fn was_rounded(&self) -> bool {
        self.requested != self.measure
    }

    fn refinement_value(&self, x: &OdometerPoint) -> u64 {
        self.refinement
            .iter()
            .enumerate()
            .map(|(j, p)| (x.digit(p.stream, p.pos) as u64) << j)
            .sum()
    }

    pub fn contains(&self, x: &OdometerPoint) -> bool {
        self.refinement_value(x) < self.threshold
    }

    /// Level `z ∈ Q_h` (1-based) with `x ∈ T^{z-1} B`, if `x ∈ U`.
    pub fn membership(&self, x: &OdometerPoint) -> Option<LatticePoint> {
        if x.dim() != self.n || !self.contains(x) {
            return None;
        }
        Some(LatticePoint(
            x.prefixes(self.level_depth)
                .into_iter()
                .map(|v| v as i64 + 1)
                .collect(),
        ))
    }

    pub fn in_base(&self, x: &OdometerPoint) -> bool {
        self.membership(x).is_some_and(|z| z.0.iter().all(|&c| c == 1))
    }

    /// `1_U` as a factor.
    pub fn indicator(&self) -> Factor {
        self.factor(false)
    }

    /// `1_{X \ U}` as a factor.
    pub fn complement_indicator(&self) -> Factor {
        self.factor(true)
    }

    fn factor(&self, complement: bool) -> Factor {
        let table = (0..1u64 << self.refinement.len())
            .map(|v| ((v < self.threshold) != complement) as i128)
            .collect();
        Factor::new(self.refinement.clone(), table).expect("tower factor is well formed")
    }

    /// Closed-form defect bounds at window side `window`.
    pub fn defect_bounds(&self, window: u64) -> Result<DefectBounds<Rational>> {
        defect_bounds(&self.measure, self.height(), window, self.n)
    }

    /// Exact `m(T^z U Δ U)`.
    pub fn almost_invariance_defect(&self, z: &LatticePoint) -> Result<Rational> {
        if z.dim() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: z.dim() });
        }
        let f = crate::cylinder::FactorProduct::new(self.n, vec![self.indicator()], BigInt::one())?;
        let windows = vec![OffsetBox::point(&LatticePoint::zero(self.n)), OffsetBox::point(z)];
        let mut ev = WindowEvaluator::new(&f, &windows, 0)?;
        ev.measure(&|b: &[(i128, i128)]| {
            let (v0, w0) = b[0];
            let (v1, w1) = b[1];
            if v0 == w0 && v1 == w1 {
                Some(v0 != v1)
            } else {
                None
            }
        })
    }

    /// Exact measures of the outer defect `Δ \ U` (points outside `U` whose
    /// window `x + Q_N` meets `U`) and inner defect `Δ ∩ U` (points of `U`
    /// whose window leaves `U`).
    pub fn measured_defects(&self, window: u64) -> Result<(Rational, Rational)> {
        let f = crate::cylinder::FactorProduct::new(self.n, vec![self.indicator()], BigInt::one())?;
        let full = (window as i128).pow(self.n as u32);
        let windows = vec![
            OffsetBox::point(&LatticePoint::zero(self.n)),
            OffsetBox::square(self.n, window),
        ];
        let mut ev = WindowEvaluator::new(&f, &windows, 0)?;
        let outer = ev.measure(&|b: &[(i128, i128)]| match b[0] {
            (1, 1) => Some(false),
            (0, 0) if b[1].0 > 0 => Some(true),
            (0, 0) if b[1].1 == 0 => Some(false),
            _ => None,
        })?;
        let inner = ev.measure(&|b: &[(i128, i128)]| match b[0] {
            (0, 0) => Some(false),
            (1, 1) if b[1].1 < full => Some(true),
            (1, 1) if b[1].0 == full => Some(false),
            _ => None,
        })?;
        Ok((outer, inner))
    }

    pub fn describe(&self) -> String {
        let digits: Vec<String> = self.refinement.iter().map(|p| p.to_string()).collect();
        format!(
            "h=2^{} threshold={} measure={} requested={} digits=[{}]",
            self.level_depth,
            self.threshold,
            fmt_rational(&self.measure),
            fmt_rational(&self.requested),
            digits.join(",")
        )
    }
}

/// Hands out refinement digits so that towers of one run never share one,
/// and never touch the digits the base observable reads.
#[derive(Clone, Debug, Default)]
pub struct DigitRegistry {
    used: Vec<BTreeSet<u32>>,
}

impl DigitRegistry {
    pub fn new(n: usize) -> Self {
        DigitRegistry { used: vec![BTreeSet::new(); n] }
    }

    pub fn reserve(&mut self, positions: impl IntoIterator<Item = DigitPos>) {
        for p in positions {
            self.used[p.stream].insert(p.pos);
        }
    }

    pub fn is_used(&self, p: DigitPos) -> bool {
        self.used[p.stream].contains(&p.pos)
    }

    pub fn used(&self) -> impl Iterator<Item = DigitPos> + '_ {
        self.used
            .iter()
            .enumerate()
            .flat_map(|(s, set)| set.iter().map(move |&pos| DigitPos::new(s, pos)))
    }

    /// `count` fresh digits above `floor`, dealt round-robin over streams.
    pub fn allocate(&mut self, floor: u32, count: u32) -> Result<Vec<DigitPos>> {
        let n = self.used.len();
        let mut next: Vec<u32> = self
            .used
            .iter()
            .map(|s| s.iter().next_back().copied().unwrap_or(0).max(floor) + 1)
            .collect();
        let mut out = Vec::with_capacity(count as usize);
        for j in 0..count as usize {
            let s = j % n;
            if next[s] > MAX_POSITION {
                return Err(Error::DigitBudgetExhausted(format!(
                    "stream {s} would need digit {} (max {MAX_POSITION})",
                    next[s]
                )));
            }
            out.push(DigitPos::new(s, next[s]));
            next[s] += 1;
        }
        self.reserve(out.iter().copied());
        Ok(out)
    }
}

pub fn log2_exact(h: u64) -> Option<u32> {
    (h != 0 && h.is_power_of_two()).then(|| h.trailing_zeros())
}

/// Builds a tower of height `h` with `m(U)` equal to `a`, or to the largest
/// dyadic below `a` with at most `max_bits` refinement digits.
pub fn build_tower(
    spec: &SystemSpec,
    h: u64,
    a: &Rational,
    registry: &mut DigitRegistry,
    max_bits: u32,
) -> Result<RokhlinTower> {
    if !spec.is_odometer() {
        return Err(Error::UnsupportedMode("towers are built on the odometer only".into()));
    }
    let m = log2_exact(h).ok_or(Error::HeightNotPowerOfTwo(h))?;
    if *a <= Rational::zero() || *a > Rational::one() {
        return Err(Error::InvalidArgument(format!(
            "tower measure {} outside (0, 1]",
            fmt_rational(a)
        )));
    }
    let (r, threshold) = dyadic_floor(a, max_bits);
    if threshold == 0 {
        return Err(Error::DigitBudgetExhausted(format!(
            "measure {} needs more than {max_bits} refinement digits",
            fmt_rational(a)
        )));
    }
    let digits = registry.allocate(m, r)?;
    let mut tower = RokhlinTower::with_refinement(spec.n, m, digits, threshold)?;
    tower.requested = a.clone();
    Ok(tower)
}

/// Smallest `r <= max_bits` with `a * 2^r` integral, else `floor(a * 2^max_bits)`.
pub fn dyadic_floor(a: &Rational, max_bits: u32) -> (u32, u64) {
    for r in 0..=max_bits {
        let scaled = a * pow2(r);
        if scaled.is_integer() {
            return (r, scaled.to_integer().to_u64().unwrap_or(0));
        }
    }
    let scaled = (a * pow2(max_bits)).floor().to_integer();
    (max_bits, scaled.to_u64().unwrap_or(0))
}

/// Closed-form bounds on the measure of the defect set for a tower of
/// measure `a`, height `h`, and window side `window`.
#[derive(Clone, Debug, PartialEq)]
pub struct DefectBounds<S> {
    pub outer: S,
    pub inner: S,
    pub window: u64,
    pub height: u64,
    pub n: usize,
}

impl<S: Scalar> DefectBounds<S> {
    pub fn total(&self) -> S {
        self.outer.clone() + self.inner.clone()
    }
}

/// `outer = a((h+N)^n/h^n - 1)`, `inner = a(1 - (h-N)^n/h^n)`.
pub fn defect_bounds<S: Scalar>(a: &S, h: u64, window: u64, n: usize) -> Result<DefectBounds<S>> {
    if h <= window {
        return Err(Error::InvalidArgument(format!(
            "tower height {h} must exceed window side {window}"
        )));
    }
    let hn = S::from_u128((h as u128).pow(n as u32));
    let up = S::from_u128(((h + window) as u128).pow(n as u32));
    let down = S::from_u128(((h - window) as u128).pow(n as u32));
    let outer = a.clone() * (up / hn.clone() - S::one());
    let inner = a.clone() * (S::one() - down / hn);
    Ok(DefectBounds { outer, inner, window, height: h, n })
}

/// Smallest power of two `h > N` whose defect bounds sum below `delta`.
pub fn choose_height(window: u64, n: usize, a: &Rational, delta: &Rational) -> Result<u64> {
    if *delta <= Rational::zero() {
        return Err(Error::InvalidArgument("defect budget must be positive".into()));
    }
    let mut h = (window + 1).next_power_of_two();
    loop {
        let b = defect_bounds(a, h, window, n)?;
        if b.total() < *delta {
            return Ok(h);
        }
        if h >= 1u64 << MAX_POSITION {
            return Err(Error::DigitBudgetExhausted(format!(
                "no height below 2^{MAX_POSITION} meets the defect budget"
            )));
        }
        h *= 2;
    }
}
