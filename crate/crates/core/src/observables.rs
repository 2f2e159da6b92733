//! Observables: base functions and their tower-masked descendants.

use std::collections::BTreeSet;
use std::sync::Arc;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::averaging::hoeffding_radius;
use crate::cylinder::{DigitPos, Factor, FactorProduct};
use crate::error::{Error, Result};
use crate::lattice::{SystemPoint, SystemSpec};
use crate::scalar::{fmt_rational, Rational, Scalar};
use crate::towers::RokhlinTower;

pub const DEFAULT_CONFIDENCE: f64 = 0.99;

/// A cylinder given by one digit pattern per stream, read from digit 1
/// upward; `*` leaves a digit free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cylinder {
    pub patterns: Vec<String>,
}

impl Cylinder {
    pub fn new(patterns: Vec<String>) -> Result<Self> {
        for p in &patterns {
            if p.chars().any(|c| !matches!(c, '0' | '1' | '*')) {
                return Err(Error::InvalidArgument(format!("bad cylinder pattern `{p}`")));
            }
        }
        Ok(Cylinder { patterns })
    }

    fn depth(&self) -> u32 {
        self.patterns.iter().map(|p| p.len() as u32).max().unwrap_or(0)
    }

    fn matches(&self, prefixes: &[u64]) -> bool {
        self.patterns.iter().enumerate().all(|(s, pat)| {
            pat.chars().enumerate().all(|(j, c)| match c {
                '0' => (prefixes[s] >> j) & 1 == 0,
                '1' => (prefixes[s] >> j) & 1 == 1,
                _ => true,
            })
        })
    }
}

/// Function of the first `depth` digits of every stream.
#[derive(Clone, Debug, PartialEq)]
pub struct CylinderFunction<S> {
    n: usize,
    depth: u32,
    values: Vec<S>,
}

impl<S: Scalar> CylinderFunction<S> {
    pub fn constant(n: usize, c: S) -> Self {
        CylinderFunction { n, depth: 0, values: vec![c] }
    }

    /// `values[idx]` with `idx = sum_i prefix_i << (i * depth)`.
    pub fn from_table(n: usize, depth: u32, values: Vec<S>) -> Result<Self> {
        if n as u32 * depth > 24 {
            return Err(Error::BudgetExceeded(format!("table over {} digits", n as u32 * depth)));
        }
        if values.len() != 1usize << (n as u32 * depth) {
            return Err(Error::InvalidArgument("table size must be 2^(n * depth)".into()));
        }
        Ok(CylinderFunction { n, depth, values })
    }

    /// Builds the function from cylinders that must partition the space.
    pub fn from_pieces(n: usize, pieces: &[(Cylinder, S)]) -> Result<Self> {
        for (c, _) in pieces {
            if c.patterns.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: c.patterns.len() });
            }
        }
        let depth = pieces.iter().map(|(c, _)| c.depth()).max().unwrap_or(0);
        if n as u32 * depth > 24 {
            return Err(Error::BudgetExceeded(format!("pieces reach {} digits", n as u32 * depth)));
        }
        let mut values = Vec::with_capacity(1 << (n as u32 * depth));
        let mask = (1u64 << depth) - 1;
        for idx in 0..1u64 << (n as u32 * depth) {
            let prefixes: Vec<u64> = (0..n).map(|i| (idx >> (i as u32 * depth)) & mask).collect();
            let hits: Vec<&S> = pieces.iter().filter(|(c, _)| c.matches(&prefixes)).map(|(_, v)| v).collect();
            match hits.len() {
                1 => values.push(hits[0].clone()),
                0 => return Err(Error::InvalidArgument(format!("cylinders miss the cell {prefixes:?}"))),
                _ => return Err(Error::InvalidArgument(format!("cylinders overlap on the cell {prefixes:?}"))),
            }
        }
        Ok(CylinderFunction { n, depth, values })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn eval_prefixes(&self, prefixes: &[u64]) -> S {
        let mask = (1u64 << self.depth) - 1;
        let idx = prefixes
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &p)| acc | (p & mask) << (i as u32 * self.depth));
        self.values[idx as usize].clone()
    }

    pub fn positions(&self) -> Vec<DigitPos> {
        (0..self.n)
            .flat_map(|s| (1..=self.depth).map(move |p| DigitPos::new(s, p)))
            .collect()
    }

    /// Integer table and common denominator.
    fn scaled(&self) -> Result<(Vec<i128>, BigInt)> {
        let rats: Vec<Rational> = self
            .values
            .iter()
            .map(|v| v.to_rational().ok_or_else(|| Error::InvalidArgument("non-finite value".into())))
            .collect::<Result<_>>()?;
        let den = rats.iter().fold(BigInt::one(), |acc, r| acc.lcm(r.denom()));
        let table = rats
            .iter()
            .map(|r| {
                (r.numer() * (&den / r.denom()))
                    .to_i128()
                    .ok_or_else(|| Error::BudgetExceeded("scaled value exceeds i128".into()))
            })
            .collect::<Result<_>>()?;
        Ok((table, den))
    }

    pub fn mean(&self) -> Result<Rational> {
        let (table, den) = self.scaled()?;
        let sum: i128 = table.iter().sum();
        Ok(Rational::new(BigInt::from(sum), den << (self.n as u32 * self.depth) as usize))
    }
}

/// Step function on the circle over `k` equal cells.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction<S> {
    values: Vec<S>,
}

impl<S: Scalar> StepFunction<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("step function needs a cell".into()));
        }
        Ok(StepFunction { values })
    }

    pub fn eval(&self, t: f64) -> S {
        let k = self.values.len();
        let cell = ((t * k as f64).floor() as usize).min(k - 1);
        self.values[cell].clone()
    }

    pub fn mean(&self) -> S {
        let sum = self.values.iter().fold(S::zero(), |a, v| a + v.clone());
        sum / S::from_u128(self.values.len() as u128)
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaseObservable<S> {
    Cylinder(CylinderFunction<S>),
    Step(StepFunction<S>),
}

impl<S: Scalar> BaseObservable<S> {
    pub fn eval(&self, x: &SystemPoint) -> Result<S> {
        match (self, x) {
            (BaseObservable::Cylinder(f), SystemPoint::Odometer(p)) => {
                if p.dim() != f.n {
                    return Err(Error::DimensionMismatch { expected: f.n, got: p.dim() });
                }
                Ok(f.eval_prefixes(&p.prefixes(f.depth)))
            }
            (BaseObservable::Step(f), SystemPoint::Torus(t)) => Ok(f.eval(*t)),
            _ => Err(Error::InvalidArgument("observable and point live on different systems".into())),
        }
    }

    fn values(&self) -> &[S] {
        match self {
            BaseObservable::Cylinder(f) => f.values(),
            BaseObservable::Step(f) => f.values(),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        self.values().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub fn range(&self) -> (f64, f64) {
        let vals = self.values().iter().map(|v| v.as_f64());
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        (lo.min(0.0), hi.max(0.0))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values().iter().all(|v| !v.is_negative())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Exact,
    MonteCarlo { samples: u64, confidence: f64, seed: u64 },
}

impl Mode {
    pub fn monte_carlo(samples: u64, seed: u64) -> Self {
        Mode::MonteCarlo { samples, confidence: DEFAULT_CONFIDENCE, seed }
    }
}

/// A value with its error bound; `exact` is set in exact mode and then
/// `error_bound` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub exact: Option<Rational>,
    pub value: f64,
    pub error_bound: f64,
    pub samples: u64,
}

impl Estimate {
    pub fn exact(r: Rational) -> Self {
        Estimate { value: r.as_f64(), exact: Some(r), error_bound: 0.0, samples: 0 }
    }

    pub fn render(&self) -> String {
        match &self.exact {
            Some(r) => fmt_rational(r),
            None => format!("{:.6e}", self.value),
        }
    }
}

/// `f * prod_j 1_{X \ U_j}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedObservable<S> {
    pub base: BaseObservable<S>,
    pub masks: Vec<Arc<RokhlinTower>>,
}

impl<S: Scalar> MaskedObservable<S> {
    pub fn new(base: BaseObservable<S>) -> Self {
        MaskedObservable { base, masks: Vec::new() }
    }

    pub fn masked(&self, tower: Arc<RokhlinTower>) -> Self {
        let mut out = self.clone();
        out.masks.push(tower);
        out
    }

    pub fn eval(&self, x: &SystemPoint) -> Result<S> {
        let v = self.base.eval(x)?;
        if self.masks.is_empty() {
            return Ok(v);
        }
        let p = x
            .as_odometer()
            .ok_or_else(|| Error::UnsupportedMode("towers live on the odometer".into()))?;
        if self.masks.iter().any(|t| t.contains(p)) {
            Ok(S::zero())
        } else {
            Ok(v)
        }
    }

    /// Exact factor form; odometer only.
    pub fn to_factors(&self) -> Result<FactorProduct> {
        let BaseObservable::Cylinder(f) = &self.base else {
            return Err(Error::UnsupportedMode("exact evaluation needs an odometer observable".into()));
        };
        let (table, den) = f.scaled()?;
        let mut factors = vec![Factor::new(f.positions(), table)?];
        for t in &self.masks {
            if t.dim() != f.n {
                return Err(Error::DimensionMismatch { expected: f.n, got: t.dim() });
            }
            factors.push(t.complement_indicator());
        }
        FactorProduct::new(f.n, factors, den)
    }

    /// Digits read per stream.
    pub fn depth_per_stream(&self) -> Result<Vec<u32>> {
        Ok(self.to_factors()?.depth_per_stream())
    }

    pub fn integral(&self, spec: &SystemSpec, mode: Mode) -> Result<Estimate> {
        match mode {
            Mode::Exact => {
                if !spec.is_odometer() {
                    return Err(Error::UnsupportedMode("exact integrals need the odometer".into()));
                }
                Ok(Estimate::exact(self.to_factors()?.integral()?))
            }
            Mode::MonteCarlo { samples, confidence, seed } => {
                if samples == 0 {
                    return Err(Error::InvalidArgument("Monte Carlo needs samples".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut sum = 0.0;
                for _ in 0..samples {
                    sum += self.eval(&spec.sample(&mut rng))?.as_f64();
                }
                let (lo, hi) = self.base.range();
                Ok(Estimate {
                    exact: None,
                    value: sum / samples as f64,
                    error_bound: (hi - lo) * hoeffding_radius(samples, confidence),
                    samples,
                })
            }
        }
    }

    /// `||self - other||_1`. Exact when both share the base and one mask
    /// list extends the other.
    pub fn l1_distance(&self, other: &Self, spec: &SystemSpec, mode: Mode) -> Result<Estimate> {
        match mode {
            Mode::Exact => {
                if self.base != other.base {
                    return Err(Error::UnsupportedMode("exact distance needs a shared base".into()));
                }
                let (short, long) = if self.masks.len() <= other.masks.len() {
                    (self, other)
                } else {
                    (other, self)
                };
                if long.masks[..short.masks.len()] != short.masks[..] {
                    return Err(Error::UnsupportedMode("exact distance needs nested masks".into()));
                }
                let a = short.abs_integral()?;
                let b = long.abs_integral()?;
                Ok(Estimate::exact(a - b))
            }
            Mode::MonteCarlo { samples, confidence, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut sum = 0.0;
                for _ in 0..samples {
                    let x = spec.sample(&mut rng);
                    sum += (self.eval(&x)? - other.eval(&x)?).as_f64().abs();
                }
                let scale = self.base.sup_abs() + other.base.sup_abs();
                Ok(Estimate {
                    exact: None,
                    value: sum / samples as f64,
                    error_bound: scale * hoeffding_radius(samples, confidence),
                    samples,
                })
            }
        }
    }

    fn abs_integral(&self) -> Result<Rational> {
        let mut fp = self.to_factors()?;
        for v in fp.factors[0].table.iter_mut() {
            *v = v.abs();
        }
        fp.integral().map(|r| r.abs())
    }

    pub fn mask_positions(&self) -> BTreeSet<DigitPos> {
        self.masks.iter().flat_map(|t| t.refinement().iter().copied()).collect()
    }
}

impl<S: Scalar> MaskedObservable<S> {
    pub fn is_zero_integral(&self) -> Result<bool> {
        Ok(self.to_factors()?.integral()?.is_zero())
    }
}
