//! Cylinder-measurable integer functions on the odometer.
//!
//! Everything the exact evaluators touch is a product of [`Factor`]s: each
//! factor reads a handful of digit positions and looks its value up in a
//! table. Integrals of such products factor over connected components of the
//! "shares a digit" relation.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::scalar::Rational;

/// Largest digit position the exact machinery handles.
pub const MAX_POSITION: u32 = 62;

/// Digit `pos` (1-based) of generator `stream` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DigitPos {
    pub stream: usize,
    pub pos: u32,
}

impl DigitPos {
    pub fn new(stream: usize, pos: u32) -> Self {
        assert!(pos >= 1, "digit positions start at 1");
        DigitPos { stream, pos }
    }
}

impl std::fmt::Display for DigitPos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}.{}", self.stream, self.pos)
    }
}

/// Integer-valued function of the digits at `positions`; bit `j` of a table
/// index is the digit at `positions[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Factor {
    pub positions: Vec<DigitPos>,
    pub table: Vec<i128>,
}

impl Factor {
    pub fn constant(c: i128) -> Self {
        Factor { positions: Vec::new(), table: vec![c] }
    }

    pub fn new(positions: Vec<DigitPos>, table: Vec<i128>) -> Result<Self> {
        if positions.len() > 24 {
            return Err(Error::BudgetExceeded(format!(
                "factor reads {} digits, limit is 24",
                positions.len()
            )));
        }
        if table.len() != 1usize << positions.len() {
            return Err(Error::InvalidArgument("factor table size must be 2^positions".into()));
        }
        let distinct: BTreeSet<_> = positions.iter().collect();
        if distinct.len() != positions.len() {
            return Err(Error::InvalidArgument("factor positions must be distinct".into()));
        }
        if positions.iter().any(|p| p.pos > MAX_POSITION) {
            return Err(Error::DigitBudgetExhausted(format!("position above {MAX_POSITION}")));
        }
        Ok(Factor { positions, table })
    }

    /// Table index of the digits of a point given as per-stream prefixes.
    pub fn index_of(&self, prefixes: &[u64]) -> usize {
        let mut idx = 0usize;
        for (j, p) in self.positions.iter().enumerate() {
            idx |= (((prefixes[p.stream] >> (p.pos - 1)) & 1) as usize) << j;
        }
        idx
    }

    pub fn eval(&self, prefixes: &[u64]) -> i128 {
        self.table[self.index_of(prefixes)]
    }

    pub fn is_constant(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn max_position(&self) -> u32 {
        self.positions.iter().map(|p| p.pos).max().unwrap_or(0)
    }

    pub fn min_position(&self) -> u32 {
        self.positions.iter().map(|p| p.pos).min().unwrap_or(0)
    }

    fn table_sum(&self) -> i128 {
        self.table.iter().sum()
    }
}

/// `(1/denom) * prod factors`.
#[derive(Clone, Debug)]
pub struct FactorProduct {
    pub n: usize,
    pub factors: Vec<Factor>,
    pub denom: BigInt,
}

impl FactorProduct {
    pub fn new(n: usize, factors: Vec<Factor>, denom: BigInt) -> Result<Self> {
        for f in &factors {
            if let Some(p) = f.positions.iter().find(|p| p.stream >= n) {
                return Err(Error::InvalidArgument(format!("digit {p} outside dimension {n}")));
            }
        }
        Ok(FactorProduct { n, factors, denom })
    }

    pub fn relevant_positions(&self) -> BTreeSet<DigitPos> {
        self.factors.iter().flat_map(|f| f.positions.iter().copied()).collect()
    }

    /// Deepest relevant digit per stream.
    pub fn depth_per_stream(&self) -> Vec<u32> {
        let mut d = vec![0u32; self.n];
        for p in self.relevant_positions() {
            d[p.stream] = d[p.stream].max(p.pos);
        }
        d
    }

    pub fn max_depth(&self) -> u32 {
        self.depth_per_stream().into_iter().max().unwrap_or(0)
    }

    /// Scaled value at a point given by per-stream prefixes.
    pub fn eval_scaled(&self, prefixes: &[u64]) -> i128 {
        let mut v: i128 = 1;
        for f in &self.factors {
            v *= f.eval(prefixes);
            if v == 0 {
                break;
            }
        }
        v
    }

    /// Same product with factors that share digits merged, so the result
    /// has pairwise disjoint factor supports.
    pub fn merged(&self) -> Result<FactorProduct> {
        let comps = components(&self.factors);
        let mut out = Vec::with_capacity(comps.len());
        for comp in comps {
            if comp.len() == 1 {
                out.push(self.factors[comp[0]].clone());
            } else {
                out.push(merge_factors(comp.iter().map(|&i| &self.factors[i]))?);
            }
        }
        FactorProduct::new(self.n, out, self.denom.clone())
    }

    /// `∫ (1/denom) prod factors dm` under the Haar measure.
    pub fn integral(&self) -> Result<Rational> {
        let merged = self.merged()?;
        let mut total = Rational::one();
        for f in &merged.factors {
            let mean = Rational::new(BigInt::from(f.table_sum()), BigInt::one() << f.positions.len());
            total *= mean;
            if total.is_zero() {
                break;
            }
        }
        Ok(total / Rational::from_integer(self.denom.clone()))
    }
}

/// Groups of factor indices connected through shared digit positions.
fn components(factors: &[Factor]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..factors.len()).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut j = i;
        while parent[j] != r {
            let next = parent[j];
            parent[j] = r;
            j = next;
        }
        r
    }
    let mut owner: BTreeMap<DigitPos, usize> = BTreeMap::new();
    for (i, f) in factors.iter().enumerate() {
        for p in &f.positions {
            if let Some(&j) = owner.get(p) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            } else {
                owner.insert(*p, i);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..factors.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn merge_factors<'a>(factors: impl Iterator<Item = &'a Factor> + Clone) -> Result<Factor> {
    let positions: Vec<DigitPos> = factors
        .clone()
        .flat_map(|f| f.positions.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if positions.len() > 24 {
        return Err(Error::BudgetExceeded(format!(
            "merged factor would read {} digits",
            positions.len()
        )));
    }
    let maps: Vec<(Vec<usize>, &Factor)> = factors
        .map(|f| {
            let m = f
                .positions
                .iter()
                .map(|p| positions.iter().position(|q| q == p).unwrap())
                .collect();
            (m, f)
        })
        .collect();
    let mut table = vec![0i128; 1 << positions.len()];
    for (idx, slot) in table.iter_mut().enumerate() {
        let mut v: i128 = 1;
        for (map, f) in &maps {
            let mut local = 0usize;
            for (j, &g) in map.iter().enumerate() {
                local |= ((idx >> g) & 1) << j;
            }
            v *= f.table[local];
        }
        *slot = v;
    }
    Factor::new(positions, table)
}

/// Exact measure of a cylinder-measurable set given as an indicator product.
pub fn measure_of(n: usize, factors: Vec<Factor>) -> Result<Rational> {
    FactorProduct::new(n, factors, BigInt::one())?.integral()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::rat;

    fn dp(s: usize, p: u32) -> DigitPos {
        DigitPos::new(s, p)
    }

    #[test]
    fn independent_factors_multiply() {
        // 2 * 1[d1 = 0] * 1[d4 = 0 and d5 = 0 fails]
        let f0 = Factor::new(vec![dp(0, 1)], vec![2, 0]).unwrap();
        let mask = Factor::new(vec![dp(0, 4), dp(0, 5)], vec![0, 1, 1, 1]).unwrap();
        let prod = FactorProduct::new(1, vec![f0, mask], BigInt::one()).unwrap();
        assert_eq!(prod.integral().unwrap(), rat(3, 4));
    }

    #[test]
    fn overlapping_factors_merge() {
        let a = Factor::new(vec![dp(0, 1), dp(0, 2)], vec![1, 2, 3, 4]).unwrap();
        let b = Factor::new(vec![dp(0, 2)], vec![1, 0]).unwrap();
        let prod = FactorProduct::new(1, vec![a, b], BigInt::from(2)).unwrap();
        // digit2 must be 0: values 1, 2 -> mean over 4 cells (1+2)/4, halved.
        assert_eq!(prod.integral().unwrap(), rat(3, 8));
        assert_eq!(prod.merged().unwrap().factors.len(), 1);
    }

    #[test]
    fn eval_reads_the_right_bits() {
        let f = Factor::new(vec![dp(1, 3), dp(0, 1)], vec![10, 11, 12, 13]).unwrap();
        assert_eq!(f.eval(&[0b1, 0b100]), 13);
        assert_eq!(f.eval(&[0b0, 0b100]), 11);
        assert_eq!(f.eval(&[0b1, 0b000]), 12);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(Factor::new(vec![dp(0, 1)], vec![1]).is_err());
        assert!(Factor::new(vec![dp(0, 1), dp(0, 1)], vec![1; 4]).is_err());
    }
}
