//! Exact window sums over the odometer.
//!
//! For a cylinder function `F` (a [`FactorProduct`]) and offset boxes `W`,
//! the evaluator computes the Haar measure of any set of the form
//! `{x : pred(S_W1(x), S_W2(x), ...)}` with `S_W(x) = sum_{o in W} F(x + o)`.
//!
//! Each stream is split at a digit `p` with `2^p` at least the box width.
//! Adding an offset to `x = H * 2^p + L` changes the high part `H` by a carry
//! in `{-1, 0, 1}` only. The high digits are summarised by a digit-serial
//! automaton into finitely many carry patterns; for each pattern the low part
//! is handled by branch-and-bound over dyadic blocks of `L`, with window sums
//! bracketed through monotone segment bounds.

use std::collections::HashMap;

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Zero};

use crate::cylinder::{Factor, FactorProduct};
use crate::error::{Error, Result};
use crate::lattice::LatticePoint;
use crate::scalar::Rational;

pub const MAX_DIM: usize = 4;
pub const DEFAULT_NODE_BUDGET: u64 = 200_000_000;
const MAX_TOTAL_DEPTH: u32 = 63;

/// Per-axis inclusive offset ranges `[lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl OffsetBox {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return Err(Error::InvalidArgument("offset box with lo > hi".into()));
        }
        Ok(OffsetBox { lo, hi })
    }

    /// `Q_N = [1, N]^n`.
    pub fn square(n: usize, side: u64) -> Self {
        OffsetBox { lo: vec![1; n], hi: vec![side as i64; n] }
    }

    pub fn point(z: &LatticePoint) -> Self {
        OffsetBox { lo: z.0.clone(), hi: z.0.clone() }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn cardinality(&self) -> u128 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a + 1) as u128).product()
    }

    /// Smallest `p` such that the box fits the carry scheme at split `p`.
    fn min_split(&self) -> u32 {
        let need = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| (hi as i128).max(1 - lo as i128).max(hi as i128 - lo as i128 + 1))
            .max()
            .unwrap_or(1);
        let mut p = 1u32;
        while (1i128 << p) < need {
            p += 1;
        }
        p
    }
}

/// Decides a predicate on a block of points from bracketed window sums.
///
/// `Some(true)` counts the whole block, `Some(false)` discards it, `None`
/// asks for a finer block. With exact sums (`lo == hi` everywhere) an
/// implementation must return `Some`.
pub trait Decide {
    fn decide(&self, sums: &[(i128, i128)]) -> Option<bool>;
}

impl<F: Fn(&[(i128, i128)]) -> Option<bool>> Decide for F {
    fn decide(&self, sums: &[(i128, i128)]) -> Option<bool> {
        self(sums)
    }
}

/// Counts the points whose single window sum lies outside `[lo, hi]`.
#[derive(Clone, Copy, Debug)]
pub struct OutsideInterval {
    pub lo: i128,
    pub hi: i128,
}

impl Decide for OutsideInterval {
    fn decide(&self, sums: &[(i128, i128)]) -> Option<bool> {
        let (a, b) = sums[0];
        if b < self.lo || a > self.hi {
            Some(true)
        } else if a >= self.lo && b <= self.hi {
            Some(false)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Seg {
    All,
    Minus,
    Plus,
}

#[derive(Clone, Debug)]
struct Term {
    tau: [Seg; MAX_DIM],
    gamma: i128,
}

#[derive(Clone, Debug)]
struct Pattern {
    weight: BigUint,
    terms: Vec<Vec<Term>>,
}

#[derive(Clone, Copy, Debug)]
struct Ivs {
    v: [(u64, u64); 2],
    len: usize,
}

impl Ivs {
    const EMPTY: Ivs = Ivs { v: [(0, 0); 2], len: 0 };

    fn one(a: u64, b: u64) -> Ivs {
        Ivs { v: [(a, b), (0, 0)], len: 1 }
    }

    fn arc(start: u64, len: u64, modulus: u64) -> Ivs {
        if len == 0 {
            Ivs::EMPTY
        } else if len >= modulus {
            Ivs::one(0, modulus - 1)
        } else if start + len <= modulus {
            Ivs::one(start, start + len - 1)
        } else {
            Ivs { v: [(start, modulus - 1), (0, start + len - 1 - modulus)], len: 2 }
        }
    }
}

/// Low-side sums: `sum of F_low` over boxes of `[0, 2^p)^n`.
struct LowSpace {
    n: usize,
    p: u32,
    constant: i128,
    factors: Vec<Factor>,
    sums: HashMap<(u32, u32, u32), i128>,
    prefix: HashMap<[u64; MAX_DIM], i128>,
}

impl LowSpace {
    fn block_sum(&mut self, starts: &[u64; MAX_DIM], qs: &[u32; MAX_DIM]) -> i128 {
        let mut total = self.constant;
        let mut free_bits: u32 = qs[..self.n].iter().sum();
        for (fi, f) in self.factors.iter().enumerate() {
            let (mut mask, mut vals, mut free) = (0u32, 0u32, 0u32);
            for (j, pp) in f.positions.iter().enumerate() {
                if pp.pos <= qs[pp.stream] {
                    free |= 1 << j;
                } else {
                    mask |= 1 << j;
                    vals |= (((starts[pp.stream] >> (pp.pos - 1)) & 1) as u32) << j;
                }
            }
            free_bits -= free.count_ones();
            let s = *self.sums.entry((fi as u32, mask, vals)).or_insert_with(|| {
                let mut acc = 0i128;
                let mut sub = free;
                loop {
                    acc += f.table[(vals | sub) as usize];
                    if sub == 0 {
                        break;
                    }
                    sub = (sub - 1) & free;
                }
                acc
            });
            total *= s;
            if total == 0 {
                return 0;
            }
        }
        total << free_bits
    }

    /// Sum over `prod_i [0, v_i)`.
    fn prefix_count(&mut self, v: &[u64; MAX_DIM]) -> i128 {
        if v[..self.n].contains(&0) {
            return 0;
        }
        if self.factors.is_empty() {
            return v[..self.n].iter().fold(self.constant, |acc, &x| acc * x as i128);
        }
        if let Some(&c) = self.prefix.get(v) {
            return c;
        }
        let mut blocks: Vec<Vec<(u64, u32)>> = Vec::with_capacity(self.n);
        for &vi in &v[..self.n] {
            let mut list = Vec::new();
            for k in (0..=self.p).rev() {
                if (vi >> k) & 1 == 1 {
                    let start = if k + 1 >= 64 { 0 } else { (vi >> (k + 1)) << (k + 1) };
                    list.push((start, k));
                }
            }
            blocks.push(list);
        }
        let mut starts = [0u64; MAX_DIM];
        let mut qs = [0u32; MAX_DIM];
        let total = self.sum_blocks(&blocks, 0, &mut starts, &mut qs);
        self.prefix.insert(*v, total);
        total
    }

    fn sum_blocks(
        &mut self,
        blocks: &[Vec<(u64, u32)>],
        axis: usize,
        starts: &mut [u64; MAX_DIM],
        qs: &mut [u32; MAX_DIM],
    ) -> i128 {
        if axis == self.n {
            return self.block_sum(starts, qs);
        }
        let mut acc = 0i128;
        for &(s, q) in &blocks[axis] {
            starts[axis] = s;
            qs[axis] = q;
            acc += self.sum_blocks(blocks, axis + 1, starts, qs);
        }
        acc
    }

    /// Sum over the inclusive box `prod_i [a_i, b_i]`.
    fn box_count(&mut self, a: &[u64; MAX_DIM], b: &[u64; MAX_DIM]) -> i128 {
        let mut acc = 0i128;
        for sel in 0..1usize << self.n {
            let mut corner = [0u64; MAX_DIM];
            for i in 0..self.n {
                corner[i] = if (sel >> i) & 1 == 1 { a[i] } else { b[i] + 1 };
            }
            let c = self.prefix_count(&corner);
            if sel.count_ones() % 2 == 1 {
                acc -= c;
            } else {
                acc += c;
            }
        }
        acc
    }

    fn product_count(&mut self, ivs: &[Ivs; MAX_DIM]) -> i128 {
        let mut idx = [0usize; MAX_DIM];
        if ivs[..self.n].iter().any(|v| v.len == 0) {
            return 0;
        }
        let mut acc = 0i128;
        loop {
            let mut a = [0u64; MAX_DIM];
            let mut b = [0u64; MAX_DIM];
            for i in 0..self.n {
                (a[i], b[i]) = ivs[i].v[idx[i]];
            }
            acc += self.box_count(&a, &b);
            let mut i = 0;
            loop {
                if i == self.n {
                    return acc;
                }
                idx[i] += 1;
                if idx[i] < ivs[i].len {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
        }
    }
}

/// Segment of the low coordinate hit by offsets in `[lo, hi]` with the
/// given carry, as inner (`inner = true`) or outer bound over `L in [s, e]`.
fn segment(seg: Seg, lo: i64, hi: i64, s: u64, e: u64, modulus: u64, inner: bool) -> Ivs {
    let (lo, hi, s, e, m) = (lo as i128, hi as i128, s as i128, e as i128, modulus as i128);
    match seg {
        Seg::All => {
            let len = hi - lo + 1;
            if len >= m {
                return Ivs::one(0, modulus - 1);
            }
            if inner {
                let l = len - (e - s);
                if l <= 0 {
                    return Ivs::EMPTY;
                }
                Ivs::arc((e + lo).rem_euclid(m) as u64, l as u64, modulus)
            } else {
                let l = (len + (e - s)).min(m);
                Ivs::arc((s + lo).rem_euclid(m) as u64, l as u64, modulus)
            }
        }
        Seg::Plus | Seg::Minus => {
            let shift = if seg == Seg::Plus { -m } else { m };
            let start = |l: i128| (l + lo + shift).max(0);
            let end = |l: i128| (l + hi + shift).min(m - 1);
            let (a, b) = if inner { (start(e), end(s)) } else { (start(s), end(e)) };
            if a > b {
                Ivs::EMPTY
            } else {
                Ivs::one(a as u64, b as u64)
            }
        }
    }
}

/// Range of the segment length over `L in [s, e]`; arcs have fixed length.
fn segment_len(seg: Seg, lo: i64, hi: i64, s: u64, e: u64, modulus: u64) -> (i128, i128) {
    let len = |v: Ivs| (0..v.len).map(|j| (v.v[j].1 - v.v[j].0 + 1) as i128).sum::<i128>();
    match seg {
        Seg::All => {
            let l = ((hi - lo + 1) as i128).min(modulus as i128);
            (l, l)
        }
        _ => (
            len(segment(seg, lo, hi, s, e, modulus, true)),
            len(segment(seg, lo, hi, s, e, modulus, false)),
        ),
    }
}

fn window_bounds(
    low: &mut LowSpace,
    windows: &[OffsetBox],
    terms: &[Vec<Term>],
    s: &[u64; MAX_DIM],
    q: u32,
    out: &mut Vec<(i128, i128)>,
) {
    out.clear();
    let n = low.n;
    let modulus = 1u64 << low.p;
    let span = (1u64 << q) - 1;
    for (w, box_) in windows.iter().enumerate() {
        let (mut lo_sum, mut hi_sum) = (0i128, 0i128);
        for t in &terms[w] {
            if low.factors.is_empty() {
                let (mut cmin, mut cmax) = (low.constant, low.constant);
                for i in 0..n {
                    let e = s[i] + span;
                    let (a, b) = segment_len(t.tau[i], box_.lo[i], box_.hi[i], s[i], e, modulus);
                    cmin *= a;
                    cmax *= b;
                }
                if t.gamma > 0 {
                    lo_sum += t.gamma * cmin;
                    hi_sum += t.gamma * cmax;
                } else {
                    lo_sum += t.gamma * cmax;
                    hi_sum += t.gamma * cmin;
                }
                continue;
            }
            let mut inner = [Ivs::EMPTY; MAX_DIM];
            let mut outer = [Ivs::EMPTY; MAX_DIM];
            for i in 0..n {
                let e = s[i] + span;
                inner[i] = segment(t.tau[i], box_.lo[i], box_.hi[i], s[i], e, modulus, true);
                outer[i] = segment(t.tau[i], box_.lo[i], box_.hi[i], s[i], e, modulus, false);
            }
            let cmin = low.product_count(&inner);
            let cmax = if q == 0 { cmin } else { low.product_count(&outer) };
            if t.gamma > 0 {
                lo_sum += t.gamma * cmin;
                hi_sum += t.gamma * cmax;
            } else {
                lo_sum += t.gamma * cmax;
                hi_sum += t.gamma * cmin;
            }
        }
        out.push((lo_sum, hi_sum));
    }
}

fn carry_index(c: &[i8]) -> usize {
    c.iter().rev().fold(0usize, |acc, &ci| acc * 3 + (ci + 1) as usize)
}

/// Expands carry-indexed high values `beta` into segment coefficients.
fn gamma_terms(beta: &[i128], windows: &[OffsetBox], n: usize) -> Vec<Vec<Term>> {
    let combos = 3usize.pow(n as u32);
    windows
        .iter()
        .map(|b| {
            let mut terms = Vec::new();
            'tau: for code in 0..combos {
                let mut tau = [Seg::All; MAX_DIM];
                let mut c = code;
                let mut active = Vec::new();
                for (i, slot) in tau.iter_mut().enumerate().take(n) {
                    *slot = match c % 3 {
                        0 => Seg::All,
                        1 => Seg::Minus,
                        _ => Seg::Plus,
                    };
                    c /= 3;
                    match *slot {
                        Seg::Minus if b.lo[i] >= 0 => continue 'tau,
                        Seg::Plus if b.hi[i] <= 0 => continue 'tau,
                        Seg::All => {}
                        _ => active.push(i),
                    }
                }
                let mut gamma = 0i128;
                for sub in 0..1usize << active.len() {
                    let mut carries = vec![0i8; n];
                    for (j, &i) in active.iter().enumerate() {
                        if (sub >> j) & 1 == 1 {
                            carries[i] = if tau[i] == Seg::Minus { -1 } else { 1 };
                        }
                    }
                    let v = beta[carry_index(&carries)];
                    if (active.len() - sub.count_ones() as usize) % 2 == 1 {
                        gamma -= v;
                    } else {
                        gamma += v;
                    }
                }
                if gamma != 0 {
                    terms.push(Term { tau, gamma });
                }
            }
            terms
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct HighState {
    carry: u8,
    borrow: u8,
    bits: [u64; 3],
    beta: [i128; 3],
}

struct HighClass {
    beta: [i128; 3],
    bits: [u64; 3],
    count: u128,
}

/// Digit-serial pass over the high digits `p+1..=depth` of one stream,
/// tracking `H - 1`, `H`, `H + 1` simultaneously.
fn stream_classes(
    p: u32,
    depth: u32,
    factors: &[Factor],
    singles: &[usize],
    local: &HashMap<u32, usize>,
) -> Vec<HighClass> {
    let mut ends: HashMap<u32, usize> = HashMap::new();
    for &fi in singles {
        ends.insert(factors[fi].max_position(), fi);
    }
    let mut states: HashMap<HighState, u128> = HashMap::new();
    states.insert(HighState { carry: 1, borrow: 1, bits: [0; 3], beta: [1; 3] }, 1);
    for pos in p + 1..=depth {
        let mut next: HashMap<HighState, u128> = HashMap::with_capacity(states.len() * 2);
        for (st, cnt) in &states {
            for b in 0..2u8 {
                let minus = b ^ st.borrow;
                let plus = b ^ st.carry;
                let mut ns = HighState {
                    carry: b & st.carry,
                    borrow: (1 - b) & st.borrow,
                    bits: st.bits,
                    beta: st.beta,
                };
                if let Some(&j) = local.get(&pos) {
                    for (v, d) in [minus, b, plus].into_iter().enumerate() {
                        ns.bits[v] |= (d as u64) << j;
                    }
                }
                if let Some(&fi) = ends.get(&pos) {
                    let f = &factors[fi];
                    let mut clear = 0u64;
                    for v in 0..3 {
                        let mut idx = 0usize;
                        for (k, pp) in f.positions.iter().enumerate() {
                            let lj = local[&pp.pos];
                            idx |= (((ns.bits[v] >> lj) & 1) as usize) << k;
                            clear |= 1u64 << lj;
                        }
                        ns.beta[v] *= f.table[idx];
                    }
                    for v in 0..3 {
                        ns.bits[v] &= !clear;
                    }
                }
                *next.entry(ns).or_insert(0) += cnt;
            }
        }
        states = next;
    }
    let mut merged: HashMap<([i128; 3], [u64; 3]), u128> = HashMap::new();
    for (st, cnt) in states {
        *merged.entry((st.beta, st.bits)).or_insert(0) += cnt;
    }
    let mut out: Vec<HighClass> = merged
        .into_iter()
        .map(|((beta, bits), count)| HighClass { beta, bits, count })
        .collect();
    out.sort_by_key(|a| (a.beta, a.bits));
    out
}

/// Exact evaluator for window-sum predicates of one cylinder function.
pub struct WindowEvaluator {
    n: usize,
    p: u32,
    depths: Vec<u32>,
    high_bits: u32,
    windows: Vec<OffsetBox>,
    low: LowSpace,
    high_factors: Vec<Factor>,
    patterns: Vec<Pattern>,
    node_budget: u64,
    nodes: u64,
}

impl WindowEvaluator {
    /// `guard` extra free digits are appended above the deepest relevant one;
    /// results do not depend on it.
    pub fn new(func: &FactorProduct, windows: &[OffsetBox], guard: u32) -> Result<Self> {
        let n = func.n;
        if n == 0 || n > MAX_DIM {
            return Err(Error::UnsupportedMode(format!("exact evaluation supports 1..={MAX_DIM} streams")));
        }
        if windows.is_empty() {
            return Err(Error::InvalidArgument("at least one window is required".into()));
        }
        for w in windows {
            if w.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, got: w.dim() });
            }
        }
        let merged = func.merged()?;
        if merged.factors.iter().any(|f| f.table.iter().any(|&v| v < 0)) {
            return Err(Error::UnsupportedMode("exact evaluation needs nonnegative factor tables".into()));
        }
        let mut p = windows.iter().map(OffsetBox::min_split).max().unwrap_or(1);
        loop {
            let straddle = merged
                .factors
                .iter()
                .filter(|f| !f.is_constant() && f.min_position() <= p && f.max_position() > p)
                .map(|f| f.max_position())
                .max();
            match straddle {
                Some(top) => p = top,
                None => break,
            }
        }
        if p > crate::cylinder::MAX_POSITION {
            return Err(Error::BudgetExceeded(format!("split digit {p} too deep")));
        }
        let (low_f, high_f): (Vec<Factor>, Vec<Factor>) =
            merged.factors.into_iter().partition(|f| f.max_position() <= p);
        let mut constant = 1i128;
        let mut low_factors = Vec::new();
        for f in low_f {
            if f.is_constant() {
                constant *= f.table[0];
            } else {
                low_factors.push(f);
            }
        }
        let mut depths = vec![p; n];
        for f in &high_f {
            for pp in &f.positions {
                depths[pp.stream] = depths[pp.stream].max(pp.pos);
            }
        }
        for d in depths.iter_mut() {
            *d += guard;
            if *d > MAX_TOTAL_DEPTH {
                return Err(Error::BudgetExceeded(format!("evaluation depth {d} above {MAX_TOTAL_DEPTH}")));
            }
        }
        let log_max = |f: &Factor| (f.table.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0) as f64 + 1.0).log2();
        let bits_needed = (p * n as u32) as f64
            + (constant.unsigned_abs() as f64 + 1.0).log2()
            + low_factors.iter().map(log_max).sum::<f64>()
            + high_f.iter().map(log_max).sum::<f64>()
            + n as f64 * (2.0 + 3f64.log2())
            + 2.0;
        if bits_needed > 125.0 {
            return Err(Error::BudgetExceeded(format!(
                "window sums may need {bits_needed:.0} bits; reduce the split digit or value range"
            )));
        }
        let high_bits = depths.iter().map(|d| d - p).sum();

        let mut ev = WindowEvaluator {
            n,
            p,
            depths,
            high_bits,
            windows: windows.to_vec(),
            low: LowSpace {
                n,
                p,
                constant,
                factors: low_factors,
                sums: HashMap::new(),
                prefix: HashMap::new(),
            },
            high_factors: high_f,
            patterns: Vec::new(),
            node_budget: DEFAULT_NODE_BUDGET,
            nodes: 0,
        };
        ev.patterns = ev.build_patterns()?;
        Ok(ev)
    }

    pub fn with_node_budget(mut self, budget: u64) -> Self {
        self.node_budget = budget;
        self
    }

    pub fn split_digit(&self) -> u32 {
        self.p
    }

    pub fn depths(&self) -> &[u32] {
        &self.depths
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns.len()
    }

    pub fn nodes_visited(&self) -> u64 {
        self.nodes
    }

    fn build_patterns(&self) -> Result<Vec<Pattern>> {
        let n = self.n;
        let mut local: Vec<HashMap<u32, usize>> = vec![HashMap::new(); n];
        for i in 0..n {
            let mut pos: Vec<u32> = self
                .high_factors
                .iter()
                .flat_map(|f| f.positions.iter())
                .filter(|pp| pp.stream == i)
                .map(|pp| pp.pos)
                .collect();
            pos.sort_unstable();
            if pos.len() > 64 {
                return Err(Error::BudgetExceeded("too many high digits in one stream".into()));
            }
            for (j, p) in pos.into_iter().enumerate() {
                local[i].insert(p, j);
            }
        }
        let mut singles: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut multis: Vec<usize> = Vec::new();
        for (fi, f) in self.high_factors.iter().enumerate() {
            let s0 = f.positions[0].stream;
            if f.positions.iter().all(|pp| pp.stream == s0) {
                singles[s0].push(fi);
            } else {
                multis.push(fi);
            }
        }
        let classes: Vec<Vec<HighClass>> = (0..n)
            .map(|i| stream_classes(self.p, self.depths[i], &self.high_factors, &singles[i], &local[i]))
            .collect();

        let combos = 3usize.pow(n as u32);
        let mut agg: HashMap<Vec<i128>, BigUint> = HashMap::new();
        let mut pick = vec![0usize; n];
        let mut guard = 0u64;
        loop {
            guard += 1;
            if guard > 50_000_000 {
                return Err(Error::BudgetExceeded("too many high-digit patterns".into()));
            }
            let mut beta = vec![0i128; combos];
            for (code, slot) in beta.iter_mut().enumerate() {
                let mut c = code;
                let mut carry = [0usize; MAX_DIM];
                for ci in carry.iter_mut().take(n) {
                    *ci = c % 3;
                    c /= 3;
                }
                let mut v: i128 = 1;
                for i in 0..n {
                    v *= classes[i][pick[i]].beta[carry[i]];
                }
                for &fi in &multis {
                    if v == 0 {
                        break;
                    }
                    let f = &self.high_factors[fi];
                    let mut idx = 0usize;
                    for (k, pp) in f.positions.iter().enumerate() {
                        let bits = classes[pp.stream][pick[pp.stream]].bits[carry[pp.stream]];
                        idx |= (((bits >> local[pp.stream][&pp.pos]) & 1) as usize) << k;
                    }
                    v *= f.table[idx];
                }
                *slot = v;
            }
            let mut w = BigUint::one();
            for i in 0..n {
                w *= BigUint::from(classes[i][pick[i]].count);
            }
            *agg.entry(beta).or_insert_with(BigUint::zero) += w;

            let mut i = 0;
            loop {
                if i == n {
                    let mut out: Vec<(Vec<i128>, BigUint)> = agg.into_iter().collect();
                    out.sort_by(|a, b| a.0.cmp(&b.0));
                    return Ok(out
                        .into_iter()
                        .map(|(beta, weight)| Pattern {
                            terms: gamma_terms(&beta, &self.windows, n),
                            weight,
                        })
                        .collect());
                }
                pick[i] += 1;
                if pick[i] < classes[i].len() {
                    break;
                }
                pick[i] = 0;
                i += 1;
            }
        }
    }

    /// Haar measure of the set of points selected by `pred`.
    pub fn measure<D: Decide + ?Sized>(&mut self, pred: &D) -> Result<Rational> {
        let mut num = BigUint::zero();
        for pi in 0..self.patterns.len() {
            let c = self.count_low(pi, pred)?;
            if c != 0 {
                num += &self.patterns[pi].weight * BigUint::from(c);
            }
        }
        let shift = self.high_bits as usize + (self.p as usize) * self.n;
        Ok(Rational::new(BigInt::from(num), BigInt::one() << shift))
    }

    fn count_low<D: Decide + ?Sized>(&mut self, pi: usize, pred: &D) -> Result<u128> {
        let n = self.n;
        let terms = &self.patterns[pi].terms;
        let mut stack: Vec<([u64; MAX_DIM], u32)> = vec![([0; MAX_DIM], self.p)];
        let mut sums = Vec::with_capacity(self.windows.len());
        let mut count = 0u128;
        while let Some((s, q)) = stack.pop() {
            self.nodes += 1;
            if self.nodes > self.node_budget {
                return Err(Error::BudgetExceeded(format!(
                    "branch-and-bound exceeded {} blocks",
                    self.node_budget
                )));
            }
            window_bounds(&mut self.low, &self.windows, terms, &s, q, &mut sums);
            match pred.decide(&sums) {
                Some(true) => count += 1u128 << (q as usize * n),
                Some(false) => {}
                None => {
                    if q == 0 {
                        return Err(Error::InvalidArgument(
                            "predicate left an exact window sum undecided".into(),
                        ));
                    }
                    for child in 0..1usize << n {
                        let mut cs = s;
                        for (i, c) in cs.iter_mut().enumerate().take(n) {
                            *c += (((child >> i) & 1) as u64) << (q - 1);
                        }
                        stack.push((cs, q - 1));
                    }
                }
            }
        }
        Ok(count)
    }

    /// Window sums at one point, given per-stream digit prefixes covering
    /// at least [`Self::depths`].
    pub fn window_sums_at(&mut self, prefixes: &[u64]) -> Vec<i128> {
        let n = self.n;
        let mask_low = (1u64 << self.p) - 1;
        let mut low = [0u64; MAX_DIM];
        for i in 0..n {
            low[i] = prefixes[i] & mask_low;
        }
        let combos = 3usize.pow(n as u32);
        let mut beta = vec![0i128; combos];
        let mut shifted = vec![0u64; n];
        for (code, slot) in beta.iter_mut().enumerate() {
            let mut c = code;
            for i in 0..n {
                let carry = (c % 3) as i64 - 1;
                c /= 3;
                let r = self.depths[i] - self.p;
                let high = prefixes[i] >> self.p;
                let m = if r >= 64 { u64::MAX } else { (1u64 << r) - 1 };
                let h = (high.wrapping_add(carry as u64)) & m;
                shifted[i] = if r == 0 { 0 } else { h << self.p };
            }
            *slot = self.high_factors.iter().map(|f| f.eval(&shifted)).product();
        }
        let terms = gamma_terms(&beta, &self.windows, n);
        let mut out = Vec::new();
        window_bounds(&mut self.low, &self.windows, &terms, &low, 0, &mut out);
        out.into_iter().map(|(a, _)| a).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cylinder::DigitPos;
    use crate::scalar::rat;

    fn dp(s: usize, p: u32) -> DigitPos {
        DigitPos::new(s, p)
    }

    /// Direct window sums on `Z / 2^D` per stream.
    fn brute(f: &FactorProduct, b: &OffsetBox, depth: u32, x: &[u64]) -> i128 {
        let n = f.n;
        let m = 1i64 << depth;
        let mut total = 0i128;
        let mut o: Vec<i64> = b.lo.clone();
        loop {
            let y: Vec<u64> = (0..n).map(|i| (x[i] as i64 + o[i]).rem_euclid(m) as u64).collect();
            total += f.eval_scaled(&y);
            let mut i = 0;
            loop {
                if i == n {
                    return total;
                }
                o[i] += 1;
                if o[i] <= b.hi[i] {
                    break;
                }
                o[i] = b.lo[i];
                i += 1;
            }
        }
    }

    #[test]
    fn pointwise_sums_match_brute_force_n1() {
        let f = FactorProduct::new(
            1,
            vec![
                Factor::new(vec![dp(0, 1), dp(0, 2)], vec![3, 1, 4, 1]).unwrap(),
                Factor::new(vec![dp(0, 5), dp(0, 7)], vec![1, 0, 1, 1]).unwrap(),
            ],
            BigInt::one(),
        )
        .unwrap();
        let windows = vec![OffsetBox::square(1, 5), OffsetBox::point(&LatticePoint(vec![-3]))];
        let mut ev = WindowEvaluator::new(&f, &windows, 1).unwrap();
        for x in 0..256u64 {
            let got = ev.window_sums_at(&[x]);
            for (w, b) in windows.iter().enumerate() {
                assert_eq!(got[w], brute(&f, b, 8, &[x]), "x={x} w={w}");
            }
        }
    }

    #[test]
    fn pointwise_sums_match_brute_force_n2() {
        let f = FactorProduct::new(
            2,
            vec![
                Factor::new(vec![dp(0, 1), dp(1, 1)], vec![1, 2, 0, 5]).unwrap(),
                Factor::new(vec![dp(0, 4), dp(1, 5)], vec![1, 1, 1, 0]).unwrap(),
            ],
            BigInt::one(),
        )
        .unwrap();
        let windows = vec![OffsetBox::square(2, 3), OffsetBox::new(vec![-2, 1], vec![0, 2]).unwrap()];
        let mut ev = WindowEvaluator::new(&f, &windows, 0).unwrap();
        for a in 0..32u64 {
            for b in 0..32u64 {
                let got = ev.window_sums_at(&[a, b]);
                for (w, bx) in windows.iter().enumerate() {
                    assert_eq!(got[w], brute(&f, bx, 5, &[a, b]), "x=({a},{b}) w={w}");
                }
            }
        }
    }

    #[test]
    fn measures_match_enumeration() {
        let f = FactorProduct::new(
            1,
            vec![
                Factor::new(vec![dp(0, 1)], vec![2, 1]).unwrap(),
                Factor::new(vec![dp(0, 4), dp(0, 6)], vec![1, 0, 0, 1]).unwrap(),
            ],
            BigInt::one(),
        )
        .unwrap();
        let windows = vec![OffsetBox::square(1, 3)];
        for (lo, hi) in [(0, 3), (4, 6), (2, 2), (-5, 100)] {
            let mut ev = WindowEvaluator::new(&f, &windows, 0).unwrap();
            let got = ev.measure(&OutsideInterval { lo, hi }).unwrap();
            let bad = (0..64u64)
                .filter(|&x| {
                    let s = brute(&f, &windows[0], 6, &[x]);
                    s < lo || s > hi
                })
                .count();
            assert_eq!(got, rat(bad as i64, 64), "interval [{lo},{hi}]");
        }
    }

    #[test]
    fn guard_digits_do_not_change_measures() {
        let f = FactorProduct::new(
            2,
            vec![Factor::new(vec![dp(0, 2), dp(1, 6)], vec![1, 3, 0, 2]).unwrap()],
            BigInt::one(),
        )
        .unwrap();
        let windows = vec![OffsetBox::square(2, 4)];
        let pred = OutsideInterval { lo: 10, hi: 20 };
        let a = WindowEvaluator::new(&f, &windows, 0).unwrap().measure(&pred).unwrap();
        let b = WindowEvaluator::new(&f, &windows, 3).unwrap().measure(&pred).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_negative_tables() {
        let f = FactorProduct::new(1, vec![Factor::new(vec![dp(0, 1)], vec![-1, 1]).unwrap()], BigInt::one()).unwrap();
        assert!(WindowEvaluator::new(&f, &[OffsetBox::square(1, 2)], 0).is_err());
    }
}
