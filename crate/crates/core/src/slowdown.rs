//! The sequential slow-convergence construction.
//!
//! Step `k` picks a time `N_k` at which `f_{k-1}` already averages well,
//! erects a tall tower `U_k` of measure about `2 a_k` on fresh digits, and
//! zeroes `f_{k-1}` on it. Inside the tower the `N_k`-average of `f_k`
//! vanishes, so a large set of points deviates from `∫f_k` by more than
//! `a_k`. Every such claim is checked as an exact rational comparison.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use num_traits::{One, Zero};

use crate::averaging::{deviation_measure_guarded, hoeffding_radius, verify_depth_sufficiency, DeviationReport};
use crate::cylinder::DigitPos;
use crate::error::{Error, Result};
use crate::lattice::SystemSpec;
use crate::observables::{BaseObservable, MaskedObservable, Mode};
use crate::scalar::{fmt_rational, parse_rational, pow2, rat, Rational, Scalar};
use crate::towers::{build_tower, choose_height, DefectBounds, DigitRegistry, RokhlinTower};

pub const DEFAULT_N_MAX: u64 = 1 << 40;

/// Finite truncation `a_1..a_K` with a declared bound on the omitted tail
/// `2 sum_{i > K} a_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowSequence {
    a: Vec<Rational>,
    tail_bound: Rational,
}

impl SlowSequence {
    pub fn new(a: Vec<Rational>) -> Result<Self> {
        Self::with_tail(a, Rational::zero())
    }

    pub fn with_tail(a: Vec<Rational>, tail_bound: Rational) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::EntryViolation("sequence: at least one term is required".into()));
        }
        if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| **v <= Rational::zero()) {
            return Err(Error::EntryViolation(format!(
                "sequence: a_{} = {} must be positive",
                i + 1,
                fmt_rational(v)
            )));
        }
        if tail_bound < Rational::zero() {
            return Err(Error::EntryViolation("sequence: tail bound must be nonnegative".into()));
        }
        let s = Self { a, tail_bound };
        let mass = s.mass();
        if mass >= Rational::one() {
            return Err(Error::EntryViolation(format!(
                "sequence: 2 * sum a_i = {} must be below 1",
                fmt_rational(&mass)
            )));
        }
        Ok(s)
    }

    pub fn terms(&self) -> &[Rational] {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn tail_bound(&self) -> &Rational {
        &self.tail_bound
    }

    pub fn sum(&self) -> Rational {
        self.a.iter().fold(Rational::zero(), |acc, v| acc + v)
    }

    /// `2 sum a_i + tail`.
    pub fn mass(&self) -> Rational {
        self.sum() * rat(2, 1) + &self.tail_bound
    }

    pub fn scaled(&self, factor: &Rational) -> Result<Self> {
        Self::with_tail(self.a.iter().map(|v| v * factor).collect(), &self.tail_bound * factor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryReport {
    pub norm: Rational,
    pub mass: Rational,
    /// `||f_0|| - (1 + 2 sum a_i)`.
    pub norm_margin: Rational,
    /// `1 - 2 sum a_i`.
    pub mass_margin: Rational,
}

/// Checks `||f_0|| > 1 + 2 sum a_i` and `2 sum a_i < 1` exactly.
pub fn validate_entry(f0: &BaseObservable<Rational>, a: &SlowSequence) -> Result<EntryReport> {
    if !f0.is_nonnegative() {
        return Err(Error::EntryViolation("observable: values must be nonnegative".into()));
    }
    let norm = match f0 {
        BaseObservable::Cylinder(c) => c.mean()?,
        BaseObservable::Step(s) => s.mean(),
    };
    let mass = a.mass();
    let norm_margin = &norm - (Rational::one() + &mass);
    let mass_margin = Rational::one() - &mass;
    if mass_margin <= Rational::zero() {
        return Err(Error::EntryViolation(format!(
            "sequence: 2 * sum a_i = {} must be below 1",
            fmt_rational(&mass)
        )));
    }
    if norm_margin <= Rational::zero() {
        return Err(Error::EntryViolation(format!(
            "observable: ||f_0|| = {} must exceed 1 + 2 * sum a_i = {}",
            fmt_rational(&norm),
            fmt_rational(&(Rational::one() + &mass))
        )));
    }
    Ok(EntryReport { norm, mass, norm_margin, mass_margin })
}

/// `δ_k = a_k / divisor`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRule {
    pub divisor: Rational,
}

impl DeltaRule {
    pub fn parse(s: &str) -> Result<Self> {
        let rest = s
            .trim()
            .strip_prefix("a/")
            .ok_or_else(|| Error::config("delta_rule", "expected the form \"a/q\""))?;
        let divisor = parse_rational(rest).ok_or_else(|| Error::config("delta_rule", "bad divisor"))?;
        if divisor <= Rational::zero() {
            return Err(Error::config("delta_rule", "divisor must be positive"));
        }
        Ok(DeltaRule { divisor })
    }

    pub fn delta(&self, a: &Rational) -> Rational {
        a / &self.divisor
    }
}

impl Default for DeltaRule {
    fn default() -> Self {
        DeltaRule { divisor: rat(100, 1) }
    }
}

impl fmt::Display for DeltaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a/{}", fmt_rational(&self.divisor))
    }
}

#[derive(Clone, Debug)]
pub struct ConstructionParams {
    pub delta_rule: DeltaRule,
    pub n_max: u64,
    pub max_refinement_bits: u32,
    pub mode: Mode,
    /// Random points for the runtime window-sum cross-check.
    pub check_points: u64,
    /// Direct-summation terms the cross-check may spend per step.
    pub check_work: u128,
    pub seed: u64,
}

impl Default for ConstructionParams {
    fn default() -> Self {
        ConstructionParams {
            delta_rule: DeltaRule::default(),
            n_max: DEFAULT_N_MAX,
            max_refinement_bits: crate::towers::DEFAULT_REFINEMENT_BITS,
            mode: Mode::Exact,
            check_points: 1000,
            check_work: 1 << 22,
            seed: 0,
        }
    }
}

/// Exact strict comparison `value > bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub name: String,
    pub value: Rational,
    pub bound: Rational,
    pub passed: bool,
}

impl Certificate {
    pub fn strictly_above(name: impl Into<String>, value: Rational, bound: Rational) -> Self {
        let passed = value > bound;
        Certificate { name: name.into(), value, bound, passed }
    }

    pub fn at_most(name: impl Into<String>, value: Rational, bound: Rational) -> Self {
        let passed = value <= bound;
        Certificate { name: name.into(), value, bound, passed }
    }

    pub fn strictly_below(name: impl Into<String>, value: Rational, bound: Rational) -> Self {
        let passed = value < bound;
        Certificate { name: name.into(), value, bound, passed }
    }
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} vs {} -> {}",
            self.name,
            fmt_rational(&self.value),
            fmt_rational(&self.bound),
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// One candidate time tried by the search.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanEntry {
    pub window: u64,
    pub report: DeviationReport,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub k: usize,
    pub a: Rational,
    pub window: u64,
    pub height: u64,
    pub tower: Arc<RokhlinTower>,
    /// Half the built tower measure.
    pub a_prime: Rational,
    pub delta: Rational,
    pub integral_before: Rational,
    pub integral_after: Rational,
    pub defect_bounds: DefectBounds<Rational>,
    pub measured_defects: Option<(Rational, Rational)>,
    pub scan: Vec<ScanEntry>,
    pub deviation: DeviationReport,
    /// Inequality (k): deviation measure at `(N_k, a_k)` above `1 - a_k`.
    pub inequality: Certificate,
    /// Integral drop above `1.9 a'_k ∫f_{k-1}`.
    pub drop: Certificate,
    /// Integral drop above `1.9 a'_k ∫f_0`.
    pub drop_vs_initial: Certificate,
    pub checked_points: u64,
}

impl StepRecord {
    pub fn passed(&self) -> bool {
        self.inequality.passed && self.drop.passed
    }
}

#[derive(Clone, Debug)]
pub struct FinalRow {
    pub k: usize,
    pub window: u64,
    pub deviation: DeviationReport,
    pub certificate: Certificate,
}

#[derive(Clone, Debug)]
pub struct FinalReport {
    pub rows: Vec<FinalRow>,
    pub integral_initial: Rational,
    pub integral_final: Rational,
    /// `||f_0 - f||_1`, exact.
    pub distance: Rational,
    /// `∫f_0 * 2 sum a'_k`.
    pub distance_bound: Rational,
    pub distance_certificate: Certificate,
    pub positive_certificate: Certificate,
}

impl FinalReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.certificate.passed)
            && self.distance_certificate.passed
            && self.positive_certificate.passed
    }
}

pub struct ConstructionState {
    spec: SystemSpec,
    f0: MaskedObservable<Rational>,
    sequence: SlowSequence,
    floors: Vec<u64>,
    params: ConstructionParams,
    registry: DigitRegistry,
    base_positions: BTreeSet<DigitPos>,
    current: MaskedObservable<Rational>,
    steps: Vec<StepRecord>,
    entry: EntryReport,
}

impl ConstructionState {
    pub fn new(
        spec: SystemSpec,
        f0: BaseObservable<Rational>,
        sequence: SlowSequence,
        floors: Vec<u64>,
        params: ConstructionParams,
    ) -> Result<Self> {
        if !spec.is_odometer() {
            return Err(Error::UnsupportedMode("the construction runs on the odometer".into()));
        }
        if floors.len() != sequence.len() {
            return Err(Error::config(
                "sequence.M",
                format!("{} time floors for {} terms", floors.len(), sequence.len()),
            ));
        }
        let entry = validate_entry(&f0, &sequence)?;
        let f0 = MaskedObservable::new(f0);
        let base_positions = f0.to_factors()?.relevant_positions();
        let mut registry = DigitRegistry::new(spec.n);
        registry.reserve(base_positions.iter().copied());
        Ok(ConstructionState {
            spec,
            current: f0.clone(),
            f0,
            sequence,
            floors,
            params,
            registry,
            base_positions,
            steps: Vec::new(),
            entry,
        })
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn entry(&self) -> &EntryReport {
        &self.entry
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn current(&self) -> &MaskedObservable<Rational> {
        &self.current
    }

    pub fn initial(&self) -> &MaskedObservable<Rational> {
        &self.f0
    }

    pub fn sequence(&self) -> &SlowSequence {
        &self.sequence
    }

    pub fn params(&self) -> &ConstructionParams {
        &self.params
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.sequence.len()
    }

    fn deviation(&self, f: &MaskedObservable<Rational>, window: u64, t: &Rational) -> Result<DeviationReport> {
        deviation_measure_guarded(&self.spec, f, window, t, self.params.mode, 0)
    }

    /// Candidate times: `s = max(M_k, N_{k-1}) + 1`, then powers of two above `s`.
    pub fn search_grid(&self, k: usize) -> Vec<u64> {
        let prev = self.steps.last().map(|s| s.window).unwrap_or(0);
        let s = self.floors[k - 1].max(prev) + 1;
        let mut grid = vec![s];
        let mut next = (s + 1).next_power_of_two();
        while next <= self.params.n_max && next > s {
            grid.push(next);
            next = match next.checked_mul(2) {
                Some(v) => v,
                None => break,
            };
        }
        grid.retain(|&n| n <= self.params.n_max);
        grid
    }

    /// First grid time at which `f_{k-1}` deviates by `a_k / 100` on a set
    /// of measure below `a_k / 100`.
    pub fn choose_n(&self, k: usize) -> Result<(u64, Vec<ScanEntry>)> {
        let a = &self.sequence.terms()[k - 1];
        let t = a / rat(100, 1);
        if let Mode::MonteCarlo { samples, confidence, .. } = self.params.mode {
            let radius = hoeffding_radius(samples, confidence);
            if float_to_rational(radius) >= t {
                let need = ((2.0 / (1.0 - confidence)).ln() / (2.0 * t.as_f64().powi(2))).ceil();
                return Err(Error::UnsupportedMode(format!(
                    "Monte Carlo radius {radius:.3e} cannot resolve the search tolerance {}; need at least {need} samples",
                    fmt_rational(&t)
                )));
            }
        }
        let mut scan = Vec::new();
        for window in self.search_grid(k) {
            let report = self.deviation(&self.current, window, &t)?;
            let upper = upper_value(&report);
            let accepted = upper < t;
            scan.push(ScanEntry { window, report, accepted });
            if accepted {
                return Ok((window, scan));
            }
        }
        Err(Error::SearchExhausted { k, n_max: self.params.n_max })
    }

    /// Runs step `k = steps + 1`.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let k = self.steps.len() + 1;
        if k > self.sequence.len() {
            return Err(Error::InvalidArgument("all steps already taken".into()));
        }
        if let Some(prev) = self.steps.last() {
            if !prev.passed() {
                return Err(Error::CertificateFailed(format!("step {} did not certify", prev.k)));
            }
        }
        let a = self.sequence.terms()[k - 1].clone();
        let (window, scan) = self.choose_n(k)?;
        let two_a = &a * rat(2, 1);
        let delta = self.params.delta_rule.delta(&a);
        let height = choose_height(window, self.spec.n, &two_a, &delta)?;
        let before: BTreeSet<DigitPos> = self.registry.used().collect();
        let tower = build_tower(&self.spec, height, &two_a, &mut self.registry, self.params.max_refinement_bits)?;
        if tower.refinement().iter().any(|p| before.contains(p)) {
            return Err(Error::InvalidArgument("tower reused a digit".into()));
        }
        let tower = Arc::new(tower);
        let a_prime = tower.measure() / rat(2, 1);
        let next = self.current.masked(tower.clone());

        let integral_before = self.current.to_factors()?.integral()?;
        let integral_after = next.to_factors()?.integral()?;
        let drop_value = &integral_before - &integral_after;
        let drop = Certificate::strictly_above(
            format!("drop_{k}"),
            drop_value.clone(),
            rat(19, 10) * &a_prime * &integral_before,
        );
        let f0_integral = self.entry.norm.clone();
        let drop_vs_initial = Certificate::strictly_above(
            format!("drop_vs_initial_{k}"),
            drop_value,
            rat(19, 10) * &a_prime * f0_integral,
        );

        let defect_bounds = tower.defect_bounds(window)?;
        let measured_defects = match self.params.mode {
            Mode::Exact => Some(tower.measured_defects(window)?),
            Mode::MonteCarlo { .. } => None,
        };
        let deviation = self.deviation(&next, window, &a)?;
        let inequality = Certificate::strictly_above(
            format!("inequality_{k}"),
            lower_value(&deviation),
            Rational::one() - &a,
        );
        let checked_points = verify_depth_sufficiency(
            &self.spec,
            &next,
            window,
            self.params.check_points,
            self.params.check_work,
            self.params.seed ^ k as u64,
        )?;

        self.current = next;
        self.steps.push(StepRecord {
            k,
            a,
            window,
            height,
            tower,
            a_prime,
            delta,
            integral_before,
            integral_after,
            defect_bounds,
            measured_defects,
            scan,
            deviation,
            inequality,
            drop,
            drop_vs_initial,
            checked_points,
        });
        Ok(self.steps.last().expect("just pushed"))
    }

    /// Runs the remaining steps, stopping at the first failed certificate.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_complete() {
            if !self.step()?.passed() {
                break;
            }
        }
        Ok(())
    }

    /// Tower digits never collide with each other or with the base digits.
    pub fn audit_digits(&self) -> bool {
        let mut seen = self.base_positions.clone();
        for s in &self.steps {
            for p in s.tower.refinement() {
                if !seen.insert(*p) {
                    return false;
                }
            }
        }
        true
    }

    /// Re-measures every `(N_k, a_k)` for the final `f` against
    /// `1 - 2 sum_{i >= k} a'_i - tail`.
    pub fn finalize(&self) -> Result<FinalReport> {
        self.finalize_guarded(0)
    }

    pub fn finalize_guarded(&self, guard: u32) -> Result<FinalReport> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("no steps to finalize".into()));
        }
        let f = &self.current;
        let mut rows = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let tail: Rational = self.steps[s.k - 1..]
                .iter()
                .fold(Rational::zero(), |acc, r| acc + &r.a_prime);
            let bound = Rational::one() - tail * rat(2, 1) - self.sequence.tail_bound();
            let deviation = deviation_measure_guarded(&self.spec, f, s.window, &s.a, self.params.mode, guard)?;
            let certificate =
                Certificate::strictly_above(format!("final_{}", s.k), lower_value(&deviation), bound);
            rows.push(FinalRow { k: s.k, window: s.window, deviation, certificate });
        }
        let integral_initial = self.entry.norm.clone();
        let integral_final = f.to_factors()?.integral()?;
        let distance = self.f0.l1_distance(f, &self.spec, Mode::Exact)?.exact.expect("exact mode");
        let mass: Rational = self.steps.iter().fold(Rational::zero(), |acc, r| acc + &r.a_prime);
        let distance_bound = &integral_initial * mass * rat(2, 1);
        let distance_certificate = Certificate::at_most("distance", distance.clone(), distance_bound.clone());
        let positive_certificate =
            Certificate::strictly_above("final_integral", integral_final.clone(), Rational::zero());
        Ok(FinalReport {
            rows,
            integral_initial,
            integral_final,
            distance,
            distance_bound,
            distance_certificate,
            positive_certificate,
        })
    }
}

/// Exact value, or the lower confidence end in Monte Carlo mode.
fn lower_value(r: &DeviationReport) -> Rational {
    match &r.measure.exact {
        Some(v) => v.clone(),
        None => float_to_rational(r.measure.value - r.measure.error_bound),
    }
}

fn upper_value(r: &DeviationReport) -> Rational {
    match &r.measure.exact {
        Some(v) => v.clone(),
        None => float_to_rational(r.measure.value + r.measure.error_bound),
    }
}

fn float_to_rational(v: f64) -> Rational {
    Rational::from_float(v).unwrap_or_else(Rational::zero)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonTrim {
    pub sequence: SlowSequence,
    /// The sequence was scaled by `2^-exponent`.
    pub exponent: u32,
    /// `1 - prod (1 - 2 a_i)`: the relative mass the towers may remove.
    pub relative_loss: Rational,
}

/// Relative mass removed by independent towers of measures `2 a_i`.
pub fn relative_loss(a: &SlowSequence) -> Rational {
    let keep = a
        .terms()
        .iter()
        .fold(Rational::one(), |acc, v| acc * (Rational::one() - v * rat(2, 1)));
    Rational::one() - keep + a.tail_bound()
}

/// Scales the sequence by the largest `2^-j` that makes the removed mass
/// a fraction below `eps` of `∫f_0`. Returns it unchanged when it already is.
pub fn epsilon_trim(a: &SlowSequence, eps: &Rational) -> Result<EpsilonTrim> {
    if *eps <= Rational::zero() {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    for j in 0..=200u32 {
        let factor = Rational::one() / pow2(j);
        let s = a.scaled(&factor)?;
        let loss = relative_loss(&s);
        if loss < *eps {
            return Ok(EpsilonTrim { sequence: s, exponent: j, relative_loss: loss });
        }
    }
    Err(Error::InvalidArgument("eps is too small to reach by scaling".into()))
}

#[derive(Clone, Debug)]
pub struct UniformRow {
    pub window: u64,
    pub deviation: DeviationReport,
    pub certificate: Certificate,
}

#[derive(Clone, Debug)]
pub struct UniformReport {
    pub tower: Arc<RokhlinTower>,
    pub height: u64,
    pub drop: Rational,
    pub threshold: Rational,
    pub budget: DefectBounds<Rational>,
    pub measured_defects: (Rational, Rational),
    pub rows: Vec<UniformRow>,
}

impl UniformReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.certificate.passed)
    }
}

pub const DEFAULT_SEPARATION: u64 = 1 << 7;

/// One tower, many times: for `N` on the doubling grid over
/// `[N_1, stretch * N_1]`, the deviation set at `0.9 * (∫f_0 - ∫f_1)` has
/// measure above `1 - (outer + inner)` evaluated at the largest `N`.
pub fn uniform_deviation_experiment(
    spec: &SystemSpec,
    f0: &BaseObservable<Rational>,
    a1: &Rational,
    n1: u64,
    stretch: u64,
    separation: u64,
) -> Result<UniformReport> {
    if stretch == 0 || n1 == 0 {
        return Err(Error::InvalidArgument("stretch and N_1 must be positive".into()));
    }
    let top = n1
        .checked_mul(stretch)
        .ok_or_else(|| Error::InvalidArgument("stretch overflows".into()))?;
    let height = top
        .checked_mul(separation)
        .and_then(u64::checked_next_power_of_two)
        .ok_or_else(|| Error::DigitBudgetExhausted("separated height overflows".into()))?;
    let f0 = MaskedObservable::new(f0.clone());
    let mut registry = DigitRegistry::new(spec.n);
    registry.reserve(f0.to_factors()?.relevant_positions());
    let tower = Arc::new(build_tower(
        spec,
        height,
        &(a1 * rat(2, 1)),
        &mut registry,
        crate::towers::DEFAULT_REFINEMENT_BITS,
    )?);
    let f1 = f0.masked(tower.clone());
    let drop = f0.to_factors()?.integral()? - f1.to_factors()?.integral()?;
    let threshold = &drop * rat(9, 10);
    let budget = tower.defect_bounds(top)?;
    let measured_defects = tower.measured_defects(top)?;
    let bound = Rational::one() - budget.total();
    let mut rows = Vec::new();
    let mut window = n1;
    loop {
        let deviation = deviation_measure_guarded(spec, &f1, window, &threshold, Mode::Exact, 0)?;
        let value = deviation.measure.exact.clone().expect("exact mode");
        let certificate = Certificate::strictly_above(format!("uniform_{window}"), value, bound.clone());
        rows.push(UniformRow { window, deviation, certificate });
        if window >= top {
            break;
        }
        window = (window * 2).min(top);
    }
    Ok(UniformReport { tower, height, drop, threshold, budget, measured_defects, rows })
}
