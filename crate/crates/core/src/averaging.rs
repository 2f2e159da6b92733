//! Square-window Birkhoff averages and deviation sets.

use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{LatticePoint, SquareWindow, SystemPoint, SystemSpec};
use crate::observables::{BaseObservable, Estimate, MaskedObservable, Mode};
use crate::scalar::{fmt_rational, Rational, Scalar};
use crate::towers::RokhlinTower;
use crate::window::{OffsetBox, OutsideInterval, WindowEvaluator};

/// `A(x, N, f)` by direct summation over `Q_N`.
pub fn birkhoff_average<S: Scalar>(
    spec: &SystemSpec,
    f: &MaskedObservable<S>,
    x: &SystemPoint,
    window: u64,
) -> Result<S> {
    let q = SquareWindow::new(window, spec.n)?;
    let mut sum = S::zero();
    for z in q.iter() {
        sum = sum + f.eval(&spec.apply(&z, x)?)?;
    }
    Ok(sum / S::from_u128(q.cardinality()))
}

/// `A(x, N, f)` for `N = 1..=n_max`, adding one shell `Q_{N+1} \ Q_N` per step.
pub fn birkhoff_averages<S: Scalar>(
    spec: &SystemSpec,
    f: &MaskedObservable<S>,
    x: &SystemPoint,
    n_max: u64,
) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(n_max as usize);
    let mut sum = S::zero();
    for side in 1..=n_max {
        let shell = if side == 1 {
            SquareWindow::new(1, spec.n)?.iter().collect::<Vec<_>>()
        } else {
            SquareWindow::new(side - 1, spec.n)?.shell().collect()
        };
        for z in shell {
            sum = sum + f.eval(&spec.apply(&z, x)?)?;
        }
        out.push(sum.clone() / S::from_u128((side as u128).pow(spec.n as u32)));
    }
    Ok(out)
}

/// Two-sided Hoeffding radius for the mean of `samples` values in `[0, 1]`.
pub fn hoeffding_radius(samples: u64, confidence: f64) -> f64 {
    ((2.0 / (1.0 - confidence)).ln() / (2.0 * samples as f64)).sqrt()
}

/// Digits that determine `A(x, N, f)`: relevant digits plus the carry
/// guard `ceil(log2 N) + 1`.
pub fn enumeration_depth<S: Scalar>(f: &MaskedObservable<S>, window: u64) -> Result<u32> {
    let d = f.to_factors()?.max_depth();
    Ok(d + ceil_log2(window) + 1)
}

fn ceil_log2(v: u64) -> u32 {
    if v <= 1 {
        0
    } else {
        64 - (v - 1).leading_zeros()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationReport {
    pub window: u64,
    pub threshold: Rational,
    pub integral: Estimate,
    /// `m{x : |A(x, N, f) - ∫f| > threshold}`.
    pub measure: Estimate,
}

impl DeviationReport {
    pub fn error_bound(&self) -> f64 {
        self.measure.error_bound
    }

    pub fn mode_name(&self) -> &'static str {
        if self.measure.exact.is_some() {
            "exact"
        } else {
            "mc"
        }
    }
}

/// The exact window-sum range that does not count as a deviation:
/// `|S / (den * N^n) - I| <= t`.
fn good_interval(integral: &Rational, den: &BigInt, cells: u128, threshold: &Rational) -> (i128, i128) {
    let scale = Rational::from_integer(den * BigInt::from(cells));
    let lo = ((integral - threshold) * &scale).ceil().to_integer();
    let hi = ((integral + threshold) * &scale).floor().to_integer();
    let clamp = |v: BigInt| v.to_i128().unwrap_or(if v.is_negative() { i128::MIN } else { i128::MAX });
    (clamp(lo), clamp(hi))
}

/// Exact evaluator for `S(x) = sum_{z in Q_N} f(T^z x)` in scaled units.
pub fn window_evaluator<S: Scalar>(
    f: &MaskedObservable<S>,
    window: u64,
    guard: u32,
) -> Result<WindowEvaluator> {
    let fp = f.to_factors()?;
    WindowEvaluator::new(&fp, &[OffsetBox::square(fp.n, window)], guard)
}

pub fn deviation_measure<S: Scalar>(
    spec: &SystemSpec,
    f: &MaskedObservable<S>,
    window: u64,
    threshold: &S,
    mode: Mode,
) -> Result<DeviationReport> {
    deviation_measure_guarded(spec, f, window, threshold, mode, 0)
}

/// As [`deviation_measure`] with `guard` extra free digits in exact mode.
pub fn deviation_measure_guarded<S: Scalar>(
    spec: &SystemSpec,
    f: &MaskedObservable<S>,
    window: u64,
    threshold: &S,
    mode: Mode,
    guard: u32,
) -> Result<DeviationReport> {
    if window == 0 {
        return Err(Error::InvalidArgument("window side must be at least 1".into()));
    }
    let t = threshold
        .to_rational()
        .ok_or_else(|| Error::InvalidArgument("threshold must be finite".into()))?;
    match mode {
        Mode::Exact => {
            if !spec.is_odometer() {
                return Err(Error::UnsupportedMode("exact deviation needs the odometer".into()));
            }
            let fp = f.to_factors()?;
            let integral = fp.integral()?;
            let cells = (window as u128).pow(spec.n as u32);
            let (lo, hi) = good_interval(&integral, &fp.denom, cells, &t);
            let mut ev = WindowEvaluator::new(&fp, &[OffsetBox::square(spec.n, window)], guard)?;
            let m = ev.measure(&OutsideInterval { lo, hi })?;
            Ok(DeviationReport {
                window,
                threshold: t,
                integral: Estimate::exact(integral),
                measure: Estimate::exact(m),
            })
        }
        Mode::MonteCarlo { samples, confidence, seed } => {
            if samples == 0 {
                return Err(Error::InvalidArgument("Monte Carlo needs samples".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut hits = 0u64;
            let integral;
            if spec.is_odometer() {
                let fp = f.to_factors()?;
                let exact = fp.integral()?;
                let cells = (window as u128).pow(spec.n as u32);
                let (lo, hi) = good_interval(&exact, &fp.denom, cells, &t);
                let mut ev = WindowEvaluator::new(&fp, &[OffsetBox::square(spec.n, window)], 0)?;
                let depth = *ev.depths().iter().max().unwrap_or(&1);
                for _ in 0..samples {
                    let x = spec.sample(&mut rng);
                    let p = x.as_odometer().expect("odometer sample");
                    let s = ev.window_sums_at(&p.prefixes(depth))[0];
                    if s < lo || s > hi {
                        hits += 1;
                    }
                }
                integral = Estimate::exact(exact);
            } else {
                let mean = match (&f.base, f.masks.is_empty()) {
                    (BaseObservable::Step(g), true) => g.mean(),
                    _ => return Err(Error::UnsupportedMode("torus observables are unmasked step functions".into())),
                };
                let tf = t.as_f64();
                for _ in 0..samples {
                    let x = spec.sample(&mut rng);
                    let a = birkhoff_average(spec, f, &x, window)?;
                    if (a.as_f64() - mean.as_f64()).abs() > tf {
                        hits += 1;
                    }
                }
                integral = Estimate {
                    exact: mean.to_rational(),
                    value: mean.as_f64(),
                    error_bound: 0.0,
                    samples: 0,
                };
            }
            Ok(DeviationReport {
                window,
                threshold: t,
                integral,
                measure: Estimate {
                    exact: None,
                    value: hits as f64 / samples as f64,
                    error_bound: hoeffding_radius(samples, confidence),
                    samples,
                },
            })
        }
    }
}

/// Literal route: enumerate every digit prefix to [`enumeration_depth`] and
/// sum the window directly. Exponential; for small instances only.
pub fn deviation_measure_enumerated<S: Scalar>(
    f: &MaskedObservable<S>,
    window: u64,
    threshold: &Rational,
    max_work: u128,
) -> Result<Rational> {
    let fp = f.to_factors()?;
    let n = fp.n;
    let depth = enumeration_depth(f, window)?;
    if depth > 62 {
        return Err(Error::BudgetExceeded(format!("enumeration depth {depth}")));
    }
    let points = 1u128 << (depth as u128 * n as u128).min(127);
    let cells = (window as u128).pow(n as u32);
    if depth as usize * n > 100 || points.saturating_mul(cells) > max_work {
        return Err(Error::BudgetExceeded(format!(
            "enumeration of 2^{} points x {cells} cells",
            depth as usize * n
        )));
    }
    let integral = fp.integral()?;
    let (lo, hi) = good_interval(&integral, &fp.denom, cells, threshold);
    let modulus = 1u64 << depth;
    let mut bad = 0u128;
    let mut x = vec![0u64; n];
    let mut y = vec![0u64; n];
    for idx in 0..points {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = ((idx >> (i as u32 * depth)) as u64) & (modulus - 1);
        }
        let mut s = 0i128;
        for z in SquareWindow::new(window, n)?.iter() {
            for i in 0..n {
                y[i] = (x[i] + z.0[i] as u64) & (modulus - 1);
            }
            s += fp.eval_scaled(&y);
        }
        if s < lo || s > hi {
            bad += 1;
        }
    }
    Ok(Rational::new(BigInt::from(bad), BigInt::from(points)))
}

/// Cross-checks the window-sum evaluator against direct summation at
/// random points with unbounded digit tails. Returns the number of points
/// checked, keeping total work near `work`.
pub fn verify_depth_sufficiency<S: Scalar>(
    spec: &SystemSpec,
    f: &MaskedObservable<S>,
    window: u64,
    points: u64,
    work: u128,
    seed: u64,
) -> Result<u64> {
    if !spec.is_odometer() {
        return Ok(0);
    }
    let fp = f.to_factors()?;
    let mut ev = WindowEvaluator::new(&fp, &[OffsetBox::square(spec.n, window)], 0)?;
    let depth = *ev.depths().iter().max().unwrap_or(&1);
    let cells = (window as u128).pow(spec.n as u32).max(1);
    let budget = ((work / cells) as u64).min(points);
    let scale = Rational::from_integer(fp.denom.clone() * BigInt::from(cells));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..budget {
        let x = spec.sample(&mut rng);
        let p = x.as_odometer().expect("odometer sample");
        let fast = ev.window_sums_at(&p.prefixes(depth))[0];
        let direct = birkhoff_average(spec, f, &x, window)?
            .to_rational()
            .ok_or_else(|| Error::InvalidArgument("non-finite average".into()))?;
        if direct * &scale != Rational::from_integer(BigInt::from(fast)) {
            return Err(Error::CertificateFailed(format!(
                "window sum mismatch at {p} for N = {window}"
            )));
        }
    }
    Ok(budget)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma3Report {
    /// `|∫_{C_k} f - (1 - a) ∫f|` with `C_k = X \ U_k`.
    pub residuals: Vec<Rational>,
    /// `m(T^z C_k Δ C_k)` for each tower and test shift.
    pub invariance_defects: Vec<Vec<Rational>>,
    pub shifts: Vec<LatticePoint>,
}

impl Lemma3Report {
    pub fn render(&self) -> String {
        self.residuals.iter().map(fmt_rational).collect::<Vec<_>>().join(" ")
    }
}

/// Residuals of `∫_{C_k} f → (1 - a) ∫f` over a sequence of towers of
/// common measure `a`.
pub fn check_lemma3<S: Scalar>(
    spec: &SystemSpec,
    f: &BaseObservable<S>,
    towers: &[Arc<RokhlinTower>],
    shifts: &[LatticePoint],
) -> Result<Lemma3Report> {
    if !spec.is_odometer() {
        return Err(Error::UnsupportedMode("residuals are exact on the odometer only".into()));
    }
    let Some(first) = towers.first() else {
        return Ok(Lemma3Report { residuals: vec![], invariance_defects: vec![], shifts: shifts.to_vec() });
    };
    let a = first.measure().clone();
    if towers.iter().any(|t| t.measure() != &a) {
        return Err(Error::InvalidArgument("towers must share one measure".into()));
    }
    let plain = MaskedObservable::new(f.clone());
    let total = plain.to_factors()?.integral()?;
    let target = (Rational::one() - &a) * &total;
    let mut residuals = Vec::with_capacity(towers.len());
    let mut defects = Vec::with_capacity(towers.len());
    for t in towers {
        let on_c = plain.masked(t.clone()).to_factors()?.integral()?;
        residuals.push((on_c - &target).abs());
        // The complement has the same symmetric difference as U.
        defects.push(
            shifts
                .iter()
                .map(|z| t.almost_invariance_defect(z))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(Lemma3Report { residuals, invariance_defects: defects, shifts: shifts.to_vec() })
}

/// Strictness helper used by certificates.
pub fn exceeds(value: &Rational, bound: &Rational) -> bool {
    value > bound
}
