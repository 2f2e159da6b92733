//! Drives one configured experiment and writes its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_traits::Zero;

use crate::averaging::{check_lemma3, deviation_measure, deviation_measure_enumerated, DeviationReport};
use crate::config::{Experiment, RunConfig};
use crate::cylinder::DigitPos;
use crate::error::{Error, Result};
use crate::lattice::LatticePoint;
use crate::observables::{MaskedObservable, Mode};
use crate::scalar::{fmt_rational, rat, Rational, Scalar};
use crate::slowdown::{
    epsilon_trim, uniform_deviation_experiment, ConstructionParams, ConstructionState, FinalReport,
};
use crate::towers::{build_tower, DigitRegistry, RokhlinTower};

/// Naive enumeration is attempted below this many window terms.
const ENUMERATION_WORK: u128 = 1 << 26;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub passed: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body)?;
        self.files.push(path);
        Ok(())
    }
}

fn measure_text(r: &DeviationReport) -> String {
    r.measure.render()
}

fn deviation_row(k: usize, r: &DeviationReport) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        k,
        r.window,
        fmt_rational(&r.threshold),
        measure_text(r),
        r.error_bound(),
        r.mode_name(),
        r.measure.samples
    )
}

const DEVIATION_HEADER: &str = "k,N,threshold,measure,error_bound,mode,samples\n";

fn header(cfg: &RunConfig) -> String {
    format!(
        "experiment: {}\nconfig_sha256: {}\nsystem: {:?} n={}\nmode: {}\nseed: {}\n",
        cfg.experiment.name(),
        cfg.hash,
        cfg.spec.kind,
        cfg.spec.n,
        match cfg.mode {
            Mode::Exact => "exact".to_string(),
            Mode::MonteCarlo { samples, confidence, .. } => format!("mc samples={samples} confidence={confidence}"),
        },
        cfg.seed
    )
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut art = Artifacts::new(&cfg.out)?;
    let (passed, body) = match cfg.experiment {
        Experiment::Construct => construct(cfg, &mut art)?,
        Experiment::Verify => verify(cfg, &mut art)?,
        Experiment::Lemma3 => lemma3(cfg, &mut art)?,
        Experiment::Defect => defect(cfg, &mut art)?,
        Experiment::Remark2 => remark2(cfg, &mut art)?,
    };
    let summary = format!(
        "{}{}result: {}\n",
        header(cfg),
        body,
        if passed { "PASS" } else { "FAIL" }
    );
    art.write("summary.txt", &summary)?;
    Ok(RunOutcome { passed, summary, files: art.files })
}

/// Construction plus final report.
pub struct ConstructionRun {
    pub state: ConstructionState,
    pub trim_exponent: Option<u32>,
    pub final_report: Option<FinalReport>,
    /// Why the construction stopped early, when it did.
    pub aborted: Option<String>,
}

pub fn build_construction(cfg: &RunConfig) -> Result<ConstructionRun> {
    let seq = cfg
        .sequence
        .as_ref()
        .ok_or_else(|| Error::config("sequence", "missing"))?;
    let (sequence, trim_exponent) = match &seq.eps {
        Some(eps) => {
            let t = epsilon_trim(&seq.sequence, eps)?;
            (t.sequence, Some(t.exponent))
        }
        None => (seq.sequence.clone(), None),
    };
    let params = ConstructionParams {
        delta_rule: seq.delta_rule.clone(),
        n_max: seq.n_max,
        max_refinement_bits: seq.max_refinement_bits,
        mode: cfg.mode,
        seed: cfg.seed,
        ..ConstructionParams::default()
    };
    let mut state = ConstructionState::new(
        cfg.spec.clone(),
        cfg.observable.clone(),
        sequence,
        seq.floors.clone(),
        params,
    )?;
    let mut aborted = None;
    match state.run() {
        Ok(()) => {}
        Err(e @ (Error::SearchExhausted { .. } | Error::CertificateFailed(_))) => aborted = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    let all_passed = state.is_complete() && state.steps().iter().all(|s| s.passed());
    if aborted.is_none() && !all_passed {
        let k = state.steps().len();
        aborted = Some(format!("step {k} failed its certificates"));
    }
    let final_report = if all_passed { Some(state.finalize()?) } else { None };
    Ok(ConstructionRun { state, trim_exponent, final_report, aborted })
}

fn tower_line(k: usize, t: &RokhlinTower, window: u64) -> String {
    let digits: Vec<String> = t.refinement().iter().map(DigitPos::to_string).collect();
    let bounds = t.defect_bounds(window).ok();
    format!(
        "k={} h={} a_requested={} a_built={} digits=[{}] outer_bound={} inner_bound={}",
        k,
        t.height(),
        fmt_rational(t.requested()),
        fmt_rational(t.measure()),
        digits.join(","),
        bounds.as_ref().map(|b| fmt_rational(&b.outer)).unwrap_or_default(),
        bounds.as_ref().map(|b| fmt_rational(&b.inner)).unwrap_or_default(),
    )
}

fn write_construction(run: &ConstructionRun, eps: Option<&Rational>, art: &mut Artifacts) -> Result<(bool, String)> {
    let st = &run.state;
    let complete = run.final_report.is_some();
    let suffix = if complete { "csv" } else { "partial.csv" };
    let mut cert = String::from("k,N_k,h_k,a_prime_k,integral_k,measure,bound,pass\n");
    let mut dev = String::from(DEVIATION_HEADER);
    let mut towers = String::new();
    let mut body = String::new();
    let _ = writeln!(
        body,
        "entry: ||f_0|| = {} margin {}; 2*sum a = {} margin {}",
        fmt_rational(&st.entry().norm),
        fmt_rational(&st.entry().norm_margin),
        fmt_rational(&st.entry().mass),
        fmt_rational(&st.entry().mass_margin)
    );
    if let Some(j) = run.trim_exponent {
        let _ = writeln!(body, "eps trim: sequence scaled by 2^-{j}");
    }
    let terms: Vec<String> = st.sequence().terms().iter().map(fmt_rational).collect();
    let _ = writeln!(body, "sequence: [{}] delta_rule: {}", terms.join(", "), st.params().delta_rule);
    for s in st.steps() {
        let _ = writeln!(
            cert,
            "{},{},{},{},{},{},{},{}",
            s.k,
            s.window,
            s.height,
            fmt_rational(&s.a_prime),
            fmt_rational(&s.integral_after),
            fmt_rational(&s.inequality.value),
            fmt_rational(&s.inequality.bound),
            s.inequality.passed && s.drop.passed
        );
        for e in &s.scan {
            dev.push_str(&deviation_row(s.k, &e.report));
        }
        dev.push_str(&deviation_row(s.k, &s.deviation));
        let _ = writeln!(towers, "{}", tower_line(s.k, &s.tower, s.window));
        if let Some((outer, inner)) = &s.measured_defects {
            let _ = writeln!(
                towers,
                "  measured at N={}: outer={} inner={}",
                s.window,
                fmt_rational(outer),
                fmt_rational(inner)
            );
        }
        let _ = writeln!(body, "step {}: N={} h={} {}", s.k, s.window, s.height, s.inequality);
        let _ = writeln!(body, "  {}", s.drop);
        let _ = writeln!(body, "  {} (diagnostic)", s.drop_vs_initial);
        let _ = writeln!(body, "  window-sum cross-check points: {}", s.checked_points);
    }
    art.write(&format!("certification.{suffix}"), &cert)?;
    art.write(&format!("deviation.{suffix}"), &dev)?;
    art.write("towers.txt", &towers)?;
    let audit = st.audit_digits();
    let _ = writeln!(body, "digit audit: {}", if audit { "disjoint" } else { "COLLISION" });
    let mut passed = audit && complete;
    match &run.final_report {
        Some(fr) => {
            let mut fin = String::from("k,N_k,a_k,measure,bound,pass\n");
            for r in &fr.rows {
                let _ = writeln!(
                    fin,
                    "{},{},{},{},{},{}",
                    r.k,
                    r.window,
                    fmt_rational(&r.deviation.threshold),
                    measure_text(&r.deviation),
                    fmt_rational(&r.certificate.bound),
                    r.certificate.passed
                );
                let _ = writeln!(body, "final {}", r.certificate);
            }
            art.write("final.csv", &fin)?;
            let _ = writeln!(body, "integral f_0 = {} integral f = {}", fmt_rational(&fr.integral_initial), fmt_rational(&fr.integral_final));
            let _ = writeln!(body, "{}", fr.distance_certificate);
            passed &= fr.passed();
            if let Some(eps) = eps {
                let target = eps * &fr.integral_initial;
                let ok = fr.distance < target;
                let _ = writeln!(
                    body,
                    "eps: ||f_0 - f|| = {} < eps * integral f_0 = {} -> {}",
                    fmt_rational(&fr.distance),
                    fmt_rational(&target),
                    if ok { "pass" } else { "FAIL" }
                );
                passed &= ok;
            }
        }
        None => {
            let why = run.aborted.as_deref().unwrap_or("incomplete");
            let _ = writeln!(body, "construction aborted ({why}); CSVs are marked partial");
            passed = false;
        }
    }
    Ok((passed, body))
}

fn construct(cfg: &RunConfig, art: &mut Artifacts) -> Result<(bool, String)> {
    let run = build_construction(cfg)?;
    let eps = cfg.sequence.as_ref().and_then(|s| s.eps.clone());
    write_construction(&run, eps.as_ref(), art)
}

fn verify(cfg: &RunConfig, art: &mut Artifacts) -> Result<(bool, String)> {
    if !cfg.spec.is_odometer() {
        return verify_torus(cfg, art);
    }
    let run = build_construction(cfg)?;
    let eps = cfg.sequence.as_ref().and_then(|s| s.eps.clone());
    let (mut passed, mut body) = write_construction(&run, eps.as_ref(), art)?;
    let Some(fr) = &run.final_report else {
        return Ok((false, body));
    };
    let st = &run.state;
    let guarded = st.finalize_guarded(1)?;
    let same = guarded
        .rows
        .iter()
        .zip(&fr.rows)
        .all(|(a, b)| a.deviation.measure.exact == b.deviation.measure.exact);
    let _ = writeln!(body, "guard-digit recertification: {}", if same { "identical" } else { "MISMATCH" });
    passed &= same;
    let f = st.current();
    let mut dev = String::from(DEVIATION_HEADER);
    for r in &fr.rows {
        let exact = r.deviation.measure.exact.clone().expect("exact construction");
        match deviation_measure_enumerated(f, r.window, &r.deviation.threshold, ENUMERATION_WORK) {
            Ok(naive) => {
                let ok = naive == exact;
                let _ = writeln!(body, "enumeration k={}: {} -> {}", r.k, fmt_rational(&naive), if ok { "match" } else { "MISMATCH" });
                passed &= ok;
            }
            Err(Error::BudgetExceeded(why)) => {
                let _ = writeln!(body, "enumeration k={}: skipped ({why})", r.k);
            }
            Err(e) => return Err(e),
        }
        let mode = Mode::MonteCarlo { samples: cfg.samples, confidence: cfg.confidence, seed: cfg.seed ^ r.k as u64 };
        let mc = deviation_measure(&cfg.spec, f, r.window, &r.deviation.threshold, mode)?;
        let gap = (mc.measure.value - exact.as_f64()).abs();
        let _ = writeln!(
            body,
            "monte carlo k={}: {:.6} +- {:.6} vs exact {:.6} -> {}",
            r.k,
            mc.measure.value,
            mc.measure.error_bound,
            exact.as_f64(),
            if gap <= mc.measure.error_bound { "inside radius" } else { "outside radius" }
        );
        dev.push_str(&deviation_row(r.k, &mc));
    }
    art.write("verify_mc.csv", &dev)?;
    Ok((passed, body))
}

fn verify_torus(cfg: &RunConfig, art: &mut Artifacts) -> Result<(bool, String)> {
    let base = cfg
        .torus_observable
        .clone()
        .ok_or_else(|| Error::config("observable.steps", "torus runs need a step function"))?;
    let f = MaskedObservable::new(base);
    let threshold = cfg
        .sequence
        .as_ref()
        .and_then(|s| s.sequence.terms().first().cloned())
        .unwrap_or_else(|| rat(1, 10))
        .as_f64();
    let mut dev = String::from(DEVIATION_HEADER);
    let mut body = String::new();
    let mode = match cfg.mode {
        Mode::Exact => return Err(Error::config("mode", "exact mode needs the odometer")),
        m => m,
    };
    let mut window = 1u64;
    while window <= 256 {
        let r = deviation_measure(&cfg.spec, &f, window, &threshold, mode)?;
        dev.push_str(&deviation_row(0, &r));
        let _ = writeln!(body, "N={} measure {:.6} +- {:.6}", window, r.measure.value, r.measure.error_bound);
        window *= 2;
    }
    art.write("deviation.csv", &dev)?;
    Ok((true, body))
}

fn lemma3(cfg: &RunConfig, art: &mut Artifacts) -> Result<(bool, String)> {
    let l = cfg.lemma3.as_ref().ok_or_else(|| Error::config("lemma3", "missing"))?;
    let f = MaskedObservable::new(cfg.observable.clone());
    let depth = f.to_factors()?.max_depth();
    let towers = lemma3_towers(cfg.spec.n, depth, l.min_level, l.max_level, l.own_digits)?;
    let shifts: Vec<LatticePoint> = (0..cfg.spec.n).map(|i| LatticePoint::unit(cfg.spec.n, i)).collect();
    let report = check_lemma3(&cfg.spec, &cfg.observable, &towers, &shifts)?;
    let total = f.to_factors()?.integral()?;
    let mut csv = String::from("k,h,digit,residual,invariance_defect_e1\n");
    for (k, (t, r)) in towers.iter().zip(&report.residuals).enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            k + 1,
            t.height(),
            t.refinement()[0],
            fmt_rational(r),
            fmt_rational(&report.invariance_defects[k][0])
        );
    }
    art.write("lemma3.csv", &csv)?;
    let (ok, note) = lemma3_verdict(&report.residuals, &total, l.own_digits);
    Ok((ok, format!("integral f = {}\nresiduals: {}\n{note}\n", fmt_rational(&total), report.render())))
}

/// Towers of measure `1/2` and heights `2^m`, `m` in the level range, with
/// one refinement digit either at `m + 1` or above the observable's digits.
pub fn lemma3_towers(n: usize, depth: u32, min_level: u32, max_level: u32, own: bool) -> Result<Vec<Arc<RokhlinTower>>> {
    (min_level..=max_level)
        .map(|m| {
            let pos = if own { m + 1 } else { m.max(depth) + 1 };
            RokhlinTower::with_refinement(n, m, vec![DigitPos::new(0, pos)], 1).map(Arc::new)
        })
        .collect()
}

/// Own digits: non-increasing after the first entry and the last one below
/// `10^-3 ∫f`. Disjoint digits: every residual zero.
pub fn lemma3_verdict(residuals: &[Rational], integral: &Rational, own: bool) -> (bool, String) {
    if own {
        let monotone = residuals.windows(2).skip(1).all(|w| w[1] <= w[0]);
        let small = residuals.last().is_some_and(|r| *r < integral * rat(1, 1000));
        (monotone && small, format!("non-increasing: {monotone}; last below 1e-3 * integral: {small}"))
    } else {
        let zero = residuals.iter().all(Zero::is_zero);
        (zero, format!("all residuals zero: {zero}"))
    }
}

fn defect(cfg: &RunConfig, art: &mut Artifacts) -> Result<(bool, String)> {
    let mut csv = String::from("n,h,N,a,outer_bound,outer_measured,inner_bound,inner_measured,inner_equal,pass\n");
    let mut passed = true;
    let mut equalities = 0;
    for c in &cfg.defect {
        let row = defect_case(c.n, c.h, c.window, &c.a)?;
        passed &= row.passed();
        equalities += row.inner_equal() as usize;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            c.n,
            c.h,
            c.window,
            fmt_rational(&c.a),
            fmt_rational(&row.outer_bound),
            fmt_rational(&row.outer),
            fmt_rational(&row.inner_bound),
            fmt_rational(&row.inner),
            row.inner_equal(),
            row.passed()
        );
    }
    art.write("defect.csv", &csv)?;
    Ok((passed, format!("cases: {} inner equalities: {}\n", cfg.defect.len(), equalities)))
}

#[derive(Clone, Debug)]
pub struct DefectRow {
    pub outer: Rational,
    pub inner: Rational,
    pub outer_bound: Rational,
    pub inner_bound: Rational,
}

impl DefectRow {
    pub fn passed(&self) -> bool {
        self.outer <= self.outer_bound && self.inner <= self.inner_bound
    }

    pub fn inner_equal(&self) -> bool {
        self.inner == self.inner_bound
    }
}

pub fn defect_case(n: usize, h: u64, window: u64, a: &Rational) -> Result<DefectRow> {
    let spec = crate::lattice::SystemSpec::odometer(n)?;
    let mut reg = DigitRegistry::new(n);
    let t = build_tower(&spec, h, a, &mut reg, crate::towers::DEFAULT_REFINEMENT_BITS)?;
    let b = t.defect_bounds(window)?;
    let (outer, inner) = t.measured_defects(window)?;
    Ok(DefectRow { outer, inner, outer_bound: b.outer, inner_bound: b.inner })
}

fn remark2(cfg: &RunConfig, art: &mut Artifacts) -> Result<(bool, String)> {
    let r = cfg.remark2.as_ref().ok_or_else(|| Error::config("remark2", "missing"))?;
    let rep = uniform_deviation_experiment(&cfg.spec, &cfg.observable, &r.a1, r.n1, r.stretch, r.separation)?;
    let mut csv = String::from("N,threshold,measure,bound,pass\n");
    for row in &rep.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.window,
            fmt_rational(&rep.threshold),
            measure_text(&row.deviation),
            fmt_rational(&row.certificate.bound),
            row.certificate.passed
        );
    }
    art.write("remark2.csv", &csv)?;
    let mut body = String::new();
    let _ = writeln!(body, "tower: {}", rep.tower.describe());
    let _ = writeln!(body, "integral drop: {} threshold: {}", fmt_rational(&rep.drop), fmt_rational(&rep.threshold));
    let _ = writeln!(
        body,
        "budget at N={}: outer {} + inner {}; measured {} + {}",
        rep.budget.window,
        fmt_rational(&rep.budget.outer),
        fmt_rational(&rep.budget.inner),
        fmt_rational(&rep.measured_defects.0),
        fmt_rational(&rep.measured_defects.1)
    );
    let budget_ok = rep.measured_defects.0 <= rep.budget.outer && rep.measured_defects.1 <= rep.budget.inner;
    Ok((rep.passed() && budget_ok, body))
}
