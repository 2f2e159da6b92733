use num_traits::One;
use slowavg::lattice::SystemSpec;
use slowavg::observables::{BaseObservable, CylinderFunction, Mode};
use slowavg::scalar::{rat, Rational};
use slowavg::slowdown::{
    epsilon_trim, uniform_deviation_experiment, validate_entry, ConstructionParams, ConstructionState,
    SlowSequence, DEFAULT_SEPARATION,
};
use slowavg::towers::defect_bounds;

fn two(n: usize) -> BaseObservable<Rational> {
    BaseObservable::Cylinder(CylinderFunction::constant(n, rat(2, 1)))
}

fn sequence(v: &[(i64, i64)]) -> SlowSequence {
    SlowSequence::new(v.iter().map(|&(p, q)| rat(p, q)).collect()).unwrap()
}

fn state(a: &[(i64, i64)], floors: Vec<u64>, params: ConstructionParams) -> ConstructionState {
    let spec = SystemSpec::odometer(1).unwrap();
    ConstructionState::new(spec, two(1), sequence(a), floors, params).unwrap()
}

#[test]
fn entry_margins_for_the_flagship_sequence() {
    let a = sequence(&[(1, 8), (1, 16), (1, 32)]);
    let e = validate_entry(&two(1), &a).unwrap();
    assert_eq!(a.sum(), rat(7, 32));
    assert_eq!(e.mass, rat(7, 16));
    assert!(e.norm > Rational::one() + &e.mass);
}

#[test]
fn first_step_numbers() {
    let mut st = state(&[(1, 8)], vec![4], ConstructionParams::default());
    let s = st.step().unwrap().clone();
    assert_eq!(s.window, 5);
    assert_eq!(s.tower.measure().clone(), rat(1, 4));
    assert_eq!(s.integral_after, rat(3, 2));
    assert_eq!(s.integral_after, (Rational::one() - rat(1, 4)) * rat(2, 1));
    assert!(s.inequality.value >= rat(7, 8));
    assert!(s.inequality.passed && s.drop.passed);
    assert!(s.tower.refinement().iter().all(|p| p.pos > s.tower.level_depth()));
}

#[test]
fn rounded_tower_measure_still_certifies() {
    let params = ConstructionParams { max_refinement_bits: 6, ..ConstructionParams::default() };
    let mut st = state(&[(1, 10)], vec![4], params);
    let s = st.step().unwrap().clone();
    assert!(s.tower.was_rounded());
    assert_eq!(s.tower.measure().clone(), rat(12, 64));
    assert!(s.a_prime < rat(1, 10));
    assert_eq!(s.a_prime, s.tower.measure() / rat(2, 1));
    assert!(s.passed());
    let fr = st.finalize().unwrap();
    assert!(fr.passed());
}

#[test]
fn distance_follows_the_product_formula() {
    let mut st = state(&[(1, 8), (1, 16)], vec![4, 16], ConstructionParams::default());
    st.run().unwrap();
    assert!(st.steps().iter().all(|s| s.passed()));
    let fr = st.finalize().unwrap();
    let keep: Rational = st.steps().iter().map(|s| Rational::one() - &s.a_prime * rat(2, 1)).product();
    assert_eq!(fr.distance, rat(2, 1) * (Rational::one() - keep));
    assert_eq!(fr.distance, rat(11, 16));
    assert!(fr.distance <= rat(2, 1) * rat(2, 1) * rat(3, 16));
    assert!(fr.passed());
}

#[test]
fn integral_drop_is_proportional_to_the_previous_integral() {
    let mut st = state(&[(1, 8), (1, 16)], vec![4, 16], ConstructionParams::default());
    st.run().unwrap();
    let s = &st.steps()[1];
    let drop = &s.integral_before - &s.integral_after;
    assert_eq!(drop, &s.a_prime * rat(2, 1) * &s.integral_before);
    assert_eq!(drop, rat(3, 16));
    assert!(s.drop.passed);
    assert!(!s.drop_vs_initial.passed);
}

#[test]
fn monte_carlo_search_needs_a_fine_radius() {
    let params = ConstructionParams { mode: Mode::monte_carlo(100_000, 3), ..ConstructionParams::default() };
    let mut st = state(&[(1, 8)], vec![4], params);
    assert!(matches!(st.step(), Err(slowavg::Error::UnsupportedMode(_))));
}

#[test]
fn monte_carlo_first_step_certifies() {
    let params = ConstructionParams { mode: Mode::monte_carlo(2_000_000, 3), ..ConstructionParams::default() };
    let mut st = state(&[(1, 8)], vec![4], params);
    let s = st.step().unwrap().clone();
    assert!(s.deviation.measure.exact.is_none());
    let exact = 4095.0 / 4096.0;
    assert!((s.deviation.measure.value - exact).abs() <= s.deviation.measure.error_bound);
    assert!(s.inequality.passed);
}

#[test]
fn trim_exponent_is_minimal() {
    let a = sequence(&[(1, 5), (1, 10), (1, 20)]);
    let eps = rat(1, 100);
    let t = epsilon_trim(&a, &eps).unwrap();
    let loss = |j: u32| {
        let scale = Rational::new(1.into(), num_bigint::BigInt::from(1u64 << j));
        let keep: Rational = a.terms().iter().map(|v| Rational::one() - v * &scale * rat(2, 1)).product();
        Rational::one() - keep
    };
    assert!(loss(t.exponent) < eps);
    assert!(t.exponent == 0 || loss(t.exponent - 1) >= eps);
    assert_eq!(t.relative_loss, loss(t.exponent));
    assert_eq!(t.exponent, 7);
}

#[test]
fn uniform_budget_matches_closed_forms() {
    let spec = SystemSpec::odometer(1).unwrap();
    let r = uniform_deviation_experiment(&spec, &two(1), &rat(1, 8), 8, 8, DEFAULT_SEPARATION).unwrap();
    let closed = defect_bounds(r.tower.measure(), r.height, 64, 1).unwrap();
    assert_eq!((r.budget.outer.clone(), r.budget.inner.clone()), (closed.outer, closed.inner));
    assert!(r.measured_defects.0 <= r.budget.outer && r.measured_defects.1 <= r.budget.inner);
    assert_eq!(r.rows.iter().map(|row| row.window).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
    assert!(r.passed());
}
